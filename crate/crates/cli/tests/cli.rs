use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use meanflow_cv::datasets::{DatasetKind, DatasetSpec};
use meanflow_cv::losses::TangentPolicy;
use meanflow_cv::trainer::{OptimizerConfig, TrainConfig, METRICS_HEADER};

fn mfcv(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfcv"))
        .args(args)
        .env("MFCV_OUT", root)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn tiny(dataset: DatasetSpec) -> TrainConfig {
    let mut c = TrainConfig::new(dataset);
    c.policy = TangentPolicy::ema_recipe();
    c.steps = 20;
    c.batch_size = 32;
    c.hidden = vec![8, 8];
    c.probe_every = 10;
    c.probe_replicas = 3;
    c.sw.n_samples = 128;
    c.sw.n_projections = 16;
    c
}

fn write_config(dir: &Path, name: &str, c: &TrainConfig) -> String {
    let p = dir.join(name);
    fs::write(&p, c.to_toml().unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn assert_manifest_lists_everything(dir: &Path) {
    let m = manifest(dir);
    let listed: Vec<String> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                assert!(listed.contains(&p.to_string_lossy().into_owned()), "{} missing from manifest", p.display());
            }
        }
    }
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn dump_config_round_trips_for_both_tags() {
    let tmp = tempfile::tempdir().unwrap();
    for tag in ["toy", "dgmm"] {
        let o = mfcv(tmp.path(), &["dump-config", tag]);
        ok(&o);
        let text = String::from_utf8(o.stdout).unwrap();
        assert!(text.contains("# published setup"));
        assert!(text.contains("# chosen here"));
        let cfg = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.probe_every, 2000);
        assert_eq!((cfg.sw.n_samples, cfg.sw.n_projections), (4096, 500));
        if tag == "dgmm" {
            assert_eq!(cfg.dataset.kind, DatasetKind::Dgmm);
            assert_eq!(cfg.dataset.modes(), 2 * cfg.dataset.d);
        }
    }
}

#[test]
fn train_writes_manifest_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &tiny(DatasetSpec::toy(DatasetKind::TwoMoons)));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&mfcv(tmp.path(), &["train", "--config", &cfg, "--out", a.to_str().unwrap()]));
    ok(&mfcv(tmp.path(), &["train", "--config", &cfg, "--out", b.to_str().unwrap()]));
    let ma = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(ma.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(ma.lines().count(), 3);
    assert_eq!(ma, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());
    assert_manifest_lists_everything(&a);
    assert_eq!(manifest(&a)["config_hash"], manifest(&b)["config_hash"]);
}

#[test]
fn train_without_out_uses_the_env_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &tiny(DatasetSpec::toy(DatasetKind::Pinwheel)));
    ok(&mfcv(tmp.path(), &["train", "--config", &cfg, "--steps", "5"]));
    assert!(tmp.path().join("train/final.ckpt").is_file());
    assert!(tmp.path().join("train/manifest.json").is_file());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = tiny(DatasetSpec::toy(DatasetKind::Checkerboard));
    c.checkpoint_every = 10;
    let cfg = write_config(tmp.path(), "c.toml", &c);
    let full = tmp.path().join("full");
    ok(&mfcv(tmp.path(), &["train", "--config", &cfg, "--out", full.to_str().unwrap()]));
    let half = tmp.path().join("half");
    ok(&mfcv(tmp.path(), &["train", "--config", &cfg, "--out", half.to_str().unwrap(), "--steps", "10"]));
    let resumed = tmp.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    fs::copy(half.join("metrics.csv"), resumed.join("metrics.csv")).unwrap();
    let ck = half.join("final.ckpt");
    ok(&mfcv(
        tmp.path(),
        &["train", "--config", &cfg, "--out", resumed.to_str().unwrap(), "--resume", ck.to_str().unwrap()],
    ));
    assert_eq!(fs::read(full.join("final.ckpt")).unwrap(), fs::read(resumed.join("final.ckpt")).unwrap());
    assert_eq!(
        fs::read_to_string(full.join("metrics.csv")).unwrap(),
        fs::read_to_string(resumed.join("metrics.csv")).unwrap()
    );
}

#[test]
fn sweep_failure_gives_nonzero_exit_and_keeps_good_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = tiny(DatasetSpec::toy(DatasetKind::EightGaussians));
    c.optimizer = OptimizerConfig::Sgd;
    c.lr = 1e30;
    let cfg = write_config(tmp.path(), "c.toml", &c);
    let out = tmp.path().join("sw");
    let o = mfcv(
        tmp.path(),
        &["sweep", "--config", &cfg, "--betas", "0,1", "--seeds", "1", "--out", out.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!manifest(&out)["failures"].as_array().unwrap().is_empty());
    assert!(out.join("sweep.csv").is_file());

    let mut good = tiny(DatasetSpec::toy(DatasetKind::EightGaussians));
    good.steps = 6;
    let cfg = write_config(tmp.path(), "g.toml", &good);
    let out = tmp.path().join("good");
    ok(&mfcv(
        tmp.path(),
        &["sweep", "--config", &cfg, "--betas", "0,1", "--seeds", "1,2", "--out", out.to_str().unwrap()],
    ));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("beta_1.00_seed_2/final.ckpt").is_file());

    let ev = tmp.path().join("ev");
    ok(&mfcv(
        tmp.path(),
        &["eval-sw", "--sweep-dir", out.to_str().unwrap(), "--eval-seeds", "3,4", "--out", ev.to_str().unwrap()],
    ));
    let grid = fs::read_to_string(ev.join("grid.csv")).unwrap();
    let rows: Vec<&str> = grid.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("2")));
    assert_eq!(fs::read_to_string(ev.join("eval.csv")).unwrap().lines().count(), 5);
    assert_manifest_lists_everything(&ev);
}

#[test]
fn invalid_config_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    fs::write(&p, "steps = 10\nbogus = 1\n[dataset]\nkind = \"two_moons\"\n[policy]\nbeta = 0.0\nproxy = \"none\"\n").unwrap();
    let o = mfcv(tmp.path(), &["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn probes_run_on_a_dgmm_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &tiny(DatasetSpec::dgmm(2, 3)));
    let run = tmp.path().join("run");
    ok(&mfcv(tmp.path(), &["train", "--config", &cfg, "--out", run.to_str().unwrap()]));
    let r = run.to_str().unwrap();

    let pv = tmp.path().join("pv");
    ok(&mfcv(
        tmp.path(),
        &["probe-variance", "--run", r, "--betas", "0,1", "--n", "40", "--out", pv.to_str().unwrap()],
    ));
    assert_eq!(fs::read_to_string(pv.join("variance.csv")).unwrap().lines().count(), 3);
    assert_eq!(fs::read_to_string(pv.join("loss_variance.csv")).unwrap().lines().count(), 5);
    assert_manifest_lists_everything(&pv);

    let pb = tmp.path().join("pb");
    ok(&mfcv(
        tmp.path(),
        &["probe-beta", "--run", r, "--n-per-t", "8", "--bias", "ema", "--out", pb.to_str().unwrap()],
    ));
    let per_t = fs::read_to_string(pb.join("beta_per_t.csv")).unwrap();
    assert_eq!(per_t.lines().count(), 6);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(pb.join("summary.json")).unwrap()).unwrap();
    let m = summary["beta_star_matrix"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&m));

    let pg = tmp.path().join("pg");
    ok(&mfcv(
        tmp.path(),
        &["probe-gap", "--run", r, "--n-per-t", "1", "--fit-steps", "5", "--out", pg.to_str().unwrap()],
    ));
    assert_eq!(fs::read_to_string(pg.join("gap.csv")).unwrap().lines().count(), 3);

    let ev = tmp.path().join("ev");
    ok(&mfcv(tmp.path(), &["eval-sw", "--run", r, "--out", ev.to_str().unwrap()]));
    let row = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert!(row.lines().nth(1).unwrap().starts_with("dgmm,2,1,42,0,128,16,"));

    let fm = tmp.path().join("fm");
    ok(&mfcv(
        tmp.path(),
        &["field-map", "--config", &cfg, "--n", "4", "--t", "0.5", "--out", fm.to_str().unwrap()],
    ));
    assert_eq!(fs::read_to_string(fm.join("field.csv")).unwrap().lines().count(), 17);
}

#[test]
fn probe_beta_rejects_toy_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &tiny(DatasetSpec::toy(DatasetKind::TwoMoons)));
    let run = tmp.path().join("run");
    ok(&mfcv(tmp.path(), &["train", "--config", &cfg, "--out", run.to_str().unwrap(), "--steps", "2"]));
    let o = mfcv(tmp.path(), &["probe-beta", "--run", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reproduce_fig1_emits_three_grids() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&mfcv(tmp.path(), &["reproduce", "fig1"]));
    let dir = tmp.path().join("reproduce/fig1");
    for t in ["0.25", "0.50", "0.75"] {
        let csv = fs::read_to_string(dir.join(format!("field_t{t}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 64 * 64 + 1);
        assert!(dir.join(format!("field_t{t}.svg")).is_file());
    }
    assert_manifest_lists_everything(&dir);
}

#[test]
fn reproduce_fig2_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("f2");
    ok(&mfcv(
        tmp.path(),
        &["reproduce", "fig2", "--only", "two_moons", "--steps", "4", "--betas", "0,1", "--out", out.to_str().unwrap()],
    ));
    let csv = fs::read_to_string(out.join("fig2.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "dataset,beta,runs,var_trace_mean,var_trace_sem");
    assert_eq!(csv.lines().count(), 3);
    assert!(fs::read_to_string(out.join("fig2.svg")).unwrap().contains("<svg"));
}

#[test]
fn dump_dataset_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mfcv(tmp.path(), &["dump-dataset", "dgmm", "--d", "3", "--n", "5", "--seed", "7"]);
    ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x0,x1,x2");
    assert_eq!(lines.len(), 6);
    let again = mfcv(tmp.path(), &["dump-dataset", "dgmm", "--d", "3", "--n", "5", "--seed", "7"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
    assert_eq!(mfcv(tmp.path(), &["dump-dataset", "moons"]).status.code(), Some(2));
}

#[test]
fn probe_asymmetry_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("pa");
    ok(&mfcv(tmp.path(), &["probe-asymmetry", "--steps", "20", "--out", out.to_str().unwrap()]));
    let csv = fs::read_to_string(out.join("asymmetry.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("0.5,"));
}

use meanflow_cv::datasets::{fixtures, Dataset, DatasetKind, DatasetSpec};
use meanflow_cv::eval::{evaluate_model_once, SwConfig};
use meanflow_cv::losses::TangentPolicy;
use meanflow_cv::net::{Activation, Architecture, Checkpoint, MlpModel};
use meanflow_cv::rng::{step_rng, stream_rng, Stream};
use meanflow_cv::trainer::*;
use meanflow_cv::Error;

fn tiny(kind: DatasetKind) -> TrainConfig {
    let mut c = TrainConfig::new(DatasetSpec::toy(kind));
    c.policy = TangentPolicy::ema_recipe();
    c.steps = 30;
    c.batch_size = 32;
    c.hidden = vec![16, 16];
    c.probe_every = 10;
    c.probe_replicas = 3;
    c.sw = SwConfig {
        n_samples: 256,
        n_projections: 32,
        ..SwConfig::default()
    };
    c
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn zero_learning_rate_leaves_parameters_and_ema_unchanged() {
    let mut c = tiny(DatasetKind::TwoMoons);
    c.lr = 0.0;
    let mut t = Trainer::new(c).unwrap();
    let before = t.model().params().to_vec();
    t.step().unwrap();
    assert_eq!(t.model().params(), &before[..]);
    assert_eq!(t.ema().shadow(), &before[..]);
    assert_eq!(t.current_step(), 1);
}

#[test]
fn identical_configs_give_identical_records() {
    let c = tiny(DatasetKind::Checkerboard);
    let a = train(c.clone(), None).unwrap();
    let b = train(c, None).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.final_sw1.to_bits(), b.final_sw1.to_bits());
    assert_eq!(a.rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![10, 20, 30]);
}

#[test]
fn checkpoint_resume_is_bit_exact() {
    let c = tiny(DatasetKind::Pinwheel);
    let mut straight = Trainer::new(c.clone()).unwrap();
    for _ in 0..20 {
        straight.step().unwrap();
    }

    let mut first = Trainer::new(c.clone()).unwrap();
    for _ in 0..10 {
        first.step().unwrap();
    }
    let mut bytes = Vec::new();
    first.checkpoint().write_to(&mut bytes).unwrap();
    let ck = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let mut resumed = Trainer::from_checkpoint(c, ck).unwrap();
    for _ in 0..10 {
        resumed.step().unwrap();
    }
    assert_eq!(straight.model().params(), resumed.model().params());
    assert_eq!(straight.ema().shadow(), resumed.ema().shadow());
    assert_eq!(straight.probe().unwrap(), resumed.probe().unwrap());
}

#[test]
fn resume_through_files_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(DatasetKind::TwoSpirals);
    let full = train(c.clone(), Some(&dir.path().join("full"))).unwrap();

    let mut half = c.clone();
    half.steps = 20;
    let part = dir.path().join("part");
    train(half, Some(&part)).unwrap();
    let rec = train_from(c, &part.join("final.ckpt"), Some(&part)).unwrap();
    assert_eq!(rec.rows, full.rows);
    assert_eq!(read_metrics(&part.join("metrics.csv")).unwrap(), full.rows);
}

#[test]
fn resume_rejects_mismatched_config() {
    let c = tiny(DatasetKind::TwoMoons);
    let ck = Trainer::new(c.clone()).unwrap().checkpoint();
    let mut other = c.clone();
    other.seed += 1;
    assert!(Trainer::from_checkpoint(other, ck.clone()).is_err());
    let mut wider = c;
    wider.hidden = vec![17, 16];
    assert!(Trainer::from_checkpoint(wider, ck).is_err());
}

#[test]
fn ema_lag_is_bounded_by_discounted_update_norms() {
    let mut c = tiny(DatasetKind::EightGaussians);
    c.ema_decay = 0.9;
    c.lr = 1e-2;
    let mu = c.ema_decay;
    let mut t = Trainer::new(c).unwrap();
    // shadow − θ_n = −Σ_i μ^{n−i+1} Δθ_i, so the lag is at most the
    // discounted sum of update norms.
    let mut bound = 0.0;
    for _ in 0..40 {
        let before = t.model().params().to_vec();
        t.step().unwrap();
        let delta = l2(&before, t.model().params());
        bound = mu * (bound + delta);
        let lag = l2(t.ema().shadow(), t.model().params());
        assert!(lag.is_finite());
        assert!(lag <= bound * (1.0 + 1e-12) + 1e-15, "lag {lag} > bound {bound}");
    }
    assert!(bound > 0.0);
}

#[test]
fn identity_model_maps_noise_to_zero() {
    let arch = Architecture::new(2, &[], Activation::Silu).unwrap();
    let mut params = vec![0.0; arch.n_params()];
    for i in 0..2 {
        params[arch.weight_index(0, i, i)] = 1.0;
    }
    let m = MlpModel::from_params(arch, params).unwrap();
    let out = one_step_sample(&m, &mut stream_rng(3, Stream::Eval), 50).unwrap();
    assert!(out.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn single_cell_sweep_is_a_train_call() {
    let mut c = tiny(DatasetKind::TwoMoons);
    c.policy = TangentPolicy::vanilla();
    let table = sweep(&c, &[0.0], &[42], None, 1).unwrap();
    assert_eq!(table.cells.len(), 1);
    let rec = table.cells[0].record.as_ref().unwrap();
    let direct = train(c, None).unwrap();
    assert_eq!(rec.rows, direct.rows);
    assert_eq!(rec.final_sw1, direct.final_sw1);
    let s = table.summary_for(0.0).unwrap();
    assert_eq!((s.runs, s.sw1_sem), (1, 0.0));
}

#[test]
fn sweep_is_ordered_and_thread_count_invariant() {
    let mut c = tiny(DatasetKind::TwoMoons);
    c.steps = 10;
    let one = sweep(&c, &[1.0, 0.0], &[5, 6], None, 1).unwrap();
    let two = sweep(&c, &[1.0, 0.0], &[5, 6], None, 2).unwrap();
    let key = |t: &SweepTable| t.cells.iter().map(|c| (c.beta, c.seed)).collect::<Vec<_>>();
    assert_eq!(key(&one), vec![(1.0, 5), (1.0, 6), (0.0, 5), (0.0, 6)]);
    assert_eq!(key(&one), key(&two));
    for (a, b) in one.cells.iter().zip(&two.cells) {
        assert_eq!(a.record.as_ref().unwrap().rows, b.record.as_ref().unwrap().rows);
    }
    assert!(sweep(&c, &[1.5], &[1], None, 1).is_err());
}

#[test]
fn divergence_aborts_and_keeps_last_good_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(DatasetKind::EightGaussians);
    c.optimizer = OptimizerConfig::Sgd;
    c.lr = 1e30;
    c.steps = 200;
    match train(c.clone(), Some(dir.path())) {
        Err(Error::Diverged { step, checkpoint }) => {
            assert!(step <= 200);
            let ck = Checkpoint::load(&checkpoint.unwrap()).unwrap();
            assert_eq!(ck.step, step - 1);
            assert!(ck.model.params().iter().all(|v| v.is_finite()));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    let table = sweep(&c, &[0.0], &[1], None, 1).unwrap();
    assert_eq!(table.failures().len(), 1);
    assert!(table.summary.is_empty());
}

#[test]
fn trained_eight_gaussians_beats_untrained_and_covers_modes() {
    let mut c = TrainConfig::new(DatasetSpec::toy(DatasetKind::EightGaussians));
    c.probe_every = c.steps;
    c.probe_sw = false;
    let data = Dataset::new(c.dataset.clone()).unwrap();
    let untrained = Trainer::new(c.clone()).unwrap();
    let before = evaluate_model_once(untrained.model(), &data, &c.sw, 0).unwrap().sw1;
    let mut t = Trainer::new(c.clone()).unwrap();
    for _ in 0..c.steps {
        let l = t.step().unwrap();
        assert!(l.total.is_finite());
    }
    let after = evaluate_model_once(t.model(), &data, &c.sw, 0).unwrap().sw1;
    assert!(before >= 5.0 * after, "untrained {before}, trained {after}");

    let (shift, scale) = data.standardization();
    let samples = one_step_sample(t.model(), &mut step_rng(9, Stream::Eval, 0), 4096).unwrap();
    let r = fixtures::EIGHT_GAUSSIANS_RADIUS;
    let sigma = fixtures::EIGHT_GAUSSIANS_NOISE;
    let near = samples
        .iter()
        .filter(|p| {
            let x = p[0] * scale[0] + shift[0];
            let y = p[1] * scale[1] + shift[1];
            (0..8).any(|k| {
                let a = k as f64 * std::f64::consts::FRAC_PI_4;
                ((x - r * a.cos()).powi(2) + (y - r * a.sin()).powi(2)).sqrt() <= 3.0 * sigma
            })
        })
        .count();
    assert!(near as f64 >= 0.9 * 4096.0, "{near} of 4096 near a mode");
}

//! Figure and table recipes.

use std::path::Path;

use anyhow::{bail, Result};
use meanflow_cv::datasets::{DatasetKind, DatasetSpec};
use meanflow_cv::gmm_oracle::{three_mode_fixture, Lattice};
use meanflow_cv::losses::TangentPolicy;
use meanflow_cv::trainer::{sweep, SweepTable, TrainConfig, SWEEP_HEADER};

use crate::commands::{field_maps, finish, out_dir, write_file};
use crate::manifest::ExperimentManifest;
use crate::plot;
use crate::{Cli, FigureTag, ReproduceArgs, Scale};

const FULL_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
const SUB_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

struct Plan {
    steps: u64,
    seeds: Vec<u64>,
    betas: Vec<f64>,
}

fn plan(cli: &Cli, a: &ReproduceArgs) -> Plan {
    let full = cli.scale == Scale::Full;
    let steps = a.steps.unwrap_or(if full { 200_000 } else { 20_000 });
    let default_seeds: Vec<u64> = match (a.tag, full) {
        (_, true) | (FigureTag::TableToy, false) => vec![42, 0, 1],
        _ => vec![42],
    };
    let seeds = if !a.seeds.is_empty() {
        a.seeds.clone()
    } else if let Some(s) = cli.seed {
        vec![s]
    } else {
        default_seeds
    };
    let betas = if !a.betas.is_empty() {
        a.betas.clone()
    } else {
        match (a.tag, full) {
            (FigureTag::Fig2, _) => SUB_GRID.to_vec(),
            (FigureTag::TableToy, _) => vec![0.0, 1.0],
            (FigureTag::TableDgmm, false) => vec![0.0, 0.5, 1.0],
            _ => FULL_GRID.to_vec(),
        }
    };
    Plan { steps, seeds, betas }
}

fn toy_kinds(only: &[String]) -> Result<Vec<DatasetKind>> {
    if only.is_empty() {
        return Ok(DatasetKind::TOYS.to_vec());
    }
    only.iter()
        .map(|s| {
            let k: DatasetKind = s.parse()?;
            if !k.is_toy() {
                bail!("{s} is not a toy dataset");
            }
            Ok(k)
        })
        .collect()
}

fn base_config(dataset: DatasetSpec, steps: u64, with_probes: bool) -> TrainConfig {
    let mut c = TrainConfig::new(dataset);
    c.policy = TangentPolicy::ema_recipe();
    c.steps = steps;
    c.probe_every = c.probe_every.min(steps.max(1));
    c.probe_sw = false;
    if !with_probes {
        // One probe row at the end keeps the metrics file meaningful.
        c.probe_every = steps.max(1);
    }
    c
}

/// Runs one sweep per labelled config; failures go to the manifest.
fn run_all(
    items: Vec<(String, TrainConfig)>,
    p: &Plan,
    dir: &Path,
    threads: usize,
    manifest: &mut ExperimentManifest,
) -> Result<Vec<(String, SweepTable)>> {
    let mut out = Vec::new();
    for (label, cfg) in items {
        eprintln!("{label}: {} betas x {} seeds x {} steps", p.betas.len(), p.seeds.len(), cfg.steps);
        let table = sweep(&cfg, &p.betas, &p.seeds, Some(&dir.join(&label)), threads)?;
        for c in table.failures() {
            manifest.failures.push(format!(
                "{label} beta {} seed {}: {}",
                c.beta,
                c.seed,
                c.error.as_deref().unwrap_or("")
            ));
        }
        out.push((label, table));
    }
    Ok(out)
}

pub fn run(cli: &Cli, a: &ReproduceArgs) -> Result<usize> {
    let p = plan(cli, a);
    if cli.scale == Scale::Full {
        eprintln!("warning: full scale trains {} steps per cell; expect hours per dataset", p.steps);
    }
    let name = match a.tag {
        FigureTag::Fig1 => "fig1",
        FigureTag::Fig2 => "fig2",
        FigureTag::Fig3 => "fig3",
        FigureTag::TableToy => "table_toy",
        FigureTag::TableDgmm => "table_dgmm",
    };
    let dir = out_dir(cli, &a.out, &format!("reproduce/{name}"));
    let mut manifest = ExperimentManifest::new(
        &format!("reproduce {name}"),
        &format!("{:?} steps={} seeds={:?} betas={:?} only={:?}", cli.scale, p.steps, p.seeds, p.betas, a.only),
        p.seeds.clone(),
    );
    match a.tag {
        FigureTag::Fig1 => {
            let n = if cli.scale == Scale::Full { 128 } else { 64 };
            field_maps(&three_mode_fixture(), &[0.25, 0.5, 0.75], Lattice::square(3.0, n), &dir)?;
        }
        FigureTag::Fig2 => {
            let items = toy_kinds(&a.only)?
                .into_iter()
                .map(|k| (k.to_string(), base_config(DatasetSpec::toy(k), p.steps, true)))
                .collect();
            let tables = run_all(items, &p, &dir, cli.threads, &mut manifest)?;
            let mut csv = String::from("dataset,beta,runs,var_trace_mean,var_trace_sem\n");
            let mut series = Vec::new();
            for &beta in &p.betas {
                series.push((format!("beta={beta}"), Vec::new()));
            }
            for (label, t) in &tables {
                for (i, &beta) in p.betas.iter().enumerate() {
                    let v = t.summary_for(beta).map(|s| (s.runs, s.var_trace_mean, s.var_trace_sem));
                    if let Some((runs, m, s)) = v {
                        csv.push_str(&format!("{label},{beta},{runs},{m},{s}\n"));
                    }
                    series[i].1.push(v.map_or(f64::NAN, |x| x.1));
                }
            }
            write_file(&dir.join("fig2.csv"), &csv)?;
            let cats: Vec<String> = tables.iter().map(|(l, _)| l.clone()).collect();
            write_file(
                &dir.join("fig2.svg"),
                &plot::grouped_bars("Gradient trace covariance (tail average)", "Tr Cov[grad]", &cats, &series, true),
            )?;
            print!("{csv}");
        }
        FigureTag::Fig3 => {
            let items = toy_kinds(&a.only)?
                .into_iter()
                .map(|k| (k.to_string(), base_config(DatasetSpec::toy(k), p.steps, false)))
                .collect();
            let tables = run_all(items, &p, &dir, cli.threads, &mut manifest)?;
            let mut csv = String::from("dataset,beta,runs,sw1_mean,sw1_sem\n");
            let mut series = Vec::new();
            for (label, t) in &tables {
                for s in &t.summary {
                    csv.push_str(&format!("{label},{},{},{},{}\n", s.beta, s.runs, s.sw1_mean, s.sw1_sem));
                }
                series.push(plot::Series {
                    name: label.clone(),
                    points: t.summary.iter().map(|s| (s.beta, s.sw1_mean)).collect(),
                });
            }
            write_file(&dir.join("fig3.csv"), &csv)?;
            write_file(&dir.join("fig3.svg"), &plot::lines("SW1 at the final step", "beta", "SW1", &series, false))?;
            print!("{csv}");
        }
        FigureTag::TableToy => {
            let items = toy_kinds(&a.only)?
                .into_iter()
                .map(|k| (k.to_string(), base_config(DatasetSpec::toy(k), p.steps, false)))
                .collect();
            let tables = run_all(items, &p, &dir, cli.threads, &mut manifest)?;
            let mut csv = String::from(SWEEP_HEADER);
            csv.push('\n');
            for (_, t) in &tables {
                csv.push_str(t.summary_csv().split_once('\n').map_or("", |x| x.1));
            }
            write_file(&dir.join("table_toy.csv"), &csv)?;
            print!("{csv}");
        }
        FigureTag::TableDgmm => {
            let dims: Vec<usize> = if a.only.is_empty() {
                if cli.scale == Scale::Full {
                    vec![2, 4, 8, 16, 32, 64]
                } else {
                    vec![2, 4, 8, 16]
                }
            } else {
                a.only.iter().map(|s| s.parse()).collect::<std::result::Result<_, _>>()?
            };
            let items = dims
                .iter()
                .map(|&d| (format!("dgmm_d{d}"), base_config(DatasetSpec::dgmm(d, 0), p.steps, false)))
                .collect();
            let tables = run_all(items, &p, &dir, cli.threads, &mut manifest)?;
            let mut csv = String::from("d,beta,runs,sw1_mean,sw1_sem,sw2_mean,sw2_sem\n");
            let mut series = Vec::new();
            for ((_, t), d) in tables.iter().zip(&dims) {
                for s in &t.summary {
                    csv.push_str(&format!("{d},{},{},{},{},{},{}\n", s.beta, s.runs, s.sw1_mean, s.sw1_sem, s.sw2_mean, s.sw2_sem));
                }
                series.push(plot::Series {
                    name: format!("d={d}"),
                    points: t.summary.iter().map(|s| (s.beta, s.sw1_mean)).collect(),
                });
            }
            write_file(&dir.join("table_dgmm.csv"), &csv)?;
            write_file(&dir.join("table_dgmm.svg"), &plot::lines("DGMM SW1 by beta", "beta", "SW1", &series, true))?;
            print!("{csv}");
        }
    }
    finish(manifest, &dir)
}

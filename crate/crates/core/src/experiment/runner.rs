//! Seed sweeps and the head ablation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::csv::emit_csv;
use super::summary::{to_rows, AblationReport, AblationRow, Aggregate, Phases, RiseAndFall, RunFailure, RunSummary};
use crate::data::{make_params, sample_pairs, DataParams};
use crate::diagnostics::{classify, detect_phases, neuron_corr_matrix, rise_and_fall_score, PhaseConfig};
use crate::error::{Error, Result};
use crate::net::{batch_loss, feature_overlaps, forward_batch, init_state, train_observed, TrajectoryRecord};
use crate::population::{opt_value, pop_head_grad, PopulationSnapshot};
use crate::rng::{substream, Rng, Stream};

pub const THREADS_ENV: &str = "NCSSL_THREADS";

/// Population quantities at one logged step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationRow {
    pub t: usize,
    pub loss: f64,
    pub u: [f64; 2],
    pub q: [f64; 2],
    pub phi: [f64; 2],
    pub xi: [f64; 2],
    pub head_grad: [f64; 2],
}

impl PopulationRow {
    const HEADER: &'static str = "t,pop_loss,U1,U2,Q1,Q2,Phi1,Phi2,Xi1,Xi2,gradE12,gradE21";

    fn at(t: usize, snap: Option<&PopulationSnapshot>) -> Self {
        match snap {
            Some(s) => {
                let hg = pop_head_grad(s);
                PopulationRow {
                    t,
                    loss: s.loss,
                    u: s.u,
                    q: s.q,
                    phi: s.phi,
                    xi: hg.xi,
                    head_grad: hg.grad,
                }
            }
            None => {
                let nan = [f64::NAN; 2];
                PopulationRow {
                    t,
                    loss: f64::NAN,
                    u: nan,
                    q: nan,
                    phi: nan,
                    xi: nan,
                    head_grad: nan,
                }
            }
        }
    }

    fn csv_line(&self) -> String {
        let v = [
            self.loss,
            self.u[0],
            self.u[1],
            self.q[0],
            self.q[1],
            self.phi[0],
            self.phi[1],
            self.xi[0],
            self.xi[1],
            self.head_grad[0],
            self.head_grad[1],
        ];
        let mut s = self.t.to_string();
        for x in v {
            s.push(',');
            s.push_str(&x.to_string());
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub trajectory: Vec<TrajectoryRecord>,
    pub population: Option<Vec<PopulationRow>>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunArtifacts>,
    pub aggregate: Aggregate,
}

impl ExperimentOutcome {
    pub fn summaries(&self) -> Vec<RunSummary> {
        self.runs.iter().map(|r| r.summary.clone()).collect()
    }
}

/// Data parameters and the misc generator positioned after any basis draw.
fn params_and_misc(config: &ExperimentConfig, seed: u64) -> Result<(DataParams, Rng)> {
    let mut misc = substream(seed, Stream::Misc);
    let params = make_params(
        config.d,
        config.patches,
        config.feature_patches,
        config.alpha1,
        config.alpha2,
        config.sigma,
        config.basis.into(),
        &mut misc,
    )?;
    Ok((params, misc))
}

/// Trains and diagnoses one seed without touching the file system.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    let start = Instant::now();
    let (params, mut misc) = params_and_misc(config, seed)?;
    let tc = config.train_config(seed);
    let state = init_state(params.d, config.m, &mut substream(seed, Stream::Init));
    let track_population = config.emit_population && config.m == 2;
    let mut population = Vec::new();
    let outcome = train_observed(&params, &tc, state, |t, s| {
        if track_population {
            let snap = PopulationSnapshot::compute(s.w.view(), s.e.view(), &params).ok();
            population.push(PopulationRow::at(t, snap.as_ref()));
        }
        Ok(())
    })?;
    let fin = &outcome.final_state;

    let eval = sample_pairs(&params, config.eval_samples, &mut misc);
    let loss = batch_loss(&forward_batch(fin, &eval)?);
    let corr = neuron_corr_matrix(fin.w.view(), &params, config.corr_samples, &mut misc)?;

    let phase_cfg = PhaseConfig::new(config.eta, config.eta_head);
    let report = detect_phases(&outcome.trajectory, &params, &phase_cfg)?;
    let (b, _, _) = feature_overlaps(fin.w.view(), &params);
    let classification = classify(b.view(), corr.view(), &phase_cfg);
    let head_series: Vec<f64> = outcome.trajectory.iter().map(TrajectoryRecord::head_offdiag_norm).collect();
    let (peak, last, ratio) = rise_and_fall_score(&head_series);

    let summary = RunSummary {
        name: config.name.clone(),
        seed,
        config_hash: config.hash(),
        train_head: config.train_head,
        final_b: to_rows(&b),
        final_e: to_rows(&fin.e),
        corr_matrix: to_rows(&corr),
        loss_sq: loss.loss_sq,
        loss_corr: loss.loss_corr,
        opt: opt_value(config.patches, config.feature_patches)?,
        phases: Phases {
            t1: report.t1,
            t2: report.t2,
            t3: report.t3,
        },
        head_peak: report.head_peak,
        head_rise_fall: RiseAndFall { peak, last, ratio },
        classification,
        neuron_roles: report.neuron_roles,
        wall_time: start.elapsed().as_secs_f64(),
    };
    info!(
        "{} seed {seed}: {} |corr| {:.3} L_corr {:.4} ({:.1}s)",
        config.name,
        summary.classification,
        summary.max_abs_corr(),
        summary.loss_corr,
        summary.wall_time
    );
    Ok(RunArtifacts {
        summary,
        trajectory: outcome.trajectory,
        population: track_population.then_some(population),
    })
}

pub fn trajectory_path(config: &ExperimentConfig, seed: u64) -> PathBuf {
    config.output_dir.join(format!("{}_seed{seed}.csv", config.name))
}

pub fn summary_path(config: &ExperimentConfig, seed: u64) -> PathBuf {
    config.output_dir.join(format!("{}_seed{seed}.json", config.name))
}

pub fn population_path(config: &ExperimentConfig, seed: u64) -> PathBuf {
    config.output_dir.join(format!("{}_seed{seed}_population.csv", config.name))
}

pub fn aggregate_path(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join(format!("{}_aggregate.json", config.name))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run(config: &ExperimentConfig, run: &RunArtifacts) -> Result<()> {
    let seed = run.summary.seed;
    emit_csv(&run.trajectory, config.m, &trajectory_path(config, seed))?;
    write_json(&run.summary, &summary_path(config, seed))?;
    if let Some(rows) = &run.population {
        let mut text = String::from(PopulationRow::HEADER);
        text.push('\n');
        for r in rows {
            text.push_str(&r.csv_line());
            text.push('\n');
        }
        let path = population_path(config, seed);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Thread count: explicit config value, else `NCSSL_THREADS`, else rayon's
/// default.
pub fn thread_count(config: &ExperimentConfig) -> Option<usize> {
    if config.threads > 0 {
        return Some(config.threads);
    }
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0)
}

fn pool(config: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(config) {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

/// Runs every seed, writes one CSV and one JSON per seed plus an aggregate
/// JSON. A failing seed is recorded and the others continue.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    for w in config.validate()? {
        warn!("{w}");
    }
    std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let seeds: Vec<u64> = config.seeds().collect();
    let results: Vec<(u64, Result<RunArtifacts>)> = pool(config)?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let run = run_seed(config, seed).and_then(|run| write_run(config, &run).map(|_| run));
                (seed, run)
            })
            .collect()
    });
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, result) in results {
        match result {
            Ok(run) => runs.push(run),
            Err(Error::Io { path, source }) => return Err(Error::Io { path, source }),
            Err(e) => {
                warn!("{} seed {seed} failed: {e}", config.name);
                failures.push(RunFailure {
                    seed,
                    error: format!("seed {seed}: {e}"),
                });
            }
        }
    }
    let summaries: Vec<RunSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let opt = opt_value(config.patches, config.feature_patches)?;
    let aggregate = Aggregate::from_runs(&config.name, &config.hash(), config.train_head, opt, &summaries, failures);
    write_json(&aggregate, &aggregate_path(config))?;
    Ok(ExperimentOutcome { runs, aggregate })
}

/// The two ablation arms derived from one config.
pub fn ablation_arms(config: &ExperimentConfig) -> (ExperimentConfig, ExperimentConfig) {
    let mut with = config.clone();
    with.train_head = true;
    with.name = format!("{}_head", config.name);
    let mut without = config.clone();
    without.train_head = false;
    without.name = format!("{}_nohead", config.name);
    (with, without)
}

pub fn ablation_path(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join(format!("{}_ablation.json", config.name))
}

/// Runs matched seeds with and without head training. Both arms see the
/// same data stream for each seed.
pub fn compare_head_ablation(config: &ExperimentConfig) -> Result<(AblationReport, ExperimentOutcome, ExperimentOutcome)> {
    let (with_cfg, without_cfg) = ablation_arms(config);
    let with = run_experiment(&with_cfg)?;
    let without = run_experiment(&without_cfg)?;
    let rows = with
        .runs
        .iter()
        .filter_map(|a| {
            let b = without.runs.iter().find(|b| b.summary.seed == a.summary.seed)?;
            Some(AblationRow {
                seed: a.summary.seed,
                with_head_corr: a.summary.mean_abs_corr(),
                without_head_corr: b.summary.mean_abs_corr(),
                with_head_class: a.summary.classification,
                without_head_class: b.summary.classification,
                with_head_excess_loss: a.summary.excess_loss(),
                without_head_excess_loss: b.summary.excess_loss(),
            })
        })
        .collect();
    let report = AblationReport {
        opt: with.aggregate.opt,
        with_head: with.aggregate.clone(),
        without_head: without.aggregate.clone(),
        rows,
    };
    write_json(&report, &ablation_path(config))?;
    Ok((report, with, without))
}

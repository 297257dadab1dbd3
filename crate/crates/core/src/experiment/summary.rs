//! Per-run summaries and cross-seed aggregates.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Feature;
use crate::diagnostics::{Classification, HeadPeak};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phases {
    #[serde(rename = "T1")]
    pub t1: Option<usize>,
    #[serde(rename = "T2")]
    pub t2: Option<usize>,
    #[serde(rename = "T3")]
    pub t3: Option<usize>,
}

impl Phases {
    pub fn all_found(&self) -> bool {
        self.t1.is_some() && self.t2.is_some() && self.t3.is_some()
    }

    pub fn ordered(&self) -> bool {
        match (self.t1, self.t2, self.t3) {
            (Some(a), Some(b), Some(c)) => a <= b && b <= c,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiseAndFall {
    pub peak: f64,
    pub last: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub train_head: bool,
    #[serde(rename = "final_B")]
    pub final_b: Vec<Vec<f64>>,
    #[serde(rename = "final_E")]
    pub final_e: Vec<Vec<f64>>,
    pub corr_matrix: Vec<Vec<f64>>,
    /// Losses of the final state on a held-out batch.
    pub loss_sq: f64,
    pub loss_corr: f64,
    pub opt: f64,
    pub phases: Phases,
    pub head_peak: HeadPeak,
    pub head_rise_fall: RiseAndFall,
    pub classification: Classification,
    pub neuron_roles: Vec<Feature>,
    pub wall_time: f64,
}

impl RunSummary {
    /// Largest off-diagonal `|corr|`.
    pub fn max_abs_corr(&self) -> f64 {
        off_diagonal(&self.corr_matrix).fold(0.0, |a: f64, x| a.max(x.abs()))
    }

    /// Smallest off-diagonal `|corr|`.
    pub fn min_abs_corr(&self) -> f64 {
        off_diagonal(&self.corr_matrix).fold(f64::INFINITY, |a: f64, x| a.min(x.abs()))
    }

    /// Mean off-diagonal `|corr|`.
    pub fn mean_abs_corr(&self) -> f64 {
        let v: Vec<f64> = off_diagonal(&self.corr_matrix).map(f64::abs).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn excess_loss(&self) -> f64 {
        self.loss_corr - self.opt
    }
}

fn off_diagonal(m: &[Vec<f64>]) -> impl Iterator<Item = f64> + '_ {
    m.iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j > i).map(|(_, &x)| x))
}

pub fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub name: String,
    pub config_hash: String,
    pub train_head: bool,
    pub runs: usize,
    pub diverse: usize,
    pub dimensional_collapse: usize,
    pub undetermined: usize,
    pub mean_abs_corr: f64,
    pub mean_excess_loss: f64,
    pub opt: f64,
    pub failures: Vec<RunFailure>,
}

impl Aggregate {
    pub fn from_runs(name: &str, config_hash: &str, train_head: bool, opt: f64, runs: &[RunSummary], failures: Vec<RunFailure>) -> Self {
        let count = |c: Classification| runs.iter().filter(|r| r.classification == c).count();
        let mean = |f: &dyn Fn(&RunSummary) -> f64| {
            if runs.is_empty() {
                f64::NAN
            } else {
                runs.iter().map(f).sum::<f64>() / runs.len() as f64
            }
        };
        Aggregate {
            name: name.to_string(),
            config_hash: config_hash.to_string(),
            train_head,
            runs: runs.len(),
            diverse: count(Classification::Diverse),
            dimensional_collapse: count(Classification::DimensionalCollapse),
            undetermined: count(Classification::Undetermined),
            mean_abs_corr: mean(&|r| r.mean_abs_corr()),
            mean_excess_loss: mean(&|r| r.excess_loss()),
            opt,
            failures,
        }
    }

    /// Fraction of all attempted seeds classified diverse.
    pub fn diverse_fraction(&self) -> f64 {
        let total = self.runs + self.failures.len();
        if total == 0 {
            0.0
        } else {
            self.diverse as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub with_head_corr: f64,
    pub without_head_corr: f64,
    pub with_head_class: Classification,
    pub without_head_class: Classification,
    pub with_head_excess_loss: f64,
    pub without_head_excess_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub opt: f64,
    pub with_head: Aggregate,
    pub without_head: Aggregate,
    pub rows: Vec<AblationRow>,
}

//! Variance and correlation statistics, collapse classification and phase
//! detection over logged trajectories.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{sample, DataParams, Feature};
use crate::error::{Error, Result};
use crate::net::{encoder_forward, TrajectoryRecord};
use crate::rng::Rng;

/// Empirical (biased) variances of `a` and `b` and their Pearson correlation.
pub fn variance_and_corr(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "series lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 values, got {n}")));
    }
    let nf = n as f64;
    let ma = a.iter().sum::<f64>() / nf;
    let mb = b.iter().sum::<f64>() / nf;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    va /= nf;
    vb /= nf;
    cov /= nf;
    for v in [va, vb] {
        if !(v > 0.0) {
            return Err(Error::DegenerateVariance { variance: v, len: n });
        }
    }
    let corr = (cov / (va * vb).sqrt()).clamp(-1.0, 1.0);
    Ok((va, vb, corr))
}

/// Pairwise correlation of encoder neurons over fresh unaugmented samples.
pub fn neuron_corr_matrix(w: ArrayView2<'_, f64>, params: &DataParams, n_samples: usize, rng: &mut Rng) -> Result<Array2<f64>> {
    if n_samples < 2 {
        return Err(Error::InvalidParameter(format!("n_samples = {n_samples} must be at least 2")));
    }
    if w.ncols() != params.d {
        return Err(Error::DimensionMismatch(format!(
            "weights have {} columns, d = {}",
            w.ncols(),
            params.d
        )));
    }
    let m = w.nrows();
    let mut outputs = vec![Vec::with_capacity(n_samples); m];
    for _ in 0..n_samples {
        let x = sample(params, rng);
        let f = encoder_forward(w, x.patches.view());
        for (col, v) in outputs.iter_mut().zip(f.iter()) {
            col.push(*v);
        }
    }
    corr_from_columns(&outputs)
}

fn corr_from_columns(columns: &[Vec<f64>]) -> Result<Array2<f64>> {
    let m = columns.len();
    let mut corr = Array2::eye(m);
    for i in 0..m {
        for j in i + 1..m {
            let (_, _, c) = variance_and_corr(&columns[i], &columns[j])?;
            corr[[i, j]] = c;
            corr[[j, i]] = c;
        }
    }
    if m == 1 {
        variance_and_corr(&columns[0], &columns[0])?;
    }
    Ok(corr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Diverse,
    DimensionalCollapse,
    Undetermined,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Classification::Diverse => "diverse",
            Classification::DimensionalCollapse => "dimensional_collapse",
            Classification::Undetermined => "undetermined",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    /// Threshold on the leading overlap that marks the first phase.
    pub theta1: f64,
    pub eta: f64,
    pub eta_head: f64,
    /// Use `E_{1,2}` instead of `E_{2,1}` in the second-phase test.
    pub literal_t2: bool,
    /// Dominant overlap must reach this fraction of `max |B|` for diversity.
    pub diverse_major: f64,
    /// Off-role overlaps must stay below this fraction of `max |B|`.
    pub diverse_cross: f64,
    /// Minimal pairwise `|corr|` for dimensional collapse.
    pub collapse_corr: f64,
    /// Each neuron's dominant `|B|` must reach this before any end state
    /// is assigned.
    pub min_learned: f64,
}

impl PhaseConfig {
    pub fn new(eta: f64, eta_head: f64) -> Self {
        PhaseConfig {
            theta1: 0.01,
            eta,
            eta_head,
            literal_t2: false,
            diverse_major: 0.5,
            diverse_cross: 0.2,
            collapse_corr: 0.9,
            min_learned: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPeak {
    pub step: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    #[serde(rename = "T1")]
    pub t1: Option<usize>,
    #[serde(rename = "T2")]
    pub t2: Option<usize>,
    #[serde(rename = "T3")]
    pub t3: Option<usize>,
    pub head_peak: HeadPeak,
    pub end_state: Classification,
    /// Dominant feature of each neuron in the final record.
    pub neuron_roles: Vec<Feature>,
    /// `(neuron, feature)` pair that plays the role of (1, 1), zero-based.
    pub leading_pair: Option<(usize, usize)>,
}

fn check_record(r: &TrajectoryRecord, m: usize) -> Result<()> {
    let missing = |what: &str| Err(Error::MissingField(format!("record at t = {} lacks {what}", r.t)));
    if r.b.dim() != (m, 2) {
        return missing("an m x 2 overlap matrix B");
    }
    if r.e.dim() != (m, m) {
        return missing("an m x m head E");
    }
    if r.r.len() != m {
        return missing("noise norms R");
    }
    if r.corr.dim() != (m, m) {
        return missing("the neuron correlation matrix");
    }
    Ok(())
}

fn dominant(b: ArrayView2<'_, f64>, j: usize) -> Feature {
    if b[[j, 1]].abs() > b[[j, 0]].abs() {
        Feature::Weak
    } else {
        Feature::Strong
    }
}

/// End-state label from final overlaps and correlations.
pub fn classify(b: ArrayView2<'_, f64>, corr: ArrayView2<'_, f64>, config: &PhaseConfig) -> Classification {
    let m = b.nrows();
    let max = b.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if !(max > 0.0) {
        return Classification::Undetermined;
    }
    let roles: Vec<Feature> = (0..m).map(|j| dominant(b, j)).collect();
    if (0..m).any(|j| b[[j, roles[j].index()]].abs() < config.min_learned) {
        return Classification::Undetermined;
    }
    let each_assigned = (0..m).all(|j| {
        let l = roles[j].index();
        b[[j, l]].abs() >= config.diverse_major * max && b[[j, 1 - l]].abs() <= config.diverse_cross * max
    });
    let covers_both = roles.contains(&Feature::Strong) && roles.contains(&Feature::Weak);
    if m >= 2 && each_assigned && covers_both {
        return Classification::Diverse;
    }
    let same_role = roles.iter().all(|&r| r == roles[0]);
    let correlated = (0..m).all(|i| (i + 1..m).all(|j| corr[[i, j]].abs() >= config.collapse_corr));
    if same_role && correlated {
        return Classification::DimensionalCollapse;
    }
    Classification::Undetermined
}

/// Scans a trajectory for the three phase boundaries.
///
/// The `(neuron, feature)` pair whose overlap first reaches `theta1` (ties
/// go to the larger overlap) is relabeled as (1, 1); the other feature is
/// feature 2 and neuron 2 is the other neuron with the largest final overlap
/// on feature 2. The second boundary is searched from the first and the
/// third from the second: before the head moves, the third test holds
/// vacuously.
pub fn detect_phases(trajectory: &[TrajectoryRecord], params: &DataParams, config: &PhaseConfig) -> Result<PhaseReport> {
    let first = trajectory
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty trajectory".into()))?;
    let m = first.neurons();
    for r in trajectory {
        check_record(r, m)?;
    }
    let last = trajectory.last().expect("non-empty");

    let head_peak = trajectory
        .iter()
        .map(|r| HeadPeak {
            step: r.t,
            value: r.head_offdiag_norm(),
        })
        .fold(
            HeadPeak {
                step: first.t,
                value: f64::NEG_INFINITY,
            },
            |best, h| if h.value > best.value { h } else { best },
        );

    let mut leading_pair = None;
    let mut t1_index = None;
    for (k, r) in trajectory.iter().enumerate() {
        let mut best: Option<((usize, usize), f64)> = None;
        for j in 0..m {
            for l in 0..2 {
                let v = r.b[[j, l]].abs();
                if v >= config.theta1 && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some(((j, l), v));
                }
            }
        }
        if let Some((pair, _)) = best {
            leading_pair = Some(pair);
            t1_index = Some(k);
            break;
        }
    }

    let mut t2_index = None;
    let mut t3_index = None;
    if let (Some((j1, l1)), Some(k1)) = (leading_pair, t1_index) {
        let l2 = 1 - l1;
        let j2 = (0..m)
            .filter(|&j| j != j1)
            .max_by(|&a, &b| last.b[[a, l2]].abs().total_cmp(&last.b[[b, l2]].abs()));
        if let Some(j2) = j2 {
            let log_d = (params.d as f64).ln();
            let head_entry = |r: &TrajectoryRecord| {
                if config.literal_t2 {
                    r.e[[j1, j2]]
                } else {
                    r.e[[j2, j1]]
                }
            };
            t2_index = (k1..trajectory.len()).find(|&k| {
                let r = &trajectory[k];
                r.r[j2] < head_entry(r).abs() / log_d
            });
            if let Some(k2) = t2_index {
                let ratio = if config.eta_head > 0.0 {
                    (config.eta / config.eta_head).sqrt()
                } else {
                    f64::INFINITY
                };
                t3_index = (k2..trajectory.len()).find(|&k| {
                    let r = &trajectory[k];
                    let head_term = ratio * r.e[[j2, j1]].abs();
                    let bar = 0.5 * r.b[[j1, l1]].abs().min(if head_term.is_nan() { f64::INFINITY } else { head_term });
                    r.b[[j2, l2]].abs() >= bar
                });
            }
        }
    }

    Ok(PhaseReport {
        t1: t1_index.map(|k| trajectory[k].t),
        t2: t2_index.map(|k| trajectory[k].t),
        t3: t3_index.map(|k| trajectory[k].t),
        head_peak,
        end_state: classify(last.b.view(), last.corr.view(), config),
        neuron_roles: (0..m).map(|j| dominant(last.b.view(), j)).collect(),
        leading_pair,
    })
}

/// Peak, final value and final/peak ratio of a head-norm series. A series
/// that never leaves zero (or is empty) has ratio 1.
pub fn rise_and_fall_score(series: &[f64]) -> (f64, f64, f64) {
    let peak = series.iter().fold(0.0f64, |a, &x| a.max(x));
    let last = series.last().copied().unwrap_or(0.0);
    let ratio = if peak > 0.0 { last / peak } else { 1.0 };
    (peak, last, ratio)
}

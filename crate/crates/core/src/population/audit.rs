//! Monte-Carlo audit of the closed forms against sampled data.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{opt_value, pop_head_grad, pop_weight_grad, Mat2, PopulationSnapshot};
use crate::data::{make_params, sample_pairs, DataParams, Feature, FeatureBasis};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::net::{backward_batch, forward_batch, init_state, ModelState};
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub se: f64,
}

impl MeanEstimate {
    fn from_sums(sum: f64, sum_sq: f64, n: f64) -> Self {
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0);
        MeanEstimate {
            mean,
            se: (var / n).sqrt(),
        }
    }

    /// `|x - mean| / se`; infinite when `se = 0` and they differ.
    pub fn z(&self, x: f64) -> f64 {
        let gap = (x - self.mean).abs();
        if gap == 0.0 {
            0.0
        } else {
            gap / self.se
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMoments {
    pub n: usize,
    /// `E[F_j^2]` on the first view.
    pub u: [MeanEstimate; 2],
    /// `E[G_j^2]` on the second view.
    pub q_inv_sq: [MeanEstimate; 2],
    /// `2 - sum_j corr(F_j, G_j)` over all samples.
    pub loss_corr: f64,
}

/// Streams `n` fresh pairs through the network in chunks.
pub fn empirical_moments(state: &ModelState, params: &DataParams, n: usize, chunk: usize, rng: &mut Rng) -> Result<EmpiricalMoments> {
    if state.neurons() != 2 {
        return Err(Error::DimensionMismatch("audit needs two neurons".into()));
    }
    let chunk = chunk.max(2);
    // Per neuron: sum F, F^2, F^4, G, G^2, G^4, FG.
    let mut s = [[0.0f64; 7]; 2];
    let mut done = 0;
    while done < n {
        let k = chunk.min(n - done).max(2);
        let pairs = sample_pairs(params, k, rng);
        let acts = forward_batch(state, &pairs)?;
        for i in 0..k {
            for j in 0..2 {
                let f = acts.mixed[[i, j]];
                let g = acts.f_target[[i, j]];
                let (f2, g2) = (f * f, g * g);
                let acc = &mut s[j];
                acc[0] += f;
                acc[1] += f2;
                acc[2] += f2 * f2;
                acc[3] += g;
                acc[4] += g2;
                acc[5] += g2 * g2;
                acc[6] += f * g;
            }
        }
        done += k;
    }
    let nf = done as f64;
    let mut loss = 2.0;
    for acc in &s {
        let (mf, mg) = (acc[0] / nf, acc[3] / nf);
        let cov = acc[6] / nf - mf * mg;
        let vf = acc[1] / nf - mf * mf;
        let vg = acc[4] / nf - mg * mg;
        loss -= cov / (vf * vg).sqrt();
    }
    Ok(EmpiricalMoments {
        n: done,
        u: std::array::from_fn(|j| MeanEstimate::from_sums(s[j][1], s[j][2], nf)),
        q_inv_sq: std::array::from_fn(|j| MeanEstimate::from_sums(s[j][4], s[j][5], nf)),
        loss_corr: loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    /// `<d L_corr / d w_j, v_l>` averaged over batches.
    pub weight: [[MeanEstimate; 2]; 2],
    /// `d L_corr / d E_{1,2}` and `d L_corr / d E_{2,1}`.
    pub head: [MeanEstimate; 2],
}

/// Mean of batch gradients over independent batches, halved to move from
/// the squared loss to the correlation loss.
pub fn empirical_gradient(
    state: &ModelState,
    params: &DataParams,
    batches: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<GradientEstimate> {
    if batches < 2 {
        return Err(Error::InvalidParameter("need at least two batches for a standard error".into()));
    }
    let mut sums = [[0.0f64; 2]; 6];
    for _ in 0..batches {
        let pairs = sample_pairs(params, batch_size, rng);
        let acts = forward_batch(state, &pairs)?;
        let g = backward_batch(state, &pairs, &acts);
        let mut values = [0.0; 6];
        for j in 0..2 {
            for f in Feature::ALL {
                values[2 * j + f.index()] = 0.5 * dot(g.w.row(j), params.feature(f));
            }
        }
        values[4] = 0.5 * g.e[[0, 1]];
        values[5] = 0.5 * g.e[[1, 0]];
        for (acc, v) in sums.iter_mut().zip(values) {
            acc[0] += v;
            acc[1] += v * v;
        }
    }
    let nb = batches as f64;
    let est = |k: usize| MeanEstimate::from_sums(sums[k][0], sums[k][1], nb);
    Ok(GradientEstimate {
        weight: [[est(0), est(1)], [est(2), est(3)]],
        head: [est(4), est(5)],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub d: usize,
    pub patches: usize,
    pub feature_patches: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub sigma: f64,
    pub states: usize,
    pub samples: usize,
    pub chunk: usize,
    pub grad_batches: usize,
    pub grad_batch_size: usize,
    pub loss_rel_tol: f64,
    pub z_tol: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            d: 16,
            patches: 8,
            feature_patches: 2,
            alpha1: 6.0,
            alpha2: 2.5,
            sigma: 1.0,
            states: 10,
            samples: 1_000_000,
            chunk: 8192,
            grad_batches: 20,
            grad_batch_size: 5000,
            loss_rel_tol: 0.02,
            z_tol: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateAudit {
    pub index: usize,
    pub pop_loss: f64,
    pub emp_loss: f64,
    pub loss_rel_err: f64,
    pub u_pop: [f64; 2],
    pub u_z: [f64; 2],
    pub q_inv_sq_pop: [f64; 2],
    pub q_inv_sq_z: [f64; 2],
    /// Feature components then head entries; empty when gradients were skipped.
    pub grad_z: Vec<f64>,
    pub loss_pass: bool,
    pub moments_pass: bool,
    pub grad_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub opt: f64,
    pub states: Vec<StateAudit>,
}

impl AuditReport {
    pub fn loss_pass(&self) -> bool {
        self.states.iter().all(|s| s.loss_pass)
    }

    pub fn moments_pass(&self) -> bool {
        self.states.iter().all(|s| s.moments_pass)
    }

    pub fn grad_pass(&self) -> bool {
        self.states.iter().all(|s| s.grad_pass)
    }
}

/// Random two-neuron state: unit-scale Gaussian rows and head
/// off-diagonals uniform in `[-0.5, 0.5]`.
pub fn random_state(d: usize, rng: &mut Rng) -> ModelState {
    let mut state = init_state(d, 2, rng);
    state.e = Array2::from_shape_fn((2, 2), |(i, j)| if i == j { 1.0 } else { rng.random_range(-0.5..=0.5) });
    state
}

/// Audits `config.states` random states. Gradients are checked only when
/// `with_gradients` is set.
pub fn run_audit(config: &AuditConfig, with_gradients: bool) -> Result<AuditReport> {
    let mut rng = seeded(config.seed);
    let params = make_params(
        config.d,
        config.patches,
        config.feature_patches,
        config.alpha1,
        config.alpha2,
        config.sigma,
        FeatureBasis::Random,
        &mut rng,
    )?;
    let mut states = Vec::with_capacity(config.states);
    for index in 0..config.states {
        let state = random_state(config.d, &mut rng);
        let snap = PopulationSnapshot::compute(state.w.view(), state.e.view(), &params)?;
        let emp = empirical_moments(&state, &params, config.samples, config.chunk, &mut rng)?;
        let q_inv_sq_pop = snap.q_inv_sq();
        let u_z = [emp.u[0].z(snap.u[0]), emp.u[1].z(snap.u[1])];
        let q_inv_sq_z = [emp.q_inv_sq[0].z(q_inv_sq_pop[0]), emp.q_inv_sq[1].z(q_inv_sq_pop[1])];
        let loss_rel_err = ((snap.loss - emp.loss_corr) / emp.loss_corr).abs();

        let mut grad_z = Vec::new();
        if with_gradients {
            let est = empirical_gradient(&state, &params, config.grad_batches, config.grad_batch_size, &mut rng)?;
            let wg = pop_weight_grad(&snap, &params);
            let hg = pop_head_grad(&snap);
            let pop_feature: Mat2 = std::array::from_fn(|j| std::array::from_fn(|l| -wg.feature_component(j, l)));
            for j in 0..2 {
                for l in 0..2 {
                    grad_z.push(est.weight[j][l].z(pop_feature[j][l]));
                }
            }
            for k in 0..2 {
                grad_z.push(est.head[k].z(hg.grad[k]));
            }
        }
        states.push(StateAudit {
            index,
            pop_loss: snap.loss,
            emp_loss: emp.loss_corr,
            loss_rel_err,
            u_pop: snap.u,
            u_z,
            q_inv_sq_pop,
            q_inv_sq_z,
            loss_pass: loss_rel_err < config.loss_rel_tol,
            moments_pass: u_z.iter().chain(&q_inv_sq_z).all(|&z| z < config.z_tol),
            grad_pass: grad_z.iter().all(|&z| z < config.z_tol),
            grad_z,
        });
    }
    Ok(AuditReport {
        opt: opt_value(config.patches, config.feature_patches)?,
        states,
    })
}

//! Cubic patch encoder, identity-initialized prediction head, batch
//! normalization, the stop-gradient loss with its exact gradient, and the
//! SGD loop.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{sample_pairs, AugmentedPair, DataParams, Feature};
use crate::error::{Branch, Error, Result};
use crate::linalg::{dot, dot_slice};
use crate::rng::{substream, Rng, Stream};

/// Batches whose variance falls below this are rejected by [`batch_norm`].
pub const MIN_BATCH_VARIANCE: f64 = 1e-24;

/// Trainable state: encoder weights (one row per neuron) and the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    /// m x d.
    pub w: Array2<f64>,
    /// m x m with unit diagonal.
    pub e: Array2<f64>,
}

impl ModelState {
    pub fn new(w: Array2<f64>, e: Array2<f64>) -> Result<Self> {
        let m = w.nrows();
        if e.dim() != (m, m) {
            return Err(Error::DimensionMismatch(format!(
                "head is {:?}, expected {m}x{m}",
                e.dim()
            )));
        }
        let state = ModelState { w, e };
        if (0..m).any(|j| state.e[[j, j]] != 1.0) {
            return Err(Error::InvalidParameter("head diagonal must be 1".into()));
        }
        Ok(state)
    }

    pub fn neurons(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.e.iter()).all(|v| v.is_finite())
    }
}

/// `w_j ~ N(0, I_d / d)` i.i.d., `E = I_m`.
pub fn init_state(d: usize, m: usize, rng: &mut Rng) -> ModelState {
    let scale = 1.0 / (d as f64).sqrt();
    let w = Array2::from_shape_fn((m, d), |_| {
        let g: f64 = StandardNormal.sample(rng);
        scale * g
    });
    ModelState {
        w,
        e: Array2::eye(m),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub eta_head: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub train_head: bool,
    pub m: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl TrainConfig {
    /// Checks hard constraints and returns soft warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.batch_size < 2 {
            return Err(Error::InvalidParameter(format!(
                "N = {} must be at least 2",
                self.batch_size
            )));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidParameter(format!("eta = {} must be positive", self.eta)));
        }
        if !(self.eta_head >= 0.0) || !self.eta_head.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "etaE = {} must be non-negative",
                self.eta_head
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidParameter("m must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidParameter("log_every must be at least 1".into()));
        }
        let mut warnings = Vec::new();
        if self.train_head && self.eta_head >= self.eta {
            warnings.push(format!(
                "etaE >= eta is outside the intended regime (etaE = {}, eta = {})",
                self.eta_head, self.eta
            ));
        }
        Ok(warnings)
    }
}

/// `f_j(x) = sum_p <w_j, x_p>^3`.
pub fn encoder_forward(w: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) -> Array1<f64> {
    Array1::from_iter(w.rows().into_iter().map(|wj| {
        x.rows()
            .into_iter()
            .map(|xp| dot(wj, xp).powi(3))
            .sum::<f64>()
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnStats {
    pub mean: f64,
    /// Biased (divisor N) variance.
    pub var: f64,
}

impl BnStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        BnStats { mean, var }
    }
}

fn normalize_column(values: &[f64]) -> std::result::Result<(Vec<f64>, BnStats), f64> {
    let stats = BnStats::of(values);
    if !(stats.var >= MIN_BATCH_VARIANCE) {
        return Err(stats.var);
    }
    let inv = 1.0 / stats.var.sqrt();
    Ok((values.iter().map(|v| (v - stats.mean) * inv).collect(), stats))
}

/// Standardizes a batch to empirical mean 0 and biased variance 1.
pub fn batch_norm(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::InvalidParameter("batch norm needs N >= 2".into()));
    }
    normalize_column(values)
        .map(|(out, _)| out)
        .map_err(|variance| Error::DegenerateVariance {
            variance,
            len: values.len(),
        })
}

#[derive(Debug, Clone)]
pub struct BatchActivations {
    /// Raw encoder outputs on the first view, N x m.
    pub f_online: Array2<f64>,
    /// Raw encoder outputs on the second view, N x m (target pre-BN).
    pub f_target: Array2<f64>,
    /// Head-mixed online outputs before BN, N x m.
    pub mixed: Array2<f64>,
    pub f_tilde: Array2<f64>,
    /// Detached: treated as constants by [`backward_batch`].
    pub g_tilde: Array2<f64>,
    pub online_stats: Vec<BnStats>,
    pub target_stats: Vec<BnStats>,
}

impl BatchActivations {
    pub fn batch_size(&self) -> usize {
        self.f_tilde.nrows()
    }
}

fn view_outputs(w: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, kept: impl Iterator<Item = usize>, out: &mut [f64]) {
    out.fill(0.0);
    for p in kept {
        let xp = x.row(p);
        let xp = xp.as_slice().expect("patch rows are contiguous");
        for (r, o) in out.iter_mut().enumerate() {
            let wr = w.row(r);
            let z = dot_slice(wr.as_slice().expect("weight rows are contiguous"), xp);
            *o += z * z * z;
        }
    }
}

fn normalize_columns(raw: &Array2<f64>, step: usize, branch: Branch) -> Result<(Array2<f64>, Vec<BnStats>)> {
    let (n, m) = raw.dim();
    let mut out = Array2::zeros((n, m));
    let mut stats = Vec::with_capacity(m);
    for j in 0..m {
        let column: Vec<f64> = raw.column(j).to_vec();
        let (normed, s) = normalize_column(&column).map_err(|variance| Error::DegenerateBatch {
            step,
            branch,
            coordinate: j,
            variance,
        })?;
        out.column_mut(j).assign(&Array1::from(normed));
        stats.push(s);
    }
    Ok((out, stats))
}

pub(crate) fn forward_at(state: &ModelState, pairs: &[AugmentedPair], step: usize) -> Result<BatchActivations> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("batch of {n} is too small for BN")));
    }
    let m = state.neurons();
    let w = state.w.as_standard_layout();
    let mut f_online = Array2::zeros((n, m));
    let mut f_target = Array2::zeros((n, m));
    let mut buf = vec![0.0; m];
    for (i, pair) in pairs.iter().enumerate() {
        let x = pair.patches.as_standard_layout();
        view_outputs(w.view(), x.view(), pair.first_view(), &mut buf);
        f_online.row_mut(i).assign(&ArrayView1::from(&buf[..]));
        view_outputs(w.view(), x.view(), pair.second_view(), &mut buf);
        f_target.row_mut(i).assign(&ArrayView1::from(&buf[..]));
    }
    // F_j = sum_r E[j][r] f_r with unit diagonal.
    let mixed = f_online.dot(&state.e.t());
    let (f_tilde, online_stats) = normalize_columns(&mixed, step, Branch::Online)?;
    let (g_tilde, target_stats) = normalize_columns(&f_target, step, Branch::Target)?;
    Ok(BatchActivations {
        f_online,
        f_target,
        mixed,
        f_tilde,
        g_tilde,
        online_stats,
        target_stats,
    })
}

pub fn forward_batch(state: &ModelState, pairs: &[AugmentedPair]) -> Result<BatchActivations> {
    forward_at(state, pairs, 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// `(1/N) sum_i ||F~_i - G~_i||^2`, the trained objective.
    pub loss_sq: f64,
    /// `2 - sum_j rho_j`, comparable with the population loss.
    pub loss_corr: f64,
    /// Per-coordinate batch correlations `(1/N) sum_i F~_ij G~_ij`.
    pub rho: Vec<f64>,
}

pub fn batch_loss(acts: &BatchActivations) -> LossReport {
    let n = acts.batch_size() as f64;
    let diff = &acts.f_tilde - &acts.g_tilde;
    let loss_sq = diff.iter().map(|v| v * v).sum::<f64>() / n;
    let rho: Vec<f64> = acts
        .f_tilde
        .columns()
        .into_iter()
        .zip(acts.g_tilde.columns())
        .map(|(f, g)| dot(f, g) / n)
        .collect();
    let loss_corr = 2.0 - rho.iter().sum::<f64>();
    LossReport { loss_sq, loss_corr, rho }
}

/// The squared loss with the target outputs held fixed at `g_tilde`.
///
/// This is the function whose gradient [`backward_batch`] returns; finite
/// differences of it check the stop-gradient semantics.
pub fn loss_against_target(state: &ModelState, pairs: &[AugmentedPair], g_tilde: &Array2<f64>) -> Result<f64> {
    let acts = forward_batch(state, pairs)?;
    let n = pairs.len() as f64;
    Ok((&acts.f_tilde - g_tilde).iter().map(|v| v * v).sum::<f64>() / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// m x d.
    pub w: Array2<f64>,
    /// m x m, zero diagonal.
    pub e: Array2<f64>,
}

/// Exact gradient of the squared loss in W and the head off-diagonals.
///
/// The target branch is detached; the online branch is differentiated
/// through its BN batch statistics.
pub fn backward_batch(state: &ModelState, pairs: &[AugmentedPair], acts: &BatchActivations) -> Gradients {
    let (n, m) = acts.f_tilde.dim();
    let nf = n as f64;

    // dL/dF~ then through BN: dz = (dy - mean(dy) - y mean(dy y)) / sd.
    let mut d_mixed = Array2::zeros((n, m));
    for j in 0..m {
        let y = acts.f_tilde.column(j);
        let g = acts.g_tilde.column(j);
        let dy: Vec<f64> = y.iter().zip(g.iter()).map(|(a, b)| 2.0 * (a - b) / nf).collect();
        let mean_dy = dy.iter().sum::<f64>() / nf;
        let mean_dy_y = dy.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>() / nf;
        let inv_sd = 1.0 / acts.online_stats[j].var.sqrt();
        for i in 0..n {
            d_mixed[[i, j]] = (dy[i] - mean_dy - y[i] * mean_dy_y) * inv_sd;
        }
    }

    let mut grad_e = d_mixed.t().dot(&acts.f_online);
    for j in 0..m {
        grad_e[[j, j]] = 0.0;
    }

    // dL/df_r = sum_j E[j][r] dL/dF_j.
    let d_online = d_mixed.dot(&state.e);

    let w = state.w.as_standard_layout();
    let d = state.dim();
    let mut grad_w = Array2::<f64>::zeros((m, d));
    let mut proj = vec![0.0; m];
    for (i, pair) in pairs.iter().enumerate() {
        let x1 = pair.patches.as_standard_layout();
        for p in pair.first_view() {
            let xp = x1.row(p);
            let xp = xp.as_slice().expect("contiguous");
            for (r, z) in proj.iter_mut().enumerate() {
                let wr = w.row(r);
                *z = dot_slice(wr.as_slice().expect("contiguous"), xp);
            }
            for r in 0..m {
                let coef = 3.0 * d_online[[i, r]] * proj[r] * proj[r];
                let mut row = grad_w.row_mut(r);
                let row = row.as_slice_mut().expect("contiguous");
                for (g, x) in row.iter_mut().zip(xp) {
                    *g += coef * x;
                }
            }
        }
    }
    Gradients { w: grad_w, e: grad_e }
}

/// One Algorithm-1 update. The head diagonal is reset to 1; without head
/// training the head is returned untouched.
pub fn sgd_step(state: &ModelState, grads: &Gradients, config: &TrainConfig) -> ModelState {
    let w = &state.w - &(&grads.w * config.eta);
    let e = if config.train_head {
        let mut e = &state.e - &(&grads.e * config.eta_head);
        for j in 0..e.nrows() {
            e[[j, j]] = 1.0;
        }
        e
    } else {
        state.e.clone()
    };
    ModelState { w, e }
}

/// Logged scalars for one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: usize,
    /// m x 2 feature overlaps `<w_j, v_l>`.
    pub b: Array2<f64>,
    /// Full m x m head.
    pub e: Array2<f64>,
    /// Noise-subspace squared norms.
    pub r: Vec<f64>,
    /// `<P w_i, w_j>` for i < j, row-major upper triangle.
    pub r_pairs: Vec<f64>,
    pub loss_sq: f64,
    pub loss_corr: f64,
    pub rho: Vec<f64>,
    /// Neuron correlation on the batch's unaugmented samples.
    pub corr: Array2<f64>,
}

impl TrajectoryRecord {
    pub fn neurons(&self) -> usize {
        self.b.nrows()
    }

    /// Frobenius norm of the head's off-diagonal part.
    pub fn head_offdiag_norm(&self) -> f64 {
        let m = self.e.nrows();
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    s += self.e[[i, j]] * self.e[[i, j]];
                }
            }
        }
        s.sqrt()
    }
}

/// Overlaps B (m x 2), noise norms R_j and pairwise noise overlaps.
pub fn feature_overlaps(w: ArrayView2<'_, f64>, params: &DataParams) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let m = w.nrows();
    let mut b = Array2::zeros((m, 2));
    let mut noise = Vec::with_capacity(m);
    for (j, wj) in w.rows().into_iter().enumerate() {
        for f in Feature::ALL {
            b[[j, f.index()]] = dot(wj, params.feature(f));
        }
        noise.push(params.project_noise(wj));
    }
    let r = noise.iter().map(|u| dot(u.view(), u.view())).collect();
    let mut pairs = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            pairs.push(dot(noise[i].view(), noise[j].view()));
        }
    }
    (b, r, pairs)
}

pub(crate) fn pearson_matrix(values: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, m) = values.dim();
    let nf = n as f64;
    let means = values.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = &values - &means;
    let cov = centered.t().dot(&centered) / nf;
    let mut corr = Array2::from_elem((m, m), f64::NAN);
    for i in 0..m {
        for j in 0..m {
            let denom = (cov[[i, i]] * cov[[j, j]]).sqrt();
            if denom > 0.0 {
                corr[[i, j]] = if i == j { 1.0 } else { (cov[[i, j]] / denom).clamp(-1.0, 1.0) };
            }
        }
    }
    corr
}

fn record(t: usize, state: &ModelState, params: &DataParams, acts: &BatchActivations) -> TrajectoryRecord {
    let (b, r, r_pairs) = feature_overlaps(state.w.view(), params);
    let loss = batch_loss(acts);
    let unaugmented = &acts.f_online + &acts.f_target;
    TrajectoryRecord {
        t,
        b,
        e: state.e.clone(),
        r,
        r_pairs,
        loss_sq: loss.loss_sq,
        loss_corr: loss.loss_corr,
        rho: loss.rho,
        corr: pearson_matrix(unaugmented.view()),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trajectory: Vec<TrajectoryRecord>,
    pub final_state: ModelState,
}

/// Trains from a fresh initialization drawn from the run's init
/// substream.
pub fn train(params: &DataParams, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut init_rng = substream(config.seed, Stream::Init);
    let state = init_state(params.d, config.m, &mut init_rng);
    train_from(params, config, state)
}

/// Trains from a given state. Every step draws a fresh batch
/// from the data substream; the state after the last update is evaluated
/// on one more batch so the final record carries its losses.
pub fn train_from(params: &DataParams, config: &TrainConfig, state: ModelState) -> Result<TrainOutcome> {
    train_observed(params, config, state, |_, _| Ok(()))
}

/// Like [`train_from`], calling `observe(t, state)` at every logged step.
pub fn train_observed<F>(params: &DataParams, config: &TrainConfig, mut state: ModelState, mut observe: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &ModelState) -> Result<()>,
{
    config.validate()?;
    if state.neurons() != config.m || state.dim() != params.d {
        return Err(Error::DimensionMismatch(format!(
            "state is {}x{}, config expects {}x{}",
            state.neurons(),
            state.dim(),
            config.m,
            params.d
        )));
    }
    let mut data_rng = substream(config.seed, Stream::Data);
    let mut trajectory = Vec::new();
    for t in 0..=config.steps {
        let pairs = sample_pairs(params, config.batch_size, &mut data_rng);
        let acts = forward_at(&state, &pairs, t)?;
        if t % config.log_every == 0 || t == config.steps {
            trajectory.push(record(t, &state, params, &acts));
            observe(t, &state)?;
        }
        if t == config.steps {
            break;
        }
        let grads = backward_batch(&state, &pairs, &acts);
        state = sgd_step(&state, &grads, config);
        if !state.is_finite() {
            return Err(Error::Degenerate(format!("non-finite state after step {t}")));
        }
    }
    Ok(TrainOutcome {
        trajectory,
        final_state: state,
    })
}

//! Numerical checks of the tensor-power-method growth bounds.
//!
//! The recurrence is `x_{t+1} = x_t + eta C_t x_t^q`. Bounds are evaluated
//! from their displayed expressions with every hidden `O(1)` replaced by a
//! configurable slack factor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CAP: u64 = 100_000_000;

/// Per-step multipliers `C_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Coefficients {
    Constant(f64),
    /// Used in order; the last value repeats once the list runs out.
    Sequence(Vec<f64>),
}

impl Coefficients {
    fn at(&self, t: u64) -> f64 {
        match self {
            Coefficients::Constant(c) => *c,
            Coefficients::Sequence(v) => {
                let i = usize::try_from(t).unwrap_or(usize::MAX).min(v.len() - 1);
                v[i]
            }
        }
    }

    fn is_constant_from(&self, t: u64) -> bool {
        match self {
            Coefficients::Constant(_) => true,
            Coefficients::Sequence(v) => t as usize + 1 >= v.len(),
        }
    }

    fn max(&self) -> f64 {
        match self {
            Coefficients::Constant(c) => *c,
            Coefficients::Sequence(v) => v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSeqSpec {
    pub x0: f64,
    pub q: u32,
    pub eta: f64,
    /// Ceiling `A`.
    pub a: f64,
    pub coeffs: Coefficients,
    /// Degree of the secondary sum `sum eta C_t x_t^{q'}`.
    pub q_prime: u32,
    pub cap: u64,
    /// Keep the whole sequence in the result.
    pub record_sequence: bool,
}

impl PowerSeqSpec {
    pub fn new(x0: f64, q: u32, eta: f64, a: f64) -> Self {
        PowerSeqSpec {
            x0,
            q,
            eta,
            a,
            coeffs: Coefficients::Constant(1.0),
            q_prime: 3,
            cap: DEFAULT_CAP,
            record_sequence: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x0 > 0.0) {
            return Err(Error::InvalidParameter(format!("x0 = {} must be positive", self.x0)));
        }
        if self.q < 3 {
            return Err(Error::InvalidParameter(format!("q = {} must be at least 3", self.q)));
        }
        if !(self.x0 < self.a) {
            return Err(Error::InvalidParameter(format!("x0 = {} must be below A = {}", self.x0, self.a)));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidParameter(format!("eta = {} must be positive", self.eta)));
        }
        if let Coefficients::Sequence(v) = &self.coeffs {
            if v.is_empty() {
                return Err(Error::InvalidParameter("empty coefficient sequence".into()));
            }
        }
        if self.coeffs.max() < 0.0 {
            return Err(Error::InvalidParameter("coefficients must be non-negative".into()));
        }
        let overshoot = self.eta * self.coeffs.max() * self.a.powi(self.q as i32);
        if !(overshoot < self.a) {
            return Err(Error::InvalidParameter(format!(
                "eta C A^q = {overshoot:e} must be below A = {}",
                self.a
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSeqRun {
    /// First index with `x_t >= A`.
    pub stop: u64,
    pub final_value: f64,
    /// `sum eta C_t` over `x_t <= A`.
    pub sum_eta_c: f64,
    /// `sum eta C_t x_t^{q'}` over `x_t <= A`.
    pub sum_eta_c_xq: f64,
    pub sequence: Option<Vec<f64>>,
}

pub fn simulate_power_seq(spec: &PowerSeqSpec) -> Result<PowerSeqRun> {
    spec.validate()?;
    let q = spec.q as i32;
    let qp = spec.q_prime as i32;
    let mut x = spec.x0;
    let mut sum_c = 0.0;
    let mut sum_cx = 0.0;
    let mut seq = spec.record_sequence.then(|| vec![x]);
    let mut t = 0u64;
    while x < spec.a {
        if t >= spec.cap {
            return Err(Error::CapExceeded {
                target: spec.a,
                cap: spec.cap as usize,
            });
        }
        let c = spec.coeffs.at(t);
        let step = spec.eta * c;
        sum_c += step;
        sum_cx += step * x.powi(qp);
        let next = x + step * x.powi(q);
        if next == x && spec.coeffs.is_constant_from(t) {
            // Frozen for good.
            return Err(Error::CapExceeded {
                target: spec.a,
                cap: spec.cap as usize,
            });
        }
        x = next;
        t += 1;
        if let Some(s) = seq.as_mut() {
            s.push(x);
        }
    }
    Ok(PowerSeqRun {
        stop: t,
        final_value: x,
        sum_eta_c: sum_c,
        sum_eta_c_xq: sum_cx,
        sequence: seq,
    })
}

/// Two-sided bound on `sum eta C_t` (first growth lemma), as multiples of
/// `1 / x0^{q-1}` already divided out: returns the absolute bounds.
pub fn growth_bounds(spec: &PowerSeqSpec, delta: f64, slack: f64) -> (f64, f64) {
    let q = spec.q as f64;
    let (x0, a) = (spec.x0, spec.a);
    let c_max = spec.coeffs.max();
    let eta_term = slack * spec.eta * c_max * a.powf(q) / x0 * (a / x0).ln() / (1.0 + delta).ln();
    let scale = x0.powf(q - 1.0);
    let lower = (delta / (1.0 + delta) / ((1.0 + delta).powf(q - 1.0) - 1.0) * (1.0 - ((1.0 + delta) * x0 / a).powf(q - 1.0))
        - eta_term)
        / scale;
    let upper = ((1.0 + delta).powf(q - 1.0) / (q - 1.0) + eta_term) / scale;
    (lower, upper)
}

/// `b = ceil(log(A/x0) / log(1 + delta))`.
pub fn level_count(x0: f64, a: f64, delta: f64) -> f64 {
    ((a / x0).ln() / (1.0 + delta).ln()).ceil()
}

/// Two-sided bound on `sum eta C_t x_t^{q'}` (different-degree lemma).
pub fn degree_bounds(spec: &PowerSeqSpec, delta: f64, slack: f64) -> Result<(f64, f64)> {
    if spec.q_prime < 3 || spec.q_prime + 2 > spec.q {
        return Err(Error::InvalidParameter(format!(
            "need 3 <= q' <= q - 2, got q = {}, q' = {}",
            spec.q, spec.q_prime
        )));
    }
    let (q, qp) = (spec.q as f64, spec.q_prime as f64);
    let gap = q - qp - 1.0;
    let b = level_count(spec.x0, spec.a, delta);
    let eta_term = spec.eta * spec.coeffs.max() * b * spec.a.powf(q);
    let scale = spec.x0.powf(gap);
    let r = 1.0 + delta;
    let upper = r.powf(qp) * (slack + eta_term) / scale;
    let lower = r.powf(-qp) * (delta / r * (1.0 - r.powf(-b * gap)) / (1.0 - r.powf(-gap)) - eta_term) / scale;
    Ok((lower, upper))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LotteryReport {
    /// `max y_t / y0` over `x_t <= A`; 1 when `y0 = 0`.
    pub ratio: f64,
    pub bound: f64,
    pub pass: bool,
    pub x_stop: u64,
}

/// Runs the coupled pair `x` (rate `C_t`) and `y` (rate `S_t C_t`) until
/// `x` reaches `A` and compares `y`'s growth with `bound`.
///
/// Requires `x0 >= y0 max(S)^{1/(q-1)} (1 + margin)`.
pub fn check_coupled_lottery(
    spec_x: &PowerSeqSpec,
    y0: f64,
    s: &Coefficients,
    margin: f64,
    bound: f64,
) -> Result<LotteryReport> {
    spec_x.validate()?;
    if y0 < 0.0 {
        return Err(Error::InvalidParameter(format!("y0 = {y0} must be non-negative")));
    }
    let q = spec_x.q as i32;
    let s_max = s.max();
    let needed = y0 * s_max.max(0.0).powf(1.0 / (spec_x.q as f64 - 1.0)) * (1.0 + margin);
    if spec_x.x0 < needed {
        return Err(Error::HypothesisViolated(format!(
            "x0 = {} is below y0 S^(1/(q-1)) (1 + margin) = {needed}",
            spec_x.x0
        )));
    }
    let (mut x, mut y) = (spec_x.x0, y0);
    let mut max_y = y0;
    let mut t = 0u64;
    while x < spec_x.a {
        if t >= spec_x.cap {
            return Err(Error::CapExceeded {
                target: spec_x.a,
                cap: spec_x.cap as usize,
            });
        }
        let c = spec_x.coeffs.at(t);
        let next = x + spec_x.eta * c * x.powi(q);
        if next == x && spec_x.coeffs.is_constant_from(t) {
            return Err(Error::CapExceeded {
                target: spec_x.a,
                cap: spec_x.cap as usize,
            });
        }
        y += spec_x.eta * s.at(t) * c * y.powi(q);
        x = next;
        t += 1;
        if x <= spec_x.a {
            max_y = max_y.max(y);
        }
    }
    let ratio = if y0 > 0.0 { max_y / y0 } else { 1.0 };
    Ok(LotteryReport {
        ratio,
        bound,
        pass: ratio < bound,
        x_stop: t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqrtGrowthReport {
    /// `sum_t x_t (x_{t+1} - x_t)`.
    pub c: f64,
    pub x0: f64,
    pub x_final: f64,
    pub sqrt_c: f64,
    pub deviation: f64,
    pub tolerance: f64,
    /// Increasing, at least one step, `C > 0` and `x0^2 < tolerance`.
    pub in_hypothesis: bool,
    pub pass: bool,
}

/// Compares the last element of an increasing sequence with `sqrt(C)`.
pub fn check_sqrt_growth(sequence: &[f64], tolerance: f64) -> Result<SqrtGrowthReport> {
    let (&x0, &x_final) = match (sequence.first(), sequence.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InvalidParameter("empty sequence".into())),
    };
    let c = sequence.windows(2).map(|w| w[0] * (w[1] - w[0])).sum::<f64>();
    let increasing = sequence.windows(2).all(|w| w[1] >= w[0]);
    let sqrt_c = c.max(0.0).sqrt();
    let deviation = (x_final - sqrt_c).abs();
    Ok(SqrtGrowthReport {
        c,
        x0,
        x_final,
        sqrt_c,
        deviation,
        tolerance,
        in_hypothesis: increasing && sequence.len() > 1 && c > 0.0 && x0 * x0 < tolerance,
        pass: deviation < tolerance,
    })
}

/// Constant increments `dx` from `x0` until `sum x dx` reaches `target_c`.
pub fn constant_step_sequence(x0: f64, dx: f64, target_c: f64) -> Result<Vec<f64>> {
    if !(dx > 0.0) || !(x0 >= 0.0) || !(target_c >= 0.0) {
        return Err(Error::InvalidParameter("need dx > 0, x0 >= 0, C >= 0".into()));
    }
    let mut seq = vec![x0];
    let mut x = x0;
    let mut c = 0.0;
    while c < target_c {
        c += x * dx;
        x += dx;
        seq.push(x);
        if seq.len() as u64 > DEFAULT_CAP {
            return Err(Error::CapExceeded {
                target: target_c,
                cap: DEFAULT_CAP as usize,
            });
        }
    }
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpmConfig {
    pub delta: f64,
    pub slack: f64,
    pub cap: u64,
    /// Target step count that fixes `eta` at each grid point.
    pub target_steps: f64,
    pub lottery_bound: f64,
    pub sqrt_tolerance: f64,
}

impl Default for TpmConfig {
    fn default() -> Self {
        TpmConfig {
            delta: 0.1,
            slack: 4.0,
            cap: DEFAULT_CAP,
            target_steps: 2.0e7,
            lottery_bound: 1.1,
            sqrt_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub x0: f64,
    pub q: u32,
    pub a: f64,
    pub eta: f64,
    pub steps: u64,
    pub sum_eta_c: f64,
    pub growth_lower: f64,
    pub growth_upper: f64,
    pub growth_pass: bool,
    /// The lower bound is non-positive, so only the upper side is informative.
    pub lower_vacuous: bool,
    /// Present where the different-degree lemma applies (`q' <= q - 2`).
    pub degree: Option<DegreeCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeCheck {
    pub q_prime: u32,
    pub sum: f64,
    pub lower: f64,
    pub upper: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpmReport {
    pub grid: Vec<GridRow>,
    pub lottery: LotteryReport,
    pub sqrt_growth: SqrtGrowthReport,
}

impl TpmReport {
    pub fn growth_pass(&self) -> bool {
        self.grid.iter().all(|r| r.growth_pass)
    }

    pub fn degree_pass(&self) -> bool {
        self.grid.iter().filter_map(|r| r.degree).all(|d| d.pass)
    }

    pub fn all_pass(&self) -> bool {
        self.growth_pass() && self.degree_pass() && self.lottery.pass && self.sqrt_growth.pass
    }
}

pub const GRID_X0: [f64; 3] = [0.02, 0.05, 0.1];
pub const GRID_Q: [u32; 2] = [3, 5];
pub const GRID_A: [f64; 2] = [0.3, 0.5];

/// Step size giving roughly `target_steps` iterations with `C_t = 1`.
pub fn grid_eta(x0: f64, q: u32, a: f64, target_steps: f64) -> f64 {
    let q = q as f64;
    let continuous = (1.0 - (x0 / a).powf(q - 1.0)) / ((q - 1.0) * x0.powf(q - 1.0));
    continuous / target_steps
}

fn grid_point(x0: f64, q: u32, a: f64, config: &TpmConfig) -> Result<GridRow> {
    let eta = grid_eta(x0, q, a, config.target_steps);
    let mut spec = PowerSeqSpec::new(x0, q, eta, a);
    spec.cap = config.cap;
    spec.q_prime = 3;
    let run = simulate_power_seq(&spec)?;
    let (lo, hi) = growth_bounds(&spec, config.delta, config.slack);
    let degree = if q >= 5 {
        let (dl, du) = degree_bounds(&spec, config.delta, config.slack)?;
        Some(DegreeCheck {
            q_prime: 3,
            sum: run.sum_eta_c_xq,
            lower: dl,
            upper: du,
            pass: dl <= run.sum_eta_c_xq && run.sum_eta_c_xq <= du,
        })
    } else {
        None
    };
    Ok(GridRow {
        x0,
        q,
        a,
        eta,
        steps: run.stop,
        sum_eta_c: run.sum_eta_c,
        growth_lower: lo,
        growth_upper: hi,
        growth_pass: lo <= run.sum_eta_c && run.sum_eta_c <= hi,
        lower_vacuous: lo <= 0.0,
        degree,
    })
}

/// Full suite: bound containment over the grid, the coupled-lottery check
/// (`x0 = 0.05`, `y0 = 0.005`, `q = 3`, `A = 0.5`, `S = 1`) and the
/// square-root growth check (`x0 = 1e-3`, `dx = 1e-5`, `C = 2`).
pub fn run_suite(config: &TpmConfig) -> Result<TpmReport> {
    let points: Vec<(f64, u32, f64)> = GRID_X0
        .iter()
        .flat_map(|&x0| GRID_Q.iter().flat_map(move |&q| GRID_A.iter().map(move |&a| (x0, q, a))))
        .collect();
    let grid = points
        .par_iter()
        .map(|&(x0, q, a)| grid_point(x0, q, a, config))
        .collect::<Result<Vec<_>>>()?;

    let mut lottery_spec = PowerSeqSpec::new(0.05, 3, 1e-3, 0.5);
    lottery_spec.cap = config.cap;
    let lottery = check_coupled_lottery(&lottery_spec, 0.005, &Coefficients::Constant(1.0), 0.1, config.lottery_bound)?;

    let seq = constant_step_sequence(1e-3, 1e-5, 2.0)?;
    let sqrt_growth = check_sqrt_growth(&seq, config.sqrt_tolerance)?;
    Ok(TpmReport {
        grid,
        lottery,
        sqrt_growth,
    })
}

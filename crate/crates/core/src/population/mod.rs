//! Closed-form population quantities for two neurons.
//!
//! Indices are zero-based: neuron `j` in {0, 1}, feature `l` in {0, 1}
//! (0 = strong). `o(j) = 1 - j` is the other neuron or feature.
//!
//! All expectations over the noise are exact. Each noise patch is a
//! spherical Gaussian on the orthogonal complement of the features, so
//! `(<w_1, xi>, <w_2, xi>)` is a centered bivariate Gaussian with covariance
//! `s^2 [[R_1, R_12], [R_12, R_2]]` and every moment follows from Isserlis.

pub mod audit;
pub mod moments;

use ndarray::{Array1, Array2, ArrayView2};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::data::{mask_overlap_coefficients, mask_overlap_coefficients_exact, DataParams, Feature, MaskCoefficients};
use crate::error::{Error, Result};
use crate::linalg::dot;
use moments::{BivariateGaussian, Poly};

pub type Mat2 = [[f64; 2]; 2];

#[inline]
fn o(i: usize) -> usize {
    1 - i
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlaps {
    /// `b[j][l] = <w_j, v_l>`.
    pub b: Mat2,
    pub r1: f64,
    pub r2: f64,
    pub r12: f64,
    /// `r12 / sqrt(r1 r2)`, 0 when either noise component vanishes.
    pub r12_bar: f64,
}

impl Overlaps {
    pub fn r(&self, j: usize) -> f64 {
        if j == 0 {
            self.r1
        } else {
            self.r2
        }
    }
}

fn check_two_neurons(w: ArrayView2<'_, f64>, params: &DataParams) -> Result<()> {
    if w.nrows() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "population engine needs m = 2 neurons, got {}",
            w.nrows()
        )));
    }
    if w.ncols() != params.d {
        return Err(Error::DimensionMismatch(format!(
            "weights have {} columns, d = {}",
            w.ncols(),
            params.d
        )));
    }
    Ok(())
}

/// Noise-subspace components `Pi w_1`, `Pi w_2`.
fn noise_components(w: ArrayView2<'_, f64>, params: &DataParams) -> [Array1<f64>; 2] {
    [params.project_noise(w.row(0)), params.project_noise(w.row(1))]
}

pub fn overlaps(w: ArrayView2<'_, f64>, params: &DataParams) -> Result<Overlaps> {
    check_two_neurons(w, params)?;
    let mut b = [[0.0; 2]; 2];
    for j in 0..2 {
        for f in Feature::ALL {
            b[j][f.index()] = dot(w.row(j), params.feature(f));
        }
    }
    let [u1, u2] = noise_components(w, params);
    let r1 = dot(u1.view(), u1.view());
    let r2 = dot(u2.view(), u2.view());
    let r12 = dot(u1.view(), u2.view());
    let denom = (r1 * r2).sqrt();
    let r12_bar = if denom > 0.0 { (r12 / denom).clamp(-1.0, 1.0) } else { 0.0 };
    Ok(Overlaps { b, r1, r2, r12, r12_bar })
}

/// Exact noise moments at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMoments {
    pub law: BivariateGaussian,
    /// `E[<w_j, xi>^6]`.
    pub ecal: [f64; 2],
    /// `E[(<w_j, xi>^3 + E_{j,o} <w_o, xi>^3)^2]`.
    pub ecal_mix: [f64; 2],
    /// `E[<w_1, xi>^3 <w_2, xi>^3]`.
    pub cross33: f64,
    /// `grad[j][j']` is the gradient of `ecal_mix[j']` in `w_j`, a vector in
    /// the noise subspace.
    pub grad: [[Array1<f64>; 2]; 2],
    /// Derivative of `ecal_mix[j]` in the head entry `E_{j,o}`.
    pub head_derivative: [f64; 2],
}

/// `(g_j'^3 + e g_o^3)` as a polynomial in `(g_1, g_2)`.
fn mixed_cube(j: usize, e: f64) -> Poly {
    let cube = |k: usize| if k == 0 { (3, 0) } else { (0, 3) };
    let (p, q) = cube(j);
    let (r, s) = cube(o(j));
    Poly::monomial(1.0, p, q).add(&Poly::monomial(e, r, s))
}

pub fn gaussian_noise_moments(
    w: ArrayView2<'_, f64>,
    e: ArrayView2<'_, f64>,
    params: &DataParams,
) -> Result<NoiseMoments> {
    check_two_neurons(w, params)?;
    let ov = overlaps(w, params)?;
    let s2 = params.noise_std().powi(2);
    let law = BivariateGaussian {
        var1: s2 * ov.r1,
        var2: s2 * ov.r2,
        cov: s2 * ov.r12,
    };
    let u = noise_components(w, params);
    let head = [e[[0, 1]], e[[1, 0]]];

    let ecal = [law.moment(6, 0), law.moment(0, 6)];
    let cross33 = law.moment(3, 3);
    let ecal_mix = [
        ecal[0] + 2.0 * head[0] * cross33 + head[0] * head[0] * ecal[1],
        ecal[1] + 2.0 * head[1] * cross33 + head[1] * head[1] * ecal[0],
    ];

    // grad_{w_j} E[Y^2] with Y = g_j'^3 + e' g_o'^3 is 6 c E[Y g_j^2 xi],
    // c = 1 if j = j' else e'. Stein's lemma on the Gaussian xi gives
    // E[h(g) xi] = s^2 sum_k E[d_k h] Pi w_k.
    let grad = std::array::from_fn(|j| {
        std::array::from_fn(|jp| {
            let y = mixed_cube(jp, head[jp]);
            let c = if j == jp { 1.0 } else { head[jp] };
            let square = if j == 0 { (2, 0) } else { (0, 2) };
            let h = y.mul(&Poly::monomial(1.0, square.0, square.1));
            let mut v = Array1::zeros(params.d);
            for (k, uk) in u.iter().enumerate() {
                v.scaled_add(6.0 * c * s2 * h.derivative(k).expectation(&law), uk);
            }
            v
        })
    });

    let head_derivative = [
        2.0 * cross33 + 2.0 * head[0] * ecal[1],
        2.0 * cross33 + 2.0 * head[1] * ecal[0],
    ];

    Ok(NoiseMoments {
        law,
        ecal,
        ecal_mix,
        cross33,
        grad,
        head_derivative,
    })
}

/// Every closed-form quantity at one `(W, E)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSnapshot {
    pub overlaps: Overlaps,
    pub noise: NoiseMoments,
    pub coefficients: MaskCoefficients,
    pub alpha6: [f64; 2],
    /// Head off-diagonals `[E_12, E_21]`.
    pub head: [f64; 2],
    /// `a[j][l] = B_{j,l}^3 + E_{j,o} B_{o,l}^3`.
    pub mixed_cubes: Mat2,
    pub u: [f64; 2],
    pub q: [f64; 2],
    pub phi: [f64; 2],
    pub h: Mat2,
    pub k: Mat2,
    pub lambda: Mat2,
    pub gamma: Mat2,
    pub upsilon: Mat2,
    pub sigma: Mat2,
    pub loss: f64,
}

impl PopulationSnapshot {
    pub fn compute(w: ArrayView2<'_, f64>, e: ArrayView2<'_, f64>, params: &DataParams) -> Result<Self> {
        check_two_neurons(w, params)?;
        if e.dim() != (2, 2) {
            return Err(Error::DimensionMismatch("head must be 2x2".into()));
        }
        let ov = overlaps(w, params)?;
        let noise = gaussian_noise_moments(w, e, params)?;
        let coef = mask_overlap_coefficients(params.patches, params.feature_patches)?;
        let (c0, c1, c2) = (coef.c0, coef.c1, coef.c2);
        let alpha6 = [params.alpha1.powi(6), params.alpha2.powi(6)];
        let head = [e[[0, 1]], e[[1, 0]]];
        let b = ov.b;
        let b3: Mat2 = std::array::from_fn(|j| std::array::from_fn(|l| b[j][l].powi(3)));
        let a: Mat2 = std::array::from_fn(|j| std::array::from_fn(|l| b3[j][l] + head[j] * b3[o(j)][l]));

        let (u, q, phi) = normalizers(&a, &b3, &noise, &alpha6, c1, c2)?;

        let h: Mat2 = std::array::from_fn(|j| {
            std::array::from_fn(|l| c1 * alpha6[l] * a[j][l] * a[j][l] + c2 * noise.ecal_mix[j])
        });
        let k: Mat2 = std::array::from_fn(|j| std::array::from_fn(|l| c1 * alpha6[l] * a[j][l] * a[j][o(l)]));

        let lambda: Mat2 =
            std::array::from_fn(|j| std::array::from_fn(|l| c0 * phi[j] * alpha6[l] * b[j][l].powi(5) * h[j][o(l)]));
        let gamma: Mat2 = std::array::from_fn(|j| {
            std::array::from_fn(|l| {
                c0 * phi[o(j)] * head[o(j)] * alpha6[l] * b3[o(j)][l] * b[j][l].powi(2) * h[o(j)][o(l)]
            })
        });
        let upsilon: Mat2 = std::array::from_fn(|j| {
            std::array::from_fn(|l| {
                c0 * alpha6[o(l)]
                    * (phi[j] * b3[j][o(l)] * b[j][l].powi(2) * k[j][l]
                        + phi[o(j)] * head[o(j)] * b3[o(j)][o(l)] * b[j][l].powi(2) * k[o(j)][l])
            })
        });
        let sigma: Mat2 =
            std::array::from_fn(|j| std::array::from_fn(|l| c0 * c2 * phi[j] * alpha6[l] * b3[j][l] * a[j][l]));

        let mut loss = 2.0;
        for j in 0..2 {
            for l in 0..2 {
                loss -= q[j] * c0 * alpha6[l] * b3[j][l] * a[j][l] / u[j].sqrt();
            }
        }

        Ok(PopulationSnapshot {
            overlaps: ov,
            noise,
            coefficients: coef,
            alpha6,
            head,
            mixed_cubes: a,
            u,
            q,
            phi,
            h,
            k,
            lambda,
            gamma,
            upsilon,
            sigma,
            loss,
        })
    }

    /// `Q_j^{-2} = E[G_j^2]`.
    pub fn q_inv_sq(&self) -> [f64; 2] {
        [self.q[0].powi(-2), self.q[1].powi(-2)]
    }
}

type Normalizers = ([f64; 2], [f64; 2], [f64; 2]);

fn normalizers(a: &Mat2, b3: &Mat2, noise: &NoiseMoments, alpha6: &[f64; 2], c1: f64, c2: f64) -> Result<Normalizers> {
    let mut u = [0.0; 2];
    let mut q = [0.0; 2];
    let mut phi = [0.0; 2];
    for j in 0..2 {
        u[j] = (0..2).map(|l| c1 * alpha6[l] * a[j][l] * a[j][l]).sum::<f64>() + c2 * noise.ecal_mix[j];
        let q_inv_sq = (0..2).map(|l| c1 * alpha6[l] * b3[j][l] * b3[j][l]).sum::<f64>() + c2 * noise.ecal[j];
        if !(u[j] > 0.0) || !(q_inv_sq > 0.0) {
            return Err(Error::Degenerate(format!(
                "neuron {} has U = {:e}, Q^-2 = {:e}",
                j + 1,
                u[j],
                q_inv_sq
            )));
        }
        q[j] = q_inv_sq.powf(-0.5);
        phi[j] = q[j] / u[j].powf(1.5);
    }
    Ok((u, q, phi))
}

pub fn pop_loss(snapshot: &PopulationSnapshot) -> f64 {
    snapshot.loss
}

/// Population loss of the online state `(w, e)` against a detached target
/// built from `target_w`: `Q_j` and the stop-gradient cubes come from the
/// target. At `target_w = w` this equals [`pop_loss`]; its derivative in
/// `(w, e)` at that point is the stop-gradient population gradient.
pub fn pop_loss_against_target(
    w: ArrayView2<'_, f64>,
    e: ArrayView2<'_, f64>,
    target_w: ArrayView2<'_, f64>,
    params: &DataParams,
) -> Result<f64> {
    let online = PopulationSnapshot::compute(w, e, params)?;
    let target = PopulationSnapshot::compute(target_w, ndarray::Array2::eye(2).view(), params)?;
    let c0 = online.coefficients.c0;
    let mut loss = 2.0;
    for j in 0..2 {
        for l in 0..2 {
            let bar = target.overlaps.b[j][l].powi(3);
            loss -= target.q[j] * c0 * online.alpha6[l] * bar * online.mixed_cubes[j][l] / online.u[j].sqrt();
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightGradient {
    pub lambda: Mat2,
    pub gamma: Mat2,
    pub upsilon: Mat2,
    pub sigma: Mat2,
    /// `grad[j] = d L / d w_j`, 2 x d.
    pub grad: Array2<f64>,
}

impl WeightGradient {
    /// `<-grad_{w_j} L, v_l>`, which equals `3 (Lambda + Gamma - Upsilon)`.
    pub fn feature_component(&self, j: usize, l: usize) -> f64 {
        3.0 * (self.lambda[j][l] + self.gamma[j][l] - self.upsilon[j][l])
    }
}

/// Stop-gradient population gradient in W.
///
/// `-grad_{w_j} L = sum_l 3 (Lambda + Gamma - Upsilon)_{j,l} v_l
///                - 1/2 sum_{j',l} Sigma_{j',l} grad_{w_j} Ecal_{j',o(j')}`.
/// The factor 3 comes from differentiating `B^3`; the 1/2 from
/// differentiating `U^{-1/2}`.
pub fn pop_weight_grad(snapshot: &PopulationSnapshot, params: &DataParams) -> WeightGradient {
    let s = snapshot;
    let mut grad = Array2::zeros((2, params.d));
    for j in 0..2 {
        let mut neg = Array1::<f64>::zeros(params.d);
        for f in Feature::ALL {
            let l = f.index();
            let coef = 3.0 * (s.lambda[j][l] + s.gamma[j][l] - s.upsilon[j][l]);
            neg.scaled_add(coef, &params.feature(f));
        }
        for jp in 0..2 {
            let weight = 0.5 * (s.sigma[jp][0] + s.sigma[jp][1]);
            neg.scaled_add(-weight, &s.noise.grad[j][jp]);
        }
        grad.row_mut(j).assign(&(-neg));
    }
    WeightGradient {
        lambda: s.lambda,
        gamma: s.gamma,
        upsilon: s.upsilon,
        sigma: s.sigma,
        grad,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    /// `[dL/dE_12, dL/dE_21]` from the direct form.
    pub grad: [f64; 2],
    /// Same quantity assembled from the Xi / Delta decomposition.
    pub grad_decomposed: [f64; 2],
    pub xi: [f64; 2],
    pub delta: Mat2,
    /// `1/2 sum_l Sigma_{j,l} dEcal_{j,o}/dE_{j,o}`, the noise part of
    /// `-grad`.
    pub noise_term: [f64; 2],
}

/// Stop-gradient population gradient in the head off-diagonals.
///
/// Xi uses the squared determinant `(B11^3 B22^3 - B12^3 B21^3)^2`, which
/// is what the monomial expansion of the direct form produces.
pub fn pop_head_grad(snapshot: &PopulationSnapshot) -> HeadGradient {
    let s = snapshot;
    let (c0, c1, c2) = (s.coefficients.c0, s.coefficients.c1, s.coefficients.c2);
    let b = s.overlaps.b;
    let b3: Mat2 = std::array::from_fn(|j| std::array::from_fn(|l| b[j][l].powi(3)));
    let det = b3[0][0] * b3[1][1] - b3[0][1] * b3[1][0];

    let mut grad = [0.0; 2];
    let mut grad_decomposed = [0.0; 2];
    let mut xi = [0.0; 2];
    let mut delta = [[0.0; 2]; 2];
    let mut noise_term = [0.0; 2];
    for j in 0..2 {
        noise_term[j] = 0.5 * (s.sigma[j][0] + s.sigma[j][1]) * s.noise.head_derivative[j];
        let direct: f64 = (0..2)
            .map(|l| {
                c0 * s.phi[j]
                    * s.alpha6[l]
                    * b3[j][l]
                    * (b3[o(j)][l] * s.h[j][o(l)] - b3[o(j)][o(l)] * s.k[j][o(l)])
            })
            .sum();
        grad[j] = -(direct - noise_term[j]);

        xi[j] = c0 * c1 * s.alpha6[0] * s.alpha6[1] * s.phi[j] * det * det;
        for l in 0..2 {
            delta[j][l] = c0 * s.phi[j] * s.alpha6[l] * b3[j][l] * b3[o(j)][l] * c2 * s.noise.ecal_mix[j];
        }
        let neg = -xi[j] * s.head[j] + delta[j][0] + delta[j][1] - noise_term[j];
        grad_decomposed[j] = -neg;
    }
    HeadGradient {
        grad,
        grad_decomposed,
        xi,
        delta,
        noise_term,
    }
}

/// Global minimum of the population objective, `2 - 2 C0 / C1`, evaluated
/// in exact arithmetic and rounded once.
pub fn opt_value(patches: usize, feature_patches: usize) -> Result<f64> {
    let c = mask_overlap_coefficients_exact(patches, feature_patches)?;
    if *c.c1.numer() == 0 {
        return Err(Error::Degenerate("C1 = 0 (no feature patches)".into()));
    }
    let two = Ratio::from_integer(2);
    let opt = two - two * c.c0 / c.c1;
    Ok(*opt.numer() as f64 / *opt.denom() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_params, FeatureBasis};
    use crate::rng::seeded;
    use ndarray::{array, Array2};
    use rand_distr::{Distribution, StandardNormal};

    fn params(d: usize, p: usize, p0: usize, basis: FeatureBasis) -> DataParams {
        make_params(d, p, p0, 6.0, 2.5, 1.0, basis, &mut seeded(17)).unwrap()
    }

    fn random_w(d: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_fn((2, d), |_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g / (d as f64).sqrt()
        })
    }

    #[test]
    fn pure_feature_and_pure_noise_overlaps() {
        let p = params(8, 8, 2, FeatureBasis::Random);
        let mut w = Array2::zeros((2, 8));
        w.row_mut(0).assign(&p.v1);
        // A V-perp vector of norm 2.
        let mut u = p.project_noise(array![1.0, -2.0, 0.5, 0.0, 3.0, 1.0, -1.0, 0.2].view());
        let n = dot(u.view(), u.view()).sqrt();
        u *= 2.0 / n;
        w.row_mut(1).assign(&u);
        let ov = overlaps(w.view(), &p).unwrap();
        assert!((ov.b[0][0] - 1.0).abs() < 1e-12);
        assert!(ov.b[0][1].abs() < 1e-12);
        assert!(ov.r1.abs() < 1e-12);
        assert!(ov.b[1][0].abs() < 1e-12 && ov.b[1][1].abs() < 1e-12);
        assert!((ov.r2 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn overlaps_match_gram_schmidt_reference() {
        let p = params(8, 8, 2, FeatureBasis::Random);
        let w = random_w(8, 3);
        let ov = overlaps(w.view(), &p).unwrap();
        // Reference: explicit projector matrix I - v1 v1^T - v2 v2^T.
        let mut proj = Array2::<f64>::eye(8);
        for v in [&p.v1, &p.v2] {
            for a in 0..8 {
                for b in 0..8 {
                    proj[[a, b]] -= v[a] * v[b];
                }
            }
        }
        let pw = w.dot(&proj.t());
        let r = pw.dot(&w.t());
        assert!((ov.r1 - r[[0, 0]]).abs() < 1e-12);
        assert!((ov.r2 - r[[1, 1]]).abs() < 1e-12);
        assert!((ov.r12 - r[[0, 1]]).abs() < 1e-12);
        assert!(ov.r12 * ov.r12 <= ov.r1 * ov.r2);
        assert!(overlaps(Array2::zeros((3, 8)).view(), &p).is_err());
    }

    #[test]
    fn independent_noise_moments() {
        let p = params(16, 8, 2, FeatureBasis::Canonical);
        let mut w = Array2::zeros((2, 16));
        w[[0, 3]] = 1.2;
        w[[1, 7]] = 0.7;
        let nm = gaussian_noise_moments(w.view(), Array2::eye(2).view(), &p).unwrap();
        let s6 = p.noise_std().powi(6);
        assert!((nm.ecal[0] - 15.0 * s6 * 1.2f64.powi(6)).abs() < 1e-12);
        assert!((nm.ecal_mix[0] - nm.ecal[0]).abs() < 1e-15);
        assert!((nm.ecal_mix[1] - nm.ecal[1]).abs() < 1e-15);
    }

    #[test]
    fn noise_gradient_matches_finite_differences() {
        let p = params(12, 8, 2, FeatureBasis::Random);
        let w = random_w(12, 8);
        let e = array![[1.0, 0.3], [-0.45, 1.0]];
        let nm = gaussian_noise_moments(w.view(), e.view(), &p).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            for jp in 0..2 {
                for k in 0..12 {
                    let mut wp = w.clone();
                    wp[[j, k]] += h;
                    let mut wm = w.clone();
                    wm[[j, k]] -= h;
                    let fp = gaussian_noise_moments(wp.view(), e.view(), &p).unwrap().ecal_mix[jp];
                    let fm = gaussian_noise_moments(wm.view(), e.view(), &p).unwrap().ecal_mix[jp];
                    let fd = (fp - fm) / (2.0 * h);
                    let an = nm.grad[j][jp][k];
                    assert!((fd - an).abs() < 1e-7 * (1.0 + an.abs()), "j={j} jp={jp} k={k}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn zero_network_is_degenerate() {
        let p = params(8, 8, 2, FeatureBasis::Canonical);
        let err = PopulationSnapshot::compute(Array2::zeros((2, 8)).view(), Array2::eye(2).view(), &p).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn pure_feature_neuron_normalizer() {
        let p = params(8, 8, 2, FeatureBasis::Canonical);
        let mut w = Array2::zeros((2, 8));
        w[[0, 0]] = 1.0;
        w[[1, 5]] = 0.8;
        let s = PopulationSnapshot::compute(w.view(), Array2::eye(2).view(), &p).unwrap();
        let c1 = s.coefficients.c1;
        assert!((s.u[0] - c1 * 6f64.powi(6)).abs() < 1e-9);
        assert_eq!(s.noise.ecal[0], 0.0);
    }

    #[test]
    fn optimal_states_reach_opt() {
        let p = params(16, 8, 2, FeatureBasis::Random);
        let opt = opt_value(8, 2).unwrap();
        assert!((opt - 1.2).abs() < 1e-15);
        let mut w = Array2::zeros((2, 16));
        w.row_mut(0).assign(&(&p.v1 * 0.9));
        w.row_mut(1).assign(&(&p.v2 * -1.3));
        let s = PopulationSnapshot::compute(w.view(), Array2::eye(2).view(), &p).unwrap();
        assert!((s.loss - opt).abs() < 1e-12);
        w.row_mut(1).assign(&(&p.v1 * 0.4));
        let s = PopulationSnapshot::compute(w.view(), Array2::eye(2).view(), &p).unwrap();
        assert!((s.loss - opt).abs() < 1e-12);
    }

    #[test]
    fn opt_edge_cases() {
        assert_eq!(opt_value(2, 1).unwrap(), 2.0);
        assert_eq!(opt_value(8, 8).unwrap(), 0.0);
        assert!(opt_value(8, 0).is_err());
    }

    #[test]
    fn gradient_coefficients_vanish_where_expected() {
        let p = params(16, 8, 2, FeatureBasis::Random);
        let mut w = random_w(16, 4);
        let e = Array2::eye(2);
        let s = PopulationSnapshot::compute(w.view(), e.view(), &p).unwrap();
        assert!(s.gamma.iter().flatten().all(|&g| g == 0.0));
        // Remove all feature overlap from neuron 2.
        let u = p.project_noise(w.row(1));
        w.row_mut(1).assign(&u);
        let s = PopulationSnapshot::compute(w.view(), array![[1.0, 0.2], [0.3, 1.0]].view(), &p).unwrap();
        assert!(s.lambda[1].iter().all(|&l| l.abs() < 1e-30));
    }

    #[test]
    fn head_gradient_without_feature_overlap_is_noise_only() {
        let p = params(16, 8, 2, FeatureBasis::Random);
        let w = random_w(16, 6);
        let mut w0 = w.clone();
        for j in 0..2 {
            let u = p.project_noise(w.row(j));
            w0.row_mut(j).assign(&u);
        }
        let s = PopulationSnapshot::compute(w0.view(), array![[1.0, 0.1], [-0.2, 1.0]].view(), &p).unwrap();
        let hg = pop_head_grad(&s);
        // Sigma carries B^3 factors, so with B = 0 the noise term is zero too.
        for j in 0..2 {
            assert!(hg.grad[j].abs() < 1e-30);
            assert!((hg.grad[j] + hg.noise_term[j]).abs() < 1e-30);
        }
    }

    fn fd_check(seed: u64, e: Array2<f64>) {
        let p = params(10, 8, 2, FeatureBasis::Random);
        let mut w = random_w(10, seed);
        // Put some feature mass on both neurons so all terms are active.
        w.row_mut(0).scaled_add(0.4, &p.v1);
        w.row_mut(1).scaled_add(0.3, &p.v2);
        w.row_mut(1).scaled_add(-0.1, &p.v1);
        let s = PopulationSnapshot::compute(w.view(), e.view(), &p).unwrap();
        let f = |w2: &Array2<f64>, e2: &Array2<f64>| pop_loss_against_target(w2.view(), e2.view(), w.view(), &p).unwrap();
        assert!((f(&w, &e) - s.loss).abs() < 1e-13);
        let wg = pop_weight_grad(&s, &p);
        let h = 1e-6;
        for j in 0..2 {
            for k in 0..10 {
                let mut wp = w.clone();
                wp[[j, k]] += h;
                let mut wm = w.clone();
                wm[[j, k]] -= h;
                let fd = (f(&wp, &e) - f(&wm, &e)) / (2.0 * h);
                let an = wg.grad[[j, k]];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "w[{j},{k}]: {fd} vs {an}");
            }
        }
        let hg = pop_head_grad(&s);
        for (j, idx) in [(0usize, (0usize, 1usize)), (1, (1, 0))] {
            let mut ep = e.clone();
            ep[idx] += h;
            let mut em = e.clone();
            em[idx] -= h;
            let fd = (f(&w, &ep) - f(&w, &em)) / (2.0 * h);
            assert!((fd - hg.grad[j]).abs() < 1e-6 * (1.0 + fd.abs()), "E {j}: {fd} vs {}", hg.grad[j]);
            assert!((hg.grad[j] - hg.grad_decomposed[j]).abs() < 1e-10 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn gradients_match_finite_differences_without_head() {
        fd_check(21, Array2::eye(2));
    }

    #[test]
    fn gradients_match_finite_differences_with_head() {
        fd_check(22, array![[1.0, 0.35], [-0.6, 1.0]]);
        fd_check(23, array![[1.0, -1.2], [0.25, 1.0]]);
    }
}

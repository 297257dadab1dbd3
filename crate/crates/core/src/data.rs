//! Synthetic patch data: two orthogonal features, spherical Gaussian noise
//! in their orthogonal complement, and half-mask positive pairs.

use ndarray::{Array1, Array2, ArrayView1};
use num_rational::Ratio;
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, dot_slice, normalize};
use crate::rng::Rng;

/// Which planted feature a sample carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Feature {
    /// v1, magnitude alpha1.
    Strong,
    /// v2, magnitude alpha2.
    Weak,
}

impl Feature {
    pub const ALL: [Feature; 2] = [Feature::Strong, Feature::Weak];

    /// Zero-based index: 0 for v1, 1 for v2.
    pub fn index(self) -> usize {
        match self {
            Feature::Strong => 0,
            Feature::Weak => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataParams {
    pub d: usize,
    /// Patches per sample (even).
    pub patches: usize,
    /// Feature patches per sample.
    pub feature_patches: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Sixth-moment scale of the noise: E[<xi, u>^6] = sigma^6 for unit u in V-perp.
    pub sigma: f64,
    pub v1: Array1<f64>,
    pub v2: Array1<f64>,
}

/// How the feature pair is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureBasis {
    /// v1 = e1, v2 = e2.
    Canonical,
    /// Seeded random orthonormal pair.
    Random,
}

impl DataParams {
    pub fn alpha(&self, feature: Feature) -> f64 {
        match feature {
            Feature::Strong => self.alpha1,
            Feature::Weak => self.alpha2,
        }
    }

    pub fn feature(&self, feature: Feature) -> ArrayView1<'_, f64> {
        match feature {
            Feature::Strong => self.v1.view(),
            Feature::Weak => self.v2.view(),
        }
    }

    /// Per-direction standard deviation of the noise, sigma / 15^(1/6).
    pub fn noise_std(&self) -> f64 {
        self.sigma / 15f64.powf(1.0 / 6.0)
    }

    /// Projection of `w` onto the orthogonal complement of span(v1, v2).
    pub fn project_noise(&self, w: ArrayView1<'_, f64>) -> Array1<f64> {
        let a = dot(w, self.v1.view());
        let b = dot(w, self.v2.view());
        let mut out = w.to_owned();
        out.scaled_add(-a, &self.v1);
        out.scaled_add(-b, &self.v2);
        out
    }

    pub fn validate(&self) -> Result<()> {
        check_shape(
            self.d,
            self.patches,
            self.feature_patches,
            self.alpha1,
            self.alpha2,
            self.sigma,
        )?;
        if self.v1.len() != self.d || self.v2.len() != self.d {
            return Err(Error::DimensionMismatch(format!(
                "feature vectors must have length d = {}",
                self.d
            )));
        }
        let n1 = dot(self.v1.view(), self.v1.view());
        let n2 = dot(self.v2.view(), self.v2.view());
        let c = dot(self.v1.view(), self.v2.view());
        if (n1 - 1.0).abs() > 1e-12 || (n2 - 1.0).abs() > 1e-12 || c.abs() > 1e-12 {
            return Err(Error::InvalidParameter(
                "v1, v2 must be orthonormal".into(),
            ));
        }
        Ok(())
    }
}

fn check_shape(
    d: usize,
    patches: usize,
    feature_patches: usize,
    alpha1: f64,
    alpha2: f64,
    sigma: f64,
) -> Result<()> {
    // Two feature directions plus at least one noise direction.
    if d < 3 {
        return Err(Error::InvalidParameter(format!("d = {d} must be at least 3")));
    }
    if patches == 0 || patches % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "P = {patches} must be a positive even number"
        )));
    }
    if feature_patches < 1 || 2 * feature_patches > patches {
        return Err(Error::InvalidParameter(format!(
            "P0 = {feature_patches} must satisfy 1 <= P0 <= P/2 = {}",
            patches / 2
        )));
    }
    if !(alpha2 > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha2 = {alpha2} must be positive")));
    }
    if !(alpha2 < alpha1) {
        return Err(Error::InvalidParameter(format!(
            "alpha2 = {alpha2} must be below alpha1 = {alpha1}"
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma = {sigma} must be positive")));
    }
    Ok(())
}

pub fn make_params(
    d: usize,
    patches: usize,
    feature_patches: usize,
    alpha1: f64,
    alpha2: f64,
    sigma: f64,
    basis: FeatureBasis,
    rng: &mut Rng,
) -> Result<DataParams> {
    check_shape(d, patches, feature_patches, alpha1, alpha2, sigma)?;
    let (v1, v2) = match basis {
        FeatureBasis::Canonical => {
            let mut v1 = Array1::zeros(d);
            let mut v2 = Array1::zeros(d);
            v1[0] = 1.0;
            v2[1] = 1.0;
            (v1, v2)
        }
        FeatureBasis::Random => random_orthonormal_pair(d, rng),
    };
    let params = DataParams {
        d,
        patches,
        feature_patches,
        alpha1,
        alpha2,
        sigma,
        v1,
        v2,
    };
    params.validate()?;
    Ok(params)
}

fn gaussian_vector(d: usize, rng: &mut Rng) -> Array1<f64> {
    Array1::from_iter((0..d).map(|_| StandardNormal.sample(rng)))
}

fn random_orthonormal_pair(d: usize, rng: &mut Rng) -> (Array1<f64>, Array1<f64>) {
    let mut v1 = gaussian_vector(d, rng);
    normalize(&mut v1);
    let mut v2 = gaussian_vector(d, rng);
    // Two Gram-Schmidt passes keep <v1, v2> at rounding level.
    for _ in 0..2 {
        let c = dot(v1.view(), v2.view());
        v2.scaled_add(-c, &v1);
    }
    normalize(&mut v2);
    (v1, v2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// P x d, one patch per row.
    pub patches: Array2<f64>,
    pub feature: Feature,
    /// +1 or -1.
    pub sign: f64,
    /// Sorted indices of the feature patches S(X).
    pub feature_set: Vec<usize>,
}

pub fn sample(params: &DataParams, rng: &mut Rng) -> Sample {
    let feature = if rng.random::<bool>() {
        Feature::Strong
    } else {
        Feature::Weak
    };
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut feature_set = index::sample(rng, params.patches, params.feature_patches).into_vec();
    feature_set.sort_unstable();

    let d = params.d;
    let s = params.noise_std();
    let mut patches = Array2::zeros((params.patches, d));
    let signal = sign * params.alpha(feature);
    let direction = params.feature(feature);
    let (v1, v2) = (
        params.v1.as_slice().expect("contiguous feature"),
        params.v2.as_slice().expect("contiguous feature"),
    );
    let mut next_feature = feature_set.iter().peekable();
    for (p, mut row) in patches.rows_mut().into_iter().enumerate() {
        let row = row.as_slice_mut().expect("contiguous patch");
        if next_feature.peek() == Some(&&p) {
            next_feature.next();
            for (x, v) in row.iter_mut().zip(direction.iter()) {
                *x = signal * v;
            }
            continue;
        }
        for x in row.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *x = s * g;
        }
        let a = dot_slice(row, v1);
        let b = dot_slice(row, v2);
        for ((x, u), v) in row.iter_mut().zip(v1).zip(v2) {
            *x -= a * u + b * v;
        }
    }
    Sample {
        patches,
        feature,
        sign,
        feature_set,
    }
}

/// Two views of one sample on complementary halves of the patch set. The
/// views share the sample's patches; `x1` zeroes every patch outside the
/// mask and `x2` every patch inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    /// The original sample, P x d.
    pub patches: Array2<f64>,
    /// `mask[p]` is true when patch p belongs to the first view.
    pub mask: Vec<bool>,
}

impl AugmentedPair {
    /// First view as a dense P x d array.
    pub fn x1(&self) -> Array2<f64> {
        self.view_array(true)
    }

    /// Second view as a dense P x d array.
    pub fn x2(&self) -> Array2<f64> {
        self.view_array(false)
    }

    fn view_array(&self, first: bool) -> Array2<f64> {
        let mut x = self.patches.clone();
        for (p, &keep) in self.mask.iter().enumerate() {
            if keep != first {
                x.row_mut(p).fill(0.0);
            }
        }
        x
    }

    /// Patch indices kept by the first view.
    pub fn first_view(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(p, _)| p)
    }

    /// Patch indices kept by the second view.
    pub fn second_view(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| !m).map(|(p, _)| p)
    }

    /// The original sample's patches, x1 + x2.
    pub fn unaugmented(&self) -> Array2<f64> {
        self.patches.clone()
    }
}

pub fn augment(sample: &Sample, rng: &mut Rng) -> AugmentedPair {
    let p = sample.patches.nrows();
    let chosen = index::sample(rng, p, p / 2);
    let mut mask = vec![false; p];
    for i in chosen.iter() {
        mask[i] = true;
    }
    augment_with_mask(sample, mask)
}

/// Applies a given mask; `mask` must select exactly half the patches.
pub fn augment_with_mask(sample: &Sample, mask: Vec<bool>) -> AugmentedPair {
    AugmentedPair {
        patches: sample.patches.clone(),
        mask,
    }
}

/// Draws `n` fresh samples and their positive pairs.
pub fn sample_pairs(params: &DataParams, n: usize, rng: &mut Rng) -> Vec<AugmentedPair> {
    (0..n)
        .map(|_| {
            let x = sample(params, rng);
            augment(&x, rng)
        })
        .collect()
}

/// Mask-overlap constants of the population objective.
///
/// With k = |S(X) ∩ mask| hypergeometric (population P, P0 marked, P/2
/// drawn): `c0 = E[k (P0 - k)] / 2`, `c1 = E[k^2] / 2`, and `c2` is the
/// expected number of noise patches in one view, `(P - P0) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskCoefficients {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactMaskCoefficients {
    pub c0: Ratio<i128>,
    pub c1: Ratio<i128>,
    pub c2: Ratio<i128>,
}

fn binomial(n: u64, k: u64) -> Option<i128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: i128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as i128)? / (i as i128 + 1);
    }
    Some(acc)
}

pub fn mask_overlap_coefficients_exact(
    patches: usize,
    feature_patches: usize,
) -> Result<ExactMaskCoefficients> {
    if patches == 0 || patches % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "P = {patches} must be a positive even number"
        )));
    }
    if feature_patches > patches {
        return Err(Error::InvalidParameter(format!(
            "P0 = {feature_patches} exceeds P = {patches}"
        )));
    }
    let overflow = || Error::InvalidParameter(format!("P = {patches} too large for exact enumeration"));
    let (n, m, h) = (patches as u64, feature_patches as u64, (patches / 2) as u64);
    let total = binomial(n, h).ok_or_else(overflow)?;
    let mut cross: i128 = 0;
    let mut square: i128 = 0;
    for k in 0..=m.min(h) {
        let ways = binomial(m, k)
            .and_then(|a| binomial(n - m, h - k).and_then(|b| a.checked_mul(b)))
            .ok_or_else(overflow)?;
        let k = k as i128;
        let m = m as i128;
        cross = ways
            .checked_mul(k * (m - k))
            .and_then(|v| cross.checked_add(v))
            .ok_or_else(overflow)?;
        square = ways
            .checked_mul(k * k)
            .and_then(|v| square.checked_add(v))
            .ok_or_else(overflow)?;
    }
    Ok(ExactMaskCoefficients {
        c0: Ratio::new(cross, 2 * total),
        c1: Ratio::new(square, 2 * total),
        c2: Ratio::new((n - m) as i128, 2),
    })
}

fn ratio_to_f64(r: Ratio<i128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn mask_overlap_coefficients(patches: usize, feature_patches: usize) -> Result<MaskCoefficients> {
    let exact = mask_overlap_coefficients_exact(patches, feature_patches)?;
    Ok(MaskCoefficients {
        c0: ratio_to_f64(exact.c0),
        c1: ratio_to_f64(exact.c1),
        c2: ratio_to_f64(exact.c2),
    })
}

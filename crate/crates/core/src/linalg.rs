use ndarray::{Array1, ArrayView1};

/// Sequential dot product; summation order is fixed so results are bitwise
/// reproducible regardless of memory layout.
#[inline]
pub fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc + x * y)
}

#[inline]
pub fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn norm(a: ArrayView1<'_, f64>) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &mut Array1<f64>) {
    let n = norm(a.view());
    *a /= n;
}

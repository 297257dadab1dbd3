//! Moments of a centered bivariate Gaussian via Isserlis' theorem.

/// Covariance of `(g1, g2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariateGaussian {
    pub var1: f64,
    pub var2: f64,
    pub cov: f64,
}

fn double_factorial_odd(n: i64) -> f64 {
    // (n)!! for odd n >= -1; (-1)!! = 1.
    let mut acc = 1.0;
    let mut k = n;
    while k > 1 {
        acc *= k as f64;
        k -= 2;
    }
    acc
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: u32) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

impl BivariateGaussian {
    /// `E[g1^p g2^q]`: sum over perfect matchings, grouped by the number k of
    /// cross pairs.
    pub fn moment(&self, p: u32, q: u32) -> f64 {
        if (p + q) % 2 == 1 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut k = p % 2;
        while k <= p.min(q) {
            let ways = binomial(p, k)
                * binomial(q, k)
                * factorial(k)
                * double_factorial_odd(p as i64 - k as i64 - 1)
                * double_factorial_odd(q as i64 - k as i64 - 1);
            total += ways
                * self.var1.powi(((p - k) / 2) as i32)
                * self.var2.powi(((q - k) / 2) as i32)
                * self.cov.powi(k as i32);
            k += 2;
        }
        total
    }
}

/// A polynomial in `(g1, g2)` stored as `(coefficient, p, q)` monomials.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Poly(pub Vec<(f64, u32, u32)>);

impl Poly {
    pub fn monomial(coef: f64, p: u32, q: u32) -> Self {
        Poly(vec![(coef, p, q)])
    }

    pub fn add(mut self, other: &Poly) -> Self {
        self.0.extend_from_slice(&other.0);
        self
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Vec::with_capacity(self.0.len() * other.0.len());
        for &(a, p, q) in &self.0 {
            for &(b, r, s) in &other.0 {
                out.push((a * b, p + r, q + s));
            }
        }
        Poly(out)
    }

    /// Partial derivative in `g1` (`var = 0`) or `g2` (`var = 1`).
    pub fn derivative(&self, var: usize) -> Poly {
        Poly(
            self.0
                .iter()
                .filter_map(|&(c, p, q)| match var {
                    0 if p > 0 => Some((c * p as f64, p - 1, q)),
                    1 if q > 0 => Some((c * q as f64, p, q - 1)),
                    _ => None,
                })
                .collect(),
        )
    }

    pub fn expectation(&self, law: &BivariateGaussian) -> f64 {
        self.0.iter().map(|&(c, p, q)| c * law.moment(p, q)).sum()
    }
}

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{arg, Error, Result};
use crate::video::VideoClip;

const REGULARIZER: f64 = 1e-6;

/// Peak signal-to-noise ratio for signals in `[0, 1]`; `+∞` when identical.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("psnr over {} vs {} values", a.len(), b.len())));
    }
    Ok(-10.0 * mse(a, b).log10())
}

pub fn clip_psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    if (a.frames, a.height, a.width) != (b.frames, b.height, b.width) {
        return Err(Error::Shape("clip dimensions differ".into()));
    }
    psnr(&a.data, &b.data)
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Set when the sample count was too small for a full-rank estimate and
    /// `ε·I` was added to the covariance.
    pub regularized: bool,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance. With fewer than `d + 1` samples
/// the covariance gets `1e-6·I` added.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return arg("need at least two feature vectors");
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors must share a nonzero length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centred = x;
    for j in 0..d {
        centred.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let mut cov = centred.transpose() * &centred / (n as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    let regularized = n < d + 1;
    if regularized {
        cov += DMatrix::identity(d, d) * REGULARIZER;
    }
    Ok(GaussianStats { mean, cov, regularized })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrechetDistance {
    pub value: f64,
    /// The matrix root needed `ε·I` regularization (or an input was
    /// regularized).
    pub regularized: bool,
}

fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)?;
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `tr((a^{1/2} b a^{1/2})^{1/2})`, i.e. the trace of the root of `a·b`.
fn trace_cross_root(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let ra = psd_sqrt(a)?;
    let inner = &ra * b * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)?;
    let t: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    t.is_finite().then_some(t)
}

/// `‖μ1 − μ2‖² + tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`, clamped at zero.
pub fn frechet(a: &GaussianStats, b: &GaussianStats) -> Result<FrechetDistance> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("stats of dim {} vs {}", a.dim(), b.dim())));
    }
    let d = a.dim();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let mut regularized = a.regularized || b.regularized;
    let cross = match trace_cross_root(&a.cov, &b.cov) {
        Some(t) => t,
        None => {
            regularized = true;
            let eps = DMatrix::identity(d, d) * REGULARIZER;
            trace_cross_root(&(&a.cov + &eps), &(&b.cov + &eps))
                .ok_or_else(|| Error::NonFinite("covariance root failed after regularization".into()))?
        }
    };
    let value = (mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0);
    Ok(FrechetDistance { value, regularized })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (average ranks for ties); NaN when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return arg("spearman needs two equal-length series of at least 2 points");
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

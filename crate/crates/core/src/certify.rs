//! Probabilistic certification: a Chernoff–Cramér bound on the probability
//! that a sampled transformation flips the prediction, made conservative by
//! taking the worst of several independent repetitions.

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, MaskableModel};
use crate::objectives::{discrepancy_value, margin_value};
use crate::rng::{self, streams};
use crate::tensor::Tensor;
use crate::transforms::TransformSpec;

/// Anything that maps a batch of inputs to class probabilities.
pub trait Classifier {
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

impl Classifier for MaskableModel {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x, None)
    }
}

/// Adapts a per-row closure into a [`Classifier`].
pub struct FnClassifier<F>(pub F);

impl<F: Fn(&[f64]) -> Vec<f64>> Classifier for FnClassifier<F> {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, _) = x.rows_cols();
        let out: Vec<Vec<f64>> = (0..rows).map(|r| (self.0)(x.row(r))).collect();
        Ok(Tensor::from_rows(&out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertConfig {
    /// Transformed samples per repetition.
    pub n: usize,
    /// Independent repetitions.
    pub l: usize,
    pub alpha: f64,
    pub error_bound: f64,
    pub t_count: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    /// Evaluation-set size.
    pub m: usize,
    pub c_v: f64,
    pub seed: u64,
}

impl Default for CertConfig {
    fn default() -> Self {
        CertConfig {
            n: 100,
            l: 10,
            alpha: 0.9,
            error_bound: 1e-3,
            t_count: 500,
            t_lo: 1e-4,
            t_hi: 1e4,
            m: 100,
            c_v: 1.0,
            seed: 0,
        }
    }
}

impl CertConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n < 1 || self.l < 1 || self.m < 1 {
            return bad("n, l and m must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.error_bound > 0.0 && self.error_bound < 1.0) {
            return bad(format!("error bound {} outside (0, 1)", self.error_bound));
        }
        if !(self.t_lo > 0.0 && self.t_lo < self.t_hi && self.t_hi.is_finite()) || self.t_count < 2 {
            return bad("temperature grid needs 0 < lo < hi and at least two points".into());
        }
        if !(self.c_v > 0.0) {
            return bad("c_v must be positive".into());
        }
        Ok(())
    }

    pub fn t_grid(&self) -> Vec<f64> {
        t_grid(self.t_count, self.t_lo, self.t_hi)
    }
}

/// `count` log-spaced points from `lo` to `hi`, both ends included.
pub fn t_grid(count: usize, lo: f64, hi: f64) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| match i {
            0 => lo,
            i if i + 1 == count => hi,
            i => (a + (b - a) * i as f64 / (count - 1) as f64).exp(),
        })
        .collect()
}

/// `Z_i = ‖p(x) − p(x_{T_i})‖_∞` for `n` sampled transformations of `x`.
pub fn z_samples<C: Classifier + ?Sized, R: Rng + ?Sized>(
    clf: &C,
    x: &[f64],
    spec: &TransformSpec,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one transformed sample".into()));
    }
    let p = clf.predict(&Tensor::from_rows(&[x.to_vec()]))?;
    let xs = spec.sample_set(x, n, rng)?;
    let pt = clf.predict(&Tensor::from_rows(&xs))?;
    (0..n).map(|i| discrepancy_value(p.row(0), pt.row(i))).collect()
}

/// `ln Y = logsumexp(Z·t) − ln n − d·t`.
pub fn log_y(z: &[f64], d: f64, t: f64) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * t));
    let s: f64 = z.iter().map(|&zi| (zi * t - m).exp()).sum();
    m + s.ln() - (z.len() as f64).ln() - d * t
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundEstimate {
    /// `min_t min(1, max_j Y_j(t))`.
    pub eps_hat: f64,
    pub best_t: f64,
    /// The same bound divided by α, clamped to 1. Reported only.
    pub eps_hat_alpha: f64,
}

/// Max over repetitions per temperature, then min over temperatures.
pub fn bound_from_z(z_lists: &[Vec<f64>], d: f64, grid: &[f64], alpha: f64) -> BoundEstimate {
    let mut best = (f64::INFINITY, grid[0]);
    for &t in grid {
        let worst = z_lists.iter().map(|z| log_y(z, d, t)).fold(f64::NEG_INFINITY, f64::max);
        if worst < best.0 {
            best = (worst, t);
        }
    }
    let eps = best.0.exp();
    BoundEstimate { eps_hat: eps.min(1.0), best_t: best.1, eps_hat_alpha: (eps / alpha).min(1.0) }
}

/// Draws `l` fresh Z lists for `x` and bounds the flip probability.
pub fn bound_estimate<C: Classifier + ?Sized, R: Rng + ?Sized>(
    clf: &C,
    x: &[f64],
    d: f64,
    spec: &TransformSpec,
    cfg: &CertConfig,
    rng: &mut R,
) -> Result<(BoundEstimate, Vec<Vec<f64>>)> {
    let z_lists = (0..cfg.l).map(|_| z_samples(clf, x, spec, cfg.n, rng)).collect::<Result<Vec<_>>>()?;
    Ok((bound_from_z(&z_lists, d, &cfg.t_grid(), cfg.alpha), z_lists))
}

/// One row of the certification table.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub sample_id: usize,
    pub label: usize,
    pub predicted: usize,
    pub d: f64,
    pub eps_hat: f64,
    pub eps_hat_alpha: f64,
    pub best_t: f64,
    /// Largest Z seen in each repetition.
    pub z_max: Vec<f64>,
    pub certified: bool,
}

impl SampleRow {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

pub fn certify_sample<C: Classifier + ?Sized, R: Rng + ?Sized>(
    clf: &C,
    sample_id: usize,
    x: &[f64],
    y: usize,
    spec: &TransformSpec,
    cfg: &CertConfig,
    rng: &mut R,
) -> Result<SampleRow> {
    let p = clf.predict(&Tensor::from_rows(&[x.to_vec()]))?;
    let predicted = argmax(p.row(0));
    let d = margin_value(p.row(0))?;
    let (est, z_lists) = bound_estimate(clf, x, d, spec, cfg, rng)?;
    let certified = predicted == y && d > 0.0 && est.eps_hat <= cfg.error_bound;
    Ok(SampleRow {
        sample_id,
        label: y,
        predicted,
        d,
        eps_hat: est.eps_hat,
        eps_hat_alpha: est.eps_hat_alpha,
        best_t: est.best_t,
        z_max: z_lists.iter().map(|z| z.iter().copied().fold(0.0, f64::max)).collect(),
        certified,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertResult {
    pub rows: Vec<SampleRow>,
    pub pca: f64,
    pub clean_accuracy: f64,
    pub paley_confidence: f64,
}

/// Certifies every sample of `eval`; sample `i` draws from its own stream.
pub fn pca<C: Classifier + ?Sized>(
    clf: &C,
    eval: &Dataset,
    spec: &TransformSpec,
    cfg: &CertConfig,
) -> Result<CertResult> {
    cfg.validate()?;
    if eval.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let rows = (0..eval.len())
        .map(|i| {
            let mut r = rng::substream(cfg.seed, streams::CERTIFY, i as u64);
            certify_sample(clf, i, eval.x(i), eval.y(i), spec, cfg, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = rows.len() as f64;
    let pca = rows.iter().filter(|r| r.certified).count() as f64 / m;
    let clean_accuracy = rows.iter().filter(|r| r.correct()).count() as f64 / m;
    Ok(CertResult { rows, pca, clean_accuracy, paley_confidence: paley_confidence(cfg) })
}

/// Deterministic evaluation subset of size `min(m, |ds|)`, in index order.
pub fn eval_subset(ds: &Dataset, m: usize, seed: u64) -> Dataset {
    if m >= ds.len() {
        return ds.clone();
    }
    let mut r = rng::stream(seed, streams::EVAL_SUBSET);
    let mut idx = rand::seq::index::sample(&mut r, ds.len(), m).into_vec();
    idx.sort_unstable();
    ds.subset(&idx)
}

/// `(1 / (1 + n(1−α)²/C_v²))^l`. `1 − α` is snapped to twelve decimals so
/// decimal inputs such as 0.9 give the exact closed form.
pub fn paley_confidence(cfg: &CertConfig) -> f64 {
    let q = ((1.0 - cfg.alpha) * 1e12).round() / 1e12;
    let base = 1.0 / (1.0 + cfg.n as f64 * q * q / (cfg.c_v * cfg.c_v));
    base.powi(cfg.l as i32)
}

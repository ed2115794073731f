//! Parametric semantic transformation spaces `S_T(x) = {T(x, δ) | δ ∈ range}`.
//!
//! Two families stand in for generator-based mutations:
//! * `DirectionShift`: `x + δ·v` along a unit direction `v`;
//! * `InterpCorrupt`: `clip((1-δ)·x + δ·corrupt(x), 0, 1)`.

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Corruption {
    /// `(1-a)·x + a`, a brightening fog stand-in; `a ∈ (0, 1]`.
    Haze { a: f64 },
    /// Separable 3-tap Gaussian blur with σ = `severity` over images of
    /// the given row width (replicated edges).
    GaussianBlur3 { severity: f64, width: usize },
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Corruption::Haze { a } if !(a > 0.0 && a <= 1.0) => {
                Err(Error::InvalidArgument(format!("haze severity {a} outside (0, 1]")))
            }
            Corruption::GaussianBlur3 { severity, width } if !(severity > 0.0) || width == 0 => {
                Err(Error::InvalidArgument("blur needs positive severity and width".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match *self {
            Corruption::Haze { a } => Ok(x.iter().map(|v| (1.0 - a) * v + a).collect()),
            Corruption::GaussianBlur3 { severity, width } => {
                if !x.len().is_multiple_of(width) {
                    return Err(Error::InvalidArgument(format!(
                        "input of length {} is not a whole number of rows of width {width}",
                        x.len()
                    )));
                }
                let side = (-1.0 / (2.0 * severity * severity)).exp();
                let k = [side / (1.0 + 2.0 * side), 1.0 / (1.0 + 2.0 * side), side / (1.0 + 2.0 * side)];
                let height = x.len() / width;
                let at = |img: &[f64], r: isize, c: isize| {
                    let r = r.clamp(0, height as isize - 1) as usize;
                    let c = c.clamp(0, width as isize - 1) as usize;
                    img[r * width + c]
                };
                let mut horiz = vec![0.0; x.len()];
                for r in 0..height as isize {
                    for c in 0..width as isize {
                        horiz[r as usize * width + c as usize] =
                            k[0] * at(x, r, c - 1) + k[1] * at(x, r, c) + k[2] * at(x, r, c + 1);
                    }
                }
                if height == 1 {
                    return Ok(horiz);
                }
                let mut out = vec![0.0; x.len()];
                for r in 0..height as isize {
                    for c in 0..width as isize {
                        out[r as usize * width + c as usize] = k[0] * at(&horiz, r - 1, c)
                            + k[1] * at(&horiz, r, c)
                            + k[2] * at(&horiz, r + 1, c);
                    }
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransformKind {
    DirectionShift { v: Vec<f64> },
    InterpCorrupt { corruption: Corruption },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// `[lo, hi] ⊆ [0, 1]`
    pub delta_range: (f64, f64),
}

impl TransformSpec {
    pub fn direction_shift(v: Vec<f64>) -> Result<Self> {
        let spec = TransformSpec { kind: TransformKind::DirectionShift { v }, delta_range: (0.0, 1.0) };
        spec.validate()?;
        Ok(spec)
    }

    pub fn interp_corrupt(corruption: Corruption) -> Result<Self> {
        let spec =
            TransformSpec { kind: TransformKind::InterpCorrupt { corruption }, delta_range: (0.0, 1.0) };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_delta_range(mut self, lo: f64, hi: f64) -> Result<Self> {
        self.delta_range = (lo, hi);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.delta_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!("delta range [{lo}, {hi}] not within [0, 1]")));
        }
        match &self.kind {
            TransformKind::DirectionShift { v } => {
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!("direction has norm {norm}, expected 1")));
                }
                Ok(())
            }
            TransformKind::InterpCorrupt { corruption } => corruption.validate(),
        }
    }

    /// `T(x, δ)`; `δ = 0` returns `x` unchanged.
    pub fn apply(&self, x: &[f64], delta: f64) -> Result<Vec<f64>> {
        let (lo, hi) = self.delta_range;
        if !(lo <= delta && delta <= hi) {
            return Err(Error::InvalidArgument(format!("delta {delta} outside [{lo}, {hi}]")));
        }
        if delta == 0.0 {
            return Ok(x.to_vec());
        }
        match &self.kind {
            TransformKind::DirectionShift { v } => {
                if v.len() != x.len() {
                    return Err(Error::shape("transform", &[&[x.len()], &[v.len()]]));
                }
                Ok(x.iter().zip(v).map(|(a, b)| a + delta * b).collect())
            }
            TransformKind::InterpCorrupt { corruption } => {
                let c = corruption.apply(x)?;
                Ok(x.iter()
                    .zip(&c)
                    .map(|(a, b)| ((1.0 - delta) * a + delta * b).clamp(0.0, 1.0))
                    .collect())
            }
        }
    }

    /// Uniform draw from the delta range.
    pub fn sample_delta<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.delta_range;
        let u: f64 = rng.random();
        (lo + (hi - lo) * u).min(hi)
    }

    /// `n` independent members of `S_T(x)`.
    pub fn sample_set<R: Rng + ?Sized>(&self, x: &[f64], n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        (0..n).map(|_| self.apply(x, self.sample_delta(rng))).collect()
    }
}

/// Clean/transformed input pairs used by the mask search.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSet {
    pub clean: Dataset,
    pub transformed: Dataset,
}

impl PairedSet {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// `S′ = S ∪ {(T(x, δ), y)}` for `count` selected originals, plus the pairs
/// `B_p`. Whole passes over `S` are taken in order; the remainder is a random
/// subset (kept in index order).
pub fn augment_dataset<R: Rng + ?Sized>(
    dataset: &Dataset,
    spec: &TransformSpec,
    count: usize,
    delta: f64,
    rng: &mut R,
) -> Result<(Dataset, PairedSet)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot augment an empty dataset".into()));
    }
    let n = dataset.len();
    let mut chosen: Vec<usize> = (0..count / n).flat_map(|_| 0..n).collect();
    let rem = count % n;
    if rem > 0 {
        let mut pick = rand::seq::index::sample(rng, n, rem).into_vec();
        pick.sort_unstable();
        chosen.extend(pick);
    }
    let mut augmented = dataset.clone();
    let mut clean = Dataset::empty(dataset.dim(), dataset.classes());
    let mut transformed = Dataset::empty(dataset.dim(), dataset.classes());
    for i in chosen {
        let xt = spec.apply(dataset.x(i), delta)?;
        augmented.push(&xt, dataset.y(i));
        clean.push(dataset.x(i), dataset.y(i));
        transformed.push(&xt, dataset.y(i));
    }
    Ok((augmented, PairedSet { clean, transformed }))
}

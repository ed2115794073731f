//! Soft-mask lifecycle: percentile-scaled initialization, noise injection,
//! layer-wise top-k binarization and the straight-through path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{MaskMode, MaskableModel};
use crate::tensor::Tensor;

/// `⌈x⌉`, snapping values within 1e-9 of an integer first so that e.g.
/// `(1 - 0.7)·10` keeps 3 units rather than 4.
pub fn ceil_snapped(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r.max(0.0) as usize
    } else {
        x.ceil().max(0.0) as usize
    }
}

/// Continuous mask `C ∈ [0,1]^N`, one vector per prunable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    layers: Vec<Vec<f64>>,
}

impl SoftMask {
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        if layers.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("soft mask entries must lie in [0, 1]".into()));
        }
        Ok(SoftMask { layers })
    }

    pub fn ones(units: &[usize]) -> Self {
        SoftMask { layers: units.iter().map(|&n| vec![1.0; n]).collect() }
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.layers
    }

    pub fn total_units(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn mean(&self) -> f64 {
        self.layers.iter().flatten().sum::<f64>() / self.total_units() as f64
    }

    /// Project every entry back onto `[0, 1]`.
    pub fn clamp(&mut self) {
        for v in self.layers.iter_mut().flatten() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Deployed binary mask `m̂` with its per-layer thresholds `τ_kⁱ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardMask {
    layers: Vec<Vec<bool>>,
    thresholds: Vec<f64>,
    pruning_ratio: f64,
}

impl HardMask {
    pub fn new(layers: Vec<Vec<bool>>, thresholds: Vec<f64>, pruning_ratio: f64) -> Result<Self> {
        if thresholds.len() != layers.len() {
            return Err(Error::InvalidArgument("one threshold per mask layer required".into()));
        }
        Ok(HardMask { layers, thresholds, pruning_ratio })
    }

    /// Keep-everything mask for the given unit counts.
    pub fn dense(units: &[usize]) -> Self {
        HardMask {
            layers: units.iter().map(|&n| vec![true; n]).collect(),
            thresholds: vec![f64::NEG_INFINITY; units.len()],
            pruning_ratio: 0.0,
        }
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Requested `pr`; see [`effective_ratio`] for the realized value.
    pub fn pruning_ratio(&self) -> f64 {
        self.pruning_ratio
    }

    pub fn kept_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.iter().filter(|&&b| b).count()).collect()
    }

    /// `{0, 1}` vectors for use as multipliers.
    pub fn as_f64(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .collect()
    }
}

/// `Cⁱ = clip(|θᵢ| / Q, 0, 1)` with `Q` the `⌈τ%·N_i⌉`-th largest magnitude,
/// so exactly the top τ% of units start at 1.
pub fn init_percentile_scaled(magnitudes: &[Vec<f64>], tau: f64) -> Result<SoftMask> {
    if !(tau > 0.0 && tau < 100.0) {
        return Err(Error::InvalidArgument(format!("percentile {tau} outside (0, 100)")));
    }
    let layers = magnitudes
        .iter()
        .enumerate()
        .map(|(i, mags)| {
            if mags.is_empty() {
                return Err(Error::InvalidArgument(format!("layer {i} has no prunable units")));
            }
            let top = ceil_snapped(tau * mags.len() as f64 / 100.0).clamp(1, mags.len());
            let mut sorted: Vec<f64> = mags.iter().map(|v| v.abs()).collect();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let q = sorted[top - 1];
            if q <= 0.0 {
                return Err(Error::Numeric(format!(
                    "layer {i}: percentile magnitude is zero; re-initialize the weights"
                )));
            }
            Ok(mags.iter().map(|v| (v.abs() / q).clamp(0.0, 1.0)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SoftMask { layers })
}

/// `C_ξ = clip(C + ξ, 0, 1)` for a given noise realization `ξ`.
pub fn noisy_with(g: &mut Graph, c: NodeId, xi: Tensor) -> Result<NodeId> {
    let xi = g.constant(xi);
    let shifted = g.add(c, xi)?;
    g.clip(shifted, 0.0, 1.0)
}

/// `C_ξ = clip(C + ξ, 0, 1)` with fresh `ξ ~ U(-μ, μ)` per entry.
pub fn sample_noisy<R: Rng + ?Sized>(g: &mut Graph, c: NodeId, mu: f64, rng: &mut R) -> Result<NodeId> {
    if !(mu >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise level {mu} must be non-negative")));
    }
    let shape = g.value(c).shape().to_vec();
    let xi = uniform_noise(g.value(c).len(), mu, rng);
    noisy_with(g, c, Tensor::new(shape, xi))
}

/// `n` i.i.d. draws of `U(-μ, μ)`.
pub fn uniform_noise<R: Rng + ?Sized>(n: usize, mu: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| (2.0 * rng.random::<f64>() - 1.0) * mu).collect()
}

/// Plain-valued noisy instance of a whole soft mask, consuming the stream
/// exactly as per-layer [`sample_noisy`] calls would.
pub fn noisy_instance<R: Rng + ?Sized>(c: &SoftMask, mu: f64, rng: &mut R) -> Vec<Vec<f64>> {
    c.layers
        .iter()
        .map(|l| {
            let xi = uniform_noise(l.len(), mu, rng);
            l.iter().zip(xi).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect()
        })
        .collect()
}

/// Layer-wise top-k projection keeping `⌈(1-pr)·N_i⌉` units per layer.
/// Ties are resolved in favour of the lower index.
pub fn binarize(scores: &[Vec<f64>], pr: f64) -> Result<HardMask> {
    if !(0.0..1.0).contains(&pr) {
        return Err(Error::InvalidArgument(format!("pruning ratio {pr} outside [0, 1)")));
    }
    let mut layers = Vec::with_capacity(scores.len());
    let mut thresholds = Vec::with_capacity(scores.len());
    for c in scores {
        let keep = ceil_snapped((1.0 - pr) * c.len() as f64).min(c.len());
        let mut order: Vec<usize> = (0..c.len()).collect();
        // Stable sort: equal values stay in index order.
        order.sort_by(|&a, &b| c[b].total_cmp(&c[a]));
        let mut m = vec![false; c.len()];
        for &i in &order[..keep] {
            m[i] = true;
        }
        thresholds.push(if keep > 0 { c[order[keep - 1]] } else { f64::INFINITY });
        layers.push(m);
    }
    Ok(HardMask { layers, thresholds, pruning_ratio: pr })
}

/// Differentiable hard mask: value `m̂`, gradient passed straight to `C`.
pub fn ste(g: &mut Graph, c: NodeId, hard: &[f64]) -> Result<NodeId> {
    let shape = g.value(c).shape().to_vec();
    if hard.len() != g.value(c).len() {
        return Err(Error::shape("ste", &[&shape, &[hard.len()]]));
    }
    g.straight_through(Tensor::new(shape, hard.to_vec()), c)
}

/// Weight entries zeroed by `𝒯(m̂)` for layers of the given `(out, in)` shapes.
pub fn zeroed_weights(mask: &[Vec<bool>], shapes: &[(usize, usize)], mode: MaskMode) -> Result<usize> {
    if mask.len() != shapes.len() {
        return Err(Error::InvalidArgument("mask/layer count mismatch".into()));
    }
    let mut zeroed = 0;
    for (m, &(out, inp)) in mask.iter().zip(shapes) {
        if m.len() != mode.units(out, inp) {
            return Err(Error::InvalidArgument("mask length does not match layer".into()));
        }
        zeroed += m.iter().filter(|&&b| !b).count() * mode.unit_weight_count(inp);
    }
    Ok(zeroed)
}

/// Realized `pr = 1 - ‖θ_m̂‖₀ / |θ|`, counting only mask-induced zeros.
pub fn effective_ratio(mask: &HardMask, model: &MaskableModel) -> Result<f64> {
    let shapes: Vec<_> = model
        .prunable_layers()
        .map(|i| (model.layers()[i].spec.out_dim, model.layers()[i].spec.in_dim))
        .collect();
    let zeroed = zeroed_weights(&mask.layers, &shapes, model.mask_mode())?;
    Ok(zeroed as f64 / model.weight_count() as f64)
}

//! Dense feed-forward classifiers whose weight matrices are scaled by
//! broadcast pruning masks: `f_C(x) = f(x; 𝒯(C) ⊙ θ)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Broadcast, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec { in_dim, out_dim, activation }
    }
}

/// What a single mask entry controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// One entry per weight.
    Unstructured,
    /// One entry per output unit (row of `θᵢ`); the classifier layer is exempt.
    Structured,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Unstructured => "unstructured",
            MaskMode::Structured => "structured",
        }
    }

    /// Number of prunable units in an `(out, in)` layer.
    pub fn units(self, out_dim: usize, in_dim: usize) -> usize {
        match self {
            MaskMode::Unstructured => out_dim * in_dim,
            MaskMode::Structured => out_dim,
        }
    }

    /// Weights governed by one mask entry.
    pub fn unit_weight_count(self, in_dim: usize) -> usize {
        match self {
            MaskMode::Unstructured => 1,
            MaskMode::Structured => in_dim,
        }
    }
}

impl std::str::FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unstructured" => Ok(MaskMode::Unstructured),
            "structured" => Ok(MaskMode::Structured),
            other => Err(format!("unknown mask mode `{other}`")),
        }
    }
}

/// Broadcast a layer's mask vector to the `(out, in)` weight shape.
pub fn broadcast(mask: &[f64], out_dim: usize, in_dim: usize, mode: MaskMode) -> Result<Tensor> {
    let expected = mode.units(out_dim, in_dim);
    if mask.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "mask length {} does not match {} units of a {out_dim}x{in_dim} layer",
            mask.len(),
            expected
        )));
    }
    let data = match mode {
        MaskMode::Unstructured => mask.to_vec(),
        MaskMode::Structured => {
            mask.iter().flat_map(|&m| std::iter::repeat_n(m, in_dim)).collect()
        }
    };
    Ok(Tensor::matrix(out_dim, in_dim, data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `(out_dim, in_dim)`
    pub weight: Tensor,
    /// `(out_dim,)`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskableModel {
    layers: Vec<Layer>,
    mask_mode: MaskMode,
}

/// Graph handles for a model's parameters.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("model needs at least one layer".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::InvalidArgument(format!("layer {i} has a zero dimension")));
        }
        if i > 0 && specs[i - 1].out_dim != s.in_dim {
            return Err(Error::InvalidArgument(format!(
                "layer {i} expects {} inputs but layer {} produces {}",
                s.in_dim,
                i - 1,
                specs[i - 1].out_dim
            )));
        }
    }
    let last = specs.last().expect("non-empty");
    if last.activation != Activation::None {
        return Err(Error::InvalidArgument("final layer must emit logits (activation none)".into()));
    }
    if last.out_dim < 2 {
        return Err(Error::InvalidArgument("classifier needs at least two classes".into()));
    }
    Ok(())
}

/// `in → hidden… → classes` with ReLU between hidden layers.
pub fn mlp_specs(input: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(classes);
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i + 2 == dims.len() { Activation::None } else { Activation::Relu };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect()
}

impl MaskableModel {
    pub fn from_layers(layers: Vec<Layer>, mask_mode: MaskMode) -> Result<Self> {
        let specs: Vec<_> = layers.iter().map(|l| l.spec).collect();
        validate_specs(&specs)?;
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape() != [l.spec.out_dim, l.spec.in_dim] || l.bias.shape() != [l.spec.out_dim] {
                return Err(Error::InvalidArgument(format!("layer {i} arrays do not match its spec")));
            }
        }
        Ok(MaskableModel { layers, mask_mode })
    }

    /// Uniform init in `±√(6/(in+out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(specs: &[LayerSpec], mask_mode: MaskMode, rng: &mut R) -> Result<Self> {
        validate_specs(specs)?;
        let layers = specs
            .iter()
            .map(|s| {
                let limit = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
                let w = (0..s.in_dim * s.out_dim).map(|_| rng.random_range(-limit..limit)).collect();
                Layer {
                    spec: *s,
                    weight: Tensor::matrix(s.out_dim, s.in_dim, w),
                    bias: Tensor::zeros(&[s.out_dim]),
                }
            })
            .collect();
        Ok(MaskableModel { layers, mask_mode })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn mask_mode(&self) -> MaskMode {
        self.mask_mode
    }

    pub fn with_mask_mode(mut self, mode: MaskMode) -> Self {
        self.mask_mode = mode;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().expect("validated non-empty").spec.out_dim
    }

    /// Indices of layers that carry a mask.
    pub fn prunable_layers(&self) -> std::ops::Range<usize> {
        match self.mask_mode {
            MaskMode::Unstructured => 0..self.layers.len(),
            MaskMode::Structured => 0..self.layers.len() - 1,
        }
    }

    /// `N_i` for each prunable layer.
    pub fn unit_counts(&self) -> Vec<usize> {
        self.prunable_layers()
            .map(|i| {
                let s = self.layers[i].spec;
                self.mask_mode.units(s.out_dim, s.in_dim)
            })
            .collect()
    }

    /// `N`, the total number of prunable units.
    pub fn total_units(&self) -> usize {
        self.unit_counts().iter().sum()
    }

    /// `|θ|`, weight entries only.
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    /// Per-unit magnitudes used for ranking: `|θ|` per weight, or the L2
    /// norm of each row in structured mode.
    pub fn unit_magnitudes(&self) -> Vec<Vec<f64>> {
        self.prunable_layers()
            .map(|i| {
                let w = &self.layers[i].weight;
                match self.mask_mode {
                    MaskMode::Unstructured => w.data().iter().map(|v| v.abs()).collect(),
                    MaskMode::Structured => {
                        (0..w.shape()[0]).map(|r| w.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
                    }
                }
            })
            .collect()
    }

    /// Per-layer multipliers (weight-shaped) from per-prunable-layer mask vectors.
    pub fn multipliers(&self, masks: &[Vec<f64>]) -> Result<Vec<Option<Tensor>>> {
        let prunable = self.prunable_layers();
        if masks.len() != prunable.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} mask layers, got {}",
                prunable.len(),
                masks.len()
            )));
        }
        let mut out = vec![None; self.layers.len()];
        for (m, i) in masks.iter().zip(prunable) {
            let s = self.layers[i].spec;
            out[i] = Some(broadcast(m, s.out_dim, s.in_dim, self.mask_mode)?);
        }
        Ok(out)
    }

    /// Logits for a `(batch, in)` or `(in,)` input; multipliers, if given,
    /// are already weight-shaped (`None` entries leave a layer dense).
    pub fn logits_with(&self, x: &Tensor, multipliers: Option<&[Option<Tensor>]>) -> Result<Tensor> {
        let (batch, width) = x.rows_cols();
        if x.rank() == 0 || width != self.input_dim() {
            return Err(Error::shape("forward", &[x.shape(), &[self.input_dim()]]));
        }
        if let Some(m) = multipliers {
            if m.len() != self.layers.len() {
                return Err(Error::InvalidArgument("one multiplier slot per layer required".into()));
            }
        }
        let mut h = x.data().to_vec();
        let mut width = width;
        for (li, layer) in self.layers.iter().enumerate() {
            let mult = multipliers.and_then(|m| m[li].as_ref());
            if let Some(m) = mult {
                if m.shape() != layer.weight.shape() {
                    return Err(Error::shape("forward", &[m.shape(), layer.weight.shape()]));
                }
            }
            let out = layer.spec.out_dim;
            let w = layer.weight.data();
            let mut next = vec![0.0; batch * out];
            for r in 0..batch {
                let xr = &h[r * width..(r + 1) * width];
                for o in 0..out {
                    let wr = &w[o * width..(o + 1) * width];
                    let dot: f64 = match mult {
                        Some(m) => {
                            let mr = &m.data()[o * width..(o + 1) * width];
                            xr.iter().zip(wr).zip(mr).map(|((a, b), c)| a * (b * c)).sum()
                        }
                        None => xr.iter().zip(wr).map(|(a, b)| a * b).sum(),
                    };
                    let v = dot + layer.bias.data()[o];
                    next[r * out + o] = match layer.spec.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::None => v,
                    };
                }
            }
            h = next;
            width = out;
        }
        let shape = if x.rank() == 1 { vec![width] } else { vec![batch, width] };
        let t = Tensor::new(shape, h);
        if !t.all_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(t)
    }

    /// Softmax probabilities, shape `(batch, K)` or `(K,)`.
    pub fn forward(&self, x: &Tensor, multipliers: Option<&[Option<Tensor>]>) -> Result<Tensor> {
        let logits = self.logits_with(x, multipliers)?;
        Ok(softmax_rows(&logits))
    }

    /// Forward under per-prunable-layer mask vectors.
    pub fn forward_masked(&self, x: &Tensor, masks: &[Vec<f64>]) -> Result<Tensor> {
        let m = self.multipliers(masks)?;
        self.forward(x, Some(&m))
    }

    /// A copy with `𝒯(mask) ⊙ θ` baked into the weights.
    pub fn apply_mask(&self, masks: &[Vec<f64>]) -> Result<MaskableModel> {
        let mult = self.multipliers(masks)?;
        let mut out = self.clone();
        for (layer, m) in out.layers.iter_mut().zip(mult) {
            if let Some(m) = m {
                for (w, k) in layer.weight.data_mut().iter_mut().zip(m.data()) {
                    *w *= k;
                }
            }
        }
        Ok(out)
    }

    /// Count of non-zero weight entries.
    pub fn nonzero_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().iter().filter(|v| **v != 0.0).count()).sum()
    }

    /// Put the parameters on a graph, trainable or frozen.
    pub fn load_into(&self, g: &mut Graph, trainable: bool) -> ModelNodes {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            weights.push(g.leaf(l.weight.clone(), trainable));
            biases.push(g.leaf(l.bias.clone(), trainable));
        }
        ModelNodes { weights, biases }
    }

    /// Differentiable logits. `masks`, when given, holds one mask-vector node
    /// per prunable layer; it is broadcast onto `θᵢ` inside the graph.
    pub fn graph_logits(
        &self,
        g: &mut Graph,
        params: &ModelNodes,
        x: NodeId,
        masks: Option<&[NodeId]>,
    ) -> Result<NodeId> {
        if let Some(m) = masks {
            if m.len() != self.prunable_layers().len() {
                return Err(Error::InvalidArgument("one mask node per prunable layer required".into()));
            }
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut w = params.weights[i];
            if let Some(m) = masks {
                if self.prunable_layers().contains(&i) {
                    let mask = m[i - self.prunable_layers().start];
                    w = match self.mask_mode {
                        MaskMode::Unstructured => {
                            let shaped = g.reshape(mask, &[layer.spec.out_dim, layer.spec.in_dim])?;
                            g.mul(w, shaped)?
                        }
                        MaskMode::Structured => g.mul_bcast(w, mask, Broadcast::Rows)?,
                    };
                }
            }
            h = g.affine(h, w, params.biases[i])?;
            if layer.spec.activation == Activation::Relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn graph_probs(
        &self,
        g: &mut Graph,
        params: &ModelNodes,
        x: NodeId,
        masks: Option<&[NodeId]>,
    ) -> Result<NodeId> {
        let logits = self.graph_logits(g, params, x, masks)?;
        g.softmax(logits)
    }
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (rows, cols) = logits.rows_cols();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in dst.iter_mut() {
            *o /= total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

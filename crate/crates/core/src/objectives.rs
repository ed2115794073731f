//! The compression-aware objective: stability, ratio, consistency and L1
//! terms over stochastic mask draws, plus the margin and discrepancy
//! primitives they are built from.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::mask::{binarize, noisy_instance, sample_noisy, ste, SoftMask};
use crate::model::{MaskableModel, ModelNodes};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub stab: f64,
    pub ratio: f64,
    pub consis: f64,
    pub l1: f64,
    /// Safety threshold on the robustness ratio, in `(0, 1]`.
    pub eta: f64,
    /// Added to the margin in the ratio denominator.
    pub eps_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { stab: 5.0, ratio: 1.0, consis: 1.0, l1: 1e-4, eta: 1.0, eps_margin: 1e-3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.stab, self.ratio, self.consis, self.l1];
        if all.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidArgument(format!("eta {} outside (0, 1]", self.eta)));
        }
        if !(self.eps_margin > 0.0) {
            return Err(Error::InvalidArgument("eps_margin must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step loss breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub stab: f64,
    pub ratio: f64,
    pub consis: f64,
    /// `‖C‖₁ / N`, the value the L1 weight multiplies.
    pub l1: f64,
    /// Unnormalized `‖C‖₁`.
    pub l1_raw: f64,
    pub composite: f64,
    /// `‖∇_C L‖₂`, filled in after backprop.
    pub grad_norm: f64,
    /// Seed of the stream all mask draws of this step came from.
    pub draw_seed: u64,
}

/// Half gap between the two largest probabilities.
pub fn margin_value(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::InvalidArgument("margin needs at least two classes".into()));
    }
    let (i1, i2) = crate::autodiff::top_two(p);
    Ok((p[i1] - p[i2]) / 2.0)
}

/// `‖p_a − p_b‖_∞`.
pub fn discrepancy_value(pa: &[f64], pb: &[f64]) -> Result<f64> {
    if pa.len() != pb.len() {
        return Err(Error::shape("discrepancy", &[&[pa.len()], &[pb.len()]]));
    }
    Ok(pa.iter().zip(pb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

pub fn margin(g: &mut Graph, p: NodeId) -> Result<NodeId> {
    g.topk_margin(p)
}

pub fn discrepancy(g: &mut Graph, pa: NodeId, pb: NodeId) -> Result<NodeId> {
    let diff = g.sub(pa, pb)?;
    g.inf_norm(diff)
}

/// Batch mean of `‖p_m − p_n‖₂²`.
pub fn stability_loss(g: &mut Graph, pm: NodeId, pn: NodeId) -> Result<NodeId> {
    let diff = g.sub(pm, pn)?;
    let sq = g.l2_norm_sq(diff)?;
    g.mean(sq)
}

/// Batch mean of `softplus(Z / (d + ε) − η)`.
pub fn ratio_loss(g: &mut Graph, z: NodeId, d: NodeId, w: &LossWeights) -> Result<NodeId> {
    let denom = g.shift(d, w.eps_margin)?;
    let r = g.div(z, denom)?;
    let shifted = g.shift(r, -w.eta)?;
    let sp = g.softplus(shifted)?;
    g.mean(sp)
}

/// Batch mean of `KL(p_soft ‖ p_hard)`.
pub fn consistency_loss(g: &mut Graph, p_soft: NodeId, p_hard: NodeId) -> Result<NodeId> {
    let kl = g.kl_div(p_soft, p_hard)?;
    g.mean(kl)
}

/// Nodes of one assembled objective.
#[derive(Debug, Clone)]
pub struct CompositeNodes {
    pub total: NodeId,
    pub stab: NodeId,
    pub ratio: NodeId,
    pub consis: NodeId,
    pub l1: NodeId,
}

/// Builds the full objective on `g`. `c_nodes` holds one soft-mask leaf per
/// prunable layer; the model parameters in `params` should be frozen.
#[allow(clippy::too_many_arguments)]
pub fn composite_step_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &MaskableModel,
    params: &ModelNodes,
    c_nodes: &[NodeId],
    x: &Tensor,
    x_t: &Tensor,
    weights: &LossWeights,
    pr: f64,
    mu: f64,
    rng: &mut R,
) -> Result<CompositeNodes> {
    if x.is_empty() || x.shape() != x_t.shape() {
        return Err(Error::shape("composite_step_loss", &[x.shape(), x_t.shape()]));
    }
    let draw = |g: &mut Graph, rng: &mut R| -> Result<Vec<NodeId>> {
        c_nodes.iter().map(|&c| sample_noisy(g, c, mu, rng)).collect()
    };
    let cm = draw(g, rng)?;
    let cn = draw(g, rng)?;
    let cs = draw(g, rng)?;

    let xn = g.constant(x.clone());
    let xtn = g.constant(x_t.clone());

    let pm = model.graph_probs(g, params, xn, Some(&cm))?;
    let pn = model.graph_probs(g, params, xn, Some(&cn))?;
    let stab = stability_loss(g, pm, pn)?;

    let soft: Vec<Vec<f64>> = c_nodes.iter().map(|&c| g.value(c).data().to_vec()).collect();
    let hard = binarize(&soft, pr)?.as_f64();
    let hard_nodes = c_nodes
        .iter()
        .zip(&hard)
        .map(|(&c, h)| ste(g, c, h))
        .collect::<Result<Vec<_>>>()?;
    let ph = model.graph_probs(g, params, xn, Some(&hard_nodes))?;
    let consis = consistency_loss(g, pm, ph)?;

    let ps = model.graph_probs(g, params, xtn, Some(&cs))?;
    let z = discrepancy(g, pm, ps)?;
    let d = margin(g, pm)?;
    let ratio = ratio_loss(g, z, d, weights)?;

    let total_units: usize = soft.iter().map(Vec::len).sum();
    let mut l1_raw = g.l1_sum(c_nodes[0])?;
    for &c in &c_nodes[1..] {
        let part = g.l1_sum(c)?;
        l1_raw = g.add(l1_raw, part)?;
    }
    let l1 = g.scale(l1_raw, 1.0 / total_units as f64)?;

    let mut total = g.scale(stab, weights.stab)?;
    for (term, w) in [(consis, weights.consis), (ratio, weights.ratio), (l1, weights.l1)] {
        let weighted = g.scale(term, w)?;
        total = g.add(total, weighted)?;
    }
    Ok(CompositeNodes { total, stab, ratio, consis, l1 })
}

/// One evaluation of the objective and its gradient with respect to `C`.
/// All mask draws come from `rng`, so a fixed seed fixes the noise.
#[allow(clippy::too_many_arguments)]
pub fn mask_gradient(
    model: &MaskableModel,
    soft: &SoftMask,
    x: &Tensor,
    x_t: &Tensor,
    weights: &LossWeights,
    pr: f64,
    mu: f64,
    draw_seed: u64,
) -> Result<(StepReport, Vec<Vec<f64>>)> {
    let mut rng: StreamRng = rand::SeedableRng::seed_from_u64(draw_seed);
    let mut g = Graph::new();
    let params = model.load_into(&mut g, false);
    let c_nodes: Vec<NodeId> =
        soft.layers().iter().map(|l| g.param(Tensor::vector(l.clone()))).collect();
    let nodes = composite_step_loss(&mut g, model, &params, &c_nodes, x, x_t, weights, pr, mu, &mut rng)?;
    let grads = g.backward(nodes.total)?;
    if params.weights.iter().chain(&params.biases).any(|&w| g.grad(w).is_some()) {
        return Err(Error::Invariant("frozen weights received a gradient".into()));
    }
    let per_layer: Vec<Vec<f64>> = c_nodes
        .iter()
        .map(|&c| grads.get(c).map(|t| t.data().to_vec()).unwrap_or_default())
        .collect();
    let grad_norm = per_layer.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let l1 = g.value(nodes.l1).item();
    let report = StepReport {
        stab: g.value(nodes.stab).item(),
        ratio: g.value(nodes.ratio).item(),
        consis: g.value(nodes.consis).item(),
        l1,
        l1_raw: l1 * soft.total_units() as f64,
        composite: g.value(nodes.total).item(),
        grad_norm,
        draw_seed,
    };
    Ok((report, per_layer))
}

/// Terms of the three-part upper bound on `Z_C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleBound {
    pub z_c: f64,
    /// `‖p_C(x) − p̄(x)‖₂`
    pub a: f64,
    /// `‖p̄(x) − p̄(x_T)‖_∞`
    pub b: f64,
    /// `‖p̄(x_T) − p_C(x_T)‖₂`
    pub c: f64,
}

impl TriangleBound {
    pub fn bound(&self) -> f64 {
        self.a + self.b + self.c
    }
}

/// Estimates the ensemble means with `draws` noisy masks, evaluates the
/// bound for one further draw `C`, and checks `Z_C ≤ A + B + C`.
pub fn triangle_bound_check<R: Rng + ?Sized>(
    model: &MaskableModel,
    soft: &SoftMask,
    x: &[f64],
    x_t: &[f64],
    mu: f64,
    draws: usize,
    rng: &mut R,
) -> Result<TriangleBound> {
    if draws < 2 {
        return Err(Error::InvalidArgument("triangle bound needs at least two draws".into()));
    }
    let k = model.class_count();
    let pair = Tensor::from_rows(&[x.to_vec(), x_t.to_vec()]);
    let mut mean = vec![0.0; 2 * k];
    for _ in 0..draws {
        let inst = noisy_instance(soft, mu, rng);
        let p = model.forward_masked(&pair, &inst)?;
        for (m, v) in mean.iter_mut().zip(p.data()) {
            *m += v / draws as f64;
        }
    }
    let fixed = noisy_instance(soft, mu, rng);
    let p = model.forward_masked(&pair, &fixed)?;
    let (px, pxt) = (p.row(0), p.row(1));
    let (bar_x, bar_xt) = (&mean[..k], &mean[k..]);
    let l2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    let tb = TriangleBound {
        z_c: discrepancy_value(px, pxt)?,
        a: l2(px, bar_x),
        b: discrepancy_value(bar_x, bar_xt)?,
        c: l2(bar_xt, pxt),
    };
    if tb.z_c > tb.bound() + 1e-9 {
        return Err(Error::Invariant(format!(
            "triangle bound violated: Z_C = {} > {}",
            tb.z_c,
            tb.bound()
        )));
    }
    Ok(tb)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{mlp_specs, MaskMode};

    #[test]
    fn margin_examples() {
        assert!((margin_value(&[0.7, 0.2, 0.1]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(margin_value(&[0.25; 4]).unwrap(), 0.0);
        assert_eq!(margin_value(&[0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(margin_value(&[1.0]).is_err());
    }

    #[test]
    fn discrepancy_examples() {
        assert_eq!(discrepancy_value(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(discrepancy_value(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let z = discrepancy_value(&[0.6, 0.3, 0.1], &[0.5, 0.45, 0.05]).unwrap();
        assert!((z - 0.15).abs() < 1e-15);
        assert!(discrepancy_value(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn stability_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![0.0, 1.0]]));
        let s = stability_loss(&mut g, a, b).unwrap();
        assert_eq!(g.value(s).item(), 2.0);
        let s = stability_loss(&mut g, a, a).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
    }

    #[test]
    fn ratio_closed_forms() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0]));
        let d = g.constant(Tensor::vector(vec![0.5]));
        let r = ratio_loss(&mut g, z, d, &w).unwrap();
        assert!((g.value(r).item() - 0.313_261_687_518_222_8).abs() < 1e-12);

        let z = g.constant(Tensor::vector(vec![0.3 + w.eps_margin]));
        let d = g.constant(Tensor::vector(vec![0.3]));
        let r = ratio_loss(&mut g, z, d, &w).unwrap();
        assert!((g.value(r).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ratio_monotonicity() {
        let w = LossWeights::default();
        let eval = |z: f64, d: f64| {
            let mut g = Graph::new();
            let zn = g.constant(Tensor::vector(vec![z]));
            let dn = g.constant(Tensor::vector(vec![d]));
            let r = ratio_loss(&mut g, zn, dn, &w).unwrap();
            g.value(r).item()
        };
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 40.0).collect();
        for &d in &grid {
            for pair in grid.windows(2) {
                assert!(eval(pair[1], d) > eval(pair[0], d));
            }
        }
        for &z in &grid[1..] {
            for pair in grid.windows(2) {
                assert!(eval(z, pair[1]) < eval(z, pair[0]));
            }
        }
    }

    #[test]
    fn consistency_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&[vec![0.2, 0.8]]));
        let k = consistency_loss(&mut g, p, p).unwrap();
        assert!(g.value(k).item().abs() < 1e-15);
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![0.5, 0.5]]));
        let k = consistency_loss(&mut g, a, b).unwrap();
        assert!((g.value(k).item() - std::f64::consts::LN_2).abs() < 1e-6);
    }

    fn toy_model(mode: MaskMode, seed: u64) -> MaskableModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MaskableModel::init(&mlp_specs(3, &[4], 3), mode, &mut rng).unwrap()
    }

    #[test]
    fn degenerate_collapse() {
        let model = toy_model(MaskMode::Unstructured, 1);
        let soft = SoftMask::ones(&model.unit_counts());
        let x = Tensor::from_rows(&[vec![0.5, -0.2, 1.0], vec![-1.0, 0.3, 0.2]]);
        let w = LossWeights::default();
        let (rep, _) = mask_gradient(&model, &soft, &x, &x, &w, 0.0, 0.0, 3).unwrap();
        assert_eq!(rep.stab, 0.0);
        assert!(rep.consis.abs() < 1e-15);
        assert!((rep.ratio - crate::autodiff::softplus(-w.eta)).abs() < 1e-15);
        assert!((rep.l1 - 1.0).abs() < 1e-15);
        assert_eq!(rep.l1_raw, soft.total_units() as f64);
    }

    #[test]
    fn composite_is_weighted_sum() {
        let model = toy_model(MaskMode::Structured, 2);
        let soft = SoftMask::new(vec![vec![0.9, 0.4, 0.7, 0.2]]).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -0.2, 1.0], vec![-1.0, 0.3, 0.2]]);
        let xt = Tensor::from_rows(&[vec![0.7, -0.2, 1.0], vec![-1.0, 0.6, 0.2]]);
        let w = LossWeights::default();
        let (r, grad) = mask_gradient(&model, &soft, &x, &xt, &w, 0.5, 0.5, 9).unwrap();
        let want = w.stab * r.stab + w.consis * r.consis + w.ratio * r.ratio + w.l1 * r.l1;
        assert!((r.composite - want).abs() < 1e-10);
        assert!(r.composite >= 0.0);
        assert_eq!(grad.len(), 1);
        assert_eq!(grad[0].len(), 4);
        assert!(r.grad_norm > 0.0);
    }

    #[test]
    fn triangle_collapses_without_noise() {
        let model = toy_model(MaskMode::Unstructured, 4);
        let soft = SoftMask::ones(&model.unit_counts());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = [0.1, 0.2, 0.3];
        let tb = triangle_bound_check(&model, &soft, &x, &x, 0.0, 4, &mut rng).unwrap();
        assert_eq!((tb.z_c, tb.bound()), (0.0, 0.0));
        let xt = [0.4, -0.2, 0.3];
        let tb = triangle_bound_check(&model, &soft, &x, &xt, 0.0, 4, &mut rng).unwrap();
        assert_eq!(tb.a, 0.0);
        assert_eq!(tb.c, 0.0);
        assert_eq!(tb.b, tb.z_c);
        assert!(triangle_bound_check(&model, &soft, &x, &xt, 0.0, 1, &mut rng).is_err());
    }
}

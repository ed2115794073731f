//! Shared oracles for the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use csam::autodiff::{Broadcast, Graph, NodeId, KL_SMOOTHING};
use csam::mask::{binarize, uniform_noise, SoftMask};
use csam::model::{mlp_specs, MaskMode, MaskableModel};
use csam::objectives::LossWeights;
use csam::tensor::Tensor;
use csam::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

pub type Builder = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;
pub type Sampler = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>;

/// Largest relative error between backprop and central differences of
/// `Σ r ⊙ op(inputs)` for a fixed random `r`.
pub fn fd_check(build: &Builder, inputs: &[Tensor], seed: u64) -> f64 {
    let eval = |vals: &[Tensor], r: Option<&Tensor>| -> (f64, Graph, Vec<NodeId>, NodeId, Tensor) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids).expect("op builds");
        let shape = g.value(out).shape().to_vec();
        let r = r.cloned().unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
            let n = g.value(out).len();
            Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        });
        let rn = g.constant(r.clone());
        let prod = g.mul(out, rn).expect("same shape");
        let loss = g.sum(prod).expect("sum");
        (g.value(loss).item(), g, ids, loss, r)
    };
    let (_, mut g, ids, loss, r) = eval(inputs, None);
    let grads = g.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("leaf grad").data().to_vec();
        for j in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, Some(&r)).0 - eval(&minus, Some(&r)).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero in magnitude.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect()
}

/// Rows whose sorted absolute values (or raw values) are separated, so no
/// finite-difference step crosses a tie.
fn separated_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize, signed: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut levels: Vec<f64> = (0..cols).map(|i| 0.1 + 0.3 * i as f64 + rng.random_range(0.0..0.1)).collect();
        for i in (1..cols).rev() {
            let j = rng.random_range(0..=i);
            levels.swap(i, j);
        }
        for v in levels {
            out.push(if signed && rng.random::<bool>() { -v } else { v });
        }
    }
    out
}

fn probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for _ in 0..rows {
        let raw = uniform(rng, cols, 0.1, 1.0);
        let s: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / s));
    }
    out
}

pub struct PrimitiveCase {
    pub name: &'static str,
    pub build: Box<Builder>,
    pub inputs: Box<Sampler>,
}

fn case(
    name: &'static str,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
) -> PrimitiveCase {
    PrimitiveCase { name, build: Box::new(build), inputs: Box::new(inputs) }
}

fn m(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data)
}

/// One case per differentiable primitive, each with a constrained sampler.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    let (r, c) = (3, 4);
    vec![
        case("affine", |g, x| g.affine(x[0], x[1], x[2]), move |rng| {
            vec![m(r, c, uniform(rng, r * c, -1.0, 1.0)), m(2, c, uniform(rng, 2 * c, -1.0, 1.0)), Tensor::vector(uniform(rng, 2, -1.0, 1.0))]
        }),
        case("relu", |g, x| g.relu(x[0]), move |rng| vec![m(r, c, away_from_zero(rng, r * c))]),
        case("softmax", |g, x| g.softmax(x[0]), move |rng| vec![m(r, c, uniform(rng, r * c, -2.0, 2.0))]),
        case("log", |g, x| g.log(x[0]), move |rng| vec![m(r, c, uniform(rng, r * c, 0.2, 3.0))]),
        case("exp", |g, x| g.exp(x[0]), move |rng| vec![m(r, c, uniform(rng, r * c, -2.0, 2.0))]),
        case("add", |g, x| g.add(x[0], x[1]), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0)), m(r, c, uniform(rng, r * c, -1.0, 1.0))]),
        case("sub", |g, x| g.sub(x[0], x[1]), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0)), m(r, c, uniform(rng, r * c, -1.0, 1.0))]),
        case("mul", |g, x| g.mul(x[0], x[1]), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0)), m(r, c, uniform(rng, r * c, -1.0, 1.0))]),
        case("div", |g, x| g.div(x[0], x[1]), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0)), m(r, c, uniform(rng, r * c, 0.5, 2.0))]),
        case("add_bcast_scalar", |g, x| g.add_bcast(x[0], x[1], Broadcast::Scalar), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0)), Tensor::scalar(rng.random_range(-1.0..1.0))]),
        case("sub_bcast_rows", |g, x| g.sub_bcast(x[0], x[1], Broadcast::Rows), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0)), Tensor::vector(uniform(rng, r, -1.0, 1.0))]),
        case("mul_bcast_rows", |g, x| g.mul_bcast(x[0], x[1], Broadcast::Rows), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0)), Tensor::vector(uniform(rng, r, -1.0, 1.0))]),
        case("mul_bcast_cols", |g, x| g.mul_bcast(x[0], x[1], Broadcast::Cols), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0)), Tensor::vector(uniform(rng, c, -1.0, 1.0))]),
        case("div_bcast_scalar", |g, x| g.div_bcast(x[0], x[1], Broadcast::Scalar), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0)), Tensor::scalar(rng.random_range(0.5..2.0))]),
        case("scale", |g, x| g.scale(x[0], -1.7), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0))]),
        case("shift", |g, x| g.shift(x[0], 0.3), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0))]),
        case("sum", |g, x| g.sum(x[0]), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0))]),
        case("mean", |g, x| g.mean(x[0]), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0))]),
        case("square", |g, x| g.square(x[0]), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0))]),
        case("sqrt", |g, x| g.sqrt(x[0]), move |rng| vec![m(r, c, uniform(rng, r * c, 0.2, 3.0))]),
        case("l2_norm_sq", |g, x| g.l2_norm_sq(x[0]), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0))]),
        case("inf_norm", |g, x| g.inf_norm(x[0]), move |rng| vec![m(r, c, separated_rows(rng, r, c, true))]),
        case("topk_margin", |g, x| g.topk_margin(x[0]), move |rng| vec![m(r, c, separated_rows(rng, r, c, false))]),
        case("kl_div", |g, x| g.kl_div(x[0], x[1]), move |rng| vec![m(r, c, probs(rng, r, c)), m(r, c, probs(rng, r, c))]),
        case("cross_entropy", |g, x| g.cross_entropy(x[0], &[0, 3, 1]), move |rng| vec![m(r, c, uniform(rng, r * c, -2.0, 2.0))]),
        case("l1_sum", |g, x| g.l1_sum(x[0]), move |rng| vec![m(r, c, away_from_zero(rng, r * c))]),
        case("clip", |g, x| g.clip(x[0], -0.5, 0.5), move |rng| {
            vec![m(r, c, (0..r * c).map(|i| if i % 3 == 0 { rng.random_range(0.6..1.0) } else { rng.random_range(-0.45..0.45) }).collect())]
        }),
        case("softplus", |g, x| g.softplus(x[0]), move |rng| vec![m(r, c, uniform(rng, r * c, -3.0, 3.0))]),
        case("reshape", |g, x| g.reshape(x[0], &[4, 3]), move |rng| vec![m(r, c, uniform(rng, r * c, -1.0, 1.0))]),
    ]
}

pub fn small_model(seed: u64, mode: MaskMode) -> MaskableModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MaskableModel::init(&mlp_specs(3, &[5], 3), mode, &mut rng).expect("valid specs");
    // Zero biases would put every pruned structured unit on the ReLU kink.
    for layer in model.layers_mut() {
        for b in layer.bias.data_mut() {
            *b = rng.random_range(0.1..0.5) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
    }
    model
}

fn smooth(p: f64, k: usize) -> f64 {
    (1.0 - KL_SMOOTHING) * p + KL_SMOOTHING / k as f64
}

fn margin(p: &[f64]) -> f64 {
    let mut s = p.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    (s[0] - s[1]) / 2.0
}

/// The composite objective evaluated with plain forwards, the noise drawn
/// exactly as the graph version draws it, and the binarized mask replaced by
/// its straight-through surrogate `m̂₀ + (C − C₀)`.
#[allow(clippy::too_many_arguments)]
pub fn composite_oracle(
    model: &MaskableModel,
    c: &[Vec<f64>],
    c0: &[Vec<f64>],
    x: &Tensor,
    xt: &Tensor,
    w: &LossWeights,
    pr: f64,
    mu: f64,
    draw_seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
    let mut draw = || -> Vec<Vec<f64>> {
        c.iter()
            .map(|l| {
                let xi = uniform_noise(l.len(), mu, &mut rng);
                l.iter().zip(xi).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect()
            })
            .collect()
    };
    let (cm, cn, cs) = (draw(), draw(), draw());
    let hard0 = binarize(c0, pr).unwrap().as_f64();
    let surrogate: Vec<Vec<f64>> = hard0
        .iter()
        .zip(c.iter().zip(c0))
        .map(|(h, (cl, c0l))| h.iter().zip(cl.iter().zip(c0l)).map(|(h, (a, b))| h + (a - b)).collect())
        .collect();
    let pm = model.forward_masked(x, &cm).unwrap();
    let pn = model.forward_masked(x, &cn).unwrap();
    let ps = model.forward_masked(xt, &cs).unwrap();
    let ph = model.forward_masked(x, &surrogate).unwrap();
    let (b, k) = pm.rows_cols();
    let mut stab = 0.0;
    let mut consis = 0.0;
    let mut ratio = 0.0;
    for i in 0..b {
        let (a, n, s, h) = (pm.row(i), pn.row(i), ps.row(i), ph.row(i));
        stab += a.iter().zip(n).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        consis += a
            .iter()
            .zip(h)
            .map(|(&u, &v)| {
                let (u, v) = (smooth(u, k), smooth(v, k));
                u * (u.ln() - v.ln())
            })
            .sum::<f64>();
        let z = a.iter().zip(s).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        ratio += csam::autodiff::softplus(z / (margin(a) + w.eps_margin) - w.eta);
    }
    let n_units: usize = c.iter().map(Vec::len).sum();
    let l1 = c.iter().flatten().map(|v| v.abs()).sum::<f64>() / n_units as f64;
    w.stab * stab / b as f64 + w.consis * consis / b as f64 + w.ratio * ratio / b as f64 + w.l1 * l1
}

/// Central-difference gradient of [`composite_oracle`] around `c0`.
#[allow(clippy::too_many_arguments)]
pub fn composite_fd(
    model: &MaskableModel,
    c0: &SoftMask,
    x: &Tensor,
    xt: &Tensor,
    w: &LossWeights,
    pr: f64,
    mu: f64,
    draw_seed: u64,
) -> Vec<Vec<f64>> {
    let base = c0.layers().to_vec();
    let mut out = Vec::new();
    for (li, layer) in base.iter().enumerate() {
        let mut g = Vec::with_capacity(layer.len());
        for j in 0..layer.len() {
            let mut plus = base.clone();
            plus[li][j] += FD_STEP;
            let mut minus = base.clone();
            minus[li][j] -= FD_STEP;
            let fp = composite_oracle(model, &plus, &base, x, xt, w, pr, mu, draw_seed);
            let fm = composite_oracle(model, &minus, &base, x, xt, w, pr, mu, draw_seed);
            g.push((fp - fm) / (2.0 * FD_STEP));
        }
        out.push(g);
    }
    out
}

/// Random soft mask strictly inside (0, 1), with distinct entries.
pub fn interior_mask(units: &[usize], rng: &mut ChaCha8Rng) -> SoftMask {
    SoftMask::new(units.iter().map(|&n| (0..n).map(|_| rng.random_range(0.05..0.95)).collect()).collect())
        .unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect())
}

/// A config that runs every stage in well under a second.
pub const TINY_CONFIG: &str = "\
seed = 3
dim = 4
train_per_class = 40
test_per_class = 20
hidden = 8
mask_modes = unstructured,structured
batch_size = 16
pretrain_epochs = 3
search_epochs = 2
finetune_epochs = 2
cert_n = 10
cert_l = 2
t_count = 50
cert_m = 12
";

/// Writes [`TINY_CONFIG`] into `dir/tiny.conf`, with `extra` lines
/// replacing base lines of the same key.
pub fn write_tiny_config(dir: &std::path::Path, extra: &str) -> std::path::PathBuf {
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String =
        TINY_CONFIG.lines().filter(|l| !overridden.contains(&key(l))).map(|l| format!("{l}\n")).collect();
    text.push_str(extra);
    let path = dir.join("tiny.conf");
    std::fs::write(&path, text).unwrap();
    path
}

/// Runs the command-line entry point with string arguments.
pub fn csam_cli(args: &[&str]) -> i32 {
    csam::cli::run_from_args(std::iter::once("csam").chain(args.iter().copied()))
}

/// Every CSV under `dir`, keyed by relative path.
pub fn csv_bodies(dir: &std::path::Path) -> std::collections::BTreeMap<String, String> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.extension().is_some_and(|e| e == "csv") {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read_to_string(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

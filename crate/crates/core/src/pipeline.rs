//! The three-stage procedure (dense pre-training, robust mask search,
//! masked fine-tuning), the two baselines, and the experiment driver that
//! compares them under one certification protocol.

use std::fmt::Display;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Graph;
use crate::certify::{eval_subset, pca, CertResult};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{gen_synthetic, load_idx, Dataset};
use crate::error::{Error, Result};
use crate::mask::{binarize, effective_ratio, init_percentile_scaled, HardMask, SoftMask};
use crate::model::{argmax, mlp_specs, MaskMode, MaskableModel};
use crate::objectives::{mask_gradient, LossWeights, StepReport};
use crate::optim::{Adam, Sgd};
use crate::rng::{self, streams, StreamRng};
use crate::tensor::Tensor;
use crate::transforms::{augment_dataset, PairedSet, TransformSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub search_epochs: usize,
    pub search_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weights: LossWeights,
    pub mu: f64,
    pub pruning_ratio: f64,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 50,
            pretrain_lr: 0.01,
            search_epochs: 100,
            search_lr: 1e-4,
            finetune_epochs: 50,
            finetune_lr: 1e-3,
            batch_size: 64,
            momentum: 0.9,
            weights: LossWeights::default(),
            mu: 0.5,
            pruning_ratio: 0.5,
            tau: 30.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.pretrain_epochs == 0 || self.search_epochs == 0 || self.finetune_epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.pretrain_lr > 0.0 && self.search_lr > 0.0 && self.finetune_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.pruning_ratio) {
            return bad("pruning ratio must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad("noise level must lie in [0, 1]");
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Vanilla,
    Lmp,
    Csam,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Lmp => "lmp",
            Method::Csam => "csam",
        }
    }
}

impl Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vanilla" => Ok(Method::Vanilla),
            "lmp" => Ok(Method::Lmp),
            "csam" => Ok(Method::Csam),
            other => Err(format!("unknown method `{other}` (expected vanilla, lmp or csam)")),
        }
    }
}

/// Mean cross-entropy of each epoch.
pub type EpochLosses = Vec<f64>;

fn batches(n: usize, batch: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Mini-batch cross-entropy training with momentum SGD. `grad_mask`, when
/// given, multiplies each weight gradient so masked entries never move.
fn train_ce(
    model: &mut MaskableModel,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    cfg: &TrainConfig,
    grad_mask: Option<&[Option<Tensor>]>,
    rng: &mut StreamRng,
) -> Result<EpochLosses> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut opt = Sgd::new(lr, cfg.momentum);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0;
        for idx in batches(data.len(), cfg.batch_size, rng) {
            let (x, y) = data.batch(&idx);
            let mut g = Graph::new();
            let params = model.load_into(&mut g, true);
            let xn = g.constant(x);
            let logits = model.graph_logits(&mut g, &params, xn, None)?;
            let ce = g.cross_entropy(logits, &y)?;
            let loss = g.mean(ce)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("training loss diverged in epoch {epoch}")));
            }
            total += value * idx.len() as f64;
            let grads = g.backward(loss)?;
            for (li, layer) in model.layers_mut().iter_mut().enumerate() {
                let mut gw = grads.get(params.weights[li]).expect("trainable").data().to_vec();
                if let Some(m) = grad_mask.and_then(|m| m[li].as_ref()) {
                    for (gi, mi) in gw.iter_mut().zip(m.data()) {
                        *gi *= mi;
                    }
                }
                let gb = grads.get(params.biases[li]).expect("trainable").data().to_vec();
                opt.step(2 * li, layer.weight.data_mut(), &gw);
                opt.step(2 * li + 1, layer.bias.data_mut(), &gb);
            }
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

/// Stage 1: dense training on the augmented set.
pub fn stage1_pretrain(model: &mut MaskableModel, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<EpochLosses> {
    cfg.validate()?;
    let mut r = rng::stream(seed, streams::PRETRAIN);
    train_ce(model, data, cfg.pretrain_epochs, cfg.pretrain_lr, cfg, None, &mut r)
}

/// Stage 2: learns the soft mask with `θ` frozen. Returns the mask and one
/// report per optimizer step.
pub fn stage2_mask_search(
    model: &MaskableModel,
    pairs: &PairedSet,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(SoftMask, Vec<StepReport>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("mask search needs at least one pair".into()));
    }
    let mut soft = init_percentile_scaled(&model.unit_magnitudes(), cfg.tau)?;
    let mut r = rng::stream(seed, streams::SEARCH);
    let mut opt = Adam::new(cfg.search_lr);
    let mut log = Vec::new();
    for _ in 0..cfg.search_epochs {
        for idx in batches(pairs.len(), cfg.batch_size, &mut r) {
            let (x, _) = pairs.clean.batch(&idx);
            let (xt, _) = pairs.transformed.batch(&idx);
            let draw_seed = r.random::<u64>();
            let (report, grads) = mask_gradient(
                model,
                &soft,
                &x,
                &xt,
                &cfg.weights,
                cfg.pruning_ratio,
                cfg.mu,
                draw_seed,
            )?;
            if !report.composite.is_finite() || !report.grad_norm.is_finite() {
                return Err(Error::Numeric(format!("mask search diverged at step {}", log.len())));
            }
            opt.tick();
            for (i, (c, gc)) in soft.layers_mut().iter_mut().zip(&grads).enumerate() {
                opt.step(i, c, gc);
            }
            soft.clamp();
            log.push(report);
        }
    }
    Ok((soft, log))
}

/// Stage 3: binarizes `soft` and fine-tunes the surviving weights.
pub fn stage3_finetune(
    pretrained: &MaskableModel,
    soft: &SoftMask,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(MaskableModel, HardMask, EpochLosses)> {
    let hard = binarize(soft.layers(), cfg.pruning_ratio)?;
    let (model, losses) = finetune_masked(pretrained, &hard, data, cfg, seed)?;
    Ok((model, hard, losses))
}

/// Fine-tunes `𝒯(m̂) ⊙ θ` with gradients multiplied by the mask, so pruned
/// weights stay exactly zero.
pub fn finetune_masked(
    pretrained: &MaskableModel,
    hard: &HardMask,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(MaskableModel, EpochLosses)> {
    cfg.validate()?;
    let masks = hard.as_f64();
    let mut model = pretrained.apply_mask(&masks)?;
    let mult = model.multipliers(&masks)?;
    let mut r = rng::stream(seed, streams::FINETUNE);
    let losses = train_ce(&mut model, data, cfg.finetune_epochs, cfg.finetune_lr, cfg, Some(&mult), &mut r)?;
    Ok((model, losses))
}

/// Least-magnitude pruning: keep the largest `|θ|` per layer, then the same
/// fine-tuning schedule.
pub fn lmp_baseline(
    pretrained: &MaskableModel,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(MaskableModel, HardMask, EpochLosses)> {
    let hard = binarize(&pretrained.unit_magnitudes(), cfg.pruning_ratio)?;
    let (model, losses) = finetune_masked(pretrained, &hard, data, cfg, seed)?;
    Ok((model, hard, losses))
}

pub fn accuracy(model: &MaskableModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let p = model.forward(&data.features(), None)?;
    let hits = (0..data.len()).filter(|&i| argmax(p.row(i)) == data.y(i)).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Data shared by every method of one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    /// `S′`, the training set plus its transformed copies.
    pub augmented: Dataset,
    /// `B_p`, fixed once per experiment.
    pub pairs: PairedSet,
    /// The certification subset of the test set.
    pub eval: Dataset,
    pub transform: TransformSpec,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DataSource::Synthetic => gen_synthetic(&cfg.synthetic_spec()?),
        DataSource::Idx => Ok((
            load_idx(&cfg.idx_train_images, &cfg.idx_train_labels, cfg.classes)?,
            load_idx(&cfg.idx_test_images, &cfg.idx_test_labels, cfg.classes)?,
        )),
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (train, test) = load_data(cfg)?;
    let transform = cfg.transform_spec(train.dim())?;
    let count = if cfg.augment_count == 0 { train.len() } else { cfg.augment_count };
    let mut r = rng::stream(cfg.seed, streams::AUGMENT);
    let (augmented, pairs) = augment_dataset(&train, &transform, count, cfg.augment_delta, &mut r)?;
    let eval = eval_subset(&test, cfg.cert.m, cfg.seed);
    Ok(Prepared { train, test, augmented, pairs, eval, transform })
}

pub fn init_model(cfg: &ExperimentConfig, input_dim: usize) -> Result<MaskableModel> {
    let mut r = rng::stream(cfg.seed, streams::INIT);
    MaskableModel::init(&mlp_specs(input_dim, &cfg.hidden, cfg.classes), MaskMode::Unstructured, &mut r)
}

/// Everything one method produced.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    pub mode: MaskMode,
    /// Deployed model, masks baked in.
    pub model: MaskableModel,
    pub hard_mask: Option<HardMask>,
    pub soft_mask: Option<SoftMask>,
    pub search_log: Vec<StepReport>,
    pub finetune_losses: EpochLosses,
    pub accuracy: f64,
    pub ratio: f64,
    pub cert: CertResult,
    pub wall_seconds: f64,
}

/// One summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub mode: MaskMode,
    pub acc: f64,
    pub pca: f64,
    pub ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub prepared: Prepared,
    pub pretrained: MaskableModel,
    pub pretrain_losses: EpochLosses,
    pub outcomes: Vec<MethodOutcome>,
}

impl Experiment {
    pub fn rows(&self, seed: u64) -> Vec<ResultRow> {
        self.outcomes
            .iter()
            .map(|o| ResultRow {
                method: o.method,
                mode: o.mode,
                acc: o.accuracy,
                pca: o.cert.pca,
                ratio: o.ratio,
                seed,
            })
            .collect()
    }

    pub fn outcome(&self, method: Method, mode: MaskMode) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == method && o.mode == mode)
    }
}

/// Trains and certifies one method from a shared pretrained model.
pub fn run_method(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    pretrained: &MaskableModel,
    method: Method,
    mode: MaskMode,
) -> Result<MethodOutcome> {
    let start = Instant::now();
    let base = pretrained.clone().with_mask_mode(mode);
    let t = &cfg.train;
    let (model, hard, soft, search_log, finetune_losses) = match method {
        Method::Vanilla => (base, None, None, Vec::new(), Vec::new()),
        Method::Lmp => {
            let (m, h, l) = lmp_baseline(&base, &prepared.augmented, t, cfg.seed)?;
            (m, Some(h), None, Vec::new(), l)
        }
        Method::Csam => {
            let (soft, log) = stage2_mask_search(&base, &prepared.pairs, t, cfg.seed)?;
            let (m, h, l) = stage3_finetune(&base, &soft, &prepared.augmented, t, cfg.seed)?;
            (m, Some(h), Some(soft), log, l)
        }
    };
    let ratio = match &hard {
        Some(h) => effective_ratio(h, &model)?,
        None => 0.0,
    };
    let accuracy = accuracy(&model, &prepared.test)?;
    let cert = pca(&model, &prepared.eval, &prepared.transform, &cfg.cert_config())?;
    Ok(MethodOutcome {
        method,
        mode,
        model,
        hard_mask: hard,
        soft_mask: soft,
        search_log,
        finetune_losses,
        accuracy,
        ratio,
        cert,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Builds the shared data once, pre-trains once, then runs every
/// `(mode, method)` pair against the same inputs and certification seeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.train.validate()?;
    cfg.cert.validate()?;
    let prepared = prepare(cfg)?;
    let mut pretrained = init_model(cfg, prepared.train.dim())?;
    let pretrain_losses = stage1_pretrain(&mut pretrained, &prepared.augmented, &cfg.train, cfg.seed)?;
    let mut outcomes = Vec::new();
    for &mode in &cfg.mask_modes {
        for &method in &cfg.methods {
            outcomes.push(run_method(cfg, &prepared, &pretrained, method, mode)?);
        }
    }
    Ok(Experiment { prepared, pretrained, pretrain_losses, outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Layer, LayerSpec};

    fn small_config() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            dim: 4,
            hidden: vec![6],
            train_per_class: 20,
            test_per_class: 10,
            ..ExperimentConfig::default()
        };
        c.train.pretrain_epochs = 3;
        c.train.search_epochs = 2;
        c.train.finetune_epochs = 2;
        c.train.batch_size = 16;
        c.cert.n = 5;
        c.cert.l = 2;
        c.cert.m = 6;
        c
    }

    #[test]
    fn lmp_keeps_largest_magnitudes() {
        let layer = Layer {
            spec: LayerSpec::new(2, 2, Activation::None),
            weight: Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, -4.0]),
            bias: Tensor::zeros(&[2]),
        };
        let model = MaskableModel::from_layers(vec![layer], MaskMode::Unstructured).unwrap();
        let hard = binarize(&model.unit_magnitudes(), 0.5).unwrap();
        assert_eq!(
            hard.layers()[0],
vec![false, false, true, true]);
        let cfg = TrainConfig { pruning_ratio: 0.0, ..TrainConfig::default() };
        let dense = binarize(&model.unit_magnitudes(), cfg.pruning_ratio).unwrap();
        assert!(dense.layers()[0].iter().all(|&k| k));
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig { pretrain_epochs: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_isolation_and_masked_weights() {
        let cfg = small_config();
        let prepared = prepare(&cfg).unwrap();
        let mut model = init_model(&cfg, prepared.train.dim()).unwrap();
        stage1_pretrain(&mut model, &prepared.augmented, &cfg.train, cfg.seed).unwrap();
        let before = model.clone();
        let (soft, log) = stage2_mask_search(&model, &prepared.pairs, &cfg.train, cfg.seed).unwrap();
        assert_eq!(model, before);
        assert!(!log.is_empty());
        assert!(soft.layers().iter().flatten().all(|v| (0.0..=1.0).contains(v)));

        let (tuned, hard, _) = stage3_finetune(&model, &soft, &prepared.augmented, &cfg.train, cfg.seed).unwrap();
        for (layer, (keep, orig)) in tuned.layers().iter().zip(hard.as_f64().iter().zip(model.layers())) {
            assert_eq!(layer.spec, orig.spec);
            for (w, k) in layer.weight.data().iter().zip(keep) {
                if *k == 0.0 {
                    assert_eq!(*w, 0.0);
                }
            }
        }
        let realized = effective_ratio(&hard, &tuned).unwrap();
        let zeroed = tuned.weight_count() - tuned.nonzero_weights();
        assert!((realized - zeroed as f64 / tuned.weight_count() as f64).abs() < 1e-12);
    }

    #[test]
    fn vanilla_only_and_determinism() {
        let mut cfg = small_config();
        cfg.methods = vec![Method::Vanilla];
        let a = run_experiment(&cfg).unwrap();
        let rows = a.rows(cfg.seed);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].ratio, 0.0);
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(rows, b.rows(cfg.seed));
    }
}

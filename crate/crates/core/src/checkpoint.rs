//! JSON checkpoints: layer arrays, mask mode, optional masks and a stage tag.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{HardMask, SoftMask};
use crate::model::{Activation, Layer, LayerSpec, MaskMode, MaskableModel};
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Search,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Search => "search",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRecord {
    #[serde(rename = "in")]
    in_dim: usize,
    #[serde(rename = "out")]
    out_dim: usize,
    activation: Activation,
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    version: u32,
    stage: Stage,
    mask_mode: MaskMode,
    layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    soft_mask: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hard_mask: Option<HardRecord>,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HardRecord {
    pruning_ratio: f64,
    /// `null` stands for a keep-everything layer (threshold −∞).
    thresholds: Vec<Option<f64>>,
    keep: Vec<Vec<u8>>,
}

/// A model plus whatever masks its stage produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: MaskableModel,
    pub soft_mask: Option<SoftMask>,
    pub hard_mask: Option<HardMask>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn pretrain(model: MaskableModel, seed: u64) -> Self {
        Checkpoint { stage: Stage::Pretrain, model, soft_mask: None, hard_mask: None, seed }
    }

    pub fn search(model: MaskableModel, soft: SoftMask, seed: u64) -> Self {
        Checkpoint { stage: Stage::Search, model, soft_mask: Some(soft), hard_mask: None, seed }
    }

    pub fn finetune(model: MaskableModel, hard: HardMask, seed: u64) -> Self {
        Checkpoint { stage: Stage::Finetune, model, soft_mask: None, hard_mask: Some(hard), seed }
    }

    pub fn to_json(&self) -> Result<String> {
        let layers = self
            .model
            .layers()
            .iter()
            .map(|l| {
                let (out, inp) = (l.spec.out_dim, l.spec.in_dim);
                LayerRecord {
                    in_dim: inp,
                    out_dim: out,
                    activation: l.spec.activation,
                    w: (0..out).map(|r| l.weight.row(r).to_vec()).collect(),
                    b: l.bias.data().to_vec(),
                }
            })
            .collect();
        let rec = Record {
            version: VERSION,
            stage: self.stage,
            mask_mode: self.model.mask_mode(),
            layers,
            soft_mask: self.soft_mask.as_ref().map(|s| s.layers().to_vec()),
            hard_mask: self.hard_mask.as_ref().map(|h| HardRecord {
                pruning_ratio: h.pruning_ratio(),
                thresholds: h.thresholds().iter().map(|&t| t.is_finite().then_some(t)).collect(),
                keep: h.layers().iter().map(|l| l.iter().map(|&k| k as u8).collect()).collect(),
            }),
            seed: self.seed,
        };
        serde_json::to_string_pretty(&rec).map_err(|e| Error::Invariant(format!("serialize checkpoint: {e}")))
    }

    /// Parses and validates; `origin` only labels errors.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(origin, m);
        let rec: Record = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if rec.version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", rec.version)));
        }
        let mut layers = Vec::with_capacity(rec.layers.len());
        for (i, l) in rec.layers.into_iter().enumerate() {
            if l.w.len() != l.out_dim || l.w.iter().any(|r| r.len() != l.in_dim) || l.b.len() != l.out_dim {
                return Err(bad(format!("layer {i} arrays do not match declared {}x{}", l.out_dim, l.in_dim)));
            }
            layers.push(Layer {
                spec: LayerSpec::new(l.in_dim, l.out_dim, l.activation),
                weight: Tensor::matrix(l.out_dim, l.in_dim, l.w.concat()),
                bias: Tensor::vector(l.b),
            });
        }
        let model = MaskableModel::from_layers(layers, rec.mask_mode).map_err(|e| bad(e.to_string()))?;
        let units = model.unit_counts();
        let lengths_ok = |ls: Vec<usize>| ls == units;

        let soft_mask = match rec.soft_mask {
            Some(s) => {
                if !lengths_ok(s.iter().map(Vec::len).collect()) {
                    return Err(bad("soft mask lengths do not match the model".into()));
                }
                Some(SoftMask::new(s).map_err(|e| bad(e.to_string()))?)
            }
            None => None,
        };
        let hard_mask = match rec.hard_mask {
            Some(h) => {
                if !lengths_ok(h.keep.iter().map(Vec::len).collect()) {
                    return Err(bad("hard mask lengths do not match the model".into()));
                }
                if h.keep.iter().flatten().any(|&k| k > 1) {
                    return Err(bad("hard mask entries must be 0 or 1".into()));
                }
                let keep = h.keep.iter().map(|l| l.iter().map(|&k| k == 1).collect()).collect();
                let thresholds = h.thresholds.iter().map(|t| t.unwrap_or(f64::NEG_INFINITY)).collect();
                Some(HardMask::new(keep, thresholds, h.pruning_ratio).map_err(|e| bad(e.to_string()))?)
            }
            None => None,
        };
        match (rec.stage, soft_mask.is_some(), hard_mask.is_some()) {
            (Stage::Pretrain, false, false) | (Stage::Search, true, false) | (Stage::Finetune, false, true) => {}
            (stage, ..) => {
                return Err(bad(format!("stage `{}` carries the wrong masks", stage.as_str())));
            }
        }
        Ok(Checkpoint { stage: rec.stage, model, soft_mask, hard_mask, seed: rec.seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text, path)
    }

    /// Loads and checks the stage tag, turning a missing file into an
    /// actionable error that names the producing command.
    pub fn load_stage(path: &Path, stage: Stage, producer: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: format!("run `{producer}` first or pass --stage-checkpoint"),
            });
        }
        let ck = Checkpoint::load(path)?;
        if ck.stage != stage {
            return Err(Error::format(
                path,
                format!("expected a `{}` checkpoint, found `{}`", stage.as_str(), ck.stage.as_str()),
            ));
        }
        Ok(ck)
    }
}

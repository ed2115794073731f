//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; missing
//! keys take the defaults below. Unknown keys, malformed values and range
//! violations are errors that name the key and its line.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::certify::CertConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::MaskMode;
use crate::objectives::LossWeights;
use crate::pipeline::{Method, TrainConfig};
use crate::transforms::{Corruption, TransformSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Idx,
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "idx" => Ok(DataSource::Idx),
            other => Err(format!("unknown dataset `{other}` (expected synthetic or idx)")),
        }
    }
}

impl Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Idx => "idx",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformChoice {
    Direction,
    Haze,
    Blur,
}

impl FromStr for TransformChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "direction" => Ok(TransformChoice::Direction),
            "haze" => Ok(TransformChoice::Haze),
            "blur" => Ok(TransformChoice::Blur),
            other => Err(format!("unknown transform `{other}` (expected direction, haze or blur)")),
        }
    }
}

impl Display for TransformChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            TransformChoice::Direction => "direction",
            TransformChoice::Haze => "haze",
            TransformChoice::Blur => "blur",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub dataset: DataSource,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub sigma: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub idx_train_images: PathBuf,
    pub idx_train_labels: PathBuf,
    pub idx_test_images: PathBuf,
    pub idx_test_labels: PathBuf,

    pub hidden: Vec<usize>,
    pub mask_modes: Vec<MaskMode>,
    pub methods: Vec<Method>,

    pub transform: TransformChoice,
    pub haze_a: f64,
    pub blur_severity: f64,
    pub image_width: usize,
    pub delta_lo: f64,
    pub delta_hi: f64,
    pub augment_delta: f64,
    /// Transformed samples added to the training set; 0 means `|S|`.
    pub augment_count: usize,

    pub train: TrainConfig,
    pub cert: CertConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: DataSource::Synthetic,
            dim: 16,
            classes: 2,
            separation: 1.5,
            sigma: 1.0,
            train_per_class: 500,
            test_per_class: 250,
            idx_train_images: PathBuf::new(),
            idx_train_labels: PathBuf::new(),
            idx_test_images: PathBuf::new(),
            idx_test_labels: PathBuf::new(),
            hidden: vec![64, 64],
            mask_modes: vec![MaskMode::Unstructured],
            methods: vec![Method::Vanilla, Method::Lmp, Method::Csam],
            transform: TransformChoice::Direction,
            haze_a: 0.6,
            blur_severity: 1.0,
            image_width: 28,
            delta_lo: 0.0,
            delta_hi: 1.0,
            augment_delta: 1.0,
            augment_count: 0,
            train: TrainConfig::default(),
            cert: CertConfig::default(),
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    v.split(',').map(|s| parse(s.trim())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let w = &mut t.weights;
        let c = &mut self.cert;
        match key {
            "seed" => self.seed = parse(v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "dataset" => self.dataset = parse(v)?,
            "dim" => self.dim = parse(v)?,
            "classes" => self.classes = parse(v)?,
            "separation" => self.separation = parse(v)?,
            "sigma" => self.sigma = parse(v)?,
            "train_per_class" => self.train_per_class = parse(v)?,
            "test_per_class" => self.test_per_class = parse(v)?,
            "idx_train_images" => self.idx_train_images = PathBuf::from(v),
            "idx_train_labels" => self.idx_train_labels = PathBuf::from(v),
            "idx_test_images" => self.idx_test_images = PathBuf::from(v),
            "idx_test_labels" => self.idx_test_labels = PathBuf::from(v),
            "hidden" => self.hidden = parse_list(v)?,
            "mask_modes" => self.mask_modes = parse_list(v)?,
            "methods" => self.methods = parse_list(v)?,
            "transform" => self.transform = parse(v)?,
            "haze_a" => self.haze_a = parse(v)?,
            "blur_severity" => self.blur_severity = parse(v)?,
            "image_width" => self.image_width = parse(v)?,
            "delta_lo" => self.delta_lo = parse(v)?,
            "delta_hi" => self.delta_hi = parse(v)?,
            "augment_delta" => self.augment_delta = parse(v)?,
            "augment_count" => self.augment_count = parse(v)?,
            "batch_size" => t.batch_size = parse(v)?,
            "momentum" => t.momentum = parse(v)?,
            "pretrain_epochs" => t.pretrain_epochs = parse(v)?,
            "pretrain_lr" => t.pretrain_lr = parse(v)?,
            "search_epochs" => t.search_epochs = parse(v)?,
            "search_lr" => t.search_lr = parse(v)?,
            "finetune_epochs" => t.finetune_epochs = parse(v)?,
            "finetune_lr" => t.finetune_lr = parse(v)?,
            "pruning_ratio" => t.pruning_ratio = parse(v)?,
            "tau" => t.tau = parse(v)?,
            "mu" => t.mu = parse(v)?,
            "lambda_stab" => w.stab = parse(v)?,
            "lambda_ratio" => w.ratio = parse(v)?,
            "lambda_consis" => w.consis = parse(v)?,
            "lambda_l1" => w.l1 = parse(v)?,
            "eta" => w.eta = parse(v)?,
            "eps_margin" => w.eps_margin = parse(v)?,
            "cert_n" => c.n = parse(v)?,
            "cert_l" => c.l = parse(v)?,
            "cert_alpha" => c.alpha = parse(v)?,
            "error_bound" => c.error_bound = parse(v)?,
            "t_count" => c.t_count = parse(v)?,
            "t_lo" => c.t_lo = parse(v)?,
            "t_hi" => c.t_hi = parse(v)?,
            "cert_m" => c.m = parse(v)?,
            "c_v" => c.c_v = parse(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let w = &t.weights;
        let c = &self.cert;
        let p = |p: &Path| p.display().to_string();
        vec![
            ("seed", self.seed.to_string()),
            ("out_dir", p(&self.out_dir)),
            ("dataset", self.dataset.to_string()),
            ("dim", self.dim.to_string()),
            ("classes", self.classes.to_string()),
            ("separation", self.separation.to_string()),
            ("sigma", self.sigma.to_string()),
            ("train_per_class", self.train_per_class.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("idx_train_images", p(&self.idx_train_images)),
            ("idx_train_labels", p(&self.idx_train_labels)),
            ("idx_test_images", p(&self.idx_test_images)),
            ("idx_test_labels", p(&self.idx_test_labels)),
            ("hidden", join(&self.hidden)),
            ("mask_modes", self.mask_modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(",")),
            ("methods", join(&self.methods)),
            ("transform", self.transform.to_string()),
            ("haze_a", self.haze_a.to_string()),
            ("blur_severity", self.blur_severity.to_string()),
            ("image_width", self.image_width.to_string()),
            ("delta_lo", self.delta_lo.to_string()),
            ("delta_hi", self.delta_hi.to_string()),
            ("augment_delta", self.augment_delta.to_string()),
            ("augment_count", self.augment_count.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("momentum", t.momentum.to_string()),
            ("pretrain_epochs", t.pretrain_epochs.to_string()),
            ("pretrain_lr", t.pretrain_lr.to_string()),
            ("search_epochs", t.search_epochs.to_string()),
            ("search_lr", t.search_lr.to_string()),
            ("finetune_epochs", t.finetune_epochs.to_string()),
            ("finetune_lr", t.finetune_lr.to_string()),
            ("pruning_ratio", t.pruning_ratio.to_string()),
            ("tau", t.tau.to_string()),
            ("mu", t.mu.to_string()),
            ("lambda_stab", w.stab.to_string()),
            ("lambda_ratio", w.ratio.to_string()),
            ("lambda_consis", w.consis.to_string()),
            ("lambda_l1", w.l1.to_string()),
            ("eta", w.eta.to_string()),
            ("eps_margin", w.eps_margin.to_string()),
            ("cert_n", c.n.to_string()),
            ("cert_l", c.l.to_string()),
            ("cert_alpha", c.alpha.to_string()),
            ("error_bound", c.error_bound.to_string()),
            ("t_count", c.t_count.to_string()),
            ("t_lo", c.t_lo.to_string()),
            ("t_hi", c.t_hi.to_string()),
            ("cert_m", c.m.to_string()),
            ("c_v", c.c_v.to_string()),
        ]
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses and validates config text. Paths are kept as written.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut lines: HashMap<&str, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::Config {
                    key: body.to_string(),
                    line,
                    message: "expected `key = value`".into(),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if lines.insert(k, line).is_some() {
                return Err(Error::Config { key: k.into(), line, message: "duplicate key".into() });
            }
            cfg.set(k, v).map_err(|message| Error::Config { key: k.into(), line, message })?;
        }
        if let Err((key, message)) = cfg.check() {
            let line = lines.get(key).copied().unwrap_or(0);
            return Err(Error::Config { key: key.into(), line, message });
        }
        Ok(cfg)
    }

    /// Reads a config file. Relative IDX paths resolve against the file's
    /// directory, and must exist when the IDX dataset is selected.
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::parse_str(&text)?;
        if cfg.dataset == DataSource::Idx {
            let base = path.parent().unwrap_or(Path::new("."));
            for (key, p) in [
                ("idx_train_images", &mut cfg.idx_train_images),
                ("idx_train_labels", &mut cfg.idx_train_labels),
                ("idx_test_images", &mut cfg.idx_test_images),
                ("idx_test_labels", &mut cfg.idx_test_labels),
            ] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.exists() {
                    let line = text
                        .lines()
                        .position(|l| l.split('=').next().map(str::trim) == Some(key))
                        .map_or(0, |i| i + 1);
                    return Err(Error::Config {
                        key: key.into(),
                        line,
                        message: format!("file {} does not exist", p.display()),
                    });
                }
            }
        }
        Ok(cfg)
    }

    /// Range checks; the error names the offending key.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        fn req(ok: bool, key: &'static str, msg: &str) -> std::result::Result<(), (&'static str, String)> {
            if ok {
                Ok(())
            } else {
                Err((key, msg.to_string()))
            }
        }
        let t = &self.train;
        let w = &t.weights;
        let c = &self.cert;
        req(self.dim >= 1, "dim", "must be at least 1")?;
        req(self.classes >= 2, "classes", "must be at least 2")?;
        req(self.separation > 0.0 && self.separation.is_finite(), "separation", "must be positive")?;
        req(self.sigma > 0.0 && self.sigma.is_finite(), "sigma", "must be positive")?;
        req(self.train_per_class >= 1, "train_per_class", "must be at least 1")?;
        req(self.test_per_class >= 1, "test_per_class", "must be at least 1")?;
        if self.dataset == DataSource::Synthetic {
            req(self.dim > self.classes, "dim", "synthetic data needs dim > classes")?;
            req(self.transform == TransformChoice::Direction, "transform", "synthetic data uses direction")?;
        } else {
            req(self.transform != TransformChoice::Direction, "transform", "idx data uses haze or blur")?;
        }
        req(self.hidden.iter().all(|&h| h >= 1), "hidden", "widths must be at least 1")?;
        req(!self.mask_modes.is_empty(), "mask_modes", "must not be empty")?;
        req(!self.methods.is_empty(), "methods", "must not be empty")?;
        req(self.haze_a > 0.0 && self.haze_a <= 1.0, "haze_a", "must lie in (0, 1]")?;
        req(self.blur_severity > 0.0, "blur_severity", "must be positive")?;
        req(self.image_width >= 1, "image_width", "must be at least 1")?;
        req((0.0..=1.0).contains(&self.delta_lo), "delta_lo", "must lie in [0, 1]")?;
        req((self.delta_lo..=1.0).contains(&self.delta_hi), "delta_hi", "must lie in [delta_lo, 1]")?;
        req((0.0..=1.0).contains(&self.augment_delta), "augment_delta", "must lie in [0, 1]")?;
        req(t.batch_size >= 1, "batch_size", "must be at least 1")?;
        req((0.0..1.0).contains(&t.momentum), "momentum", "must lie in [0, 1)")?;
        req(t.pretrain_epochs >= 1, "pretrain_epochs", "must be at least 1")?;
        req(t.search_epochs >= 1, "search_epochs", "must be at least 1")?;
        req(t.finetune_epochs >= 1, "finetune_epochs", "must be at least 1")?;
        req(t.pretrain_lr > 0.0, "pretrain_lr", "must be positive")?;
        req(t.search_lr > 0.0, "search_lr", "must be positive")?;
        req(t.finetune_lr > 0.0, "finetune_lr", "must be positive")?;
        req((0.0..1.0).contains(&t.pruning_ratio), "pruning_ratio", "must lie in [0, 1)")?;
        req(t.tau > 0.0 && t.tau < 100.0, "tau", "must lie in (0, 100)")?;
        req((0.0..=1.0).contains(&t.mu), "mu", "must lie in [0, 1]")?;
        req(w.stab >= 0.0, "lambda_stab", "must be non-negative")?;
        req(w.ratio >= 0.0, "lambda_ratio", "must be non-negative")?;
        req(w.consis >= 0.0, "lambda_consis", "must be non-negative")?;
        req(w.l1 >= 0.0, "lambda_l1", "must be non-negative")?;
        req(w.eta > 0.0 && w.eta <= 1.0, "eta", "must lie in (0, 1]")?;
        req(w.eps_margin > 0.0, "eps_margin", "must be positive")?;
        req(c.n >= 1, "cert_n", "must be at least 1")?;
        req(c.l >= 1, "cert_l", "must be at least 1")?;
        req(c.alpha > 0.0 && c.alpha < 1.0, "cert_alpha", "must lie in (0, 1)")?;
        req(c.error_bound > 0.0 && c.error_bound < 1.0, "error_bound", "must lie in (0, 1)")?;
        req(c.t_count >= 2, "t_count", "must be at least 2")?;
        req(c.t_lo > 0.0, "t_lo", "must be positive")?;
        req(c.t_hi > c.t_lo && c.t_hi.is_finite(), "t_hi", "must exceed t_lo")?;
        req(c.m >= 1, "cert_m", "must be at least 1")?;
        req(c.c_v > 0.0, "c_v", "must be positive")?;
        Ok(())
    }

    /// Certification settings, seeded from the root seed.
    pub fn cert_config(&self) -> CertConfig {
        CertConfig { seed: self.seed, ..self.cert.clone() }
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        SyntheticSpec::standard(
            self.dim,
            self.classes,
            self.separation,
            self.sigma,
            self.train_per_class,
            self.test_per_class,
            self.seed,
        )
    }

    /// The transformation space for inputs of width `dim`. Direction shifts
    /// move along the last coordinate, the synthetic nuisance direction.
    pub fn transform_spec(&self, dim: usize) -> Result<TransformSpec> {
        let spec = match self.transform {
            TransformChoice::Direction => {
                let mut v = vec![0.0; dim];
                v[dim - 1] = 1.0;
                TransformSpec::direction_shift(v)?
            }
            TransformChoice::Haze => TransformSpec::interp_corrupt(Corruption::Haze { a: self.haze_a })?,
            TransformChoice::Blur => TransformSpec::interp_corrupt(Corruption::GaussianBlur3 {
                severity: self.blur_severity,
                width: self.image_width,
            })?,
        };
        spec.with_delta_range(self.delta_lo, self.delta_hi)
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.train.weights
    }
}

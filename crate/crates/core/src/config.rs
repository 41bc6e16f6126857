//! Flat `key = value` run configuration covering every stage of the
//! pipeline, with cross-field checks applied at load time.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dino::{Ablation, DinoConfig};
use crate::error::{Error, Result};
use crate::knn::KnnConfig;
use crate::projector::ProjectorConfig;
use crate::signal::SegmentSpec;
use crate::tfm::TfmConfig;
use crate::vit::ViTConfig;

/// Dataset generation and split parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub n_classes: usize,
    pub sample_rate: f64,
    pub noise_std: f64,
    /// Fraction of each class held out for testing, carved first.
    pub test_fraction: f64,
    /// Fraction of the remainder that keeps its label.
    pub labeled_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            n_classes: 4,
            sample_rate: 12_000.0,
            noise_std: 0.5,
            test_fraction: 0.2,
            labeled_fraction: 0.01,
        }
    }
}

impl SynthConfig {
    /// Held-out rows per class.
    pub fn test_per_class(&self) -> usize {
        (self.test_fraction * self.n_per_class as f64).round() as usize
    }

    /// Labeled rows per class: at least one.
    pub fn labeled_per_class(&self) -> usize {
        let rest = self.n_per_class - self.test_per_class().min(self.n_per_class);
        ((self.labeled_fraction * rest as f64).round() as usize).clamp(1, rest.max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub segment: SegmentSpec,
    pub tfm: TfmConfig,
    pub vit: ViTConfig,
    pub projector: ProjectorConfig,
    pub dino: DinoConfig,
    pub knn: KnnConfig,
    /// `N_k` values for the evaluation sweep; empty disables it.
    pub knn_sweep: Vec<usize>,
    pub data_dir: Option<PathBuf>,
    pub tfm_dir: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// 32×32 maps, the small ViT and the short CPU schedule.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            segment: SegmentSpec::new(1024, 1024).expect("valid"),
            tfm: TfmConfig::default(),
            vit: ViTConfig::desk(),
            projector: ProjectorConfig::desk(),
            dino: DinoConfig::desk(),
            knn: KnnConfig::default(),
            knn_sweep: vec![1, 3, 5, 7],
            data_dir: None,
            tfm_dir: None,
            run_dir: None,
        }
    }

    /// 224×224 maps with the full-size ViT, projector and schedule.
    pub fn full() -> Self {
        let mut cfg = Self {
            tfm: TfmConfig {
                target_size: 224,
                ..TfmConfig::default()
            },
            vit: ViTConfig::full(),
            projector: ProjectorConfig::full(),
            dino: DinoConfig::default(),
            ..Self::desk()
        };
        cfg.knn_sweep = vec![10, 20, 30, 40, 50];
        cfg
    }

    /// Parses a config file on top of [`RunConfig::desk`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::desk();
        cfg.apply_text(&text, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        cfg.apply_text(text, "<config>")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source_name: &str) -> Result<()> {
        let mut seen: Vec<&str> = Vec::new();
        let mut offset = 0;
        for (i, raw) in text.lines().enumerate() {
            let line_offset = offset;
            offset += raw.len() + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                offset: line_offset,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(parse_err(format!("duplicate key {key:?}")));
            }
            seen.push(key);
            self.set(key, value).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.dino;
        match key {
            "seed" => self.seed = num(key, value)?,
            "n_per_class" => self.synth.n_per_class = num(key, value)?,
            "n_classes" => self.synth.n_classes = num(key, value)?,
            "sample_rate" => self.synth.sample_rate = num(key, value)?,
            "noise_std" => self.synth.noise_std = num(key, value)?,
            "test_fraction" => self.synth.test_fraction = num(key, value)?,
            "labeled_fraction" => self.synth.labeled_fraction = num(key, value)?,
            "window_length" => self.segment = SegmentSpec::new(num(key, value)?, self.segment.stride())?,
            "stride" => self.segment = SegmentSpec::new(self.segment.window_length(), num(key, value)?)?,
            "target_size" => self.tfm.target_size = num(key, value)?,
            "n_scales" => self.tfm.n_scales = num(key, value)?,
            "min_freq" => self.tfm.min_freq = opt_num(key, value)?,
            "max_freq" => self.tfm.max_freq = opt_num(key, value)?,
            "patch_size" => self.vit.patch_size = num(key, value)?,
            "embed_dim" => self.vit.embed_dim = num(key, value)?,
            "n_heads" => self.vit.n_heads = num(key, value)?,
            "head_dim" => self.vit.head_dim = num(key, value)?,
            "mlp_dim" => self.vit.mlp_dim = num(key, value)?,
            "depth" => self.vit.depth = num(key, value)?,
            "projector_dims" => self.projector.dims = list(key, value)?,
            "out_dim" => self.projector.out_dim = num(key, value)?,
            "tau_t" => d.tau_t = num(key, value)?,
            "tau_s" => d.tau_s = num(key, value)?,
            "m0" => d.m0 = num(key, value)?,
            "m_c" => d.m_c = num(key, value)?,
            "scale_split" => d.scale_split = num(key, value)?,
            "n_local" => d.n_local = num(key, value)?,
            "batch_size" => d.batch_size = num(key, value)?,
            "epochs" => d.epochs = num(key, value)?,
            "warmup_epochs" => d.warmup_epochs = num(key, value)?,
            "lr_start" => d.lr_start = num(key, value)?,
            "lr_peak" => d.lr_peak = num(key, value)?,
            "lr_floor" => d.lr_floor = num(key, value)?,
            "weight_decay" => d.weight_decay = num(key, value)?,
            "ablation" => d.ablation = value.parse::<Ablation>()?,
            "identical_init" => d.identical_init = num(key, value)?,
            "max_grad_norm" => d.max_grad_norm = opt_num(key, value)?,
            "n_neighbors" => self.knn.n_neighbors = num(key, value)?,
            "knn_temperature" => self.knn.temperature = opt_num(key, value)?,
            "knn_sweep" => self.knn_sweep = list(key, value)?,
            "data_dir" => self.data_dir = opt_path(value),
            "tfm_dir" => self.tfm_dir = opt_path(value),
            "run_dir" => self.run_dir = opt_path(value),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        self.vit.image_size = self.tfm.target_size;
        Ok(())
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<()> {
        self.tfm.validate()?;
        self.vit.validate()?;
        self.projector.validate()?;
        self.dino.validate()?;
        let s = &self.synth;
        if s.n_per_class == 0 || s.n_classes == 0 || s.n_classes > 10 {
            return Err(Error::Config(format!(
                "need n_per_class ≥ 1 and 1 ≤ n_classes ≤ 10, got {} and {}",
                s.n_per_class, s.n_classes
            )));
        }
        if !(s.sample_rate > 0.0) || !(s.noise_std >= 0.0) {
            return Err(Error::Config("sample_rate must be > 0 and noise_std ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&s.test_fraction) || !(s.labeled_fraction > 0.0 && s.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must be in [0, 1) and labeled_fraction in (0, 1], got {} and {}",
                s.test_fraction, s.labeled_fraction
            )));
        }
        let labeled = s.labeled_per_class() * s.n_classes;
        self.knn.validate(labeled)?;
        if let Some(&k) = self.knn_sweep.iter().find(|&&k| k == 0 || k > labeled) {
            return Err(Error::Config(format!(
                "knn_sweep value {k} must be in 1..={labeled} (labeled count)"
            )));
        }
        Ok(())
    }

    /// Emits every key in a fixed order; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let d = &self.dino;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("n_per_class", self.synth.n_per_class.to_string());
        kv("n_classes", self.synth.n_classes.to_string());
        kv("sample_rate", fmt_f(self.synth.sample_rate));
        kv("noise_std", fmt_f(self.synth.noise_std));
        kv("test_fraction", fmt_f(self.synth.test_fraction));
        kv("labeled_fraction", fmt_f(self.synth.labeled_fraction));
        kv("window_length", self.segment.window_length().to_string());
        kv("stride", self.segment.stride().to_string());
        kv("target_size", self.tfm.target_size.to_string());
        kv("n_scales", self.tfm.n_scales.to_string());
        kv("min_freq", fmt_opt(self.tfm.min_freq));
        kv("max_freq", fmt_opt(self.tfm.max_freq));
        kv("patch_size", self.vit.patch_size.to_string());
        kv("embed_dim", self.vit.embed_dim.to_string());
        kv("n_heads", self.vit.n_heads.to_string());
        kv("head_dim", self.vit.head_dim.to_string());
        kv("mlp_dim", self.vit.mlp_dim.to_string());
        kv("depth", self.vit.depth.to_string());
        kv("projector_dims", fmt_list(&self.projector.dims));
        kv("out_dim", self.projector.out_dim.to_string());
        kv("tau_t", fmt_f(d.tau_t));
        kv("tau_s", fmt_f(d.tau_s));
        kv("m0", fmt_f(d.m0));
        kv("m_c", fmt_f(d.m_c));
        kv("scale_split", fmt_f(d.scale_split));
        kv("n_local", d.n_local.to_string());
        kv("batch_size", d.batch_size.to_string());
        kv("epochs", d.epochs.to_string());
        kv("warmup_epochs", d.warmup_epochs.to_string());
        kv("lr_start", fmt_f(d.lr_start));
        kv("lr_peak", fmt_f(d.lr_peak));
        kv("lr_floor", fmt_f(d.lr_floor));
        kv("weight_decay", fmt_f(d.weight_decay));
        kv("ablation", d.ablation.to_string());
        kv("identical_init", d.identical_init.to_string());
        kv("max_grad_norm", fmt_opt(d.max_grad_norm));
        kv("n_neighbors", self.knn.n_neighbors.to_string());
        kv("knn_temperature", fmt_opt(self.knn.temperature));
        kv("knn_sweep", fmt_list(&self.knn_sweep));
        kv("data_dir", fmt_path(&self.data_dir));
        kv("tfm_dir", fmt_path(&self.tfm_dir));
        kv("run_dir", fmt_path(&self.run_dir));
        out
    }

    pub fn model(&self) -> crate::model::ModelConfig {
        crate::model::ModelConfig {
            vit: self.vit.clone(),
            projector: self.projector.clone(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn opt_num(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (value != "none" && !value.is_empty()).then(|| PathBuf::from(value))
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), fmt_f)
}

fn fmt_list(v: &[usize]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn fmt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

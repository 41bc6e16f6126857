//! Label-free self-distillation (DINO).
//!
//! A student network sees every crop of a sample; an EMA teacher sees only
//! the two global crops. The student is trained to match the teacher's
//! centred, sharpened output distribution on all cross-view pairs.

pub mod augment;
pub mod loss;
pub mod schedule;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelNetwork;
use crate::rng::{self, Stream};
use crate::tensor::{write_checkpoint, AdamConfig, AdamState, CheckpointEntry, Graph, ParamStore, Tensor};
use crate::tfm::TimeFrequencyMap;
use crate::vit::patchify;

pub use augment::{augment, AugmentConfig, CropBox, CropSet};
pub use loss::{
    collapse_classify, cross_entropy, diagnostics, dino_loss, ema_update_teacher, entropy, kl_divergence,
    tempered_softmax, Center, Collapse, CollapseThresholds, Diagnostics,
};
pub use schedule::{learning_rate, teacher_momentum};

/// Which collapse-prevention mechanisms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Both,
    OnlyCentering,
    OnlySharpening,
    Neither,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Both,
        Ablation::OnlyCentering,
        Ablation::OnlySharpening,
        Ablation::Neither,
    ];

    pub fn centering(self) -> bool {
        matches!(self, Ablation::Both | Ablation::OnlyCentering)
    }

    pub fn sharpening(self) -> bool {
        matches!(self, Ablation::Both | Ablation::OnlySharpening)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Both => "both",
            Ablation::OnlyCentering => "only_centering",
            Ablation::OnlySharpening => "only_sharpening",
            Ablation::Neither => "neither",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DinoConfig {
    pub tau_t: f64,
    pub tau_s: f64,
    pub m0: f64,
    pub m_c: f64,
    pub scale_split: f64,
    pub n_local: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub ablation: Ablation,
    pub identical_init: bool,
    pub max_grad_norm: Option<f64>,
}

impl Default for DinoConfig {
    fn default() -> Self {
        Self {
            tau_t: 0.04,
            tau_s: 0.1,
            m0: 0.996,
            m_c: 0.9,
            scale_split: 0.4,
            n_local: 8,
            batch_size: 64,
            epochs: 100,
            warmup_epochs: 10,
            lr_start: 1e-6,
            lr_peak: 1.25e-4,
            lr_floor: 1e-6,
            weight_decay: 0.04,
            ablation: Ablation::Both,
            identical_init: false,
            max_grad_norm: None,
        }
    }
}

impl DinoConfig {
    /// Short CPU schedule: 30 epochs of batch 16, a faster teacher EMA and
    /// a teacher that starts as a copy of the student.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            epochs: 30,
            warmup_epochs: 3,
            lr_peak: 3e-4,
            m0: 0.99,
            identical_init: true,
            max_grad_norm: Some(3.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.tau_t > 0.0 && self.tau_s > 0.0) {
            return fail("temperatures must be > 0".into());
        }
        if self.ablation.sharpening() && self.tau_t >= self.tau_s {
            return fail(format!(
                "tau_t = {} must be lower than tau_s = {} unless an ablation disables sharpening",
                self.tau_t, self.tau_s
            ));
        }
        if !(0.0..=1.0).contains(&self.m0) || !(0.0..=1.0).contains(&self.m_c) {
            return fail("m0 and m_c must lie in [0, 1]".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be ≥ 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return fail("warmup_epochs exceeds epochs".into());
        }
        if !(self.lr_start >= 0.0 && self.lr_peak > 0.0 && self.lr_floor >= 0.0) {
            return fail("learning rates must be non-negative".into());
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return fail("max_grad_norm must be > 0".into());
            }
        }
        self.augment().validate()
    }

    /// Teacher temperature after the ablation is applied.
    pub fn teacher_temperature(&self) -> f64 {
        if self.ablation.sharpening() {
            self.tau_t
        } else {
            self.tau_s
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            scale_split: self.scale_split,
            n_local: self.n_local,
            ..AugmentConfig::default()
        }
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        learning_rate(epoch, self.epochs, self.warmup_epochs, self.lr_start, self.lr_peak, self.lr_floor)
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub kl: f64,
    pub entropy: f64,
    pub lr: f64,
    pub m: f64,
    pub center_norm: f64,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ParamStore<f32>,
    pub teacher: ParamStore<f32>,
    pub center: Center,
    pub adam: AdamState<f32>,
    pub epoch: usize,
    pub step: usize,
}

impl TrainState {
    /// Student from init sub-stream 0; teacher from sub-stream 1 unless
    /// `identical_init`.
    pub fn new(network: &ModelNetwork, config: &DinoConfig, seed: u64) -> Result<Self> {
        let student: ParamStore<f32> = network.fresh_params(seed, 0)?;
        let teacher = if config.identical_init {
            student.clone()
        } else {
            network.fresh_params(seed, 1)?
        };
        Ok(Self {
            adam: AdamState::new(&student),
            student,
            teacher,
            center: Center::zeros(network.out_dim(), config.m_c),
            epoch: 0,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Vec<CheckpointEntry> {
        let mut entries = self.student.to_entries("student.");
        entries.extend(self.teacher.to_entries("teacher."));
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            let name = self.student.iter().nth(i).map(|(n, _)| n).unwrap_or_default();
            entries.push(CheckpointEntry {
                name: format!("adam.m.{name}"),
                tensor: m.clone(),
            });
            entries.push(CheckpointEntry {
                name: format!("adam.v.{name}"),
                tensor: v.clone(),
            });
        }
        let center: Vec<f32> = self.center.values.iter().map(|&v| v as f32).collect();
        let k = center.len();
        entries.push(CheckpointEntry {
            name: "state.center".into(),
            tensor: Tensor::new(&[k], center).expect("length k"),
        });
        let counters = [self.epoch as f32, self.step as f32, self.adam.step as f32];
        entries.push(CheckpointEntry {
            name: "state.counters".into(),
            tensor: Tensor::new(&[3], counters.to_vec()).expect("three counters"),
        });
        entries
    }

    pub fn from_checkpoint(network: &ModelNetwork, config: &DinoConfig, entries: &[CheckpointEntry]) -> Result<Self> {
        let mut state = Self::new(network, config, 0)?;
        state.student.load_entries("student.", entries)?;
        state.teacher.load_entries("teacher.", entries)?;
        let names: Vec<String> = state.student.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut state.adam.m[i]), ("adam.v.", &mut state.adam.v[i])] {
                let key = format!("{prefix}{name}");
                let e = find_entry(entries, &key)?;
                if e.tensor.shape() != slot.shape() {
                    return Err(Error::shape("load_checkpoint", slot.shape(), e.tensor.shape()));
                }
                *slot = e.tensor.clone();
            }
        }
        let center = find_entry(entries, "state.center")?;
        if center.tensor.numel() != network.out_dim() {
            return Err(Error::shape("load_checkpoint", &[network.out_dim()], center.tensor.shape()));
        }
        state.center.values = center.tensor.data().iter().map(|&v| v as f64).collect();
        let counters = find_entry(entries, "state.counters")?.tensor.data().to_vec();
        if counters.len() != 3 {
            return Err(Error::Contract("state.counters must hold 3 values".into()));
        }
        state.epoch = counters[0] as usize;
        state.step = counters[1] as usize;
        state.adam.step = counters[2] as u64;
        Ok(state)
    }
}

fn find_entry<'a>(entries: &'a [CheckpointEntry], name: &str) -> Result<&'a CheckpointEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Contract(format!("checkpoint has no entry {name}")))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub seed: u64,
    pub threads: usize,
    /// Where to write a snapshot when the loss stops being finite.
    pub snapshot_dir: Option<PathBuf>,
}

/// Runs the remaining epochs, calling `on_epoch` after each.
pub fn train(
    network: &ModelNetwork,
    state: &mut TrainState,
    data: &[TimeFrequencyMap],
    config: &DinoConfig,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&TrainState, &EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let mut log = Vec::new();
    while state.epoch < config.epochs {
        let metrics = train_epoch(network, state, data, config, options)?;
        on_epoch(state, &metrics)?;
        log.push(metrics);
    }
    Ok(log)
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

fn augment_batch(
    data: &[TimeFrequencyMap],
    indices: &[usize],
    cfg: &AugmentConfig,
    seed: u64,
    epoch: usize,
    threads: usize,
) -> Result<Vec<CropSet>> {
    let one = |i: usize| {
        let mut r = rng::stream(seed, Stream::Augment, ((epoch as u64) << 32) | i as u64);
        augment(&data[i], cfg, &mut r)
    };
    let threads = threads.max(1).min(indices.len().max(1));
    if threads == 1 {
        return indices.iter().map(|&i| one(i)).collect();
    }
    let chunk = indices.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|&i| one(i)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(indices.len());
        for h in handles {
            out.extend(h.join().expect("augment worker panicked")?);
        }
        Ok(out)
    })
}

fn softmax_row(q: &[f32], shift: &[f64], tau: f64) -> Vec<f64> {
    let z: Vec<f64> = q.iter().zip(shift).map(|(&a, &c)| (a as f64 - c) / tau).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// One pass over `data` in a seed- and epoch-determined order.
pub fn train_epoch(
    network: &ModelNetwork,
    state: &mut TrainState,
    data: &[TimeFrequencyMap],
    config: &DinoConfig,
    options: &TrainOptions,
) -> Result<EpochMetrics> {
    let epoch = state.epoch;
    let vit = &network.config().vit;
    let k = network.out_dim();
    let n_views = 2 + config.n_local;
    let pairs = 2 * (n_views - 1);
    let tau_t = config.teacher_temperature();
    let lr = config.learning_rate(epoch);
    let total_steps = config.epochs * steps_per_epoch(data.len(), config.batch_size);
    let adam_cfg = AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    state.center.momentum = config.m_c;

    let mut order: Vec<usize> = (0..data.len()).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng::stream(options.seed, Stream::Shuffle, epoch as u64));
    }

    let (mut sum_loss, mut sum_kl, mut sum_h) = (0.0, 0.0, 0.0);
    let mut m = teacher_momentum(state.step, total_steps, config.m0);
    for batch in order.chunks(config.batch_size) {
        let b = batch.len();
        let crops = augment_batch(data, batch, &config.augment(), options.seed, epoch, options.threads)?;
        let view = |v: usize| crops.iter().map(move |c| if v < 2 { &c.globals[v] } else { &c.locals[v - 2] });
        let globals: Vec<&TimeFrequencyMap> = (0..2).flat_map(view).collect();
        let all: Vec<&TimeFrequencyMap> = (0..n_views).flat_map(view).collect();

        // teacher: globals only, no gradient
        let teacher_logits = {
            let g = Graph::<f32>::new();
            let p = state.teacher.bind(&g, false);
            let (_, q) = network.forward(&p, g.constant(patchify(&globals, vit)?))?;
            q.value().as_ref().clone()
        };
        let zero = vec![0.0; k];
        let shift = if config.ablation.centering() { &state.center.values } else { &zero };
        let p_t: Vec<Vec<f64>> = (0..2 * b)
            .map(|r| softmax_row(teacher_logits.row(r), shift, tau_t))
            .collect();

        let g = Graph::<f32>::new();
        let p = state.student.bind(&g, true);
        let (_, q_s) = network.forward(&p, g.constant(patchify(&all, vit)?))?;
        let log_p = q_s.scale((1.0 / config.tau_s) as f32)?.log_softmax(1)?;
        let norm = 1.0 / (b * pairs) as f64;
        let weights = Tensor::from_fn(&[n_views * b, k], |i| {
            let (row, col) = (i / k, i % k);
            let (v, s) = (row / b, row % b);
            let w: f64 = (0..2).filter(|&t| t != v).map(|t| p_t[t * b + s][col]).sum();
            (w * norm) as f32
        });
        let loss = log_p.mul(g.constant(weights))?.reduce_sum(None)?.neg()?;

        let loss_value = loss.value().item()? as f64;
        if !loss_value.is_finite() {
            let note = snapshot(state, options.snapshot_dir.as_deref())?;
            return Err(Error::NonFinite(format!(
                "loss at epoch {epoch}, step {}{note}",
                state.step
            )));
        }

        // diagnostics from the same probabilities
        let lp = log_p.value();
        let (mut kl, mut h) = (0.0, 0.0);
        for s in 0..b {
            for t in 0..2 {
                let pt = &p_t[t * b + s];
                h += entropy(pt);
                for v in (0..n_views).filter(|&v| v != t) {
                    let ls = lp.row(v * b + s);
                    kl += pt
                        .iter()
                        .zip(ls)
                        .filter(|(&a, _)| a > 0.0)
                        .map(|(&a, &l)| a * (a.ln() - l as f64))
                        .sum::<f64>();
                }
            }
        }
        sum_loss += loss_value * b as f64;
        sum_kl += kl / pairs as f64;
        sum_h += h / 2.0;

        let mut grads = g.backward(loss)?;
        let mut grads = p.gradients(&mut grads);
        drop(p);
        if let Some(max_norm) = config.max_grad_norm {
            clip_gradients(&mut grads, max_norm);
        }
        state.adam.step(&mut state.student, &grads, lr, &adam_cfg)?;

        m = teacher_momentum(state.step, total_steps, config.m0);
        ema_update_teacher(&mut state.teacher, &state.student, m)?;
        if config.ablation.centering() {
            let rows: Vec<Vec<f64>> = (0..2 * b)
                .map(|r| teacher_logits.row(r).iter().map(|&v| v as f64).collect())
                .collect();
            state.center.update(&rows);
            // keep the center representable in the f32 checkpoint
            state.center.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        state.step += 1;
    }
    state.epoch += 1;
    let n = data.len() as f64;
    Ok(EpochMetrics {
        epoch,
        step: state.step,
        loss: sum_loss / n,
        kl: sum_kl / n,
        entropy: sum_h / n,
        lr,
        m,
        center_norm: state.center.norm(),
    })
}

fn clip_gradients(grads: &mut [Option<Tensor<f32>>], max_norm: f64) {
    let total: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)))
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let scale = (max_norm / total) as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
}

fn snapshot(state: &TrainState, dir: Option<&Path>) -> Result<String> {
    let Some(dir) = dir else {
        return Ok(String::new());
    };
    let path = dir.join(format!("nan_snapshot_epoch{}_step{}.ckpt", state.epoch, state.step));
    write_checkpoint(&path, &state.to_checkpoint())?;
    Ok(format!("; snapshot written to {}", path.display()))
}

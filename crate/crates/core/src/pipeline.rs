//! End-to-end stages operating on files: dataset synthesis, preprocessing,
//! training with checkpoints, KNN evaluation, collapse diagnosis and
//! attention export. The command-line front end is a thin layer over these.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dino::{self, collapse_classify, Ablation, Collapse, CollapseThresholds, EpochMetrics, TrainOptions, TrainState};
use crate::error::{Error, Result};
use crate::knn::{self, EvalReport, FeatureBank, KnnConfig};
use crate::model::ModelNetwork;
use crate::rng::{self, Stream};
use crate::signal::{self, FaultClass};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore};
use crate::tfm::{Preprocessor, TimeFrequencyMap};
use crate::vit::AttentionMaps;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const FEATURE_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub class: String,
    pub split: Split,
}

/// CSV listing of samples with header `path,class,split`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "class", "split"] {
            return Err(Error::Parse {
                source_name: path.display().to_string(),
                line: 1,
                offset: 0,
                message: format!("expected header `path,class,split`, got {:?}", headers.as_slice()),
            });
        }
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()
            .map_err(|e| csv_error(path, e))?;
        Ok(Self {
            dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            rows,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            writer.serialize(row).map_err(|e| csv_error(path, e))?;
        }
        if self.rows.is_empty() {
            writer.write_record(["path", "class", "split"]).map_err(|e| csv_error(path, e))?;
        }
        let bytes = writer.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    /// Class names in order of first appearance; a row's label is its index here.
    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for row in &self.rows {
            if !names.contains(&row.class) {
                names.push(row.class.clone());
            }
        }
        names
    }

    pub fn labels(&self) -> Vec<u16> {
        let names = self.class_names();
        self.rows
            .iter()
            .map(|r| names.iter().position(|n| *n == r.class).expect("collected above") as u16)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.rows.iter().filter(|r| r.split == split).count()
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.position() {
        Some(pos) => Error::Parse {
            source_name: path.display().to_string(),
            line: pos.line() as usize,
            offset: pos.byte() as usize,
            message: e.to_string(),
        },
        None => Error::format(path, e.to_string()),
    }
}

/// One failed manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemError {
    pub path: PathBuf,
    pub message: String,
}

impl fmt::Display for ItemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.message)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthReport {
    pub manifest: PathBuf,
    pub n_files: usize,
    pub warnings: Vec<String>,
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `n_classes × n_per_class` binary signal files and a manifest.
///
/// Per class, a seeded permutation assigns the test rows first, then the
/// labeled rows, and the rest are unlabeled.
pub fn synth(cfg: &RunConfig, out_dir: &Path, force: bool) -> Result<SynthReport> {
    cfg.validate()?;
    prepare_out_dir(out_dir, force)?;
    let s = &cfg.synth;
    let classes = FaultClass::first(s.n_classes)?;
    let mut warnings = Vec::new();
    if classes.len() == 1 {
        warnings.push("single-class dataset: evaluation is degenerate".to_string());
    }
    let sig_dir = out_dir.join("signals");
    fs::create_dir_all(&sig_dir).map_err(|e| Error::io(&sig_dir, e))?;
    let (n_test, n_labeled) = (s.test_per_class(), s.labeled_per_class());
    let mut rows = Vec::with_capacity(classes.len() * s.n_per_class);
    for class in classes {
        let c = class.id() as u64;
        let mut order: Vec<usize> = (0..s.n_per_class).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Stream::Shuffle, u64::MAX - c));
        let mut split = vec![Split::Unlabeled; s.n_per_class];
        for (rank, &i) in order.iter().enumerate() {
            if rank < n_test {
                split[i] = Split::Test;
            } else if rank < n_test + n_labeled {
                split[i] = Split::Labeled;
            }
        }
        for (i, &sp) in split.iter().enumerate() {
            let seed: u64 = rng::stream(cfg.seed, Stream::Data, (c << 32) | i as u64).random();
            let x = signal::synth_fault_signal(
                *class,
                cfg.segment.window_length(),
                s.sample_rate,
                s.noise_std,
                seed,
            )?;
            let rel = format!("signals/{}_{i:05}.sig", class.name());
            signal::write_signal_binary(&out_dir.join(&rel), &x)?;
            rows.push(ManifestRow {
                path: rel,
                class: class.name().to_string(),
                split: sp,
            });
        }
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    let n_files = rows.len();
    Manifest {
        dir: out_dir.to_path_buf(),
        rows,
    }
    .write(&manifest)?;
    Ok(SynthReport {
        manifest,
        n_files,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessReport {
    /// Manifest of the written maps, mirroring the input rows.
    pub manifest: PathBuf,
    pub written: usize,
    pub skipped: usize,
    pub errors: Vec<ItemError>,
}

fn preprocess_key(cfg: &RunConfig, input: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(input);
    h.update(
        format!(
            "{:?}|{}|{}|{:?}",
            cfg.tfm,
            cfg.segment.window_length(),
            cfg.segment.stride(),
            cfg.synth.sample_rate
        )
        .as_bytes(),
    );
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

enum RowOutcome {
    Written,
    Skipped,
}

fn preprocess_row(cfg: &RunConfig, pre: &mut Preprocessor, src: &Path, dst: &Path) -> Result<RowOutcome> {
    let bytes = fs::read(src).map_err(|e| Error::io(src, e))?;
    let key = preprocess_key(cfg, &bytes);
    let stamp = dst.with_extension("tfm.sha256");
    if dst.exists() && fs::read_to_string(&stamp).is_ok_and(|k| k.trim() == key) {
        return Ok(RowOutcome::Skipped);
    }
    let samples = signal::parse_signal_bytes(&bytes, &src.display().to_string())?;
    let x = signal::VibrationSignal::new(samples, cfg.synth.sample_rate, None)?;
    let window = signal::segment(&x, cfg.segment)?.swap_remove(0);
    let map = pre.run(&window, &src.display().to_string())?;
    map.write(dst)?;
    fs::write(&stamp, key).map_err(|e| Error::io(&stamp, e))?;
    Ok(RowOutcome::Written)
}

/// Converts the first window of every manifest row into a map file under
/// `out_dir`, skipping rows whose input and settings are unchanged.
pub fn preprocess(cfg: &RunConfig, manifest_path: &Path, out_dir: &Path, threads: usize) -> Result<PreprocessReport> {
    cfg.validate()?;
    let manifest = Manifest::read(manifest_path)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let jobs: Vec<(PathBuf, String)> = manifest
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let stem = Path::new(&row.path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("row{i}"));
            (manifest.resolve(row), format!("maps/{i:05}_{stem}.tfm"))
        })
        .collect();
    let map_dir = out_dir.join("maps");
    fs::create_dir_all(&map_dir).map_err(|e| Error::io(&map_dir, e))?;
    let run = |part: &[(PathBuf, String)]| -> Result<Vec<Result<RowOutcome>>> {
        let mut pre = Preprocessor::new(cfg.tfm.clone())?;
        Ok(part
            .iter()
            .map(|(src, rel)| preprocess_row(cfg, &mut pre, src, &out_dir.join(rel)))
            .collect())
    };
    let threads = threads.max(1).min(jobs.len().max(1));
    let outcomes: Vec<Result<RowOutcome>> = if threads == 1 {
        run(&jobs)?
    } else {
        let chunk = jobs.len().div_ceil(threads);
        std::thread::scope(|s| -> Result<Vec<_>> {
            let handles: Vec<_> = jobs.chunks(chunk).map(|part| s.spawn(move || run(part))).collect();
            let mut out = Vec::with_capacity(jobs.len());
            for h in handles {
                out.extend(h.join().expect("preprocess worker panicked")?);
            }
            Ok(out)
        })?
    };
    let (mut written, mut skipped, mut errors) = (0, 0, Vec::new());
    for ((src, _), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(RowOutcome::Written) => written += 1,
            Ok(RowOutcome::Skipped) => skipped += 1,
            Err(e) => errors.push(ItemError {
                path: src.clone(),
                message: e.to_string(),
            }),
        }
    }
    let rows = manifest
        .rows
        .iter()
        .zip(&jobs)
        .map(|(row, (_, rel))| ManifestRow {
            path: rel.clone(),
            class: row.class.clone(),
            split: row.split,
        })
        .collect();
    let out_manifest = out_dir.join(MANIFEST_FILE);
    Manifest {
        dir: out_dir.to_path_buf(),
        rows,
    }
    .write(&out_manifest)?;
    Ok(PreprocessReport {
        manifest: out_manifest,
        written,
        skipped,
        errors,
    })
}

/// Maps of a map manifest with their labels, optionally restricted to splits.
pub fn load_maps(manifest: &Manifest, splits: &[Split]) -> Result<(Vec<TimeFrequencyMap>, Vec<u16>)> {
    let labels = manifest.labels();
    let mut maps = Vec::new();
    let mut out_labels = Vec::new();
    for (row, &label) in manifest.rows.iter().zip(&labels) {
        if splits.contains(&row.split) {
            maps.push(TimeFrequencyMap::read(&manifest.resolve(row))?);
            out_labels.push(label);
        }
    }
    Ok((maps, out_labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub final_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub resumed_from_epoch: Option<usize>,
    pub metrics: Vec<EpochMetrics>,
}

pub fn epoch_checkpoint(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

fn latest_checkpoint(run_dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    let dir = run_dir.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best)
}

/// Trains on the unlabeled and labeled rows of a map manifest, ignoring
/// labels. An existing run directory is resumed from its latest epoch
/// checkpoint unless `force` starts over.
pub fn train(cfg: &RunConfig, manifest_path: &Path, run_dir: &Path, threads: usize, force: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let manifest = Manifest::read(manifest_path)?;
    let (data, _) = load_maps(&manifest, &[Split::Unlabeled, Split::Labeled])?;
    if force && run_dir.exists() {
        fs::remove_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    }
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let (network, _) = ModelNetwork::init::<f32>(&cfg.model(), cfg.seed)?;
    let metrics_log = run_dir.join(METRICS_FILE);
    let (mut state, resumed_from_epoch) = match latest_checkpoint(run_dir)? {
        Some((epoch, path)) => {
            let state = TrainState::from_checkpoint(&network, &cfg.dino, &read_checkpoint(&path)?)?;
            (state, Some(epoch))
        }
        None => (TrainState::new(&network, &cfg.dino, cfg.seed)?, None),
    };
    let kept: Vec<String> = match fs::read_to_string(&metrics_log) {
        Ok(text) if resumed_from_epoch.is_some() => text.lines().take(state.epoch).map(str::to_string).collect(),
        _ => Vec::new(),
    };
    let mut log_text = String::new();
    for line in &kept {
        log_text.push_str(line);
        log_text.push('\n');
    }
    fs::write(&metrics_log, &log_text).map_err(|e| Error::io(&metrics_log, e))?;
    let config_path = run_dir.join("config.txt");
    fs::write(&config_path, cfg.to_text()).map_err(|e| Error::io(&config_path, e))?;
    let options = TrainOptions {
        seed: cfg.seed,
        threads,
        snapshot_dir: Some(run_dir.to_path_buf()),
    };
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_log)
        .map_err(|e| Error::io(&metrics_log, e))?;
    let metrics = dino::train(&network, &mut state, &data, &cfg.dino, &options, |st, m| {
        let line = serde_json::to_string(m).map_err(|e| Error::format(&metrics_log, e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics_log, e))?;
        write_checkpoint(&epoch_checkpoint(run_dir, st.epoch), &st.to_checkpoint())
    })?;
    let final_checkpoint = run_dir.join(FINAL_CHECKPOINT);
    write_checkpoint(&final_checkpoint, &state.to_checkpoint())?;
    Ok(TrainReport {
        final_checkpoint,
        metrics_log,
        resumed_from_epoch,
        metrics,
    })
}

/// Network layout for `cfg` and the training state stored in `checkpoint`.
pub fn load_state(cfg: &RunConfig, checkpoint: &Path) -> Result<(ModelNetwork, TrainState)> {
    let (network, _) = ModelNetwork::init::<f32>(&cfg.model(), cfg.seed)?;
    let state = TrainState::from_checkpoint(&network, &cfg.dino, &read_checkpoint(checkpoint)?)?;
    Ok((network, state))
}

/// One row of an `N_k` sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_neighbors: usize,
    pub accuracy_with_tau: f64,
    pub accuracy_without_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub class_names: Vec<String>,
    pub report: EvalReport,
    /// Temperature used for the with-τ sweep column.
    pub sweep_temperature: f64,
    pub sweep: Vec<SweepRow>,
}

impl EvalOutcome {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// Accuracy, confusion matrix and the optional sweep table as text.
    pub fn render(&self) -> String {
        let mut out = format!(
            "accuracy {:.4} ({} test rows, bank {}, N_k {}, tau_k {})\n\nconfusion (% of actual row)\n",
            self.report.accuracy,
            self.report.n_test,
            self.report.n_bank,
            self.report.knn.n_neighbors,
            self.report.knn.temperature.map_or("none".into(), |t| t.to_string()),
        );
        let name = |id: u16| self.class_names.get(id as usize).cloned().unwrap_or_else(|| id.to_string());
        let width = self.class_names.iter().map(String::len).max().unwrap_or(4).max(7);
        out.push_str(&format!("{:>width$}", "actual"));
        for &p in &self.report.predicted_classes {
            out.push_str(&format!(" {:>width$}", name(p)));
        }
        out.push_str(&format!(" {:>width$}\n", "unknown"));
        for (row, &c) in self.report.confusion.iter().zip(&self.report.classes) {
            out.push_str(&format!("{:>width$}", name(c)));
            for v in row {
                out.push_str(&format!(" {v:>width$.1}"));
            }
            out.push('\n');
        }
        if !self.sweep.is_empty() {
            out.push_str(&format!("\n{:>5} {:>12} {:>12}\n", "N_k", "with tau_k", "without"));
            for r in &self.sweep {
                out.push_str(&format!(
                    "{:>5} {:>12.4} {:>12.4}\n",
                    r.n_neighbors, r.accuracy_with_tau, r.accuracy_without_tau
                ));
            }
        }
        out
    }
}

/// Default τ_k for the with-temperature sweep column.
pub const SWEEP_TEMPERATURE: f64 = 0.07;

/// KNN evaluation of `params`' encoder: bank from the labeled rows, queries
/// from the test rows.
pub fn evaluate_params(cfg: &RunConfig, manifest: &Manifest, network: &ModelNetwork, params: &ParamStore<f32>) -> Result<EvalOutcome> {
    let (bank_maps, bank_labels) = load_maps(manifest, &[Split::Labeled])?;
    let (test_maps, test_labels) = load_maps(manifest, &[Split::Test])?;
    if bank_maps.is_empty() || test_maps.is_empty() {
        return Err(Error::EmptyInput("evaluation needs labeled and test rows".into()));
    }
    let bank = knn::extract_features(&network.encoder, params, &bank_maps.iter().collect::<Vec<_>>(), &bank_labels, FEATURE_BATCH)?;
    let test = knn::extract_features(&network.encoder, params, &test_maps.iter().collect::<Vec<_>>(), &test_labels, FEATURE_BATCH)?;
    evaluate_banks(cfg, manifest.class_names(), &test, &bank)
}

pub fn evaluate_banks(cfg: &RunConfig, class_names: Vec<String>, test: &FeatureBank, bank: &FeatureBank) -> Result<EvalOutcome> {
    let report = knn::evaluate(test, bank, &cfg.knn)?;
    let sweep_temperature = cfg.knn.temperature.unwrap_or(SWEEP_TEMPERATURE);
    let sweep = cfg
        .knn_sweep
        .iter()
        .map(|&n| {
            let with = KnnConfig {
                n_neighbors: n,
                temperature: Some(sweep_temperature),
            };
            let without = KnnConfig {
                n_neighbors: n,
                temperature: None,
            };
            Ok(SweepRow {
                n_neighbors: n,
                accuracy_with_tau: knn::evaluate(test, bank, &with)?.accuracy,
                accuracy_without_tau: knn::evaluate(test, bank, &without)?.accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalOutcome {
        class_names,
        report,
        sweep_temperature,
        sweep,
    })
}

/// Evaluates the teacher encoder stored in `checkpoint`.
pub fn eval(cfg: &RunConfig, manifest_path: &Path, checkpoint: &Path) -> Result<EvalOutcome> {
    cfg.validate()?;
    let manifest = Manifest::read(manifest_path)?;
    let (network, state) = load_state(cfg, checkpoint)?;
    evaluate_params(cfg, &manifest, &network, &state.teacher)
}

/// Parses a metrics log; malformed lines report their line number.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text, &path.display().to_string())
}

pub fn parse_metrics(text: &str, source_name: &str) -> Result<Vec<EpochMetrics>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, line) in text.lines().enumerate() {
        if !line.trim().is_empty() {
            let m: EpochMetrics = serde_json::from_str(line).map_err(|e| Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                offset: offset + e.column().saturating_sub(1),
                message: e.to_string(),
            })?;
            out.push(m);
        }
        offset += line.len() + 1;
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!("{source_name} holds no metrics")));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DesignSummary {
    pub ablation: Ablation,
    pub loss: f64,
    pub kl: f64,
    pub entropy: f64,
    #[serde(serialize_with = "collapse_as_str")]
    pub verdict: Collapse,
}

fn collapse_as_str<S: serde::Serializer>(c: &Collapse, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&c.to_string())
}

/// Collapse verdict and final statistics of a metrics trace.
pub fn diagnose(metrics: &[EpochMetrics], k: usize, ablation: Ablation) -> Result<DesignSummary> {
    let trace: Vec<(f64, f64)> = metrics.iter().map(|m| (m.kl, m.entropy)).collect();
    let verdict = collapse_classify(&trace, k, &CollapseThresholds::default())?;
    let last = metrics.last().ok_or_else(|| Error::EmptyInput("empty metrics trace".into()))?;
    Ok(DesignSummary {
        ablation,
        loss: last.loss,
        kl: last.kl,
        entropy: last.entropy,
        verdict,
    })
}

/// Trains each of the four designs from scratch on the same maps.
pub fn four_designs(cfg: &RunConfig, manifest_path: &Path, threads: usize) -> Result<Vec<(DesignSummary, Vec<EpochMetrics>)>> {
    let manifest = Manifest::read(manifest_path)?;
    let (data, _) = load_maps(&manifest, &[Split::Unlabeled, Split::Labeled])?;
    let (network, _) = ModelNetwork::init::<f32>(&cfg.model(), cfg.seed)?;
    let options = TrainOptions {
        seed: cfg.seed,
        threads,
        snapshot_dir: None,
    };
    Ablation::ALL
        .iter()
        .map(|&ablation| {
            let dcfg = dino::DinoConfig { ablation, ..cfg.dino.clone() };
            let mut state = TrainState::new(&network, &dcfg, cfg.seed)?;
            let metrics = dino::train(&network, &mut state, &data, &dcfg, &options, |_, _| Ok(()))?;
            Ok((diagnose(&metrics, cfg.projector.out_dim, ablation)?, metrics))
        })
        .collect()
}

pub fn render_designs(rows: &[DesignSummary]) -> String {
    let mut out = format!("{:<16} {:>10} {:>10} {:>10}  {}\n", "design", "loss", "kl", "entropy", "verdict");
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:>10.4} {:>10.4} {:>10.4}  {}\n",
            r.ablation.name(),
            r.loss,
            r.kl,
            r.entropy,
            r.verdict
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionReport {
    pub maps_file: PathBuf,
    pub image_file: PathBuf,
    pub concentration: f64,
    pub kept_patches: usize,
}

const OVERLAY_SCALE: usize = 4;

/// Writes `<out>.attn` and a side-by-side `<out>.ppm`: CAM heat on the left,
/// the map with non-TAM patches dimmed on the right.
pub fn attention(cfg: &RunConfig, checkpoint: &Path, tfm: &Path, keep_mass: f64, out: &Path) -> Result<AttentionReport> {
    cfg.validate()?;
    let (network, state) = load_state(cfg, checkpoint)?;
    let map = TimeFrequencyMap::read(tfm)?;
    let maps = network.encoder.extract_attention(&state.teacher, &map, keep_mass)?;
    let maps_file = out.with_extension("attn");
    let image_file = out.with_extension("ppm");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    maps.write(&maps_file)?;
    let ppm = render_overlay(&map, &maps, cfg.vit.patch_size);
    fs::write(&image_file, ppm).map_err(|e| Error::io(&image_file, e))?;
    Ok(AttentionReport {
        maps_file,
        image_file,
        concentration: maps.concentration(),
        kept_patches: maps.tam.iter().filter(|&&k| k).count(),
    })
}

fn render_overlay(map: &TimeFrequencyMap, attn: &AttentionMaps, patch: usize) -> Vec<u8> {
    let (h, w, c) = (map.height(), map.width(), map.channels());
    let grid = w / patch;
    let cam = attn.mean_cam();
    let peak = cam.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
    let s = OVERLAY_SCALE;
    let (out_w, out_h) = (2 * w * s, h * s);
    let mut px = format!("P6\n{out_w} {out_h}\n255\n").into_bytes();
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (panel, x) = (ox / (w * s), (ox % (w * s)) / s);
            let y = oy / s;
            let k = (y / patch) * grid + x / patch;
            let base: [f64; 3] = std::array::from_fn(|ch| map.pixels()[(y * w + x) * c + ch.min(c - 1)] as f64);
            let rgb = if panel == 0 {
                let a = cam[k] / peak;
                let heat = [a, 0.2 * a, 1.0 - a];
                std::array::from_fn(|i| 0.5 * base[i] + 0.5 * heat[i])
            } else if attn.tam[k] {
                base
            } else {
                base.map(|v| 0.25 * v)
            };
            px.extend(rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    px
}

/// Default worker count: the machine's available parallelism.
pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Rows per (class, split).
pub fn split_counts(manifest: &Manifest) -> BTreeMap<(String, Split), usize> {
    let mut out = BTreeMap::new();
    for row in &manifest.rows {
        *out.entry((row.class.clone(), row.split)).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.synth.n_per_class = 10;
        cfg.synth.n_classes = 2;
        cfg.synth.labeled_fraction = 0.5;
        cfg.segment = signal::SegmentSpec::new(256, 256).unwrap();
        cfg.knn_sweep = vec![1, 3];
        cfg
    }

    #[test]
    fn synth_split_shape_and_refusal() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        let cfg = small();
        let report = synth(&cfg, &out, false).unwrap();
        assert_eq!(report.n_files, 20);
        let m = Manifest::read(&report.manifest).unwrap();
        let counts = split_counts(&m);
        assert_eq!(counts[&("normal".to_string(), Split::Test)], 2);
        assert_eq!(counts[&("normal".to_string(), Split::Labeled)], 4);
        assert_eq!(counts[&("inner_race".to_string(), Split::Unlabeled)], 4);
        assert!(synth(&cfg, &out, false).is_err());
        assert!(synth(&cfg, &out, true).is_ok());
        assert_eq!(Manifest::read(&report.manifest).unwrap(), m);
    }

    #[test]
    fn desk_synth_has_two_labeled_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::desk();
        cfg.segment = signal::SegmentSpec::new(64, 64).unwrap();
        let m = Manifest::read(&synth(&cfg, dir.path(), false).unwrap().manifest).unwrap();
        assert_eq!(m.rows.len(), 800);
        for class in m.class_names() {
            assert_eq!(split_counts(&m)[&(class, Split::Labeled)], 2);
        }
    }

    #[test]
    fn single_class_warns() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.synth.n_classes = 1;
        cfg.knn_sweep = vec![1];
        let report = synth(&cfg, dir.path(), false).unwrap();
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn preprocess_is_idempotent_and_reports_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let data = dir.path().join("data");
        let manifest = synth(&cfg, &data, false).unwrap().manifest;
        let tfm = dir.path().join("tfm");
        let first = preprocess(&cfg, &manifest, &tfm, 2).unwrap();
        assert_eq!((first.written, first.skipped, first.errors.len()), (20, 0, 0));
        let again = preprocess(&cfg, &manifest, &tfm, 1).unwrap();
        assert_eq!((again.written, again.skipped), (0, 20));
        let m = Manifest::read(&first.manifest).unwrap();
        assert_eq!(m.rows.len(), 20);

        let mut src = Manifest::read(&manifest).unwrap();
        fs::write(data.join(&src.rows[3].path), b"not a number\n").unwrap();
        src.rows[5].path = "signals/missing.sig".into();
        src.write(&manifest).unwrap();
        let broken = preprocess(&cfg, &manifest, &tfm, 1).unwrap();
        assert_eq!(broken.errors.len(), 2);
        assert!(broken.errors[0].path.ends_with(&src.rows[3].path));
    }

    #[test]
    fn metrics_parse_errors_carry_line_numbers() {
        let good = r#"{"epoch":1,"step":2,"loss":1.0,"kl":0.5,"entropy":2.0,"lr":0.1,"m":0.99,"center_norm":0.0}"#;
        let text = format!("{good}\n{good}\n{{broken\n");
        match parse_metrics(&text, "log") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert_eq!(parse_metrics(&format!("{good}\n"), "log").unwrap().len(), 1);
    }

    #[test]
    fn diagnose_constant_uniform_log() {
        let k = 64;
        let m = EpochMetrics {
            epoch: 1,
            step: 1,
            loss: (k as f64).ln(),
            kl: 0.0,
            entropy: (k as f64).ln(),
            lr: 0.0,
            m: 0.99,
            center_norm: 0.0,
        };
        let s = diagnose(&vec![m; 6], k, Ablation::Both).unwrap();
        assert_eq!(s.verdict, Collapse::OverUniformity);
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wavedino::config::RunConfig;
use wavedino::dino::Ablation;
use wavedino::pipeline::{self, MANIFEST_FILE, METRICS_FILE};
use wavedino::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "wavedino", version, about = "Self-supervised fault diagnosis on wavelet time-frequency maps")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Flat `key = value` config file applied on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,

    /// Config override, repeatable: `--set epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration.
    Config,
    /// Generate a synthetic bearing-fault dataset and its manifest.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Convert every manifest row into a time-frequency map.
    Preprocess {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Self-distillation training; resumes an existing run directory.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Train one of the four centering/sharpening designs.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Tempered KNN evaluation of the teacher on the test rows.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n_neighbors: Option<usize>,
        /// KNN temperature, or `none` for a count vote.
        #[arg(long)]
        temperature: Option<String>,
        /// Comma-separated neighbour counts, or `none`.
        #[arg(long)]
        sweep: Option<String>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Collapse verdict of a metrics log, or a fresh four-design comparison.
    Diagnose {
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Design that produced the log.
        #[arg(long)]
        ablation: Option<String>,
        /// Train all four designs on this manifest and tabulate them.
        #[arg(long)]
        four_designs: bool,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Export CAM/TAM attention maps for one map file.
    Attention {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tfm: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        keep_mass: f64,
        /// Output stem; `.attn` and `.ppm` are appended.
        #[arg(long, default_value = "attention")]
        out: PathBuf,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match g.preset {
        Preset::Desk => RunConfig::desk(),
        Preset::Full => RunConfig::full(),
    };
    if let Some(path) = &g.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    for kv in &g.overrides {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.clone().unwrap_or_else(|| "data".into())
}

fn tfm_dir(cfg: &RunConfig) -> PathBuf {
    cfg.tfm_dir.clone().unwrap_or_else(|| "tfm".into())
}

fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.clone().unwrap_or_else(|| "run".into())
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

/// Runs one command; `Ok(false)` means some items failed.
fn run(cli: Cli) -> Result<bool> {
    let mut cfg = load_config(&cli.global)?;
    let threads = cli.global.threads.unwrap_or_else(pipeline::default_threads).max(1);
    let force = cli.global.force;
    match cli.command {
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_text());
        }
        Command::Synth { out, n_per_class, classes } => {
            if let Some(n) = n_per_class {
                cfg.synth.n_per_class = n;
            }
            if let Some(c) = classes {
                cfg.synth.n_classes = c;
            }
            let out = out.unwrap_or_else(|| data_dir(&cfg));
            let report = pipeline::synth(&cfg, &out, force)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            let manifest = pipeline::Manifest::read(&report.manifest)?;
            println!("wrote {} signals and {}", report.n_files, report.manifest.display());
            for ((class, split), n) in pipeline::split_counts(&manifest) {
                println!("  {class:<8} {:<10} {n}", split.to_string());
            }
        }
        Command::Preprocess { manifest, out } => {
            let manifest = manifest.unwrap_or_else(|| data_dir(&cfg).join(MANIFEST_FILE));
            let out = out.unwrap_or_else(|| tfm_dir(&cfg));
            let report = pipeline::preprocess(&cfg, &manifest, &out, threads)?;
            println!(
                "{} written, {} up to date, {} failed; manifest {}",
                report.written,
                report.skipped,
                report.errors.len(),
                report.manifest.display()
            );
            for e in &report.errors {
                eprintln!("error: {e}");
            }
            return Ok(report.errors.is_empty());
        }
        Command::Train { manifest, run_dir: dir, ablation } => {
            if let Some(a) = ablation {
                cfg.set("ablation", &a)?;
            }
            let manifest = manifest.unwrap_or_else(|| tfm_dir(&cfg).join(MANIFEST_FILE));
            let dir = dir.unwrap_or_else(|| run_dir(&cfg));
            let report = pipeline::train(&cfg, &manifest, &dir, threads, force)?;
            if let Some(epoch) = report.resumed_from_epoch {
                println!("resumed after epoch {epoch}");
            }
            for m in &report.metrics {
                println!(
                    "epoch {:>3}  loss {:.4}  kl {:.4}  entropy {:.4}  lr {:.2e}  m {:.4}",
                    m.epoch, m.loss, m.kl, m.entropy, m.lr, m.m
                );
            }
            println!("checkpoint {}", report.final_checkpoint.display());
            println!("metrics {}", report.metrics_log.display());
        }
        Command::Eval { manifest, checkpoint, n_neighbors, temperature, sweep, json } => {
            if let Some(k) = n_neighbors {
                cfg.knn.n_neighbors = k;
            }
            if let Some(t) = temperature {
                cfg.set("knn_temperature", &t)?;
            }
            if let Some(s) = sweep {
                cfg.set("knn_sweep", &s)?;
            }
            let manifest = manifest.unwrap_or_else(|| tfm_dir(&cfg).join(MANIFEST_FILE));
            let checkpoint = checkpoint.unwrap_or_else(|| run_dir(&cfg).join(pipeline::FINAL_CHECKPOINT));
            let outcome = pipeline::eval(&cfg, &manifest, &checkpoint)?;
            print!("{}", outcome.render());
            if let Some(path) = json {
                write_json(&path, &outcome.to_json())?;
            }
        }
        Command::Diagnose { metrics, ablation, four_designs, manifest, json } => {
            if four_designs {
                let manifest = manifest.unwrap_or_else(|| tfm_dir(&cfg).join(MANIFEST_FILE));
                let runs = pipeline::four_designs(&cfg, &manifest, threads)?;
                let rows: Vec<_> = runs.into_iter().map(|(s, _)| s).collect();
                print!("{}", pipeline::render_designs(&rows));
                if let Some(path) = json {
                    write_json(&path, &serde_json::to_string_pretty(&rows).map_err(json_err)?)?;
                }
            } else {
                let ablation: Ablation = match ablation {
                    Some(a) => a.parse()?,
                    None => cfg.dino.ablation,
                };
                let path = metrics.unwrap_or_else(|| run_dir(&cfg).join(METRICS_FILE));
                let log = pipeline::read_metrics(&path)?;
                let summary = pipeline::diagnose(&log, cfg.projector.out_dim, ablation)?;
                print!("{}", pipeline::render_designs(std::slice::from_ref(&summary)));
                println!("verdict: {}", summary.verdict);
                if let Some(path) = json {
                    write_json(&path, &serde_json::to_string_pretty(&summary).map_err(json_err)?)?;
                }
            }
        }
        Command::Attention { checkpoint, tfm, keep_mass, out } => {
            let checkpoint = checkpoint.unwrap_or_else(|| run_dir(&cfg).join(pipeline::FINAL_CHECKPOINT));
            let report = pipeline::attention(&cfg, &checkpoint, &tfm, keep_mass, &out)?;
            println!("attention maps {}", report.maps_file.display());
            println!("overlay {}", report.image_file.display());
            println!("CAM max/min ratio {:.4}", report.concentration);
            println!("TAM keeps {} patches", report.kept_patches);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

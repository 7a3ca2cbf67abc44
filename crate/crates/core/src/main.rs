use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use damp::config::{Mode, RunConfig};
use damp::data::{generate, load_domain, load_labels};
use damp::experiment::{
    ablate, ablation_table, confusion_table, dump_embeddings, grad_check, load_checkpoint_model, output_root,
    train_in_dir, write_dataset, DomainImages, RunDir, TrainOptions,
};
use damp::gradcheck::GradCheckConfig;
use damp::train::EvalReport;

#[derive(Parser)]
#[command(name = "damp", version, about = "Mutual prompting for unsupervised domain adaptation on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; defaults apply to every omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override applied after the file, e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides).context("loading configuration")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic domains of a configuration to container files.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory [default: <root>/data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and write a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Adaptation mode; overrides `mode` from the configuration.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Run directory [default: <root>/<mode>-seed<seed>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs of this invocation; continue later with --resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on a stored dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset container written by `generate-data`.
        #[arg(long)]
        dataset: PathBuf,
        /// Label container for an unlabeled dataset.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Output directory [default: the checkpoint's directory].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Component ladder and prompting strategies over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Table file [default: <root>/ablation.tsv].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write pre- and post-prompting embeddings of stored datasets.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One or more dataset containers.
        #[arg(long, required = true, num_args = 1..)]
        dataset: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 3)]
        batches: usize,
        /// Images per domain in each micro-batch.
        #[arg(long, default_value_t = 4)]
        size: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Coordinates sampled per trainable tensor.
        #[arg(long, default_value_t = 3)]
        coords: usize,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    match s {
        "uda" => Ok(Mode::Uda),
        "msda" => Ok(Mode::Msda),
        "dg" => Ok(Mode::Dg),
        _ => Err(format!("unknown mode '{s}' (uda, msda, dg)")),
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Uda => "uda",
        Mode::Msda => "msda",
        Mode::Dg => "dg",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenerateData { cfg, out } => {
            let cfg = cfg.load()?;
            let dir = out.unwrap_or_else(|| output_root().join("data"));
            let data = generate(&cfg.data)?;
            for p in write_dataset(&data, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::Train {
            cfg,
            mode,
            out,
            resume,
            stop_after,
        } => {
            let mut cfg = cfg;
            if let Some(m) = mode {
                cfg.overrides.push(format!("mode=\"{}\"", mode_name(m)));
            }
            let cfg = cfg.load()?;
            let dir = RunDir::new(
                out.unwrap_or_else(|| output_root().join(format!("{}-seed{}", mode_name(cfg.mode), cfg.seed))),
            );
            info!("run directory {}", dir.path.display());
            let opts = TrainOptions { resume, stop_after };
            let report = train_in_dir(cfg, &dir, opts, |m| {
                info!(
                    "epoch {:>3} lr {:.2e} loss {:.4} source {:.3} target {}",
                    m.epoch,
                    m.lr,
                    m.total,
                    m.source_accuracy,
                    m.target_accuracy.map_or("-".to_string(), |a| format!("{a:.3}"))
                );
            })?;
            let Some(report) = report else {
                info!("stopped early; continue with --resume");
                return Ok(ExitCode::SUCCESS);
            };
            for r in &report.source {
                println!("{}\t{:.4}", r.domain, r.accuracy);
            }
            for r in report.target.iter().chain(&report.target_zero_shot).chain(&report.unseen) {
                println!("{}\t{:.4}", r.domain, r.accuracy);
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            labels,
            out,
        } => {
            let (_, model) = load_checkpoint_model(&checkpoint)?;
            let stored = load_domain(&dataset).with_context(|| format!("reading {}", dataset.display()))?;
            let truth = match (labels, stored.labels.clone()) {
                (Some(p), _) => load_labels(&p)?.0,
                (None, Some(l)) => l,
                (None, None) => bail!("{} is unlabeled; pass --labels", dataset.display()),
            };
            if truth.len() != stored.images.len() {
                bail!("{} labels for {} images", truth.len(), stored.images.len());
            }
            if stored.classes != model.classes() {
                bail!("dataset has {} classes, checkpoint {}", stored.classes, model.classes());
            }
            let refs: Vec<_> = stored.images.iter().collect();
            let probs = model.predict(&refs)?;
            let report = EvalReport::new(&stored.name, &probs, &truth, model.classes());
            let dir = out.unwrap_or_else(|| parent_dir(&checkpoint));
            fs::create_dir_all(&dir)?;
            let stem = format!("eval-{}", stored.name);
            fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&report)?)?;
            fs::write(dir.join(format!("{stem}.confusion.tsv")), confusion_table(&report))?;
            println!("{}\t{:.4}", report.domain, report.accuracy);
        }
        Command::Ablate { cfg, seeds, out } => {
            let cfg = cfg.load()?;
            if seeds.is_empty() {
                bail!("at least one seed is required");
            }
            let rows = ablate(&cfg, &seeds, |table, row, seed, acc| {
                info!("{table}/{row} seed {seed}: {acc:.4}");
            })?;
            let path = out.unwrap_or_else(|| output_root().join("ablation.tsv"));
            if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(d)?;
            }
            let table = ablation_table(&rows);
            fs::write(&path, &table)?;
            print!("{table}");
        }
        Command::DumpEmbeddings { checkpoint, dataset, out } => {
            let (_, model) = load_checkpoint_model(&checkpoint)?;
            let mut domains = Vec::new();
            for p in &dataset {
                let d = load_domain(p).with_context(|| format!("reading {}", p.display()))?;
                domains.push(DomainImages {
                    name: d.name,
                    images: d.images,
                    labels: d.labels,
                });
            }
            let archive = dump_embeddings(&model, &domains)?;
            archive.save(&out)?;
            println!("{} records -> {}", archive.records.len(), out.display());
        }
        Command::GradCheck {
            cfg,
            batches,
            size,
            eps,
            coords,
            tol,
            seed,
        } => {
            let cfg = cfg.load()?;
            let gc = GradCheckConfig {
                eps,
                coords_per_tensor: coords,
                seed,
                ..GradCheckConfig::default()
            };
            let reports = grad_check(&cfg, batches, size, &gc)?;
            let mut ok = true;
            println!("batch\tloss\tgroup\tcoords\tmax_rel_error\tstatus");
            for (b, batch) in reports.iter().enumerate() {
                for r in batch {
                    for g in &r.groups {
                        let pass = g.max_rel_error < tol;
                        ok &= pass;
                        println!(
                            "{b}\t{}\t{}\t{}\t{:.3e}\t{}",
                            r.loss,
                            g.group,
                            g.coords,
                            g.max_rel_error,
                            if pass { "ok" } else { "FAIL" }
                        );
                    }
                }
            }
            if !ok {
                eprintln!("gradient check exceeded tolerance {tol:e}");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

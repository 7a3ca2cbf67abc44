//! Run directories, metrics logs and the sweeps behind the command line.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, RunConfig};
use crate::container::Container;
use crate::data::embeddings::{EmbeddingArchive, EmbeddingRecord, PromptedEmbedding};
use crate::data::{generate, save_domain, save_labels, strong_augment, GeneratedData, Image};
use crate::encoder::Encoders;
use crate::error::{DampError, Result};
use crate::gradcheck::{check_losses, GradCheckConfig, GradCheckReport, LossSelector};
use crate::model::Model;
use crate::prompter::Strategy;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::train::{
    load_params, split_data, EpochMetrics, EvalReport, Objective, SourceViews, StepBatch, TargetViews, Trainer,
    CHECKPOINT_KIND,
};

/// Environment variable overriding the default output root.
pub const OUTPUT_ROOT_ENV: &str = "DAMP_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.damp";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";

/// Output root: the environment override when set, else `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub run_id: String,
    pub version: String,
    pub mode: String,
    pub seeds: Vec<u64>,
    pub config_file: String,
    pub metrics_file: String,
    pub checkpoint_file: String,
    pub report_file: String,
    pub epochs_completed: usize,
    pub completed: bool,
}

/// Directory holding one training run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn has_checkpoint(&self) -> bool {
        self.file(CHECKPOINT_FILE).exists()
    }

    pub fn manifest(&self) -> Result<ExperimentManifest> {
        Ok(serde_json::from_slice(&fs::read(self.file(MANIFEST_FILE))?)?)
    }

    fn write_manifest(&self, m: &ExperimentManifest) -> Result<()> {
        fs::write(self.file(MANIFEST_FILE), serde_json::to_vec_pretty(m)?)?;
        Ok(())
    }
}

/// Appends one JSON line per record.
pub fn append_metrics(path: impl AsRef<Path>, m: &EpochMetrics) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(m)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Final evaluations written next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: usize,
    pub encoders_unchanged: bool,
    pub source: Vec<EvalReport>,
    pub target: Option<EvalReport>,
    pub target_zero_shot: Option<EvalReport>,
    pub unseen: Option<EvalReport>,
}

/// True when every frozen encoder weight equals a fresh build from the
/// same configuration, bit for bit.
pub fn encoders_unchanged<T: Scalar>(enc: &Encoders<T>) -> Result<bool> {
    let fresh = Encoders::<T>::new(enc.config().clone())?;
    let a = enc.weights();
    let b = fresh.weights();
    Ok(a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((_, na, va), (_, nb, vb))| {
            na == nb
                && va.shape() == vb.shape()
                && va.as_slice().iter().zip(vb.as_slice()).all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
        }))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from the checkpoint in the directory when there is one.
    pub resume: bool,
    /// Return after this many epochs of the current invocation, leaving a
    /// resumable run behind.
    pub stop_after: Option<usize>,
}

/// Trains `cfg` inside `dir`. When resuming, the run continues from the
/// stored checkpoint and extends the metrics log; otherwise the directory
/// must not already hold a run. Returns `None` when `stop_after` ended the
/// invocation before the last epoch.
pub fn train_in_dir(
    cfg: RunConfig,
    dir: &RunDir,
    opts: TrainOptions,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Option<RunReport>> {
    cfg.validate()?;
    let resuming = opts.resume && dir.has_checkpoint();
    if !resuming && dir.file(METRICS_FILE).exists() {
        return Err(DampError::Invalid(format!(
            "{} already holds a run; pass resume or choose another directory",
            dir.path.display()
        )));
    }
    fs::create_dir_all(&dir.path)?;
    let (train, eval) = split_data(generate(&cfg.data)?);
    let mut trainer = Trainer::<f64>::new(cfg.clone(), train, eval)?;
    if resuming {
        let stored = fs::read_to_string(dir.file(CONFIG_FILE))?;
        if RunConfig::from_toml_str(&stored)? != cfg {
            return Err(DampError::Config("resumed run must use the stored configuration".into()));
        }
        trainer.restore(&Container::read(dir.file(CHECKPOINT_FILE))?)?;
        let mut history = read_metrics(dir.file(METRICS_FILE))?;
        history.truncate(trainer.epoch);
        trainer.history = history;
    } else {
        fs::write(dir.file(CONFIG_FILE), cfg.to_toml())?;
    }
    let mut manifest = ExperimentManifest {
        run_id: dir
            .path
            .file_name()
            .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned()),
        version: env!("CARGO_PKG_VERSION").to_string(),
        mode: format!("{:?}", cfg.mode).to_lowercase(),
        seeds: vec![cfg.seed],
        config_file: CONFIG_FILE.into(),
        metrics_file: METRICS_FILE.into(),
        checkpoint_file: CHECKPOINT_FILE.into(),
        report_file: REPORT_FILE.into(),
        epochs_completed: trainer.epoch,
        completed: false,
    };
    dir.write_manifest(&manifest)?;
    let metrics_path = dir.file(METRICS_FILE);
    let ckpt_path = dir.file(CHECKPOINT_FILE);
    let mut ran = 0;
    while trainer.epoch < trainer.cfg.epochs {
        if opts.stop_after.is_some_and(|n| ran >= n) {
            manifest.epochs_completed = trainer.epoch;
            dir.write_manifest(&manifest)?;
            return Ok(None);
        }
        let m = trainer.run_epoch()?.clone();
        append_metrics(&metrics_path, &m)?;
        trainer.checkpoint().write(&ckpt_path)?;
        on_epoch(&m);
        ran += 1;
    }
    let report = RunReport {
        epochs: trainer.epoch,
        encoders_unchanged: encoders_unchanged(&trainer.model.encoders)?,
        source: trainer.source_reports()?,
        target: trainer.target_report()?,
        target_zero_shot: trainer.target_zero_shot()?,
        unseen: trainer.evaluate_unseen()?,
    };
    if !report.encoders_unchanged {
        return Err(DampError::Invalid("frozen encoder weights changed during training".into()));
    }
    fs::write(dir.file(REPORT_FILE), serde_json::to_vec_pretty(&report)?)?;
    manifest.epochs_completed = trainer.epoch;
    manifest.completed = true;
    dir.write_manifest(&manifest)?;
    Ok(Some(report))
}

/// Model with trainable tensors from a checkpoint and the configuration
/// stored inside it.
pub fn load_checkpoint_model(path: impl AsRef<Path>) -> Result<(RunConfig, Model<f64>)> {
    let c = Container::read(path)?;
    c.expect_kind(CHECKPOINT_KIND)?;
    let cfg_json = c
        .meta
        .get("config")
        .ok_or_else(|| DampError::Format("checkpoint has no configuration".into()))?;
    let cfg: RunConfig = serde_json::from_value(cfg_json.clone())?;
    let mut model = Model::<f64>::new(&cfg)?;
    let params = load_params(&model.params, &c)?;
    model.params.load_from(&params)?;
    Ok((cfg, model))
}

/// Writes every domain of `data` as containers under `dir`. Unlabeled
/// domains get their labels in a separate file. Returns the written paths.
pub fn write_dataset(data: &GeneratedData, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for d in data.sources.iter().chain(&data.source_holdout) {
        let p = dir.join(format!("{}.damp", d.name));
        save_domain(&p, &d.name, data.classes, &d.images, Some(&d.labels))?;
        out.push(p);
    }
    for (d, labels) in data.target.iter().chain(&data.unseen) {
        let p = dir.join(format!("{}.damp", d.name()));
        save_domain(&p, d.name(), data.classes, d.images(), None)?;
        out.push(p);
        let l = dir.join(format!("{}.labels.damp", d.name()));
        save_labels(&l, d.name(), labels)?;
        out.push(l);
    }
    Ok(out)
}

/// Images of one domain with optional labels.
#[derive(Debug, Clone)]
pub struct DomainImages {
    pub name: String,
    pub images: Vec<Image>,
    pub labels: Option<Vec<usize>>,
}

/// Pre- and post-prompting embeddings for every image of `domains`.
pub fn dump_embeddings(model: &Model<f64>, domains: &[DomainImages]) -> Result<EmbeddingArchive> {
    let d = model.encoders.dim();
    let k = model.classes();
    let encodings = model.class_encodings()?;
    let n_ctx = encodings.first().map_or(0, |e| e.s_tilde.rows());
    let class_s = Matrix::from_vec(k, d, encodings.iter().flat_map(|e| e.s.iter().copied()).collect())?;
    let tildes: Vec<&Matrix<f64>> = encodings.iter().map(|e| &e.s_tilde).collect();
    let class_s_tilde = Matrix::concat_rows(&tildes)?;
    let mut records = Vec::new();
    let mut spatial = model.encoders.config().spatial_tokens();
    for (di, dom) in domains.iter().enumerate() {
        for (ci, chunk) in dom.images.chunks(64).enumerate() {
            let refs: Vec<&Image> = chunk.iter().collect();
            let emb = model.embed_images(&refs)?;
            spatial = emb.spatial;
            let pairs = model.prompted_pairs(&emb)?;
            for (i, pair) in pairs.into_iter().enumerate() {
                let idx = ci * 64 + i;
                records.push(EmbeddingRecord {
                    domain: di,
                    label: dom.labels.as_ref().map(|l| l[idx]),
                    v: emb.v.row(i).to_vec(),
                    v_tilde: emb.v_tilde.slice_rows(i * spatial, (i + 1) * spatial),
                    prompted: Some(PromptedEmbedding {
                        v_prime: pair.v_prime,
                        s_prime: pair.s_prime,
                    }),
                });
            }
        }
    }
    let archive = EmbeddingArchive {
        dim: d,
        n_ctx,
        spatial,
        classes: k,
        domains: domains.iter().map(|x| x.name.clone()).collect(),
        class_s,
        class_s_tilde,
        naive_s: model.naive_embeddings().clone(),
        records,
    };
    archive.validate()?;
    Ok(archive)
}

/// Random micro-batch over every training domain of `data`, with strong
/// views and uniformly drawn pseudo-labels.
pub fn micro_batch(model: &Model<f64>, cfg: &RunConfig, data: &GeneratedData, size: usize, rng: &mut impl Rng) -> Result<StepBatch<f64>> {
    let pick = |n: usize, rng: &mut dyn rand::RngCore| -> Vec<usize> {
        let mut r = ChaCha8Rng::seed_from_u64(rng.next_u64());
        sample(&mut r, n, size.min(n)).into_vec()
    };
    let views = |imgs: Vec<&Image>, rng: &mut dyn rand::RngCore| -> Result<_> {
        let mut r = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let strong: Vec<Image> = imgs.iter().map(|x| strong_augment(x, &cfg.augment, &mut r)).collect();
        let weak = model.embed_images(&imgs)?;
        let strong = model.embed_images(&strong.iter().collect::<Vec<_>>())?;
        Ok((weak, strong))
    };
    let mut sources = Vec::new();
    for s in &data.sources {
        let idx = pick(s.len(), rng);
        let (weak, strong) = views(idx.iter().map(|&i| &s.images[i]).collect(), rng)?;
        sources.push(SourceViews {
            name: s.name.clone(),
            weak,
            strong: Some(strong),
            labels: idx.iter().map(|&i| s.labels[i]).collect(),
        });
    }
    let target = match &data.target {
        Some((t, _)) if cfg.mode != crate::config::Mode::Dg => {
            let imgs = t.images();
            let idx = pick(imgs.len(), rng);
            let (weak, strong) = views(idx.iter().map(|&i| &imgs[i]).collect(), rng)?;
            let k = model.classes();
            Some(TargetViews {
                weak,
                strong: Some(strong),
                pseudo: idx.iter().map(|_| rng.random_range(0..k)).collect(),
            })
        }
        _ => None,
    };
    Ok(StepBatch { sources, target })
}

/// Losses checked for `cfg`: every enabled term plus the total.
pub fn grad_check_selectors(obj: &Objective, has_target: bool) -> Vec<LossSelector> {
    let mut out = vec![LossSelector::Sup];
    if obj.l_sc {
        out.push(LossSelector::Sc);
    }
    if obj.l_idc {
        out.push(LossSelector::Idc);
    }
    if obj.l_im && has_target {
        out.push(LossSelector::Im);
    }
    out.push(LossSelector::All);
    out
}

/// Gradient check of a freshly initialized model on `batches` random
/// micro-batches of `size` images per domain. Every target row passes the
/// confidence gate so the target cross-entropy is exercised.
pub fn grad_check(cfg: &RunConfig, batches: usize, size: usize, gc: &GradCheckConfig) -> Result<Vec<Vec<GradCheckReport>>> {
    cfg.validate()?;
    let data = generate(&cfg.data)?;
    let model = Model::<f64>::new(cfg)?;
    let mut obj = Objective::from_config(cfg);
    obj.threshold = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    (0..batches)
        .map(|b| {
            let batch = micro_batch(&model, cfg, &data, size, &mut rng)?;
            let sels = grad_check_selectors(&obj, batch.target.is_some());
            let gcb = GradCheckConfig {
                seed: gc.seed.wrapping_add(b as u64),
                ..*gc
            };
            check_losses(&model, &batch, &obj, &sels, &gcb)
        })
        .collect()
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: String,
    pub row: String,
    pub seeds: Vec<u64>,
    /// Final target accuracy per seed (unseen-domain accuracy in dg mode).
    pub target: Vec<f64>,
    pub source: Vec<f64>,
}

/// Arithmetic mean and sample standard deviation.
pub fn mean_spread(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Final (target-or-unseen, source) accuracy of one training run.
pub fn final_accuracies(cfg: RunConfig) -> Result<(f64, f64)> {
    let (train, eval) = split_data(generate(&cfg.data)?);
    let mut t = Trainer::<f64>::new(cfg, train, eval)?;
    t.train(|_, _| Ok(()))?;
    let source = t.source_accuracy()?;
    let target = match t.target_report()? {
        Some(r) => r.accuracy,
        None => t.evaluate_unseen()?.map_or(f64::NAN, |r| r.accuracy),
    };
    Ok((target, source))
}

/// Runs the component ladder and the prompting-strategy rows over `seeds`.
/// Every row shares `cfg.data`; only the run seed varies. Identical
/// configurations are trained once.
pub fn ablate(cfg: &RunConfig, seeds: &[u64], mut progress: impl FnMut(&str, &str, u64, f64)) -> Result<Vec<AblationRow>> {
    let mut plan: Vec<(String, String, RunConfig)> = Ablation::ladder()
        .into_iter()
        .map(|(name, ab)| {
            let mut c = cfg.clone();
            c.ablation = ab;
            ("components".to_string(), name.to_string(), c)
        })
        .collect();
    for s in Strategy::ALL {
        let mut c = cfg.clone();
        c.ablation = Ablation::full();
        c.prompter.strategy = s;
        plan.push(("strategy".to_string(), s.name().to_string(), c));
    }
    let mut cache: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let mut rows = Vec::new();
    for (table, row, base) in plan {
        let mut out = AblationRow {
            table: table.clone(),
            row: row.clone(),
            seeds: seeds.to_vec(),
            target: Vec::new(),
            source: Vec::new(),
        };
        for &seed in seeds {
            let mut c = base.clone();
            c.seed = seed;
            let key = c.to_toml();
            let (t, s) = match cache.get(&key) {
                Some(&v) => v,
                None => {
                    let v = final_accuracies(c)?;
                    cache.insert(key, v);
                    v
                }
            };
            progress(&table, &row, seed, t);
            out.target.push(t);
            out.source.push(s);
        }
        rows.push(out);
    }
    Ok(rows)
}

/// Tab-separated table: one header line, then one line per row with mean
/// and spread of target and source accuracy followed by per-seed values.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let seeds = rows.first().map_or(&[][..], |r| &r.seeds[..]);
    let mut out = String::from("table\trow\ttarget_mean\ttarget_spread\tsource_mean\tsource_spread");
    for s in seeds {
        out.push_str(&format!("\ttarget_seed{s}"));
    }
    out.push('\n');
    for r in rows {
        let (tm, ts) = mean_spread(&r.target);
        let (sm, ss) = mean_spread(&r.source);
        out.push_str(&format!("{}\t{}\t{tm:.4}\t{ts:.4}\t{sm:.4}\t{ss:.4}", r.table, r.row));
        for t in &r.target {
            out.push_str(&format!("\t{t:.4}"));
        }
        out.push('\n');
    }
    out
}

/// Confusion matrix as tab-separated counts, rows indexed by true class.
pub fn confusion_table(r: &EvalReport) -> String {
    let k = r.confusion.len();
    let mut out = String::from("true\\pred");
    for j in 0..k {
        out.push_str(&format!("\t{j}"));
    }
    out.push_str("\tper_class_accuracy\n");
    for (i, row) in r.confusion.iter().enumerate() {
        out.push_str(&i.to_string());
        for c in row {
            out.push_str(&format!("\t{c}"));
        }
        out.push_str(&format!("\t{:.4}\n", r.per_class_accuracy[i]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_of_constant_is_zero() {
        assert_eq!(mean_spread(&[0.5, 0.5, 0.5]), (0.5, 0.0));
        let (m, s) = mean_spread(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15 && (s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn table_has_one_line_per_row() {
        let rows = vec![AblationRow {
            table: "components".into(),
            row: "CoOp".into(),
            seeds: vec![0, 1],
            target: vec![0.5, 0.7],
            source: vec![0.9, 0.9],
        }];
        let t = ablation_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|l| l.split('\t').count() == 8));
        assert!(lines[1].starts_with("components\tCoOp\t0.6000\t0.1414"));
    }
}

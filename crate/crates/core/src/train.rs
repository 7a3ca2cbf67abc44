//! Training loops for single-source adaptation, multi-source adaptation and
//! domain generalization.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{Mode, RunConfig};
use crate::container::Container;
use crate::data::{
    flip_horizontal, strong_augment, GeneratedData, HeldOutLabels, Image, LabeledDomain, UnlabeledDomain,
};
use crate::error::{DampError, Result};
use crate::losses::{cross_entropy_tape, l_idc_tape, l_im_tape, ClassProbabilities, LossComponents};
use crate::model::{accuracy, confusion_matrix, ImageEmbeddings, Model};
use crate::optim::{cosine_lr, OptimizerState};
use crate::params::{Bound, ParamStore};
use crate::pseudo::{alpha_schedule, label_batch, PseudoLabelRecord};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const CHECKPOINT_VERSION: usize = 1;

/// Views of one labeled domain batch.
#[derive(Debug, Clone)]
pub struct SourceViews<T: Scalar> {
    pub name: String,
    pub weak: ImageEmbeddings<T>,
    pub strong: Option<ImageEmbeddings<T>>,
    pub labels: Vec<usize>,
}

/// Views of the target batch. Carries pseudo-labels only.
#[derive(Debug, Clone)]
pub struct TargetViews<T: Scalar> {
    pub weak: ImageEmbeddings<T>,
    pub strong: Option<ImageEmbeddings<T>>,
    pub pseudo: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct StepBatch<T: Scalar> {
    pub sources: Vec<SourceViews<T>>,
    pub target: Option<TargetViews<T>>,
}

/// Which loss terms a step includes, and their weights.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub l_sc: bool,
    pub l_idc: bool,
    pub l_im: bool,
    pub lambda_c: f64,
    pub lambda_i: f64,
    pub idc_source_weight: f64,
    pub idc_target_weight: f64,
    pub threshold: f64,
}

impl Objective {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let dg = cfg.mode == Mode::Dg;
        Self {
            l_sc: cfg.ablation.l_sc,
            l_idc: cfg.ablation.l_idc,
            l_im: cfg.ablation.l_im && !dg,
            lambda_c: cfg.losses.lambda_c,
            lambda_i: cfg.losses.lambda_i,
            idc_source_weight: cfg.losses.idc_source_weight,
            idc_target_weight: cfg.losses.idc_target_weight,
            threshold: cfg.threshold,
        }
    }
}

/// Per-source-domain loss terms of one step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainLosses {
    pub domain: String,
    pub sup: f64,
    pub sc: f64,
    pub idc: f64,
}

/// Tape handles of every loss term of one step.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub sup_source: Vec<Var>,
    pub sup_target: Option<Var>,
    pub sc_source: Vec<Var>,
    pub sc_target: Option<Var>,
    pub idc_source: Vec<Var>,
    pub idc_target: Option<Var>,
    pub im: Option<Var>,
    /// `L_sup + L_sc + lambda_c * L_idc + lambda_i * L_im`.
    pub total: Var,
    /// Target rows that passed the confidence gate.
    pub gate: Vec<bool>,
    /// Row ranges of every domain batch inside the joint forward pass.
    pub segments: Vec<(usize, usize)>,
    pub trainable: Bound,
}

impl LossNodes {
    pub fn sup(&self) -> Vec<Var> {
        self.sup_source.iter().copied().chain(self.sup_target).collect()
    }

    pub fn sc(&self) -> Vec<Var> {
        self.sc_source.iter().copied().chain(self.sc_target).collect()
    }

    pub fn idc(&self) -> Vec<Var> {
        self.idc_source.iter().copied().chain(self.idc_target).collect()
    }

    pub fn components<T: Scalar>(&self, tape: &Tape<T>) -> LossComponents {
        let sum = |vs: &[Var]| vs.iter().map(|&v| tape.scalar_value(v).as_f64()).sum::<f64>();
        let one = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar_value(v).as_f64());
        LossComponents {
            sup_source: sum(&self.sup_source),
            sup_target: one(self.sup_target),
            sc_source: sum(&self.sc_source),
            sc_target: one(self.sc_target),
            idc_source: sum(&self.idc_source),
            idc_target: one(self.idc_target),
            im: one(self.im),
        }
    }
}

fn check_labels(labels: &[usize], classes: usize, what: &str) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(DampError::OutOfRange {
            what: if what == "source" { "source label" } else { "pseudo-label" },
            index: bad,
            len: classes,
        });
    }
    Ok(())
}

/// Builds every loss term of one step on `tape`. All views run through one
/// joint forward pass. `gate`, when given, replaces the confidence test on
/// the target rows.
pub fn build_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    batch: &StepBatch<T>,
    obj: &Objective,
    gate: Option<&[bool]>,
) -> Result<LossNodes> {
    if batch.sources.is_empty() {
        return Err(DampError::Invalid("a step needs at least one source batch".into()));
    }
    let k = model.classes();
    let mut parts: Vec<&ImageEmbeddings<T>> = Vec::new();
    let mut offset = 0;
    let mut push = |e: &ImageEmbeddings<T>| -> (usize, usize) {
        let seg = (offset, offset + e.len());
        offset += e.len();
        seg
    };
    let mut weak_src = Vec::new();
    for s in &batch.sources {
        if s.weak.is_empty() || s.labels.len() != s.weak.len() {
            return Err(DampError::Invalid(format!(
                "source batch '{}' has {} images and {} labels",
                s.name,
                s.weak.len(),
                s.labels.len()
            )));
        }
        check_labels(&s.labels, k, "source")?;
        weak_src.push(push(&s.weak));
        parts.push(&s.weak);
    }
    let weak_tgt = match &batch.target {
        Some(t) => {
            if t.weak.is_empty() || t.pseudo.len() != t.weak.len() {
                return Err(DampError::Invalid("target batch and pseudo-labels disagree in length".into()));
            }
            check_labels(&t.pseudo, k, "target")?;
            let seg = push(&t.weak);
            parts.push(&t.weak);
            Some(seg)
        }
        None => None,
    };
    let mut strong_src = Vec::new();
    let mut strong_tgt = None;
    if obj.l_sc {
        for s in &batch.sources {
            let st = s
                .strong
                .as_ref()
                .ok_or_else(|| DampError::Invalid(format!("source batch '{}' lacks strong views", s.name)))?;
            if st.len() != s.weak.len() {
                return Err(DampError::Invalid("strong and weak views differ in count".into()));
            }
            strong_src.push(push(st));
            parts.push(st);
        }
        if let Some(t) = &batch.target {
            let st = t
                .strong
                .as_ref()
                .ok_or_else(|| DampError::Invalid("target batch lacks strong views".into()))?;
            if st.len() != t.weak.len() {
                return Err(DampError::Invalid("strong and weak views differ in count".into()));
            }
            strong_tgt = Some(push(st));
            parts.push(st);
        }
    }
    let images = ImageEmbeddings::concat(&parts)?;
    let nodes = model.forward_tape(tape, &images, true)?;
    let lp = nodes.head.log_probs;

    let gate: Vec<bool> = match (&batch.target, weak_tgt) {
        (Some(t), Some((start, _))) => match gate {
            Some(g) => {
                if g.len() != t.pseudo.len() {
                    return Err(DampError::Invalid("gate mask length differs from target batch".into()));
                }
                g.to_vec()
            }
            None => {
                let values = tape.value(lp);
                let thr = T::of(obj.threshold);
                t.pseudo
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| values.get(start + i, y).exp() >= thr)
                    .collect()
            }
        },
        _ => Vec::new(),
    };

    let mut terms: Vec<(Var, T)> = Vec::new();
    let mut sup_source = Vec::new();
    for (s, &(start, end)) in batch.sources.iter().zip(&weak_src) {
        let entries: Vec<(usize, usize)> = s.labels.iter().enumerate().map(|(i, &y)| (start + i, y)).collect();
        let v = cross_entropy_tape(tape, lp, &entries, end - start)?;
        terms.push((v, T::one()));
        sup_source.push(v);
    }
    let gated = |seg: (usize, usize), pseudo: &[usize]| -> Vec<(usize, usize)> {
        pseudo
            .iter()
            .enumerate()
            .filter(|(i, _)| gate[*i])
            .map(|(i, &y)| (seg.0 + i, y))
            .collect()
    };
    let mut sup_target = None;
    if let (Some(t), Some(seg)) = (&batch.target, weak_tgt) {
        let v = cross_entropy_tape(tape, lp, &gated(seg, &t.pseudo), seg.1 - seg.0)?;
        terms.push((v, T::one()));
        sup_target = Some(v);
    }
    let mut sc_source = Vec::new();
    for (s, &(start, end)) in batch.sources.iter().zip(&strong_src) {
        let entries: Vec<(usize, usize)> = s.labels.iter().enumerate().map(|(i, &y)| (start + i, y)).collect();
        let v = cross_entropy_tape(tape, lp, &entries, end - start)?;
        terms.push((v, T::one()));
        sc_source.push(v);
    }
    let mut sc_target = None;
    if let (Some(t), Some(seg)) = (&batch.target, strong_tgt) {
        let v = cross_entropy_tape(tape, lp, &gated(seg, &t.pseudo), seg.1 - seg.0)?;
        terms.push((v, T::one()));
        sc_target = Some(v);
    }
    let mut idc_source = Vec::new();
    let mut idc_target = None;
    if obj.l_idc {
        for &(start, end) in &weak_src {
            let v = l_idc_tape(tape, &nodes.head, start, end, model.tau)?;
            terms.push((v, T::of(obj.lambda_c * obj.idc_source_weight)));
            idc_source.push(v);
        }
        if let Some((start, end)) = weak_tgt {
            let v = l_idc_tape(tape, &nodes.head, start, end, model.tau)?;
            terms.push((v, T::of(obj.lambda_c * obj.idc_target_weight)));
            idc_target = Some(v);
        }
    }
    let mut im = None;
    if obj.l_im {
        if let Some((start, end)) = weak_tgt {
            let v = l_im_tape(tape, lp, start, end)?;
            terms.push((v, T::of(obj.lambda_i)));
            im = Some(v);
        }
    }
    let total = tape.weighted_sum(&terms)?;
    let mut segments = weak_src.clone();
    segments.extend(weak_tgt);
    segments.extend(strong_src);
    segments.extend(strong_tgt);
    Ok(LossNodes {
        sup_source,
        sup_target,
        sc_source,
        sc_target,
        idc_source,
        idc_target,
        im,
        total,
        gate,
        segments,
        trainable: nodes.trainable,
    })
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub components: LossComponents,
    pub total: f64,
    pub per_domain: Vec<DomainLosses>,
    pub accepted: usize,
}

/// Loss terms of a step without updating anything.
pub fn evaluate_step<T: Scalar>(model: &Model<T>, batch: &StepBatch<T>, obj: &Objective) -> Result<StepReport> {
    let mut tape = Tape::new();
    let nodes = build_loss(model, &mut tape, batch, obj, None)?;
    Ok(report(&tape, &nodes, batch))
}

fn report<T: Scalar>(tape: &Tape<T>, nodes: &LossNodes, batch: &StepBatch<T>) -> StepReport {
    let val = |v: Var| tape.scalar_value(v).as_f64();
    let per_domain = batch
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| DomainLosses {
            domain: s.name.clone(),
            sup: val(nodes.sup_source[i]),
            sc: nodes.sc_source.get(i).map_or(0.0, |&v| val(v)),
            idc: nodes.idc_source.get(i).map_or(0.0, |&v| val(v)),
        })
        .collect();
    StepReport {
        components: nodes.components(tape),
        total: val(nodes.total),
        per_domain,
        accepted: nodes.gate.iter().filter(|&&g| g).count(),
    }
}

/// Forward, backward and one Adam update of the trainable tensors.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    batch: &StepBatch<T>,
    obj: &Objective,
) -> Result<StepReport> {
    let mut tape = Tape::new();
    let nodes = build_loss(model, &mut tape, batch, obj, None)?;
    let rep = report(&tape, &nodes, batch);
    if !rep.total.is_finite() || !rep.components.is_finite() {
        let c = &rep.components;
        return Err(DampError::NonFinite(format!(
            "total={} sup_s={} sup_t={} sc_s={} sc_t={} idc_s={} idc_t={} im={}",
            rep.total, c.sup_source, c.sup_target, c.sc_source, c.sc_target, c.idc_source, c.idc_target, c.im
        )));
    }
    let mut grads = tape.backward(nodes.total)?;
    let grads: Vec<Option<Matrix<T>>> = nodes.trainable.vars().iter().map(|&v| grads.take(v)).collect();
    opt.update(&mut model.params, &grads)?;
    Ok(rep)
}

/// Mean of step reports.
fn mean_components(reports: &[StepReport]) -> (LossComponents, f64, Vec<DomainLosses>) {
    let n = reports.len().max(1) as f64;
    let mut c = LossComponents::default();
    let mut total = 0.0;
    let mut per: Vec<DomainLosses> = reports.first().map_or(Vec::new(), |r| {
        r.per_domain
            .iter()
            .map(|d| DomainLosses {
                domain: d.domain.clone(),
                ..DomainLosses::default()
            })
            .collect()
    });
    for r in reports {
        let x = &r.components;
        c.sup_source += x.sup_source / n;
        c.sup_target += x.sup_target / n;
        c.sc_source += x.sc_source / n;
        c.sc_target += x.sc_target / n;
        c.idc_source += x.idc_source / n;
        c.idc_target += x.idc_target / n;
        c.im += x.im / n;
        total += r.total / n;
        for (acc, d) in per.iter_mut().zip(&r.per_domain) {
            acc.sup += d.sup / n;
            acc.sc += d.sc / n;
            acc.idc += d.idc / n;
        }
    }
    (c, total, per)
}

/// Accuracy of naive, model and ensemble pseudo-labels against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub acceptance_rate: f64,
    pub naive_accuracy: f64,
    pub model_accuracy: f64,
    pub ensemble_accuracy: f64,
    pub accepted_accuracy: Option<f64>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub steps: usize,
    pub losses: LossComponents,
    pub total: f64,
    pub per_domain: Vec<DomainLosses>,
    pub source_accuracy: f64,
    pub target_accuracy: Option<f64>,
    pub pseudo: Option<PseudoStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain: String,
    pub samples: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn new<T: Scalar>(domain: &str, probs: &[ClassProbabilities<T>], labels: &[usize], classes: usize) -> Self {
        let confusion = confusion_matrix(probs, labels, classes);
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[k] as f64 / n as f64
                }
            })
            .collect();
        Self {
            domain: domain.to_string(),
            samples: labels.len(),
            accuracy: accuracy(probs, labels),
            per_class_accuracy,
            confusion,
        }
    }
}

/// Raw and flipped embeddings of every sample of a domain.
#[derive(Debug, Clone)]
struct DomainCache<T: Scalar> {
    raw: ImageEmbeddings<T>,
    flipped: ImageEmbeddings<T>,
}

impl<T: Scalar> DomainCache<T> {
    fn new(model: &Model<T>, images: &[Image]) -> Result<Self> {
        let refs: Vec<&Image> = images.iter().collect();
        let flipped: Vec<Image> = images.iter().map(flip_horizontal).collect();
        let frefs: Vec<&Image> = flipped.iter().collect();
        Ok(Self {
            raw: embed_all(model, &refs)?,
            flipped: embed_all(model, &frefs)?,
        })
    }

    fn len(&self) -> usize {
        self.raw.len()
    }

    /// Rows `idx`, taken from the flipped set where `flip[i]`.
    fn gather(&self, idx: &[usize], flip: &[bool]) -> ImageEmbeddings<T> {
        let hw = self.raw.spatial;
        let d = self.raw.v.cols();
        let mut v = Vec::with_capacity(idx.len() * d);
        let mut vt = Vec::with_capacity(idx.len() * hw * d);
        for (&i, &f) in idx.iter().zip(flip) {
            let src = if f { &self.flipped } else { &self.raw };
            v.extend_from_slice(src.v.row(i));
            for r in i * hw..(i + 1) * hw {
                vt.extend_from_slice(src.v_tilde.row(r));
            }
        }
        ImageEmbeddings {
            v: Matrix::from_vec(idx.len(), d, v).expect("gathered rows"),
            v_tilde: Matrix::from_vec(idx.len() * hw, d, vt).expect("gathered rows"),
            spatial: hw,
        }
    }
}

fn embed_all<T: Scalar>(model: &Model<T>, images: &[&Image]) -> Result<ImageEmbeddings<T>> {
    let parts: Vec<ImageEmbeddings<T>> = images
        .chunks(64)
        .map(|c| model.embed_images(c))
        .collect::<Result<_>>()?;
    if parts.is_empty() {
        return model.embed_images(&[]);
    }
    let refs: Vec<&ImageEmbeddings<T>> = parts.iter().collect();
    ImageEmbeddings::concat(&refs)
}

/// Datasets split by what training may see.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub sources: Vec<LabeledDomain>,
    pub target: Option<UnlabeledDomain>,
}

/// Ground truth used only by evaluation.
#[derive(Debug, Clone)]
pub struct EvaluationData {
    pub source_holdout: Vec<LabeledDomain>,
    pub target_labels: Option<HeldOutLabels>,
    pub unseen: Option<(UnlabeledDomain, HeldOutLabels)>,
}

pub fn split_data(data: GeneratedData) -> (TrainingData, EvaluationData) {
    let (target, target_labels) = match data.target {
        Some((d, l)) => (Some(d), Some(l)),
        None => (None, None),
    };
    (
        TrainingData {
            sources: data.sources,
            target,
        },
        EvaluationData {
            source_holdout: data.source_holdout,
            target_labels,
            unseen: data.unseen,
        },
    )
}

/// Full training state: model, optimizer, epoch counter and history.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub cfg: RunConfig,
    pub model: Model<T>,
    pub opt: OptimizerState<T>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    data: TrainingData,
    eval: EvaluationData,
    sources: Vec<DomainCache<T>>,
    target: Option<DomainCache<T>>,
    holdout: Vec<ImageEmbeddings<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: RunConfig, data: TrainingData, eval: EvaluationData) -> Result<Self> {
        let model = Model::new(&cfg)?;
        Self::with_model(cfg, model, data, eval)
    }

    pub fn with_model(cfg: RunConfig, model: Model<T>, data: TrainingData, eval: EvaluationData) -> Result<Self> {
        cfg.validate()?;
        if data.sources.is_empty() {
            return Err(DampError::Config("training needs at least one source domain".into()));
        }
        match cfg.mode {
            Mode::Dg => {
                if data.target.is_some() {
                    return Err(DampError::Config("dg mode must not be given target data".into()));
                }
            }
            Mode::Uda | Mode::Msda => {
                if data.target.is_none() {
                    return Err(DampError::Config("adaptation needs target images".into()));
                }
            }
        }
        let sources = data
            .sources
            .iter()
            .map(|d| DomainCache::new(&model, &d.images))
            .collect::<Result<Vec<_>>>()?;
        let target = match &data.target {
            Some(t) => Some(DomainCache::new(&model, t.images())?),
            None => None,
        };
        let holdout = eval
            .source_holdout
            .iter()
            .map(|d| embed_all(&model, &d.images.iter().collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let opt = OptimizerState::new(&model.params, cfg.learning_rate);
        Ok(Self {
            cfg,
            model,
            opt,
            epoch: 0,
            history: Vec::new(),
            data,
            eval,
            sources,
            target,
            holdout,
        })
    }

    pub fn objective(&self) -> Objective {
        Objective::from_config(&self.cfg)
    }

    /// Steps per epoch: configured, or one pass over the smallest domain.
    pub fn steps_per_epoch(&self) -> usize {
        if let Some(n) = self.cfg.iterations_per_epoch {
            return n;
        }
        let smallest = self
            .sources
            .iter()
            .map(DomainCache::len)
            .chain(self.target.as_ref().map(DomainCache::len))
            .min()
            .unwrap_or(1);
        smallest.div_ceil(self.cfg.batch_size).max(1)
    }

    /// Pseudo-labels for every target sample at the given `alpha`.
    pub fn pseudo_labels(&self, alpha: f64) -> Result<Vec<PseudoLabelRecord<T>>> {
        let Some(t) = &self.target else {
            return Ok(Vec::new());
        };
        let naive = self.model.zero_shot_embedded(&t.raw)?;
        let model = self.model.predict_embedded(&t.raw)?;
        label_batch(naive, model, T::of(alpha), T::of(self.cfg.threshold))
    }

    /// Runs one epoch and appends its metrics.
    pub fn run_epoch(&mut self) -> Result<&EpochMetrics> {
        let e = self.epoch;
        let total_epochs = self.cfg.epochs;
        let lr = cosine_lr(self.cfg.learning_rate, e, total_epochs);
        let alpha = alpha_schedule(self.cfg.alpha_schedule, e, total_epochs)?;
        self.opt.lr = lr;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(e as u64 + 1);

        let records = self.pseudo_labels(alpha)?;
        let pseudo: Vec<usize> = records.iter().map(|r| r.hard_label).collect();
        let obj = self.objective();
        let steps = self.steps_per_epoch();
        let b = self.cfg.batch_size;

        let mut orders: Vec<Vec<usize>> = self
            .sources
            .iter()
            .map(|c| (0..c.len()).collect())
            .collect();
        let mut target_order: Vec<usize> = self.target.as_ref().map_or(Vec::new(), |c| (0..c.len()).collect());
        for o in orders.iter_mut() {
            o.shuffle(&mut rng);
        }
        target_order.shuffle(&mut rng);

        let mut reports = Vec::with_capacity(steps);
        for i in 0..steps {
            let mut views = Vec::with_capacity(self.sources.len());
            for (d, cache) in self.sources.iter().enumerate() {
                let idx = cyclic(&orders[d], i * b, b);
                let domain = &self.data.sources[d];
                let flips: Vec<bool> = idx.iter().map(|_| rng.random_bool(0.5)).collect();
                let strong = if obj.l_sc {
                    let imgs: Vec<Image> = idx
                        .iter()
                        .map(|&j| strong_augment(&domain.images[j], &self.cfg.augment, &mut rng))
                        .collect();
                    Some(embed_all(&self.model, &imgs.iter().collect::<Vec<_>>())?)
                } else {
                    None
                };
                views.push(SourceViews {
                    name: domain.name.clone(),
                    weak: cache.gather(&idx, &flips),
                    strong,
                    labels: idx.iter().map(|&j| domain.labels[j]).collect(),
                });
            }
            let target = match (&self.target, &self.data.target) {
                (Some(cache), Some(domain)) => {
                    let idx = cyclic(&target_order, i * b, b);
                    let flips: Vec<bool> = idx.iter().map(|_| rng.random_bool(0.5)).collect();
                    let strong = if obj.l_sc {
                        let all = domain.images();
                        let imgs: Vec<Image> = idx
                            .iter()
                            .map(|&j| strong_augment(&all[j], &self.cfg.augment, &mut rng))
                            .collect();
                        Some(embed_all(&self.model, &imgs.iter().collect::<Vec<_>>())?)
                    } else {
                        None
                    };
                    Some(TargetViews {
                        weak: cache.gather(&idx, &flips),
                        strong,
                        pseudo: idx.iter().map(|&j| pseudo[j]).collect(),
                    })
                }
                _ => None,
            };
            let batch = StepBatch { sources: views, target };
            reports.push(train_step(&mut self.model, &mut self.opt, &batch, &obj)?);
        }

        let (losses, total, per_domain) = mean_components(&reports);
        let source_accuracy = self.source_accuracy()?;
        let (target_accuracy, pseudo_stats) = match &self.eval.target_labels {
            Some(labels) if self.target.is_some() => {
                let acc = self.target_report()?.map(|r| r.accuracy);
                (acc, Some(pseudo_stats(&records, &labels.0)))
            }
            _ => (None, None),
        };
        self.epoch += 1;
        self.history.push(EpochMetrics {
            epoch: self.epoch,
            lr,
            alpha,
            steps,
            losses,
            total,
            per_domain,
            source_accuracy,
            target_accuracy,
            pseudo: pseudo_stats,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// Runs the remaining epochs. `on_epoch` sees each new metrics record.
    pub fn train(&mut self, mut on_epoch: impl FnMut(&Self, &EpochMetrics) -> Result<()>) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let m = self.run_epoch()?.clone();
            on_epoch(self, &m)?;
        }
        Ok(())
    }

    /// Mean accuracy over the held-out source samples.
    pub fn source_accuracy(&self) -> Result<f64> {
        if self.holdout.is_empty() {
            return Ok(0.0);
        }
        let mut sum = 0.0;
        for (emb, d) in self.holdout.iter().zip(&self.eval.source_holdout) {
            sum += accuracy(&self.model.predict_embedded(emb)?, &d.labels);
        }
        Ok(sum / self.holdout.len() as f64)
    }

    pub fn source_reports(&self) -> Result<Vec<EvalReport>> {
        self.holdout
            .iter()
            .zip(&self.eval.source_holdout)
            .map(|(emb, d)| {
                let probs = self.model.predict_embedded(emb)?;
                Ok(EvalReport::new(&d.name, &probs, &d.labels, self.model.classes()))
            })
            .collect()
    }

    pub fn target_report(&self) -> Result<Option<EvalReport>> {
        match (&self.target, &self.eval.target_labels, &self.data.target) {
            (Some(cache), Some(labels), Some(d)) => {
                let probs = self.model.predict_embedded(&cache.raw)?;
                Ok(Some(EvalReport::new(d.name(), &probs, &labels.0, self.model.classes())))
            }
            _ => Ok(None),
        }
    }

    /// Zero-shot naive-prompt accuracy on the target.
    pub fn target_zero_shot(&self) -> Result<Option<EvalReport>> {
        match (&self.target, &self.eval.target_labels, &self.data.target) {
            (Some(cache), Some(labels), Some(d)) => {
                let probs = self.model.zero_shot_embedded(&cache.raw)?;
                Ok(Some(EvalReport::new(d.name(), &probs, &labels.0, self.model.classes())))
            }
            _ => Ok(None),
        }
    }

    /// Evaluates the held-out unseen domain. Reads its images for the first
    /// time; call only after training.
    pub fn evaluate_unseen(&self) -> Result<Option<EvalReport>> {
        match &self.eval.unseen {
            Some((d, labels)) => {
                let probs = self.model.predict(&d.images().iter().collect::<Vec<_>>())?;
                Ok(Some(EvalReport::new(d.name(), &probs, &labels.0, self.model.classes())))
            }
            None => Ok(None),
        }
    }

    pub fn training_data(&self) -> &TrainingData {
        &self.data
    }

    pub fn evaluation_data(&self) -> &EvaluationData {
        &self.eval
    }

    /// Trainable tensors, Adam moments and counters.
    pub fn checkpoint(&self) -> Container {
        let meta = serde_json::json!({
            "version": CHECKPOINT_VERSION,
            "epoch": self.epoch,
            "step": self.opt.step,
            "seed": self.cfg.seed,
            "lr": self.opt.lr,
            "config": self.cfg.to_json(),
        });
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        for (i, (_, name, value)) in self.model.params.iter().enumerate() {
            c.push(format!("param.{name}"), value.cast());
            c.push(format!("adam.m.{name}"), self.opt.m[i].cast());
            c.push(format!("adam.v.{name}"), self.opt.v[i].cast());
        }
        c
    }

    /// Restores trainable tensors, optimizer state and the epoch counter.
    /// History is not part of the checkpoint.
    pub fn restore(&mut self, c: &Container) -> Result<()> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let version = c.meta_usize("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(DampError::Format(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let seed = c.meta_usize("seed")? as u64;
        if seed != self.cfg.seed {
            return Err(DampError::Format(format!(
                "checkpoint seed {seed} differs from configured seed {}",
                self.cfg.seed
            )));
        }
        let epoch = c.meta_usize("epoch")?;
        if epoch > self.cfg.epochs {
            return Err(DampError::Format(format!(
                "checkpoint epoch {epoch} exceeds configured {} epochs",
                self.cfg.epochs
            )));
        }
        let params = load_params(&self.model.params, c)?;
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (_, name, value) in self.model.params.iter() {
            for (prefix, out) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                let t = c.get(&format!("{prefix}{name}"))?;
                if t.shape() != value.shape() {
                    return Err(DampError::Format(format!("{prefix}{name} has shape {:?}", t.shape())));
                }
                out.push(t.cast());
            }
        }
        self.model.params.load_from(&params)?;
        self.opt.m = m;
        self.opt.v = v;
        self.opt.step = c.meta_usize("step")? as u64;
        self.opt.lr = c.meta.get("lr").and_then(|x| x.as_f64()).unwrap_or(self.cfg.learning_rate);
        self.epoch = epoch;
        Ok(())
    }
}

/// Trainable tensors named `param.*` in a checkpoint, matched to `template`.
pub fn load_params<T: Scalar>(template: &ParamStore<T>, c: &Container) -> Result<ParamStore<T>> {
    let mut out = template.clone();
    for (id, name, value) in template.iter() {
        let t = c.get(&format!("param.{name}"))?;
        if t.shape() != value.shape() {
            return Err(DampError::Format(format!(
                "param.{name} has shape {:?}, model expects {:?}",
                t.shape(),
                value.shape()
            )));
        }
        *out.get_mut(id) = t.cast();
    }
    let expected = template.len();
    let found = c.tensors.iter().filter(|(n, _)| n.starts_with("param.")).count();
    if found != expected {
        return Err(DampError::Format(format!(
            "checkpoint holds {found} trainable tensors, model has {expected}"
        )));
    }
    Ok(out)
}

fn cyclic(order: &[usize], start: usize, len: usize) -> Vec<usize> {
    (0..len).map(|j| order[(start + j) % order.len()]).collect()
}

fn pseudo_stats<T: Scalar>(records: &[PseudoLabelRecord<T>], labels: &[usize]) -> PseudoStats {
    let n = records.len().max(1) as f64;
    let frac = |f: &dyn Fn(&PseudoLabelRecord<T>, usize) -> bool| {
        records.iter().zip(labels).filter(|(r, &y)| f(r, y)).count() as f64 / n
    };
    let accepted = records.iter().filter(|r| r.accepted).count();
    let accepted_correct = records
        .iter()
        .zip(labels)
        .filter(|(r, &y)| r.accepted && r.hard_label == y)
        .count();
    PseudoStats {
        acceptance_rate: accepted as f64 / n,
        naive_accuracy: frac(&|r, y| r.naive_soft.argmax() == y),
        model_accuracy: frac(&|r, y| r.model_soft.argmax() == y),
        ensemble_accuracy: frac(&|r, y| r.hard_label == y),
        accepted_accuracy: (accepted > 0).then(|| accepted_correct as f64 / accepted as f64),
    }
}

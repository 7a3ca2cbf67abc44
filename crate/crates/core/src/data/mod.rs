//! Synthetic domain-shifted datasets, augmentations and data containers.
//!
//! Every class owns a fixed base pattern (a sum of oriented sinusoids per
//! channel). A domain renders each pattern through its own shift descriptor
//! (rotation of the sampling grid, per-channel gain, additive ramp, extra
//! noise), so all domains share the label-conditional concept while their
//! input marginals differ.

pub mod augment;
pub mod embeddings;

use std::f64::consts::PI;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::error::{DampError, Result};
use crate::tensor::Matrix;

pub use augment::{flip_horizontal, strong_augment, weak_augment, AugmentViews, StrongAugConfig, StrongOp};
pub use embeddings::{ingest_embeddings, EmbeddingArchive, EmbeddingRecord, PromptedEmbedding};

/// Height x width x channels image, channel-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, channels: usize, v: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Fixed transform applied to every sample of a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftDescriptor {
    pub rotation_deg: f64,
    /// Per-channel multiplicative gain; empty means unit gain.
    pub channel_gain: Vec<f64>,
    /// Amplitude of an additive diagonal ramp.
    pub bias_field: f64,
    /// Extra Gaussian pixel noise.
    pub noise: f64,
}

impl Default for ShiftDescriptor {
    fn default() -> Self {
        Self::identity()
    }
}

impl ShiftDescriptor {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            channel_gain: Vec::new(),
            bias_field: 0.0,
            noise: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.channel_gain.iter().all(|&g| g == 1.0)
            && self.bias_field == 0.0
            && self.noise == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub samples_per_class: usize,
    pub shift: ShiftDescriptor,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            name: "domain".into(),
            samples_per_class: 40,
            shift: ShiftDescriptor::identity(),
        }
    }
}

/// Complete description of a synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub image_size: [usize; 2],
    pub channels: usize,
    pub seed: u64,
    /// Sinusoid components per class and channel.
    pub components: usize,
    /// Per-instance pixel noise standard deviation.
    pub instance_noise: f64,
    /// Per-instance phase jitter (radians, standard deviation).
    pub phase_jitter: f64,
    pub sources: Vec<DomainSpec>,
    pub target: Option<DomainSpec>,
    /// Held-out domain for generalization runs; never seen during training.
    pub unseen: Option<DomainSpec>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 6,
            image_size: [16, 16],
            channels: 3,
            seed: 0,
            components: 3,
            instance_noise: 0.05,
            phase_jitter: 0.3,
            sources: vec![DomainSpec {
                name: "source".into(),
                ..DomainSpec::default()
            }],
            target: Some(DomainSpec {
                name: "target".into(),
                samples_per_class: 40,
                shift: ShiftDescriptor {
                    rotation_deg: 10.0,
                    channel_gain: vec![1.05, 0.95, 1.0],
                    bias_field: 0.0,
                    noise: 0.0,
                },
            }),
            unseen: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DampError::Config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.image_size.contains(&0) || self.channels == 0 {
            return bad("image size and channels must be positive".into());
        }
        if self.sources.is_empty() {
            return bad("at least one source domain is required".into());
        }
        for d in self.sources.iter().chain(&self.target).chain(&self.unseen) {
            if d.samples_per_class == 0 {
                return bad(format!("domain '{}' has zero samples per class", d.name));
            }
            if !d.shift.channel_gain.is_empty() && d.shift.channel_gain.len() != self.channels {
                return bad(format!(
                    "domain '{}' has {} channel gains for {} channels",
                    d.name,
                    d.shift.channel_gain.len(),
                    self.channels
                ));
            }
            if d.shift.noise < 0.0 {
                return bad(format!("domain '{}' has negative noise", d.name));
            }
        }
        if self.instance_noise < 0.0 || self.phase_jitter < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }
}

/// Instrumented read counter shared by clones of a domain.
#[derive(Debug, Clone, Default)]
pub struct AccessCounter(Arc<AtomicUsize>);

impl AccessCounter {
    pub fn count(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    fn hit(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone)]
pub struct LabeledDomain {
    pub name: String,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl LabeledDomain {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Images without labels. Every read of the image list is counted.
#[derive(Debug, Clone)]
pub struct UnlabeledDomain {
    name: String,
    images: Vec<Image>,
    reads: AccessCounter,
}

impl UnlabeledDomain {
    pub fn new(name: impl Into<String>, images: Vec<Image>) -> Self {
        Self {
            name: name.into(),
            images,
            reads: AccessCounter::default(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &[Image] {
        self.reads.hit();
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn access_counter(&self) -> AccessCounter {
        self.reads.clone()
    }
}

/// Ground truth for an unlabeled domain, kept apart from the images.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOutLabels(pub Vec<usize>);

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub classes: usize,
    pub sources: Vec<LabeledDomain>,
    /// Fresh samples from each source distribution, for evaluation only.
    pub source_holdout: Vec<LabeledDomain>,
    pub target: Option<(UnlabeledDomain, HeldOutLabels)>,
    pub unseen: Option<(UnlabeledDomain, HeldOutLabels)>,
}

#[derive(Debug, Clone)]
struct Component {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

/// Per-class, per-channel sinusoid parameters.
#[derive(Debug, Clone)]
struct PatternBank {
    patterns: Vec<Vec<Vec<Component>>>,
}

impl PatternBank {
    fn new(spec: &DatasetSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let patterns = (0..spec.classes)
            .map(|_| {
                (0..spec.channels)
                    .map(|_| {
                        (0..spec.components)
                            .map(|_| {
                                let freq = rng.random_range(1.0..3.0);
                                let theta = rng.random_range(0.0..PI);
                                Component {
                                    fx: freq * theta.cos(),
                                    fy: freq * theta.sin(),
                                    phase: rng.random_range(0.0..2.0 * PI),
                                    amp: rng.random_range(0.5..1.0),
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { patterns }
    }
}

fn render(
    spec: &DatasetSpec,
    bank: &PatternBank,
    class: usize,
    shift: &ShiftDescriptor,
    rng: &mut ChaCha8Rng,
) -> Image {
    let [h, w] = spec.image_size;
    let jitter = Normal::new(0.0, spec.phase_jitter.max(0.0)).expect("valid std");
    let pixel_noise = Normal::new(0.0, spec.instance_noise.max(0.0)).expect("valid std");
    let domain_noise = Normal::new(0.0, shift.noise.max(0.0)).expect("valid std");
    let phases: Vec<Vec<f64>> = bank.patterns[class]
        .iter()
        .map(|comps| comps.iter().map(|c| c.phase + jitter.sample(rng)).collect())
        .collect();
    let (sin_t, cos_t) = shift.rotation_deg.to_radians().sin_cos();
    let norm = spec.components.max(1) as f64;
    let mut img = Image::filled(h, w, spec.channels, 0.0);
    for y in 0..h {
        for x in 0..w {
            let u0 = (x as f64 + 0.5) / w as f64 - 0.5;
            let v0 = (y as f64 + 0.5) / h as f64 - 0.5;
            let u = cos_t * u0 - sin_t * v0;
            let v = sin_t * u0 + cos_t * v0;
            for c in 0..spec.channels {
                let f: f64 = bank.patterns[class][c]
                    .iter()
                    .zip(&phases[c])
                    .map(|(comp, &ph)| comp.amp * (2.0 * PI * (comp.fx * u + comp.fy * v) + ph).sin())
                    .sum();
                let mut val = 0.5 + 0.4 * f / norm;
                val *= shift.channel_gain.get(c).copied().unwrap_or(1.0);
                val += shift.bias_field * (u0 + v0);
                val += pixel_noise.sample(rng) + domain_noise.sample(rng);
                img.set(y, x, c, val);
            }
        }
    }
    img
}

fn render_domain(spec: &DatasetSpec, bank: &PatternBank, domain: &DomainSpec, stream: u64) -> (Vec<Image>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut labels: Vec<usize> = (0..spec.classes)
        .flat_map(|k| std::iter::repeat_n(k, domain.samples_per_class))
        .collect();
    labels.shuffle(&mut rng);
    let images = labels
        .iter()
        .map(|&k| render(spec, bank, k, &domain.shift, &mut rng))
        .collect();
    (images, labels)
}

/// Renders every domain of `spec`. Pure function of the spec.
pub fn generate(spec: &DatasetSpec) -> Result<GeneratedData> {
    spec.validate()?;
    let bank = PatternBank::new(spec);
    let sources = spec
        .sources
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let (images, labels) = render_domain(spec, &bank, d, 1 + i as u64);
            LabeledDomain {
                name: d.name.clone(),
                images,
                labels,
            }
        })
        .collect();
    let source_holdout = spec
        .sources
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let (images, labels) = render_domain(spec, &bank, d, 500 + i as u64);
            LabeledDomain {
                name: format!("{}-holdout", d.name),
                images,
                labels,
            }
        })
        .collect();
    let unlabeled = |d: &DomainSpec, stream: u64| {
        let (images, labels) = render_domain(spec, &bank, d, stream);
        (UnlabeledDomain::new(d.name.clone(), images), HeldOutLabels(labels))
    };
    Ok(GeneratedData {
        classes: spec.classes,
        sources,
        source_holdout,
        target: spec.target.as_ref().map(|d| unlabeled(d, 1000)),
        unseen: spec.unseen.as_ref().map(|d| unlabeled(d, 2000)),
    })
}

/// Per-class mean images of a labeled set, flattened.
pub fn class_means(images: &[Image], labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let dim = images.first().map_or(0, |i| i.data.len());
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (img, &k) in images.iter().zip(labels) {
        counts[k] += 1;
        for (s, &x) in sums[k].iter_mut().zip(&img.data) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|x| *x /= n.max(1) as f64);
    }
    sums
}

fn images_to_matrix(images: &[Image]) -> Matrix<f64> {
    let dim = images.first().map_or(0, |i| i.data.len());
    let mut data = Vec::with_capacity(images.len() * dim);
    for img in images {
        data.extend_from_slice(&img.data);
    }
    Matrix::from_vec(images.len(), dim, data).expect("consistent image sizes")
}

fn labels_to_matrix(labels: &[usize]) -> Matrix<f64> {
    Matrix::row_vector(&labels.iter().map(|&l| l as f64).collect::<Vec<_>>())
}

/// Writes one domain as a `dataset` container.
pub fn save_domain(
    path: impl AsRef<Path>,
    name: &str,
    classes: usize,
    images: &[Image],
    labels: Option<&[usize]>,
) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| DampError::Invalid(format!("domain '{name}' is empty")))?;
    let mut c = Container::new(
        "dataset",
        json!({
            "name": name,
            "classes": classes,
            "height": first.height,
            "width": first.width,
            "channels": first.channels,
            "samples": images.len(),
            "labeled": labels.is_some(),
        }),
    );
    c.push("images", images_to_matrix(images));
    if let Some(l) = labels {
        c.push("labels", labels_to_matrix(l));
    }
    c.write(path)
}

/// Writes ground-truth labels on their own.
pub fn save_labels(path: impl AsRef<Path>, name: &str, labels: &HeldOutLabels) -> Result<()> {
    let mut c = Container::new("labels", json!({ "name": name, "samples": labels.0.len() }));
    c.push("labels", labels_to_matrix(&labels.0));
    c.write(path)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<HeldOutLabels> {
    let c = Container::read(path)?;
    c.expect_kind("labels")?;
    Ok(HeldOutLabels(matrix_to_labels(c.get("labels")?)?))
}

fn matrix_to_labels(m: &Matrix<f64>) -> Result<Vec<usize>> {
    m.as_slice()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(DampError::Format(format!("label {x} is not a class index")))
            }
        })
        .collect()
}

/// Loaded `dataset` container.
#[derive(Debug, Clone)]
pub struct StoredDomain {
    pub name: String,
    pub classes: usize,
    pub images: Vec<Image>,
    pub labels: Option<Vec<usize>>,
}

pub fn load_domain(path: impl AsRef<Path>) -> Result<StoredDomain> {
    let c = Container::read(path)?;
    c.expect_kind("dataset")?;
    let (h, w, ch) = (c.meta_usize("height")?, c.meta_usize("width")?, c.meta_usize("channels")?);
    let m = c.get("images")?;
    if m.cols() != h * w * ch {
        return Err(DampError::Format(format!(
            "image rows have {} values, header says {h}x{w}x{ch}",
            m.cols()
        )));
    }
    let images = (0..m.rows())
        .map(|r| Image {
            height: h,
            width: w,
            channels: ch,
            data: m.row(r).to_vec(),
        })
        .collect();
    let labels = match c.get("labels") {
        Ok(l) => Some(matrix_to_labels(l)?),
        Err(_) => None,
    };
    Ok(StoredDomain {
        name: c.meta.get("name").and_then(|v| v.as_str()).unwrap_or("").to_string(),
        classes: c.meta_usize("classes")?,
        images,
        labels,
    })
}

//! Frozen miniature text and vision encoders.
//!
//! Both expose the interface the prompting module consumes: a class-token
//! embedding in the joint space plus a sequence of context tokens. Weights
//! are drawn once from a seeded normal distribution (`N(0, 1/fan_in)` for
//! projections, unit-variance token embeddings, unit LayerNorm gains) and are
//! never updated. The text encoder runs on the tape so that gradients reach
//! the learnable prompt contexts through every layer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{attention_forward, AttnGroups, AttnSpec, Tape, Var};
use crate::container::Container;
use crate::data::Image;
use crate::error::{shape_err, DampError, Result};
use crate::layers::{residual_norm, FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gelu, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of the joint embedding space (and of the text transformer).
    pub joint_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Spatial size of the feature map `z`; images are four times larger per side.
    pub vision_grid: [usize; 2],
    /// Channels of `z`.
    pub vision_channels: usize,
    /// Channels after the first strided filter layer.
    pub vision_hidden: usize,
    pub vision_heads: usize,
    pub image_channels: usize,
    pub ff_mult: usize,
    /// Fixed input normalization: pixels become `(x - pixel_mean) / pixel_std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            joint_dim: 64,
            text_layers: 4,
            text_heads: 4,
            vocab_size: 64,
            max_text_len: 40,
            vision_grid: [4, 4],
            vision_channels: 32,
            vision_hidden: 16,
            vision_heads: 4,
            image_channels: 3,
            ff_mult: 4,
            pixel_mean: 0.5,
            pixel_std: 0.25,
            seed: 7,
        }
    }
}

impl EncoderConfig {
    pub fn image_size(&self) -> [usize; 2] {
        [self.vision_grid[0] * 4, self.vision_grid[1] * 4]
    }

    pub fn spatial_tokens(&self) -> usize {
        self.vision_grid[0] * self.vision_grid[1]
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(DampError::Config(m));
        if self.joint_dim == 0 || self.text_heads == 0 || self.vision_heads == 0 {
            return cfg("joint_dim and head counts must be positive".into());
        }
        if self.joint_dim % self.text_heads != 0 {
            return cfg(format!(
                "joint_dim {} not divisible by text_heads {}",
                self.joint_dim, self.text_heads
            ));
        }
        if self.joint_dim % self.vision_heads != 0 {
            return cfg(format!(
                "joint_dim {} not divisible by vision_heads {}",
                self.joint_dim, self.vision_heads
            ));
        }
        if self.vision_grid.contains(&0) || self.vision_channels == 0 || self.vision_hidden == 0 {
            return cfg("vision sizes must be positive".into());
        }
        if !(self.pixel_std > 0.0 && self.pixel_std.is_finite() && self.pixel_mean.is_finite()) {
            return cfg(format!("pixel_std {} must be positive", self.pixel_std));
        }
        if self.vocab_size < 4 || self.max_text_len == 0 || self.image_channels == 0 || self.ff_mult == 0 {
            return cfg("vocab_size >= 4 and positive text/image sizes required".into());
        }
        Ok(())
    }
}

/// Text encoder output for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedText<T: Scalar> {
    /// Last-position output of the final layer, projected.
    pub s: Vec<T>,
    /// First `N` positions of the final layer, projected (`N x D`).
    pub s_tilde: Matrix<T>,
}

/// Vision encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage<T: Scalar> {
    /// Class-token output of attention pooling.
    pub v: Vec<T>,
    /// Spatial-token outputs (`H*W x D`).
    pub v_tilde: Matrix<T>,
    /// Feature map, one row per spatial position (`H*W x C`).
    pub z: Matrix<T>,
    /// Global average of `z`.
    pub z_bar: Vec<T>,
}

/// Borrowed projection weights for [`mhsa`].
#[derive(Debug, Clone, Copy)]
pub struct MhsaWeights<'a, T: Scalar> {
    pub wq: &'a Matrix<T>,
    pub bq: &'a Matrix<T>,
    pub wk: &'a Matrix<T>,
    pub bk: &'a Matrix<T>,
    pub wv: &'a Matrix<T>,
    pub bv: &'a Matrix<T>,
    pub wo: &'a Matrix<T>,
    pub bo: &'a Matrix<T>,
    pub heads: usize,
}

impl<'a, T: Scalar> MhsaWeights<'a, T> {
    pub fn from_store(store: &'a ParamStore<T>, attn: &MultiHeadAttention) -> Self {
        Self {
            wq: store.get(attn.q.w),
            bq: store.get(attn.q.b),
            wk: store.get(attn.k.w),
            bk: store.get(attn.k.b),
            wv: store.get(attn.v.w),
            bv: store.get(attn.v.b),
            wo: store.get(attn.o.w),
            bo: store.get(attn.o.b),
            heads: attn.heads,
        }
    }
}

/// Single-head scaled dot-product attention `softmax(Q K^T / sqrt(d_k)) V`.
pub fn attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    let spec = AttnSpec {
        heads: 1,
        causal: false,
    };
    attention_forward(q, k, v, spec, &AttnGroups::single(q.rows(), k.rows())).map(|(o, _)| o)
}

/// Multi-head self-attention over one token sequence.
pub fn mhsa<T: Scalar>(tokens: &Matrix<T>, w: &MhsaWeights<'_, T>) -> Result<Matrix<T>> {
    mhsa_grouped(tokens, w, &AttnGroups::packed(&[tokens.rows()]))
}

/// Multi-head self-attention over several sequences packed row-wise.
pub fn mhsa_grouped<T: Scalar>(
    tokens: &Matrix<T>,
    w: &MhsaWeights<'_, T>,
    groups: &AttnGroups,
) -> Result<Matrix<T>> {
    if w.wq.cols() % w.heads.max(1) != 0 || w.heads == 0 {
        return Err(DampError::Config(format!(
            "attention width {} not divisible by {} heads",
            w.wq.cols(),
            w.heads
        )));
    }
    let q = tokens.matmul(w.wq)?.add_row_broadcast(w.bq)?;
    let k = tokens.matmul(w.wk)?.add_row_broadcast(w.bk)?;
    let v = tokens.matmul(w.wv)?.add_row_broadcast(w.bv)?;
    let spec = AttnSpec {
        heads: w.heads,
        causal: false,
    };
    let (mixed, _) = attention_forward(&q, &k, &v, spec, groups)?;
    mixed.matmul(w.wo)?.add_row_broadcast(w.bo)
}

/// Sinusoidal position table, `len x dim`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, dim: usize) -> Matrix<T> {
    Matrix::from_fn(len, dim, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

#[derive(Debug, Clone)]
struct TextTower {
    token_embedding: ParamId,
    layers: Vec<EncoderLayer>,
    proj: ParamId,
}

#[derive(Debug, Clone)]
struct VisionTower {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    pool: MultiHeadAttention,
}

/// One text sequence: optional learnable context rows followed by token ids.
#[derive(Debug, Clone, Copy)]
pub struct TextPrompt<'a> {
    pub context: Option<Var>,
    pub tokens: &'a [usize],
}

/// Tape nodes for a batch of encoded text sequences.
#[derive(Debug, Clone)]
pub struct TextBatch {
    /// One projected class embedding per sequence (`K x D`).
    pub s: Var,
    /// Context outputs stacked per sequence (`K*N x D`); absent without contexts.
    pub s_tilde: Option<Var>,
    pub n_ctx: usize,
}

/// The frozen text and vision encoders with their weights.
#[derive(Debug, Clone)]
pub struct Encoders<T: Scalar> {
    config: EncoderConfig,
    weights: ParamStore<T>,
    text: TextTower,
    vision: VisionTower,
    positions: Matrix<T>,
}

impl<T: Scalar> Encoders<T> {
    /// Deterministic construction from `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut w = ParamStore::new();
        let d = config.joint_dim;
        let token_embedding = w.add_normal("text.token_embedding", config.vocab_size, d, 1.0, &mut rng);
        let layers = (0..config.text_layers)
            .map(|j| {
                let name = format!("text.layer{j}");
                EncoderLayer {
                    attn: MultiHeadAttention::new(&mut w, &format!("{name}.attn"), d, d, config.text_heads, &mut rng),
                    norm1: LayerNorm::new(&mut w, &format!("{name}.norm1"), d),
                    ff: FeedForward::new(&mut w, &format!("{name}.ff"), d, d * config.ff_mult, &mut rng),
                    norm2: LayerNorm::new(&mut w, &format!("{name}.norm2"), d),
                }
            })
            .collect();
        let proj = w.add_normal("text.proj", d, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let text = TextTower {
            token_embedding,
            layers,
            proj,
        };

        let ic = config.image_channels;
        let (c1, c) = (config.vision_hidden, config.vision_channels);
        let conv1_w = w.add_normal("vision.conv1.w", 4 * ic, c1, 1.0 / ((4 * ic) as f64).sqrt(), &mut rng);
        let conv1_b = w.add_filled("vision.conv1.b", 1, c1, 0.0);
        let conv2_w = w.add_normal("vision.conv2.w", 4 * c1, c, 1.0 / ((4 * c1) as f64).sqrt(), &mut rng);
        let conv2_b = w.add_filled("vision.conv2.b", 1, c, 0.0);
        let pool = MultiHeadAttention::new(&mut w, "vision.pool", c, d, config.vision_heads, &mut rng);
        let vision = VisionTower {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            pool,
        };
        let positions = sinusoidal_positions(config.max_text_len, d);
        Ok(Self {
            config,
            weights: w,
            text,
            vision,
            positions,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.joint_dim
    }

    /// All frozen weights.
    pub fn weights(&self) -> &ParamStore<T> {
        &self.weights
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.weights.bind_frozen(tape)
    }

    /// Runs the text transformer over a batch of sequences.
    ///
    /// Context rows get positional encodings like any other position. All
    /// sequences must agree on whether (and how many) contexts they carry.
    pub fn text_forward(&self, tape: &mut Tape<T>, frozen: &Bound, prompts: &[TextPrompt<'_>]) -> Result<TextBatch> {
        if prompts.is_empty() {
            return Err(DampError::Invalid("no text sequences to encode".into()));
        }
        let n_ctx = prompts[0].context.map_or(0, |c| tape.value(c).rows());
        let d = self.dim();
        let embed = frozen.var(self.text.token_embedding);
        let mut seqs = Vec::with_capacity(prompts.len());
        let mut lens = Vec::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            let ctx_rows = p.context.map_or(0, |c| tape.value(c).rows());
            if ctx_rows != n_ctx {
                return Err(DampError::Invalid(format!(
                    "sequence {i} has {ctx_rows} context rows, expected {n_ctx}"
                )));
            }
            if let Some(c) = p.context {
                if tape.value(c).cols() != d {
                    return shape_err("encode_text", format!("context width {} vs {d}", tape.value(c).cols()));
                }
            }
            let len = n_ctx + p.tokens.len();
            if len == 0 || len > self.config.max_text_len {
                return Err(DampError::Invalid(format!(
                    "sequence {i} has length {len}, limit is {}",
                    self.config.max_text_len
                )));
            }
            if let Some(&bad) = p.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(DampError::OutOfRange {
                    what: "token",
                    index: bad,
                    len: self.config.vocab_size,
                });
            }
            let mut parts = Vec::with_capacity(2);
            if let Some(c) = p.context {
                parts.push(c);
            }
            if !p.tokens.is_empty() {
                parts.push(tape.gather_rows(embed, p.tokens)?);
            }
            let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
            let pos = tape.constant(self.positions.slice_rows(0, len));
            seqs.push(tape.add(x, pos)?);
            lens.push(len);
        }
        let mut x = tape.concat_rows(&seqs)?;
        for layer in &self.text.layers {
            let attn = layer
                .attn
                .forward(tape, frozen, x, x, false, AttnGroups::packed(&lens))?;
            let h = residual_norm(tape, frozen, &layer.norm1, x, attn)?;
            let ff = layer.ff.forward(tape, frozen, h)?;
            x = residual_norm(tape, frozen, &layer.norm2, h, ff)?;
        }
        let out = tape.matmul(x, frozen.var(self.text.proj))?;
        let mut last = Vec::with_capacity(lens.len());
        let mut ctx = Vec::with_capacity(lens.len() * n_ctx);
        let mut start = 0;
        for &len in &lens {
            last.push(start + len - 1);
            ctx.extend(start..start + n_ctx);
            start += len;
        }
        let s = tape.gather_rows(out, &last)?;
        let s_tilde = if n_ctx > 0 {
            Some(tape.gather_rows(out, &ctx)?)
        } else {
            None
        };
        Ok(TextBatch { s, s_tilde, n_ctx })
    }

    /// Value-level text encoding of one sequence.
    pub fn encode_text(&self, tokens: &[usize], context: &Matrix<T>) -> Result<EncodedText<T>> {
        let mut tape = Tape::new();
        let frozen = self.bind(&mut tape);
        let ctx = tape.constant(context.clone());
        let batch = self.text_forward(
            &mut tape,
            &frozen,
            &[TextPrompt {
                context: Some(ctx),
                tokens,
            }],
        )?;
        Ok(EncodedText {
            s: tape.value(batch.s).row(0).to_vec(),
            s_tilde: tape.value(batch.s_tilde.expect("context present")).clone(),
        })
    }

    /// Class embeddings for plain token sequences (no learnable context), `K x D`.
    pub fn encode_token_sequences(&self, sequences: &[Vec<usize>]) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let frozen = self.bind(&mut tape);
        let prompts: Vec<TextPrompt<'_>> = sequences
            .iter()
            .map(|t| TextPrompt {
                context: None,
                tokens: t,
            })
            .collect();
        let batch = self.text_forward(&mut tape, &frozen, &prompts)?;
        Ok(tape.value(batch.s).clone())
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        let [h, w] = self.config.image_size();
        if x.height != h || x.width != w || x.channels != self.config.image_channels {
            return Err(DampError::Invalid(format!(
                "image is {}x{}x{}, encoder expects {h}x{w}x{}",
                x.height, x.width, x.channels, self.config.image_channels
            )));
        }
        Ok(())
    }

    /// Feature map of one image: two stride-2, 2x2 filter layers with GELU.
    fn feature_map(&self, x: &Image) -> Result<Matrix<T>> {
        let [h, w] = self.config.image_size();
        let ic = self.config.image_channels;
        let (h1, w1) = (h / 2, w / 2);
        let (mean, inv_std) = (self.config.pixel_mean, 1.0 / self.config.pixel_std);
        let patches1 = Matrix::from_fn(h1 * w1, 4 * ic, |p, f| {
            let (py, px) = (p / w1, p % w1);
            let (dy, dx, c) = (f / (2 * ic), (f / ic) % 2, f % ic);
            T::of((x.get(2 * py + dy, 2 * px + dx, c) - mean) * inv_std)
        });
        let wt = &self.weights;
        let hidden = patches1
            .matmul(wt.get(self.vision.conv1_w))?
            .add_row_broadcast(wt.get(self.vision.conv1_b))?
            .map(gelu);
        let c1 = self.config.vision_hidden;
        let [gh, gw] = self.config.vision_grid;
        let patches2 = Matrix::from_fn(gh * gw, 4 * c1, |p, f| {
            let (qy, qx) = (p / gw, p % gw);
            let (dy, dx, c) = (f / (2 * c1), (f / c1) % 2, f % c1);
            hidden.get((2 * qy + dy) * w1 + 2 * qx + dx, c)
        });
        Ok(patches2
            .matmul(wt.get(self.vision.conv2_w))?
            .add_row_broadcast(wt.get(self.vision.conv2_b))?
            .map(gelu))
    }

    /// `[v, v_tilde] = MHSA([GAP(z), z])`.
    pub fn encode_image(&self, x: &Image) -> Result<EncodedImage<T>> {
        Ok(self.encode_images(&[x])?.pop().expect("one image"))
    }

    pub fn encode_images(&self, images: &[&Image]) -> Result<Vec<EncodedImage<T>>> {
        let hw = self.config.spatial_tokens();
        let mut maps = Vec::with_capacity(images.len());
        for x in images {
            self.check_image(x)?;
            maps.push(self.feature_map(x)?);
        }
        let means: Vec<Matrix<T>> = maps.iter().map(Matrix::mean_rows).collect();
        let mut parts: Vec<&Matrix<T>> = Vec::with_capacity(2 * maps.len());
        for (z, zb) in maps.iter().zip(&means) {
            parts.push(zb);
            parts.push(z);
        }
        let tokens = Matrix::concat_rows(&parts)?;
        let weights = MhsaWeights::from_store(&self.weights, &self.vision.pool);
        let lens = vec![hw + 1; maps.len()];
        let out = mhsa_grouped(&tokens, &weights, &AttnGroups::packed(&lens))?;
        Ok(maps
            .into_iter()
            .zip(means)
            .enumerate()
            .map(|(b, (z, z_bar))| {
                let base = b * (hw + 1);
                EncodedImage {
                    v: out.row(base).to_vec(),
                    v_tilde: out.slice_rows(base + 1, base + 1 + hw),
                    z,
                    z_bar: z_bar.into_vec(),
                }
            })
            .collect())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            "encoders",
            json!({ "config": serde_json::to_value(&self.config).expect("config serializes") }),
        );
        for (_, name, m) in self.weights.iter() {
            c.push(name, m.cast());
        }
        c
    }

    /// Rebuilds encoders from a weight container, rejecting any mismatch
    /// between the stored config and the stored tensors.
    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("encoders")?;
        let config: EncoderConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| DampError::Format("encoders container lacks config".into()))?,
        )?;
        let mut enc = Self::new(config)?;
        let mut loaded = ParamStore::new();
        for (_, name, m) in enc.weights.iter() {
            let stored = c.get(name)?;
            if stored.shape() != m.shape() {
                return Err(DampError::Format(format!(
                    "tensor {name} is {:?}, config implies {:?}",
                    stored.shape(),
                    m.shape()
                )));
            }
            loaded.add(name, stored.cast());
        }
        enc.weights.load_from(&loaded)?;
        Ok(enc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

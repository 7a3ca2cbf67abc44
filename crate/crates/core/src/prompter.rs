//! Post-model mutual prompting module `G`.
//!
//! Visual branch: the class token `v` of each image attends to the
//! class-averaged text contexts and is shifted by `gamma_v * v*`.
//! Textual branch: every class embedding `s_k` attends to the spatial tokens
//! of one image and is shifted by `gamma_s * s*_k`, giving instance-specific
//! class embeddings. Nothing inside `G` carries positional information, so
//! both branches are invariant to the order of their key tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnGroups, Tape, Var};
use crate::error::{shape_err, DampError, Result};
use crate::layers::{residual_norm, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Raw embeddings pass through.
    None,
    /// Each branch attends to its own modality's context with its own weights.
    Independent,
    /// One linear projection per direction from the other modality's pooled context.
    SimpleSynergy,
    /// Decoder cross-attention between modalities.
    CrossAttention,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::None,
        Strategy::Independent,
        Strategy::SimpleSynergy,
        Strategy::CrossAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Independent => "independent",
            Strategy::SimpleSynergy => "simple_synergy",
            Strategy::CrossAttention => "cross_attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrompterConfig {
    pub decoder_layers: usize,
    pub internal_dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub gamma_v_init: f64,
    pub gamma_s_init: f64,
    pub share_parameters: bool,
    pub strategy: Strategy,
    /// Visual prompting (`v -> v'`); set from the run's ablation switches.
    #[serde(skip)]
    pub visual_branch: bool,
    /// Instance-level textual prompting (`s_k -> s'_k`); set from the run's
    /// ablation switches.
    #[serde(skip)]
    pub textual_branch: bool,
}

impl Default for PrompterConfig {
    fn default() -> Self {
        Self {
            decoder_layers: 2,
            internal_dim: 32,
            heads: 4,
            ff_mult: 4,
            gamma_v_init: 0.1,
            gamma_s_init: 0.5,
            share_parameters: true,
            strategy: Strategy::CrossAttention,
            visual_branch: true,
            textual_branch: true,
        }
    }
}

impl PrompterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.internal_dim == 0 || self.heads == 0 || self.ff_mult == 0 {
            return Err(DampError::Config("prompter sizes must be positive".into()));
        }
        if self.internal_dim % self.heads != 0 {
            return Err(DampError::Config(format!(
                "internal_dim {} not divisible by heads {}",
                self.internal_dim, self.heads
            )));
        }
        if !(self.gamma_v_init.is_finite() && self.gamma_s_init.is_finite()) {
            return Err(DampError::Config("gamma initial values must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

/// `InProj -> Dec_1..Dec_L -> OutProj`.
#[derive(Debug, Clone)]
struct DecoderStack {
    in_proj: Linear,
    in_norm: LayerNorm,
    layers: Vec<DecoderLayer>,
    out_proj: Linear,
    out_norm: LayerNorm,
}

impl DecoderStack {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, cfg: &PrompterConfig, rng: &mut impl Rng) -> Self {
        let di = cfg.internal_dim;
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), dim, di, 1.0 / (dim as f64).sqrt(), rng);
        let in_norm = LayerNorm::new(store, &format!("{name}.in_norm"), di);
        let layers = (0..cfg.decoder_layers)
            .map(|l| {
                let n = format!("{name}.dec{l}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{n}.self_attn"), di, di, cfg.heads, rng),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), di),
                    cross_attn: MultiHeadAttention::new(store, &format!("{n}.cross_attn"), di, di, cfg.heads, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), di),
                    ff: FeedForward::new(store, &format!("{n}.ff"), di, di * cfg.ff_mult, rng),
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), di),
                }
            })
            .collect();
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), di, dim, 1.0 / (di as f64).sqrt(), rng);
        let out_norm = LayerNorm::new(store, &format!("{name}.out_norm"), dim);
        Self {
            in_proj,
            in_norm,
            layers,
            out_proj,
            out_norm,
        }
    }

    fn project_in<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.in_proj.forward(tape, p, x)?;
        self.in_norm.forward(tape, p, h)
    }

    /// Each query row is its own length-1 sequence; `groups` assigns key
    /// rows to queries for cross-attention. Keys must already be projected.
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, queries: Var, keys: Var, groups: &AttnGroups) -> Result<Var> {
        let n = tape.value(queries).rows();
        let mut x = self.project_in(tape, p, queries)?;
        let singles = AttnGroups::uniform(n, 1, 1);
        for layer in &self.layers {
            let sa = layer.self_attn.forward(tape, p, x, x, true, singles.clone())?;
            x = residual_norm(tape, p, &layer.norm1, x, sa)?;
            let ca = layer.cross_attn.forward(tape, p, x, keys, false, groups.clone())?;
            x = residual_norm(tape, p, &layer.norm2, x, ca)?;
            let ff = layer.ff.forward(tape, p, x)?;
            x = residual_norm(tape, p, &layer.norm3, x, ff)?;
        }
        let out = self.out_proj.forward(tape, p, x)?;
        self.out_norm.forward(tape, p, out)
    }
}

#[derive(Debug, Clone)]
struct Projection {
    linear: Linear,
    norm: LayerNorm,
}

impl Projection {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(store, &format!("{name}.linear"), dim, dim, 1.0 / (dim as f64).sqrt(), rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.linear.forward(tape, p, x)?;
        self.norm.forward(tape, p, h)
    }
}

#[derive(Debug, Clone)]
enum Modules {
    None,
    Decoders { visual: DecoderStack, textual: DecoderStack },
    Synergy { to_visual: Projection, to_textual: Projection },
}

/// Text-side tape inputs: `s` is `K x D`, `s_tilde` is `K*N x D`.
#[derive(Debug, Clone, Copy)]
pub struct TextInputs {
    pub s: Var,
    pub s_tilde: Var,
    pub n_ctx: usize,
}

/// Image-side tape inputs: `v` is `B x D`, `v_tilde` is `B*HW x D`.
#[derive(Debug, Clone, Copy)]
pub struct ImageInputs {
    pub v: Var,
    pub v_tilde: Var,
    pub spatial: usize,
}

/// Prompted embeddings for a batch: `v_prime` is `B x D` and `s_prime` is
/// `B*K x D` (class-minor).
#[derive(Debug, Clone, Copy)]
pub struct PromptedBatch {
    pub v_prime: Var,
    pub s_prime: Var,
    pub batch: usize,
    pub classes: usize,
}

/// Post-prompting embeddings of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptedPair<T: Scalar> {
    pub v_prime: Vec<T>,
    /// One prompted class embedding per row (`K x D`).
    pub s_prime: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct MutualPrompter {
    cfg: PrompterConfig,
    dim: usize,
    modules: Modules,
    gamma_v: ParamId,
    gamma_s: ParamId,
}

impl MutualPrompter {
    /// Registers `G` (names under `prompter.`) and the two gains
    /// (`gamma_v`, `gamma_s`) in `store`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: PrompterConfig, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let modules = match cfg.strategy {
            Strategy::None => Modules::None,
            Strategy::CrossAttention if cfg.share_parameters => {
                let shared = DecoderStack::new(store, "prompter.shared", dim, &cfg, rng);
                Modules::Decoders {
                    visual: shared.clone(),
                    textual: shared,
                }
            }
            Strategy::CrossAttention | Strategy::Independent => Modules::Decoders {
                visual: DecoderStack::new(store, "prompter.visual", dim, &cfg, rng),
                textual: DecoderStack::new(store, "prompter.textual", dim, &cfg, rng),
            },
            Strategy::SimpleSynergy => Modules::Synergy {
                to_visual: Projection::new(store, "prompter.to_visual", dim, rng),
                to_textual: Projection::new(store, "prompter.to_textual", dim, rng),
            },
        };
        let gamma_v = store.add_filled("gamma_v", 1, 1, cfg.gamma_v_init);
        let gamma_s = store.add_filled("gamma_s", 1, 1, cfg.gamma_s_init);
        Ok(Self {
            cfg,
            dim,
            modules,
            gamma_v,
            gamma_s,
        })
    }

    pub fn config(&self) -> &PrompterConfig {
        &self.cfg
    }

    pub fn gamma_v(&self) -> ParamId {
        self.gamma_v
    }

    pub fn gamma_s(&self) -> ParamId {
        self.gamma_s
    }

    fn visual_active(&self) -> bool {
        self.cfg.visual_branch && !matches!(self.modules, Modules::None)
    }

    fn textual_active(&self) -> bool {
        self.cfg.textual_branch && !matches!(self.modules, Modules::None)
    }

    /// Applies `G` to a whole batch of images against all `K` classes.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, text: TextInputs, images: ImageInputs) -> Result<PromptedBatch> {
        let (k, d) = tape.value(text.s).shape();
        let b = tape.value(images.v).rows();
        let n = text.n_ctx;
        let hw = images.spatial;
        if d != self.dim || tape.value(images.v).cols() != d {
            return shape_err("prompter", format!("embedding widths {d} / {} vs {}", tape.value(images.v).cols(), self.dim));
        }
        if tape.value(text.s_tilde).shape() != (k * n, d) {
            return shape_err("prompter", format!("s_tilde is {:?}, expected {}x{d}", tape.value(text.s_tilde).shape(), k * n));
        }
        if tape.value(images.v_tilde).shape() != (b * hw, d) {
            return shape_err("prompter", format!("v_tilde is {:?}, expected {}x{d}", tape.value(images.v_tilde).shape(), b * hw));
        }
        if k == 0 || b == 0 {
            return Err(DampError::Invalid("prompter needs at least one class and one image".into()));
        }

        let v_prime = if self.visual_active() {
            let v_star = match &self.modules {
                Modules::Decoders { visual, .. } => {
                    let (keys, groups) = if self.cfg.strategy == Strategy::Independent {
                        (images.v_tilde, AttnGroups::uniform(b, 1, hw))
                    } else {
                        (tape.block_mean_rows(text.s_tilde, k)?, AttnGroups::single(b, n))
                    };
                    let keys = visual.project_in(tape, p, keys)?;
                    visual.forward(tape, p, images.v, keys, &groups)?
                }
                Modules::Synergy { to_visual, .. } => {
                    let pooled = tape.mean_rows(text.s_tilde)?;
                    let row = to_visual.forward(tape, p, pooled)?;
                    tape.tile_rows(row, b)?
                }
                Modules::None => unreachable!(),
            };
            let scaled = tape.scale(v_star, p.var(self.gamma_v))?;
            tape.add(images.v, scaled)?
        } else {
            images.v
        };

        let s_tiled = tape.tile_rows(text.s, b)?;
        let s_prime = if self.textual_active() {
            let s_star = match &self.modules {
                Modules::Decoders { textual, .. } => {
                    if self.cfg.strategy == Strategy::Independent {
                        let keys = textual.project_in(tape, p, text.s_tilde)?;
                        let per_class = textual.forward(tape, p, text.s, keys, &AttnGroups::uniform(k, 1, n))?;
                        tape.tile_rows(per_class, b)?
                    } else {
                        let keys = textual.project_in(tape, p, images.v_tilde)?;
                        textual.forward(tape, p, s_tiled, keys, &AttnGroups::uniform(b, k, hw))?
                    }
                }
                Modules::Synergy { to_textual, .. } => {
                    let pooled = tape.group_mean_rows(images.v_tilde, hw)?;
                    let per_image = to_textual.forward(tape, p, pooled)?;
                    let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
                    tape.gather_rows(per_image, &idx)?
                }
                Modules::None => unreachable!(),
            };
            let scaled = tape.scale(s_star, p.var(self.gamma_s))?;
            tape.add(s_tiled, scaled)?
        } else {
            s_tiled
        };
        Ok(PromptedBatch {
            v_prime,
            s_prime,
            batch: b,
            classes: k,
        })
    }

    fn eval<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        s: &Matrix<T>,
        s_tilde: &Matrix<T>,
        n_ctx: usize,
        v: &Matrix<T>,
        v_tilde: &Matrix<T>,
        spatial: usize,
    ) -> Result<(Matrix<T>, Matrix<T>)> {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let text = TextInputs {
            s: tape.constant(s.clone()),
            s_tilde: tape.constant(s_tilde.clone()),
            n_ctx,
        };
        let images = ImageInputs {
            v: tape.constant(v.clone()),
            v_tilde: tape.constant(v_tilde.clone()),
            spatial,
        };
        let out = self.forward(&mut tape, &p, text, images)?;
        Ok((tape.value(out.v_prime).clone(), tape.value(out.s_prime).clone()))
    }

    /// `v' = v + gamma_v * v*` for one image against the context matrix
    /// `s_tilde` (`N x D`).
    pub fn prompt_visual<T: Scalar>(&self, params: &ParamStore<T>, v: &[T], s_tilde: &Matrix<T>) -> Result<Vec<T>> {
        let d = v.len();
        let s = Matrix::zeros(1, d);
        let dummy = Matrix::zeros(1, d);
        let mut cfg_only_visual = self.clone();
        cfg_only_visual.cfg.textual_branch = false;
        let (vp, _) = cfg_only_visual.eval(params, &s, s_tilde, s_tilde.rows(), &Matrix::row_vector(v), &dummy, 1)?;
        Ok(vp.into_vec())
    }

    /// `s'_k = s_k + gamma_s * s*_k` for one class embedding against the
    /// spatial tokens `v_tilde` of one image.
    pub fn prompt_textual<T: Scalar>(&self, params: &ParamStore<T>, s_k: &[T], v_tilde: &Matrix<T>) -> Result<Vec<T>> {
        let d = s_k.len();
        let mut only_textual = self.clone();
        only_textual.cfg.visual_branch = false;
        let ctx = Matrix::zeros(1, d);
        let v = Matrix::zeros(1, d);
        let (_, sp) = only_textual.eval(params, &Matrix::row_vector(s_k), &ctx, 1, &v, v_tilde, v_tilde.rows())?;
        Ok(sp.into_vec())
    }

    /// Joint prompting of one image against all class encodings. Text
    /// contexts for the visual branch are averaged over classes.
    pub fn prompt_pair<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        image: &crate::encoder::EncodedImage<T>,
        texts: &[crate::encoder::EncodedText<T>],
    ) -> Result<PromptedPair<T>> {
        if texts.is_empty() {
            return Err(DampError::Invalid("prompt_pair needs at least one class encoding".into()));
        }
        let n = texts[0].s_tilde.rows();
        if texts.iter().any(|t| t.s_tilde.rows() != n) {
            return Err(DampError::Invalid("class encodings disagree on context length".into()));
        }
        let s_rows: Vec<&[T]> = texts.iter().map(|t| t.s.as_slice()).collect();
        let s = Matrix::from_rows(&s_rows)?;
        let ctx: Vec<&Matrix<T>> = texts.iter().map(|t| &t.s_tilde).collect();
        let s_tilde = Matrix::concat_rows(&ctx)?;
        let (vp, sp) = self.eval(
            params,
            &s,
            &s_tilde,
            n,
            &Matrix::row_vector(&image.v),
            &image.v_tilde,
            image.v_tilde.rows(),
        )?;
        Ok(PromptedPair {
            v_prime: vp.into_vec(),
            s_prime: sp,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn prompter(cfg: PrompterConfig) -> (ParamStore<f64>, MutualPrompter) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = MutualPrompter::new(&mut store, cfg, 8, &mut rng).unwrap();
        (store, g)
    }

    fn small() -> PrompterConfig {
        PrompterConfig {
            internal_dim: 8,
            heads: 2,
            ..PrompterConfig::default()
        }
    }

    #[test]
    fn zero_gamma_is_identity() {
        let (mut store, g) = prompter(small());
        *store.get_mut(g.gamma_v()) = Matrix::scalar(0.0);
        *store.get_mut(g.gamma_s()) = Matrix::scalar(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v: Vec<f64> = rand_matrix(1, 8, &mut rng).into_vec();
        let st = rand_matrix(4, 8, &mut rng);
        assert_eq!(g.prompt_visual(&store, &v, &st).unwrap(), v);
        let vt = rand_matrix(5, 8, &mut rng);
        assert_eq!(g.prompt_textual(&store, &v, &vt).unwrap(), v);
    }

    #[test]
    fn visual_branch_ignores_context_order() {
        let (store, g) = prompter(small());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = rand_matrix(1, 8, &mut rng).into_vec();
        let st = rand_matrix(5, 8, &mut rng);
        let perm: Vec<&[f64]> = [3, 0, 4, 1, 2].iter().map(|&i| st.row(i)).collect();
        let st2 = Matrix::from_rows(&perm).unwrap();
        let a = g.prompt_visual(&store, &v, &st).unwrap();
        let b = g.prompt_visual(&store, &v, &st2).unwrap();
        assert_ne!(a, v);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn textual_branch_is_instance_conditioned() {
        let (store, g) = prompter(small());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = rand_matrix(1, 8, &mut rng).into_vec();
        let a = g.prompt_textual(&store, &s, &rand_matrix(4, 8, &mut rng)).unwrap();
        let b = g.prompt_textual(&store, &s, &rand_matrix(4, 8, &mut rng)).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(diff > 1e-8);
    }

    #[test]
    fn unshared_doubles_module_size() {
        let (shared, _) = prompter(small());
        let (split, _) = prompter(PrompterConfig {
            share_parameters: false,
            ..small()
        });
        let a = shared.num_scalars_with_prefix("prompter.");
        let b = split.num_scalars_with_prefix("prompter.");
        assert!(a > 0);
        assert_eq!(b, 2 * a);
        assert_eq!(shared.num_scalars() - a, 2);
    }

    #[test]
    fn every_strategy_runs_batched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (k, n, b, hw) = (3, 4, 2, 5);
        let s = rand_matrix(k, 8, &mut rng);
        let st = rand_matrix(k * n, 8, &mut rng);
        let v = rand_matrix(b, 8, &mut rng);
        let vt = rand_matrix(b * hw, 8, &mut rng);
        for strategy in Strategy::ALL {
            let (store, g) = prompter(PrompterConfig { strategy, ..small() });
            let (vp, sp) = g.eval(&store, &s, &st, n, &v, &vt, hw).unwrap();
            assert_eq!(vp.shape(), (b, 8));
            assert_eq!(sp.shape(), (b * k, 8));
            assert!(vp.is_finite() && sp.is_finite());
            if strategy == Strategy::None {
                assert_eq!(vp, v);
            } else {
                assert_ne!(vp, v, "{strategy:?}");
            }
        }
    }

    #[test]
    fn batched_matches_single_instance() {
        let (store, g) = prompter(small());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (k, n, b, hw) = (3, 4, 3, 5);
        let s = rand_matrix(k, 8, &mut rng);
        let st = rand_matrix(k * n, 8, &mut rng);
        let v = rand_matrix(b, 8, &mut rng);
        let vt = rand_matrix(b * hw, 8, &mut rng);
        let (vp, sp) = g.eval(&store, &s, &st, n, &v, &vt, hw).unwrap();
        for i in 0..b {
            let (vp1, sp1) = g
                .eval(&store, &s, &st, n, &v.slice_rows(i, i + 1), &vt.slice_rows(i * hw, (i + 1) * hw), hw)
                .unwrap();
            assert!(vp1.max_abs_diff(&vp.slice_rows(i, i + 1)) < 1e-12);
            assert!(sp1.max_abs_diff(&sp.slice_rows(i * k, (i + 1) * k)) < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_heads_and_empty_texts() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = PrompterConfig {
            internal_dim: 10,
            heads: 4,
            ..PrompterConfig::default()
        };
        assert!(MutualPrompter::new(&mut store, bad, 8, &mut rng).is_err());
        let (store, g) = prompter(small());
        let img = crate::encoder::EncodedImage {
            v: vec![1.0; 8],
            v_tilde: Matrix::filled(2, 8, 1.0),
            z: Matrix::zeros(2, 1),
            z_bar: vec![0.0],
        };
        assert!(g.prompt_pair(&store, &img, &[]).is_err());
    }
}

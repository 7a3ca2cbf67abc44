//! Frozen encoders plus the trainable prompt context and prompting module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::data::Image;
use crate::encoder::{EncodedText, Encoders, TextPrompt};
use crate::error::{DampError, Result};
use crate::losses::{head_tape, zero_shot_classify, ClassProbabilities};
use crate::params::{Bound, ParamId, ParamStore};
use crate::prompt::{class_name_table, PromptBank};
use crate::prompter::{ImageInputs, MutualPrompter, PromptedBatch, PromptedPair, TextInputs};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Images per forward pass at evaluation time.
const EVAL_CHUNK: usize = 64;

/// Named groups of the trainable registry.
pub const GROUPS: [&str; 4] = ["p", "G", "gamma_v", "gamma_s"];

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub encoders: Encoders<T>,
    /// Every trainable tensor: the prompt context, `G`, `gamma_v`, `gamma_s`.
    pub params: ParamStore<T>,
    pub bank: PromptBank,
    pub prompter: MutualPrompter,
    pub tau: f64,
    naive_s: Matrix<T>,
}

/// Frozen image embeddings stacked for a batch.
#[derive(Debug, Clone)]
pub struct ImageEmbeddings<T: Scalar> {
    /// `B x D`.
    pub v: Matrix<T>,
    /// `B*HW x D`.
    pub v_tilde: Matrix<T>,
    pub spatial: usize,
}

impl<T: Scalar> ImageEmbeddings<T> {
    pub fn len(&self) -> usize {
        self.v.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.v.rows() == 0
    }

    pub fn concat(parts: &[&ImageEmbeddings<T>]) -> Result<Self> {
        let spatial = parts.first().map_or(1, |p| p.spatial);
        if parts.iter().any(|p| p.spatial != spatial) {
            return Err(DampError::Invalid("image batches disagree on spatial size".into()));
        }
        let vs: Vec<&Matrix<T>> = parts.iter().map(|p| &p.v).collect();
        let vts: Vec<&Matrix<T>> = parts.iter().map(|p| &p.v_tilde).collect();
        Ok(Self {
            v: Matrix::concat_rows(&vs)?,
            v_tilde: Matrix::concat_rows(&vts)?,
            spatial,
        })
    }
}

/// Tape handles produced by [`Model::forward_tape`].
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub trainable: Bound,
    pub prompted: PromptedBatch,
    pub head: crate::losses::HeadNodes,
}

impl<T: Scalar> Model<T> {
    /// Builds frozen encoders from `cfg.encoder` and initializes trainable
    /// tensors from `cfg.seed`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let encoders = Encoders::new(cfg.encoder.clone())?;
        Self::with_encoders(cfg, encoders)
    }

    pub fn with_encoders(cfg: &RunConfig, encoders: Encoders<T>) -> Result<Self> {
        if encoders.config() != &cfg.encoder {
            return Err(DampError::Config("encoder weights were built from a different configuration".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let d = encoders.dim();
        let bank = PromptBank::new(&mut params, &cfg.prompt, d, class_name_table(cfg.data.classes), &mut rng)?;
        let mut pcfg = cfg.prompter.clone();
        pcfg.visual_branch = cfg.ablation.vp;
        pcfg.textual_branch = cfg.ablation.itp;
        let prompter = MutualPrompter::new(&mut params, pcfg, d, &mut rng)?;
        let naive_s = encoders.encode_token_sequences(&bank.naive_prompts())?;
        Ok(Self {
            encoders,
            params,
            bank,
            prompter,
            tau: cfg.losses.tau,
            naive_s,
        })
    }

    pub fn classes(&self) -> usize {
        self.bank.classes()
    }

    /// Group name of a trainable tensor.
    pub fn group_of(name: &str) -> &'static str {
        if name.starts_with("prompt.") {
            "p"
        } else if name == "gamma_v" {
            "gamma_v"
        } else if name == "gamma_s" {
            "gamma_s"
        } else {
            "G"
        }
    }

    /// Trainable tensor ids per group, in [`GROUPS`] order.
    pub fn trainable_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        GROUPS
            .iter()
            .map(|&g| {
                let ids = self
                    .params
                    .iter()
                    .filter(|(_, n, _)| Self::group_of(n) == g)
                    .map(|(id, _, _)| id)
                    .collect();
                (g, ids)
            })
            .collect()
    }

    /// Naive-template class embeddings (`K x D`).
    pub fn naive_embeddings(&self) -> &Matrix<T> {
        &self.naive_s
    }

    /// Encodes images with the frozen vision encoder.
    pub fn embed_images(&self, images: &[&Image]) -> Result<ImageEmbeddings<T>> {
        let enc = self.encoders.encode_images(images)?;
        let hw = self.encoders.config().spatial_tokens();
        let d = self.encoders.dim();
        let mut v = Vec::with_capacity(enc.len() * d);
        let mut vt = Vec::with_capacity(enc.len() * hw * d);
        for e in &enc {
            v.extend_from_slice(&e.v);
            vt.extend_from_slice(e.v_tilde.as_slice());
        }
        Ok(ImageEmbeddings {
            v: Matrix::from_vec(enc.len(), d, v)?,
            v_tilde: Matrix::from_vec(enc.len() * hw, d, vt)?,
            spatial: hw,
        })
    }

    /// Text side on a tape: learnable contexts followed by each class name.
    pub fn text_tape(&self, tape: &mut Tape<T>, trainable: &Bound) -> Result<TextInputs> {
        let frozen = self.encoders.bind(tape);
        let ctx = trainable.var(self.bank.context_id());
        let prompts: Vec<TextPrompt<'_>> = self
            .bank
            .class_names()
            .iter()
            .map(|name| TextPrompt {
                context: Some(ctx),
                tokens: name,
            })
            .collect();
        let out = self.encoders.text_forward(tape, &frozen, &prompts)?;
        Ok(TextInputs {
            s: out.s,
            s_tilde: out.s_tilde.expect("contexts present"),
            n_ctx: out.n_ctx,
        })
    }

    /// Full pipeline on a tape. With `trainable == true` every trainable
    /// tensor is a gradient leaf; otherwise all are constants.
    pub fn forward_tape(&self, tape: &mut Tape<T>, images: &ImageEmbeddings<T>, trainable: bool) -> Result<ForwardNodes> {
        let bound = if trainable {
            self.params.bind_trainable(tape)
        } else {
            self.params.bind_frozen(tape)
        };
        let text = self.text_tape(tape, &bound)?;
        let img = ImageInputs {
            v: tape.constant(images.v.clone()),
            v_tilde: tape.constant(images.v_tilde.clone()),
            spatial: images.spatial,
        };
        let prompted = self.prompter.forward(tape, &bound, text, img)?;
        let head = head_tape(tape, &prompted, self.tau)?;
        Ok(ForwardNodes {
            trainable: bound,
            prompted,
            head,
        })
    }

    /// Class probabilities of the full prompted head.
    pub fn predict_embedded(&self, images: &ImageEmbeddings<T>) -> Result<Vec<ClassProbabilities<T>>> {
        let mut out = Vec::with_capacity(images.len());
        let hw = images.spatial;
        let mut start = 0;
        while start < images.len() {
            let end = (start + EVAL_CHUNK).min(images.len());
            let chunk = ImageEmbeddings {
                v: images.v.slice_rows(start, end),
                v_tilde: images.v_tilde.slice_rows(start * hw, end * hw),
                spatial: hw,
            };
            let mut tape = Tape::new();
            let nodes = self.forward_tape(&mut tape, &chunk, false)?;
            let lp = tape.value(nodes.head.log_probs);
            for r in 0..lp.rows() {
                out.push(ClassProbabilities {
                    probs: lp.row(r).iter().map(|x| x.exp()).collect(),
                });
            }
            start = end;
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<ClassProbabilities<T>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            out.extend(self.predict_embedded(&self.embed_images(chunk)?)?);
        }
        Ok(out)
    }

    /// Naive-prompt head on raw embeddings.
    pub fn zero_shot_embedded(&self, images: &ImageEmbeddings<T>) -> Result<Vec<ClassProbabilities<T>>> {
        (0..images.len())
            .map(|i| zero_shot_classify(images.v.row(i), &self.naive_s, T::of(self.tau)))
            .collect()
    }

    pub fn zero_shot(&self, images: &[&Image]) -> Result<Vec<ClassProbabilities<T>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            out.extend(self.zero_shot_embedded(&self.embed_images(chunk)?)?);
        }
        Ok(out)
    }

    /// Current learnable-prompt class encodings, one per class.
    pub fn class_encodings(&self) -> Result<Vec<EncodedText<T>>> {
        let ctx = self.params.get(self.bank.context_id());
        (0..self.classes())
            .map(|k| {
                let a = self.bank.assemble_prompt(&self.params, k)?;
                self.encoders.encode_text(a.class_tokens, ctx)
            })
            .collect()
    }

    /// Raw and prompted embeddings for each image.
    pub fn prompted_pairs(&self, images: &ImageEmbeddings<T>) -> Result<Vec<PromptedPair<T>>> {
        let mut tape = Tape::new();
        let nodes = self.forward_tape(&mut tape, images, false)?;
        let vp = tape.value(nodes.prompted.v_prime);
        let sp = tape.value(nodes.prompted.s_prime);
        let k = self.classes();
        Ok((0..images.len())
            .map(|i| PromptedPair {
                v_prime: vp.row(i).to_vec(),
                s_prime: sp.slice_rows(i * k, (i + 1) * k),
            })
            .collect())
    }
}

/// Fraction of predictions whose argmax equals the label.
pub fn accuracy<T: Scalar>(probs: &[ClassProbabilities<T>], labels: &[usize]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let hits = probs.iter().zip(labels).filter(|(p, &y)| p.argmax() == y).count();
    hits as f64 / probs.len() as f64
}

/// `K x K` counts, rows indexed by true class.
pub fn confusion_matrix<T: Scalar>(probs: &[ClassProbabilities<T>], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; classes]; classes];
    for (p, &y) in probs.iter().zip(labels) {
        m[y][p.argmax()] += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_of_perfect_predictions_is_diagonal() {
        let probs: Vec<ClassProbabilities<f64>> = (0..6)
            .map(|i| {
                let mut p = vec![0.0; 3];
                p[i % 3] = 1.0;
                ClassProbabilities { probs: p }
            })
            .collect();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let m = confusion_matrix(&probs, &labels, 3);
        assert_eq!(m, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
        assert_eq!(accuracy(&probs, &labels), 1.0);
    }
}

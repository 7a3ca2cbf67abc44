//! Shared learnable textual context and the fixed naive template.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DampError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Toy-vocabulary ids of the naive template words.
pub const TOKEN_A: usize = 0;
pub const TOKEN_PHOTO: usize = 1;
pub const TOKEN_OF: usize = 2;
/// First id available for class names.
pub const FIRST_NAME_TOKEN: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Number of learnable context vectors `N`.
    pub n_ctx: usize,
    pub init_std: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            n_ctx: 32,
            init_std: 0.02,
        }
    }
}

/// Synthetic class names: class `k` is `[3 + 2k]` for even `k` and
/// `[3 + 2k, 4 + 2k]` for odd `k`, so lengths alternate between 1 and 2.
pub fn class_name_table(classes: usize) -> Vec<Vec<usize>> {
    (0..classes)
        .map(|k| {
            let first = FIRST_NAME_TOKEN + 2 * k;
            if k % 2 == 0 {
                vec![first]
            } else {
                vec![first, first + 1]
            }
        })
        .collect()
}

/// Learnable context `p` (one matrix shared by every class and domain) plus
/// the class-name token table.
#[derive(Debug, Clone)]
pub struct PromptBank {
    context: ParamId,
    n_ctx: usize,
    class_names: Vec<Vec<usize>>,
}

/// Borrowed inputs for one class sequence.
#[derive(Debug, Clone, Copy)]
pub struct AssembledPrompt<'a, T: Scalar> {
    pub context: &'a Matrix<T>,
    pub context_id: ParamId,
    pub class_tokens: &'a [usize],
}

impl PromptBank {
    /// Registers `prompt.context` (`N x dim`) in the trainable store.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &PromptConfig,
        dim: usize,
        class_names: Vec<Vec<usize>>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.n_ctx == 0 {
            return Err(DampError::Config("n_ctx must be at least 1".into()));
        }
        if class_names.len() < 2 {
            return Err(DampError::Config(format!(
                "need at least 2 classes, got {}",
                class_names.len()
            )));
        }
        if let Some(k) = class_names.iter().position(Vec::is_empty) {
            return Err(DampError::Config(format!("class {k} has an empty name")));
        }
        let context = store.add_normal("prompt.context", cfg.n_ctx, dim, cfg.init_std, rng);
        Ok(Self {
            context,
            n_ctx: cfg.n_ctx,
            class_names,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_ctx(&self) -> usize {
        self.n_ctx
    }

    pub fn context_id(&self) -> ParamId {
        self.context
    }

    pub fn class_names(&self) -> &[Vec<usize>] {
        &self.class_names
    }

    /// Longest assembled learnable or naive sequence.
    pub fn max_len(&self) -> usize {
        let name = self.class_names.iter().map(Vec::len).max().unwrap_or(0);
        (self.n_ctx + name).max(4 + name)
    }

    /// Largest token id used by names or the template.
    pub fn max_token(&self) -> usize {
        self.class_names
            .iter()
            .flatten()
            .copied()
            .max()
            .unwrap_or(0)
            .max(TOKEN_OF)
    }

    fn check(&self, k: usize) -> Result<()> {
        if k >= self.classes() {
            return Err(DampError::OutOfRange {
                what: "class",
                index: k,
                len: self.classes(),
            });
        }
        Ok(())
    }

    /// Context and class tokens for class `k`; the context is the same
    /// matrix for every class.
    pub fn assemble_prompt<'a, T: Scalar>(
        &'a self,
        store: &'a ParamStore<T>,
        k: usize,
    ) -> Result<AssembledPrompt<'a, T>> {
        self.check(k)?;
        Ok(AssembledPrompt {
            context: store.get(self.context),
            context_id: self.context,
            class_tokens: &self.class_names[k],
        })
    }

    /// `[a, photo, of, a, CLS_k]`.
    pub fn naive_prompt(&self, k: usize) -> Result<Vec<usize>> {
        self.check(k)?;
        let mut seq = vec![TOKEN_A, TOKEN_PHOTO, TOKEN_OF, TOKEN_A];
        seq.extend_from_slice(&self.class_names[k]);
        Ok(seq)
    }

    pub fn naive_prompts(&self) -> Vec<Vec<usize>> {
        (0..self.classes())
            .map(|k| self.naive_prompt(k).expect("in range"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank() -> (ParamStore<f64>, PromptBank) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = PromptBank::new(&mut store, &PromptConfig::default(), 8, class_name_table(4), &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn context_is_shared_across_classes() {
        let (store, b) = bank();
        let p0 = b.assemble_prompt(&store, 0).unwrap();
        let p1 = b.assemble_prompt(&store, 1).unwrap();
        assert!(std::ptr::eq(p0.context, p1.context));
        assert_eq!(p0.context_id, p1.context_id);
        assert_eq!(p0.context.rows(), 32);
        assert_eq!(store.num_scalars(), 32 * 8);
    }

    #[test]
    fn assembled_prompt_reflects_updates() {
        let (mut store, b) = bank();
        store.get_mut(b.context_id()).set(0, 0, 42.0);
        assert_eq!(b.assemble_prompt(&store, 2).unwrap().context.get(0, 0), 42.0);
    }

    #[test]
    fn naive_prompts_differ_only_in_name_slot() {
        let (_, b) = bank();
        let a = b.naive_prompt(0).unwrap();
        let c = b.naive_prompt(2).unwrap();
        assert_eq!(a, b.naive_prompt(0).unwrap());
        assert_eq!(a[..4], c[..4]);
        assert_ne!(a[4..], c[4..]);
        assert!(b.naive_prompt(4).is_err());
        assert!(b.assemble_prompt(&ParamStore::<f64>::new(), 9).is_err());
    }

    #[test]
    fn name_lengths_alternate() {
        let t = class_name_table(5);
        assert_eq!(t.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 2, 1, 2, 1]);
        let flat: Vec<usize> = t.into_iter().flatten().collect();
        let mut dedup = flat.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), flat.len());
    }
}

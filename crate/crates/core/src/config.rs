//! Run configuration: one TOML document with every hyperparameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, StrongAugConfig};
use crate::encoder::EncoderConfig;
use crate::error::{DampError, Result};
use crate::losses::LossWeights;
use crate::prompt::{class_name_table, PromptConfig, FIRST_NAME_TOKEN};
use crate::prompter::PrompterConfig;
use crate::pseudo::AlphaSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One labeled source, one unlabeled target.
    #[default]
    Uda,
    /// Two or more labeled sources, one unlabeled target.
    Msda,
    /// Labeled sources only; an unseen domain is evaluated after training.
    Dg,
}

/// Component switches of the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Instance-level textual prompting.
    pub itp: bool,
    /// Visual prompting.
    pub vp: bool,
    pub l_sc: bool,
    pub l_idc: bool,
    pub l_im: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

impl Ablation {
    pub fn full() -> Self {
        Self {
            itp: true,
            vp: true,
            l_sc: true,
            l_idc: true,
            l_im: true,
        }
    }

    pub fn baseline() -> Self {
        Self {
            itp: false,
            vp: false,
            l_sc: false,
            l_idc: false,
            l_im: false,
        }
    }

    /// The seven rows of the ablation table, from the prompt-tuning
    /// baseline to the full method.
    pub fn ladder() -> Vec<(&'static str, Ablation)> {
        let b = Self::baseline();
        vec![
            ("CoOp", b),
            ("VP", Ablation { vp: true, ..b }),
            ("ITP", Ablation { itp: true, ..b }),
            ("ITP+VP", Ablation { itp: true, vp: true, ..b }),
            ("+L_sc", Ablation { itp: true, vp: true, l_sc: true, ..b }),
            (
                "+L_idc",
                Ablation {
                    itp: true,
                    vp: true,
                    l_sc: true,
                    l_idc: true,
                    ..b
                },
            ),
            ("+L_im", Self::full()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Steps per epoch; derived from the smallest domain when absent.
    pub iterations_per_epoch: Option<usize>,
    /// Per-domain batch size.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Pseudo-label confidence threshold `T`.
    pub threshold: f64,
    pub alpha_schedule: AlphaSchedule,
    /// Seed for parameter initialization, sampling and augmentation.
    pub seed: u64,
    pub losses: LossWeights,
    pub ablation: Ablation,
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub prompter: PrompterConfig,
    pub augment: StrongAugConfig,
    pub data: DatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Uda,
            epochs: 30,
            iterations_per_epoch: None,
            batch_size: 32,
            learning_rate: 3e-3,
            threshold: 0.6,
            alpha_schedule: AlphaSchedule::Linear,
            seed: 0,
            losses: LossWeights::default(),
            ablation: Ablation::full(),
            encoder: EncoderConfig::default(),
            prompt: PromptConfig::default(),
            prompter: PrompterConfig::default(),
            augment: StrongAugConfig::default(),
            data: DatasetSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DampError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.iterations_per_epoch == Some(0) {
            return bad("iterations_per_epoch must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} is not a non-negative number", self.learning_rate));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return bad(format!("threshold {} must be positive", self.threshold));
        }
        self.losses.validate()?;
        self.encoder.validate()?;
        self.prompter.validate()?;
        self.data.validate()?;
        match self.mode {
            Mode::Uda => {
                if self.data.sources.len() != 1 {
                    return bad(format!("uda mode needs exactly 1 source, got {}", self.data.sources.len()));
                }
                if self.data.target.is_none() {
                    return bad("uda mode needs a target domain".into());
                }
            }
            Mode::Msda => {
                if self.data.sources.len() < 2 {
                    return bad(format!("msda mode needs at least 2 sources, got {}", self.data.sources.len()));
                }
                if self.data.target.is_none() {
                    return bad("msda mode needs a target domain".into());
                }
            }
            Mode::Dg => {
                if self.data.target.is_some() {
                    return bad("dg mode forbids a target domain; use data.unseen for evaluation".into());
                }
                if self.data.unseen.is_none() {
                    return bad("dg mode needs an unseen domain (data.unseen)".into());
                }
            }
        }
        let enc = &self.encoder;
        if self.data.image_size != enc.image_size() {
            return bad(format!(
                "data.image_size {:?} does not match encoder input {:?} (4 x vision_grid)",
                self.data.image_size,
                enc.image_size()
            ));
        }
        if self.data.channels != enc.image_channels {
            return bad(format!(
                "data.channels {} vs encoder.image_channels {}",
                self.data.channels, enc.image_channels
            ));
        }
        let names = class_name_table(self.data.classes);
        let max_token = names.iter().flatten().copied().max().unwrap_or(FIRST_NAME_TOKEN);
        if max_token >= enc.vocab_size {
            return bad(format!(
                "{} classes need vocab_size > {max_token}, got {}",
                self.data.classes, enc.vocab_size
            ));
        }
        let longest = names.iter().map(Vec::len).max().unwrap_or(0);
        let needed = (self.prompt.n_ctx + longest).max(4 + longest);
        if needed > enc.max_text_len {
            return bad(format!(
                "prompts need max_text_len >= {needed} (n_ctx {} + name {longest}), got {}",
                self.prompt.n_ctx, enc.max_text_len
            ));
        }
        if self.prompt.n_ctx == 0 {
            return bad("prompt.n_ctx must be at least 1".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DampError::Config(e.to_string()))
    }

    /// Reads `path` (or defaults when `None`), applies `key=value`
    /// overrides in order, then validates. In dg mode the default target
    /// domain is dropped unless the document sets `data.target` itself.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                text.parse::<toml::Table>()
                    .map_err(|e| DampError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let explicit_target = doc
            .get("data")
            .and_then(toml::Value::as_table)
            .is_some_and(|d| d.contains_key("target"));
        let mut cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| DampError::Config(e.to_string()))?;
        if cfg.mode == Mode::Dg && !explicit_target {
            cfg.data.target = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Sets a dotted key, parsing the value as TOML and falling back to a bare
/// string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| DampError::Config(format!("override '{assignment}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(DampError::Config(format!("override '{assignment}' has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| DampError::Config(format!("override '{key}': '{part}' is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dg_drops_the_default_target() {
        let over = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let cfg = RunConfig::load(None, &over(&["mode=\"dg\"", "data.unseen={name=\"u\"}"])).unwrap();
        assert!(cfg.data.target.is_none());
        assert!(RunConfig::load(None, &over(&["mode=\"dg\""])).is_err());
        let explicit = over(&["mode=\"dg\"", "data.unseen={name=\"u\"}", "data.target={name=\"t\"}"]);
        assert!(RunConfig::load(None, &explicit).is_err());
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.learning_rate, 3e-3);
        assert_eq!(cfg.prompt.n_ctx, 32);
        assert_eq!(cfg.losses.lambda_c, 1.0);
        assert_eq!(cfg.losses.lambda_i, 1.0);
        assert_eq!(cfg.threshold, 0.6);
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.prompter.decoder_layers, 2);
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg = RunConfig::load(None, &["epochs=3".into(), "losses.lambda_c=0.5".into(), "mode=\"uda\"".into()]).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.losses.lambda_c, 0.5);
        let bare = RunConfig::load(None, &["prompter.strategy=independent".into()]).unwrap();
        assert_eq!(bare.prompter.strategy, crate::prompter::Strategy::Independent);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(RunConfig::load(None, &["epochs=0".into()]).is_err());
        assert!(RunConfig::load(None, &["mode=\"msda\"".into()]).is_err());
        assert!(RunConfig::load(None, &["mode=\"dg\"".into()]).is_err());
        assert!(RunConfig::load(None, &["nonsense=1".into()]).is_err());
        assert!(RunConfig::load(None, &["epochs".into()]).is_err());
        assert!(RunConfig::load(None, &["prompt.n_ctx=39".into()]).is_err());
    }

    #[test]
    fn ladder_has_seven_nested_rows() {
        let l = Ablation::ladder();
        assert_eq!(l.len(), 7);
        assert_eq!(l[0].1, Ablation::baseline());
        assert_eq!(l[6].1, Ablation::full());
        let count = |a: &Ablation| [a.itp, a.vp, a.l_sc, a.l_idc, a.l_im].iter().filter(|&&x| x).count();
        for w in l[3..].windows(2) {
            assert_eq!(count(&w[1].1), count(&w[0].1) + 1);
        }
    }
}

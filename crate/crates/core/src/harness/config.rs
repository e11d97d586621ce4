// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration: one TOML document plus dotted `key=value`
//! overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::DEFAULT_WA_INIT;
use crate::embank::EmbeddingBank;
use crate::error::{Result, SgvaError};
use crate::infer::PredictMode;
use crate::losses::{KdVariant, LossFlags, DEFAULT_TAU2};
use crate::optim::OptimConfig;
use crate::textpath::DEFAULT_PROMPT_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Meta-train on base classes, test on novel classes.
    BaseClasses,
    /// Fine-tune on each test episode's own support set.
    NoBaseClasses,
    /// `k_shot` labelled samples from every class, full test partition.
    AllClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            n_way: 5,
            k_shot: 1,
            queries_per_class: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Training episodes per epoch in the base-class scenario.
    pub episodes_per_epoch: usize,
    /// Validate every this many epochs; 0 disables validation.
    pub validate_every: usize,
    pub val_episodes: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            episodes_per_epoch: 100,
            validate_every: 0,
            val_episodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub enabled: bool,
    pub hidden: usize,
    pub wa_init: [f64; 2],
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            enabled: true,
            hidden: crate::adapter::DEFAULT_HIDDEN,
            wa_init: DEFAULT_WA_INIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub len: usize,
    /// One prompt per shot index; otherwise a single shared prompt.
    pub shot_specific: bool,
    /// Learn prompts through the text stub; otherwise use the bank's
    /// hand-crafted prompt.
    pub learnable: bool,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection {
            len: DEFAULT_PROMPT_LEN,
            shot_specific: true,
            learnable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub i2t: bool,
    pub i2i: bool,
    pub kd: bool,
    pub kd_variant: KdVariant,
    pub tau2: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            i2t: true,
            i2i: true,
            kd: true,
            kd_variant: KdVariant::Implicit,
            tau2: DEFAULT_TAU2,
        }
    }
}

impl LossSection {
    pub fn flags(&self) -> LossFlags {
        LossFlags {
            i2t: self.i2t,
            i2i: self.i2i,
            kd: self.kd,
            kd_variant: self.kd_variant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    /// Headline mode; every mode is reported regardless.
    pub mode: PredictMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: 600,
            mode: PredictMode::FusedNb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank: Option<PathBuf>,
    pub scenario: Scenario,
    pub seed: u64,
    pub sampling: SamplingSection,
    pub train: TrainSection,
    pub optim: OptimConfig,
    pub adapter: AdapterSection,
    pub prompt: PromptSection,
    pub loss: LossSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            bank: None,
            scenario: Scenario::BaseClasses,
            seed: 0,
            sampling: SamplingSection::default(),
            train: TrainSection::default(),
            optim: OptimConfig::default(),
            adapter: AdapterSection::default(),
            prompt: PromptSection::default(),
            loss: LossSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Parses a right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `dotted.key` in `table`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(SgvaError::Config(format!("malformed override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("non-empty split");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| SgvaError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw));
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| SgvaError::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ExperimentConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| SgvaError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => Ok(t),
            Ok(_) => unreachable!("config serializes to a table"),
            Err(e) => Err(SgvaError::Config(e.to_string())),
        }
    }

    /// Parses a TOML document and applies `overrides` in order.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| SgvaError::Config(e.message().to_string()))?;
        for (k, v) in overrides {
            set_dotted(&mut table, k, v)?;
        }
        Self::from_table(table)
    }

    /// Returns a copy with `overrides` applied.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = self.to_table()?;
        for (k, v) in overrides {
            set_dotted(&mut table, k, v)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sampling;
        if s.n_way < 2 || s.k_shot == 0 {
            return Err(SgvaError::Config("sampling needs n_way >= 2 and k_shot >= 1".into()));
        }
        if self.scenario == Scenario::BaseClasses && s.queries_per_class == 0 {
            return Err(SgvaError::Config("sampling.queries_per_class must be at least 1".into()));
        }
        if self.eval.episodes == 0 {
            return Err(SgvaError::Config("eval.episodes must be at least 1".into()));
        }
        if self.adapter.enabled && self.adapter.hidden == 0 {
            return Err(SgvaError::Config("adapter.hidden must be positive".into()));
        }
        if !self.adapter.wa_init.iter().all(|w| w.is_finite()) {
            return Err(SgvaError::Config("adapter.wa_init must be finite".into()));
        }
        if self.prompt.len == 0 {
            return Err(SgvaError::Config("prompt.len must be positive".into()));
        }
        if !(self.loss.tau2.is_finite() && self.loss.tau2 > 0.0) {
            return Err(SgvaError::Config("loss.tau2 must be positive".into()));
        }
        self.optim.validate()
    }

    /// Checks the parts of the config that depend on the bank.
    pub fn check_bank(&self, bank: &EmbeddingBank) -> Result<()> {
        if self.prompt.learnable {
            let stub = bank.text_stub().ok_or_else(|| {
                SgvaError::Config("prompt.learnable requires a bank with a text stub; set prompt.learnable=false".into())
            })?;
            if stub.shape().prompt_len != self.prompt.len {
                return Err(SgvaError::Config(format!(
                    "prompt.len = {} but the bank's text stub takes {} prompt vectors",
                    self.prompt.len,
                    stub.shape().prompt_len
                )));
            }
        }
        match self.scenario {
            Scenario::BaseClasses if !bank.has_split() => {
                Err(SgvaError::Config("scenario base_classes needs a bank with a class split".into()))
            }
            Scenario::AllClass if !bank.has_partition() => {
                Err(SgvaError::Config("scenario all_class needs a bank with a train/test partition".into()))
            }
            _ => Ok(()),
        }
    }

    /// Number of prompt blocks the run learns.
    pub fn prompt_blocks(&self) -> usize {
        if self.prompt.shot_specific {
            self.sampling.k_shot
        } else {
            1
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring the bank path.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.bank = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

//! Run specification files: one TOML document describing the model, the
//! adapter placement, the task, the training knobs, and optionally a sweep.
//! Parsing is strict so a typo fails loudly instead of silently running the
//! default it shadowed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterPlacement, ModelConfig};
use crate::sweep::SweepSpec;
use crate::task::SyntheticTask;
use crate::train::TrainConfig;

/// A complete run description. Every section falls back to its documented
/// defaults; unknown keys are fatal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub placement: AdapterPlacement,
    pub task: SyntheticTask,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl RunSpec {
    /// Validate each section and their agreement: the task must fit inside
    /// the model's vocabulary, sequence budget, and class count.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.placement.validate(&self.model)?;
        self.task.validate()?;
        self.train.validate()?;
        if let Some(sweep) = &self.sweep {
            sweep.validate()?;
            for p in &sweep.placements {
                p.validate(&self.model)?;
            }
        }
        if self.task.vocab_size > self.model.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "task vocab_size {} exceeds model vocab_size {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if self.task.seq_len > self.model.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "task seq_len {} exceeds model max_seq_len {}",
                self.task.seq_len, self.model.max_seq_len
            )));
        }
        if self.task.num_classes != self.model.num_classes {
            return Err(Error::InvalidConfig(format!(
                "task num_classes {} disagrees with model num_classes {}",
                self.task.num_classes, self.model.num_classes
            )));
        }
        Ok(())
    }

    /// Parse and validate a spec document. The error names the first
    /// offending key and its location.
    pub fn parse(text: &str, origin: &str) -> Result<RunSpec> {
        let spec: RunSpec = toml::from_str(text)
            .map_err(|e| Error::Spec { path: origin.to_string(), message: e.to_string() })?;
        spec.validate().map_err(|e| Error::Spec {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<RunSpec> {
        let text = std::fs::read_to_string(path)?;
        RunSpec::parse(&text, &path.display().to_string())
    }

    /// Render the fully resolved spec, defaults included, as a document
    /// that parses back to this exact value.
    pub fn resolved(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("spec serialization: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MatrixName;
    use crate::sweep::Method;
    use crate::train::OptimizerKind;

    const MINIMAL: &str = r#"
        [model]
        hidden_dim = 32

        [placement]
        lora_targets = ["W_o", "W_f1"]
        lora_rank = 4
        filter_layers = [0, 1]

        [task]
        vocab_size = 64

        [train]
        steps = 10
    "#;

    #[test]
    fn minimal_spec_fills_defaults() {
        let spec = RunSpec::parse(MINIMAL, "inline").unwrap();
        assert_eq!(spec.model.hidden_dim, 32);
        assert_eq!(spec.model.num_layers, 2);
        assert_eq!(spec.placement.lora_rank, 4);
        assert!(spec.placement.lora_targets.contains(&MatrixName::WF1));
        assert_eq!(spec.train.steps, 10);
        assert_eq!(spec.train.learning_rate, 1e-3);
        assert!(matches!(spec.train.optimizer, OptimizerKind::Adam(_)));
        assert!(spec.sweep.is_none());
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let bad = MINIMAL.replace("lora_rank", "lora_rnk");
        let err = RunSpec::parse(&bad, "inline").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lora_rnk"), "error did not name the key: {msg}");
        assert!(msg.contains("inline"));
    }

    #[test]
    fn resolved_echo_is_a_fixed_point() {
        let mut spec = RunSpec::parse(MINIMAL, "inline").unwrap();
        let echo = spec.resolved().unwrap();
        let reparsed = RunSpec::parse(&echo, "echo").unwrap();
        assert_eq!(spec, reparsed);

        spec.sweep = Some(SweepSpec {
            ranks: vec![2, 4],
            methods: vec![Method::Lora, Method::Loratrf],
            seeds: vec![0, 1, 2],
            placements: vec![spec.placement.clone()],
        });
        spec.train.optimizer = OptimizerKind::Sgd;
        let echo = spec.resolved().unwrap();
        let reparsed = RunSpec::parse(&echo, "echo").unwrap();
        assert_eq!(spec, reparsed);
    }

    #[test]
    fn cross_section_disagreements_are_rejected() {
        let wrong_vocab = MINIMAL.replace("vocab_size = 64", "vocab_size = 9999");
        assert!(RunSpec::parse(&wrong_vocab, "inline").is_err());

        let wrong_classes = MINIMAL.replace("[task]", "[task]\nnum_classes = 7");
        assert!(RunSpec::parse(&wrong_classes, "inline").is_err());

        let long_seq = MINIMAL.replace("[task]", "[task]\nseq_len = 400");
        assert!(RunSpec::parse(&long_seq, "inline").is_err());
    }

    #[test]
    fn totally_empty_spec_is_the_documented_default() {
        let spec = RunSpec::parse("", "inline").unwrap();
        assert_eq!(spec, RunSpec::default());
        assert_eq!(spec.model, ModelConfig::default());
    }
}

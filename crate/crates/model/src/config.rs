//! Model hyperparameters and named presets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{block}: embedding size {d} is not divisible by {heads} heads")]
    HeadsDoNotDivide { block: &'static str, d: usize, heads: usize },
    #[error("{block}: {field} must be positive")]
    NotPositive { block: &'static str, field: &'static str },
    #[error("beam width must be at least 1")]
    BeamWidth,
    #[error("dropout must be in [0, 1), got {0}")]
    Dropout(f64),
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("unknown preset `{0}` (expected large, desk or tiny)")]
    UnknownPreset(String),
}

/// One transformer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub input_len: usize,
}

impl BlockConfig {
    pub const fn new(layers: usize, heads: usize, ffn: usize, input_len: usize) -> Self {
        Self {
            layers,
            heads,
            ffn,
            input_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Block-diagonal decoder mask and element-relative positions.
    Sos,
    /// Plain causal decoding of the flat serialization.
    Seq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Additions `G_{t+1} − G_t`; deletions are inferred.
    Diff,
    /// The whole next graph.
    Full,
    /// `⟨add|del, s, r, o⟩` rules for both sides of the diff.
    AddDel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Graph,
    Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub text_encoder: BlockConfig,
    pub graph_encoder: BlockConfig,
    pub aggregator: BlockConfig,
    pub action_decoder: BlockConfig,
    pub graph_decoder: BlockConfig,
    pub text_vocab_cap: usize,
    pub dropout: f64,
    pub activation: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub beam_width: usize,
    pub loss: LossMode,
    pub target: TargetMode,
    pub multitask: bool,
    /// The only task trained when `multitask` is off.
    pub single_task: Task,
    pub reduction: Reduction,
    pub seed: u64,
}

pub const DEFAULT_BEAM_WIDTH: usize = 15;

impl ModelConfig {
    /// Full-size hyperparameters. Only used for parameter counting.
    pub fn large() -> Self {
        let enc = BlockConfig::new(6, 6, 3072, 1024);
        Self {
            d_model: 768,
            text_encoder: enc,
            graph_encoder: enc,
            aggregator: BlockConfig::new(2, 2, 4096, 2048),
            action_decoder: enc,
            graph_decoder: enc,
            text_vocab_cap: 30_522,
            dropout: 0.1,
            activation: "gelu".into(),
            learning_rate: 3e-4,
            batch_size: 16,
            grad_clip: 1.0,
            beam_width: DEFAULT_BEAM_WIDTH,
            loss: LossMode::Sos,
            target: TargetMode::Diff,
            multitask: true,
            single_task: Task::Graph,
            reduction: Reduction::Mean,
            seed: 0,
        }
    }

    /// CPU-sized default.
    pub fn desk() -> Self {
        let b = BlockConfig::new(2, 2, 128, 256);
        Self {
            d_model: 64,
            text_encoder: b,
            graph_encoder: b,
            aggregator: BlockConfig::new(1, 2, 128, 512),
            action_decoder: b,
            graph_decoder: b,
            text_vocab_cap: 4000,
            learning_rate: 1e-3,
            ..Self::large()
        }
    }

    /// Smallest configuration, used by gradient checks and the ablation.
    pub fn tiny() -> Self {
        let b = BlockConfig::new(2, 2, 64, 256);
        Self {
            d_model: 32,
            text_encoder: b,
            graph_encoder: b,
            aggregator: BlockConfig::new(1, 2, 64, 512),
            action_decoder: b,
            graph_decoder: b,
            text_vocab_cap: 2000,
            learning_rate: 2e-3,
            ..Self::large()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "large" => Ok(Self::large()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    pub fn blocks(&self) -> [(&'static str, &BlockConfig); 5] {
        [
            ("text_encoder", &self.text_encoder),
            ("graph_encoder", &self.graph_encoder),
            ("aggregator", &self.aggregator),
            ("action_decoder", &self.action_decoder),
            ("graph_decoder", &self.graph_decoder),
        ]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d_model == 0 {
            return Err(ConfigError::NotPositive {
                block: "model",
                field: "d_model",
            });
        }
        for (name, b) in self.blocks() {
            for (field, v) in [
                ("layers", b.layers),
                ("heads", b.heads),
                ("ffn", b.ffn),
                ("input_len", b.input_len),
            ] {
                if v == 0 {
                    return Err(ConfigError::NotPositive { block: name, field });
                }
            }
            if !self.d_model.is_multiple_of(b.heads) {
                return Err(ConfigError::HeadsDoNotDivide {
                    block: name,
                    d: self.d_model,
                    heads: b.heads,
                });
            }
        }
        if self.batch_size == 0 {
            return Err(ConfigError::NotPositive {
                block: "model",
                field: "batch_size",
            });
        }
        if self.beam_width == 0 {
            return Err(ConfigError::BeamWidth);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Dropout(self.dropout));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::LearningRate(self.learning_rate));
        }
        Ok(())
    }

    pub fn trains_graph(&self) -> bool {
        self.multitask || self.single_task == Task::Graph
    }

    pub fn trains_action(&self) -> bool {
        self.multitask || self.single_task == Task::Action
    }

    /// Trainable parameter count for the given vocabulary sizes, computed
    /// from shapes alone (nothing is allocated).
    pub fn parameter_count(&self, text_vocab: usize, graph_vocab: usize, action_vocab: usize) -> usize {
        let d = self.d_model;
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = |b: &BlockConfig| d * b.ffn + b.ffn + b.ffn * d + d;
        let enc_layer = |b: &BlockConfig| ln + attn + ln + ffn(b);
        let dec_layer = |b: &BlockConfig| enc_layer(b) + ln + attn;
        let stack = |b: &BlockConfig, layer: usize| b.layers * layer + ln;

        let text = text_vocab * d + self.text_encoder.input_len * d + stack(&self.text_encoder, enc_layer(&self.text_encoder));
        let graph = graph_vocab * d
            + GRAPH_POSITIONS * d
            + stack(&self.graph_encoder, enc_layer(&self.graph_encoder));
        let agg = 2 * d + stack(&self.aggregator, enc_layer(&self.aggregator));
        let dec = |b: &BlockConfig, v: usize| v * d + b.input_len * d + stack(b, dec_layer(b)) + d * v + v;
        let mlm = d * text_vocab + text_vocab + d * graph_vocab + graph_vocab;
        text + graph + agg + dec(&self.action_decoder, action_vocab) + dec(&self.graph_decoder, graph_vocab) + mlm
    }
}

/// Rows of the graph-encoder position table: a shared slot for framing
/// tokens plus within-element offsets.
pub const GRAPH_POSITIONS: usize = 8;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in ["large", "desk", "tiny"] {
            ModelConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ModelConfig::tiny();
        c.text_encoder.heads = 3;
        assert!(matches!(c.validate(), Err(ConfigError::HeadsDoNotDivide { .. })));
        let mut c = ModelConfig::tiny();
        c.beam_width = 0;
        assert_eq!(c.validate(), Err(ConfigError::BeamWidth));
        let mut c = ModelConfig::tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn large_scale_is_hundreds_of_millions() {
        let n = ModelConfig::large().parameter_count(30_522, 7002, 11_056);
        assert!((300_000_000..450_000_000).contains(&n), "{n}");
        assert_eq!(ModelConfig::large().beam_width, 15);
        assert_eq!(
            ModelConfig::large().text_encoder.input_len + ModelConfig::large().graph_encoder.input_len,
            ModelConfig::large().aggregator.input_len
        );
    }

    #[test]
    fn serde_rejects_unknown_keys() {
        let mut v = serde_json::to_value(ModelConfig::tiny()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}

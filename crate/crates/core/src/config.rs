//! Run configuration. Every tunable lives here; unknown keys in a config file
//! are rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown ablation `{0}` (expected one of full, wo_ss, wo_syn, wo_sem, wo_hfim, e1_only, e2_only, biaffine)")]
    UnknownAblation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// A BERT checkpoint directory (`config.json`, `vocab.txt`, `model.safetensors`).
    Pretrained,
    /// A small BERT-shaped transformer trained from scratch.
    Toy,
}

impl FromStr for BackboneKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrained" => Ok(BackboneKind::Pretrained),
            "toy" => Ok(BackboneKind::Toy),
            other => Err(ConfigError::Invalid(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordPooling {
    /// Word feature = its first subtoken.
    First,
    /// Word feature = mean over its subtokens.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyBackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub min_word_freq: usize,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        ToyBackboneConfig {
            layers: 2,
            heads: 4,
            intermediate: 128,
            max_positions: 256,
            min_word_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone: BackboneKind,
    pub pretrained_path: Option<PathBuf>,
    /// Width of the BERT channel; must equal the pretrained hidden size.
    pub hidden_bert: usize,
    /// Per-direction width of the recurrent layer.
    pub hidden_lstm_half: usize,
    pub dropout: f64,
    pub self_attention_heads: usize,
    pub word_pooling: WordPooling,
    pub toy: ToyBackboneConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backbone: BackboneKind::Pretrained,
            pretrained_path: None,
            hidden_bert: 768,
            hidden_lstm_half: 384,
            dropout: 0.5,
            self_attention_heads: 4,
            word_pooling: WordPooling::First,
            toy: ToyBackboneConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn hidden_lstm(&self) -> usize {
        2 * self.hidden_lstm_half
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadCombine {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Depth of the syntactic and of the semantic graph convolution stacks.
    pub gcn_layers: usize,
    pub sem_attention_heads: usize,
    pub head_combine: HeadCombine,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            gcn_layers: 2,
            sem_attention_heads: 4,
            head_combine: HeadCombine::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparationConfig {
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            alpha: 10.0,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionMode {
    Hfim,
    Biaffine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HfimConfig {
    pub gcnconv_layers: usize,
    pub gatedconv_layers: usize,
    pub sadpool_layers: usize,
    /// Semantic edges are kept where the attention score exceeds this.
    pub sparsify_threshold: f64,
    pub interaction_mode: InteractionMode,
    /// Output width of the fusion MLP; defaults to the BERT channel width.
    pub fused_width: Option<usize>,
}

impl Default for HfimConfig {
    fn default() -> Self {
        HfimConfig {
            gcnconv_layers: 1,
            gatedconv_layers: 1,
            sadpool_layers: 1,
            sparsify_threshold: 0.0,
            interaction_mode: InteractionMode::Hfim,
            fused_width: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpanConfig {
    pub max_span_length: usize,
    /// Per-type candidate cap as a fraction of sentence length (min 1).
    pub keep_ratio: f64,
    pub width_embedding_dim: usize,
    pub classifier_hidden: usize,
    /// During training, gold targets and opinions join the kept candidates
    /// so the relation classifier sees positive pairs from the first step.
    pub train_with_gold_spans: bool,
}

impl Default for SpanConfig {
    fn default() -> Self {
        SpanConfig {
            max_span_length: 8,
            keep_ratio: 0.5,
            width_embedding_dim: 25,
            classifier_hidden: 150,
            train_with_gold_spans: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub pair_width_embedding_dim: usize,
    pub classifier_hidden: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            pair_width_embedding_dim: 25,
            classifier_hidden: 150,
        }
    }
}

/// Ablation configurations, one per row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    WoSs,
    WoSyn,
    WoSem,
    WoHfim,
    E1Only,
    E2Only,
    Biaffine,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Full,
        Ablation::WoSs,
        Ablation::WoSyn,
        Ablation::WoSem,
        Ablation::WoHfim,
        Ablation::E1Only,
        Ablation::E2Only,
        Ablation::Biaffine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WoSs => "wo_ss",
            Ablation::WoSyn => "wo_syn",
            Ablation::WoSem => "wo_sem",
            Ablation::WoHfim => "wo_hfim",
            Ablation::E1Only => "e1_only",
            Ablation::E2Only => "e2_only",
            Ablation::Biaffine => "biaffine",
        }
    }

    /// Row label as printed in ablation reports.
    pub fn row_label(self) -> &'static str {
        match self {
            Ablation::Full => "full model",
            Ablation::WoSs => "W/O SS",
            Ablation::WoSyn => "W/O Syntactic",
            Ablation::WoSem => "W/O Semantic",
            Ablation::WoHfim => "W/O HFIM",
            Ablation::E1Only => "(E1+E2) -> (E1)",
            Ablation::E2Only => "(E1+E2) -> (E2)",
            Ablation::Biaffine => "HFIM -> Mutual BiAffine",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ConfigError::UnknownAblation(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_name: String,
    pub seed: u64,
    pub precision: Precision,
    pub ablation: Ablation,
    pub encoder: EncoderConfig,
    pub graphs: GraphConfig,
    pub separation: SeparationConfig,
    pub hfim: HfimConfig,
    pub spans: SpanConfig,
    pub triplet: TripletConfig,
    /// Peak learning rate of the warmup/decay schedule.
    pub learning_rate: f64,
    /// Optional separate peak rate for everything outside the backbone.
    pub head_learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Evaluate on dev every this many epochs (the last epoch always is).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_name: "run".into(),
            seed: 42,
            precision: Precision::F32,
            ablation: Ablation::Full,
            encoder: EncoderConfig::default(),
            graphs: GraphConfig::default(),
            separation: SeparationConfig::default(),
            hfim: HfimConfig::default(),
            spans: SpanConfig::default(),
            triplet: TripletConfig::default(),
            learning_rate: 5e-5,
            head_learning_rate: None,
            weight_decay: 1e-2,
            warmup_ratio: 0.1,
            epochs: 120,
            max_steps: None,
            batch_size: 16,
            eval_every: 1,
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: toy backbone and small widths, sized so a handful
    /// of sentences can be overfit on a CPU in seconds.
    pub fn toy() -> Self {
        RunConfig {
            run_name: "toy".into(),
            encoder: EncoderConfig {
                backbone: BackboneKind::Toy,
                hidden_bert: 64,
                hidden_lstm_half: 32,
                dropout: 0.0,
                self_attention_heads: 4,
                ..EncoderConfig::default()
            },
            spans: SpanConfig {
                width_embedding_dim: 16,
                classifier_hidden: 64,
                ..SpanConfig::default()
            },
            triplet: TripletConfig {
                pair_width_embedding_dim: 16,
                classifier_hidden: 64,
            },
            learning_rate: 2e-3,
            epochs: 200,
            batch_size: 10,
            eval_every: 10,
            ..RunConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Reads and validates a config file.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let cfg = Self::from_json(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn fused_width(&self) -> usize {
        self.hfim.fused_width.unwrap_or(self.encoder.hidden_bert)
    }

    pub fn interaction_mode(&self) -> InteractionMode {
        if self.ablation == Ablation::Biaffine {
            InteractionMode::Biaffine
        } else {
            self.hfim.interaction_mode
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let e = &self.encoder;
        if !(0.0..1.0).contains(&e.dropout) {
            return bad(format!("dropout {} not in [0, 1)", e.dropout));
        }
        if e.hidden_bert == 0 || e.hidden_lstm_half == 0 {
            return bad("channel widths must be positive".into());
        }
        if e.self_attention_heads == 0 || e.hidden_lstm() % e.self_attention_heads != 0 {
            return bad(format!(
                "{} self-attention heads do not divide the LSTM channel width {}",
                e.self_attention_heads,
                e.hidden_lstm()
            ));
        }
        let g = &self.graphs;
        if g.sem_attention_heads == 0 || e.hidden_bert % g.sem_attention_heads != 0 {
            return bad(format!(
                "{} semantic attention heads do not divide {}",
                g.sem_attention_heads, e.hidden_bert
            ));
        }
        if g.gcn_layers == 0 {
            return bad("gcn_layers must be at least 1".into());
        }
        match e.backbone {
            BackboneKind::Pretrained if e.pretrained_path.is_none() => {
                return bad("backbone `pretrained` needs encoder.pretrained_path".into())
            }
            BackboneKind::Toy => {
                let t = &e.toy;
                if t.layers == 0 || t.heads == 0 || e.hidden_bert % t.heads != 0 {
                    return bad(format!(
                        "toy backbone needs >=1 layer and heads dividing {}",
                        e.hidden_bert
                    ));
                }
                if t.max_positions < 3 {
                    return bad("toy max_positions must be at least 3".into());
                }
            }
            _ => {}
        }
        if self.separation.alpha < 0.0 {
            return bad("alpha must be >= 0".into());
        }
        if self.separation.epsilon <= 0.0 {
            return bad("epsilon must be > 0".into());
        }
        let h = &self.hfim;
        if self.interaction_mode() == InteractionMode::Hfim
            && (h.gcnconv_layers == 0 || h.gatedconv_layers == 0 || h.sadpool_layers == 0)
        {
            return bad("HFIM layer counts must be at least 1".into());
        }
        if !h.sparsify_threshold.is_finite() || h.sparsify_threshold < 0.0 {
            return bad("sparsify_threshold must be finite and >= 0".into());
        }
        if self.fused_width() == 0 {
            return bad("fused_width must be positive".into());
        }
        let s = &self.spans;
        if s.max_span_length == 0 {
            return bad("max_span_length must be at least 1".into());
        }
        if !(s.keep_ratio > 0.0 && s.keep_ratio <= 1.0) {
            return bad(format!("keep_ratio {} not in (0, 1]", s.keep_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || self.head_learning_rate.is_some_and(|lr| !(lr > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must be in [0, 1)".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_settings() {
        let c = RunConfig::default();
        assert_eq!(c.encoder.hidden_bert, 768);
        assert_eq!(c.encoder.hidden_lstm(), 768);
        assert_eq!(c.encoder.dropout, 0.5);
        assert_eq!(c.learning_rate, 5e-5);
        assert_eq!(c.weight_decay, 1e-2);
        assert_eq!(c.spans.max_span_length, 8);
        assert_eq!(c.graphs.gcn_layers, 2);
        assert_eq!(
            (c.hfim.gcnconv_layers, c.hfim.gatedconv_layers, c.hfim.sadpool_layers),
            (1, 1, 1)
        );
        assert_eq!(c.separation.alpha, 10.0);
        assert_eq!((c.epochs, c.batch_size), (120, 16));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"learning_rat": 1.0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"encoder": {"hiden_bert": 3}}"#).is_err());
        let c = RunConfig::from_json(r#"{"ablation": "wo_ss", "seed": 3}"#).unwrap();
        assert_eq!((c.ablation, c.seed), (Ablation::WoSs, 3));
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
        assert!(matches!(
            "wo_everything".parse::<Ablation>(),
            Err(ConfigError::UnknownAblation(_))
        ));
    }

    #[test]
    fn validation() {
        assert!(RunConfig::toy().validate().is_ok());
        // pretrained without a path
        assert!(RunConfig::default().validate().is_err());
        let mut c = RunConfig::toy();
        c.encoder.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.encoder.self_attention_heads = 5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.hfim.gatedconv_layers = 0;
        assert!(c.validate().is_err());
        c.ablation = Ablation::Biaffine;
        assert!(c.validate().is_ok());
        let mut c = RunConfig::toy();
        c.separation.epsilon = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn biaffine_ablation_swaps_interaction_mode() {
        let mut c = RunConfig::toy();
        assert_eq!(c.interaction_mode(), InteractionMode::Hfim);
        c.ablation = Ablation::Biaffine;
        assert_eq!(c.interaction_mode(), InteractionMode::Biaffine);
    }
}

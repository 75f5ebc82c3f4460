//! The declarative run configuration. Every field has a default, unknown
//! keys are rejected, and each stage writes the fully resolved form next
//! to its outputs so a run can be repeated from its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use varmt::corpus::Scenario;
use varmt::nmt::{TrainingConfig, TransformerConfig};
use varmt::recipes::RecipeKind;
use varmt::synth::SynthConfig;
use varmt::varietyid::FeatureConfig;
use varmt::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed for the whole run; stages derive their own streams.
    pub seed: u64,
    pub data: DataSection,
    /// Present when the run generates its own corpus instead of reading
    /// files.
    pub synth: Option<SynthSection>,
    pub subword: SubwordSection,
    pub classifier: ClassifierSection,
    pub recipe: RecipeSection,
    pub nmt: NmtSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// "supervised", "unsupervised", or "semi".
    pub scenario: String,
    /// Fraction of training pairs per variety that keep their label in the
    /// semi-supervised scenario.
    pub labeled_fraction: f64,
    /// Sentence pairs longer than this many tokens on either side are
    /// dropped during preparation.
    pub max_len: usize,
    /// Display names for the two varieties.
    pub variety_a: String,
    pub variety_b: String,
    /// Input files; required by `prepare`, ignored by `synth`.
    pub files: Option<DataFiles>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            scenario: "supervised".into(),
            labeled_fraction: 1.0,
            max_len: 70,
            variety_a: "A".into(),
            variety_b: "B".into(),
            files: None,
        }
    }
}

/// Tokenized-text inputs: one sentence per line, source and target files
/// aligned by line number. Paths are relative to the workspace root given
/// on the command line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub train_a_source: PathBuf,
    pub train_a_target: PathBuf,
    pub train_b_source: PathBuf,
    pub train_b_target: PathBuf,
    pub dev_a_source: PathBuf,
    pub dev_a_target: PathBuf,
    pub dev_b_source: PathBuf,
    pub dev_b_target: PathBuf,
    pub test_a_source: PathBuf,
    pub test_a_target: PathBuf,
    pub test_b_source: PathBuf,
    pub test_b_target: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub vocab_size: usize,
    pub n_pairs_a: usize,
    pub n_pairs_b: usize,
    pub divergence_rate: f64,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            vocab_size: d.vocab_size,
            n_pairs_a: d.n_pairs_a,
            n_pairs_b: d.n_pairs_b,
            divergence_rate: d.divergence_rate,
            min_sentence_len: d.sentence_len_range.0,
            max_sentence_len: d.sentence_len_range.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubwordSection {
    pub vocab_size: usize,
}

impl Default for SubwordSection {
    fn default() -> Self {
        SubwordSection { vocab_size: 512 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub word_ngram_max: usize,
    pub char_ngram_min: usize,
    pub char_ngram_max: usize,
    /// Power of two. The command-line default is smaller than the library
    /// default to keep pipeline artifacts compact.
    pub hash_buckets: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let d = FeatureConfig::default();
        ClassifierSection {
            word_ngram_max: d.word_ngram_max,
            char_ngram_min: d.char_ngram_min,
            char_ngram_max: d.char_ngram_max,
            hash_buckets: 1 << 16,
            embed_dim: d.embed_dim,
            epochs: 5,
            learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecipeSection {
    /// One of: gen, spec-a, spec-b, ada-a, ada-b, mul, mu, mc2, mc3.
    pub recipe: String,
}

impl Default for RecipeSection {
    fn default() -> Self {
        RecipeSection { recipe: "gen".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmtSection {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub share_embeddings: bool,
}

impl Default for NmtSection {
    fn default() -> Self {
        let d = TransformerConfig::default();
        NmtSection {
            num_layers: d.num_layers,
            model_dim: d.model_dim,
            num_heads: d.num_heads,
            ffn_dim: d.ffn_dim,
            dropout: d.dropout,
            max_positions: d.max_positions,
            share_embeddings: d.share_embeddings,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub peak_lr_factor: f64,
    pub warmup_steps: usize,
    pub batch_tokens: usize,
    pub total_steps: usize,
    pub checkpoint_every: usize,
    pub label_smoothing: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainingConfig::default();
        TrainSection {
            peak_lr_factor: d.peak_lr_factor,
            warmup_steps: d.warmup_steps,
            batch_tokens: d.batch_tokens,
            total_steps: d.total_steps,
            checkpoint_every: d.checkpoint_every,
            label_smoothing: d.label_smoothing,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection { beam_size: 5, max_len: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub bootstrap_resamples: usize,
    pub alpha: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { bootstrap_resamples: 1000, alpha: 0.05 }
    }
}

impl RunConfig {
    /// Reads a config file, rejecting unknown keys.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Writes the fully resolved configuration (all defaults expanded).
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))?;
        varmt::util::atomic_write(path, text.as_bytes())
    }

    pub fn scenario(&self) -> Result<Scenario> {
        match self.data.scenario.as_str() {
            "supervised" => Ok(Scenario::Supervised),
            "unsupervised" => Ok(Scenario::Unsupervised),
            "semi" => Ok(Scenario::SemiSupervised),
            other => Err(Error::Config(format!(
                "unknown scenario {other:?}; expected supervised, unsupervised, or semi"
            ))),
        }
    }

    pub fn recipe(&self) -> Result<RecipeKind> {
        self.recipe.recipe.parse()
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let s = self
            .synth
            .as_ref()
            .ok_or_else(|| Error::Config("this run has no [synth] section".into()))?;
        Ok(SynthConfig {
            vocab_size: s.vocab_size,
            n_pairs_a: s.n_pairs_a,
            n_pairs_b: s.n_pairs_b,
            divergence_rate: s.divergence_rate,
            sentence_len_range: (s.min_sentence_len, s.max_sentence_len),
            seed: self.seed,
        })
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            word_ngram_max: self.classifier.word_ngram_max,
            char_ngram_min: self.classifier.char_ngram_min,
            char_ngram_max: self.classifier.char_ngram_max,
            hash_buckets: self.classifier.hash_buckets,
            embed_dim: self.classifier.embed_dim,
        }
    }

    /// The architecture for a given subword inventory size.
    pub fn transformer_config(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            num_layers: self.nmt.num_layers,
            model_dim: self.nmt.model_dim,
            num_heads: self.nmt.num_heads,
            ffn_dim: self.nmt.ffn_dim,
            dropout: self.nmt.dropout,
            max_positions: self.nmt.max_positions,
            vocab_size,
            share_embeddings: self.nmt.share_embeddings,
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            peak_lr_factor: self.train.peak_lr_factor,
            warmup_steps: self.train.warmup_steps,
            batch_tokens: self.train.batch_tokens,
            total_steps: self.train.total_steps,
            checkpoint_every: self.train.checkpoint_every,
            label_smoothing: self.train.label_smoothing,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_an_empty_config() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.data.scenario, "supervised");
        assert_eq!(cfg.subword.vocab_size, 512);
        assert_eq!(cfg.classifier.hash_buckets, 1 << 16);
        assert_eq!(cfg.decode.beam_size, 5);
        assert!(cfg.synth.is_none());
        assert!(cfg.data.files.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[data]\nbogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nbogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[synth]\nbogus = 1").is_err());
    }

    #[test]
    fn resolved_roundtrip_preserves_values() {
        let mut cfg: RunConfig = toml::from_str("seed = 9\n[train]\ntotal_steps = 77").unwrap();
        cfg.synth = Some(SynthSection::default());
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.train.total_steps, 77);
        assert!(back.synth.is_some());
        // The resolved form spells out every default explicitly.
        assert!(text.contains("beam_size = 5"));
        assert!(text.contains("label_smoothing = 0.1"));
    }

    #[test]
    fn scenario_and_recipe_parsing() {
        let mut cfg = RunConfig::default();
        cfg.data.scenario = "semi".into();
        assert_eq!(cfg.scenario().unwrap(), Scenario::SemiSupervised);
        cfg.data.scenario = "other".into();
        assert!(cfg.scenario().is_err());
        cfg.recipe.recipe = "mc2".into();
        assert_eq!(cfg.recipe().unwrap(), RecipeKind::MultiClassified2);
        cfg.recipe.recipe = "nope".into();
        assert!(cfg.recipe().is_err());
    }
}

//! Synthetic two-variety parallel corpora with known ground truth.
//!
//! The generator builds a random source lexicon and a bijective
//! word-for-word mapping onto a target lexicon. A configurable fraction of
//! target words is "diverged": variety A realizes the base form, variety B
//! a distinct variant form. Every claim made about the pipeline can then
//! be checked against construction-time truth: the exact translation of
//! any source sentence, the variety of any target sentence, and which
//! surface tokens mark a variety.
//!
//! All sentences are globally unique by source text, so train/dev/test
//! splits are automatically contamination-free and a sentence's variety
//! can be keyed by its target text.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::corpus::{
    partition, ParallelCorpus, PartitionedDataset, Scenario, SentencePair, Variety, VarietyTag,
};
use crate::error::{Error, Result};
use crate::util::{atomic_write, derive_seed, read_lines};
use crate::varietyid::{sentence_fingerprint, VarietyJudge};

/// Generator parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    /// Number of distinct base words in each language.
    pub vocab_size: usize,
    /// Pairs generated for variety A / variety B (dev and test are carved
    /// out of these).
    pub n_pairs_a: usize,
    pub n_pairs_b: usize,
    /// Fraction of the target vocabulary with variety-specific variants.
    pub divergence_rate: f64,
    /// Uniform sentence length bounds, inclusive.
    pub sentence_len_range: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 256,
            n_pairs_a: 2000,
            n_pairs_b: 2000,
            divergence_rate: 0.15,
            sentence_len_range: (3, 12),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if !self.divergence_rate.is_finite() || !(0.0..=1.0).contains(&self.divergence_rate) {
            return Err(Error::Config(format!(
                "divergence_rate must be in [0, 1], got {}",
                self.divergence_rate
            )));
        }
        let (lo, hi) = self.sentence_len_range;
        if lo < 1 || lo > hi {
            return Err(Error::Config(format!(
                "sentence_len_range must satisfy 1 <= min <= max, got ({lo}, {hi})"
            )));
        }
        // Each variety needs room for at least a handful of training pairs
        // beyond its dev/test holdouts.
        for (name, n) in [("n_pairs_a", self.n_pairs_a), ("n_pairs_b", self.n_pairs_b)] {
            if n < 12 {
                return Err(Error::Config(format!("{name} must be at least 12, got {n}")));
            }
        }
        Ok(())
    }

    /// Diverged-word count implied by the config.
    pub fn n_diverged(&self) -> usize {
        (self.vocab_size as f64 * self.divergence_rate).round() as usize
    }

    /// Dev and test sizes per variety: a tenth of the pairs, clamped.
    pub fn holdout_size(n_pairs: usize) -> usize {
        (n_pairs / 10).clamp(4, 256)
    }
}

/// Ground-truth lexical divergence table: base word mapped to its
/// (variant A, variant B) surface forms. Variety A realizes the base form
/// itself; variety B a distinct word. Undiverged words are identical in
/// both varieties and do not appear in the table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VariantTable {
    /// base form -> (variant_A, variant_B); variant_A equals the base.
    diverged: BTreeMap<String, (String, String)>,
}

impl VariantTable {
    pub fn new(diverged: BTreeMap<String, (String, String)>) -> Result<VariantTable> {
        for (base, (va, vb)) in &diverged {
            if va == vb {
                return Err(Error::Config(format!(
                    "variant forms for '{base}' must differ, both are '{va}'"
                )));
            }
        }
        Ok(VariantTable { diverged })
    }

    pub fn len(&self) -> usize {
        self.diverged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diverged.is_empty()
    }

    /// Which variety a surface token marks, if any.
    pub fn classify_token(&self, token: &str) -> Option<Variety> {
        // variant_A is the base form, so the key lookup covers A.
        if self.diverged.contains_key(token) {
            return Some(Variety::A);
        }
        if self.diverged.values().any(|(_, vb)| vb == token) {
            return Some(Variety::B);
        }
        None
    }

    /// The surface form a base word takes in the given variety.
    pub fn realize<'a>(&'a self, base: &'a str, variety: Variety) -> &'a str {
        match self.diverged.get(base) {
            Some((va, vb)) => match variety {
                Variety::A => va,
                Variety::B => vb,
            },
            None => base,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &(String, String))> {
        self.diverged.iter()
    }

    /// Two-column text format: variant_A TAB variant_B, one diverged word
    /// per line, sorted by base form.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (va, vb) in self.diverged.values() {
            out.push_str(va);
            out.push('\t');
            out.push_str(vb);
            out.push('\n');
        }
        atomic_write(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<VariantTable> {
        let mut diverged = BTreeMap::new();
        let mut seen = HashSet::new();
        for (i, line) in read_lines(path)?.iter().enumerate() {
            let mut cols = line.split('\t');
            let (Some(va), Some(vb), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::format(path, format!("line {}: expected 2 columns", i + 1)));
            };
            if va == vb {
                return Err(Error::format(path, format!("line {}: variants identical", i + 1)));
            }
            if !seen.insert(va.to_string()) || !seen.insert(vb.to_string()) {
                return Err(Error::format(path, format!("line {}: duplicate form", i + 1)));
            }
            diverged.insert(va.to_string(), (va.to_string(), vb.to_string()));
        }
        Ok(VariantTable { diverged })
    }
}

/// The full generated language: lexicons plus divergence structure.
/// Internal to generation; tests use it to reconstruct ground truth.
struct World {
    source_words: Vec<String>,
    target_bases: Vec<String>,
    /// variant_B form for diverged word indices.
    variant_b: Vec<Option<String>>,
}

impl World {
    /// Word-for-word translation of a source index sequence.
    fn translate(&self, indices: &[usize], variety: Variety) -> Vec<String> {
        indices
            .iter()
            .map(|&i| match (&self.variant_b[i], variety) {
                (Some(vb), Variety::B) => vb.clone(),
                _ => self.target_bases[i].clone(),
            })
            .collect()
    }
}

/// Draws `n` distinct lowercase words of length 3-8, none colliding with
/// `taken`.
fn draw_words(n: usize, taken: &mut HashSet<String>, rng: &mut ChaCha12Rng) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(n);
    let budget = 100 * n + 1000;
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Config(
                "synthetic lexicon exhausted; reduce vocab_size or divergence_rate".into(),
            ));
        }
        let len = rng.random_range(3..=8usize);
        let word: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
        if taken.insert(word.clone()) {
            out.push(word);
        }
    }
    Ok(out)
}

fn build_world(config: &SynthConfig) -> Result<World> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 0));
    let mut taken = HashSet::new();
    let source_words = draw_words(config.vocab_size, &mut taken, &mut rng)?;
    let target_bases = draw_words(config.vocab_size, &mut taken, &mut rng)?;
    let n_div = config.n_diverged();
    let fresh = draw_words(n_div, &mut taken, &mut rng)?;

    let mut indices: Vec<usize> = (0..config.vocab_size).collect();
    indices.shuffle(&mut rng);
    let mut variant_b = vec![None; config.vocab_size];
    for (slot, vb) in indices.into_iter().zip(fresh) {
        variant_b[slot] = Some(vb);
    }
    Ok(World { source_words, target_bases, variant_b })
}

/// Generates one variety's corpus: globally unique source sentences and
/// their exact word-for-word translations.
fn generate_corpus(
    world: &World,
    config: &SynthConfig,
    variety: Variety,
    n_pairs: usize,
    seen_sources: &mut HashSet<String>,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<SentencePair>> {
    let (lo, hi) = config.sentence_len_range;
    let mut pairs = Vec::with_capacity(n_pairs);
    let budget = 100 * n_pairs + 1000;
    let mut attempts = 0;
    while pairs.len() < n_pairs {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Config(
                "synthetic sentence space exhausted; increase vocab_size or length range".into(),
            ));
        }
        let len = rng.random_range(lo..=hi);
        let indices: Vec<usize> =
            (0..len).map(|_| rng.random_range(0..config.vocab_size)).collect();
        let source_tokens: Vec<String> =
            indices.iter().map(|&i| world.source_words[i].clone()).collect();
        if !seen_sources.insert(source_tokens.join(" ")) {
            continue;
        }
        pairs.push(SentencePair {
            source_tokens,
            target_tokens: world.translate(&indices, variety),
            tag: VarietyTag::from(variety),
        });
    }
    Ok(pairs)
}

/// Generates a fully labeled (supervised) dataset plus its ground-truth
/// variant table. Dev and test sets are carved from the generated pairs,
/// disjoint by construction since every source sentence is unique.
pub fn generate(config: &SynthConfig) -> Result<(PartitionedDataset, VariantTable)> {
    generate_with_scenario(config, Scenario::Supervised, 1.0)
}

/// Generates under an explicit labeling scenario. For semi-supervised
/// runs, `labeled_fraction` of each variety's training pairs keeps its
/// tag; the rest move to the unlabeled pool (truth retained in the
/// dataset's side channel).
pub fn generate_with_scenario(
    config: &SynthConfig,
    scenario: Scenario,
    labeled_fraction: f64,
) -> Result<(PartitionedDataset, VariantTable)> {
    config.validate()?;
    let world = build_world(config)?;

    let mut seen = HashSet::new();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 1));
    let all_a = generate_corpus(&world, config, Variety::A, config.n_pairs_a, &mut seen, &mut rng)?;
    let all_b = generate_corpus(&world, config, Variety::B, config.n_pairs_b, &mut seen, &mut rng)?;

    let carve = |pairs: Vec<SentencePair>, n_pairs: usize| {
        let h = SynthConfig::holdout_size(n_pairs);
        let mut train = pairs;
        let test = train.split_off(train.len() - h);
        let dev = train.split_off(train.len() - h);
        (
            ParallelCorpus::new(train),
            ParallelCorpus::new(dev),
            ParallelCorpus::new(test),
        )
    };
    let (train_a, dev_a, test_a) = carve(all_a, config.n_pairs_a);
    let (train_b, dev_b, test_b) = carve(all_b, config.n_pairs_b);

    let dataset = partition(
        &train_a,
        &train_b,
        &dev_a,
        &dev_b,
        &test_a,
        &test_b,
        scenario,
        labeled_fraction,
        derive_seed(config.seed, 2),
    )?;

    let mut diverged = BTreeMap::new();
    for (i, vb) in world.variant_b.iter().enumerate() {
        if let Some(vb) = vb {
            let base = world.target_bases[i].clone();
            diverged.insert(base.clone(), (base, vb.clone()));
        }
    }
    Ok((dataset, VariantTable::new(diverged)?))
}

/// A ground-truth variety judge backed by the generator's side channel:
/// it maps every generated target sentence to its construction-time
/// variety. Panics on sentences it never generated. This is a test
/// oracle, not a model; it carries no training fingerprint, so data
/// disjointness checks do not apply to it.
pub struct OracleJudge {
    truth: HashMap<u64, Variety>,
}

impl OracleJudge {
    pub fn from_dataset(ds: &PartitionedDataset) -> OracleJudge {
        let mut truth = HashMap::new();
        let mut insert = |corpus: &ParallelCorpus, v: Variety| {
            for p in &corpus.pairs {
                truth.insert(sentence_fingerprint(&p.target_text()), v);
            }
        };
        insert(&ds.labeled_a, Variety::A);
        insert(&ds.dev_a, Variety::A);
        insert(&ds.test_a, Variety::A);
        insert(&ds.labeled_b, Variety::B);
        insert(&ds.dev_b, Variety::B);
        insert(&ds.test_b, Variety::B);
        assert_eq!(ds.unlabeled.len(), ds.unlabeled_truth.len());
        for (p, &v) in ds.unlabeled.pairs.iter().zip(&ds.unlabeled_truth) {
            truth.insert(sentence_fingerprint(&p.target_text()), v);
        }
        OracleJudge { truth }
    }
}

impl VarietyJudge for OracleJudge {
    fn classify(&self, sentence: &str) -> Variety {
        *self
            .truth
            .get(&sentence_fingerprint(sentence))
            .unwrap_or_else(|| panic!("oracle judge has no truth for: {sentence}"))
    }

    fn classify_or_abstain(&self, sentence: &str) -> VarietyTag {
        VarietyTag::from(self.classify(sentence))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::varietyid::roc_auc;

    fn small_config() -> SynthConfig {
        SynthConfig {
            vocab_size: 64,
            n_pairs_a: 120,
            n_pairs_b: 80,
            divergence_rate: 0.25,
            sentence_len_range: (3, 8),
            seed: 11,
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let ok = small_config();
        assert!(ok.validate().is_ok());
        assert!(SynthConfig { vocab_size: 1, ..ok }.validate().is_err());
        assert!(SynthConfig { divergence_rate: 1.5, ..ok }.validate().is_err());
        assert!(SynthConfig { sentence_len_range: (0, 5), ..ok }.validate().is_err());
        assert!(SynthConfig { sentence_len_range: (6, 5), ..ok }.validate().is_err());
        assert!(SynthConfig { n_pairs_a: 3, ..ok }.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let config = small_config();
        let (d1, t1) = generate(&config).unwrap();
        let (d2, t2) = generate(&config).unwrap();
        assert_eq!(d1.labeled_a, d2.labeled_a);
        assert_eq!(d1.test_b, d2.test_b);
        assert_eq!(t1, t2);

        let h_a = SynthConfig::holdout_size(config.n_pairs_a);
        let h_b = SynthConfig::holdout_size(config.n_pairs_b);
        assert_eq!(d1.labeled_a.len(), config.n_pairs_a - 2 * h_a);
        assert_eq!(d1.labeled_b.len(), config.n_pairs_b - 2 * h_b);
        assert_eq!(d1.dev_a.len(), h_a);
        assert_eq!(d1.test_a.len(), h_a);
        assert_eq!(d1.dev_b.len(), h_b);
        assert_eq!(d1.test_b.len(), h_b);
        assert!(d1.unlabeled.is_empty());
        assert_eq!(t1.len(), config.n_diverged());

        let other = generate(&SynthConfig { seed: 12, ..config }).unwrap().0;
        assert_ne!(other.labeled_a, d1.labeled_a);
    }

    #[test]
    fn sources_are_globally_unique() {
        let (ds, _) = generate(&small_config()).unwrap();
        let mut seen = HashSet::new();
        let all = [&ds.labeled_a, &ds.labeled_b, &ds.dev_a, &ds.dev_b, &ds.test_a, &ds.test_b];
        for corpus in all {
            for p in &corpus.pairs {
                assert!(seen.insert(p.source_text()), "duplicate source: {}", p.source_text());
            }
        }
    }

    #[test]
    fn translation_oracle_reproduces_targets() {
        let config = small_config();
        let world = build_world(&config).unwrap();
        let (ds, table) = generate(&config).unwrap();

        // Invert the source lexicon, then re-derive each target.
        let index: HashMap<&str, usize> =
            world.source_words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        let check = |corpus: &ParallelCorpus, v: Variety| {
            for p in &corpus.pairs {
                let indices: Vec<usize> =
                    p.source_tokens.iter().map(|w| index[w.as_str()]).collect();
                assert_eq!(world.translate(&indices, v), p.target_tokens);
                // Equivalent statement through the variant table.
                let via_table: Vec<String> = indices
                    .iter()
                    .map(|&i| table.realize(&world.target_bases[i], v).to_string())
                    .collect();
                assert_eq!(via_table, p.target_tokens);
            }
        };
        check(&ds.labeled_a, Variety::A);
        check(&ds.test_a, Variety::A);
        check(&ds.labeled_b, Variety::B);
        check(&ds.test_b, Variety::B);
    }

    #[test]
    fn variety_a_never_shows_b_forms() {
        let (ds, table) = generate(&small_config()).unwrap();
        for p in ds.labeled_a.pairs.iter().chain(&ds.dev_a.pairs).chain(&ds.test_a.pairs) {
            for tok in &p.target_tokens {
                assert_ne!(table.classify_token(tok), Some(Variety::B));
            }
        }
        for p in ds.labeled_b.pairs.iter().chain(&ds.dev_b.pairs).chain(&ds.test_b.pairs) {
            for tok in &p.target_tokens {
                assert_ne!(table.classify_token(tok), Some(Variety::A));
            }
        }
    }

    #[test]
    fn zero_divergence_collapses_varieties() {
        let config = SynthConfig { divergence_rate: 0.0, ..small_config() };
        let world = build_world(&config).unwrap();
        let (_, table) = generate(&config).unwrap();
        assert!(table.is_empty());
        let indices = vec![0, 5, 9, 3];
        assert_eq!(
            world.translate(&indices, Variety::A),
            world.translate(&indices, Variety::B)
        );
    }

    #[test]
    fn table_oracle_separates_diverged_sentences_perfectly() {
        let config = SynthConfig { divergence_rate: 0.15, vocab_size: 128, ..small_config() };
        let (ds, table) = generate(&config).unwrap();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (corpus, v) in [(&ds.test_a, Variety::A), (&ds.test_b, Variety::B)] {
            for p in &corpus.pairs {
                let marks: Vec<Variety> =
                    p.target_tokens.iter().filter_map(|t| table.classify_token(t)).collect();
                if marks.is_empty() {
                    continue; // undiverged sentences carry no signal
                }
                let b = marks.iter().filter(|m| **m == Variety::B).count() as f64;
                let a = marks.len() as f64 - b;
                scores.push(b - a);
                labels.push(v);
            }
        }
        assert!(scores.len() > 10, "expected diverged sentences in test sets");
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn semi_supervised_side_channel_matches_oracle() {
        let config = small_config();
        let (ds, _) = generate_with_scenario(&config, Scenario::SemiSupervised, 0.5).unwrap();
        assert!(!ds.unlabeled.is_empty());
        let judge = OracleJudge::from_dataset(&ds);
        for (p, &truth) in ds.unlabeled.pairs.iter().zip(&ds.unlabeled_truth) {
            assert_eq!(judge.classify(&p.target_text()), truth);
            assert_eq!(p.tag, VarietyTag::Unlabeled);
        }
        for p in &ds.labeled_a.pairs {
            assert_eq!(judge.classify(&p.target_text()), Variety::A);
        }
    }

    #[test]
    fn variant_table_roundtrip() {
        let (_, table) = generate(&small_config()).unwrap();
        assert!(!table.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("variants.tsv");
        table.save(&p).unwrap();
        let loaded = VariantTable::load(&p).unwrap();
        assert_eq!(table, loaded);
        loaded.save(&dir.path().join("v2.tsv")).unwrap();
        assert_eq!(
            std::fs::read(&p).unwrap(),
            std::fs::read(dir.path().join("v2.tsv")).unwrap()
        );
    }

    #[test]
    fn variant_table_rejects_equal_forms() {
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), ("x".to_string(), "x".to_string()));
        assert!(VariantTable::new(m).is_err());
    }
}

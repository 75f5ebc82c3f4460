//! Language-variety identification: hashed n-gram linear classifiers, a
//! five-member ensemble with two voting modes, and ROC AUC scoring.
//!
//! A classifier scores the TARGET side of a sentence pair only; source
//! text is never featurized. Features are word n-grams and character
//! n-grams hashed into a fixed number of buckets; a sentence embedding is
//! the mean of its feature embeddings, mapped to two classes by a linear
//! layer with softmax. Ensemble members share all hyperparameters and
//! differ only in their random initialization.

use std::path::Path;

use rayon::prelude::*;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::corpus::{Variety, VarietyTag};
use crate::error::{Error, Result};
use crate::util::{atomic_write, derive_seed, fnv1a64, fnv1a64_seeded, read_bytes, ByteReader, ByteWriter};

/// Hashing salts separating the word and character feature spaces.
const WORD_SALT: u64 = 0x57_4f_52_44_31;
const CHAR_SALT: u64 = 0x43_48_41_52_32;

/// Feature extraction hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureConfig {
    /// Word n-gram orders 1..=word_ngram_max.
    pub word_ngram_max: usize,
    /// Character n-gram orders char_ngram_min..=char_ngram_max over the
    /// raw sentence with boundary markers; (0, 0) disables them.
    pub char_ngram_min: usize,
    pub char_ngram_max: usize,
    /// Number of hash buckets; must be a power of two, at least 2^10.
    pub hash_buckets: usize,
    /// Embedding width.
    pub embed_dim: usize,
}

impl Default for FeatureConfig {
    /// Conventional defaults for the model family: word n-grams up to 2,
    /// character n-grams 2-5, 2^20 buckets, 16-dimensional embeddings.
    fn default() -> Self {
        FeatureConfig {
            word_ngram_max: 2,
            char_ngram_min: 2,
            char_ngram_max: 5,
            hash_buckets: 1 << 20,
            embed_dim: 16,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.word_ngram_max < 1 {
            return Err(Error::Config("word_ngram_max must be at least 1".into()));
        }
        let char_ok = (self.char_ngram_min == 0 && self.char_ngram_max == 0)
            || (self.char_ngram_min >= 1 && self.char_ngram_min <= self.char_ngram_max);
        if !char_ok {
            return Err(Error::Config(
                "char n-gram range must be (0, 0) or 1 <= min <= max".into(),
            ));
        }
        if !self.hash_buckets.is_power_of_two() || self.hash_buckets < 1 << 10 {
            return Err(Error::Config(
                "hash_buckets must be a power of two, at least 1024".into(),
            ));
        }
        if self.embed_dim < 1 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Extracts the hashed feature multiset of a sentence: word n-grams over
/// whitespace tokens and character n-grams over the raw string wrapped in
/// begin/end markers, each FNV-1a hashed with a salt per n-gram type.
/// Repeated n-grams yield repeated ids.
pub fn extract_features(text: &str, config: &FeatureConfig) -> Vec<usize> {
    let mask = config.hash_buckets - 1;
    let mut out = Vec::new();

    let tokens: Vec<&str> = text.split_whitespace().collect();
    for n in 1..=config.word_ngram_max {
        if n > tokens.len() {
            break;
        }
        for w in tokens.windows(n) {
            let gram = w.join("\u{1f}");
            out.push((fnv1a64_seeded(WORD_SALT, gram.as_bytes()) as usize) & mask);
        }
    }

    if config.char_ngram_max > 0 && !text.is_empty() {
        let mut chars: Vec<char> = Vec::with_capacity(text.chars().count() + 2);
        chars.push('\u{2}');
        chars.extend(text.chars());
        chars.push('\u{3}');
        for n in config.char_ngram_min..=config.char_ngram_max {
            if n > chars.len() {
                break;
            }
            for w in chars.windows(n) {
                let gram: String = w.iter().collect();
                out.push((fnv1a64_seeded(CHAR_SALT, gram.as_bytes()) as usize) & mask);
            }
        }
    }
    out
}

/// Balances classes by redrawing the minority class with replacement until
/// both classes have the majority count; the majority class passes through
/// untouched. The result is then shuffled deterministically.
pub fn oversample(examples: &[(String, Variety)], seed: u64) -> Result<Vec<(String, Variety)>> {
    let n_a = examples.iter().filter(|(_, v)| *v == Variety::A).count();
    let n_b = examples.len() - n_a;
    if n_a == 0 || n_b == 0 {
        return Err(Error::Config("oversampling requires both classes present".into()));
    }
    let mut out: Vec<(String, Variety)>;
    if n_a == n_b {
        out = examples.to_vec();
    } else {
        let minority = if n_a < n_b { Variety::A } else { Variety::B };
        let n_major = n_a.max(n_b);
        let pool: Vec<&(String, Variety)> =
            examples.iter().filter(|(_, v)| *v == minority).collect();
        out = examples.iter().filter(|(_, v)| *v != minority).cloned().collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0));
        for _ in 0..n_major {
            out.push(pool[rng.random_range(0..pool.len())].clone());
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1));
    use rand::seq::SliceRandom;
    out.shuffle(&mut rng);
    Ok(out)
}

/// A linear bag-of-features classifier over the two varieties.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearVarietyClassifier {
    /// [hash_buckets x embed_dim]
    pub input_embeddings: Array2<f64>,
    /// [2 x embed_dim]; row 0 scores variety A, row 1 variety B. No bias,
    /// so a sentence with no features scores exactly (0.5, 0.5).
    pub output_weights: Array2<f64>,
    pub config: FeatureConfig,
    pub seed: u64,
}

fn softmax2(za: f64, zb: f64) -> (f64, f64) {
    let m = za.max(zb);
    let ea = (za - m).exp();
    let eb = (zb - m).exp();
    let s = ea + eb;
    (ea / s, eb / s)
}

impl LinearVarietyClassifier {
    /// Mean feature embedding of a sentence; zero vector when no features.
    fn embed(&self, features: &[usize]) -> Vec<f64> {
        let d = self.config.embed_dim;
        let mut h = vec![0.0; d];
        if features.is_empty() {
            return h;
        }
        for &f in features {
            for (j, hj) in h.iter_mut().enumerate() {
                *hj += self.input_embeddings[[f, j]];
            }
        }
        let inv = 1.0 / features.len() as f64;
        for hj in &mut h {
            *hj *= inv;
        }
        h
    }

    fn logits(&self, h: &[f64]) -> (f64, f64) {
        let d = self.config.embed_dim;
        let mut za = 0.0;
        let mut zb = 0.0;
        for j in 0..d {
            za += self.output_weights[[0, j]] * h[j];
            zb += self.output_weights[[1, j]] * h[j];
        }
        (za, zb)
    }

    /// Class probabilities (p_A, p_B); finite, in (0, 1), summing to 1.
    pub fn predict_proba(&self, sentence: &str) -> (f64, f64) {
        let feats = extract_features(sentence, &self.config);
        let h = self.embed(&feats);
        let (za, zb) = self.logits(&h);
        softmax2(za, zb)
    }
}

/// Trains one linear classifier with plain SGD on cross-entropy, learning
/// rate decaying linearly to zero over `epochs` passes. Examples are
/// visited in the given order every epoch, so results are a deterministic
/// function of (example order, seed). Initialization is uniform in
/// [-1/embed_dim, 1/embed_dim].
pub fn train_classifier(
    examples: &[(String, Variety)],
    config: &FeatureConfig,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<LinearVarietyClassifier> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyData("classifier training set is empty".into()));
    }
    if epochs < 1 || lr <= 0.0 {
        return Err(Error::Config("need epochs >= 1 and lr > 0".into()));
    }
    let has_a = examples.iter().any(|(_, v)| *v == Variety::A);
    let has_b = examples.iter().any(|(_, v)| *v == Variety::B);
    if !has_a || !has_b {
        return Err(Error::Config("classifier training requires both classes".into()));
    }

    let d = config.embed_dim;
    let inv = 1.0 / d as f64;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut input_embeddings =
        Array2::from_shape_fn((config.hash_buckets, d), |_| rng.random_range(-inv..inv));
    let mut output_weights = Array2::from_shape_fn((2, d), |_| rng.random_range(-inv..inv));

    let features: Vec<Vec<usize>> =
        examples.iter().map(|(s, _)| extract_features(s, config)).collect();

    let total_steps = (epochs * examples.len()) as f64;
    let mut step = 0usize;
    for epoch in 0..epochs {
        for (i, (_, tag)) in examples.iter().enumerate() {
            let lr_t = lr * (1.0 - step as f64 / total_steps);
            let feats = &features[i];

            // Forward.
            let mut h = vec![0.0; d];
            if !feats.is_empty() {
                for &f in feats {
                    for (j, hj) in h.iter_mut().enumerate() {
                        *hj += input_embeddings[[f, j]];
                    }
                }
                let s = 1.0 / feats.len() as f64;
                for hj in &mut h {
                    *hj *= s;
                }
            }
            let mut za = 0.0;
            let mut zb = 0.0;
            for j in 0..d {
                za += output_weights[[0, j]] * h[j];
                zb += output_weights[[1, j]] * h[j];
            }
            let (pa, pb) = softmax2(za, zb);
            let p_true = if *tag == Variety::A { pa } else { pb };
            if !p_true.is_finite() || p_true <= 0.0 {
                return Err(Error::Numeric(format!(
                    "classifier loss became non-finite at epoch {epoch}, step {step}"
                )));
            }

            // Backward: dz = p - onehot(true class).
            let (dza, dzb) = match tag {
                Variety::A => (pa - 1.0, pb),
                Variety::B => (pa, pb - 1.0),
            };
            // dh uses the pre-update output weights.
            let mut dh = vec![0.0; d];
            for (j, dhj) in dh.iter_mut().enumerate() {
                *dhj = output_weights[[0, j]] * dza + output_weights[[1, j]] * dzb;
            }
            for j in 0..d {
                output_weights[[0, j]] -= lr_t * dza * h[j];
                output_weights[[1, j]] -= lr_t * dzb * h[j];
            }
            if !feats.is_empty() {
                let s = 1.0 / feats.len() as f64;
                for &f in feats {
                    for (j, dhj) in dh.iter().enumerate() {
                        input_embeddings[[f, j]] -= lr_t * dhj * s;
                    }
                }
            }
            step += 1;
        }
    }

    Ok(LinearVarietyClassifier {
        input_embeddings,
        output_weights,
        config: *config,
        seed,
    })
}

/// Soft fusion over five members' p_A values: argmax of summed class
/// probabilities, exact ties resolved toward A.
pub fn soft_fuse_probs(p_a: &[f64; 5]) -> Variety {
    let sum_a: f64 = p_a.iter().sum();
    let sum_b: f64 = p_a.iter().map(|p| 1.0 - p).sum();
    if sum_b > sum_a {
        Variety::B
    } else {
        Variety::A
    }
}

/// Strict-majority voting over five members' p_A values: a label is
/// assigned iff at least three members give it probability strictly above
/// one half; otherwise the sentence stays unlabeled. At most one class can
/// ever satisfy the rule.
pub fn majority_abstain_probs(p_a: &[f64; 5]) -> VarietyTag {
    let votes_a = p_a.iter().filter(|&&p| p > 0.5).count();
    let votes_b = p_a.iter().filter(|&&p| p < 0.5).count();
    if votes_a >= 3 {
        VarietyTag::A
    } else if votes_b >= 3 {
        VarietyTag::B
    } else {
        VarietyTag::Unlabeled
    }
}

/// Five linear classifiers sharing one configuration, differing only in
/// initialization seed.
#[derive(Debug, Clone, PartialEq)]
pub struct VarietyEnsemble {
    pub members: Vec<LinearVarietyClassifier>,
    /// Sorted FNV-1a hashes of the sentences the ensemble was trained on
    /// (before oversampling); used to enforce disjointness from
    /// translation training data where required.
    training_fingerprint: Vec<u64>,
}

/// Fingerprint under which training sentences are recorded and compared.
pub fn sentence_fingerprint(sentence: &str) -> u64 {
    fnv1a64(sentence.as_bytes())
}

impl VarietyEnsemble {
    pub const N_MEMBERS: usize = 5;

    /// Trains the five members on the oversampled example list. All
    /// members see the same balanced data; only their initialization
    /// differs.
    pub fn train(
        examples: &[(String, Variety)],
        config: &FeatureConfig,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<VarietyEnsemble> {
        let balanced = oversample(examples, derive_seed(seed, 100))?;
        // Members train in parallel; each draws from its own derived seed,
        // so the ensemble is identical for any thread count.
        let members = (0..Self::N_MEMBERS)
            .into_par_iter()
            .map(|m| train_classifier(&balanced, config, epochs, lr, derive_seed(seed, m as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut training_fingerprint: Vec<u64> =
            examples.iter().map(|(s, _)| sentence_fingerprint(s)).collect();
        training_fingerprint.sort_unstable();
        Ok(VarietyEnsemble { members, training_fingerprint })
    }

    fn member_probs(&self, sentence: &str) -> [f64; 5] {
        let mut p = [0.0; 5];
        for (i, m) in self.members.iter().enumerate() {
            p[i] = m.predict_proba(sentence).0;
        }
        p
    }

    /// Soft fusion: argmax of the sum of class probabilities; ties to A.
    pub fn soft_fuse(&self, sentence: &str) -> Variety {
        soft_fuse_probs(&self.member_probs(sentence))
    }

    /// Strict-majority voting with abstention.
    pub fn majority_abstain(&self, sentence: &str) -> VarietyTag {
        majority_abstain_probs(&self.member_probs(sentence))
    }

    /// Mean p_B over members; a convenient ranking score for AUC.
    pub fn score_b(&self, sentence: &str) -> f64 {
        let p = self.member_probs(sentence);
        p.iter().map(|pa| 1.0 - pa).sum::<f64>() / Self::N_MEMBERS as f64
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.members[0].config
    }

    const MAGIC: &'static [u8; 4] = b"VMTC";
    const VERSION: u32 = 1;

    /// Serializes to the versioned binary ensemble format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.raw(Self::MAGIC);
        w.u32(Self::VERSION);
        let c = self.config();
        w.u32(c.word_ngram_max as u32);
        w.u32(c.char_ngram_min as u32);
        w.u32(c.char_ngram_max as u32);
        w.u64(c.hash_buckets as u64);
        w.u32(c.embed_dim as u32);
        w.u32(self.members.len() as u32);
        for m in &self.members {
            w.u64(m.seed);
            for v in m.input_embeddings.iter() {
                w.f64(*v);
            }
            for v in m.output_weights.iter() {
                w.f64(*v);
            }
        }
        w.u64(self.training_fingerprint.len() as u64);
        for &h in &self.training_fingerprint {
            w.u64(h);
        }
        w.into_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<VarietyEnsemble> {
        let bytes = read_bytes(path)?;
        let mut r = ByteReader::new(&bytes, path);
        if r.raw(4)? != Self::MAGIC {
            return Err(r.err("not an ensemble file"));
        }
        if r.u32()? != Self::VERSION {
            return Err(r.err("unsupported version"));
        }
        let config = FeatureConfig {
            word_ngram_max: r.u32()? as usize,
            char_ngram_min: r.u32()? as usize,
            char_ngram_max: r.u32()? as usize,
            hash_buckets: r.u64()? as usize,
            embed_dim: r.u32()? as usize,
        };
        config.validate().map_err(|e| r.err(format!("bad stored config: {e}")))?;
        let n_members = r.u32()? as usize;
        if n_members != Self::N_MEMBERS {
            return Err(r.err(format!("expected {} members, found {n_members}", Self::N_MEMBERS)));
        }
        let mut members = Vec::with_capacity(n_members);
        for _ in 0..n_members {
            let seed = r.u64()?;
            let mut input = Vec::with_capacity(config.hash_buckets * config.embed_dim);
            for _ in 0..config.hash_buckets * config.embed_dim {
                input.push(r.f64()?);
            }
            let mut output = Vec::with_capacity(2 * config.embed_dim);
            for _ in 0..2 * config.embed_dim {
                output.push(r.f64()?);
            }
            members.push(LinearVarietyClassifier {
                input_embeddings: Array2::from_shape_vec((config.hash_buckets, config.embed_dim), input)
                    .expect("shape checked"),
                output_weights: Array2::from_shape_vec((2, config.embed_dim), output)
                    .expect("shape checked"),
                config,
                seed,
            });
        }
        let n_fp = r.u64()? as usize;
        let mut training_fingerprint = Vec::with_capacity(n_fp);
        for _ in 0..n_fp {
            training_fingerprint.push(r.u64()?);
        }
        r.finish()?;
        Ok(VarietyEnsemble { members, training_fingerprint })
    }
}

/// Anything that can assign a variety to a target sentence. Implemented by
/// [`VarietyEnsemble`] for real pipelines and by the synthetic data
/// oracle for ground-truth checks.
pub trait VarietyJudge {
    /// Always assigns one of the two varieties (soft decision).
    fn classify(&self, sentence: &str) -> Variety;

    /// Assigns a variety or abstains.
    fn classify_or_abstain(&self, sentence: &str) -> VarietyTag;

    /// Sorted fingerprint multiset of the sentences this judge was trained
    /// on; `None` when the judge carries no training data (oracles).
    fn training_fingerprint(&self) -> Option<&[u64]> {
        None
    }
}

impl VarietyJudge for VarietyEnsemble {
    fn classify(&self, sentence: &str) -> Variety {
        self.soft_fuse(sentence)
    }

    fn classify_or_abstain(&self, sentence: &str) -> VarietyTag {
        self.majority_abstain(sentence)
    }

    fn training_fingerprint(&self) -> Option<&[u64]> {
        Some(&self.training_fingerprint)
    }
}

/// ROC AUC with variety B as the positive class: the probability that a
/// uniformly random B example scores strictly above a uniformly random A
/// example, ties counting one half (the rank-sum formulation). Computed in
/// exact integer arithmetic, then converted; this is the reference
/// semantics for the metric.
///
/// ```
/// use varmt::corpus::Variety::{A, B};
/// let auc = varmt::varietyid::roc_auc(&[0.1, 0.4, 0.35, 0.8], &[A, A, B, B]).unwrap();
/// assert_eq!(auc, 0.75);
/// ```
pub fn roc_auc(scores: &[f64], labels: &[Variety]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Alignment { left: scores.len(), right: labels.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score in roc_auc".into()));
    }
    let n_b = labels.iter().filter(|v| **v == Variety::B).count();
    let n_a = labels.len() - n_b;
    if n_a == 0 || n_b == 0 {
        return Err(Error::UndefinedMetric(
            "roc_auc needs both classes in the label list".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap());

    // For every tie group spanning 1-based ranks [first, last], each member
    // holds average rank (first + last) / 2. Accumulate twice the rank sum
    // of B examples so everything stays integral.
    let mut twice_rank_sum_b: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let first = (i + 1) as u128;
        let last = (j + 1) as u128;
        let b_in_group =
            order[i..=j].iter().filter(|&&k| labels[k] == Variety::B).count() as u128;
        twice_rank_sum_b += b_in_group * (first + last);
        i = j + 1;
    }

    let n_a = n_a as u128;
    let n_b = n_b as u128;
    let numerator = twice_rank_sum_b - n_b * (n_b + 1);
    let denominator = 2 * n_a * n_b;
    Ok(numerator as f64 / denominator as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn word_only_config() -> FeatureConfig {
        FeatureConfig {
            word_ngram_max: 1,
            char_ngram_min: 0,
            char_ngram_max: 0,
            hash_buckets: 1 << 10,
            embed_dim: 8,
        }
    }

    fn small_config() -> FeatureConfig {
        FeatureConfig { hash_buckets: 1 << 12, embed_dim: 8, ..FeatureConfig::default() }
    }

    /// Separable toy data: A sentences contain marker alpha, B beta.
    fn separable(n_a: usize, n_b: usize) -> Vec<(String, Variety)> {
        let mut out = Vec::new();
        for i in 0..n_a {
            out.push((format!("common{} alpha filler{}", i % 3, i % 5), Variety::A));
        }
        for i in 0..n_b {
            out.push((format!("common{} beta filler{}", i % 3, i % 5), Variety::B));
        }
        out
    }

    #[test]
    fn features_empty_and_deterministic() {
        let c = FeatureConfig::default();
        assert!(extract_features("", &c).is_empty());
        assert_eq!(extract_features("a b c", &c), extract_features("a b c", &c));
    }

    #[test]
    fn features_count_multiplicity() {
        let c = word_only_config();
        let feats = extract_features("ab ab", &c);
        assert_eq!(feats.len(), 2);
        assert_eq!(feats[0], feats[1]);
    }

    #[test]
    fn word_and_char_spaces_are_salted_apart() {
        // Same surface string as a word unigram and as a char n-gram must
        // not collide by construction of the salts.
        let config = FeatureConfig { hash_buckets: 1 << 20, ..FeatureConfig::default() };
        let word_only = extract_features("xy", &FeatureConfig { char_ngram_max: 0, char_ngram_min: 0, ..config });
        let with_chars = extract_features("xy", &config);
        assert!(word_only.len() < with_chars.len());
    }

    #[test]
    fn oversample_balances_and_preserves() {
        let data = separable(100, 25);
        let balanced = oversample(&data, 9).unwrap();
        let n_a = balanced.iter().filter(|(_, v)| *v == Variety::A).count();
        let n_b = balanced.len() - n_a;
        assert_eq!((n_a, n_b), (100, 100));

        // Majority class multiset preserved exactly.
        let mut majority: Vec<&String> =
            balanced.iter().filter(|(_, v)| *v == Variety::A).map(|(s, _)| s).collect();
        let mut original: Vec<&String> =
            data.iter().filter(|(_, v)| *v == Variety::A).map(|(s, _)| s).collect();
        majority.sort();
        original.sort();
        assert_eq!(majority, original);

        // Minority support is a subset of the original minority examples.
        let pool: std::collections::HashSet<&String> =
            data.iter().filter(|(_, v)| *v == Variety::B).map(|(s, _)| s).collect();
        assert!(balanced
            .iter()
            .filter(|(_, v)| *v == Variety::B)
            .all(|(s, _)| pool.contains(s)));

        // Already balanced input keeps its counts.
        let even = separable(10, 10);
        let out = oversample(&even, 3).unwrap();
        assert_eq!(out.len(), 20);

        // Single class is refused.
        let solo: Vec<(String, Variety)> = vec![("x".into(), Variety::A)];
        assert!(oversample(&solo, 0).is_err());
    }

    #[test]
    fn training_reaches_perfect_accuracy_on_separable_data() {
        let data = separable(20, 20);
        let model = train_classifier(&data, &small_config(), 30, 0.5, 42).unwrap();
        let mut correct = 0;
        for (s, v) in &data {
            let (pa, pb) = model.predict_proba(s);
            let pred = if pa >= pb { Variety::A } else { Variety::B };
            if pred == *v {
                correct += 1;
            }
        }
        assert_eq!(correct, data.len());
        let (pa, _) = model.predict_proba("common0 alpha filler0");
        assert!(pa > 0.9, "p_A = {pa}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = separable(8, 8);
        let m1 = train_classifier(&data, &small_config(), 3, 0.1, 7).unwrap();
        let m2 = train_classifier(&data, &small_config(), 3, 0.1, 7).unwrap();
        assert_eq!(m1.input_embeddings, m2.input_embeddings);
        assert_eq!(m1.output_weights, m2.output_weights);
        let m3 = train_classifier(&data, &small_config(), 3, 0.1, 8).unwrap();
        assert_ne!(m3.output_weights, m1.output_weights);
    }

    #[test]
    fn minimal_input_trains() {
        let data = vec![("alpha".to_string(), Variety::A), ("beta".to_string(), Variety::B)];
        let model = train_classifier(&data, &small_config(), 2, 0.1, 0).unwrap();
        let (pa, pb) = model.predict_proba("alpha");
        assert!(pa.is_finite() && pb.is_finite());
    }

    #[test]
    fn predict_proba_laws() {
        let data = separable(5, 5);
        let model = train_classifier(&data, &small_config(), 2, 0.1, 1).unwrap();
        let (pa, pb) = model.predict_proba("");
        assert_eq!((pa, pb), (0.5, 0.5));
        for s in ["alpha", "beta", "unseen words entirely"] {
            let (pa, pb) = model.predict_proba(s);
            assert!((pa + pb - 1.0).abs() < 1e-9);
            assert!(pa > 0.0 && pa < 1.0);
        }
    }

    #[test]
    fn soft_fusion_cases() {
        assert_eq!(soft_fuse_probs(&[0.6, 0.6, 0.6, 0.4, 0.4]), Variety::A);
        assert_eq!(soft_fuse_probs(&[0.9; 5]), Variety::A);
        assert_eq!(soft_fuse_probs(&[0.1; 5]), Variety::B);
        // Exactly balanced sums go to A.
        assert_eq!(soft_fuse_probs(&[0.5; 5]), Variety::A);
        assert_eq!(soft_fuse_probs(&[0.3, 0.7, 0.4, 0.6, 0.5]), Variety::A);
    }

    #[test]
    fn majority_abstain_cases() {
        assert_eq!(majority_abstain_probs(&[0.9, 0.8, 0.51, 0.2, 0.3]), VarietyTag::A);
        assert_eq!(majority_abstain_probs(&[0.5; 5]), VarietyTag::Unlabeled);
        assert_eq!(majority_abstain_probs(&[0.4; 5]), VarietyTag::B);
        assert_eq!(majority_abstain_probs(&[0.6, 0.6, 0.5, 0.5, 0.5]), VarietyTag::Unlabeled);
    }

    #[test]
    fn majority_sides_are_mutually_exclusive() {
        // Exhaustive over strict-side patterns (above / at / below 0.5).
        let levels = [0.4, 0.5, 0.6];
        for mask in 0..3usize.pow(5) {
            let mut p = [0.0; 5];
            let mut m = mask;
            for slot in &mut p {
                *slot = levels[m % 3];
                m /= 3;
            }
            let above = p.iter().filter(|&&x| x > 0.5).count();
            let below = p.iter().filter(|&&x| x < 0.5).count();
            assert!(!(above >= 3 && below >= 3));
            let tag = majority_abstain_probs(&p);
            match tag {
                VarietyTag::A => assert!(above >= 3),
                VarietyTag::B => assert!(below >= 3),
                VarietyTag::Unlabeled => assert!(above < 3 && below < 3),
            }
        }
    }

    #[test]
    fn ensemble_roundtrip_and_voting() {
        let data = separable(12, 12);
        let config = FeatureConfig { hash_buckets: 1 << 10, embed_dim: 4, ..FeatureConfig::default() };
        let ens = VarietyEnsemble::train(&data, &config, 30, 0.5, 5).unwrap();
        assert_eq!(ens.members.len(), 5);
        assert_eq!(ens.soft_fuse("common0 alpha filler0"), Variety::A);
        assert_eq!(ens.majority_abstain("common1 beta filler1"), VarietyTag::B);

        // Member order invariance of soft fusion.
        let mut reversed = ens.clone();
        reversed.members.reverse();
        for s in ["alpha", "beta", "common0 filler2"] {
            assert_eq!(ens.soft_fuse(s), reversed.soft_fuse(s));
        }

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ens.bin");
        ens.save(&p).unwrap();
        let loaded = VarietyEnsemble::load(&p).unwrap();
        assert_eq!(ens, loaded);
        loaded.save(&dir.path().join("ens2.bin")).unwrap();
        assert_eq!(
            std::fs::read(&p).unwrap(),
            std::fs::read(dir.path().join("ens2.bin")).unwrap()
        );
    }

    #[test]
    fn auc_hand_cases() {
        use Variety::{A, B};
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[A, A, B, B]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(roc_auc(&[0.0, 0.1, 0.9, 1.0], &[A, A, B, B]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.7, 0.7, 0.7, 0.7], &[A, B, A, B]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1], &[A]).is_err());
        assert!(roc_auc(&[0.1, 0.2], &[A, A]).is_err());
        assert!(roc_auc(&[0.1, 0.2, 0.3], &[A, B]).is_err());
    }

    /// Brute-force pairwise oracle in integer halves.
    fn auc_oracle(scores: &[f64], labels: &[Variety]) -> f64 {
        let mut halves = 0u64;
        let mut pairs = 0u64;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != Variety::B {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != Variety::A {
                    continue;
                }
                pairs += 1;
                halves += match si.partial_cmp(&sj).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        halves as f64 / (2 * pairs) as f64
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(
            raw in proptest::collection::vec((0u8..8, proptest::bool::ANY), 2..60)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 4.0).collect();
            let labels: Vec<Variety> =
                raw.iter().map(|(_, b)| if *b { Variety::B } else { Variety::A }).collect();
            prop_assume!(labels.iter().any(|v| *v == Variety::A));
            prop_assume!(labels.iter().any(|v| *v == Variety::B));
            let fast = roc_auc(&scores, &labels).unwrap();
            let slow = auc_oracle(&scores, &labels);
            prop_assert!((fast - slow).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            raw in proptest::collection::vec((-40i32..40, proptest::bool::ANY), 2..50),
            scale in 1u32..5,
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 8.0).collect();
            let labels: Vec<Variety> =
                raw.iter().map(|(_, b)| if *b { Variety::B } else { Variety::A }).collect();
            prop_assume!(labels.iter().any(|v| *v == Variety::A));
            prop_assume!(labels.iter().any(|v| *v == Variety::B));
            let base = roc_auc(&scores, &labels).unwrap();
            // Strictly monotone map: positive affine plus tanh bend.
            let mapped: Vec<f64> =
                scores.iter().map(|s| scale as f64 * s + s.tanh() + 2.0).collect();
            let transformed = roc_auc(&mapped, &labels).unwrap();
            prop_assert_eq!(base, transformed);
        }

        #[test]
        fn auc_flips_with_labels(
            raw in proptest::collection::vec((0u32..1000, proptest::bool::ANY), 2..50)
        ) {
            // Scores drawn from a large space; duplicates are possible, so
            // deduplicate to keep the flip law exact (it only holds tie-free).
            let mut seen = std::collections::HashSet::new();
            let filtered: Vec<(u32, bool)> =
                raw.into_iter().filter(|(s, _)| seen.insert(*s)).collect();
            let scores: Vec<f64> = filtered.iter().map(|(s, _)| *s as f64).collect();
            let labels: Vec<Variety> =
                filtered.iter().map(|(_, b)| if *b { Variety::B } else { Variety::A }).collect();
            prop_assume!(labels.iter().any(|v| *v == Variety::A));
            prop_assume!(labels.iter().any(|v| *v == Variety::B));
            let flipped: Vec<Variety> = labels.iter().map(|v| v.other()).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            let b = roc_auc(&scores, &flipped).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}

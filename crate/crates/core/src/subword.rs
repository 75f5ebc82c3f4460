//! Shared byte-pair-encoding subword model.
//!
//! One model serves source text and both target varieties, so all three
//! share a single id space. Six reserved tokens occupy the lowest ids:
//! padding, begin/end of sequence, unknown, and one steering token per
//! target variety. The steering tokens are atomic and never produced by
//! merges, so they survive segmentation as single ids.
//!
//! Words are segmented as character sequences closed by an end-of-word
//! marker symbol; merges learned on the training corpus are replayed in
//! acquisition order at segmentation time.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use crate::corpus::{ParallelCorpus, Variety};
use crate::error::{Error, Result};
use crate::util::{atomic_write, fnv1a64, read_lines};

/// Reserved tokens, in id order.
pub const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", "<2A>", "<2B>"];

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const VARIETY_A_ID: u32 = 4;
pub const VARIETY_B_ID: u32 = 5;

/// End-of-word marker symbol.
pub const EOW: &str = "</w>";

/// Steering token id for a variety.
pub fn variety_token_id(v: Variety) -> u32 {
    match v {
        Variety::A => VARIETY_A_ID,
        Variety::B => VARIETY_B_ID,
    }
}

/// True if `id` is one of the two variety steering tokens.
pub fn is_variety_token(id: u32) -> bool {
    id == VARIETY_A_ID || id == VARIETY_B_ID
}

/// A trained subword model: merge rules in acquisition order plus the
/// symbol vocabulary they build.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordModel {
    merges: Vec<(String, String)>,
    vocab: BTreeMap<String, u32>,
    inv_vocab: Vec<String>,
    target_vocab_size: usize,
    /// Merge pair -> rule index; rebuilt, never serialized.
    rank: HashMap<(String, String), u32>,
}

fn word_symbols(word: &str) -> Vec<String> {
    word.chars().map(|c| c.to_string()).chain([EOW.to_string()]).collect()
}

fn adjacent_pairs(symbols: &[String]) -> Vec<(String, String)> {
    symbols.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect()
}

/// Merges every left-to-right occurrence of `pair` in `symbols`.
fn apply_merge(symbols: &mut Vec<String>, pair: &(String, String)) {
    let merged = format!("{}{}", pair.0, pair.1);
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(merged.clone());
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    *symbols = out;
}

/// Trains a subword model on the union of source and target sides of the
/// given corpora.
///
/// Symbols start as characters plus the end-of-word marker; the most
/// frequent adjacent symbol pair is merged repeatedly until the vocabulary
/// reaches `target_vocab_size` (ties broken lexicographically on the pair,
/// so training is deterministic). The budget must cover the reserved
/// tokens, all distinct characters, and the marker; exactly meeting that
/// floor yields a character-level model with zero merges.
///
/// Training is fully deterministic; `seed` is accepted for interface
/// uniformity with the other trainers and does not affect the result.
pub fn train_subword(
    corpora: &[&ParallelCorpus],
    target_vocab_size: usize,
    seed: u64,
) -> Result<SubwordModel> {
    let _ = seed;
    // Word frequencies over all source and target tokens.
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for corpus in corpora {
        for pair in &corpus.pairs {
            for tok in pair.source_tokens.iter().chain(&pair.target_tokens) {
                *word_freq.entry(tok.clone()).or_insert(0) += 1;
            }
        }
    }
    if word_freq.is_empty() {
        return Err(Error::EmptyData("subword training needs at least one token".into()));
    }

    let chars: BTreeSet<String> = word_freq
        .keys()
        .flat_map(|w| w.chars().map(|c| c.to_string()))
        .collect();
    let floor = SPECIALS.len() + chars.len() + 1; // + end-of-word marker
    if target_vocab_size < floor {
        return Err(Error::Config(format!(
            "target_vocab_size {target_vocab_size} below floor {floor} \
             ({} reserved + {} characters + marker)",
            SPECIALS.len(),
            chars.len()
        )));
    }

    let mut vocab: BTreeMap<String, u32> = BTreeMap::new();
    let mut inv_vocab: Vec<String> = Vec::new();
    for s in SPECIALS {
        vocab.insert(s.to_string(), inv_vocab.len() as u32);
        inv_vocab.push(s.to_string());
    }
    let mut base: Vec<String> = chars.into_iter().collect();
    base.push(EOW.to_string());
    base.sort();
    for s in base {
        vocab.insert(s.clone(), inv_vocab.len() as u32);
        inv_vocab.push(s);
    }

    // Working state: one symbol sequence per distinct word, frequency
    // weighted pair counts, and which words currently contain each pair.
    let words: Vec<(Vec<String>, u64)> =
        word_freq.iter().map(|(w, &f)| (word_symbols(w), f)).collect();
    let mut words: Vec<(Vec<String>, u64)> = words;
    let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut pair_words: HashMap<(String, String), HashSet<usize>> = HashMap::new();
    for (i, (symbols, freq)) in words.iter().enumerate() {
        for p in adjacent_pairs(symbols) {
            *pair_counts.entry(p.clone()).or_insert(0) += freq;
            pair_words.entry(p).or_default().insert(i);
        }
    }

    let mut merges: Vec<(String, String)> = Vec::new();
    while vocab.len() < target_vocab_size {
        // Most frequent pair; first key in ascending order wins ties, which
        // is exactly the lexicographically smallest pair.
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .fold(None::<(&(String, String), u64)>, |acc, (p, &c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((p, c)),
            });
        let Some((best_pair, _)) = best else { break };
        let best_pair = best_pair.clone();
        let merged = format!("{}{}", best_pair.0, best_pair.1);

        let affected: Vec<usize> = pair_words
            .get(&best_pair)
            .map(|s| {
                let mut v: Vec<usize> = s.iter().copied().collect();
                v.sort_unstable();
                v
            })
            .unwrap_or_default();

        if SPECIALS.contains(&merged.as_str()) {
            // A merge may never recreate a reserved token string; drop the
            // pair and move on. (Unreachable with whitespace tokenization,
            // kept as a guard for exotic inputs.)
            pair_counts.remove(&best_pair);
            pair_words.remove(&best_pair);
            continue;
        }

        for i in affected {
            let (symbols, freq) = &mut words[i];
            let before = adjacent_pairs(symbols);
            apply_merge(symbols, &best_pair);
            let after = adjacent_pairs(symbols);
            for p in before {
                if let Some(c) = pair_counts.get_mut(&p) {
                    *c -= (*freq).min(*c);
                }
                if let Some(set) = pair_words.get_mut(&p) {
                    set.remove(&i);
                }
            }
            for p in after {
                *pair_counts.entry(p.clone()).or_insert(0) += *freq;
                pair_words.entry(p).or_default().insert(i);
            }
        }

        merges.push(best_pair);
        if !vocab.contains_key(&merged) {
            vocab.insert(merged.clone(), inv_vocab.len() as u32);
            inv_vocab.push(merged);
        }
    }

    let rank = build_rank(&merges);
    Ok(SubwordModel { merges, vocab, inv_vocab, target_vocab_size, rank })
}

fn build_rank(merges: &[(String, String)]) -> HashMap<(String, String), u32> {
    merges
        .iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), i as u32))
        .collect()
}

impl SubwordModel {
    /// Number of entries in the vocabulary (reserved tokens included).
    pub fn vocab_len(&self) -> usize {
        self.inv_vocab.len()
    }

    /// Vocabulary budget the model was trained toward.
    pub fn target_vocab_size(&self) -> usize {
        self.target_vocab_size
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id_of(&self, unit: &str) -> Option<u32> {
        self.vocab.get(unit).copied()
    }

    pub fn unit_of(&self, id: u32) -> Option<&str> {
        self.inv_vocab.get(id as usize).map(String::as_str)
    }

    /// Segments one word by replaying merge rules in acquisition order:
    /// repeatedly merge the present pair with the lowest rule index.
    fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = word_symbols(word);
        loop {
            let mut best: Option<(u32, (String, String))> = None;
            for p in symbols.windows(2) {
                let key = (p[0].clone(), p[1].clone());
                if let Some(&r) = self.rank.get(&key) {
                    if best.as_ref().is_none_or(|(br, _)| r < *br) {
                        best = Some((r, key));
                    }
                }
            }
            match best {
                Some((_, pair)) => apply_merge(&mut symbols, &pair),
                None => break,
            }
        }
        symbols
    }

    /// Segments tokens into subword unit strings. Characters outside the
    /// training alphabet surface as the unknown token.
    pub fn segment(&self, tokens: &[String]) -> Vec<String> {
        let mut out = Vec::new();
        for tok in tokens {
            for sym in self.segment_word(tok) {
                if self.vocab.contains_key(&sym) {
                    out.push(sym);
                } else {
                    out.push(SPECIALS[UNK_ID as usize].to_string());
                }
            }
        }
        out
    }

    /// Segments tokens directly to vocabulary ids.
    pub fn segment_ids(&self, tokens: &[String]) -> Vec<u32> {
        self.segment(tokens)
            .iter()
            .map(|u| self.vocab.get(u).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Inverse of [`segment`]: drops reserved tokens, concatenates units,
    /// and splits words at end-of-word markers.
    pub fn desegment(&self, units: &[String]) -> Vec<String> {
        let mut out = Vec::new();
        let mut current = String::new();
        for unit in units {
            if SPECIALS.contains(&unit.as_str()) {
                continue;
            }
            if let Some(stem) = unit.strip_suffix(EOW) {
                current.push_str(stem);
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                } else {
                    current.clear();
                }
            } else {
                current.push_str(unit);
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
        out
    }

    /// [`desegment`] over ids.
    pub fn desegment_ids(&self, ids: &[u32]) -> Result<Vec<String>> {
        let units: Vec<String> = ids
            .iter()
            .map(|&id| {
                self.unit_of(id)
                    .map(str::to_string)
                    .ok_or(Error::VocabId { id, vocab: self.vocab_len() })
            })
            .collect::<Result<_>>()?;
        Ok(self.desegment(&units))
    }

    /// Canonical text serialization; identical models serialize to
    /// identical bytes.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("varmt-subword v1\n");
        s.push_str(&format!("target_vocab_size = {}\n", self.target_vocab_size));
        s.push_str(&format!("merges = {}\n", self.merges.len()));
        s.push_str(&format!("vocab = {}\n", self.inv_vocab.len()));
        for (l, r) in &self.merges {
            s.push_str(&format!("{l}\t{r}\n"));
        }
        for (id, unit) in self.inv_vocab.iter().enumerate() {
            s.push_str(&format!("{id}\t{unit}\n"));
        }
        s
    }

    /// Stable identity of this model, embedded in translation checkpoints
    /// so a model is never decoded with the wrong vocabulary.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<SubwordModel> {
        let lines = read_lines(path)?;
        let bad = |reason: &str| Error::format(path, reason);
        if lines.first().map(String::as_str) != Some("varmt-subword v1") {
            return Err(bad("missing subword header"));
        }
        let field = |i: usize, key: &str| -> Result<usize> {
            lines
                .get(i)
                .and_then(|l| l.strip_prefix(&format!("{key} = ")))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(&format!("bad {key} line")))
        };
        let target_vocab_size = field(1, "target_vocab_size")?;
        let n_merges = field(2, "merges")?;
        let n_vocab = field(3, "vocab")?;
        if lines.len() != 4 + n_merges + n_vocab {
            return Err(bad("line count does not match header"));
        }
        let mut merges = Vec::with_capacity(n_merges);
        for l in &lines[4..4 + n_merges] {
            let (a, b) = l.split_once('\t').ok_or_else(|| bad("malformed merge line"))?;
            merges.push((a.to_string(), b.to_string()));
        }
        let mut vocab = BTreeMap::new();
        let mut inv_vocab = Vec::with_capacity(n_vocab);
        for (i, l) in lines[4 + n_merges..].iter().enumerate() {
            let (id, unit) = l.split_once('\t').ok_or_else(|| bad("malformed vocab line"))?;
            if id.parse::<usize>() != Ok(i) {
                return Err(bad("vocab ids must be dense and ascending"));
            }
            vocab.insert(unit.to_string(), i as u32);
            inv_vocab.push(unit.to_string());
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if inv_vocab.get(i).map(String::as_str) != Some(*s) {
                return Err(bad("reserved tokens must occupy the lowest ids"));
            }
        }
        let rank = build_rank(&merges);
        Ok(SubwordModel { merges, vocab, inv_vocab, target_vocab_size, rank })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, SentencePair, VarietyTag};
    use proptest::prelude::*;

    fn corpus_of(sentences: &[&str]) -> ParallelCorpus {
        ParallelCorpus::new(
            sentences
                .iter()
                .map(|s| SentencePair {
                    source_tokens: tokenize(s),
                    target_tokens: tokenize(s),
                    tag: VarietyTag::A,
                })
                .collect(),
        )
    }

    /// The classic walkthrough corpus; word frequencies are halved here
    /// because source and target sides are identical copies.
    fn classic() -> ParallelCorpus {
        let mut sentences = Vec::new();
        for _ in 0..5 {
            sentences.push("low");
        }
        for _ in 0..2 {
            sentences.push("lower");
        }
        for _ in 0..6 {
            sentences.push("newest");
        }
        for _ in 0..3 {
            sentences.push("widest");
        }
        corpus_of(&sentences)
    }

    #[test]
    fn first_merge_on_classic_corpus_is_e_s() {
        let c = classic();
        // distinct chars: d e i l n o r s t w  -> floor = 6 + 10 + 1 = 17
        let model = train_subword(&[&c], 18, 0).unwrap();
        assert_eq!(model.merges()[0], ("e".to_string(), "s".to_string()));
    }

    #[test]
    fn single_repeated_pair_merges_first() {
        let c = corpus_of(&["ab", "ab", "ab"]);
        let model = train_subword(&[&c], 10, 0).unwrap();
        assert_eq!(model.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn budget_at_floor_yields_character_model() {
        let c = corpus_of(&["abc"]);
        // floor: 6 reserved + {a b c} + marker = 10
        let model = train_subword(&[&c], 10, 0).unwrap();
        assert!(model.merges().is_empty());
        assert_eq!(model.vocab_len(), 10);
        assert_eq!(
            model.segment(&["abc".to_string()]),
            vec!["a", "b", "c", EOW]
        );
    }

    #[test]
    fn budget_below_floor_is_rejected() {
        let c = corpus_of(&["abc"]);
        match train_subword(&[&c], 9, 0) {
            Err(Error::Config(msg)) => assert!(msg.contains("floor 10"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn specials_have_fixed_ids() {
        let c = classic();
        let model = train_subword(&[&c], 24, 0).unwrap();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(model.id_of(s), Some(i as u32));
        }
        assert_eq!(variety_token_id(Variety::A), VARIETY_A_ID);
        assert_eq!(variety_token_id(Variety::B), VARIETY_B_ID);
        assert!(model.vocab_len() <= 24);
    }

    #[test]
    fn whole_word_in_vocab_is_one_unit() {
        let c = corpus_of(&["low low low low"]);
        let model = train_subword(&[&c], 16, 0).unwrap();
        // Budget is generous enough to learn "low</w>" as one symbol.
        assert_eq!(model.segment(&["low".to_string()]), vec![format!("low{EOW}")]);
    }

    #[test]
    fn segment_replays_merges_by_hand() {
        let c = classic();
        let model = train_subword(&[&c], 21, 0).unwrap();
        // Replay the learned merge list by hand on "lowest".
        let mut symbols = word_symbols("lowest");
        for pair in model.merges() {
            apply_merge(&mut symbols, pair);
        }
        assert_eq!(model.segment(&["lowest".to_string()]), symbols);
    }

    #[test]
    fn unknown_characters_become_unk() {
        let c = corpus_of(&["abc"]);
        let model = train_subword(&[&c], 12, 0).unwrap();
        let units = model.segment(&["axc".to_string()]);
        assert!(units.contains(&"<unk>".to_string()));
        let ids = model.segment_ids(&["axc".to_string()]);
        assert!(ids.contains(&UNK_ID));
    }

    #[test]
    fn desegment_drops_specials() {
        let c = corpus_of(&["abc"]);
        let model = train_subword(&[&c], 12, 0).unwrap();
        let mut units = vec!["<bos>".to_string(), "<2A>".to_string()];
        units.extend(model.segment(&["abc".to_string()]));
        units.push("<eos>".to_string());
        units.push("<pad>".to_string());
        assert_eq!(model.desegment(&units), vec!["abc"]);
        assert_eq!(model.desegment(&[]), Vec::<String>::new());
    }

    #[test]
    fn save_load_bit_exact() {
        let c = classic();
        let model = train_subword(&[&c], 30, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("subword.txt");
        model.save(&p).unwrap();
        let loaded = SubwordModel::load(&p).unwrap();
        assert_eq!(model, loaded);
        assert_eq!(model.fingerprint(), loaded.fingerprint());
        loaded.save(&dir.path().join("again.txt")).unwrap();
        assert_eq!(
            std::fs::read(p).unwrap(),
            std::fs::read(dir.path().join("again.txt")).unwrap()
        );
    }

    proptest! {
        #[test]
        fn roundtrip_on_training_alphabet(words in proptest::collection::vec("[a-e]{1,8}", 1..12)) {
            let text = words.join(" ");
            let c = corpus_of(&["abcde edcba", &text]);
            let model = train_subword(&[&c], 20, 0).unwrap();
            let tokens: Vec<String> = words.clone();
            let units = model.segment(&tokens);
            prop_assert_eq!(model.desegment(&units), tokens);
        }

        #[test]
        fn ids_roundtrip_matches_units(words in proptest::collection::vec("[a-c]{1,6}", 1..8)) {
            let text = words.join(" ");
            let c = corpus_of(&[&text]);
            let model = train_subword(&[&c], 14, 0).unwrap();
            let ids = model.segment_ids(&words);
            prop_assert_eq!(model.desegment_ids(&ids).unwrap(), model.desegment(&model.segment(&words)));
        }

        #[test]
        fn larger_budget_never_lengthens_output(
            words in proptest::collection::vec("[a-d]{1,7}", 2..10),
            extra in 1usize..6,
        ) {
            let text = words.join(" ");
            let c = corpus_of(&[&text, "aa bb cc dd abab"]);
            let small = train_subword(&[&c], 17, 0).unwrap();
            let large = train_subword(&[&c], 17 + extra, 0).unwrap();
            // Greedy training is deterministic, so the smaller model's
            // merge list is a prefix of the larger one's.
            prop_assert_eq!(
                small.merges(),
                &large.merges()[..small.merges().len()]
            );
            let s = small.segment(&words);
            let l = large.segment(&words);
            prop_assert!(l.len() <= s.len());
        }
    }
}

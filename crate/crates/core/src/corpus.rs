//! Parallel corpus ingestion, tokenization, length filtering, and
//! partitioning into the three label regimes used by the training recipes.
//!
//! A dataset is always organized around two target varieties, A and B.
//! Training pairs may carry their variety label, or sit in an unlabeled
//! pool; dev and test sets always stay labeled and disjoint from training.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::util::{atomic_write, derive_seed, read_lines};

/// One of the two target varieties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variety {
    A,
    B,
}

impl Variety {
    pub fn as_str(self) -> &'static str {
        match self {
            Variety::A => "A",
            Variety::B => "B",
        }
    }

    pub fn other(self) -> Variety {
        match self {
            Variety::A => Variety::B,
            Variety::B => Variety::A,
        }
    }
}

impl fmt::Display for Variety {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variety {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Variety::A),
            "B" | "b" => Ok(Variety::B),
            other => Err(Error::Config(format!("unknown variety: {other:?}"))),
        }
    }
}

/// Variety label on a sentence pair. `Unlabeled` is only legal inside
/// training pools; dev and test entries always carry A or B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarietyTag {
    A,
    B,
    Unlabeled,
}

impl VarietyTag {
    pub fn as_variety(self) -> Option<Variety> {
        match self {
            VarietyTag::A => Some(Variety::A),
            VarietyTag::B => Some(Variety::B),
            VarietyTag::Unlabeled => None,
        }
    }
}

impl From<Variety> for VarietyTag {
    fn from(v: Variety) -> Self {
        match v {
            Variety::A => VarietyTag::A,
            Variety::B => VarietyTag::B,
        }
    }
}

impl fmt::Display for VarietyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarietyTag::A => "A",
            VarietyTag::B => "B",
            VarietyTag::Unlabeled => "-",
        })
    }
}

/// One source/target sentence pair. Token sequences are non-empty for any
/// pair produced by [`load_parallel`] or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    pub tag: VarietyTag,
}

impl SentencePair {
    pub fn source_text(&self) -> String {
        self.source_tokens.join(" ")
    }

    pub fn target_text(&self) -> String {
        self.target_tokens.join(" ")
    }

    fn key(&self) -> (String, String) {
        (self.source_text(), self.target_text())
    }
}

/// An ordered sequence of sentence pairs plus the display names of the two
/// varieties the dataset distinguishes (e.g. ("pt-BR", "pt-EU")).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub variety_names: (String, String),
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Self {
        ParallelCorpus { pairs, variety_names: ("A".into(), "B".into()) }
    }

    pub fn with_names(mut self, a: &str, b: &str) -> Self {
        self.variety_names = (a.to_string(), b.to_string());
        self
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn retag(mut self, tag: VarietyTag) -> Self {
        for p in &mut self.pairs {
            p.tag = tag;
        }
        self
    }
}

/// Label regime of a partitioned dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Every training pair keeps its variety label.
    Supervised,
    /// No training pair has a label.
    Unsupervised,
    /// A fixed fraction per variety keeps labels, the rest are erased.
    SemiSupervised,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Supervised => "supervised",
            Scenario::Unsupervised => "unsupervised",
            Scenario::SemiSupervised => "semi-supervised",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Scenario::Supervised),
            "unsupervised" => Ok(Scenario::Unsupervised),
            "semi-supervised" | "semi" => Ok(Scenario::SemiSupervised),
            other => Err(Error::Config(format!("unknown scenario: {other:?}"))),
        }
    }
}

/// Training, dev, and test pools for a two-variety translation task.
///
/// `unlabeled_truth` is a side channel holding the true variety of each
/// `unlabeled` pair, aligned by index. [`partition`] always fills it (it
/// knows each pair's origin); evaluation code may consult it for synthetic
/// data, while training recipes never read it.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedDataset {
    pub labeled_a: ParallelCorpus,
    pub labeled_b: ParallelCorpus,
    pub unlabeled: ParallelCorpus,
    pub dev_a: ParallelCorpus,
    pub dev_b: ParallelCorpus,
    pub test_a: ParallelCorpus,
    pub test_b: ParallelCorpus,
    pub scenario: Scenario,
    /// Effective labeled fraction: 1 for supervised, 0 for unsupervised.
    pub labeled_fraction: f64,
    pub partition_seed: u64,
    pub variety_names: (String, String),
    pub unlabeled_truth: Vec<Variety>,
}

impl PartitionedDataset {
    /// Total number of training pairs across all pools.
    pub fn training_len(&self) -> usize {
        self.labeled_a.len() + self.labeled_b.len() + self.unlabeled.len()
    }
}

/// True for characters the tokenizer detaches at token edges.
fn is_detachable(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '¡' | '¿'
                | '«'
                | '»'
                | '‹'
                | '›'
                | '…'
                | '–'
                | '—'
                | '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '„'
                | '‚'
        )
}

/// Splits a sentence into tokens: Unicode-whitespace separation, then
/// leading and trailing punctuation characters become tokens of their own.
/// Interior punctuation (apostrophes, hyphens) stays attached, so the
/// concatenation of all tokens equals the input with whitespace removed.
///
/// ```
/// let toks = varmt::corpus::tokenize("I'm going, now.");
/// assert_eq!(toks, vec!["I'm", "going", ",", "now", "."]);
/// assert!(varmt::corpus::tokenize("").is_empty());
/// ```
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && is_detachable(chars[start]) {
            start += 1;
        }
        while end > start && is_detachable(chars[end - 1]) {
            end -= 1;
        }
        for c in &chars[..start] {
            out.push(c.to_string());
        }
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        for c in &chars[end..] {
            out.push(c.to_string());
        }
    }
    out
}

/// Loads a line-aligned file pair into a corpus, tokenizing each line and
/// tagging every pair with `tag`. Pair order follows file order. Lines on
/// which either side tokenizes to nothing are dropped (both sides of a
/// kept pair are always non-empty); the drop count is logged.
pub fn load_parallel(source_path: &Path, target_path: &Path, tag: VarietyTag) -> Result<ParallelCorpus> {
    let src_lines = read_lines(source_path)?;
    let tgt_lines = read_lines(target_path)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Alignment { left: src_lines.len(), right: tgt_lines.len() });
    }
    let mut pairs = Vec::with_capacity(src_lines.len());
    let mut dropped = 0usize;
    for (s, t) in src_lines.iter().zip(&tgt_lines) {
        let source_tokens = tokenize(s);
        let target_tokens = tokenize(t);
        if source_tokens.is_empty() || target_tokens.is_empty() {
            dropped += 1;
            continue;
        }
        pairs.push(SentencePair { source_tokens, target_tokens, tag });
    }
    if dropped > 0 {
        log::debug!(
            "{}: dropped {dropped} pair(s) with an empty side",
            source_path.display()
        );
    }
    Ok(ParallelCorpus::new(pairs))
}

/// Keeps exactly the pairs where both sides have at most `max_len` tokens;
/// order is preserved. A pair with a side of exactly `max_len` tokens is
/// retained.
pub fn filter_by_length(corpus: &ParallelCorpus, max_len: usize) -> ParallelCorpus {
    assert!(max_len >= 1, "max_len must be at least 1");
    ParallelCorpus {
        pairs: corpus
            .pairs
            .iter()
            .filter(|p| p.source_tokens.len() <= max_len && p.target_tokens.len() <= max_len)
            .cloned()
            .collect(),
        variety_names: corpus.variety_names.clone(),
    }
}

/// Splits per-variety training corpora into labeled/unlabeled pools.
///
/// Semi-supervised: for each variety, a seeded uniform shuffle selects
/// `round(labeled_fraction * n)` pairs to keep their labels; both the kept
/// and the erased pairs are then restored to original corpus order, and the
/// erased ones enter `unlabeled` (variety A block first, then B). The true
/// variety of every unlabeled pair is recorded in the side channel.
/// Supervised and unsupervised degenerate to all-labeled / all-unlabeled.
///
/// Dev/test corpora must be disjoint from training data by (source, target)
/// identity; violations produce a contamination error.
#[allow(clippy::too_many_arguments)]
pub fn partition(
    corpus_a: &ParallelCorpus,
    corpus_b: &ParallelCorpus,
    dev_a: &ParallelCorpus,
    dev_b: &ParallelCorpus,
    test_a: &ParallelCorpus,
    test_b: &ParallelCorpus,
    scenario: Scenario,
    labeled_fraction: f64,
    seed: u64,
) -> Result<PartitionedDataset> {
    if !labeled_fraction.is_finite() || !(0.0..=1.0).contains(&labeled_fraction) {
        return Err(Error::Config(format!(
            "labeled_fraction must be in [0, 1], got {labeled_fraction}"
        )));
    }

    let train_keys: HashSet<(String, String)> =
        corpus_a.pairs.iter().chain(&corpus_b.pairs).map(SentencePair::key).collect();
    let mut contaminated = 0usize;
    let mut first = None;
    for held in [dev_a, dev_b, test_a, test_b] {
        for p in &held.pairs {
            if train_keys.contains(&p.key()) {
                contaminated += 1;
                if first.is_none() {
                    first = Some(format!("{} ||| {}", p.source_text(), p.target_text()));
                }
            }
        }
    }
    if contaminated > 0 {
        return Err(Error::Contamination { count: contaminated, first: first.unwrap() });
    }

    // (labeled part, unlabeled part) for one variety.
    let split = |corpus: &ParallelCorpus, variety: Variety, stream: u64| {
        let n = corpus.len();
        let tag = VarietyTag::from(variety);
        match scenario {
            Scenario::Supervised => (corpus.clone().retag(tag).pairs, Vec::new()),
            Scenario::Unsupervised => (Vec::new(), corpus.pairs.clone()),
            Scenario::SemiSupervised => {
                let n_labeled = ((labeled_fraction * n as f64).round() as usize).min(n);
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, stream));
                order.shuffle(&mut rng);
                let mut keep: Vec<usize> = order[..n_labeled].to_vec();
                let mut erase: Vec<usize> = order[n_labeled..].to_vec();
                keep.sort_unstable();
                erase.sort_unstable();
                let labeled: Vec<SentencePair> = keep
                    .iter()
                    .map(|&i| {
                        let mut p = corpus.pairs[i].clone();
                        p.tag = tag;
                        p
                    })
                    .collect();
                let unlabeled: Vec<SentencePair> =
                    erase.iter().map(|&i| corpus.pairs[i].clone()).collect();
                (labeled, unlabeled)
            }
        }
    };

    let (labeled_a, un_a) = split(corpus_a, Variety::A, 0);
    let (labeled_b, un_b) = split(corpus_b, Variety::B, 1);

    let mut unlabeled_truth = Vec::with_capacity(un_a.len() + un_b.len());
    unlabeled_truth.extend(std::iter::repeat_n(Variety::A, un_a.len()));
    unlabeled_truth.extend(std::iter::repeat_n(Variety::B, un_b.len()));
    let mut unlabeled_pairs = un_a;
    unlabeled_pairs.extend(un_b);
    let unlabeled = ParallelCorpus::new(unlabeled_pairs).retag(VarietyTag::Unlabeled);

    let effective_fraction = match scenario {
        Scenario::Supervised => 1.0,
        Scenario::Unsupervised => 0.0,
        Scenario::SemiSupervised => labeled_fraction,
    };

    let names = corpus_a.variety_names.clone();
    Ok(PartitionedDataset {
        labeled_a: ParallelCorpus { pairs: labeled_a, variety_names: names.clone() },
        labeled_b: ParallelCorpus { pairs: labeled_b, variety_names: names.clone() },
        unlabeled: ParallelCorpus { pairs: unlabeled.pairs, variety_names: names.clone() },
        dev_a: dev_a.clone().retag(VarietyTag::A),
        dev_b: dev_b.clone().retag(VarietyTag::B),
        test_a: test_a.clone().retag(VarietyTag::A),
        test_b: test_b.clone().retag(VarietyTag::B),
        scenario,
        labeled_fraction: effective_fraction,
        partition_seed: seed,
        variety_names: names,
        unlabeled_truth,
    })
}

const MANIFEST_HEADER: &str = "varmt-dataset v1";
const PARTS: [&str; 7] =
    ["labeled_a", "labeled_b", "unlabeled", "dev_a", "dev_b", "test_a", "test_b"];

fn part_of<'d>(ds: &'d PartitionedDataset, name: &str) -> &'d ParallelCorpus {
    match name {
        "labeled_a" => &ds.labeled_a,
        "labeled_b" => &ds.labeled_b,
        "unlabeled" => &ds.unlabeled,
        "dev_a" => &ds.dev_a,
        "dev_b" => &ds.dev_b,
        "test_a" => &ds.test_a,
        "test_b" => &ds.test_b,
        _ => unreachable!(),
    }
}

fn corpus_to_lines(corpus: &ParallelCorpus) -> (String, String) {
    let mut src = String::new();
    let mut tgt = String::new();
    for p in &corpus.pairs {
        src.push_str(&p.source_text());
        src.push('\n');
        tgt.push_str(&p.target_text());
        tgt.push('\n');
    }
    (src, tgt)
}

/// Writes a dataset as a directory of line-aligned text files plus a
/// manifest. The manifest is written last, so its presence marks a
/// complete dataset.
pub fn save_dataset(dir: &Path, ds: &PartitionedDataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for name in PARTS {
        let (src, tgt) = corpus_to_lines(part_of(ds, name));
        atomic_write(&dir.join(format!("{name}.src")), src.as_bytes())?;
        atomic_write(&dir.join(format!("{name}.tgt")), tgt.as_bytes())?;
    }
    if !ds.unlabeled_truth.is_empty() {
        let truth: String =
            ds.unlabeled_truth.iter().map(|v| format!("{v}\n")).collect();
        atomic_write(&dir.join("unlabeled.truth"), truth.as_bytes())?;
    }

    let mut m = String::new();
    m.push_str(MANIFEST_HEADER);
    m.push('\n');
    m.push_str(&format!("scenario = {}\n", ds.scenario));
    m.push_str(&format!("labeled_fraction = {}\n", ds.labeled_fraction));
    m.push_str(&format!("partition_seed = {}\n", ds.partition_seed));
    m.push_str(&format!("variety_a = {}\n", ds.variety_names.0));
    m.push_str(&format!("variety_b = {}\n", ds.variety_names.1));
    for name in PARTS {
        m.push_str(&format!("{name} = {}\n", part_of(ds, name).len()));
    }
    m.push_str(&format!("truth = {}\n", if ds.unlabeled_truth.is_empty() { "no" } else { "yes" }));
    atomic_write(&dir.join("manifest.txt"), m.as_bytes())
}

fn load_part(dir: &Path, name: &str, expect: usize, tag: VarietyTag) -> Result<ParallelCorpus> {
    let src_path = dir.join(format!("{name}.src"));
    let tgt_path = dir.join(format!("{name}.tgt"));
    let src = read_lines(&src_path)?;
    let tgt = read_lines(&tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Alignment { left: src.len(), right: tgt.len() });
    }
    if src.len() != expect {
        return Err(Error::format(
            &src_path,
            format!("manifest says {expect} pairs, file has {}", src.len()),
        ));
    }
    let mut pairs = Vec::with_capacity(src.len());
    for (s, t) in src.iter().zip(&tgt) {
        let source_tokens: Vec<String> = s.split_whitespace().map(str::to_string).collect();
        let target_tokens: Vec<String> = t.split_whitespace().map(str::to_string).collect();
        if source_tokens.is_empty() || target_tokens.is_empty() {
            return Err(Error::format(&src_path, "empty sentence in dataset part"));
        }
        pairs.push(SentencePair { source_tokens, target_tokens, tag });
    }
    Ok(ParallelCorpus::new(pairs))
}

/// Loads a dataset directory written by [`save_dataset`], validating the
/// manifest against the part files.
pub fn load_dataset(dir: &Path) -> Result<PartitionedDataset> {
    let manifest_path = dir.join("manifest.txt");
    let lines = read_lines(&manifest_path)?;
    if lines.first().map(String::as_str) != Some(MANIFEST_HEADER) {
        return Err(Error::format(&manifest_path, "missing dataset header"));
    }
    let get = |key: &str| -> Result<String> {
        lines
            .iter()
            .skip(1)
            .find_map(|l| l.strip_prefix(&format!("{key} = ")))
            .map(str::to_string)
            .ok_or_else(|| Error::format(&manifest_path, format!("missing key {key}")))
    };
    let scenario: Scenario = get("scenario")?.parse()?;
    let labeled_fraction: f64 = get("labeled_fraction")?
        .parse()
        .map_err(|_| Error::format(&manifest_path, "bad labeled_fraction"))?;
    let partition_seed: u64 = get("partition_seed")?
        .parse()
        .map_err(|_| Error::format(&manifest_path, "bad partition_seed"))?;
    let variety_names = (get("variety_a")?, get("variety_b")?);
    let mut counts = Vec::new();
    for name in PARTS {
        let c: usize = get(name)?
            .parse()
            .map_err(|_| Error::format(&manifest_path, format!("bad count for {name}")))?;
        counts.push(c);
    }
    let has_truth = get("truth")? == "yes";

    let tags = [
        VarietyTag::A,
        VarietyTag::B,
        VarietyTag::Unlabeled,
        VarietyTag::A,
        VarietyTag::B,
        VarietyTag::A,
        VarietyTag::B,
    ];
    let mut parts = Vec::new();
    for ((name, expect), tag) in PARTS.iter().zip(&counts).zip(tags) {
        let mut c = load_part(dir, name, *expect, tag)?;
        c.variety_names = variety_names.clone();
        parts.push(c);
    }
    let mut it = parts.into_iter();
    let (labeled_a, labeled_b, unlabeled) =
        (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    let (dev_a, dev_b) = (it.next().unwrap(), it.next().unwrap());
    let (test_a, test_b) = (it.next().unwrap(), it.next().unwrap());

    let unlabeled_truth = if has_truth {
        let truth_path = dir.join("unlabeled.truth");
        let truth_lines = read_lines(&truth_path)?;
        if truth_lines.len() != unlabeled.len() {
            return Err(Error::Alignment { left: truth_lines.len(), right: unlabeled.len() });
        }
        truth_lines.iter().map(|l| l.parse()).collect::<Result<Vec<Variety>>>()?
    } else {
        Vec::new()
    };

    Ok(PartitionedDataset {
        labeled_a,
        labeled_b,
        unlabeled,
        dev_a,
        dev_b,
        test_a,
        test_b,
        scenario,
        labeled_fraction,
        partition_seed,
        variety_names,
        unlabeled_truth,
    })
}

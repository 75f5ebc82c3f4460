//! Training-set construction for the seven system configurations.
//!
//! A recipe turns a partitioned dataset into subword-id training examples,
//! deciding which partitions participate and which examples get a variety
//! token prepended to their source. Classifier-driven recipes label the
//! unlabeled pool through a [`VarietyJudge`] before tokening.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::corpus::{PartitionedDataset, Scenario, SentencePair, Variety, VarietyTag};
use crate::error::{Error, Result};
use crate::subword::{is_variety_token, variety_token_id, SubwordModel};
use crate::util::{atomic_write, derive_seed, read_lines};
use crate::varietyid::{sentence_fingerprint, VarietyJudge};

/// The seven system configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecipeKind {
    /// Pooled training on everything, no variety conditioning.
    Generic,
    /// One variety's labeled data only.
    Specific(Variety),
    /// Generic first, then continued on one variety's data.
    Adapted(Variety),
    /// Labeled data of both varieties, variety tokens per origin.
    Multilingual,
    /// Multilingual plus the unlabeled pool left untokened.
    MultiUnlabeled,
    /// Multilingual plus the unlabeled pool tokened by soft fusion.
    MultiClassified2,
    /// Multilingual plus the unlabeled pool tokened by strict-majority
    /// voting; abstentions stay untokened.
    MultiClassified3,
}

impl RecipeKind {
    pub const ALL: [RecipeKind; 9] = [
        RecipeKind::Generic,
        RecipeKind::Specific(Variety::A),
        RecipeKind::Specific(Variety::B),
        RecipeKind::Adapted(Variety::A),
        RecipeKind::Adapted(Variety::B),
        RecipeKind::Multilingual,
        RecipeKind::MultiUnlabeled,
        RecipeKind::MultiClassified2,
        RecipeKind::MultiClassified3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecipeKind::Generic => "gen",
            RecipeKind::Specific(Variety::A) => "spec-a",
            RecipeKind::Specific(Variety::B) => "spec-b",
            RecipeKind::Adapted(Variety::A) => "ada-a",
            RecipeKind::Adapted(Variety::B) => "ada-b",
            RecipeKind::Multilingual => "mul",
            RecipeKind::MultiUnlabeled => "mu",
            RecipeKind::MultiClassified2 => "mc2",
            RecipeKind::MultiClassified3 => "mc3",
        }
    }

    /// Whether models trained under this recipe expect a variety token on
    /// the source (and as decoder start) at decode time.
    pub fn uses_variety_tokens(self) -> bool {
        matches!(
            self,
            RecipeKind::Multilingual
                | RecipeKind::MultiUnlabeled
                | RecipeKind::MultiClassified2
                | RecipeKind::MultiClassified3
        )
    }

    /// Whether this recipe labels unlabeled data through a judge.
    pub fn needs_judge(self) -> bool {
        matches!(self, RecipeKind::MultiClassified2 | RecipeKind::MultiClassified3)
    }
}

impl fmt::Display for RecipeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecipeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<RecipeKind> {
        RecipeKind::ALL
            .iter()
            .copied()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown recipe '{s}' (expected one of gen, spec-a, spec-b, ada-a, ada-b, mul, mu, mc2, mc3)"
                ))
            })
    }
}

/// Which partition an example came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    LabeledA,
    LabeledB,
    Unlabeled,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::LabeledA => "labeled_a",
            Origin::LabeledB => "labeled_b",
            Origin::Unlabeled => "unlabeled",
        }
    }
}

/// Where an example came from and what the recipe did to it. `assigned`
/// is the variety token actually applied (Unlabeled when the example was
/// left untokened); `abstained` marks examples a voting judge declined to
/// label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub origin: Origin,
    pub assigned: VarietyTag,
    pub abstained: bool,
}

/// One training example over subword ids. The source may begin with a
/// variety token id; EOS/BOS framing is added by the training loop, not
/// stored here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub source_units: Vec<u32>,
    pub target_units: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub examples: Vec<TrainingExample>,
    pub provenance: Vec<Provenance>,
    pub recipe: RecipeKind,
    /// Fingerprint of the subword model the ids were produced with.
    pub subword_fingerprint: u64,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Fraction of unlabeled-origin examples the judge abstained on;
    /// zero when nothing came from the unlabeled pool.
    pub fn abstention_rate(&self) -> f64 {
        let unlabeled =
            self.provenance.iter().filter(|p| p.origin == Origin::Unlabeled).count();
        if unlabeled == 0 {
            return 0.0;
        }
        let abstained = self.provenance.iter().filter(|p| p.abstained).count();
        abstained as f64 / unlabeled as f64
    }

    /// Writes `train.ids` (source ids TAB target ids per line),
    /// `train.prov` (origin, assigned tag, abstained flag per line) and
    /// `train.meta` into the directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let join = |ids: &[u32]| {
            ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
        };
        let mut ids = String::new();
        let mut prov = String::new();
        for (ex, pv) in self.examples.iter().zip(&self.provenance) {
            ids.push_str(&join(&ex.source_units));
            ids.push('\t');
            ids.push_str(&join(&ex.target_units));
            ids.push('\n');
            let tag = match pv.assigned {
                VarietyTag::A => "A",
                VarietyTag::B => "B",
                VarietyTag::Unlabeled => "U",
            };
            prov.push_str(&format!("{}\t{}\t{}\n", pv.origin.as_str(), tag, pv.abstained));
        }
        atomic_write(&dir.join("train.ids"), ids.as_bytes())?;
        atomic_write(&dir.join("train.prov"), prov.as_bytes())?;
        let meta = format!(
            "recipe={}\nsubword_fingerprint={}\n",
            self.recipe, self.subword_fingerprint
        );
        atomic_write(&dir.join("train.meta"), meta.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<TrainingSet> {
        let ids_path = dir.join("train.ids");
        let parse_ids = |field: &str, line_no: usize| -> Result<Vec<u32>> {
            field
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<u32>().map_err(|_| {
                        Error::format(&ids_path, format!("line {line_no}: bad id '{s}'"))
                    })
                })
                .collect()
        };
        let mut examples = Vec::new();
        for (i, line) in read_lines(&ids_path)?.iter().enumerate() {
            let Some((src, tgt)) = line.split_once('\t') else {
                return Err(Error::format(&ids_path, format!("line {}: expected 2 columns", i + 1)));
            };
            examples.push(TrainingExample {
                source_units: parse_ids(src, i + 1)?,
                target_units: parse_ids(tgt, i + 1)?,
            });
        }

        let prov_path = dir.join("train.prov");
        let mut provenance = Vec::new();
        for (i, line) in read_lines(&prov_path)?.iter().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::format(&prov_path, format!("line {}: bad provenance", i + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            let origin = match cols[0] {
                "labeled_a" => Origin::LabeledA,
                "labeled_b" => Origin::LabeledB,
                "unlabeled" => Origin::Unlabeled,
                _ => return Err(bad()),
            };
            let assigned = match cols[1] {
                "A" => VarietyTag::A,
                "B" => VarietyTag::B,
                "U" => VarietyTag::Unlabeled,
                _ => return Err(bad()),
            };
            let abstained = match cols[2] {
                "true" => true,
                "false" => false,
                _ => return Err(bad()),
            };
            provenance.push(Provenance { origin, assigned, abstained });
        }
        if provenance.len() != examples.len() {
            return Err(Error::Alignment { left: examples.len(), right: provenance.len() });
        }

        let meta_path = dir.join("train.meta");
        let mut meta: HashMap<String, String> = HashMap::new();
        for line in read_lines(&meta_path)? {
            if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        let recipe: RecipeKind = meta
            .get("recipe")
            .ok_or_else(|| Error::format(&meta_path, "missing recipe"))?
            .parse()?;
        let subword_fingerprint = meta
            .get("subword_fingerprint")
            .and_then(|v| v.parse::<u64>().ok())
            .ok_or_else(|| Error::format(&meta_path, "missing subword_fingerprint"))?;
        Ok(TrainingSet { examples, provenance, recipe, subword_fingerprint })
    }
}

/// Prepends the variety token id to a source id sequence. Calling it on a
/// sequence that already starts with a variety token is an error, not a
/// no-op.
pub fn prepend_variety_token(source_units: &[u32], variety: Variety) -> Result<Vec<u32>> {
    if source_units.first().is_some_and(|&id| is_variety_token(id)) {
        return Err(Error::DoubleTag);
    }
    let mut out = Vec::with_capacity(source_units.len() + 1);
    out.push(variety_token_id(variety));
    out.extend_from_slice(source_units);
    Ok(out)
}

/// Builds the training set for a recipe. The output order is a seeded
/// shuffle of the included partitions; classification of unlabeled
/// examples reads the raw (pre-subword) target sentence.
pub fn build_training_set(
    data: &PartitionedDataset,
    recipe: RecipeKind,
    subword: &SubwordModel,
    judge: Option<&dyn VarietyJudge>,
    seed: u64,
) -> Result<TrainingSet> {
    if let RecipeKind::Adapted(_) = recipe {
        return Err(Error::Config(
            "adaptation is a two-stage plan; build its stages via ada_plan".into(),
        ));
    }
    if recipe.needs_judge() && judge.is_none() {
        return Err(Error::Config(format!("recipe {recipe} requires a variety judge")));
    }

    // Which partitions participate, and under what token policy.
    fn push_labeled<'a>(data: &'a PartitionedDataset, chosen: &mut Vec<(&'a SentencePair, Origin)>) {
        chosen.extend(data.labeled_a.pairs.iter().map(|p| (p, Origin::LabeledA)));
        chosen.extend(data.labeled_b.pairs.iter().map(|p| (p, Origin::LabeledB)));
    }
    let mut chosen: Vec<(&SentencePair, Origin)> = Vec::new();
    match recipe {
        RecipeKind::Adapted(_) => unreachable!("rejected above"),
        RecipeKind::Generic => {
            push_labeled(data, &mut chosen);
            chosen.extend(data.unlabeled.pairs.iter().map(|p| (p, Origin::Unlabeled)));
        }
        RecipeKind::Specific(v) => {
            let part = match v {
                Variety::A => &data.labeled_a,
                Variety::B => &data.labeled_b,
            };
            if part.is_empty() {
                return Err(Error::EmptyData(format!(
                    "recipe {recipe} needs labeled data for variety {}",
                    v.as_str()
                )));
            }
            let origin = match v {
                Variety::A => Origin::LabeledA,
                Variety::B => Origin::LabeledB,
            };
            chosen.extend(part.pairs.iter().map(|p| (p, origin)));
        }
        RecipeKind::Multilingual => {
            if data.labeled_a.is_empty() || data.labeled_b.is_empty() {
                return Err(Error::EmptyData(format!(
                    "recipe {recipe} needs labeled data for both varieties"
                )));
            }
            push_labeled(data, &mut chosen);
        }
        RecipeKind::MultiUnlabeled | RecipeKind::MultiClassified2 | RecipeKind::MultiClassified3 => {
            if data.unlabeled.is_empty() && data.labeled_fraction < 1.0 {
                return Err(Error::EmptyData(format!(
                    "recipe {recipe} expects an unlabeled pool under labeled_fraction {}",
                    data.labeled_fraction
                )));
            }
            push_labeled(data, &mut chosen);
            chosen.extend(data.unlabeled.pairs.iter().map(|p| (p, Origin::Unlabeled)));
        }
    }
    if chosen.is_empty() {
        return Err(Error::EmptyData(format!("recipe {recipe} selected no training data")));
    }

    // Classifier-labeled recipes in the fully unsupervised scenario must
    // not reuse the judge's own training sentences as translation data.
    if data.scenario == Scenario::Unsupervised && recipe.needs_judge() {
        if let Some(fp) = judge.and_then(|j| j.training_fingerprint()) {
            let mut train_hashes: Vec<u64> =
                chosen.iter().map(|(p, _)| sentence_fingerprint(&p.target_text())).collect();
            train_hashes.sort_unstable();
            let overlap = sorted_multiset_intersection(fp, &train_hashes);
            if overlap > 0 {
                return Err(Error::ClassifierOverlap { count: overlap });
            }
        }
    }

    let mut examples = Vec::with_capacity(chosen.len());
    let mut provenance = Vec::with_capacity(chosen.len());
    for (pair, origin) in &chosen {
        let source_units = subword.segment_ids(&pair.source_tokens);
        let target_units = subword.segment_ids(&pair.target_tokens);

        // Token policy per recipe and origin.
        let (assigned, abstained) = match (recipe, origin) {
            (RecipeKind::Generic | RecipeKind::Specific(_), _) => (VarietyTag::Unlabeled, false),
            (_, Origin::LabeledA) => (VarietyTag::A, false),
            (_, Origin::LabeledB) => (VarietyTag::B, false),
            (RecipeKind::MultiUnlabeled, Origin::Unlabeled) => (VarietyTag::Unlabeled, false),
            (RecipeKind::MultiClassified2, Origin::Unlabeled) => {
                let v = judge.expect("checked above").classify(&pair.target_text());
                (VarietyTag::from(v), false)
            }
            (RecipeKind::MultiClassified3, Origin::Unlabeled) => {
                let tag = judge.expect("checked above").classify_or_abstain(&pair.target_text());
                (tag, tag == VarietyTag::Unlabeled)
            }
            (RecipeKind::Adapted(_) | RecipeKind::Multilingual, Origin::Unlabeled) => {
                unreachable!("these recipes never select unlabeled data")
            }
        };

        let source_units = match assigned.as_variety() {
            Some(v) => prepend_variety_token(&source_units, v)?,
            None => source_units,
        };
        examples.push(TrainingExample { source_units, target_units });
        provenance.push(Provenance { origin: *origin, assigned, abstained });
    }

    // Deterministic joint shuffle of labeled and unlabeled pools.
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0));
    order.shuffle(&mut rng);
    let examples = order.iter().map(|&i| examples[i].clone()).collect();
    let provenance = order.iter().map(|&i| provenance[i]).collect();

    Ok(TrainingSet {
        examples,
        provenance,
        recipe,
        subword_fingerprint: subword.fingerprint(),
    })
}

/// Size of the multiset intersection of two sorted hash lists.
fn sorted_multiset_intersection(a: &[u64], b: &[u64]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// The two-stage adaptation plan: a generic model, then continued
/// training on one variety's data starting from the stage-1 parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaPlan {
    pub stage1: RecipeKind,
    pub stage2: RecipeKind,
}

/// Builds the adaptation plan for a variety. Requires fully labeled data,
/// since stage 2 trains on one variety's labeled partition.
pub fn ada_plan(data: &PartitionedDataset, variety: Variety) -> Result<AdaPlan> {
    if data.scenario != Scenario::Supervised {
        return Err(Error::Config(
            "adaptation requires the supervised scenario (labeled stage-2 data)".into(),
        ));
    }
    Ok(AdaPlan { stage1: RecipeKind::Generic, stage2: RecipeKind::Specific(variety) })
}

/// Step budget for adaptation stage 2: half of stage 1, at least one.
pub fn ada_stage2_steps(stage1_steps: usize) -> usize {
    (stage1_steps / 2).max(1)
}

/// One development/test item for decoding: raw source tokens, reference
/// target tokens, and the variety token to force (None for untokened
/// models).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DevItem {
    pub source_tokens: Vec<String>,
    pub reference_tokens: Vec<String>,
    pub variety: Option<Variety>,
}

/// Development items a recipe's model is selected on: both varieties'
/// dev sets (each decoded with its own token for tokened recipes), or the
/// specific variety's dev set for Spec/Ada.
pub fn dev_selection(data: &PartitionedDataset, recipe: RecipeKind) -> Result<Vec<DevItem>> {
    let tokened = recipe.uses_variety_tokens();
    let mut items = Vec::new();
    let mut push = |corpus: &crate::corpus::ParallelCorpus, v: Variety| {
        for p in &corpus.pairs {
            items.push(DevItem {
                source_tokens: p.source_tokens.clone(),
                reference_tokens: p.target_tokens.clone(),
                variety: tokened.then_some(v),
            });
        }
    };
    match recipe {
        RecipeKind::Specific(Variety::A) | RecipeKind::Adapted(Variety::A) => {
            push(&data.dev_a, Variety::A)
        }
        RecipeKind::Specific(Variety::B) | RecipeKind::Adapted(Variety::B) => {
            push(&data.dev_b, Variety::B)
        }
        _ => {
            push(&data.dev_a, Variety::A);
            push(&data.dev_b, Variety::B);
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyData(format!("no dev data for recipe {recipe}")));
    }
    Ok(items)
}

//! The stage implementations behind the subcommands.
//!
//! Every stage reads explicit input paths, writes its artifacts into one
//! output directory, and drops two bookkeeping files next to them: the
//! fully resolved configuration (`config.resolved.toml`) and a manifest
//! recording the tool version, the seed, and content fingerprints of all
//! inputs and outputs. Nothing is read from the environment and no
//! timestamps are recorded, so rerunning a stage from its manifest inputs
//! reproduces its outputs byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use varmt::corpus::{
    filter_by_length, load_dataset, load_parallel, partition, save_dataset, tokenize,
    ParallelCorpus, PartitionedDataset, Variety, VarietyTag,
};
use varmt::eval::{
    corpus_bleu, paired_bootstrap, tsv_row, variety_consistency, ConsistencyJudge,
};
use varmt::nmt::{
    load_checkpoint, save_checkpoint, select_best_checkpoint, train, translate, Checkpoint,
    TrainingConfig, TransformerConfig, UnitPair,
};
use varmt::recipes::{ada_plan, ada_stage2_steps, build_training_set, dev_selection, RecipeKind, TrainingSet};
use varmt::subword::{train_subword, SubwordModel};
use varmt::synth::{generate_with_scenario, VariantTable};
use varmt::util::{atomic_write, derive_seed, fnv1a64, read_bytes};
use varmt::varietyid::{roc_auc, VarietyEnsemble, VarietyJudge};
use varmt::{Error, Result};

use crate::config::RunConfig;

/// Per-stage seed streams derived from the single run seed, so no two
/// stages ever consume the same random draws.
const SEED_PARTITION: u64 = 101;
const SEED_SUBWORD: u64 = 102;
const SEED_CLASSIFIER: u64 = 103;
const SEED_DATASET: u64 = 104;
const SEED_DATASET_STAGE2: u64 = 105;
const SEED_TRAIN: u64 = 106;
const SEED_TRAIN_STAGE2: u64 = 107;
const SEED_BOOTSTRAP: u64 = 108;

// ---------------------------------------------------------------------------
// Manifests

#[derive(Serialize)]
struct Manifest {
    stage: String,
    tool_version: String,
    seed: u64,
    /// Input name to content fingerprint.
    inputs: BTreeMap<String, String>,
    /// Output path (relative to the stage directory) to content fingerprint.
    outputs: BTreeMap<String, String>,
}

/// Content fingerprint of a file, or of a directory tree (order-independent
/// over its sorted relative paths).
fn fingerprint_path(path: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<(String, u64)>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|r| r.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort();
        for entry in entries {
            if entry.is_dir() {
                walk(root, &entry, acc)?;
            } else {
                let rel = entry.strip_prefix(root).unwrap_or(&entry);
                acc.push((rel.display().to_string(), fnv1a64(&read_bytes(&entry)?)));
            }
        }
        Ok(())
    }

    let hash = if path.is_dir() {
        let mut files = Vec::new();
        walk(path, path, &mut files)?;
        let mut buf = Vec::new();
        for (rel, h) in files {
            buf.extend_from_slice(rel.as_bytes());
            buf.push(0);
            buf.extend_from_slice(&h.to_le_bytes());
        }
        fnv1a64(&buf)
    } else {
        fnv1a64(&read_bytes(path)?)
    };
    Ok(format!("{hash:016x}"))
}

/// Writes `config.resolved.toml` and `manifest.toml` into the stage
/// directory. Output paths are recorded relative to that directory.
fn write_stage_metadata(
    dir: &Path,
    stage: &str,
    cfg: &RunConfig,
    inputs: &[(&str, &Path)],
    outputs: &[&Path],
) -> Result<()> {
    cfg.save(&dir.join("config.resolved.toml"))?;
    let mut manifest = Manifest {
        stage: stage.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    for (name, path) in inputs {
        manifest.inputs.insert((*name).into(), fingerprint_path(path)?);
    }
    for path in outputs {
        let rel = path.strip_prefix(dir).unwrap_or(path);
        manifest.outputs.insert(rel.display().to_string(), fingerprint_path(path)?);
    }
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
    atomic_write(&dir.join("manifest.toml"), text.as_bytes())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect())
}

// ---------------------------------------------------------------------------
// Data stages

/// Fits the shared subword model on all training-side text of the dataset.
fn fit_subword(cfg: &RunConfig, data: &PartitionedDataset) -> Result<SubwordModel> {
    let corpora: Vec<&ParallelCorpus> = [&data.labeled_a, &data.labeled_b, &data.unlabeled]
        .into_iter()
        .filter(|c| !c.is_empty())
        .collect();
    train_subword(&corpora, cfg.subword.vocab_size, derive_seed(cfg.seed, SEED_SUBWORD))
}

/// Generates a synthetic dataset plus its ground-truth variant table and a
/// subword model fitted on the training pools.
pub fn run_synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let synth_cfg = cfg.synth_config()?;
    let (mut data, table) =
        generate_with_scenario(&synth_cfg, cfg.scenario()?, cfg.data.labeled_fraction)?;
    let table_path = out_dir.join("variant_table.tsv");
    table.save(&table_path)?;
    data.variety_names = (cfg.data.variety_a.clone(), cfg.data.variety_b.clone());
    let dataset_dir = out_dir.join("dataset");
    save_dataset(&dataset_dir, &data)?;
    let subword = fit_subword(cfg, &data)?;
    let subword_path = out_dir.join("subword.model");
    subword.save(&subword_path)?;
    log::info!(
        "synth: {} labeled A, {} labeled B, {} unlabeled, {} dev, {} test pairs; {} subword units",
        data.labeled_a.len(),
        data.labeled_b.len(),
        data.unlabeled.len(),
        data.dev_a.len() + data.dev_b.len(),
        data.test_a.len() + data.test_b.len(),
        subword.vocab_len(),
    );
    write_stage_metadata(
        out_dir,
        "synth",
        cfg,
        &[],
        &[&dataset_dir, &table_path, &subword_path],
    )
}

/// Ingests the six corpora named in `[data.files]`, length-filters them,
/// partitions per the scenario, and fits the subword model.
pub fn run_prepare(cfg: &RunConfig, config_root: &Path, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let files = cfg
        .data
        .files
        .clone()
        .ok_or_else(|| Error::Config("prepare needs [data.files] naming the six corpora".into()))?;
    let resolve = |p: &Path| -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { config_root.join(p) }
    };
    let load = |src: &Path, tgt: &Path, tag: VarietyTag| -> Result<ParallelCorpus> {
        let corpus = load_parallel(&resolve(src), &resolve(tgt), tag)?;
        Ok(filter_by_length(&corpus, cfg.data.max_len))
    };
    let train_a = load(&files.train_a_source, &files.train_a_target, VarietyTag::A)?;
    let train_b = load(&files.train_b_source, &files.train_b_target, VarietyTag::B)?;
    let dev_a = load(&files.dev_a_source, &files.dev_a_target, VarietyTag::A)?;
    let dev_b = load(&files.dev_b_source, &files.dev_b_target, VarietyTag::B)?;
    let test_a = load(&files.test_a_source, &files.test_a_target, VarietyTag::A)?;
    let test_b = load(&files.test_b_source, &files.test_b_target, VarietyTag::B)?;
    let mut data = partition(
        &train_a,
        &train_b,
        &dev_a,
        &dev_b,
        &test_a,
        &test_b,
        cfg.scenario()?,
        cfg.data.labeled_fraction,
        derive_seed(cfg.seed, SEED_PARTITION),
    )?;
    data.variety_names = (cfg.data.variety_a.clone(), cfg.data.variety_b.clone());
    let dataset_dir = out_dir.join("dataset");
    save_dataset(&dataset_dir, &data)?;
    let subword = fit_subword(cfg, &data)?;
    let subword_path = out_dir.join("subword.model");
    subword.save(&subword_path)?;
    log::info!(
        "prepare: {} training pairs after filtering, {} subword units",
        data.training_len(),
        subword.vocab_len(),
    );
    let inputs = [
        ("train_a_source", resolve(&files.train_a_source)),
        ("train_a_target", resolve(&files.train_a_target)),
        ("train_b_source", resolve(&files.train_b_source)),
        ("train_b_target", resolve(&files.train_b_target)),
        ("dev_a_source", resolve(&files.dev_a_source)),
        ("dev_a_target", resolve(&files.dev_a_target)),
        ("dev_b_source", resolve(&files.dev_b_source)),
        ("dev_b_target", resolve(&files.dev_b_target)),
        ("test_a_source", resolve(&files.test_a_source)),
        ("test_a_target", resolve(&files.test_a_target)),
        ("test_b_source", resolve(&files.test_b_source)),
        ("test_b_target", resolve(&files.test_b_target)),
    ];
    let input_refs: Vec<(&str, &Path)> =
        inputs.iter().map(|(n, p)| (*n, p.as_path())).collect();
    write_stage_metadata(out_dir, "prepare", cfg, &input_refs, &[&dataset_dir, &subword_path])
}

// ---------------------------------------------------------------------------
// Classifier stages

/// Trains the five-member variety ensemble on the labeled target sides.
pub fn run_train_classifier(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let data = load_dataset(data_dir)?;
    if data.labeled_a.is_empty() || data.labeled_b.is_empty() {
        return Err(Error::EmptyData(
            "classifier training needs labeled pairs in both varieties".into(),
        ));
    }
    let mut examples: Vec<(String, Variety)> = Vec::new();
    examples.extend(data.labeled_a.pairs.iter().map(|p| (p.target_text(), Variety::A)));
    examples.extend(data.labeled_b.pairs.iter().map(|p| (p.target_text(), Variety::B)));
    let ensemble = VarietyEnsemble::train(
        &examples,
        &cfg.feature_config(),
        cfg.classifier.epochs,
        cfg.classifier.learning_rate,
        derive_seed(cfg.seed, SEED_CLASSIFIER),
    )?;
    let model_path = out_dir.join("ensemble.bin");
    ensemble.save(&model_path)?;

    let mut rows = Vec::new();
    if !data.dev_a.is_empty() && !data.dev_b.is_empty() {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (corpus, v) in [(&data.dev_a, Variety::A), (&data.dev_b, Variety::B)] {
            for p in &corpus.pairs {
                scores.push(ensemble.score_b(&p.target_text()));
                labels.push(v);
            }
        }
        let auc = roc_auc(&scores, &labels)?;
        log::info!("classifier: dev roc_auc {auc:.4}");
        rows.push(tsv_row("classifier", "dev", "roc_auc", auc));
    } else {
        log::warn!("classifier: no dev pairs on one side, skipping the roc_auc report");
    }
    let metrics_path = out_dir.join("metrics.tsv");
    write_lines(&metrics_path, &rows)?;
    write_stage_metadata(
        out_dir,
        "train-classifier",
        cfg,
        &[("data", data_dir)],
        &[&model_path, &metrics_path],
    )
}

/// Labels the unlabeled pool with a trained ensemble. `mc2` always assigns
/// a variety; `mc3` may abstain, and the abstained fraction is reported.
pub fn run_label(
    cfg: &RunConfig,
    data_dir: &Path,
    classifier_path: &Path,
    mode: &str,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let recipe: RecipeKind = mode.parse()?;
    if !recipe.needs_judge() {
        return Err(Error::Config(format!("label mode must be mc2 or mc3, got {mode:?}")));
    }
    let data = load_dataset(data_dir)?;
    if data.unlabeled.is_empty() {
        return Err(Error::EmptyData("the dataset has no unlabeled pairs to label".into()));
    }
    let judge = VarietyEnsemble::load(classifier_path)?;
    let mut lines = Vec::with_capacity(data.unlabeled.len());
    let mut abstained = 0usize;
    for (i, pair) in data.unlabeled.pairs.iter().enumerate() {
        let text = pair.target_text();
        let label = if recipe == RecipeKind::MultiClassified2 {
            match judge.classify(&text) {
                Variety::A => "A",
                Variety::B => "B",
            }
        } else {
            match judge.classify_or_abstain(&text) {
                VarietyTag::A => "A",
                VarietyTag::B => "B",
                VarietyTag::Unlabeled => {
                    abstained += 1;
                    "U"
                }
            }
        };
        lines.push(format!("{i}\t{label}"));
    }
    let labels_path = out_dir.join("labels.tsv");
    write_lines(&labels_path, &lines)?;
    let fraction = abstained as f64 / data.unlabeled.len() as f64;
    let row = tsv_row("labeler", "unlabeled", "abstained_fraction", fraction);
    println!("{row}");
    let metrics_path = out_dir.join("metrics.tsv");
    write_lines(&metrics_path, &[row])?;
    write_stage_metadata(
        out_dir,
        "label",
        cfg,
        &[("data", data_dir), ("classifier", classifier_path)],
        &[&labels_path, &metrics_path],
    )
}

// ---------------------------------------------------------------------------
// Training-set and model stages

/// Builds the training set for the configured recipe under
/// `<out>/trainset`; adaptation recipes write `stage1` and `stage2`
/// subdirectories instead of a flat set.
pub fn run_build_dataset(
    cfg: &RunConfig,
    data_dir: &Path,
    subword_path: &Path,
    classifier_path: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let recipe = cfg.recipe()?;
    let data = load_dataset(data_dir)?;
    let subword = SubwordModel::load(subword_path)?;
    let ensemble;
    let judge: Option<&dyn VarietyJudge> = if recipe.needs_judge() {
        let path = classifier_path.ok_or_else(|| {
            Error::Config(format!("recipe {} needs --classifier", recipe.as_str()))
        })?;
        ensemble = VarietyEnsemble::load(path)?;
        Some(&ensemble)
    } else {
        None
    };

    let set_dir = out_dir.join("trainset");
    let mut rows = Vec::new();
    if let RecipeKind::Adapted(v) = recipe {
        let plan = ada_plan(&data, v)?;
        let stage1 =
            build_training_set(&data, plan.stage1, &subword, None, derive_seed(cfg.seed, SEED_DATASET))?;
        let stage2 = build_training_set(
            &data,
            plan.stage2,
            &subword,
            None,
            derive_seed(cfg.seed, SEED_DATASET_STAGE2),
        )?;
        stage1.save(&set_dir.join("stage1"))?;
        stage2.save(&set_dir.join("stage2"))?;
        rows.push(tsv_row("dataset", "stage1", "examples", stage1.len() as f64));
        rows.push(tsv_row("dataset", "stage2", "examples", stage2.len() as f64));
        log::info!(
            "dataset: {} stage-1 and {} stage-2 examples ({})",
            stage1.len(),
            stage2.len(),
            recipe.as_str(),
        );
    } else {
        let set = build_training_set(&data, recipe, &subword, judge, derive_seed(cfg.seed, SEED_DATASET))?;
        set.save(&set_dir)?;
        rows.push(tsv_row("dataset", "train", "examples", set.len() as f64));
        if recipe == RecipeKind::MultiClassified3 {
            rows.push(tsv_row("dataset", "train", "abstained_fraction", set.abstention_rate()));
        }
        log::info!("dataset: {} examples ({})", set.len(), recipe.as_str());
    }
    let metrics_path = out_dir.join("metrics.tsv");
    write_lines(&metrics_path, &rows)?;
    let mut inputs = vec![("data", data_dir), ("subword", subword_path)];
    if let Some(path) = classifier_path {
        inputs.push(("classifier", path));
    }
    write_stage_metadata(out_dir, "build-dataset", cfg, &inputs, &[&set_dir, &metrics_path])
}

fn load_trainset(dir: &Path, subword: &SubwordModel) -> Result<TrainingSet> {
    let set = TrainingSet::load(dir)?;
    if set.subword_fingerprint != subword.fingerprint() {
        return Err(Error::Config(
            "the training set was built with a different subword model".into(),
        ));
    }
    Ok(set)
}

/// Trains on one training set, writes every checkpoint plus the loss log,
/// selects the best checkpoint on the recipe's dev selection, and returns
/// it. A numeric divergence still leaves the last good checkpoint and the
/// loss log on disk before the error propagates.
fn train_stage(
    cfg: &RunConfig,
    data: &PartitionedDataset,
    set: &TrainingSet,
    subword: &SubwordModel,
    model_cfg: &TransformerConfig,
    train_cfg: &TrainingConfig,
    init: Option<varmt::nmt::TranslationModel>,
    dir: &Path,
) -> Result<Checkpoint> {
    ensure_dir(dir)?;
    let pairs: Vec<UnitPair> =
        set.examples.iter().map(|e| (e.source_units.clone(), e.target_units.clone())).collect();
    let outcome = train(&pairs, model_cfg, train_cfg, subword.fingerprint(), init)?;

    let loss_lines: Vec<String> =
        outcome.losses.iter().map(|(step, loss)| format!("{step}\t{loss:.6}")).collect();
    write_lines(&dir.join("train_log.tsv"), &loss_lines)?;
    for ckpt in &outcome.checkpoints {
        save_checkpoint(ckpt, &dir.join(format!("checkpoint-{:06}.ckpt", ckpt.step)))?;
    }
    if let Some(step) = outcome.diverged_at {
        return Err(Error::Numeric(format!(
            "training diverged at step {step}; the last finite checkpoint (step {}) is saved in {}",
            outcome.final_step,
            dir.display(),
        )));
    }

    let dev = dev_selection(data, set.recipe)?;
    let (best, scores) =
        select_best_checkpoint(&outcome.checkpoints, &dev, subword, cfg.decode.beam_size, cfg.decode.max_len)?;
    let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    let score_lines: Vec<String> = scores
        .iter()
        .map(|s| format!("{}\t{:.6}\t{}\t{}", s.step, s.bleu, fmt_opt(s.bleu_a), fmt_opt(s.bleu_b)))
        .collect();
    write_lines(&dir.join("selection.tsv"), &score_lines)?;
    save_checkpoint(&best, &dir.join("best.ckpt"))?;
    log::info!(
        "train: kept checkpoint at step {} of {} ({} dev items)",
        best.step,
        train_cfg.total_steps,
        dev.len(),
    );
    Ok(best)
}

/// Trains the translation model. An adaptation training set (with `stage1`
/// and `stage2` subdirectories) runs generic pre-training first, then
/// fine-tunes from the selected stage-1 checkpoint for half the steps; the
/// final artifacts always land in the stage directory root.
pub fn run_train_nmt(
    cfg: &RunConfig,
    data_dir: &Path,
    trainset_dir: &Path,
    subword_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let data = load_dataset(data_dir)?;
    let subword = SubwordModel::load(subword_path)?;
    let model_cfg = cfg.transformer_config(subword.vocab_len());
    let base = cfg.training_config();

    let staged = trainset_dir.join("stage1").is_dir();
    if staged {
        let set1 = load_trainset(&trainset_dir.join("stage1"), &subword)?;
        let set2 = load_trainset(&trainset_dir.join("stage2"), &subword)?;
        let mut tc1 = base.clone();
        tc1.seed = derive_seed(cfg.seed, SEED_TRAIN);
        let best1 =
            train_stage(cfg, &data, &set1, &subword, &model_cfg, &tc1, None, &out_dir.join("stage1"))?;
        let mut tc2 = base.clone();
        tc2.seed = derive_seed(cfg.seed, SEED_TRAIN_STAGE2);
        tc2.total_steps = ada_stage2_steps(base.total_steps);
        tc2.checkpoint_every = tc2.checkpoint_every.min(tc2.total_steps);
        train_stage(cfg, &data, &set2, &subword, &model_cfg, &tc2, Some(best1.model), out_dir)?;
    } else {
        let set = load_trainset(trainset_dir, &subword)?;
        let mut tc = base.clone();
        tc.seed = derive_seed(cfg.seed, SEED_TRAIN);
        train_stage(cfg, &data, &set, &subword, &model_cfg, &tc, None, out_dir)?;
    }

    let mut outputs: Vec<PathBuf> = vec![out_dir.join("best.ckpt"), out_dir.join("selection.tsv")];
    if staged {
        outputs.push(out_dir.join("stage1"));
    }
    let output_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_stage_metadata(
        out_dir,
        "train-nmt",
        cfg,
        &[("data", data_dir), ("trainset", trainset_dir), ("subword", subword_path)],
        &output_refs,
    )
}

// ---------------------------------------------------------------------------
// Decoding and scoring stages

/// Translates a file of sentences (one per line) into
/// `<out>/translations.txt`.
pub fn run_translate(
    cfg: &RunConfig,
    model_path: &Path,
    subword_path: &Path,
    input_path: &Path,
    variety: Option<Variety>,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let ckpt = load_checkpoint(model_path)?;
    let subword = SubwordModel::load(subword_path)?;
    let text = fs::read_to_string(input_path).map_err(|e| Error::io(input_path, e))?;
    let mut lines = Vec::new();
    for line in text.lines() {
        let tokens = tokenize(line);
        let hyp = translate(
            &ckpt.model,
            &subword,
            &tokens,
            variety,
            cfg.decode.beam_size,
            cfg.decode.max_len,
        )?;
        lines.push(hyp.join(" "));
    }
    let output_path = out_dir.join("translations.txt");
    write_lines(&output_path, &lines)?;
    log::info!("translate: {} lines into {}", lines.len(), output_path.display());
    write_stage_metadata(
        out_dir,
        "translate",
        cfg,
        &[("model", model_path), ("subword", subword_path), ("input", input_path)],
        &[&output_path],
    )
}

/// Decodes the test sets the recipe claims to serve and reports BLEU plus,
/// when a variant table or classifier is supplied, variety consistency.
pub fn run_evaluate(
    cfg: &RunConfig,
    data_dir: &Path,
    model_path: &Path,
    subword_path: &Path,
    table_path: Option<&Path>,
    classifier_path: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let recipe = cfg.recipe()?;
    let data = load_dataset(data_dir)?;
    let ckpt = load_checkpoint(model_path)?;
    let subword = SubwordModel::load(subword_path)?;
    let table = table_path.map(VariantTable::load).transpose()?;
    let ensemble = classifier_path.map(VarietyEnsemble::load).transpose()?;
    let system = recipe.as_str();

    // Single-variety recipes are only claimed for their own variety.
    let sides: Vec<(Variety, &ParallelCorpus, &str)> = match recipe {
        RecipeKind::Specific(Variety::A) | RecipeKind::Adapted(Variety::A) => {
            vec![(Variety::A, &data.test_a, "test_a")]
        }
        RecipeKind::Specific(Variety::B) | RecipeKind::Adapted(Variety::B) => {
            vec![(Variety::B, &data.test_b, "test_b")]
        }
        _ => vec![(Variety::A, &data.test_a, "test_a"), (Variety::B, &data.test_b, "test_b")],
    };

    let mut rows = Vec::new();
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut pooled_hyps = Vec::new();
    let mut pooled_refs = Vec::new();
    let mut evaluated = 0usize;
    for (variety, corpus, name) in &sides {
        if corpus.is_empty() {
            log::warn!("evaluate: {name} is empty, skipping");
            continue;
        }
        let token = recipe.uses_variety_tokens().then_some(*variety);
        let mut hyps = Vec::with_capacity(corpus.len());
        let mut refs = Vec::with_capacity(corpus.len());
        for pair in &corpus.pairs {
            hyps.push(translate(
                &ckpt.model,
                &subword,
                &pair.source_tokens,
                token,
                cfg.decode.beam_size,
                cfg.decode.max_len,
            )?);
            refs.push(pair.target_tokens.clone());
        }
        let report = corpus_bleu(&hyps, &refs)?;
        rows.push(tsv_row(system, name, "bleu", report.bleu));
        if let Some(table) = &table {
            match variety_consistency(&hyps, ConsistencyJudge::Table(table), *variety) {
                Ok(c) => rows.push(tsv_row(system, name, "consistency", c)),
                Err(Error::UndefinedMetric(why)) => {
                    log::warn!("evaluate: consistency undefined on {name}: {why}");
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(ensemble) = &ensemble {
            let c = variety_consistency(&hyps, ConsistencyJudge::Ensemble(ensemble), *variety)?;
            rows.push(tsv_row(system, name, "consistency_ensemble", c));
        }
        let side = name.rsplit('_').next().unwrap_or(name);
        let trans_path = out_dir.join(format!("translations-{side}.txt"));
        let joined: Vec<String> = hyps.iter().map(|h| h.join(" ")).collect();
        write_lines(&trans_path, &joined)?;
        outputs.push(trans_path);
        pooled_hyps.extend(hyps);
        pooled_refs.extend(refs);
        evaluated += 1;
    }
    if evaluated == 2 {
        rows.push(tsv_row(system, "test_all", "bleu", corpus_bleu(&pooled_hyps, &pooled_refs)?.bleu));
    }
    for row in &rows {
        println!("{row}");
    }
    let metrics_path = out_dir.join("metrics.tsv");
    write_lines(&metrics_path, &rows)?;
    outputs.push(metrics_path);

    let mut inputs = vec![("data", data_dir), ("model", model_path), ("subword", subword_path)];
    if let Some(path) = table_path {
        inputs.push(("table", path));
    }
    if let Some(path) = classifier_path {
        inputs.push(("classifier", path));
    }
    let output_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_stage_metadata(out_dir, "evaluate", cfg, &inputs, &output_refs)
}

/// Paired-bootstrap significance between two systems' tokenized outputs
/// against shared references. The report goes to stdout and to
/// `<out>/significance.txt`.
pub fn run_significance(
    cfg: &RunConfig,
    system_x: &Path,
    system_y: &Path,
    refs_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let hyps_x = read_token_lines(system_x)?;
    let hyps_y = read_token_lines(system_y)?;
    let refs = read_token_lines(refs_path)?;
    let result = paired_bootstrap(
        &hyps_x,
        &hyps_y,
        &refs,
        cfg.eval.bootstrap_resamples,
        cfg.eval.alpha,
        derive_seed(cfg.seed, SEED_BOOTSTRAP),
    )?;
    let report = result.report();
    print!("{report}");
    let report_path = out_dir.join("significance.txt");
    atomic_write(&report_path, report.as_bytes())?;
    write_stage_metadata(
        out_dir,
        "significance",
        cfg,
        &[("system_x", system_x), ("system_y", system_y), ("refs", refs_path)],
        &[&report_path],
    )
}

// ---------------------------------------------------------------------------
// Pipeline

/// Runs the full chain in numbered stage directories: data (synthesized or
/// prepared), classifier when the recipe needs one, training set, model,
/// evaluation. Each stage writes its own resolved config and manifest.
pub fn run_pipeline(cfg: &RunConfig, config_root: &Path, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let recipe = cfg.recipe()?;
    let data_stage = out_dir.join("01-data");
    let classifier_stage = out_dir.join("02-classifier");
    let dataset_stage = out_dir.join("03-dataset");
    let model_stage = out_dir.join("04-model");
    let eval_stage = out_dir.join("05-eval");
    let in_stage = |name: &str, r: Result<()>| -> Result<()> {
        r.map_err(|e| {
            log::error!("pipeline stage {name} failed: {e}");
            e
        })
    };

    log::info!("pipeline: 01-data");
    let synthetic = cfg.synth.is_some();
    in_stage(
        "01-data",
        if synthetic { run_synth(cfg, &data_stage) } else { run_prepare(cfg, config_root, &data_stage) },
    )?;
    let dataset_dir = data_stage.join("dataset");
    let subword_path = data_stage.join("subword.model");

    let classifier_path = if recipe.needs_judge() {
        log::info!("pipeline: 02-classifier");
        in_stage("02-classifier", run_train_classifier(cfg, &dataset_dir, &classifier_stage))?;
        Some(classifier_stage.join("ensemble.bin"))
    } else {
        None
    };

    log::info!("pipeline: 03-dataset");
    in_stage(
        "03-dataset",
        run_build_dataset(cfg, &dataset_dir, &subword_path, classifier_path.as_deref(), &dataset_stage),
    )?;

    log::info!("pipeline: 04-model");
    in_stage(
        "04-model",
        run_train_nmt(cfg, &dataset_dir, &dataset_stage.join("trainset"), &subword_path, &model_stage),
    )?;

    log::info!("pipeline: 05-eval");
    let table_path = synthetic.then(|| data_stage.join("variant_table.tsv"));
    in_stage(
        "05-eval",
        run_evaluate(
            cfg,
            &dataset_dir,
            &model_stage.join("best.ckpt"),
            &subword_path,
            table_path.as_deref(),
            classifier_path.as_deref(),
            &eval_stage,
        ),
    )?;

    let mut stage_dirs = vec![data_stage, dataset_stage, model_stage, eval_stage];
    if recipe.needs_judge() {
        stage_dirs.insert(1, classifier_stage);
    }
    let stage_refs: Vec<&Path> = stage_dirs.iter().map(PathBuf::as_path).collect();
    write_stage_metadata(out_dir, "pipeline", cfg, &[], &stage_refs)
}

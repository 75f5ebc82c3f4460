//! A small encoder-decoder translation model trained from scratch in pure
//! Rust: exact gradients in 64-bit arithmetic, Adam with warmup, beam
//! decoding, and byte-stable checkpoints. Forcing an output variety works
//! by prepending a variety token to the source and simultaneously using
//! that token as the decoder's start symbol.

mod beam;
mod layers;
mod model;
mod train;

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

use crate::corpus::Variety;
use crate::error::{Error, Result};
use crate::eval::corpus_bleu;
use crate::recipes::{prepend_variety_token, DevItem};
use crate::subword::{SubwordModel, VARIETY_B_ID};
use crate::util::{atomic_write, read_bytes, ByteReader, ByteWriter};

pub use beam::{beam_search, BeamHyp};
pub use model::{
    decoder_start, forward, init_model, loss_and_gradients, token_accuracy, TransformerConfig,
    TranslationModel, UnitPair,
};
pub use train::{learning_rate, train, Checkpoint, TrainOutcome, TrainingConfig};

const CHECKPOINT_MAGIC: &[u8; 4] = b"VMTM";
const CHECKPOINT_VERSION: u32 = 1;

/// Step size for central finite differences.
const FD_EPSILON: f64 = 1e-5;

/// Outcome of comparing analytic gradients with finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of parameter families (names with layer indices collapsed).
    pub families: usize,
    /// Total coordinates compared.
    pub checked: usize,
    pub worst_rel_err: f64,
    /// Parameter holding the worst coordinate.
    pub worst_name: String,
}

fn family_of(name: &str) -> String {
    name.split('.')
        .map(|part| if part.parse::<usize>().is_ok() { "*" } else { part })
        .collect::<Vec<_>>()
        .join(".")
}

/// Samples `per_family` random coordinates from every parameter family and
/// compares the analytic batch-loss gradient against central finite
/// differences. The relative error uses |a - n| / max(|a|, |n|, 1e-10).
pub fn gradient_check(
    model: &TranslationModel,
    batch: &[UnitPair],
    smoothing: f64,
    per_family: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, analytic) = model::loss_and_gradients(model, batch, smoothing)?;
    let mut families: BTreeMap<String, Vec<&String>> = BTreeMap::new();
    for name in model.params.keys() {
        families.entry(family_of(name)).or_default().push(name);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut scratch = model.clone();
    let mut worst_rel_err = 0.0f64;
    let mut worst_name = String::new();
    let mut checked = 0usize;
    for members in families.values() {
        for _ in 0..per_family {
            let name = members[rng.random_range(0..members.len())];
            let (rows, cols) = model.params[name].dim();
            let r = rng.random_range(0..rows);
            let c = rng.random_range(0..cols);
            let original = model.params[name][[r, c]];
            scratch.params.get_mut(name).unwrap()[[r, c]] = original + FD_EPSILON;
            let plus = model::batch_loss(&scratch, batch, smoothing)?;
            scratch.params.get_mut(name).unwrap()[[r, c]] = original - FD_EPSILON;
            let minus = model::batch_loss(&scratch, batch, smoothing)?;
            scratch.params.get_mut(name).unwrap()[[r, c]] = original;
            let numeric = (plus - minus) / (2.0 * FD_EPSILON);
            let exact = analytic.get(name).map(|g| g[[r, c]]).unwrap_or(0.0);
            let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-10);
            checked += 1;
            if rel > worst_rel_err {
                worst_rel_err = rel;
                worst_name = name.to_string();
            }
        }
    }
    Ok(GradCheckReport { families: families.len(), checked, worst_rel_err, worst_name })
}

/// Serializes a checkpoint: a fixed magic and version, the step, the
/// architecture, the subword fingerprint, then every tensor by name. The
/// encoding has no timestamps, so identical models give identical bytes.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let cfg = &ckpt.model.config;
    let mut w = ByteWriter::new();
    w.raw(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(ckpt.step as u64);
    w.u32(cfg.num_layers as u32);
    w.u32(cfg.model_dim as u32);
    w.u32(cfg.num_heads as u32);
    w.u32(cfg.ffn_dim as u32);
    w.f64(cfg.dropout);
    w.u32(cfg.max_positions as u32);
    w.u32(cfg.vocab_size as u32);
    w.u8(cfg.share_embeddings as u8);
    w.u64(ckpt.model.subword_fingerprint);
    w.u32(ckpt.model.params.len() as u32);
    for (name, m) in &ckpt.model.params {
        w.str(name);
        w.u32(m.nrows() as u32);
        w.u32(m.ncols() as u32);
        for v in m.iter() {
            w.f64(*v);
        }
    }
    w.into_bytes()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, &checkpoint_to_bytes(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_bytes(path)?;
    let mut r = ByteReader::new(&bytes, path);
    if r.raw(4)? != CHECKPOINT_MAGIC {
        return Err(r.err("not a model checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let step = r.u64()? as usize;
    let config = TransformerConfig {
        num_layers: r.u32()? as usize,
        model_dim: r.u32()? as usize,
        num_heads: r.u32()? as usize,
        ffn_dim: r.u32()? as usize,
        dropout: r.f64()?,
        max_positions: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
        share_embeddings: r.u8()? != 0,
    };
    config.validate()?;
    let subword_fingerprint = r.u64()?;
    let n_tensors = r.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = r.str()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            values.push(r.f64()?);
        }
        let m = Array2::from_shape_vec((rows, cols), values)
            .map_err(|_| Error::format(path, format!("bad shape for tensor {name}")))?;
        if params.insert(name.clone(), m).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;
    let model = TranslationModel { config, params, subword_fingerprint };
    // The tensor set must describe exactly the declared architecture.
    let expected = model::parameter_layout(&model.config);
    if expected.len() != model.params.len() {
        return Err(Error::format(path, "tensor set does not match the architecture"));
    }
    for (name, shape, _) in expected {
        match model.params.get(&name) {
            Some(m) if m.dim() == shape => {}
            Some(_) => {
                return Err(Error::format(path, format!("tensor {name} has the wrong shape")))
            }
            None => return Err(Error::format(path, format!("missing tensor {name}"))),
        }
    }
    Ok(Checkpoint { step, model })
}

/// Translates one tokenized sentence. When a variety is requested its
/// token is prepended to the segmented source, which also makes it the
/// decoder's start symbol. The subword inventory must be the one the model
/// was trained with.
pub fn translate(
    model: &TranslationModel,
    subword: &SubwordModel,
    source_tokens: &[String],
    variety: Option<Variety>,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<String>> {
    if model.subword_fingerprint != subword.fingerprint() {
        return Err(Error::Config(
            "subword inventory does not match the one the model was trained with".into(),
        ));
    }
    let mut units = subword.segment_ids(source_tokens);
    if let Some(v) = variety {
        if model.config.vocab_size <= VARIETY_B_ID as usize {
            return Err(Error::Config(
                "a variety was requested but the model vocabulary has no variety tokens".into(),
            ));
        }
        units = prepend_variety_token(&units, v)?;
    }
    let hyp = beam_search(model, &units, beam_size, max_len)?;
    subword.desegment_ids(&hyp.units)
}

/// Pooled and per-variety decode quality of one checkpoint on a dev set.
#[derive(Debug, Clone)]
pub struct CheckpointScore {
    pub step: usize,
    pub bleu: f64,
    pub bleu_a: Option<f64>,
    pub bleu_b: Option<f64>,
}

/// Decodes the dev items with every checkpoint and keeps the one with the
/// highest pooled score; ties go to the later step. Also returns the
/// per-checkpoint scores for reporting.
pub fn select_best_checkpoint(
    checkpoints: &[Checkpoint],
    dev: &[DevItem],
    subword: &SubwordModel,
    beam_size: usize,
    max_len: usize,
) -> Result<(Checkpoint, Vec<CheckpointScore>)> {
    if checkpoints.is_empty() {
        return Err(Error::EmptyData("no checkpoints to select from".into()));
    }
    if dev.is_empty() {
        return Err(Error::EmptyData("checkpoint selection requires dev sentences".into()));
    }
    let mut order: Vec<usize> = (0..checkpoints.len()).collect();
    order.sort_by_key(|&i| checkpoints[i].step);

    let mut scores = Vec::with_capacity(checkpoints.len());
    let mut best: Option<(usize, f64)> = None;
    for &i in &order {
        let ckpt = &checkpoints[i];
        let mut hyps = Vec::with_capacity(dev.len());
        let mut refs = Vec::with_capacity(dev.len());
        for item in dev {
            hyps.push(translate(
                &ckpt.model,
                subword,
                &item.source_tokens,
                item.variety,
                beam_size,
                max_len,
            )?);
            refs.push(item.reference_tokens.clone());
        }
        let pooled = corpus_bleu(&hyps, &refs)?.bleu;
        let side = |want: Variety| -> Result<Option<f64>> {
            let pairs: Vec<(Vec<String>, Vec<String>)> = dev
                .iter()
                .zip(hyps.iter())
                .filter(|(item, _)| item.variety == Some(want))
                .map(|(item, hyp)| (hyp.clone(), item.reference_tokens.clone()))
                .collect();
            if pairs.is_empty() {
                return Ok(None);
            }
            let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            Ok(Some(corpus_bleu(&h, &r)?.bleu))
        };
        scores.push(CheckpointScore {
            step: ckpt.step,
            bleu: pooled,
            bleu_a: side(Variety::A)?,
            bleu_b: side(Variety::B)?,
        });
        // >= so that equal scores promote the later step.
        if best.map(|(_, b)| pooled >= b).unwrap_or(true) {
            best = Some((i, pooled));
        }
    }
    let (idx, _) = best.expect("at least one checkpoint was scored");
    Ok((checkpoints[idx].clone(), scores))
}

//! The sequence-to-sequence model: parameter layout, forward pass over one
//! sentence pair, and the exact backward pass for training.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::subword::{is_variety_token, BOS_ID, EOS_ID};
use crate::util::derive_seed2;

use super::layers::{
    add_positions, attention, attention_backward, dropout, ffn, ffn_backward, layer_norm,
    layer_norm_backward, AttnCache, AttnWeights, DropMask, FfnCache, LnCache,
};

/// Architecture hyperparameters. The defaults describe the small model used
/// throughout: 2 layers per stack, width 64, 4 heads, feed-forward 256.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Longest supported input or output, in subword units including the
    /// appended sentinel positions.
    pub max_positions: usize,
    pub vocab_size: usize,
    /// Reuse the input embedding matrix as the output projection.
    pub share_embeddings: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            max_positions: 96,
            vocab_size: 512,
            share_embeddings: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.model_dim == 0 || self.model_dim % 2 != 0 {
            return Err(Error::Config("model_dim must be a positive even number".into()));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads ({}) must divide model_dim ({})",
                self.num_heads, self.model_dim
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.max_positions < 72 {
            return Err(Error::Config("max_positions must be at least 72".into()));
        }
        if self.vocab_size <= EOS_ID as usize {
            return Err(Error::Config("vocab_size must cover the reserved ids".into()));
        }
        Ok(())
    }
}

/// A model is its configuration plus named parameter matrices. Bias and
/// normalization vectors are stored as [1 x n] matrices so every parameter
/// lives in the same map.
#[derive(Debug, Clone)]
pub struct TranslationModel {
    pub config: TransformerConfig,
    pub params: BTreeMap<String, Array2<f64>>,
    /// Fingerprint of the subword model the unit ids refer to.
    pub subword_fingerprint: u64,
}

#[derive(Clone, Copy)]
pub(super) enum ParamKind {
    Embedding,
    Xavier,
    Zero,
    One,
}

/// Enumerates parameter names with their shapes in a fixed order, so that
/// initialization draws random numbers deterministically.
pub(super) fn parameter_layout(config: &TransformerConfig) -> Vec<(String, (usize, usize), ParamKind)> {
    use ParamKind::*;
    let d = config.model_dim;
    let f = config.ffn_dim;
    let v = config.vocab_size;
    let mut out = Vec::new();
    out.push(("embed".to_string(), (v, d), Embedding));
    let push_ffn_block = |out: &mut Vec<(String, (usize, usize), ParamKind)>, prefix: &str| {
        out.push((format!("{prefix}.ffn_ln.gain"), (1, d), One));
        out.push((format!("{prefix}.ffn_ln.bias"), (1, d), Zero));
        out.push((format!("{prefix}.ffn.w1"), (d, f), Xavier));
        out.push((format!("{prefix}.ffn.b1"), (1, f), Zero));
        out.push((format!("{prefix}.ffn.w2"), (f, d), Xavier));
        out.push((format!("{prefix}.ffn.b2"), (1, d), Zero));
    };
    let push_attn = |out: &mut Vec<(String, (usize, usize), ParamKind)>, prefix: &str| {
        for name in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{prefix}.{name}"), (d, d), Xavier));
        }
    };
    let push_ln = |out: &mut Vec<(String, (usize, usize), ParamKind)>, prefix: &str| {
        out.push((format!("{prefix}.gain"), (1, d), One));
        out.push((format!("{prefix}.bias"), (1, d), Zero));
    };
    for i in 0..config.num_layers {
        push_ln(&mut out, &format!("enc.{i}.attn_ln"));
        push_attn(&mut out, &format!("enc.{i}.attn"));
        push_ffn_block(&mut out, &format!("enc.{i}"));
    }
    push_ln(&mut out, "enc.final_ln");
    for i in 0..config.num_layers {
        push_ln(&mut out, &format!("dec.{i}.self_ln"));
        push_attn(&mut out, &format!("dec.{i}.self_attn"));
        push_ln(&mut out, &format!("dec.{i}.cross_ln"));
        push_attn(&mut out, &format!("dec.{i}.cross_attn"));
        push_ffn_block(&mut out, &format!("dec.{i}"));
    }
    push_ln(&mut out, "dec.final_ln");
    if !config.share_embeddings {
        out.push(("out_proj".to_string(), (v, d), Xavier));
    }
    out
}

/// Creates a freshly initialized model. Weight matrices draw from the
/// Xavier uniform range, embeddings from U(-1/sqrt(d), 1/sqrt(d)),
/// normalization gains start at one and all bias vectors at zero.
pub fn init_model(
    config: &TransformerConfig,
    subword_fingerprint: u64,
    seed: u64,
) -> Result<TranslationModel> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, (rows, cols), kind) in parameter_layout(config) {
        let m = match kind {
            ParamKind::Embedding => {
                let limit = 1.0 / (config.model_dim as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
            }
            ParamKind::Xavier => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
            }
            ParamKind::Zero => Array2::zeros((rows, cols)),
            ParamKind::One => Array2::ones((rows, cols)),
        };
        params.insert(name, m);
    }
    Ok(TranslationModel { config: config.clone(), params, subword_fingerprint })
}

impl TranslationModel {
    pub(super) fn p(&self, name: &str) -> &Array2<f64> {
        self.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn attn_weights(&self, prefix: &str) -> AttnWeights<'_> {
        AttnWeights {
            wq: self.p(&format!("{prefix}.wq")),
            wk: self.p(&format!("{prefix}.wk")),
            wv: self.p(&format!("{prefix}.wv")),
            wo: self.p(&format!("{prefix}.wo")),
        }
    }
}

/// The decoder's start symbol for a sentence whose encoder input is
/// `source_units`: normally BOS, but when the source carries a variety
/// token in front that token takes BOS's place so the decoder knows the
/// requested variety from position zero.
pub fn decoder_start(source_units: &[u32]) -> u32 {
    match source_units.first() {
        Some(&id) if is_variety_token(id) => id,
        _ => BOS_ID,
    }
}

fn check_ids(units: &[u32], vocab: usize) -> Result<()> {
    for &id in units {
        if id as usize >= vocab {
            return Err(Error::VocabId { id, vocab });
        }
    }
    Ok(())
}

struct LayerTape {
    ln1: LnCache,
    norm1: Array2<f64>,
    attn: AttnCache,
    drop1: DropMask,
    ln2: LnCache,
    ffn: FfnCache,
    drop2: DropMask,
}

struct DecLayerTape {
    self_ln: LnCache,
    self_norm: Array2<f64>,
    self_attn: AttnCache,
    self_drop: DropMask,
    cross_ln: LnCache,
    cross_norm: Array2<f64>,
    cross_attn: AttnCache,
    cross_drop: DropMask,
    ffn_ln: LnCache,
    ffn: FfnCache,
    ffn_drop: DropMask,
}

pub(super) struct EncTape {
    src_ids: Vec<u32>,
    drop: DropMask,
    layers: Vec<LayerTape>,
    final_ln: LnCache,
    pub(super) out: Array2<f64>,
}

pub(super) struct DecTape {
    dec_ids: Vec<u32>,
    drop: DropMask,
    layers: Vec<DecLayerTape>,
    final_ln: LnCache,
    pub(super) out: Array2<f64>,
}

/// Everything the backward pass needs from one forward run.
pub struct Tape {
    enc: EncTape,
    dec: DecTape,
    pub(super) logits: Array2<f64>,
}

fn embed_sequence(model: &TranslationModel, ids: &[u32]) -> Array2<f64> {
    let d = model.config.model_dim;
    let scale = (d as f64).sqrt();
    let embed = model.p("embed");
    let mut x = Array2::zeros((ids.len(), d));
    for (r, &id) in ids.iter().enumerate() {
        for c in 0..d {
            x[[r, c]] = embed[[id as usize, c]] * scale;
        }
    }
    add_positions(&mut x);
    x
}

/// Runs the encoder over `source_units` (the end sentinel is appended
/// here). Dropout only applies when an RNG is handed in.
pub(super) fn encoder_pass(
    model: &TranslationModel,
    source_units: &[u32],
    mut rng: Option<&mut ChaCha12Rng>,
) -> Result<EncTape> {
    let cfg = &model.config;
    let mut src_ids = source_units.to_vec();
    src_ids.push(EOS_ID);
    check_ids(&src_ids, cfg.vocab_size)?;
    if src_ids.len() > cfg.max_positions {
        return Err(Error::Length { len: src_ids.len(), max: cfg.max_positions });
    }
    let rate = cfg.dropout;
    let heads = cfg.num_heads;

    let mut x = embed_sequence(model, &src_ids);
    let drop = dropout(&mut x, rate, rng.as_deref_mut());
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let (norm1, ln1) = layer_norm(
            &x,
            model.p(&format!("enc.{i}.attn_ln.gain")),
            model.p(&format!("enc.{i}.attn_ln.bias")),
        );
        let (mut a, attn) =
            attention(&norm1, &norm1, &model.attn_weights(&format!("enc.{i}.attn")), heads, false);
        let drop1 = dropout(&mut a, rate, rng.as_deref_mut());
        x += &a;
        let (norm2, ln2) = layer_norm(
            &x,
            model.p(&format!("enc.{i}.ffn_ln.gain")),
            model.p(&format!("enc.{i}.ffn_ln.bias")),
        );
        let (mut f, ffn_cache) = ffn(
            &norm2,
            model.p(&format!("enc.{i}.ffn.w1")),
            model.p(&format!("enc.{i}.ffn.b1")),
            model.p(&format!("enc.{i}.ffn.w2")),
            model.p(&format!("enc.{i}.ffn.b2")),
        );
        let drop2 = dropout(&mut f, rate, rng.as_deref_mut());
        x += &f;
        layers.push(LayerTape { ln1, norm1, attn, drop1, ln2, ffn: ffn_cache, drop2 });
    }
    let (out, final_ln) =
        layer_norm(&x, model.p("enc.final_ln.gain"), model.p("enc.final_ln.bias"));
    Ok(EncTape { src_ids, drop, layers, final_ln, out })
}

/// Runs the decoder for a full input sequence (start symbol already in
/// front) against fixed encoder states, producing next-unit logits.
pub(super) fn decoder_pass(
    model: &TranslationModel,
    enc_out: &Array2<f64>,
    dec_ids: &[u32],
    mut rng: Option<&mut ChaCha12Rng>,
) -> Result<DecTape> {
    let cfg = &model.config;
    check_ids(dec_ids, cfg.vocab_size)?;
    if dec_ids.len() > cfg.max_positions {
        return Err(Error::Length { len: dec_ids.len(), max: cfg.max_positions });
    }
    let rate = cfg.dropout;
    let heads = cfg.num_heads;

    let mut y = embed_sequence(model, dec_ids);
    let drop = dropout(&mut y, rate, rng.as_deref_mut());
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let (self_norm, self_ln) = layer_norm(
            &y,
            model.p(&format!("dec.{i}.self_ln.gain")),
            model.p(&format!("dec.{i}.self_ln.bias")),
        );
        let (mut a, self_attn) = attention(
            &self_norm,
            &self_norm,
            &model.attn_weights(&format!("dec.{i}.self_attn")),
            heads,
            true,
        );
        let self_drop = dropout(&mut a, rate, rng.as_deref_mut());
        y += &a;
        let (cross_norm, cross_ln) = layer_norm(
            &y,
            model.p(&format!("dec.{i}.cross_ln.gain")),
            model.p(&format!("dec.{i}.cross_ln.bias")),
        );
        let (mut c, cross_attn) = attention(
            &cross_norm,
            enc_out,
            &model.attn_weights(&format!("dec.{i}.cross_attn")),
            heads,
            false,
        );
        let cross_drop = dropout(&mut c, rate, rng.as_deref_mut());
        y += &c;
        let (ffn_norm, ffn_ln) = layer_norm(
            &y,
            model.p(&format!("dec.{i}.ffn_ln.gain")),
            model.p(&format!("dec.{i}.ffn_ln.bias")),
        );
        let (mut f, ffn_cache) = ffn(
            &ffn_norm,
            model.p(&format!("dec.{i}.ffn.w1")),
            model.p(&format!("dec.{i}.ffn.b1")),
            model.p(&format!("dec.{i}.ffn.w2")),
            model.p(&format!("dec.{i}.ffn.b2")),
        );
        let ffn_drop = dropout(&mut f, rate, rng.as_deref_mut());
        y += &f;
        layers.push(DecLayerTape {
            self_ln,
            self_norm,
            self_attn,
            self_drop,
            cross_ln,
            cross_norm,
            cross_attn,
            cross_drop,
            ffn_ln,
            ffn: ffn_cache,
            ffn_drop,
        });
    }
    let (out, final_ln) =
        layer_norm(&y, model.p("dec.final_ln.gain"), model.p("dec.final_ln.bias"));
    Ok(DecTape { dec_ids: dec_ids.to_vec(), drop, layers, final_ln, out })
}

/// The matrix whose rows are the output classes: the shared embedding or
/// the dedicated projection.
pub(super) fn output_matrix(model: &TranslationModel) -> &Array2<f64> {
    if model.config.share_embeddings {
        model.p("embed")
    } else {
        model.p("out_proj")
    }
}

/// Runs the full network over one sentence pair and records a tape.
/// `dec_ids` is the complete decoder input including its start symbol.
pub(super) fn run_forward(
    model: &TranslationModel,
    source_units: &[u32],
    dec_ids: &[u32],
    mut rng: Option<&mut ChaCha12Rng>,
) -> Result<Tape> {
    let enc = encoder_pass(model, source_units, rng.as_deref_mut())?;
    let dec = decoder_pass(model, &enc.out, dec_ids, rng)?;
    let logits = dec.out.dot(&output_matrix(model).t());
    Ok(Tape { enc, dec, logits })
}

fn add_grad(grads: &mut BTreeMap<String, Array2<f64>>, name: String, g: Array2<f64>) {
    match grads.entry(name) {
        std::collections::btree_map::Entry::Occupied(mut e) => *e.get_mut() += &g,
        std::collections::btree_map::Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

fn scatter_embedding(
    model: &TranslationModel,
    grads: &mut BTreeMap<String, Array2<f64>>,
    ids: &[u32],
    dx: &Array2<f64>,
) {
    let d = model.config.model_dim;
    let scale = (d as f64).sqrt();
    let mut dembed = Array2::zeros((model.config.vocab_size, d));
    for (r, &id) in ids.iter().enumerate() {
        for c in 0..d {
            dembed[[id as usize, c]] += dx[[r, c]] * scale;
        }
    }
    add_grad(grads, "embed".into(), dembed);
}

/// Accumulates `dlogits` back through the tape into `grads` (missing
/// entries are created on first touch).
pub(super) fn run_backward(
    model: &TranslationModel,
    tape: &Tape,
    dlogits: &Array2<f64>,
    grads: &mut BTreeMap<String, Array2<f64>>,
) {
    let cfg = &model.config;

    // Output projection.
    let mut dy = if cfg.share_embeddings {
        add_grad(grads, "embed".into(), dlogits.t().dot(&tape.dec.out));
        dlogits.dot(model.p("embed"))
    } else {
        add_grad(grads, "out_proj".into(), dlogits.t().dot(&tape.dec.out));
        dlogits.dot(model.p("out_proj"))
    };

    // Decoder final norm.
    let (dx, dgain, dbias) =
        layer_norm_backward(&dy, &tape.dec.final_ln, model.p("dec.final_ln.gain"));
    add_grad(grads, "dec.final_ln.gain".into(), dgain);
    add_grad(grads, "dec.final_ln.bias".into(), dbias);
    dy = dx;

    let mut d_enc_out = Array2::zeros(tape.enc.out.dim());
    for i in (0..cfg.num_layers).rev() {
        let t = &tape.dec.layers[i];
        // Feed-forward branch.
        let mut df = dy.clone();
        t.ffn_drop.backward(&mut df);
        let fg = ffn_backward(
            &df,
            model.p(&format!("dec.{i}.ffn.w1")),
            model.p(&format!("dec.{i}.ffn.w2")),
            &t.ffn,
        );
        add_grad(grads, format!("dec.{i}.ffn.w1"), fg.dw1);
        add_grad(grads, format!("dec.{i}.ffn.b1"), fg.db1);
        add_grad(grads, format!("dec.{i}.ffn.w2"), fg.dw2);
        add_grad(grads, format!("dec.{i}.ffn.b2"), fg.db2);
        let (dx, dgain, dbias) =
            layer_norm_backward(&fg.dx, &t.ffn_ln, model.p(&format!("dec.{i}.ffn_ln.gain")));
        add_grad(grads, format!("dec.{i}.ffn_ln.gain"), dgain);
        add_grad(grads, format!("dec.{i}.ffn_ln.bias"), dbias);
        dy += &dx;

        // Cross-attention branch.
        let mut dc = dy.clone();
        t.cross_drop.backward(&mut dc);
        let w = model.attn_weights(&format!("dec.{i}.cross_attn"));
        let ag = attention_backward(&dc, &t.cross_norm, &tape.enc.out, &w, &t.cross_attn);
        add_grad(grads, format!("dec.{i}.cross_attn.wq"), ag.dwq);
        add_grad(grads, format!("dec.{i}.cross_attn.wk"), ag.dwk);
        add_grad(grads, format!("dec.{i}.cross_attn.wv"), ag.dwv);
        add_grad(grads, format!("dec.{i}.cross_attn.wo"), ag.dwo);
        d_enc_out += &ag.dkv_in;
        let (dx, dgain, dbias) =
            layer_norm_backward(&ag.dq_in, &t.cross_ln, model.p(&format!("dec.{i}.cross_ln.gain")));
        add_grad(grads, format!("dec.{i}.cross_ln.gain"), dgain);
        add_grad(grads, format!("dec.{i}.cross_ln.bias"), dbias);
        dy += &dx;

        // Self-attention branch.
        let mut da = dy.clone();
        t.self_drop.backward(&mut da);
        let w = model.attn_weights(&format!("dec.{i}.self_attn"));
        let ag = attention_backward(&da, &t.self_norm, &t.self_norm, &w, &t.self_attn);
        add_grad(grads, format!("dec.{i}.self_attn.wq"), ag.dwq);
        add_grad(grads, format!("dec.{i}.self_attn.wk"), ag.dwk);
        add_grad(grads, format!("dec.{i}.self_attn.wv"), ag.dwv);
        add_grad(grads, format!("dec.{i}.self_attn.wo"), ag.dwo);
        let dn = ag.dq_in + ag.dkv_in;
        let (dx, dgain, dbias) =
            layer_norm_backward(&dn, &t.self_ln, model.p(&format!("dec.{i}.self_ln.gain")));
        add_grad(grads, format!("dec.{i}.self_ln.gain"), dgain);
        add_grad(grads, format!("dec.{i}.self_ln.bias"), dbias);
        dy += &dx;
    }

    // Decoder embedding.
    tape.dec.drop.backward(&mut dy);
    scatter_embedding(model, grads, &tape.dec.dec_ids, &dy);

    // Encoder final norm, then the encoder stack.
    let (dx, dgain, dbias) =
        layer_norm_backward(&d_enc_out, &tape.enc.final_ln, model.p("enc.final_ln.gain"));
    add_grad(grads, "enc.final_ln.gain".into(), dgain);
    add_grad(grads, "enc.final_ln.bias".into(), dbias);
    let mut dx_enc = dx;
    for i in (0..cfg.num_layers).rev() {
        let t = &tape.enc.layers[i];
        let mut df = dx_enc.clone();
        t.drop2.backward(&mut df);
        let fg = ffn_backward(
            &df,
            model.p(&format!("enc.{i}.ffn.w1")),
            model.p(&format!("enc.{i}.ffn.w2")),
            &t.ffn,
        );
        add_grad(grads, format!("enc.{i}.ffn.w1"), fg.dw1);
        add_grad(grads, format!("enc.{i}.ffn.b1"), fg.db1);
        add_grad(grads, format!("enc.{i}.ffn.w2"), fg.dw2);
        add_grad(grads, format!("enc.{i}.ffn.b2"), fg.db2);
        let (dx, dgain, dbias) =
            layer_norm_backward(&fg.dx, &t.ln2, model.p(&format!("enc.{i}.ffn_ln.gain")));
        add_grad(grads, format!("enc.{i}.ffn_ln.gain"), dgain);
        add_grad(grads, format!("enc.{i}.ffn_ln.bias"), dbias);
        dx_enc += &dx;

        let mut da = dx_enc.clone();
        t.drop1.backward(&mut da);
        let w = model.attn_weights(&format!("enc.{i}.attn"));
        let ag = attention_backward(&da, &t.norm1, &t.norm1, &w, &t.attn);
        add_grad(grads, format!("enc.{i}.attn.wq"), ag.dwq);
        add_grad(grads, format!("enc.{i}.attn.wk"), ag.dwk);
        add_grad(grads, format!("enc.{i}.attn.wv"), ag.dwv);
        add_grad(grads, format!("enc.{i}.attn.wo"), ag.dwo);
        let dn = ag.dq_in + ag.dkv_in;
        let (dx, dgain, dbias) =
            layer_norm_backward(&dn, &t.ln1, model.p(&format!("enc.{i}.attn_ln.gain")));
        add_grad(grads, format!("enc.{i}.attn_ln.gain"), dgain);
        add_grad(grads, format!("enc.{i}.attn_ln.bias"), dbias);
        dx_enc += &dx;
    }
    tape.enc.drop.backward(&mut dx_enc);
    scatter_embedding(model, grads, &tape.enc.src_ids, &dx_enc);
}

/// Teacher-forced next-unit log-probabilities. Returns one row per decoder
/// input position ([prefix length + 1, vocab]): row t gives the
/// distribution over the unit following the first t prefix units. The end
/// sentinel is appended to the source internally.
pub fn forward(
    model: &TranslationModel,
    source_units: &[u32],
    target_prefix: &[u32],
) -> Result<Array2<f64>> {
    let mut dec_ids = Vec::with_capacity(target_prefix.len() + 1);
    dec_ids.push(decoder_start(source_units));
    dec_ids.extend_from_slice(target_prefix);
    let tape = run_forward(model, source_units, &dec_ids, None)?;
    Ok(log_softmax_rows(&tape.logits))
}

pub(super) fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v -= log_sum;
        }
    }
    out
}

/// Label-smoothed cross entropy for one example, in nats, summed over the
/// target positions. Also returns dloss/dlogits scaled by `inv_tokens`
/// (one over the averaging denominator of the whole batch).
pub(super) fn smoothed_loss(
    logits: &Array2<f64>,
    targets: &[u32],
    smoothing: f64,
    inv_tokens: f64,
) -> (f64, Array2<f64>) {
    let vocab = logits.ncols() as f64;
    let log_probs = log_softmax_rows(logits);
    let mut dlogits = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (r, &target) in targets.iter().enumerate() {
        let uniform = smoothing / vocab;
        for c in 0..logits.ncols() {
            let q = uniform + if c == target as usize { 1.0 - smoothing } else { 0.0 };
            loss -= q * log_probs[[r, c]];
            let p = log_probs[[r, c]].exp();
            dlogits[[r, c]] = (p - q) * inv_tokens;
        }
    }
    (loss, dlogits)
}

/// One training example: source units (possibly carrying a variety token in
/// front) and target units, both without sentence sentinels.
pub type UnitPair = (Vec<u32>, Vec<u32>);

/// Builds decoder input and prediction targets for a pair.
pub(super) fn teacher_forcing(source_units: &[u32], target_units: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut dec_ids = Vec::with_capacity(target_units.len() + 1);
    dec_ids.push(decoder_start(source_units));
    dec_ids.extend_from_slice(target_units);
    let mut targets = target_units.to_vec();
    targets.push(EOS_ID);
    (dec_ids, targets)
}

/// Average label-smoothed loss over every target position in the batch,
/// with gradients for all parameters. This entry point never applies
/// dropout, so its value is a pure function of model and data.
pub fn loss_and_gradients(
    model: &TranslationModel,
    batch: &[UnitPair],
    smoothing: f64,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    loss_and_gradients_inner(model, batch, smoothing, None)
}

fn check_batch(batch: &[UnitPair], smoothing: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyData("loss requires at least one sentence pair".into()));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
    }
    let total_tokens: usize = batch.iter().map(|(_, t)| t.len() + 1).sum();
    Ok(1.0 / total_tokens as f64)
}

/// Shared worker: `dropout_seeds` carries one RNG seed per example when the
/// training loop wants dropout.
pub(super) fn loss_and_gradients_inner(
    model: &TranslationModel,
    batch: &[UnitPair],
    smoothing: f64,
    dropout_seeds: Option<&[u64]>,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    let inv_tokens = check_batch(batch, smoothing)?;
    let mut grads = BTreeMap::new();
    let mut loss_sum = 0.0;
    for (idx, (src, tgt)) in batch.iter().enumerate() {
        let (dec_ids, targets) = teacher_forcing(src, tgt);
        let mut rng = dropout_seeds.map(|seeds| ChaCha12Rng::seed_from_u64(seeds[idx]));
        let tape = run_forward(model, src, &dec_ids, rng.as_mut())?;
        let (loss, dlogits) = smoothed_loss(&tape.logits, &targets, smoothing, inv_tokens);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became non-finite on batch example {idx}")));
        }
        loss_sum += loss;
        run_backward(model, &tape, &dlogits, &mut grads);
    }
    Ok((loss_sum * inv_tokens, grads))
}

/// The batch loss alone, identical to `loss_and_gradients` in value.
pub(super) fn batch_loss(
    model: &TranslationModel,
    batch: &[UnitPair],
    smoothing: f64,
) -> Result<f64> {
    let inv_tokens = check_batch(batch, smoothing)?;
    let mut loss_sum = 0.0;
    for (idx, (src, tgt)) in batch.iter().enumerate() {
        let (dec_ids, targets) = teacher_forcing(src, tgt);
        let tape = run_forward(model, src, &dec_ids, None)?;
        let (loss, _) = smoothed_loss(&tape.logits, &targets, smoothing, inv_tokens);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became non-finite on batch example {idx}")));
        }
        loss_sum += loss;
    }
    Ok(loss_sum * inv_tokens)
}

/// Fraction of teacher-forced positions where the argmax unit equals the
/// reference unit, over all pairs.
pub fn token_accuracy(model: &TranslationModel, pairs: &[UnitPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyData("accuracy requires at least one sentence pair".into()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (src, tgt) in pairs {
        let (dec_ids, targets) = teacher_forcing(src, tgt);
        let tape = run_forward(model, src, &dec_ids, None)?;
        for (r, &want) in targets.iter().enumerate() {
            let row = tape.logits.row(r);
            let mut best = 0usize;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            hits += usize::from(best == want as usize);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Per-example dropout seed for a given optimizer step, derived from the
/// run seed so that the noise stream depends only on step and position in
/// the batch.
pub(super) fn dropout_seed(train_seed: u64, step: usize, example_index: usize) -> u64 {
    derive_seed2(train_seed, step as u64, example_index as u64)
}

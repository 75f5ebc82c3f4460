//! Beam decoding. Finished hypotheses stay in the beam with frozen scores
//! and keep competing against live extensions; the final answer maximizes
//! log-probability divided by generated length.

use crate::error::{Error, Result};
use crate::subword::{BOS_ID, EOS_ID, PAD_ID, VARIETY_A_ID, VARIETY_B_ID};

use super::model::{decoder_pass, decoder_start, encoder_pass, output_matrix, TranslationModel};

/// A decoded hypothesis: generated units (end sentinel stripped) and its
/// length-normalized score.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHyp {
    pub units: Vec<u32>,
    /// Sum of unit log-probabilities divided by the number of generated
    /// units (the end sentinel counts when one was produced).
    pub score: f64,
}

#[derive(Clone)]
struct Hyp {
    units: Vec<u32>,
    logp: f64,
    finished: bool,
}

/// Ids the decoder must never emit: padding, the plain start symbol, and
/// the variety tags. The unknown and end sentinels stay available.
fn banned(id: u32) -> bool {
    matches!(id, PAD_ID | BOS_ID | VARIETY_A_ID | VARIETY_B_ID)
}

/// Decodes one source. `max_len` caps the number of generated units; the
/// model's position limit lowers it further when needed. With a beam of
/// one this reduces exactly to greedy decoding.
pub fn beam_search(
    model: &TranslationModel,
    source_units: &[u32],
    beam_size: usize,
    max_len: usize,
) -> Result<BeamHyp> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let enc = encoder_pass(model, source_units, None)?;
    let start = decoder_start(source_units);
    let vocab = model.config.vocab_size;
    // The decoder input is the start symbol plus everything generated.
    let max_len = max_len.min(model.config.max_positions - 1);

    let mut hyps = vec![Hyp { units: Vec::new(), logp: 0.0, finished: false }];
    for _ in 0..max_len {
        if hyps.iter().all(|h| h.finished) {
            break;
        }
        // (cumulative logp, parent index, unit; u32::MAX marks a frozen
        // finished hypothesis carried over unchanged).
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (i, h) in hyps.iter().enumerate() {
            if h.finished {
                candidates.push((h.logp, i, u32::MAX));
                continue;
            }
            let mut dec_ids = Vec::with_capacity(h.units.len() + 1);
            dec_ids.push(start);
            dec_ids.extend_from_slice(&h.units);
            let dec = decoder_pass(model, &enc.out, &dec_ids, None)?;
            // Only the final position predicts; project just that row.
            let logits = output_matrix(model).dot(&dec.out.row(dec.out.nrows() - 1));
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for unit in 0..vocab as u32 {
                if banned(unit) {
                    continue;
                }
                let lp = logits[unit as usize] - log_sum;
                if !lp.is_finite() {
                    return Err(Error::Numeric(
                        "decoder produced a non-finite log-probability".into(),
                    ));
                }
                candidates.push((h.logp + lp, i, unit));
            }
        }
        // Deterministic order: score first, then parent, then unit id.
        candidates.sort_unstable_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(beam_size);
        for (logp, parent, unit) in candidates.into_iter().take(beam_size) {
            if unit == u32::MAX {
                next.push(hyps[parent].clone());
            } else {
                let mut units = hyps[parent].units.clone();
                units.push(unit);
                next.push(Hyp { units, logp, finished: unit == EOS_ID });
            }
        }
        hyps = next;
    }

    // Length-normalized selection; ties keep the earlier (higher raw
    // probability at equal length) entry from the sorted beam.
    let best = hyps
        .iter()
        .map(|h| (h, h.logp / h.units.len().max(1) as f64))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .expect("beam is never empty");
    let (hyp, score) = best;
    let mut units = hyp.units.clone();
    if hyp.finished {
        units.pop();
    }
    Ok(BeamHyp { units, score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subword::UNK_ID;
    use ndarray::Array2;

    use super::super::model::{forward, init_model, TransformerConfig};

    fn toy_config() -> TransformerConfig {
        TransformerConfig {
            num_layers: 1,
            model_dim: 16,
            num_heads: 2,
            ffn_dim: 24,
            dropout: 0.0,
            max_positions: 72,
            vocab_size: 14,
            share_embeddings: true,
        }
    }

    /// Greedy reference: repeatedly take the argmax over allowed units.
    fn greedy(model: &super::super::model::TranslationModel, src: &[u32], max_len: usize) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for _ in 0..max_len {
            let lp: Array2<f64> = forward(model, src, &out).unwrap();
            let last = lp.nrows() - 1;
            let mut best: Option<(u32, f64)> = None;
            for id in 0..lp.ncols() as u32 {
                if banned(id) {
                    continue;
                }
                let v = lp[[last, id as usize]];
                if best.map(|(_, b)| v > b).unwrap_or(true) {
                    best = Some((id, v));
                }
            }
            let (id, _) = best.unwrap();
            if id == EOS_ID {
                break;
            }
            out.push(id);
        }
        out
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..8 {
            let model = init_model(&toy_config(), 0, seed).unwrap();
            let src = vec![6, 7 + (seed % 3) as u32, 9];
            let hyp = beam_search(&model, &src, 1, 10).unwrap();
            assert_eq!(hyp.units, greedy(&model, &src, 10), "seed {seed}");
        }
    }

    #[test]
    fn wider_beams_never_score_worse() {
        for seed in 0..8 {
            let model = init_model(&toy_config(), 100 + seed, seed).unwrap();
            let src = vec![6, 8, 10, 12];
            let narrow = beam_search(&model, &src, 1, 8).unwrap();
            let wide = beam_search(&model, &src, 4, 8).unwrap();
            assert!(
                wide.score >= narrow.score - 1e-12,
                "seed {seed}: beam 4 scored {} below greedy {}",
                wide.score,
                narrow.score
            );
        }
    }

    #[test]
    fn outputs_never_contain_reserved_control_units() {
        for seed in 20..30 {
            let model = init_model(&toy_config(), 0, seed).unwrap();
            let hyp = beam_search(&model, &[7, 11], 3, 12).unwrap();
            assert!(hyp.units.len() <= 12);
            for &u in &hyp.units {
                assert!(!banned(u), "emitted banned unit {u}");
                assert_ne!(u, EOS_ID, "end sentinel must be stripped");
            }
            // The unknown unit is allowed in principle, so only the
            // control ids are checked here.
            let _ = UNK_ID;
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let model = init_model(&toy_config(), 0, 42).unwrap();
        let a = beam_search(&model, &[6, 9, 13], 4, 10).unwrap();
        let b = beam_search(&model, &[6, 9, 13], 4, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_degenerate_decode_parameters() {
        let model = init_model(&toy_config(), 0, 1).unwrap();
        assert!(matches!(beam_search(&model, &[6], 0, 10), Err(Error::Config(_))));
        assert!(matches!(beam_search(&model, &[6], 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn generation_respects_the_position_limit() {
        // Even with a huge max_len the decoder input must stay within
        // max_positions, so generation caps at max_positions - 1 units.
        let model = init_model(&toy_config(), 0, 3).unwrap();
        let hyp = beam_search(&model, &[6, 7], 2, 10_000).unwrap();
        assert!(hyp.units.len() <= model.config.max_positions - 1);
    }
}

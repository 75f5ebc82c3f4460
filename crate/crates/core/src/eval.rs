//! Output quality scoring: corpus BLEU, paired bootstrap significance,
//! and variety consistency.
//!
//! BLEU here is the corpus-level, case-sensitive, unsmoothed variant over
//! whitespace word tokens (post-desegmentation): modified n-gram
//! precisions for n = 1..4 with per-sentence clipping, brevity penalty
//! min(1, exp(1 - ref_len/hyp_len)). Orders that produce no hypothesis
//! n-grams at all (corpus shorter than n) are excluded from the geometric
//! mean, so a corpus that equals its reference scores 100 regardless of
//! sentence lengths.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::corpus::Variety;
use crate::error::{Error, Result};
use crate::synth::VariantTable;
use crate::util::derive_seed;
use crate::varietyid::VarietyEnsemble;

pub const BLEU_MAX_ORDER: usize = 4;

/// Corpus BLEU with its components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuReport {
    /// In [0, 100].
    pub bleu: f64,
    /// Modified precisions for n = 1..4. Orders with no hypothesis
    /// n-grams hold 1.0 (they are excluded from the geometric mean).
    pub precisions: [f64; BLEU_MAX_ORDER],
    /// min(1, exp(1 - ref_len/hyp_len)); 0.0 for an all-empty hypothesis
    /// corpus.
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    /// Key=value lines, one metric component per line.
    pub fn report(&self) -> String {
        format!(
            "bleu={:.6}\np1={:.6}\np2={:.6}\np3={:.6}\np4={:.6}\nbrevity_penalty={:.6}\nhyp_len={}\nref_len={}\n",
            self.bleu,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

/// Per-sentence sufficient statistics; corpus BLEU is a function of their
/// sums, which is what makes bootstrap resampling cheap.
#[derive(Debug, Clone, Copy, Default)]
struct SentenceStats {
    matched: [u64; BLEU_MAX_ORDER],
    total: [u64; BLEU_MAX_ORDER],
    hyp_len: u64,
    ref_len: u64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn sentence_stats(hyp: &[String], reference: &[String]) -> SentenceStats {
    let mut s = SentenceStats {
        hyp_len: hyp.len() as u64,
        ref_len: reference.len() as u64,
        ..SentenceStats::default()
    };
    for n in 1..=BLEU_MAX_ORDER {
        if hyp.len() < n {
            break;
        }
        let ref_counts = ngram_counts(reference, n);
        let mut matched = 0;
        for (gram, count) in ngram_counts(hyp, n) {
            matched += count.min(ref_counts.get(gram).copied().unwrap_or(0));
        }
        s.matched[n - 1] = matched;
        s.total[n - 1] = (hyp.len() - n + 1) as u64;
    }
    s
}

fn add(acc: &mut SentenceStats, s: &SentenceStats) {
    for n in 0..BLEU_MAX_ORDER {
        acc.matched[n] += s.matched[n];
        acc.total[n] += s.total[n];
    }
    acc.hyp_len += s.hyp_len;
    acc.ref_len += s.ref_len;
}

fn bleu_from_stats(acc: &SentenceStats) -> BleuReport {
    let mut precisions = [1.0; BLEU_MAX_ORDER];
    let mut log_sum = 0.0;
    let mut active = 0usize;
    let mut zero = false;
    for n in 0..BLEU_MAX_ORDER {
        if acc.total[n] == 0 {
            continue;
        }
        active += 1;
        let p = acc.matched[n] as f64 / acc.total[n] as f64;
        precisions[n] = p;
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += p.ln();
        }
    }
    if acc.hyp_len == 0 {
        return BleuReport {
            bleu: 0.0,
            precisions,
            brevity_penalty: 0.0,
            hyp_len: 0,
            ref_len: acc.ref_len as usize,
        };
    }
    let brevity_penalty =
        (1.0 - acc.ref_len as f64 / acc.hyp_len as f64).exp().min(1.0);
    let bleu = if zero || active == 0 {
        0.0
    } else {
        100.0 * brevity_penalty * (log_sum / active as f64).exp()
    };
    BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len: acc.hyp_len as usize,
        ref_len: acc.ref_len as usize,
    }
}

fn check_lengths(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Alignment { left: hyps.len(), right: refs.len() });
    }
    if hyps.is_empty() {
        return Err(Error::EmptyData("no hypotheses to score".into()));
    }
    Ok(())
}

/// Corpus-level BLEU of hypotheses against single references.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<BleuReport> {
    check_lengths(hyps, refs)?;
    let mut acc = SentenceStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        add(&mut acc, &sentence_stats(h, r));
    }
    Ok(bleu_from_stats(&acc))
}

/// Outcome of a one-sided paired bootstrap comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignificanceResult {
    /// BLEU(x) - BLEU(y) on the full test set.
    pub delta_bleu: f64,
    /// 1 - wins/n for the observed-better system; ties are non-wins.
    pub p_value: f64,
    pub n_resamples: usize,
    pub alpha: f64,
    pub significant: bool,
    pub seed: u64,
}

impl SignificanceResult {
    pub fn report(&self) -> String {
        format!(
            "delta_bleu={:.6}\np_value={:.6}\nn_resamples={}\nalpha={}\nsignificant={}\nseed={}\n",
            self.delta_bleu, self.p_value, self.n_resamples, self.alpha, self.significant, self.seed
        )
    }
}

/// Paired bootstrap resampling: does the observed-better of the two
/// systems beat the other on significantly many resampled test sets?
/// Resample `r` draws its indices from a counter-derived seed, so results
/// are independent of evaluation order.
pub fn paired_bootstrap(
    hyps_x: &[Vec<String>],
    hyps_y: &[Vec<String>],
    refs: &[Vec<String>],
    n_resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<SignificanceResult> {
    check_lengths(hyps_x, refs)?;
    check_lengths(hyps_y, refs)?;
    if n_resamples < 100 {
        return Err(Error::Config(format!(
            "n_resamples must be at least 100, got {n_resamples}"
        )));
    }
    if !alpha.is_finite() || !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(Error::Config(format!("alpha must be in (0, 1), got {alpha}")));
    }

    let stats_x: Vec<SentenceStats> =
        hyps_x.iter().zip(refs).map(|(h, r)| sentence_stats(h, r)).collect();
    let stats_y: Vec<SentenceStats> =
        hyps_y.iter().zip(refs).map(|(h, r)| sentence_stats(h, r)).collect();

    let full = |stats: &[SentenceStats]| {
        let mut acc = SentenceStats::default();
        for s in stats {
            add(&mut acc, s);
        }
        bleu_from_stats(&acc).bleu
    };
    let delta_bleu = full(&stats_x) - full(&stats_y);
    let x_is_better = delta_bleu >= 0.0;

    // Each resample derives its own counter-based seed, so the outcome is
    // independent of how the iterations are scheduled across threads.
    let n = refs.len();
    let wins: usize = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, r as u64));
            let mut acc_x = SentenceStats::default();
            let mut acc_y = SentenceStats::default();
            for _ in 0..n {
                let i = rng.random_range(0..n);
                add(&mut acc_x, &stats_x[i]);
                add(&mut acc_y, &stats_y[i]);
            }
            let bx = bleu_from_stats(&acc_x).bleu;
            let by = bleu_from_stats(&acc_y).bleu;
            let better_wins = if x_is_better { bx > by } else { by > bx };
            usize::from(better_wins)
        })
        .sum();

    let p_value = 1.0 - wins as f64 / n_resamples as f64;
    Ok(SignificanceResult {
        delta_bleu,
        p_value,
        n_resamples,
        alpha,
        significant: p_value < alpha,
        seed,
    })
}

/// How variety consistency is judged: against construction-time ground
/// truth (synthetic data) or a trained ensemble's soft-fusion decision.
#[derive(Clone, Copy)]
pub enum ConsistencyJudge<'a> {
    Table(&'a VariantTable),
    Ensemble(&'a VarietyEnsemble),
}

/// Fraction of variety-marked content realized in the expected variety.
///
/// Table mode counts variant-marked token slots across all hypotheses and
/// returns the fraction carrying the expected variety's form; it is
/// undefined when no hypothesis contains any variant-marked token.
/// Ensemble mode returns the fraction of hypotheses soft-fused to the
/// expected variety.
pub fn variety_consistency(
    hyps: &[Vec<String>],
    judge: ConsistencyJudge,
    expected: Variety,
) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::EmptyData("no hypotheses to judge".into()));
    }
    match judge {
        ConsistencyJudge::Table(table) => {
            let mut marked = 0usize;
            let mut matched = 0usize;
            for h in hyps {
                for tok in h {
                    if let Some(v) = table.classify_token(tok) {
                        marked += 1;
                        if v == expected {
                            matched += 1;
                        }
                    }
                }
            }
            if marked == 0 {
                return Err(Error::UndefinedMetric(
                    "no variety-marked tokens in any hypothesis".into(),
                ));
            }
            Ok(matched as f64 / marked as f64)
        }
        ConsistencyJudge::Ensemble(ens) => {
            let agree = hyps
                .iter()
                .filter(|h| ens.soft_fuse(&h.join(" ")) == expected)
                .count();
            Ok(agree as f64 / hyps.len() as f64)
        }
    }
}

/// One machine-readable result row: system, test set, metric, value.
pub fn tsv_row(system: &str, testset: &str, metric: &str, value: f64) -> String {
    format!("{system}\t{testset}\t{metric}\t{value:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_hand_example() {
        let report = corpus_bleu(&[toks("a b c d")], &[toks("a b c d e")]).unwrap();
        assert_eq!(report.precisions, [1.0; 4]);
        let bp = (-0.25f64).exp();
        assert!((report.brevity_penalty - bp).abs() < 1e-12);
        assert!((report.bleu - 100.0 * bp).abs() < 1e-6);
        assert_eq!((report.hyp_len, report.ref_len), (4, 5));
    }

    #[test]
    fn bleu_identity_is_100() {
        let corpora = [
            vec![toks("x")],
            vec![toks("a b"), toks("c")],
            vec![toks("one two three four five"), toks("six")],
        ];
        for c in &corpora {
            assert_eq!(corpus_bleu(c, c).unwrap().bleu, 100.0);
        }
    }

    #[test]
    fn bleu_zero_precision_and_clipping() {
        let r = corpus_bleu(&[toks("x x x x")], &[toks("a b c d")]).unwrap();
        assert_eq!(r.bleu, 0.0);
        assert_eq!(r.precisions[0], 0.0);

        // "a" matches at most twice (clipped by the reference).
        let r = corpus_bleu(&[toks("a a a")], &[toks("a a")]).unwrap();
        assert!((r.precisions[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_degenerate_inputs() {
        assert!(corpus_bleu(&[], &[]).is_err());
        assert!(corpus_bleu(&[toks("a")], &[]).is_err());
        let r = corpus_bleu(&[vec![]], &[toks("a b")]).unwrap();
        assert_eq!(r.bleu, 0.0);
        assert_eq!(r.brevity_penalty, 0.0);
    }

    #[test]
    fn bleu_never_exceeds_100() {
        // Hypothesis longer than reference: BP = 1, precisions < 1.
        let r = corpus_bleu(&[toks("a b c d e f")], &[toks("a b c d")]).unwrap();
        assert!(r.bleu <= 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    proptest! {
        #[test]
        fn bleu_permutation_invariant(
            pairs in proptest::collection::vec(
                (proptest::collection::vec(0u8..5, 1..6),
                 proptest::collection::vec(0u8..5, 1..6)),
                1..8),
            seed in 0u64..100,
        ) {
            let word = |v: &[u8]| -> Vec<String> {
                v.iter().map(|c| format!("w{c}")).collect()
            };
            let hyps: Vec<Vec<String>> = pairs.iter().map(|(h, _)| word(h)).collect();
            let refs: Vec<Vec<String>> = pairs.iter().map(|(_, r)| word(r)).collect();
            let base = corpus_bleu(&hyps, &refs).unwrap();

            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
            let hyps_p: Vec<Vec<String>> = order.iter().map(|&i| hyps[i].clone()).collect();
            let refs_p: Vec<Vec<String>> = order.iter().map(|&i| refs[i].clone()).collect();
            let perm = corpus_bleu(&hyps_p, &refs_p).unwrap();
            prop_assert!((base.bleu - perm.bleu).abs() < 1e-9);
            prop_assert!(base.bleu <= 100.0 + 1e-9);

            let ident = corpus_bleu(&hyps, &hyps).unwrap();
            prop_assert_eq!(ident.bleu, 100.0);
        }
    }

    fn garbage_like(refs: &[Vec<String>]) -> Vec<Vec<String>> {
        refs.iter().map(|r| vec!["zzz".to_string(); r.len()]).collect()
    }

    fn sample_refs(n: usize, seed: u64) -> Vec<Vec<String>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.random_range(3..9usize);
                (0..len).map(|_| format!("w{}", rng.random_range(0..30))).collect()
            })
            .collect()
    }

    #[test]
    fn bootstrap_identical_systems_never_significant() {
        let refs = sample_refs(40, 1);
        let hyps = garbage_like(&refs);
        for seed in 0..5 {
            let r = paired_bootstrap(&hyps, &hyps, &refs, 100, 0.05, seed).unwrap();
            assert_eq!(r.delta_bleu, 0.0);
            assert_eq!(r.p_value, 1.0);
            assert!(!r.significant);
        }
    }

    #[test]
    fn bootstrap_perfect_vs_garbage_is_significant() {
        let refs = sample_refs(60, 2);
        let perfect = refs.clone();
        let garbage = garbage_like(&refs);
        let r = paired_bootstrap(&perfect, &garbage, &refs, 200, 0.05, 7).unwrap();
        assert!(r.delta_bleu > 0.0);
        assert!(r.significant, "p={}", r.p_value);

        // Swapped arguments: the observed-better system is still the
        // perfect one, so significance is symmetric here.
        let swapped = paired_bootstrap(&garbage, &perfect, &refs, 200, 0.05, 7).unwrap();
        assert_eq!(swapped.delta_bleu, -r.delta_bleu);
        assert!(swapped.significant);
    }

    #[test]
    fn bootstrap_is_deterministic_and_validated() {
        let refs = sample_refs(20, 3);
        let x = refs.clone();
        let y = garbage_like(&refs);
        let a = paired_bootstrap(&x, &y, &refs, 150, 0.05, 11).unwrap();
        let b = paired_bootstrap(&x, &y, &refs, 150, 0.05, 11).unwrap();
        assert_eq!(a, b);
        let c = paired_bootstrap(&x, &y, &refs, 150, 0.05, 12).unwrap();
        assert_eq!(c.delta_bleu, a.delta_bleu);

        assert!(paired_bootstrap(&x, &y, &refs, 99, 0.05, 0).is_err());
        assert!(paired_bootstrap(&x, &y, &refs, 100, 0.0, 0).is_err());
        assert!(paired_bootstrap(&x[..5], &y, &refs, 100, 0.05, 0).is_err());
    }

    #[test]
    fn consistency_table_mode() {
        use std::collections::BTreeMap;
        let mut m = BTreeMap::new();
        m.insert("color".to_string(), ("color".to_string(), "colour".to_string()));
        m.insert("meter".to_string(), ("meter".to_string(), "metre".to_string()));
        let table = VariantTable::new(m).unwrap();

        let all_a = vec![toks("the color of a meter"), toks("color me")];
        assert_eq!(
            variety_consistency(&all_a, ConsistencyJudge::Table(&table), Variety::A).unwrap(),
            1.0
        );
        assert_eq!(
            variety_consistency(&all_a, ConsistencyJudge::Table(&table), Variety::B).unwrap(),
            0.0
        );

        let mixed = vec![toks("color and colour")];
        assert_eq!(
            variety_consistency(&mixed, ConsistencyJudge::Table(&table), Variety::A).unwrap(),
            0.5
        );

        let unmarked = vec![toks("nothing relevant here")];
        assert!(matches!(
            variety_consistency(&unmarked, ConsistencyJudge::Table(&table), Variety::A),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(variety_consistency(&[], ConsistencyJudge::Table(&table), Variety::A).is_err());
    }

    #[test]
    fn consistency_ensemble_mode() {
        use crate::varietyid::{FeatureConfig, VarietyEnsemble};
        let mut data = Vec::new();
        for i in 0..12 {
            data.push((format!("shared{} alpha", i % 3), Variety::A));
            data.push((format!("shared{} beta", i % 3), Variety::B));
        }
        let fc = FeatureConfig { hash_buckets: 1 << 10, embed_dim: 4, ..FeatureConfig::default() };
        let ens = VarietyEnsemble::train(&data, &fc, 20, 0.5, 3).unwrap();

        let hyps = vec![toks("shared0 alpha"), toks("shared1 alpha"), toks("shared2 beta")];
        let frac_a =
            variety_consistency(&hyps, ConsistencyJudge::Ensemble(&ens), Variety::A).unwrap();
        let frac_b =
            variety_consistency(&hyps, ConsistencyJudge::Ensemble(&ens), Variety::B).unwrap();
        assert!((frac_a - 2.0 / 3.0).abs() < 1e-12, "frac_a = {frac_a}");
        assert!((frac_a + frac_b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tsv_row_format() {
        assert_eq!(tsv_row("mul", "test_a", "bleu", 12.5), "mul\ttest_a\tbleu\t12.500000");
    }
}

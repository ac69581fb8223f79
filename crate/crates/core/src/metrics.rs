//! Evaluation metrics for sequence models and testing campaigns.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthesis::Outcome;

/// `exp(-mean(log_probs))` over all supervised tokens.
pub fn perplexity(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::Metric("perplexity of an empty sequence".into()));
    }
    if log_probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite log-probability".into()));
    }
    let nll = -log_probs.iter().sum::<f64>() / log_probs.len() as f64;
    Ok(nll.exp())
}

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Metric("WER needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

pub const BLEU_MAX_N: usize = 4;

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for w in seq.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU: geometric mean of clipped 1..4-gram precisions times the
/// brevity penalty `exp(min(0, 1 - |ref|/|hyp|))`. A precision with no
/// matches is smoothed to `1 / (candidates + 1)`.
pub fn bleu<T: Eq + Hash>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Metric("BLEU needs a non-empty reference".into()));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_MAX_N {
        let hyp = ngram_counts(hypothesis, n);
        let refc = ngram_counts(reference, n);
        let total: usize = hyp.values().sum();
        let matched: usize = hyp
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            1.0 / (total + 1) as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let bp = (1.0 - reference.len() as f64 / hypothesis.len() as f64).min(0.0);
    Ok((log_sum / BLEU_MAX_N as f64 + bp).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rates {
    pub total: usize,
    pub generated: usize,
    pub reduced: usize,
    pub generation_rate: f64,
    pub success_rate: f64,
    pub adversary_rate: f64,
}

pub fn aggregate_rates<I: IntoIterator<Item = Outcome>>(outcomes: I) -> Rates {
    let (mut total, mut generated, mut reduced) = (0, 0, 0);
    for o in outcomes {
        total += 1;
        generated += usize::from(o.generated());
        reduced += usize::from(o.reduced());
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Rates {
        total,
        generated,
        reduced,
        generation_rate: frac(generated, total),
        success_rate: frac(reduced, generated),
        adversary_rate: frac(reduced, total),
    }
}

/// Arithmetic mean; zero for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricPair {
    pub original: f64,
    pub adversarial: f64,
}

impl MetricPair {
    pub fn mean_of(pairs: &[MetricPair]) -> Self {
        let o: Vec<f64> = pairs.iter().map(|p| p.original).collect();
        let a: Vec<f64> = pairs.iter().map(|p| p.adversarial).collect();
        Self {
            original: mean(&o),
            adversarial: mean(&a),
        }
    }
}

/// Aggregates of one campaign run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rates: Rates,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub perplexity: Option<MetricPair>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wer: Option<MetricPair>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bleu: Option<MetricPair>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<MetricPair>,
    /// Mean over generated candidates.
    pub perturbation_l2: f64,
    pub seconds_per_input: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perplexity_identities() {
        let uniform = vec![(1.0f64 / 50.0).ln(); 37];
        assert!((perplexity(&uniform).unwrap() - 50.0).abs() < 1e-9);
        assert_eq!(perplexity(&[0.0; 5]).unwrap(), 1.0);
        assert!(perplexity(&[]).is_err());
    }

    #[test]
    fn perplexity_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lp: Vec<f64> = (0..40).map(|_| -rng.random_range(0.0..6.0)).collect();
        let mut nll = 0.0;
        for v in &lp {
            nll -= v;
        }
        let want = (nll / 40.0).exp();
        assert!((perplexity(&lp).unwrap() - want).abs() < 1e-12 * want);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a", "b"], &["a", "b"]).unwrap(), 0.0);
        assert_eq!(wer(&["a", "b"], &["a", "c"]).unwrap(), 0.5);
        assert_eq!(wer(&["a"], &[] as &[&str]).unwrap(), 1.0);
        assert!(wer(&[] as &[u8], &[1]).is_err());
    }

    // Minimum over every edit path, enumerated recursively.
    fn all_paths(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = usize::from(x != y) + all_paths(ra, rb);
                let del = 1 + all_paths(ra, b);
                let ins = 1 + all_paths(a, rb);
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn wer_matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..300 {
            let r: Vec<u8> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0..3)).collect();
            let h: Vec<u8> = (0..rng.random_range(0..=8)).map(|_| rng.random_range(0..3)).collect();
            let want = all_paths(&r, &h) as f64 / r.len() as f64;
            assert_eq!(wer(&r, &h).unwrap(), want);
        }
    }

    #[test]
    fn bleu_examples() {
        let s: Vec<&str> = "the cat sat on the mat".split(' ').collect();
        assert_eq!(bleu(&s, &s).unwrap(), 1.0);
        assert_eq!(bleu(&s, &[] as &[&str]).unwrap(), 0.0);
        let r: Vec<u32> = (0..12).collect();
        let h: Vec<u32> = (100..112).collect();
        // (1/13 · 1/12 · 1/11 · 1/10)^(1/4)
        let want = (1.0f64 / 17160.0).powf(0.25);
        let got = bleu(&r, &h).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!(got < 0.1);
        assert!((got - 0.087_371_678_517).abs() < 1e-11);
    }

    fn bleu_oracle(r: &[u8], h: &[u8]) -> f64 {
        if h.is_empty() {
            return 0.0;
        }
        let mut prod = 1.0;
        for n in 1..=4 {
            let hg: Vec<&[u8]> = if h.len() >= n { (0..=h.len() - n).map(|i| &h[i..i + n]).collect() } else { vec![] };
            let mut rg: Vec<&[u8]> = if r.len() >= n { (0..=r.len() - n).map(|i| &r[i..i + n]).collect() } else { vec![] };
            let mut m = 0;
            for g in &hg {
                if let Some(pos) = rg.iter().position(|x| x == g) {
                    rg.remove(pos);
                    m += 1;
                }
            }
            prod *= if m == 0 { 1.0 / (hg.len() as f64 + 1.0) } else { m as f64 / hg.len() as f64 };
        }
        let bp = if h.len() >= r.len() { 1.0 } else { (1.0 - r.len() as f64 / h.len() as f64).exp() };
        bp * prod.powf(0.25)
    }

    #[test]
    fn bleu_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..300 {
            let r: Vec<u8> = (0..rng.random_range(1..12)).map(|_| rng.random_range(0..4)).collect();
            let h: Vec<u8> = (0..rng.random_range(0..12)).map(|_| rng.random_range(0..4)).collect();
            let got = bleu(&r, &h).unwrap();
            assert!((got - bleu_oracle(&r, &h)).abs() < 1e-12, "{r:?} {h:?}");
        }
    }

    #[test]
    fn rates_examples() {
        let r = aggregate_rates(vec![Outcome::NotGenerated; 4]);
        assert_eq!((r.generation_rate, r.success_rate), (0.0, 0.0));
        let mut v = vec![Outcome::PerformanceReduced; 6];
        v.extend([Outcome::GeneratedNotReduced; 2]);
        v.extend([Outcome::NotGenerated; 2]);
        let r = aggregate_rates(v);
        assert_eq!(r.generation_rate, 0.8);
        assert_eq!(r.success_rate, 0.75);
        assert_eq!(r.adversary_rate, 0.6);
        assert_eq!(aggregate_rates(Vec::new()), Rates::default());
    }

    fn outcome() -> impl Strategy<Value = Outcome> {
        prop_oneof![
            Just(Outcome::PerformanceReduced),
            Just(Outcome::GeneratedNotReduced),
            Just(Outcome::NotGenerated)
        ]
    }

    fn seq(max: usize) -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..4, 0..max)
    }

    proptest! {
        #[test]
        fn rates_match_counting(v in prop::collection::vec(outcome(), 0..60)) {
            let r = aggregate_rates(v.clone());
            let g = v.iter().filter(|o| **o != Outcome::NotGenerated).count();
            let d = v.iter().filter(|o| **o == Outcome::PerformanceReduced).count();
            prop_assert_eq!((r.total, r.generated, r.reduced), (v.len(), g, d));
            prop_assert!(r.adversary_rate <= r.generation_rate);
            for x in [r.generation_rate, r.success_rate, r.adversary_rate] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            if g > 0 {
                prop_assert!((r.success_rate * r.generation_rate - r.adversary_rate).abs() < 1e-12);
            }
        }

        #[test]
        fn edit_distance_is_a_metric(a in seq(9), b in seq(9), c in seq(9)) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            if !a.is_empty() {
                prop_assert_eq!(wer(&a, &b).unwrap() * a.len() as f64, edit_distance(&b, &a) as f64);
            }
        }

        #[test]
        fn bleu_bounded(r in seq(15), h in seq(15)) {
            prop_assume!(!r.is_empty());
            let v = bleu(&r, &h).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            if r.len() >= 4 {
                prop_assert_eq!(bleu(&r, &r).unwrap(), 1.0);
            }
        }

        #[test]
        fn perplexity_monotone(lp in prop::collection::vec(-8.0f64..0.0, 1..30), i in any::<prop::sample::Index>(), d in 1e-3f64..3.0) {
            let mut lower = lp.clone();
            let k = i.index(lp.len());
            lower[k] -= d;
            prop_assert!(perplexity(&lower).unwrap() > perplexity(&lp).unwrap());
        }
    }
}

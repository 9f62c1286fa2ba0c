//! Held-out loss, cross-size KL consistency and speculative decoding.
//!
//! All divergences are in nats. KL between two family members puts the
//! smaller model on the left, is averaged over positions within each
//! example, and then over examples.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ParamSet};

/// Mean next-token negative log-likelihood over every predicted position of
/// `examples`. Examples longer than `seq_len + 1` are truncated.
pub fn mean_nll(params: &ParamSet, examples: &[Vec<u32>]) -> Result<f64> {
    let max_len = params.config.seq_len + 1;
    let mut by_len: BTreeMap<usize, (Vec<u32>, Vec<u32>)> = BTreeMap::new();
    for ex in examples {
        let ex = &ex[..ex.len().min(max_len)];
        if ex.len() < 2 {
            continue;
        }
        let (inp, tgt) = by_len.entry(ex.len() - 1).or_default();
        inp.extend_from_slice(&ex[..ex.len() - 1]);
        tgt.extend_from_slice(&ex[1..]);
    }
    if by_len.is_empty() {
        return Err(Error::invalid("dataset has no predictable tokens"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (window, (inp, tgt)) in &by_len {
        // bounded batches keep activation memory flat
        let chunk = window * (4096 / window).max(1);
        for (i, t) in inp.chunks(chunk).zip(tgt.chunks(chunk)) {
            total += nn::loss(params, i, t, *window)? * i.len() as f64;
            count += i.len();
        }
    }
    Ok(total / count as f64)
}

pub fn perplexity(params: &ParamSet, examples: &[Vec<u32>]) -> Result<f64> {
    Ok(mean_nll(params, examples)?.exp())
}

/// `sum_v p(v) (ln p(v) - ln q(v))`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv.ln() - qv.ln()))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub pair: (u64, u64),
    pub mean_kl: f64,
    pub n_examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_example_kl: Option<Vec<f64>>,
}

impl KlReport {
    pub fn from_per_example(pair: (u64, u64), per_example: Vec<f64>) -> Result<KlReport> {
        if per_example.is_empty() {
            return Err(Error::invalid("KL report needs at least one example"));
        }
        let mean_kl = per_example.iter().sum::<f64>() / per_example.len() as f64;
        Ok(KlReport {
            pair,
            mean_kl,
            n_examples: per_example.len(),
            per_example_kl: Some(per_example),
        })
    }
}

pub fn kl_adjacent(small: &ParamSet, large: &ParamSet, examples: &[Vec<u32>]) -> Result<KlReport> {
    if small.config.vocab_size != large.config.vocab_size {
        return Err(Error::invalid(format!(
            "vocabulary mismatch: {} vs {}",
            small.config.vocab_size, large.config.vocab_size
        )));
    }
    let len = small.config.seq_len.min(large.config.seq_len);
    let per_example = examples
        .iter()
        .filter(|ex| !ex.is_empty())
        .map(|ex| {
            let ex = &ex[..ex.len().min(len)];
            let p = nn::position_dists(small, ex)?;
            let q = nn::position_dists(large, ex)?;
            let sum: f64 = p.iter().zip(&q).map(|(p, q)| kl_divergence(p, q)).sum();
            Ok(sum / p.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    KlReport::from_per_example(
        (small.config.count_params(), large.config.count_params()),
        per_example,
    )
}

/// Reports for every adjacent pair of a size-ordered family.
pub fn consistency_table(family: &[&ParamSet], examples: &[Vec<u32>]) -> Result<Vec<KlReport>> {
    if family.len() < 2 {
        return Err(Error::invalid("consistency table needs at least two models"));
    }
    family
        .windows(2)
        .map(|w| kl_adjacent(w[0], w[1], examples))
        .collect()
}

pub fn format_kl_table(reports: &[KlReport]) -> String {
    let mut out = format!("{:>12}  {:>12}  {:>10}  {:>8}\n", "small", "large", "mean_kl", "examples");
    for r in reports {
        let _ = writeln!(
            out,
            "{:>12}  {:>12}  {:>10.5}  {:>8}",
            r.pair.0, r.pair.1, r.mean_kl, r.n_examples
        );
    }
    out
}

/// An autoregressive model that exposes next-token distributions.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    /// Distributions after each of the last `n` prefixes of `tokens`, oldest
    /// first: entry `i` conditions on `tokens[..len - n + 1 + i]`.
    fn prefix_dists(&self, tokens: &[u32], n: usize) -> Result<Vec<Vec<f64>>>;
}

impl LanguageModel for ParamSet {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn prefix_dists(&self, tokens: &[u32], n: usize) -> Result<Vec<Vec<f64>>> {
        if n == 0 || n > tokens.len() {
            return Err(Error::invalid(format!(
                "prefix_dists: n = {n} for {} tokens",
                tokens.len()
            )));
        }
        if tokens.len() <= self.config.seq_len {
            let all = nn::position_dists(self, tokens)?;
            return Ok(all[all.len() - n..].to_vec());
        }
        (tokens.len() - n + 1..=tokens.len())
            .map(|end| nn::next_token_dist(self, &tokens[..end]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecDecodeStats {
    pub drafted: u64,
    pub accepted: u64,
    pub acceptance_rate: f64,
    pub tokens_generated: u64,
    pub wall_time: f64,
    pub gamma: usize,
}

pub const DEFAULT_GAMMA: usize = 8;

/// Samples an index of `dist` from one uniform draw.
pub fn sample(dist: &[f64], rng: &mut impl Rng) -> u32 {
    let total: f64 = dist.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &p) in dist.iter().enumerate() {
        if u < p {
            return i as u32;
        }
        u -= p;
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(dist.len() - 1) as u32
}

/// `min(1, p(x) / q(x))` for a token drafted from `q`.
pub fn acceptance_probability(p: &[f64], q: &[f64], x: usize) -> f64 {
    if q[x] <= 0.0 {
        return 0.0;
    }
    (p[x] / q[x]).min(1.0)
}

/// `norm(max(0, p - q))`; falls back to `p` when the residual mass vanishes.
pub fn residual_distribution(p: &[f64], q: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| (a - b).max(0.0)).collect();
    let z: f64 = r.iter().sum();
    if z <= 0.0 {
        return p.to_vec();
    }
    r.into_iter().map(|v| v / z).collect()
}

/// Probability that a token drafted from `q` is accepted against `p`.
pub fn expected_acceptance(p: &[f64], q: &[f64]) -> f64 {
    (0..p.len()).map(|x| q[x] * acceptance_probability(p, q, x)).sum()
}

/// Exact distribution of the first token emitted by one speculative step.
pub fn emitted_distribution(p: &[f64], q: &[f64]) -> Vec<f64> {
    let reject = 1.0 - expected_acceptance(p, q);
    let r = residual_distribution(p, q);
    (0..p.len())
        .map(|x| q[x] * acceptance_probability(p, q, x) + reject * r[x])
        .collect()
}

/// Speculative sampling at temperature 1. Returns the `max_new` tokens
/// emitted after `prompt`.
pub fn speculative_generate<D: LanguageModel + ?Sized, G: LanguageModel + ?Sized>(
    draft: &D,
    gen: &G,
    prompt: &[u32],
    gamma: usize,
    max_new: usize,
    seed: u64,
) -> Result<(Vec<u32>, SpecDecodeStats)> {
    if draft.vocab_size() != gen.vocab_size() {
        return Err(Error::invalid(format!(
            "vocabulary mismatch: draft {} vs generator {}",
            draft.vocab_size(),
            gen.vocab_size()
        )));
    }
    if gamma == 0 {
        return Err(Error::invalid("gamma must be >= 1"));
    }
    if prompt.is_empty() {
        return Err(Error::invalid("speculative decoding needs a non-empty prompt"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = prompt.to_vec();
    let (mut drafted, mut accepted) = (0u64, 0u64);
    while ctx.len() - prompt.len() < max_new {
        let base = ctx.len();
        let mut qs = Vec::with_capacity(gamma);
        for _ in 0..gamma {
            let q = draft.prefix_dists(&ctx, 1)?.pop().unwrap();
            ctx.push(sample(&q, &mut rng));
            qs.push(q);
        }
        drafted += gamma as u64;
        let ps = gen.prefix_dists(&ctx, gamma + 1)?;
        let mut n_ok = 0;
        let mut fix = None;
        for (j, q) in qs.iter().enumerate() {
            let x = ctx[base + j] as usize;
            if rng.gen::<f64>() < acceptance_probability(&ps[j], q, x) {
                n_ok += 1;
            } else {
                fix = Some(sample(&residual_distribution(&ps[j], q), &mut rng));
                break;
            }
        }
        accepted += n_ok as u64;
        ctx.truncate(base + n_ok);
        ctx.push(fix.unwrap_or_else(|| sample(&ps[gamma], &mut rng)));
    }
    let mut out = ctx.split_off(prompt.len());
    out.truncate(max_new);
    let stats = SpecDecodeStats {
        drafted,
        accepted,
        acceptance_rate: if drafted == 0 { 0.0 } else { accepted as f64 / drafted as f64 },
        tokens_generated: out.len() as u64,
        wall_time: start.elapsed().as_secs_f64(),
        gamma,
    };
    Ok((out, stats))
}

/// One labelled speculative-decoding measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecDecodeRow {
    pub label: String,
    pub stats: SpecDecodeStats,
}

pub fn format_specdec_table(rows: &[SpecDecodeRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>9}  {:>9}  {:>10}  {:>9}\n",
        "draft", "gamma", "drafted", "accepted", "accept_%", "time_s"
    );
    for r in rows {
        let s = &r.stats;
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>9}  {:>9}  {:>10.2}  {:>9.3}",
            r.label,
            s.gamma,
            s.drafted,
            s.accepted,
            100.0 * s.acceptance_rate,
            s.wall_time
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ModelConfig};
    use proptest::prelude::*;

    /// A context-free model with a fixed next-token distribution.
    struct Fixed(Vec<f64>);

    impl LanguageModel for Fixed {
        fn vocab_size(&self) -> usize {
            self.0.len()
        }
        fn prefix_dists(&self, _: &[u32], n: usize) -> Result<Vec<Vec<f64>>> {
            Ok(vec![self.0.clone(); n])
        }
    }

    fn tiny(seed: u64) -> ParamSet {
        init_params(&ModelConfig::new(257, 2, 8, 32, 1, 16), seed).unwrap()
    }

    #[test]
    fn kl_closed_form() {
        let kl = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]);
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - want).abs() < 1e-12);
        assert!((kl - 0.14384).abs() < 1e-5);
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    }

    #[test]
    fn report_averages_examples() {
        let r = KlReport::from_per_example((1, 2), vec![0.1, 0.3]).unwrap();
        assert!((r.mean_kl - 0.2).abs() < 1e-15);
        assert_eq!(r.n_examples, 2);
    }

    #[test]
    fn identical_models_have_zero_kl() {
        let p = tiny(1);
        let ex = vec![vec![256, 10, 20, 30, 40], vec![256, 1, 2]];
        assert_eq!(kl_adjacent(&p, &p, &ex).unwrap().mean_kl, 0.0);
        let table = consistency_table(&[&p, &p, &p], &ex).unwrap();
        assert_eq!(table.len(), 2);
        assert!(table.iter().all(|r| r.mean_kl == 0.0));
        assert_eq!(consistency_table(&[&p, &p], &ex).unwrap().len(), 1);
        assert!(consistency_table(&[&p], &ex).is_err());
    }

    #[test]
    fn kl_rejects_vocab_mismatch() {
        let a = tiny(1);
        let b = init_params(&ModelConfig::new(100, 2, 8, 32, 1, 16), 1).unwrap();
        assert!(kl_adjacent(&a, &b, &[vec![1, 2]]).is_err());
    }

    #[test]
    fn kl_of_distinct_models_is_positive_and_mean() {
        let (a, b) = (tiny(1), tiny(2));
        let ex = vec![vec![256, 10, 20, 30], vec![256, 5, 6, 7, 8, 9]];
        let r = kl_adjacent(&a, &b, &ex).unwrap();
        let per = r.per_example_kl.clone().unwrap();
        assert!(per.iter().all(|&k| k > 0.0));
        assert!((r.mean_kl - (per[0] + per[1]) / 2.0).abs() < 1e-15);
        // the first example by hand
        let p = nn::position_dists(&a, &ex[0]).unwrap();
        let q = nn::position_dists(&b, &ex[0]).unwrap();
        let by_hand: f64 = (0..4).map(|i| kl_divergence(&p[i], &q[i])).sum::<f64>() / 4.0;
        assert!((per[0] - by_hand).abs() < 1e-15);
    }

    #[test]
    fn perplexity_endpoints() {
        let mut uniform = tiny(1);
        uniform.unembedding.data.fill(0.0);
        let ex = vec![vec![256, 1, 2, 3, 4]];
        assert!((perplexity(&uniform, &ex).unwrap() - 257.0).abs() < 1e-9);

        let mut perfect = tiny(1);
        perfect.unembedding.data.fill(0.0);
        // residual stream fixed at ones: logit v is the sum of unembedding row v
        for l in &mut perfect.layers {
            l.wo.data.fill(0.0);
            l.w_down.data.fill(0.0);
        }
        perfect.token_embedding.data.fill(1.0);
        perfect.unembedding.row_mut(7).fill(100.0);
        let ex = vec![vec![7; 6]];
        assert!((perplexity(&perfect, &ex).unwrap() - 1.0).abs() < 1e-9);
        assert!(perplexity(&perfect, &[vec![7]]).is_err());
    }

    #[test]
    fn perplexity_matches_training_loss() {
        let p = tiny(3);
        let ex: Vec<u32> = (0..17).map(|i| (i * 13 % 257) as u32).collect();
        let (loss, _) = nn::loss_and_grads(&p, &ex[..16], &ex[1..], 16).unwrap();
        let ppl = perplexity(&p, &[ex.clone()]).unwrap();
        assert!((ppl - loss.exp()).abs() < 1e-9 * ppl);
    }

    #[test]
    fn acceptance_closed_form() {
        let q = [0.8, 0.2];
        let p = [0.5, 0.5];
        assert!((expected_acceptance(&p, &q) - 0.7).abs() < 1e-12);
        assert!((acceptance_probability(&p, &q, 0) - 0.625).abs() < 1e-12);
        assert_eq!(acceptance_probability(&p, &q, 1), 1.0);
        assert_eq!(residual_distribution(&p, &q), vec![0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn one_step_emits_generator_distribution(
            raw_p in proptest::collection::vec(0.0f64..1.0, 2..5),
            raw_q in proptest::collection::vec(0.01f64..1.0, 2..5),
        ) {
            let n = raw_p.len().min(raw_q.len());
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let mut p = raw_p[..n].to_vec();
            p[0] += 0.01;
            let (p, q) = (norm(&p), norm(&raw_q[..n]));
            let e = emitted_distribution(&p, &q);
            for x in 0..n {
                prop_assert!((e[x] - p[x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_draft_is_always_accepted() {
        let m = Fixed(vec![0.1, 0.6, 0.3]);
        let (out, s) = speculative_generate(&m, &m, &[0], 8, 40, 5).unwrap();
        assert_eq!(out.len(), 40);
        assert_eq!(s.acceptance_rate, 1.0);
        assert_eq!(s.accepted, s.drafted);
        assert_eq!(s.gamma, 8);
    }

    #[test]
    fn impossible_drafts_are_rejected() {
        let draft = Fixed(vec![1.0, 0.0]);
        let gen = Fixed(vec![0.0, 1.0]);
        let (out, s) = speculative_generate(&draft, &gen, &[0], 4, 20, 1).unwrap();
        assert_eq!(s.accepted, 0);
        assert!(out.iter().all(|&t| t == 1));
    }

    #[test]
    fn speculative_is_deterministic_and_checks_inputs() {
        let (d, g) = (tiny(1), tiny(2));
        let a = speculative_generate(&d, &g, &[256, 65], 3, 10, 9).unwrap();
        let b = speculative_generate(&d, &g, &[256, 65], 3, 10, 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.accepted, b.1.accepted);
        assert!(a.1.accepted <= a.1.drafted);
        assert!(speculative_generate(&d, &g, &[256], 0, 10, 9).is_err());
        assert!(speculative_generate(&d, &Fixed(vec![0.5, 0.5]), &[1], 2, 4, 9).is_err());
    }

    #[test]
    fn long_contexts_truncate_per_prefix() {
        let p = tiny(4);
        let toks: Vec<u32> = (0..20).map(|i| i as u32 + 40).collect();
        let got = p.prefix_dists(&toks, 3).unwrap();
        for (i, end) in (18..=20).enumerate() {
            assert_eq!(got[i], nn::next_token_dist(&p, &toks[..end]).unwrap());
        }
        let short = p.prefix_dists(&toks[..10], 2).unwrap();
        let want = nn::next_token_dist(&p, &toks[..9]).unwrap();
        for (a, b) in short[0].iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tables_render() {
        let t = format_kl_table(&[KlReport::from_per_example((10, 20), vec![0.5]).unwrap()]);
        assert!(t.contains("0.50000"));
        let row = SpecDecodeRow {
            label: "prog".into(),
            stats: SpecDecodeStats {
                drafted: 8,
                accepted: 6,
                acceptance_rate: 0.75,
                tokens_generated: 9,
                wall_time: 0.1,
                gamma: 8,
            },
        };
        assert!(format_specdec_table(&[row]).contains("75.00"));
    }
}

mod common;

use common::{finite_difference_check, reference, tiny_config};
use progfam::nn::{forward, init_params, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn engine_logits_match_reference_implementation() {
    let p = init_params(&tiny_config(), 0).unwrap();
    let p64: Params<f64> = p.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for len in [1usize, 5, 16] {
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..257)).collect();
        let ours = forward(&p, &tokens).unwrap();
        let theirs = reference::logits(&p64, &tokens);
        let mut max_diff = 0.0f64;
        for (r, row) in theirs.iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                max_diff = max_diff.max((ours.get(r, c) as f64 - x).abs());
            }
        }
        assert!(max_diff <= 1e-5, "len {len}: max abs diff {max_diff}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let samples = finite_difference_check(3, 6, 1e-3);
    assert!(samples.len() >= 100);
    let worst = samples
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .unwrap();
    assert!(
        worst.rel_err <= 1e-3,
        "{}[{}]: analytic {} numeric {} rel {}",
        worst.tensor,
        worst.index,
        worst.analytic,
        worst.numeric,
        worst.rel_err
    );
}

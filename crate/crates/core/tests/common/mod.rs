#![allow(dead_code)]

pub mod reference;

use progfam::nn::ModelConfig;

/// V=257, d=32, d_ff=96, L=2, H=4, d_head=8.
pub fn tiny_config() -> ModelConfig {
    ModelConfig::new(257, 4, 8, 96, 2, 16)
}

use progfam::nn::{init_params, loss_and_grads, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct FdSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Central differences of the reference loss against the engine's analytic
/// gradient, `per_tensor` coordinates drawn from every tensor.
pub fn finite_difference_check(seed: u64, per_tensor: usize, h: f64) -> Vec<FdSample> {
    let cfg = tiny_config();
    let mut params: Params<f64> = init_params(&cfg, seed).unwrap().cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // perturb gains away from 1 so their gradients are generic
    for t in params.tensors_mut() {
        if t.kind == progfam::nn::TensorKind::Gain {
            for x in t.data.iter_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let window = 8;
    let inputs: Vec<u32> = (0..2 * window).map(|_| rng.gen_range(0..257)).collect();
    let targets: Vec<u32> = (0..2 * window).map(|_| rng.gen_range(0..257)).collect();
    let (_, grads) = loss_and_grads(&params, &inputs, &targets, window).unwrap();

    let mut picks = Vec::new();
    let mut base = 0usize;
    for t in grads.tensors() {
        for _ in 0..per_tensor {
            let local = if t.name == "token_embedding" {
                let row = inputs[rng.gen_range(0..inputs.len())] as usize;
                row * t.shape[1] + rng.gen_range(0..t.shape[1])
            } else {
                rng.gen_range(0..t.data.len())
            };
            picks.push((t.name.clone(), base + local, t.data[local]));
        }
        base += t.data.len();
    }

    picks
        .into_iter()
        .map(|(tensor, index, analytic)| {
            let orig = params.flat_get(index);
            params.flat_set(index, orig + h);
            let up = reference::loss(&params, &inputs, &targets, window);
            params.flat_set(index, orig - h);
            let down = reference::loss(&params, &inputs, &targets, window);
            params.flat_set(index, orig);
            let numeric = (up - down) / (2.0 * h);
            let rel_err = (numeric - analytic).abs() / (analytic.abs() + 1e-8);
            FdSample {
                tensor,
                index,
                analytic,
                numeric,
                rel_err,
            }
        })
        .collect()
}

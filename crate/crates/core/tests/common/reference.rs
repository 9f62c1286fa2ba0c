//! Straight-line f64 transformer used as an oracle for the engine.
//!
//! Written position-by-position with plain loops and no shared code with the
//! library's forward pass.

use progfam::nn::{Matrix, Params};

fn matvec(w: &Matrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.rows)
        .map(|r| (0..w.cols).map(|c| w.data[r * w.cols + c] * x[c]).sum())
        .collect()
}

fn rms(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, g)| v * s * g).collect()
}

fn rotate(x: &mut [f64], pos: usize, n_heads: usize, d_head: usize, base: f64) {
    let half = d_head / 2;
    for h in 0..n_heads {
        for i in 0..half {
            let theta = pos as f64 / base.powf(2.0 * i as f64 / d_head as f64);
            let a = x[h * d_head + i];
            let b = x[h * d_head + i + half];
            x[h * d_head + i] = a * theta.cos() - b * theta.sin();
            x[h * d_head + i + half] = b * theta.cos() + a * theta.sin();
        }
    }
}

/// Logits for one sequence, `tokens.len()` rows.
pub fn logits(p: &Params<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &p.config;
    let (h, dh) = (cfg.n_heads, cfg.d_head);
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| p.token_embedding.row(t as usize).to_vec())
        .collect();
    for layer in &p.layers {
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for (pos, x) in xs.iter().enumerate() {
            let a = rms(x, &layer.attn_norm, cfg.rms_eps);
            let mut q = matvec(&layer.wq, &a);
            let mut k = matvec(&layer.wk, &a);
            rotate(&mut q, pos, h, dh, cfg.rope_base);
            rotate(&mut k, pos, h, dh, cfg.rope_base);
            qs.push(q);
            ks.push(k);
            vs.push(matvec(&layer.wv, &a));
        }
        let mut next = Vec::new();
        for (t, x) in xs.iter().enumerate() {
            let mut concat = vec![0.0; h * dh];
            for head in 0..h {
                let r = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = (0..=t)
                    .map(|j| {
                        qs[t][r.clone()]
                            .iter()
                            .zip(&ks[j][r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - m).exp() / z;
                    for e in 0..dh {
                        concat[head * dh + e] += w * vs[j][head * dh + e];
                    }
                }
            }
            let attn = matvec(&layer.wo, &concat);
            let mid: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
            let m = rms(&mid, &layer.mlp_norm, cfg.rms_eps);
            let g = matvec(&layer.w_gate, &m);
            let u = matvec(&layer.w_up, &m);
            let s: Vec<f64> = g
                .iter()
                .zip(&u)
                .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let down = matvec(&layer.w_down, &s);
            next.push(mid.iter().zip(&down).map(|(a, b)| a + b).collect());
        }
        xs = next;
    }
    xs.iter()
        .map(|x| matvec(&p.unembedding, &rms(x, &p.final_norm, cfg.rms_eps)))
        .collect()
}

/// Mean cross-entropy over windows of `window` tokens.
pub fn loss(p: &Params<f64>, inputs: &[u32], targets: &[u32], window: usize) -> f64 {
    let mut total = 0.0;
    for (inp, tgt) in inputs.chunks(window).zip(targets.chunks(window)) {
        for (row, &t) in logits(p, inp).iter().zip(tgt) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
        }
    }
    total / inputs.len() as f64
}

//! Forward pass, next-token cross-entropy and its analytic gradient.
//!
//! Pre-norm blocks: RMSNorm, rotary multi-head causal attention, RMSNorm,
//! SwiGLU MLP, each added back into the residual stream. A final RMSNorm
//! feeds an untied unembedding.
//!
//! Inputs are a flat token buffer cut into independent windows of equal
//! length, so a training batch is `batch * window` tokens. Positions restart
//! at zero in every window.

use super::config::ModelConfig;
use super::params::{LayerParams, Matrix, Params};
use super::real::{gemm, Real, View, ViewMut};
use crate::error::{Error, Result};

struct Rope<F> {
    half: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Real> Rope<F> {
    fn new(window: usize, d_head: usize, base: f64) -> Self {
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(window * half);
        let mut sin = Vec::with_capacity(window * half);
        for t in 0..window {
            for i in 0..half {
                let freq = base.powf(-(2.0 * i as f64) / d_head as f64);
                let angle = t as f64 * freq;
                cos.push(F::of(angle.cos()));
                sin.push(F::of(angle.sin()));
            }
        }
        Rope { half, cos, sin }
    }

    /// Rotates every head of an `n x (heads * d_head)` buffer in place.
    /// `inverse` applies the transpose rotation (used for gradients).
    fn apply(&self, buf: &mut [F], window: usize, heads: usize, inverse: bool) {
        let dh = 2 * self.half;
        let width = heads * dh;
        for (row, chunk) in buf.chunks_exact_mut(width).enumerate() {
            let t = row % window;
            let cs = &self.cos[t * self.half..(t + 1) * self.half];
            let sn = &self.sin[t * self.half..(t + 1) * self.half];
            for head in chunk.chunks_exact_mut(dh) {
                let (lo, hi) = head.split_at_mut(self.half);
                for i in 0..self.half {
                    let (x1, x2) = (lo[i], hi[i]);
                    let (c, s) = (cs[i], sn[i]);
                    if inverse {
                        lo[i] = x1 * c + x2 * s;
                        hi[i] = x2 * c - x1 * s;
                    } else {
                        lo[i] = x1 * c - x2 * s;
                        hi[i] = x2 * c + x1 * s;
                    }
                }
            }
        }
    }
}

fn rmsnorm<F: Real>(x: &[F], gain: &[F], eps: F, out: &mut [F], rinv: &mut [F]) {
    let d = gain.len();
    let inv_d = F::one() / F::of(d as f64);
    for ((xr, yr), r) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).zip(rinv.iter_mut()) {
        let ms = xr.iter().fold(F::zero(), |acc, &v| acc + v * v) * inv_d;
        let inv = F::one() / (ms + eps).sqrt();
        *r = inv;
        for ((y, &v), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *y = v * inv * g;
        }
    }
}

/// Accumulates into `dx` and `dgain`.
fn rmsnorm_backward<F: Real>(
    x: &[F],
    gain: &[F],
    rinv: &[F],
    dy: &[F],
    dx: &mut [F],
    dgain: &mut [F],
) {
    let d = gain.len();
    let inv_d = F::one() / F::of(d as f64);
    for (((xr, dyr), dxr), &r) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(rinv)
    {
        let mut dot = F::zero();
        for j in 0..d {
            dgain[j] = dgain[j] + dyr[j] * xr[j] * r;
            dot = dot + gain[j] * dyr[j] * xr[j];
        }
        let coef = r * r * r * inv_d * dot;
        for j in 0..d {
            dxr[j] = dxr[j] + r * gain[j] * dyr[j] - coef * xr[j];
        }
    }
}

/// `y = x * w^T` for `x: n x in`, `w: out x in`.
fn linear<F: Real>(x: &[F], w: &Matrix<F>, n: usize, y: &mut [F]) {
    gemm(
        n,
        w.cols,
        w.rows,
        F::one(),
        View::rows(x, 0, w.cols),
        View::t(&w.data, 0, w.cols),
        F::zero(),
        ViewMut::rows(y, 0, w.rows),
    );
}

/// `dx = beta * dx + dy * w`, `dw += dy^T * x`.
fn linear_backward<F: Real>(
    x: &[F],
    w: &Matrix<F>,
    dy: &[F],
    n: usize,
    dx: &mut [F],
    dx_beta: F,
    dw: &mut Matrix<F>,
) {
    gemm(
        n,
        w.rows,
        w.cols,
        F::one(),
        View::rows(dy, 0, w.rows),
        View::rows(&w.data, 0, w.cols),
        dx_beta,
        ViewMut::rows(dx, 0, w.cols),
    );
    gemm(
        w.rows,
        n,
        w.cols,
        F::one(),
        View::t(dy, 0, w.rows),
        View::rows(x, 0, w.cols),
        F::one(),
        ViewMut::rows(&mut dw.data, 0, w.cols),
    );
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

struct LayerCache<F> {
    x_in: Vec<F>,
    r1: Vec<F>,
    a: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    o: Vec<F>,
    x_mid: Vec<F>,
    r2: Vec<F>,
    m: Vec<F>,
    gate: Vec<F>,
    up: Vec<F>,
    act: Vec<F>,
}

struct Forward<F> {
    n: usize,
    rope: Rope<F>,
    layers: Vec<LayerCache<F>>,
    x_final: Vec<F>,
    rf: Vec<F>,
    normed: Vec<F>,
    logits: Vec<F>,
}

struct Attention<F> {
    /// post-rotation queries and keys
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    /// concatenated head outputs, before `wo`
    o: Vec<F>,
}

/// Causal multi-head attention over the normalized input `a`.
fn attend<F: Real>(
    layer: &LayerParams<F>,
    cfg: &ModelConfig,
    rope: &Rope<F>,
    a: &[F],
    window: usize,
) -> Attention<F> {
    let a_dim = cfg.attn_dim();
    let heads = cfg.n_heads;
    let dh = cfg.d_head;
    let n = a.len() / cfg.d_model;
    let n_seq = n / window;
    let scale = F::one() / F::of(dh as f64).sqrt();

    let mut q = vec![F::zero(); n * a_dim];
    let mut k = vec![F::zero(); n * a_dim];
    let mut v = vec![F::zero(); n * a_dim];
    linear(a, &layer.wq, n, &mut q);
    linear(a, &layer.wk, n, &mut k);
    linear(a, &layer.wv, n, &mut v);
    rope.apply(&mut q, window, heads, false);
    rope.apply(&mut k, window, heads, false);

    let tt = window * window;
    let mut probs = vec![F::zero(); n_seq * heads * tt];
    let mut o = vec![F::zero(); n * a_dim];
    for s in 0..n_seq {
        for h in 0..heads {
            let off = s * window * a_dim + h * dh;
            let poff = (s * heads + h) * tt;
            gemm(
                window,
                dh,
                window,
                scale,
                View::rows(&q, off, a_dim),
                View::t(&k, off, a_dim),
                F::zero(),
                ViewMut::rows(&mut probs, poff, window),
            );
            for t in 0..window {
                let row = &mut probs[poff + t * window..poff + (t + 1) * window];
                let max = row[..=t].iter().fold(F::neg_infinity(), |m, &x| m.max(x));
                let mut sum = F::zero();
                for p in row[..=t].iter_mut() {
                    *p = (*p - max).exp();
                    sum = sum + *p;
                }
                let inv = F::one() / sum;
                for p in row[..=t].iter_mut() {
                    *p = *p * inv;
                }
                row[t + 1..].fill(F::zero());
            }
            gemm(
                window,
                window,
                dh,
                F::one(),
                View::rows(&probs, poff, window),
                View::rows(&v, off, a_dim),
                F::zero(),
                ViewMut {
                    data: &mut o,
                    off,
                    rs: a_dim,
                    cs: 1,
                },
            );
        }
    }
    Attention { q, k, v, probs, o }
}

/// Returns `(gate, up, silu(gate) * up)`.
fn swiglu<F: Real>(layer: &LayerParams<F>, m: &[F], n: usize) -> (Vec<F>, Vec<F>, Vec<F>) {
    let f_dim = layer.w_gate.rows;
    let mut gate = vec![F::zero(); n * f_dim];
    let mut up = vec![F::zero(); n * f_dim];
    linear(m, &layer.w_gate, n, &mut gate);
    linear(m, &layer.w_up, n, &mut up);
    let act = gate
        .iter()
        .zip(&up)
        .map(|(&g, &u)| g * sigmoid(g) * u)
        .collect();
    (gate, up, act)
}

/// Attention sublayer output (`wo` applied, no residual) for one window of
/// already-normalized rows.
#[cfg(test)]
pub(crate) fn attention_sublayer(layer: &LayerParams, cfg: &ModelConfig, a: &[f32]) -> Vec<f32> {
    let n = a.len() / cfg.d_model;
    let rope = Rope::new(n, cfg.d_head, cfg.rope_base);
    let att = attend(layer, cfg, &rope, a, n);
    let mut out = vec![0.0; n * cfg.d_model];
    linear(&att.o, &layer.wo, n, &mut out);
    out
}

/// MLP sublayer output (no residual) for already-normalized rows.
#[cfg(test)]
pub(crate) fn mlp_sublayer(layer: &LayerParams, m: &[f32]) -> Vec<f32> {
    let n = m.len() / layer.w_gate.cols;
    let (_, _, act) = swiglu(layer, m, n);
    let mut out = vec![0.0; n * layer.w_down.rows];
    linear(&act, &layer.w_down, n, &mut out);
    out
}

fn check_tokens(tokens: &[u32], vocab: usize, window: usize, seq_len: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if window == 0 || tokens.len() % window != 0 {
        return Err(Error::invalid(format!(
            "{} tokens do not split into windows of {window}",
            tokens.len()
        )));
    }
    if window > seq_len {
        return Err(Error::invalid(format!(
            "window {window} exceeds model seq_len {seq_len}"
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::invalid(format!(
            "token id {bad} out of range for vocab {vocab}"
        )));
    }
    Ok(())
}

fn run_forward<F: Real>(params: &Params<F>, tokens: &[u32], window: usize) -> Result<Forward<F>> {
    let cfg = &params.config;
    check_tokens(tokens, cfg.vocab_size, window, cfg.seq_len)?;
    let n = tokens.len();
    let d = cfg.d_model;
    let eps = F::of(cfg.rms_eps);
    let rope = Rope::new(window, cfg.d_head, cfg.rope_base);

    let mut x = vec![F::zero(); n * d];
    for (row, &tok) in x.chunks_exact_mut(d).zip(tokens) {
        row.copy_from_slice(params.token_embedding.row(tok as usize));
    }

    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let mut r1 = vec![F::zero(); n];
        let mut a = vec![F::zero(); n * d];
        rmsnorm(&x, &layer.attn_norm, eps, &mut a, &mut r1);

        let att = attend(layer, cfg, &rope, &a, window);

        let mut x_mid = vec![F::zero(); n * d];
        linear(&att.o, &layer.wo, n, &mut x_mid);
        for (y, &r) in x_mid.iter_mut().zip(&x) {
            *y = *y + r;
        }

        let mut r2 = vec![F::zero(); n];
        let mut m = vec![F::zero(); n * d];
        rmsnorm(&x_mid, &layer.mlp_norm, eps, &mut m, &mut r2);
        let (gate, up, act) = swiglu(layer, &m, n);
        let mut x_out = vec![F::zero(); n * d];
        linear(&act, &layer.w_down, n, &mut x_out);
        for (y, &r) in x_out.iter_mut().zip(&x_mid) {
            *y = *y + r;
        }

        let x_in = std::mem::replace(&mut x, x_out);
        caches.push(LayerCache {
            x_in,
            r1,
            a,
            q: att.q,
            k: att.k,
            v: att.v,
            probs: att.probs,
            o: att.o,
            x_mid,
            r2,
            m,
            gate,
            up,
            act,
        });
    }

    let mut rf = vec![F::zero(); n];
    let mut normed = vec![F::zero(); n * d];
    rmsnorm(&x, &params.final_norm, eps, &mut normed, &mut rf);
    let mut logits = vec![F::zero(); n * cfg.vocab_size];
    linear(&normed, &params.unembedding, n, &mut logits);

    Ok(Forward {
        n,
        rope,
        layers: caches,
        x_final: x,
        rf,
        normed,
        logits,
    })
}

/// Logits (`len x vocab`) for one sequence of at most `seq_len` tokens.
pub fn forward<F: Real>(params: &Params<F>, tokens: &[u32]) -> Result<Matrix<F>> {
    forward_windows(params, tokens, tokens.len())
}

/// Logits for a buffer of independent windows, stacked row-wise.
pub fn forward_windows<F: Real>(
    params: &Params<F>,
    tokens: &[u32],
    window: usize,
) -> Result<Matrix<F>> {
    let fwd = run_forward(params, tokens, window)?;
    Matrix::from_vec(fwd.n, params.config.vocab_size, fwd.logits)
}

fn check_targets(inputs: &[u32], targets: &[u32], vocab: usize) -> Result<()> {
    if inputs.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::invalid(format!("target id {bad} out of range")));
    }
    Ok(())
}

/// Per-row `log(sum(exp(row)))`, in f64.
fn log_sum_exp<F: Real>(row: &[F]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
    max + row.iter().map(|&x| (x.as_f64() - max).exp()).sum::<f64>().ln()
}

/// Mean next-token cross-entropy in nats.
pub fn loss<F: Real>(params: &Params<F>, inputs: &[u32], targets: &[u32], window: usize) -> Result<f64> {
    check_targets(inputs, targets, params.config.vocab_size)?;
    let fwd = run_forward(params, inputs, window)?;
    let v = params.config.vocab_size;
    let total: f64 = fwd
        .logits
        .chunks_exact(v)
        .zip(targets)
        .map(|(row, &t)| log_sum_exp(row) - row[t as usize].as_f64())
        .sum();
    Ok(total / fwd.n as f64)
}

/// Mean next-token cross-entropy and its exact gradient.
pub fn loss_and_grads<F: Real>(
    params: &Params<F>,
    inputs: &[u32],
    targets: &[u32],
    window: usize,
) -> Result<(f64, Params<F>)> {
    check_targets(inputs, targets, params.config.vocab_size)?;
    let mut fwd = run_forward(params, inputs, window)?;
    let cfg = &params.config;
    let n = fwd.n;
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let a_dim = cfg.attn_dim();
    let f_dim = cfg.d_ff;
    let heads = cfg.n_heads;
    let dh = cfg.d_head;
    let n_seq = n / window;
    let tt = window * window;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let inv_n = F::one() / F::of(n as f64);

    let mut grads = params.zeros_like();

    // logits become dlogits in place
    let mut total = 0.0f64;
    for (row, &t) in fwd.logits.chunks_exact_mut(v).zip(targets) {
        let lse = log_sum_exp(row);
        total += lse - row[t as usize].as_f64();
        for x in row.iter_mut() {
            *x = F::of((x.as_f64() - lse).exp()) * inv_n;
        }
        row[t as usize] = row[t as usize] - inv_n;
    }
    let loss = total / n as f64;
    let dlogits = fwd.logits;

    let mut dnormed = vec![F::zero(); n * d];
    linear_backward(
        &fwd.normed,
        &params.unembedding,
        &dlogits,
        n,
        &mut dnormed,
        F::zero(),
        &mut grads.unembedding,
    );
    let mut dx = vec![F::zero(); n * d];
    rmsnorm_backward(
        &fwd.x_final,
        &params.final_norm,
        &fwd.rf,
        &dnormed,
        &mut dx,
        &mut grads.final_norm,
    );

    let mut dp = vec![F::zero(); tt];
    for (li, (layer, cache)) in params.layers.iter().zip(&fwd.layers).enumerate().rev() {
        let g = &mut grads.layers[li];

        // MLP
        let mut dact = vec![F::zero(); n * f_dim];
        linear_backward(&cache.act, &layer.w_down, &dx, n, &mut dact, F::zero(), &mut g.w_down);
        let mut dgate = vec![F::zero(); n * f_dim];
        let mut dup = vec![F::zero(); n * f_dim];
        for i in 0..n * f_dim {
            let gt = cache.gate[i];
            let sg = sigmoid(gt);
            dup[i] = dact[i] * gt * sg;
            dgate[i] = dact[i] * cache.up[i] * sg * (F::one() + gt * (F::one() - sg));
        }
        let mut dm = vec![F::zero(); n * d];
        linear_backward(&cache.m, &layer.w_gate, &dgate, n, &mut dm, F::zero(), &mut g.w_gate);
        linear_backward(&cache.m, &layer.w_up, &dup, n, &mut dm, F::one(), &mut g.w_up);
        // dx now holds d(x_mid) after adding the norm path
        rmsnorm_backward(&cache.x_mid, &layer.mlp_norm, &cache.r2, &dm, &mut dx, &mut g.mlp_norm);

        // attention
        let mut d_o = vec![F::zero(); n * a_dim];
        linear_backward(&cache.o, &layer.wo, &dx, n, &mut d_o, F::zero(), &mut g.wo);
        let mut dq = vec![F::zero(); n * a_dim];
        let mut dk = vec![F::zero(); n * a_dim];
        let mut dv = vec![F::zero(); n * a_dim];
        for s in 0..n_seq {
            for h in 0..heads {
                let off = s * window * a_dim + h * dh;
                let poff = (s * heads + h) * tt;
                let probs = &cache.probs[poff..poff + tt];
                gemm(
                    window,
                    dh,
                    window,
                    F::one(),
                    View::rows(&d_o, off, a_dim),
                    View::t(&cache.v, off, a_dim),
                    F::zero(),
                    ViewMut::rows(&mut dp, 0, window),
                );
                gemm(
                    window,
                    window,
                    dh,
                    F::one(),
                    View::t(probs, 0, window),
                    View::rows(&d_o, off, a_dim),
                    F::zero(),
                    ViewMut {
                        data: &mut dv,
                        off,
                        rs: a_dim,
                        cs: 1,
                    },
                );
                // softmax backward; dp becomes dscores
                for t in 0..window {
                    let pr = &probs[t * window..(t + 1) * window];
                    let dr = &mut dp[t * window..(t + 1) * window];
                    let dot = (0..=t).fold(F::zero(), |acc, j| acc + pr[j] * dr[j]);
                    for j in 0..=t {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                    dr[t + 1..].fill(F::zero());
                }
                gemm(
                    window,
                    window,
                    dh,
                    scale,
                    View::rows(&dp, 0, window),
                    View::rows(&cache.k, off, a_dim),
                    F::zero(),
                    ViewMut {
                        data: &mut dq,
                        off,
                        rs: a_dim,
                        cs: 1,
                    },
                );
                gemm(
                    window,
                    window,
                    dh,
                    scale,
                    View::t(&dp, 0, window),
                    View::rows(&cache.q, off, a_dim),
                    F::zero(),
                    ViewMut {
                        data: &mut dk,
                        off,
                        rs: a_dim,
                        cs: 1,
                    },
                );
            }
        }
        fwd.rope.apply(&mut dq, window, heads, true);
        fwd.rope.apply(&mut dk, window, heads, true);
        let mut da = vec![F::zero(); n * d];
        linear_backward(&cache.a, &layer.wq, &dq, n, &mut da, F::zero(), &mut g.wq);
        linear_backward(&cache.a, &layer.wk, &dk, n, &mut da, F::one(), &mut g.wk);
        linear_backward(&cache.a, &layer.wv, &dv, n, &mut da, F::one(), &mut g.wv);
        rmsnorm_backward(&cache.x_in, &layer.attn_norm, &cache.r1, &da, &mut dx, &mut g.attn_norm);
    }

    for (row, &tok) in dx.chunks_exact(d).zip(inputs) {
        let dst = grads.token_embedding.row_mut(tok as usize);
        for (g, &x) in dst.iter_mut().zip(row) {
            *g = *g + x;
        }
    }

    Ok((loss, grads))
}

/// Softmax of `logits` computed in f64.
pub fn softmax<F: Real>(logits: &[F]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&x| (x.as_f64() - lse).exp()).collect()
}

/// Next-token distribution after `context`. Contexts longer than the model's
/// `seq_len` are truncated to their most recent `seq_len` tokens.
pub fn next_token_dist<F: Real>(params: &Params<F>, context: &[u32]) -> Result<Vec<f64>> {
    if context.is_empty() {
        return Err(Error::invalid("next_token_dist: empty context"));
    }
    let keep = context.len().min(params.config.seq_len);
    let logits = forward(params, &context[context.len() - keep..])?;
    Ok(softmax(logits.row(logits.rows - 1)))
}

/// Next-token distributions at every position of `tokens` (truncated to the
/// most recent `seq_len` tokens); row `i` predicts the token after
/// `tokens[..=i]` of the kept suffix.
pub fn position_dists<F: Real>(params: &Params<F>, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
    if tokens.is_empty() {
        return Err(Error::invalid("position_dists: empty sequence"));
    }
    let keep = tokens.len().min(params.config.seq_len);
    let logits = forward(params, &tokens[tokens.len() - keep..])?;
    Ok((0..logits.rows).map(|r| softmax(logits.row(r))).collect())
}

//! Parameter tensors of a decoder-only transformer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::real::Real;
use crate::error::{Error, Result};

/// Standard deviation of the weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F = f32> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }
}

/// Whether a tensor is a weight matrix (decayed) or a norm gain (not).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Matrix,
    Gain,
}

/// One named tensor, borrowed.
pub struct TensorRef<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub data: &'a [F],
}

pub struct TensorMut<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub data: &'a mut [F],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F = f32> {
    pub attn_norm: Vec<F>,
    /// (n_heads * d_head) x d_model
    pub wq: Matrix<F>,
    pub wk: Matrix<F>,
    pub wv: Matrix<F>,
    /// d_model x (n_heads * d_head)
    pub wo: Matrix<F>,
    pub mlp_norm: Vec<F>,
    /// d_ff x d_model
    pub w_gate: Matrix<F>,
    pub w_up: Matrix<F>,
    /// d_model x d_ff
    pub w_down: Matrix<F>,
}

/// Every tensor of one model, together with the config it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F = f32> {
    pub config: ModelConfig,
    /// vocab x d_model
    pub token_embedding: Matrix<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Vec<F>,
    /// vocab x d_model
    pub unembedding: Matrix<F>,
}

/// The f32 parameter set used for training and checkpoints.
pub type ParamSet = Params<f32>;

/// Gradients share the parameter layout.
pub type GradSet<F = f32> = Params<F>;

macro_rules! layer_tensors {
    ($layer:expr, $i:expr, $wrap:ident, $push:expr) => {{
        let l = $layer;
        let i = $i;
        $push(format!("layers.{i}.attn_norm"), vec![l.attn_norm.len()], TensorKind::Gain, $wrap!(l.attn_norm));
        $push(format!("layers.{i}.wq"), vec![l.wq.rows, l.wq.cols], TensorKind::Matrix, $wrap!(l.wq.data));
        $push(format!("layers.{i}.wk"), vec![l.wk.rows, l.wk.cols], TensorKind::Matrix, $wrap!(l.wk.data));
        $push(format!("layers.{i}.wv"), vec![l.wv.rows, l.wv.cols], TensorKind::Matrix, $wrap!(l.wv.data));
        $push(format!("layers.{i}.wo"), vec![l.wo.rows, l.wo.cols], TensorKind::Matrix, $wrap!(l.wo.data));
        $push(format!("layers.{i}.mlp_norm"), vec![l.mlp_norm.len()], TensorKind::Gain, $wrap!(l.mlp_norm));
        $push(format!("layers.{i}.w_gate"), vec![l.w_gate.rows, l.w_gate.cols], TensorKind::Matrix, $wrap!(l.w_gate.data));
        $push(format!("layers.{i}.w_up"), vec![l.w_up.rows, l.w_up.cols], TensorKind::Matrix, $wrap!(l.w_up.data));
        $push(format!("layers.{i}.w_down"), vec![l.w_down.rows, l.w_down.cols], TensorKind::Matrix, $wrap!(l.w_down.data));
    }};
}

macro_rules! by_ref {
    ($e:expr) => {
        &$e[..]
    };
}

macro_rules! by_mut {
    ($e:expr) => {
        &mut $e[..]
    };
}

impl<F: Real> Params<F> {
    /// All-zero tensors shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let a = config.attn_dim();
        let f = config.d_ff;
        let v = config.vocab_size;
        let layer = LayerParams {
            attn_norm: vec![F::zero(); d],
            wq: Matrix::zeros(a, d),
            wk: Matrix::zeros(a, d),
            wv: Matrix::zeros(a, d),
            wo: Matrix::zeros(d, a),
            mlp_norm: vec![F::zero(); d],
            w_gate: Matrix::zeros(f, d),
            w_up: Matrix::zeros(f, d),
            w_down: Matrix::zeros(d, f),
        };
        Params {
            config: config.clone(),
            token_embedding: Matrix::zeros(v, d),
            layers: vec![layer; config.n_layers],
            final_norm: vec![F::zero(); d],
            unembedding: Matrix::zeros(v, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Tensors in canonical order: embedding, layers, final norm, unembedding.
    pub fn tensors(&self) -> Vec<TensorRef<'_, F>> {
        let mut out = Vec::with_capacity(3 + 9 * self.layers.len());
        let mut push = |name, shape, kind, data| {
            out.push(TensorRef {
                name,
                shape,
                kind,
                data,
            })
        };
        let e = &self.token_embedding;
        push(
            "token_embedding".into(),
            vec![e.rows, e.cols],
            TensorKind::Matrix,
            &e.data[..],
        );
        for (i, l) in self.layers.iter().enumerate() {
            layer_tensors!(l, i, by_ref, push);
        }
        push(
            "final_norm".into(),
            vec![self.final_norm.len()],
            TensorKind::Gain,
            &self.final_norm[..],
        );
        let u = &self.unembedding;
        push(
            "unembedding".into(),
            vec![u.rows, u.cols],
            TensorKind::Matrix,
            &u.data[..],
        );
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, F>> {
        let mut out = Vec::with_capacity(3 + 9 * self.layers.len());
        let mut push = |name, shape, kind, data| {
            out.push(TensorMut {
                name,
                shape,
                kind,
                data,
            })
        };
        let e = &mut self.token_embedding;
        push(
            "token_embedding".into(),
            vec![e.rows, e.cols],
            TensorKind::Matrix,
            &mut e.data[..],
        );
        for (i, l) in self.layers.iter_mut().enumerate() {
            layer_tensors!(l, i, by_mut, push);
        }
        push(
            "final_norm".into(),
            vec![self.final_norm.len()],
            TensorKind::Gain,
            &mut self.final_norm[..],
        );
        let u = &mut self.unembedding;
        push(
            "unembedding".into(),
            vec![u.rows, u.cols],
            TensorKind::Matrix,
            &mut u.data[..],
        );
        out
    }

    pub fn num_elements(&self) -> u64 {
        self.tensors().iter().map(|t| t.data.len() as u64).sum()
    }

    /// Checks tensor shapes against the attached config and that every entry
    /// is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Self::zeros(&self.config);
        let have = self.tensors();
        let want = expected.tensors();
        if have.len() != want.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, found {}",
                want.len(),
                have.len()
            )));
        }
        for (h, w) in have.iter().zip(&want) {
            if h.shape != w.shape || h.data.len() != w.data.len() {
                return Err(Error::invalid(format!(
                    "tensor {} has shape {:?}, config requires {:?}",
                    h.name, h.shape, w.shape
                )));
            }
            if let Some(pos) = h.data.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("{}[{pos}]", h.name)));
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        let mut out = Params::<G>::zeros(&self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = G::of(s.as_f64());
            }
        }
        out
    }

    /// Flat element `idx` in canonical tensor order.
    pub fn flat_get(&self, mut idx: usize) -> F {
        for t in self.tensors() {
            if idx < t.data.len() {
                return t.data[idx];
            }
            idx -= t.data.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_set(&mut self, mut idx: usize, value: F) {
        for t in self.tensors_mut() {
            if idx < t.data.len() {
                t.data[idx] = value;
                return;
            }
            idx -= t.data.len();
        }
        panic!("flat index out of range");
    }
}

/// Deterministic initialization: N(0, 0.02^2) weights, with output
/// projections (`wo`, `w_down`) further scaled by `1/sqrt(2 * n_layers)`, and
/// unit norm gains.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, INIT_STD as f32).expect("valid std");
    let out_scale = if config.n_layers > 0 {
        (1.0 / (2.0 * config.n_layers as f64).sqrt()) as f32
    } else {
        1.0
    };
    let mut params = ParamSet::zeros(config);
    for t in params.tensors_mut() {
        match t.kind {
            TensorKind::Gain => t.data.fill(1.0),
            TensorKind::Matrix => {
                let scale = if t.name.ends_with(".wo") || t.name.ends_with(".w_down") {
                    out_scale
                } else {
                    1.0
                };
                for x in t.data.iter_mut() {
                    *x = normal.sample(&mut rng) * scale;
                }
            }
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::new(257, 4, 8, 96, 2, 16)
    }

    #[test]
    fn shape_walk_matches_closed_form() {
        for cfg in [
            tiny(),
            ModelConfig::new(257, 4, 8, 96, 0, 16),
            ModelConfig::new(11, 3, 4, 20, 5, 7),
        ] {
            let p = init_params(&cfg, 0).unwrap();
            let walked: u64 = p
                .tensors()
                .iter()
                .map(|t| t.shape.iter().product::<usize>() as u64)
                .sum();
            assert_eq!(walked, cfg.count_params());
            assert_eq!(p.num_elements(), cfg.count_params());
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&tiny(), 7).unwrap();
        let b = init_params(&tiny(), 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&tiny(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gains_are_one() {
        let p = init_params(&tiny(), 3).unwrap();
        for t in p.tensors() {
            if t.kind == TensorKind::Gain {
                assert!(t.data.iter().all(|&x| x == 1.0), "{}", t.name);
            }
        }
    }

    #[test]
    fn init_statistics() {
        // 400 x 256 = 102400 entries in the embedding
        let cfg = ModelConfig::new(400, 16, 16, 512, 2, 8);
        let p = init_params(&cfg, 11).unwrap();
        let check = |data: &[f32], std: f64| {
            let n = data.len() as f64;
            let mean = data.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 3.0 * std / n.sqrt(), "mean {mean}");
            assert!((var.sqrt() / std - 1.0).abs() < 0.05, "std {}", var.sqrt());
        };
        check(&p.token_embedding.data, INIT_STD);
        // wo and w_down are scaled by 1/sqrt(2 L) = 1/2
        let mut down = Vec::new();
        for l in &p.layers {
            down.extend_from_slice(&l.w_down.data);
            down.extend_from_slice(&l.wo.data);
        }
        assert!(down.len() >= 100_000);
        check(&down, INIT_STD / 2.0);
    }

    #[test]
    fn validate_catches_nan_and_shape() {
        let mut p = init_params(&tiny(), 0).unwrap();
        assert!(p.validate().is_ok());
        p.layers[1].wk.data[3] = f32::NAN;
        assert!(matches!(p.validate(), Err(Error::NonFinite(_))));
        let mut q = init_params(&tiny(), 0).unwrap();
        q.final_norm.push(1.0);
        assert!(q.validate().is_err());
    }
}

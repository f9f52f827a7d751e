//! The text adaptor: an N-layer MLP with square D×D layers mapping raw text
//! embeddings into the joint space. Hidden layers use ReLU; the last layer is
//! purely linear. N = 0 is the identity.
//!
//! Forward and backward are written against [`Real`] so the exact same code
//! runs in `f32` for inference and in `f64` for gradient checking and training.

use std::cell::Cell;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, ByteReader};
use crate::embedding_io::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix, Real};

pub const DSAD_MAGIC: &[u8; 4] = b"DSAD";
pub const DSAD_VERSION: u32 = 1;
pub const DEFAULT_LAYERS: usize = 3;
pub const MAX_LAYERS: usize = 8;

thread_local! {
    static FORWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of adaptor forward passes executed on the calling thread so far.
pub fn forward_calls_on_this_thread() -> u64 {
    FORWARD_CALLS.with(Cell::get)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptorConfig {
    pub num_layers: usize,
    pub dim: usize,
    pub seed: u64,
}

impl AdaptorConfig {
    pub fn new(num_layers: usize, dim: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            num_layers,
            dim,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers > MAX_LAYERS {
            return Err(Error::Config(format!(
                "adaptor layers {} exceeds maximum {MAX_LAYERS}",
                self.num_layers
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("adaptor dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// One affine layer `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorParams<T = f32> {
    dim: usize,
    layers: Vec<Linear<T>>,
}

/// Parameter gradients, laid out like [`AdaptorParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorGrads<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> AdaptorParams<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            layers: Vec::new(),
        }
    }

    pub fn from_layers(dim: usize, layers: Vec<Linear<T>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("adaptor dim must be >= 1".into()));
        }
        if layers.len() > MAX_LAYERS {
            return Err(Error::Config(format!(
                "{} layers exceeds maximum {MAX_LAYERS}",
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.rows() != dim || l.weight.cols() != dim || l.bias.len() != dim {
                return Err(Error::Shape(format!(
                    "layer {i}: expected {dim}x{dim} weight and {dim} bias, got {}x{} and {}",
                    l.weight.rows(),
                    l.weight.cols(),
                    l.bias.len()
                )));
            }
            if !l.weight.as_slice().iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(Error::Data(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { dim, layers })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn cast<U: Real>(&self) -> AdaptorParams<U> {
        AdaptorParams {
            dim: self.dim,
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Flattened view of every parameter, layer by layer (weights then bias).
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.weight.as_mut_slice().iter_mut());
            out.extend(l.bias.iter_mut());
        }
        out
    }

    /// Plain gradient descent step `θ ← θ − lr·∇θ`.
    pub fn sgd_step(&mut self, grads: &AdaptorGrads<T>, lr: T) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, &gw) in l.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
                *w -= lr * gw;
            }
            for (b, &gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.dim {
            return Err(Error::Shape(format!(
                "adaptor expects {}-d embeddings, got {cols}-d",
                self.dim
            )));
        }
        Ok(())
    }

    /// Applies the MLP to every row of `input` with shared parameters.
    pub fn forward(&self, input: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(input.cols())?;
        FORWARD_CALLS.with(|c| c.set(c.get() + 1));
        let last = self.layers.len().saturating_sub(1);
        let mut act = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            act = affine(layer, &act);
            if i < last {
                relu_in_place(act.as_mut_slice());
            }
        }
        Ok(act)
    }

    /// Reverse-mode gradients of `forward` given `upstream = ∂L/∂output`.
    ///
    /// Returns parameter gradients and `∂L/∂input`. ReLU's derivative at 0 is 0.
    pub fn backward(
        &self,
        input: &Matrix<T>,
        upstream: &Matrix<T>,
    ) -> Result<(AdaptorGrads<T>, Matrix<T>)> {
        self.check_input(input.cols())?;
        if upstream.rows() != input.rows() || upstream.cols() != self.dim {
            return Err(Error::Shape(format!(
                "upstream gradient is {}x{}, forward output is {}x{}",
                upstream.rows(),
                upstream.cols(),
                input.rows(),
                self.dim
            )));
        }
        let n = self.layers.len();
        // inputs[i] is the input to layer i; pre[i] its pre-activation.
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut act = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, &act);
            inputs.push(act);
            act = z.clone();
            if i + 1 < n {
                relu_in_place(act.as_mut_slice());
            }
            pre.push(z);
        }

        let mut grad = upstream.clone();
        let mut grads = vec![None; n];
        for i in (0..n).rev() {
            if i + 1 < n {
                for (g, &z) in grad.as_mut_slice().iter_mut().zip(pre[i].as_slice()) {
                    if z <= T::ZERO {
                        *g = T::ZERO;
                    }
                }
            }
            let a = &inputs[i];
            let d = self.dim;
            let mut dw = Matrix::zeros(d, d);
            let mut db = vec![T::ZERO; d];
            for k in 0..grad.rows() {
                let gk = grad.row(k);
                let ak = a.row(k);
                for (o, &g) in gk.iter().enumerate() {
                    if g == T::ZERO {
                        continue;
                    }
                    db[o] += g;
                    for (w, &x) in dw.row_mut(o).iter_mut().zip(ak) {
                        *w += g * x;
                    }
                }
            }
            let w = &self.layers[i].weight;
            let mut next = Matrix::zeros(grad.rows(), d);
            for k in 0..grad.rows() {
                let gk = grad.row(k).to_vec();
                let out = next.row_mut(k);
                for (o, &g) in gk.iter().enumerate() {
                    if g == T::ZERO {
                        continue;
                    }
                    for (x, &wv) in out.iter_mut().zip(w.row(o)) {
                        *x += g * wv;
                    }
                }
            }
            grads[i] = Some(Linear {
                weight: dw,
                bias: db,
            });
            grad = next;
        }
        let layers = grads.into_iter().map(|g| g.expect("filled")).collect();
        Ok((AdaptorGrads { layers }, grad))
    }
}

impl AdaptorParams<f32> {
    /// Seeded uniform init in `[−√(6/2D), +√(6/2D)]`, zero biases.
    pub fn init(cfg: &AdaptorConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let bound = init_bound(d) as f32;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let layers = (0..cfg.num_layers)
            .map(|_| {
                let w: Vec<f32> = (0..d * d).map(|_| rng.random_range(-bound..=bound)).collect();
                Linear {
                    weight: Matrix::from_vec(d, d, w).expect("square"),
                    bias: vec![0.0; d],
                }
            })
            .collect();
        Ok(Self { dim: d, layers })
    }

    /// Adapts an embedding matrix, keeping its labels.
    pub fn adapt(&self, e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let out = self.forward(e.matrix())?;
        EmbeddingMatrix::new(out, e.labels().map(<[String]>::to_vec))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DSAD_MAGIC);
        codec::put_u32(&mut out, DSAD_VERSION);
        codec::put_u32(&mut out, self.layers.len() as u32);
        codec::put_u32(&mut out, self.dim as u32);
        for l in &self.layers {
            codec::put_f32s(&mut out, l.weight.as_slice());
            codec::put_f32s(&mut out, &l.bias);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(DSAD_MAGIC)?;
        let version = r.u32()?;
        if version != DSAD_VERSION {
            return Err(Error::Format(format!("unsupported DSAD version {version}")));
        }
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        if n > MAX_LAYERS {
            return Err(Error::Format(format!("DSAD declares {n} layers")));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let w = r.f32s(d * d)?;
            let b = r.f32s(d)?;
            layers.push(Linear {
                weight: Matrix::from_vec(d, d, w)?,
                bias: b,
            });
        }
        r.expect_end()?;
        Self::from_layers(d, layers)
    }
}

pub fn init_bound(dim: usize) -> f64 {
    (6.0 / (2.0 * dim as f64)).sqrt()
}

pub fn read_adaptor(path: impl AsRef<Path>) -> Result<AdaptorParams<f32>> {
    AdaptorParams::from_bytes(&codec::read_file(path.as_ref())?)
}

pub fn write_adaptor(path: impl AsRef<Path>, params: &AdaptorParams<f32>) -> Result<()> {
    codec::write_file(path.as_ref(), &params.to_bytes())
}

fn affine<T: Real>(layer: &Linear<T>, x: &Matrix<T>) -> Matrix<T> {
    let d = layer.weight.rows();
    let mut out = Matrix::zeros(x.rows(), d);
    for k in 0..x.rows() {
        let xk = x.row(k);
        let yk = out.row_mut(k);
        for (o, y) in yk.iter_mut().enumerate() {
            *y = dot(layer.weight.row(o), xk) + layer.bias[o];
        }
    }
    out
}

fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::ZERO {
            *x = T::ZERO;
        }
    }
}

//! Seeded self-checks behind the `verify` command: conv vs. online scoring and
//! adaptor backprop vs. central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adaptor::{AdaptorConfig, AdaptorParams};
use crate::embedding_io::EmbeddingMatrix;
use crate::error::Result;
use crate::head::{classify_conv, reparameterize, score_online, FeatureMap, DEFAULT_LOGIT_BIAS, DEFAULT_LOGIT_SCALE};
use crate::tensor::{dot, Matrix};

pub const EQUIVALENCE_TOL: f64 = 1e-5;
pub const GRADIENT_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tol: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, cases: usize, worst: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            cases,
            worst,
            tol,
            passed: worst.is_finite() && worst <= tol,
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Max |conv − online| and max |conv − direct f64 cosine| over random vocabularies.
pub fn equivalence_check(seed: u64, cases: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (alpha, beta) = (DEFAULT_LOGIT_SCALE, DEFAULT_LOGIT_BIAS);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let k = rng.random_range(1..=64);
        let d = rng.random_range(1..=128);
        let e = loop {
            let m = random_matrix(&mut rng, k, d).cast::<f32>();
            if m.iter_rows().all(|r| r.iter().any(|&v| v != 0.0)) {
                break EmbeddingMatrix::new(m, None)?;
            }
        };
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let fm = FeatureMap::new(0, 8, [1, d, h, w], random_matrix(&mut rng, 1, d * h * w).cast::<f32>().into_vec())?;
        let conv = classify_conv(&reparameterize(&e, alpha, beta)?, &fm)?;
        let online = score_online(&e, &fm, alpha, beta)?;
        for (a, b) in conv.data.iter().zip(&online.data) {
            worst = worst.max((*a as f64 - *b as f64).abs());
        }
        for cell in 0..h * w {
            let x: Vec<f64> = fm.cell(0, cell).iter().map(|&v| v as f64).collect();
            let xn = dot(&x, &x).sqrt();
            for c in 0..k {
                let r: Vec<f64> = e.row(c).iter().map(|&v| v as f64).collect();
                let cos = if xn > 0.0 { dot(&r, &x) / (dot(&r, &r).sqrt() * xn) } else { 0.0 };
                let direct = alpha as f64 * cos + beta as f64;
                worst = worst.max((conv.get(0, c, cell) as f64 - direct).abs());
            }
        }
    }
    Ok(CheckResult::new("reparameterization equivalence", cases, worst, EQUIVALENCE_TOL))
}

/// Signs of every hidden pre-activation; a change means a step crossed a ReLU kink.
fn hidden_signs(p: &AdaptorParams<f64>, x: &Matrix<f64>) -> Vec<bool> {
    let layers = p.layers();
    let mut signs = Vec::new();
    for r in 0..x.rows() {
        let mut a = x.row(r).to_vec();
        for (i, l) in layers.iter().enumerate() {
            let z: Vec<f64> = (0..p.dim()).map(|o| dot(l.weight.row(o), &a) + l.bias[o]).collect();
            if i + 1 < layers.len() {
                signs.extend(z.iter().map(|&v| v > 0.0));
                a = z.into_iter().map(|v| v.max(0.0)).collect();
            }
        }
    }
    signs
}

fn weighted_output(p: &AdaptorParams<f64>, x: &Matrix<f64>, u: &Matrix<f64>) -> Result<f64> {
    Ok(dot(p.forward(x)?.as_slice(), u.as_slice()))
}

/// Worst relative error of adaptor parameter gradients against central
/// differences of `L = Σ U ⊙ forward(X)`, skipping steps that cross a kink.
pub fn adaptor_gradient_check(seed: u64, cases: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let layers = rng.random_range(1..=4);
        let d = rng.random_range(1..=8);
        let rows = rng.random_range(1..=5);
        let mut p = AdaptorParams::init(&AdaptorConfig::new(layers, d, seed ^ case as u64)?)?.cast::<f64>();
        // Non-zero biases keep hidden units away from exact zeros.
        for (i, v) in p.flat_mut().into_iter().enumerate() {
            if i % (d * d + d) >= d * d {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let x = random_matrix(&mut rng, rows, d);
        let u = random_matrix(&mut rng, rows, d);
        let (grads, _) = p.backward(&x, &u)?;
        let analytic: Vec<f64> = grads
            .layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied().collect::<Vec<_>>())
            .collect();
        let base = hidden_signs(&p, &x);
        for (i, &g) in analytic.iter().enumerate() {
            let orig = p.flat()[i];
            *p.flat_mut()[i] = orig + FD_STEP;
            let (plus, sp) = (weighted_output(&p, &x, &u)?, hidden_signs(&p, &x));
            *p.flat_mut()[i] = orig - FD_STEP;
            let (minus, sm) = (weighted_output(&p, &x, &u)?, hidden_signs(&p, &x));
            *p.flat_mut()[i] = orig;
            if sp != base || sm != base {
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(CheckResult::new("adaptor gradients", cases, worst, GRADIENT_TOL))
}

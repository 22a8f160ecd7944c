//! Dense numeric substrate: matrices, activations, a small MLP with manual
//! backprop, and the seeded generator every stochastic step draws from.

mod matrix;
mod mlp;
mod rng;

pub use matrix::DenseMatrix;
pub use mlp::{Activation, Layer, LayerGrad, MlpCache, MlpGrads, MlpParams};
pub use rng::{derive_seed, SeededRng};

use crate::error::{Result, ToeError};

/// Logistic function, evaluated on the branch that never exponentiates a
/// large positive argument.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-odds of a probability. Saturated inputs map to ±∞.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `softmax(scores / tau)`. Entries equal to `-inf` are excluded and get
/// exactly zero mass.
pub fn softmax_temp(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(ToeError::invalid(format!("softmax temperature must be > 0, got {tau}")));
    }
    let max = scores
        .iter()
        .copied()
        .filter(|s| s.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(ToeError::NoValidUnits);
    }
    let mut out: Vec<f64> = scores
        .iter()
        .map(|&s| if s.is_finite() { ((s - max) / tau).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

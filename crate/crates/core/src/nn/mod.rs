//! Small dense neural-network engine with hand-written backpropagation.
//!
//! Everything is generic over [`Real`] so the same code trains in 32-bit and
//! gradient-checks in 64-bit.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, TensorMeta,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, grad_check_against, Coordinate, GradCheckOptions, GradCheckReport, Objective};
pub use layers::{
    Dense, EmbeddingTable, ForwardCache, Gradients, HeadGradients, MlpHead, Network,
    NetworkShape, SparseRows,
};

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use thiserror::Error;

/// Floating-point type usable for parameters and activations.
pub trait Real: NdFloat + FromPrimitive + Default {}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite constant")
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("field {field}: index {index} out of range for vocabulary of {vocab}")]
    IndexOutOfRange { field: usize, index: u32, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Probability clamp used by the cross-entropy loss.
pub const PROB_EPSILON: f64 = 1e-7;

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Binary cross-entropy on a probability, with `p` clamped to `[ε, 1−ε]`.
///
/// Returns `(loss, ∂loss/∂p)`. The derivative is zero where the clamp is active.
pub fn cross_entropy<T: Real>(p: T, label: bool) -> Result<(T, T), NnError> {
    if !p.is_finite() {
        return Err(NnError::NonFinite("cross-entropy input".into()));
    }
    let eps: T = real(PROB_EPSILON);
    let one = T::one();
    let clamped = p < eps || p > one - eps;
    let q = p.max(eps).min(one - eps);
    let (loss, grad) = if label {
        (-q.ln(), -one / q)
    } else {
        (-(one - q).ln(), one / (one - q))
    };
    Ok((loss, if clamped { T::zero() } else { grad }))
}

/// Cross-entropy of `sigmoid(z)`. Returns `(loss, ∂loss/∂z)`; the derivative is
/// `p − label` outside the clamp region.
pub fn cross_entropy_logit<T: Real>(z: T, label: bool) -> Result<(T, T), NnError> {
    if !z.is_finite() {
        return Err(NnError::NonFinite("cross-entropy logit".into()));
    }
    let p = sigmoid(z);
    let (loss, dp) = cross_entropy(p, label)?;
    let target = if label { T::one() } else { T::zero() };
    let dz = if dp == T::zero() { T::zero() } else { p - target };
    Ok((loss, dz))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_gradient_at_zero() {
        let (loss, dz) = cross_entropy_logit(0.0f64, true).unwrap();
        assert_eq!(dz, -0.5);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn clamp_floor() {
        let (loss, dp) = cross_entropy(1.0f64, true).unwrap();
        assert!((loss - -(1.0 - PROB_EPSILON).ln()).abs() < 1e-20);
        assert!((loss - 1e-7).abs() < 1e-13);
        assert_eq!(dp, 0.0);
        let (loss0, _) = cross_entropy(0.0f64, false).unwrap();
        assert_eq!(loss0, loss);
    }

    #[test]
    fn probability_gradient_matches_differences() {
        for &(p, label) in &[(0.3f64, true), (0.3, false), (0.91, true), (0.02, false)] {
            let (_, g) = cross_entropy(p, label).unwrap();
            let h = 1e-6;
            let n = (cross_entropy(p + h, label).unwrap().0 - cross_entropy(p - h, label).unwrap().0)
                / (2.0 * h);
            assert!((g - n).abs() / g.abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(cross_entropy(f64::NAN, true).is_err());
        assert!(cross_entropy_logit(f32::INFINITY, false).is_err());
    }
}

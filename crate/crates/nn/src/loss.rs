use crate::error::NnError;
use crate::layers;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax of a single logit vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    layers::softmax_rows(logits, logits.len())
}

/// Mean cross-entropy of `[batch, classes]` logits against class indices,
/// with the gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>), NnError> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(NnError::ShapeMismatch {
            expected: vec![labels.len(), s.get(1).copied().unwrap_or(0)],
            got: s.to_vec(),
        });
    }
    let (batch, classes) = (s[0], s[1]);
    let probs = layers::softmax_rows(logits.data(), classes);
    let scale = T::from_f64(1.0 / batch as f64);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for (n, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(NnError::ShapeMismatch {
                expected: vec![classes],
                got: vec![label],
            });
        }
        let p = probs[n * classes + label].max(T::from_f64(1e-12));
        loss -= p.ln();
        grad[n * classes + label] -= T::one();
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, Tensor::new(vec![batch, classes], grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum RegressionLoss {
    Squared,
    /// Quadratic within `|error| <= delta`, linear outside.
    Huber { delta: f64 },
}

impl RegressionLoss {
    /// Loss and derivative w.r.t. the prediction for one residual `pred - target`.
    pub fn eval<T: Scalar>(self, residual: T) -> (T, T) {
        match self {
            RegressionLoss::Squared => (residual * residual, residual + residual),
            RegressionLoss::Huber { delta } => {
                let d = T::from_f64(delta);
                let half = T::from_f64(0.5);
                if residual.abs() <= d {
                    (half * residual * residual, residual)
                } else {
                    (d * (residual.abs() - half * d), d * residual.signum())
                }
            }
        }
    }
}

//! A fixed tiny perceptron used as a pointwise source-term correction.
//!
//! Architecture 2 -> 4 -> 4 -> 1 with tanh hidden activations and a linear
//! output: 37 parameters laid out as [W1 row-major, b1, W2 row-major, b2,
//! W3, b3]. The input is the offset of a field point from the source center,
//! so the same network corrects the source everywhere on the grid. Gradients
//! with respect to all 37 parameters are computed by hand-rolled reverse
//! accumulation and are exact for the implemented forward pass.

use nalgebra::DVector;

use crate::{CoreError, Result};

const IN: usize = 2;
const HIDDEN: usize = 4;

/// Total parameter count of the 2-4-4-1 network.
pub const MLP_PARAM_COUNT: usize = IN * HIDDEN + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN + 1;

const W1: usize = 0;
const B1: usize = W1 + IN * HIDDEN;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + HIDDEN;

/// The correction network's parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCorrection {
    w: DVector<f64>,
}

impl MlpCorrection {
    pub fn new(weights: DVector<f64>) -> Result<Self> {
        if weights.len() != MLP_PARAM_COUNT {
            return Err(CoreError::DimensionMismatch {
                context: "MlpCorrection::new",
                expected: format!("{MLP_PARAM_COUNT} weights"),
                got: format!("{}", weights.len()),
            });
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidParameter {
                name: "weights",
                reason: "non-finite network weight".into(),
            });
        }
        Ok(Self { w: weights })
    }

    /// All-zero network: evaluates to zero everywhere.
    pub fn zeros() -> Self {
        Self {
            w: DVector::zeros(MLP_PARAM_COUNT),
        }
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.w
    }

    /// Network output at offset (dx, dy).
    pub fn eval(&self, dx: f64, dy: f64) -> f64 {
        let w = &self.w;
        let mut h1 = [0.0f64; HIDDEN];
        for i in 0..HIDDEN {
            h1[i] = (w[W1 + i * IN] * dx + w[W1 + i * IN + 1] * dy + w[B1 + i]).tanh();
        }
        let mut h2 = [0.0f64; HIDDEN];
        for i in 0..HIDDEN {
            let mut z = w[B2 + i];
            for j in 0..HIDDEN {
                z += w[W2 + i * HIDDEN + j] * h1[j];
            }
            h2[i] = z.tanh();
        }
        let mut out = w[B3];
        for j in 0..HIDDEN {
            out += w[W3 + j] * h2[j];
        }
        out
    }

    /// Output and its exact gradient with respect to all 37 parameters.
    pub fn eval_and_grad(&self, dx: f64, dy: f64) -> (f64, DVector<f64>) {
        let w = &self.w;
        let x = [dx, dy];
        let mut h1 = [0.0f64; HIDDEN];
        for i in 0..HIDDEN {
            h1[i] = (w[W1 + i * IN] * dx + w[W1 + i * IN + 1] * dy + w[B1 + i]).tanh();
        }
        let mut h2 = [0.0f64; HIDDEN];
        for i in 0..HIDDEN {
            let mut z = w[B2 + i];
            for j in 0..HIDDEN {
                z += w[W2 + i * HIDDEN + j] * h1[j];
            }
            h2[i] = z.tanh();
        }
        let mut out = w[B3];
        for j in 0..HIDDEN {
            out += w[W3 + j] * h2[j];
        }

        let mut grad = DVector::zeros(MLP_PARAM_COUNT);
        grad[B3] = 1.0;
        for j in 0..HIDDEN {
            grad[W3 + j] = h2[j];
        }
        // delta2 = W3 .* (1 - h2^2), delta1 = W2' delta2 .* (1 - h1^2)
        let mut delta2 = [0.0f64; HIDDEN];
        for i in 0..HIDDEN {
            delta2[i] = w[W3 + i] * (1.0 - h2[i] * h2[i]);
            grad[B2 + i] = delta2[i];
            for j in 0..HIDDEN {
                grad[W2 + i * HIDDEN + j] = delta2[i] * h1[j];
            }
        }
        for j in 0..HIDDEN {
            let mut back = 0.0;
            for i in 0..HIDDEN {
                back += w[W2 + i * HIDDEN + j] * delta2[i];
            }
            let delta1 = back * (1.0 - h1[j] * h1[j]);
            grad[B1 + j] = delta1;
            for k in 0..IN {
                grad[W1 + j * IN + k] = delta1 * x[k];
            }
        }
        (out, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::RngStream;

    #[test]
    fn parameter_count_is_37() {
        assert_eq!(MLP_PARAM_COUNT, 37);
    }

    #[test]
    fn zero_network_has_unit_output_bias_gradient() {
        let net = MlpCorrection::zeros();
        let (value, grad) = net.eval_and_grad(0.3, -0.7);
        assert_eq!(value, 0.0);
        let mut expected = DVector::zeros(MLP_PARAM_COUNT);
        expected[MLP_PARAM_COUNT - 1] = 1.0;
        assert_eq!(grad, expected);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let stream = RngStream::new(2024, 0);
        let weights = stream.standard_normals(MLP_PARAM_COUNT) * 0.5;
        let net = MlpCorrection::new(weights.clone()).unwrap();
        let (dx, dy) = (0.42, -1.3);
        let (_, grad) = net.eval_and_grad(dx, dy);
        let h = 1e-5;
        for k in 0..MLP_PARAM_COUNT {
            let mut plus = weights.clone();
            plus[k] += h;
            let mut minus = weights.clone();
            minus[k] -= h;
            let fd = (MlpCorrection::new(plus).unwrap().eval(dx, dy)
                - MlpCorrection::new(minus).unwrap().eval(dx, dy))
                / (2.0 * h);
            let scale = grad[k].abs().max(1.0);
            assert!(
                (grad[k] - fd).abs() / scale < 1e-8,
                "component {k}: exact {} vs fd {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn eval_agrees_with_eval_and_grad() {
        let stream = RngStream::new(7, 1);
        let net = MlpCorrection::new(stream.standard_normals(MLP_PARAM_COUNT)).unwrap();
        let (v, _) = net.eval_and_grad(1.1, 0.2);
        assert_eq!(net.eval(1.1, 0.2), v);
    }
}

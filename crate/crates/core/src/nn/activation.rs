//! Pointwise activations shared by the adapter and convolution layers.

use serde::{Deserialize, Serialize};

/// GELU tanh-approximation constant `sqrt(2 / pi)`.
const GELU_SCALE: f64 = 0.7978845608028654;
/// Cubic coefficient of the tanh approximation.
const GELU_CUBIC: f64 = 0.044715;

/// Pointwise nonlinearity. `Gelu` uses the tanh form
/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Gelu => {
                let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    /// Exact derivative of [`Activation::apply`] at `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Gelu => {
                let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                let du = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + t) + 0.5 * x * sech2 * du
            }
        }
    }
}

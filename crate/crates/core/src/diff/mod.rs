//! First and second derivatives of the loss with respect to inputs and weights.
//!
//! First derivatives are exact reverse-mode. Second derivatives are finite
//! differences: of the analytic gradient for Hessian-vector products, full
//! Hessians and input Hessians; of the loss itself for weight-Hessian
//! diagonals, where a single weight perturbation is propagated through the
//! cached forward pass instead of re-running the whole network.

mod backprop;
mod hessian;
mod spectrum;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::matrix::{norm2, Matrix};
use crate::net::Network;
use crate::{Error, Result};

pub(crate) use backprop::{batch_loss, batch_loss_and_gradient, Tape};
pub use hessian::{
    full_weight_hessian, full_weight_hessian_capped, hvp_weights, input_hessian,
    input_hessian_capped, weight_hessian_diag, InputHessian, LayerDiag, LayerFilter, WeightHessian,
    WeightHessianDiag, INPUT_HESSIAN_CAP, WEIGHT_HESSIAN_CAP,
};
pub use spectrum::{default_index_tolerance, spectrum, symmetric_eigenvalues, SpectrumReport};

/// Pointwise loss of the residual `r = ŷ - y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

impl LossKind {
    #[inline]
    pub fn value(self, r: f64) -> f64 {
        match self {
            LossKind::Mse => r * r,
            LossKind::Mae => r.abs(),
        }
    }

    /// dℓ/dr; the absolute loss uses 0 at r = 0.
    #[inline]
    pub fn derivative(self, r: f64) -> f64 {
        match self {
            LossKind::Mse => 2.0 * r,
            LossKind::Mae => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `ℓ(r + d) - ℓ(r)` without cancelling the two large terms.
    #[inline]
    pub(crate) fn increment(self, r: f64, d: f64) -> f64 {
        match self {
            LossKind::Mse => d * (d + 2.0 * r),
            LossKind::Mae => (r + d).abs() - r.abs(),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            other => Err(Error::invalid(format!("unknown loss `{other}`"))),
        }
    }
}

/// Batch-mean weight gradient, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GradW {
    layers: Vec<Matrix>,
}

impl GradW {
    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    /// Flattened in the network's vectorization order.
    pub fn to_vector(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.to_vector())
    }
}

/// Exact gradient of the batch-mean loss with respect to every weight.
pub fn grad_weights(net: &Network, batch: &[crate::data::Sample], loss: LossKind) -> Result<GradW> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_inputs(net, batch)?;
    let mut flat = vec![0.0; net.parameter_count()];
    let mut tape = Tape::new(net);
    batch_loss_and_gradient(net, batch.iter(), batch.len(), loss, &mut tape, &mut flat);
    let mut start = 0;
    let layers = net
        .layers()
        .iter()
        .map(|m| {
            let n = m.len();
            let g = Matrix::from_vec(m.rows(), m.cols(), flat[start..start + n].to_vec());
            start += n;
            g
        })
        .collect();
    Ok(GradW { layers })
}

/// ∇ₓ ℓ(ŷ(x) − y) at a single sample.
pub fn grad_input(net: &Network, x: &[f64], y: f64, loss: LossKind) -> Result<Vec<f64>> {
    check_len(net, x)?;
    let mut tape = Tape::new(net);
    let out = tape.forward(net, x);
    let mut gx = vec![0.0; x.len()];
    tape.backward(net, loss.derivative(out - y), None, Some(&mut gx));
    Ok(gx)
}

/// ∂ŷ/∂xᵢ: derivative of the network output (not the loss).
pub fn input_jacobian(net: &Network, x: &[f64]) -> Result<Vec<f64>> {
    check_len(net, x)?;
    let mut tape = Tape::new(net);
    tape.forward(net, x);
    let mut gx = vec![0.0; x.len()];
    tape.backward(net, 1.0, None, Some(&mut gx));
    Ok(gx)
}

pub(crate) fn check_len(net: &Network, x: &[f64]) -> Result<()> {
    if x.len() != net.input_width() {
        return Err(Error::LengthMismatch {
            expected: net.input_width(),
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input"));
    }
    Ok(())
}

pub(crate) fn check_inputs(net: &Network, batch: &[crate::data::Sample]) -> Result<()> {
    batch.iter().try_for_each(|s| check_len(net, &s.x))
}

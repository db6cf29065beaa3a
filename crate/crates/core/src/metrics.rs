//! Losses and the curvature summaries reported for every trained network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Sample, WindowedDataset};
use crate::diff::{
    check_inputs, hvp_weights, input_hessian, input_jacobian, weight_hessian_diag, LayerFilter, LossKind,
};
use crate::matrix::{dot, norm2};
use crate::net::Network;
use crate::{Error, Result, EPS_FLOOR};

fn non_empty(slice: &[Sample]) -> Result<()> {
    if slice.is_empty() {
        Err(Error::EmptyBatch)
    } else {
        Ok(())
    }
}

/// Mean pointwise loss over the slice.
pub fn loss(net: &Network, slice: &[Sample], kind: LossKind) -> Result<f64> {
    non_empty(slice)?;
    check_inputs(net, slice)?;
    Ok(crate::diff::batch_loss(net, slice.iter(), slice.len(), kind))
}

/// `(1/N) Σ Tr H^x(xᵢ)`.
pub fn mean_input_hessian_trace(net: &Network, slice: &[Sample], kind: LossKind) -> Result<f64> {
    non_empty(slice)?;
    let mut sum = 0.0;
    for s in slice {
        sum += input_hessian(net, &s.x, s.y, kind)?.trace();
    }
    Ok(sum / slice.len() as f64)
}

/// `(1/N) Σ ‖∂ŷ/∂x(xᵢ)‖₂`.
pub fn mean_jacobian_frobenius(net: &Network, slice: &[Sample]) -> Result<f64> {
    non_empty(slice)?;
    let mut sum = 0.0;
    for s in slice {
        sum += norm2(&input_jacobian(net, &s.x)?);
    }
    Ok(sum / slice.len() as f64)
}

/// `ŵᵀ H^w ŵ` from a single Hessian-vector product along the weights.
pub fn scaled_quadform(net: &Network, batch: &[Sample], kind: LossKind) -> Result<f64> {
    non_empty(batch)?;
    let w = net.to_vector();
    if w.iter().all(|&v| v == 0.0) {
        check_inputs(net, batch)?;
        return Ok(0.0);
    }
    let hw = hvp_weights(net, batch, kind, &w)?;
    Ok(dot(&w, &hw))
}

/// Fraction of pairs whose predicted sign matches the target sign, with
/// `sign(0) = +1`.
pub fn hit_rate(net: &Network, slice: &[Sample]) -> Result<f64> {
    non_empty(slice)?;
    check_inputs(net, slice)?;
    let up = |v: f64| v >= 0.0;
    let hits = slice.iter().filter(|s| up(net.predict(&s.x)) == up(s.y)).count();
    Ok(hits as f64 / slice.len() as f64)
}

/// Monte-Carlo loss increase under input noise against its second-order
/// prediction from the input-Hessian trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub delta_hat: f64,
    pub trace_prediction: f64,
    pub relative_gap: f64,
}

/// Estimates `δ = E[L(x + αε)] − L(x)` with `ε ~ N(0, I)` and compares it to
/// `(α²/2) · mean Tr H^x`.
///
/// Each draw is used antithetically, `(ℓ(x+αε) + ℓ(x−αε))/2 − ℓ(x)`, which
/// has the same expectation and cancels the first-order term exactly.
pub fn noise_robustness_probe(
    net: &Network,
    slice: &[Sample],
    kind: LossKind,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Result<ProbeRecord> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("noise scale must be positive, got {alpha}")));
    }
    if draws == 0 {
        return Err(Error::invalid("draws must be at least 1"));
    }
    non_empty(slice)?;
    check_inputs(net, slice)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = net.input_width();
    let mut eps = vec![0.0; n0];
    let mut plus = vec![0.0; n0];
    let mut minus = vec![0.0; n0];
    let mut total = 0.0;
    for s in slice {
        let base = kind.value(net.predict(&s.x) - s.y);
        let mut acc = 0.0;
        for _ in 0..draws {
            eps.iter_mut().for_each(|e| *e = StandardNormal.sample(&mut rng));
            for i in 0..n0 {
                plus[i] = s.x[i] + alpha * eps[i];
                minus[i] = s.x[i] - alpha * eps[i];
            }
            let lp = kind.value(net.predict(&plus) - s.y);
            let lm = kind.value(net.predict(&minus) - s.y);
            acc += 0.5 * (lp + lm) - base;
        }
        total += acc / draws as f64;
    }
    let delta_hat = total / slice.len() as f64;
    let trace_prediction = 0.5 * alpha * alpha * mean_input_hessian_trace(net, slice, kind)?;
    let relative_gap = (delta_hat - trace_prediction).abs() / trace_prediction.abs().max(EPS_FLOOR);
    Ok(ProbeRecord {
        delta_hat,
        trace_prediction,
        relative_gap,
    })
}

/// The same probe with the jitter scale `σ` as the noise level.
pub fn jitter_regularizer_check(
    net: &Network,
    slice: &[Sample],
    kind: LossKind,
    sigma: f64,
    draws: usize,
    seed: u64,
) -> Result<ProbeRecord> {
    noise_robustness_probe(net, slice, kind, sigma, draws, seed)
}

/// Which optional metrics to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricToggles {
    pub input_hessian: bool,
    pub jacobian: bool,
    pub weight_hessian: bool,
    pub scaled_quadform: bool,
    /// Only meaningful when targets are returns.
    pub hit_rate: bool,
}

impl Default for MetricToggles {
    fn default() -> Self {
        Self {
            input_hessian: true,
            jacobian: true,
            weight_hessian: true,
            scaled_quadform: true,
            hit_rate: true,
        }
    }
}

/// Metrics of one trained network. Curvature quantities are taken over the
/// training slice; the hit rate over the test slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub train_loss: f64,
    pub test_loss: f64,
    /// `test_loss − train_loss`.
    pub gap: f64,
    pub tr_input_hessian: Option<f64>,
    pub jacobian_frobenius: Option<f64>,
    pub tr_weight_hessian_total: Option<f64>,
    /// One entry per weight layer when the weight Hessian is enabled, else empty.
    pub tr_weight_hessian_per_layer: Vec<f64>,
    pub scaled_quadform: Option<f64>,
    pub hit_rate: Option<f64>,
}

impl MetricsReport {
    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        [self.train_loss, self.test_loss, self.gap]
            .into_iter()
            .chain(self.tr_input_hessian)
            .chain(self.jacobian_frobenius)
            .chain(self.tr_weight_hessian_total)
            .chain(self.tr_weight_hessian_per_layer.iter().copied())
            .chain(self.scaled_quadform)
            .chain(self.hit_rate)
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// Compute every enabled metric. `returns` marks targets that are returns,
/// which is when the hit rate is defined.
pub fn evaluate(
    net: &Network,
    data: &WindowedDataset,
    kind: LossKind,
    toggles: MetricToggles,
    returns: bool,
) -> Result<MetricsReport> {
    let train = data.train();
    let test = data.test();
    let train_loss = loss(net, train, kind)?;
    let test_loss = loss(net, test, kind)?;
    let tr_input_hessian = toggles
        .input_hessian
        .then(|| mean_input_hessian_trace(net, train, kind))
        .transpose()?;
    let jacobian_frobenius = toggles
        .jacobian
        .then(|| mean_jacobian_frobenius(net, train))
        .transpose()?;
    let diag = toggles
        .weight_hessian
        .then(|| weight_hessian_diag(net, train, kind, &LayerFilter::All))
        .transpose()?;
    let scaled = toggles
        .scaled_quadform
        .then(|| scaled_quadform(net, train, kind))
        .transpose()?;
    let hit = (toggles.hit_rate && returns).then(|| hit_rate(net, test)).transpose()?;
    let report = MetricsReport {
        train_loss,
        test_loss,
        gap: test_loss - train_loss,
        tr_input_hessian,
        jacobian_frobenius,
        tr_weight_hessian_total: diag.as_ref().map(|d| d.total),
        tr_weight_hessian_per_layer: diag
            .map(|d| d.layers.iter().map(|l| l.trace).collect())
            .unwrap_or_default(),
        scaled_quadform: scaled,
        hit_rate: hit,
    };
    if !report.all_finite() {
        return Err(Error::NonFinite("metrics report"));
    }
    Ok(report)
}

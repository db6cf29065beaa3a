use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::diff::{batch_loss_and_gradient, check_inputs, check_len, LossKind, Tape};
use crate::matrix::{dot, norm2, Matrix};
use crate::net::Network;
use crate::{Error, Result, EPS_FLOOR};

/// Largest input width for which input Hessians are materialized.
pub const INPUT_HESSIAN_CAP: usize = 64;
/// Largest parameter count for which the full weight Hessian is materialized.
pub const WEIGHT_HESSIAN_CAP: usize = 2000;

/// Step scale for differences of an analytic gradient: ε^{1/3}.
fn gradient_step_scale() -> f64 {
    f64::EPSILON.cbrt()
}

/// Step scale for second differences of the loss itself: ε^{1/4}.
fn loss_step_scale() -> f64 {
    f64::EPSILON.sqrt().sqrt()
}

/// Per-sample input Hessian of the loss, symmetrized.
#[derive(Debug, Clone, PartialEq)]
pub struct InputHessian {
    pub matrix: Matrix,
    /// `max|H - Hᵀ|` before symmetrization.
    pub asymmetry: f64,
}

impl InputHessian {
    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
}

pub fn input_hessian(net: &Network, x: &[f64], y: f64, loss: LossKind) -> Result<InputHessian> {
    input_hessian_capped(net, x, y, loss, INPUT_HESSIAN_CAP)
}

/// Central differences of the analytic input gradient, column by column.
pub fn input_hessian_capped(
    net: &Network,
    x: &[f64],
    y: f64,
    loss: LossKind,
    cap: usize,
) -> Result<InputHessian> {
    check_len(net, x)?;
    let n = x.len();
    if n > cap {
        return Err(Error::Capacity {
            what: "input Hessian",
            size: n,
            cap,
            hint: "reduce the window or raise the cap",
        });
    }
    let mut tape = Tape::new(net);
    let mut xs = x.to_vec();
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    let grad = |tape: &mut Tape, xs: &[f64], out: &mut [f64]| {
        let r = tape.forward(net, xs) - y;
        tape.backward(net, loss.derivative(r), None, Some(out));
    };
    let mut matrix = Matrix::zeros(n, n);
    for j in 0..n {
        let h = gradient_step_scale() * (1.0 + x[j].abs());
        xs[j] = x[j] + h;
        grad(&mut tape, &xs, &mut gp);
        xs[j] = x[j] - h;
        grad(&mut tape, &xs, &mut gm);
        xs[j] = x[j];
        let inv = 1.0 / (2.0 * h);
        for i in 0..n {
            matrix[(i, j)] = (gp[i] - gm[i]) * inv;
        }
    }
    let asymmetry = matrix.max_asymmetry();
    matrix.symmetrize();
    if !matrix.all_finite() {
        return Err(Error::NonFinite("input Hessian"));
    }
    Ok(InputHessian { matrix, asymmetry })
}

/// Batch gradient evaluated at a different weight vector, reusing buffers.
struct GradientProbe<'a> {
    net: Network,
    batch: &'a [Sample],
    loss: LossKind,
    tape: Tape,
}

impl<'a> GradientProbe<'a> {
    fn new(net: &Network, batch: &'a [Sample], loss: LossKind) -> Self {
        Self {
            net: net.clone(),
            batch,
            loss,
            tape: Tape::new(net),
        }
    }

    fn gradient(&mut self, w: &[f64], out: &mut [f64]) {
        self.net.set_from_vector(w).expect("same shape");
        batch_loss_and_gradient(
            &self.net,
            self.batch.iter(),
            self.batch.len(),
            self.loss,
            &mut self.tape,
            out,
        );
    }
}

/// `H^w v ≈ (g(w + hv) − g(w − hv)) / 2h`, `h = ε^{1/3}(1 + ‖w‖)/‖v‖`.
pub fn hvp_weights(net: &Network, batch: &[Sample], loss: LossKind, v: &[f64]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_inputs(net, batch)?;
    let d = net.parameter_count();
    if v.len() != d {
        return Err(Error::LengthMismatch {
            expected: d,
            got: v.len(),
        });
    }
    let v_norm = norm2(v);
    if !(v_norm > 0.0) || !v_norm.is_finite() {
        return Err(Error::ZeroDirection);
    }
    let w = net.to_vector();
    let h = gradient_step_scale() * (1.0 + norm2(&w)) / v_norm;
    let mut probe = GradientProbe::new(net, batch, loss);
    let shifted = |sign: f64| -> Vec<f64> { w.iter().zip(v).map(|(wi, vi)| wi + sign * h * vi).collect() };
    let mut gp = vec![0.0; d];
    let mut gm = vec![0.0; d];
    probe.gradient(&shifted(1.0), &mut gp);
    probe.gradient(&shifted(-1.0), &mut gm);
    let inv = 1.0 / (2.0 * h);
    Ok(gp.iter().zip(&gm).map(|(p, m)| (p - m) * inv).collect())
}

/// Dense weight Hessian with its pre-symmetrization residual.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightHessian {
    pub matrix: Matrix,
    /// `max|H − Hᵀ| / max|H|` before symmetrization.
    pub relative_asymmetry: f64,
}

pub fn full_weight_hessian(net: &Network, batch: &[Sample], loss: LossKind) -> Result<WeightHessian> {
    full_weight_hessian_capped(net, batch, loss, WEIGHT_HESSIAN_CAP)
}

/// Column `j` is `(g(w + h e_j) − g(w − h e_j)) / 2h`, `h = ε^{1/3}(1 + |w_j|)`.
pub fn full_weight_hessian_capped(
    net: &Network,
    batch: &[Sample],
    loss: LossKind,
    cap: usize,
) -> Result<WeightHessian> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_inputs(net, batch)?;
    let d = net.parameter_count();
    if d > cap {
        return Err(Error::Capacity {
            what: "weight Hessian",
            size: d,
            cap,
            hint: "use weight_hessian_diag or hvp_weights instead",
        });
    }
    let w0 = net.to_vector();
    let mut w = w0.clone();
    let mut probe = GradientProbe::new(net, batch, loss);
    let mut gp = vec![0.0; d];
    let mut gm = vec![0.0; d];
    let mut matrix = Matrix::zeros(d, d);
    for j in 0..d {
        let h = gradient_step_scale() * (1.0 + w0[j].abs());
        w[j] = w0[j] + h;
        probe.gradient(&w, &mut gp);
        w[j] = w0[j] - h;
        probe.gradient(&w, &mut gm);
        w[j] = w0[j];
        let inv = 1.0 / (2.0 * h);
        for i in 0..d {
            matrix[(i, j)] = (gp[i] - gm[i]) * inv;
        }
    }
    let relative_asymmetry = matrix.max_asymmetry() / matrix.max_abs().max(EPS_FLOOR);
    matrix.symmetrize();
    if !matrix.all_finite() {
        return Err(Error::NonFinite("weight Hessian"));
    }
    Ok(WeightHessian {
        matrix,
        relative_asymmetry,
    })
}

/// Which weight layers (zero-based) a diagonal computation covers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerFilter {
    #[default]
    All,
    Only(Vec<usize>),
}

impl LayerFilter {
    fn includes(&self, layer: usize) -> bool {
        match self {
            LayerFilter::All => true,
            LayerFilter::Only(v) => v.contains(&layer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiag {
    pub layer: usize,
    pub diagonal: Vec<f64>,
    pub trace: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHessianDiag {
    pub layers: Vec<LayerDiag>,
    /// Sum of the traces of the included layers.
    pub total: f64,
}

impl WeightHessianDiag {
    pub fn layer_trace(&self, layer: usize) -> Option<f64> {
        self.layers.iter().find(|l| l.layer == layer).map(|l| l.trace)
    }
}

/// Change of ŷ when the pre-activation of unit `unit` in weight layer `layer`
/// moves by `d`, everything else held at the cached forward pass.
fn output_increment(net: &Network, tape: &Tape, layer: usize, unit: usize, d: f64) -> f64 {
    let layers = net.layers();
    let last = layers.len() - 1;
    if layer == last {
        return d;
    }
    let f = net.activation();
    let da = f.increment(tape.pre[layer + 1][unit], d);
    if da == 0.0 {
        return 0.0;
    }
    let next = &layers[layer + 1];
    if layer + 1 == last {
        return next[(0, unit)] * da;
    }
    let mut dz: Vec<f64> = (0..next.rows()).map(|i| next[(i, unit)] * da).collect();
    let mut k = layer + 1;
    loop {
        let da: Vec<f64> = dz
            .iter()
            .zip(&tape.pre[k + 1])
            .map(|(&d, &z)| f.increment(z, d))
            .collect();
        let w = &layers[k + 1];
        if k + 1 == last {
            return dot(w.row(0), &da);
        }
        dz = w.mul_vec(&da);
        k += 1;
    }
}

/// Diagonal of the weight Hessian by second differences of the batch loss,
/// `h_ii ≈ (L(w + h e_i) − 2L(w) + L(w − h e_i)) / h²` with
/// `h = ε^{1/4}(1 + |w_i|)`.
///
/// Each perturbation only moves one unit's pre-activation, so the loss
/// change is propagated from that unit onwards through the cached pass and
/// accumulated as a per-sample increment rather than a difference of totals.
pub fn weight_hessian_diag(
    net: &Network,
    batch: &[Sample],
    loss: LossKind,
    filter: &LayerFilter,
) -> Result<WeightHessianDiag> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_inputs(net, batch)?;
    let layers = net.layers();
    let included: Vec<usize> = (0..layers.len()).filter(|&l| filter.includes(l)).collect();
    let steps: Vec<Vec<f64>> = included
        .iter()
        .map(|&l| {
            layers[l]
                .as_slice()
                .iter()
                .map(|w| loss_step_scale() * (1.0 + w.abs()))
                .collect()
        })
        .collect();
    let mut sums: Vec<Vec<f64>> = included.iter().map(|&l| vec![0.0; layers[l].len()]).collect();

    let mut tape = Tape::new(net);
    for s in batch {
        let r = tape.forward(net, &s.x) - s.y;
        for (slot, &l) in included.iter().enumerate() {
            let w = &layers[l];
            let input = &tape.acts[l];
            for unit in 0..w.rows() {
                for c in 0..w.cols() {
                    let idx = unit * w.cols() + c;
                    let d = steps[slot][idx] * input[c];
                    if d == 0.0 {
                        continue;
                    }
                    let up = output_increment(net, &tape, l, unit, d);
                    let down = output_increment(net, &tape, l, unit, -d);
                    sums[slot][idx] += loss.increment(r, up) + loss.increment(r, down);
                }
            }
        }
    }

    let inv_n = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let out = included
        .iter()
        .zip(sums)
        .zip(&steps)
        .map(|((&layer, sum), steps)| {
            let diagonal: Vec<f64> = sum
                .iter()
                .zip(steps)
                .map(|(s, h)| s * inv_n / (h * h))
                .collect();
            let trace = diagonal.iter().sum::<f64>();
            total += trace;
            LayerDiag {
                layer,
                diagonal,
                trace,
            }
        })
        .collect();
    if !total.is_finite() {
        return Err(Error::NonFinite("weight Hessian diagonal"));
    }
    Ok(WeightHessianDiag { layers: out, total })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diff::testutil::*;
    use crate::net::{Activation, Architecture};

    fn random_batch(n0: usize, count: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                Sample::new(
                    (0..n0).map(|_| rng.random_range(-1.5..1.5)).collect(),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    fn linear_net(w: &[f64]) -> Network {
        let arch = Architecture::new(w.len(), vec![], Activation::Linear).unwrap();
        Network::from_layers(arch, vec![Matrix::from_vec(1, w.len(), w.to_vec())]).unwrap()
    }

    fn tiny(act: Activation, seed: u64) -> Network {
        Network::init(Architecture::new(3, vec![4, 3], act).unwrap(), seed).unwrap()
    }

    /// Full Hessian by second differences of the loss (oracle, no gradients).
    fn oracle_weight_hessian(net: &Network, batch: &[Sample], loss: LossKind) -> Matrix {
        fd_hessian(|w| loss_at(net, w, batch, loss), &net.to_vector(), 1e-4)
    }

    #[test]
    fn linear_input_hessian_is_two_w_w_transpose() {
        let w = [0.5, -1.5, 2.0];
        let net = linear_net(&w);
        let h = input_hessian(&net, &[0.3, 0.1, -0.2], 1.0, LossKind::Mse).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((h.matrix[(i, j)] - 2.0 * w[i] * w[j]).abs() < 1e-8);
            }
        }
        assert!((h.trace() - 2.0 * (0.25 + 2.25 + 4.0)).abs() < 1e-8);
    }

    #[test]
    fn zero_tanh_net_input_hessian_vanishes() {
        let net = Network::zeros(Architecture::new(3, vec![5], Activation::Tanh).unwrap()).unwrap();
        let x = [0.4, -0.2, 0.9];
        let h = input_hessian(&net, &x, 0.8, LossKind::Mse).unwrap();
        let oracle = fd_hessian(|x| LossKind::Mse.value(net.predict(x) - 0.8), &x, 1e-3);
        assert_eq!(oracle.max_abs(), 0.0);
        assert_eq!(h.matrix.max_abs(), 0.0);
    }

    #[test]
    fn input_hessian_matches_second_differences() {
        let net = tiny(Activation::Tanh, 12);
        let x = [0.3, -0.8, 0.5];
        for loss in [LossKind::Mse, LossKind::Mae] {
            let h = input_hessian(&net, &x, 0.2, loss).unwrap();
            let oracle = fd_hessian(|x| loss.value(net.predict(x) - 0.2), &x, 1e-4);
            for (a, b) in h.matrix.as_slice().iter().zip(oracle.as_slice()) {
                assert!((a - b).abs() < 1e-4, "{loss}: {a} vs {b}");
            }
            assert!(h.asymmetry < 1e-6);
        }
    }

    #[test]
    fn input_hessian_cap() {
        let net = linear_net(&[1.0; 5]);
        assert!(matches!(
            input_hessian_capped(&net, &[0.0; 5], 0.0, LossKind::Mse, 4),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn hvp_rejects_zero_direction() {
        let net = tiny(Activation::Tanh, 1);
        let batch = random_batch(3, 4, 1);
        let v = vec![0.0; net.parameter_count()];
        assert!(matches!(
            hvp_weights(&net, &batch, LossKind::Mse, &v),
            Err(Error::ZeroDirection)
        ));
    }

    #[test]
    fn hvp_matches_full_oracle_hessian() {
        let net = tiny(Activation::Tanh, 3);
        let batch = random_batch(3, 6, 2);
        let d = net.parameter_count();
        assert!(d <= 50);
        let oracle = oracle_weight_hessian(&net, &batch, LossKind::Mse);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hv = hvp_weights(&net, &batch, LossKind::Mse, &v).unwrap();
        let expected = oracle.mul_vec(&v);
        let rel = norm2(&hv.iter().zip(&expected).map(|(a, b)| a - b).collect::<Vec<_>>())
            / norm2(&expected);
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn linear_model_hessians_are_exact() {
        let w = [0.4, -0.3, 0.8];
        let net = linear_net(&w);
        let batch = random_batch(3, 5, 9);
        let mut expected = Matrix::zeros(3, 3);
        for s in &batch {
            for i in 0..3 {
                for j in 0..3 {
                    expected[(i, j)] += 2.0 * s.x[i] * s.x[j] / 5.0;
                }
            }
        }
        let full = full_weight_hessian(&net, &batch, LossKind::Mse).unwrap();
        for (a, b) in full.matrix.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
        let v = [1.0, 2.0, -1.0];
        let hv = hvp_weights(&net, &batch, LossKind::Mse, &v).unwrap();
        for (a, b) in hv.iter().zip(expected.mul_vec(&v)) {
            assert!((a - b).abs() < 1e-8);
        }

        // single sample: trace = 2‖x‖²
        let one = &batch[..1];
        let diag = weight_hessian_diag(&net, one, LossKind::Mse, &LayerFilter::All).unwrap();
        let x2: f64 = one[0].x.iter().map(|v| v * v).sum();
        assert!((diag.total - 2.0 * x2).abs() < 1e-8 * (1.0 + x2));
    }

    #[test]
    fn diagonal_matches_full_oracle() {
        for act in [Activation::Tanh, Activation::Relu, Activation::Linear] {
            let net = tiny(act, 5);
            let batch = random_batch(3, 6, 7);
            for loss in [LossKind::Mse, LossKind::Mae] {
                if kink_distance(&net, &batch, loss) < 1e-2 {
                    continue;
                }
                let oracle = oracle_weight_hessian(&net, &batch, loss);
                let diag = weight_hessian_diag(&net, &batch, loss, &LayerFilter::All).unwrap();
                let flat: Vec<f64> = diag.layers.iter().flat_map(|l| l.diagonal.clone()).collect();
                let scale = oracle.max_abs().max(1e-3);
                for (i, got) in flat.iter().enumerate() {
                    let want = oracle[(i, i)];
                    assert!(rel_err(*got, want, scale) < 1e-3, "{act} {loss} [{i}] {got} vs {want}");
                }
                assert!((diag.total - oracle.trace()).abs() < 1e-3 * scale * flat.len() as f64);
            }
        }
    }

    #[test]
    fn inactive_weight_has_zero_curvature() {
        let net = tiny(Activation::Tanh, 8);
        let mut batch = random_batch(3, 4, 3);
        for s in &mut batch {
            s.x[1] = 0.0;
        }
        let diag = weight_hessian_diag(&net, &batch, LossKind::Mse, &LayerFilter::Only(vec![0])).unwrap();
        assert_eq!(diag.layers.len(), 1);
        let first = &diag.layers[0];
        for unit in 0..4 {
            assert_eq!(first.diagonal[unit * 3 + 1], 0.0);
        }
        let oracle = oracle_weight_hessian(&net, &batch, LossKind::Mse);
        assert!(oracle[(1, 1)].abs() < 1e-6);
        assert!(diag.layer_trace(1).is_none());
    }

    #[test]
    fn full_hessian_symmetry_and_cap() {
        let net = tiny(Activation::Tanh, 2);
        let batch = random_batch(3, 5, 5);
        let h = full_weight_hessian(&net, &batch, LossKind::Mse).unwrap();
        assert!(h.relative_asymmetry < 1e-6, "{}", h.relative_asymmetry);
        assert_eq!(h.matrix.max_asymmetry(), 0.0);
        let d = net.parameter_count();
        assert!(matches!(
            full_weight_hessian_capped(&net, &batch, LossKind::Mse, d - 1),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn hvp_of_basis_vector_matches_diagonal() {
        let net = tiny(Activation::Tanh, 6);
        let batch = random_batch(3, 5, 6);
        let diag = weight_hessian_diag(&net, &batch, LossKind::Mse, &LayerFilter::All).unwrap();
        let flat: Vec<f64> = diag.layers.iter().flat_map(|l| l.diagonal.clone()).collect();
        let scale = flat.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for i in 0..flat.len() {
            let mut e = vec![0.0; flat.len()];
            e[i] = 1.0;
            let hv = hvp_weights(&net, &batch, LossKind::Mse, &e).unwrap();
            assert!(rel_err(hv[i], flat[i], 1e-3 * scale) < 1e-3, "[{i}] {} vs {}", hv[i], flat[i]);
        }
    }

    #[test]
    fn relu_scaling_transforms_hessian() {
        let net = Network::init(Architecture::new(3, vec![5], Activation::Relu).unwrap(), 31).unwrap();
        let batch = random_batch(3, 8, 31);
        let h = full_weight_hessian(&net, &batch, LossKind::Mse).unwrap().matrix;
        let first = net.layers()[0].len();
        for alpha in [0.5, 2.0] {
            let scaled = net.alpha_scale(alpha, 0).unwrap();
            let hs = full_weight_hessian(&scaled, &batch, LossKind::Mse).unwrap().matrix;
            let dscale = |i: usize| if i < first { 1.0 / alpha } else { alpha };
            let scale = hs.max_abs();
            for i in 0..h.rows() {
                for j in 0..h.cols() {
                    let want = dscale(i) * h[(i, j)] * dscale(j);
                    assert!((hs[(i, j)] - want).abs() <= 1e-3 * scale, "alpha {alpha} ({i},{j})");
                }
            }
        }
    }
}

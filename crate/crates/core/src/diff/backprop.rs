use crate::data::Sample;
use crate::diff::LossKind;
use crate::net::Network;

/// Per-sample forward cache plus backward scratch space.
///
/// `acts[0]` is the input; `acts[k]` for `k ≥ 1` is the output of hidden
/// layer `k-1`, and `pre[k]` its pre-activation.
pub(crate) struct Tape {
    pub(crate) acts: Vec<Vec<f64>>,
    pub(crate) pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Tape {
    pub(crate) fn new(net: &Network) -> Self {
        let widths = net.architecture().widths();
        let hidden = &widths[..widths.len() - 1];
        let max = widths.iter().copied().max().unwrap_or(1);
        Self {
            acts: hidden.iter().map(|&w| vec![0.0; w]).collect(),
            pre: hidden.iter().map(|&w| vec![0.0; w]).collect(),
            delta: Vec::with_capacity(max),
            delta_prev: Vec::with_capacity(max),
        }
    }

    /// Evaluate the network, caching every layer. Returns ŷ.
    pub(crate) fn forward(&mut self, net: &Network, x: &[f64]) -> f64 {
        let f = net.activation();
        let layers = net.layers();
        self.acts[0].copy_from_slice(x);
        for (k, w) in layers[..layers.len() - 1].iter().enumerate() {
            let (before, after) = self.acts.split_at_mut(k + 1);
            let input = &before[k];
            let out = &mut after[0];
            let pre = &mut self.pre[k + 1];
            for i in 0..w.rows() {
                let z = crate::matrix::dot(w.row(i), input);
                pre[i] = z;
                out[i] = f.apply(z);
            }
        }
        let last = layers.last().expect("at least one layer");
        crate::matrix::dot(last.row(0), self.acts.last().expect("input activation"))
    }

    /// Back-propagate `seed = ∂L/∂ŷ` through the cached pass.
    ///
    /// Adds `seed · ∂ŷ/∂w` into `grad_w` (flat, vectorization order) and writes
    /// `seed · ∂ŷ/∂x` into `grad_x` when given.
    pub(crate) fn backward(
        &mut self,
        net: &Network,
        seed: f64,
        mut grad_w: Option<&mut [f64]>,
        grad_x: Option<&mut [f64]>,
    ) {
        let f = net.activation();
        let layers = net.layers();
        let n_layers = layers.len();
        let mut offset = net.parameter_count();

        self.delta.clear();
        self.delta.push(seed);
        for k in (0..n_layers).rev() {
            let w = &layers[k];
            let input = &self.acts[k];
            offset -= w.len();
            if let Some(g) = grad_w.as_deref_mut() {
                let g = &mut g[offset..offset + w.len()];
                for (i, &d) in self.delta.iter().enumerate() {
                    if d != 0.0 {
                        let row = &mut g[i * w.cols()..(i + 1) * w.cols()];
                        for (gij, &a) in row.iter_mut().zip(input) {
                            *gij += d * a;
                        }
                    }
                }
            }
            if k == 0 && grad_x.is_none() {
                break;
            }
            // δ_prev = Wᵀ δ, then through f' unless we reached the input.
            self.delta_prev.clear();
            self.delta_prev.resize(w.cols(), 0.0);
            for (i, &d) in self.delta.iter().enumerate() {
                if d != 0.0 {
                    for (p, &wij) in self.delta_prev.iter_mut().zip(w.row(i)) {
                        *p += wij * d;
                    }
                }
            }
            if k > 0 {
                for ((p, &z), &a) in self.delta_prev.iter_mut().zip(&self.pre[k]).zip(&self.acts[k]) {
                    *p *= f.derivative_cached(z, a);
                }
            }
            std::mem::swap(&mut self.delta, &mut self.delta_prev);
        }
        if let Some(gx) = grad_x {
            gx.copy_from_slice(&self.delta);
        }
    }
}

/// Accumulate the gradient of the mean loss over `count` samples into `grad`
/// (which is overwritten). Returns the mean loss.
pub(crate) fn batch_loss_and_gradient<'a>(
    net: &Network,
    batch: impl Iterator<Item = &'a Sample>,
    count: usize,
    loss: LossKind,
    tape: &mut Tape,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    for s in batch {
        let r = tape.forward(net, &s.x) - s.y;
        total += loss.value(r);
        tape.backward(net, scale * loss.derivative(r), Some(grad), None);
    }
    // divided, not scaled, so the value matches `batch_loss` bit for bit
    total / count as f64
}

/// Mean loss without gradients.
pub(crate) fn batch_loss<'a>(
    net: &Network,
    batch: impl Iterator<Item = &'a Sample>,
    count: usize,
    loss: LossKind,
) -> f64 {
    batch.map(|s| loss.value(net.predict(&s.x) - s.y)).sum::<f64>() / count as f64
}

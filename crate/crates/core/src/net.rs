//! The bias-free fully-connected forecaster `ŷ(x, w)`.
//!
//! Hidden layers apply the activation; the output layer is linear so the
//! regression head is unbounded. Weights are vectorized layer-major, then
//! row-major within each layer, and every Hessian index in [`crate::diff`]
//! follows that order.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    /// f'(z); relu uses 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

impl Activation {
    /// f'(z) given the cached output `a = f(z)`; identical to `derivative(z)`.
    #[inline]
    pub(crate) fn derivative_cached(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            _ => self.derivative(z),
        }
    }

    /// `f(z + d) - f(z)`, evaluated without cancelling the two large terms.
    #[inline]
    pub(crate) fn increment(self, z: f64, d: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let td = d.tanh();
                td * (1.0 - t * t) / (1.0 + t * td)
            }
            Activation::Relu => (z + d).max(0.0) - z.max(0.0),
            Activation::Linear => d,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// Layer widths `n₀, n₁, …, n_{L-1}, 1` and the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_width: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(input_width: usize, hidden_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = Self {
            input_width,
            hidden_widths,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("all layer widths must be >= 1"));
        }
        Ok(())
    }

    /// `[n₀, n₁, …, 1]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_widths.len() + 2);
        w.push(self.input_width);
        w.extend_from_slice(&self.hidden_widths);
        w.push(1);
        w
    }

    /// Number of weight matrices `L`.
    pub fn layer_count(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// `(rows, cols)` of every weight matrix.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.widths().windows(2).map(|w| (w[1], w[0])).collect()
    }

    /// Total parameter count `d = Σ n_l n_{l-1}`.
    pub fn parameter_count(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// Variance rule for initial weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `N(0, 1/n_{l-1})`.
    #[default]
    FanIn,
    /// `N(0, 1/max(n_{l-1}, n_l))`: every layer of an equal-width net gets
    /// `1/N_width`, input and output layers included.
    Width,
}

impl InitScheme {
    fn variance(self, rows: usize, cols: usize) -> f64 {
        match self {
            InitScheme::FanIn => 1.0 / cols as f64,
            InitScheme::Width => 1.0 / rows.max(cols) as f64,
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::FanIn => "fan-in",
            InitScheme::Width => "width",
        })
    }
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fan-in" => Ok(InitScheme::FanIn),
            "width" => Ok(InitScheme::Width),
            other => Err(Error::invalid(format!("unknown init scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    architecture: Architecture,
    layers: Vec<Matrix>,
}

impl Network {
    /// Weights drawn i.i.d. `N(0, 1/n_{l-1})` (fan-in of each layer).
    pub fn init(architecture: Architecture, seed: u64) -> Result<Self> {
        Self::init_with(architecture, InitScheme::FanIn, seed)
    }

    pub fn init_with(architecture: Architecture, scheme: InitScheme, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = architecture
            .shapes()
            .into_iter()
            .map(|(rows, cols)| {
                let normal = Normal::new(0.0, scheme.variance(rows, cols).sqrt()).expect("positive sd");
                Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
            })
            .collect();
        Ok(Self {
            architecture,
            layers,
        })
    }

    pub fn zeros(architecture: Architecture) -> Result<Self> {
        architecture.validate()?;
        let layers = architecture
            .shapes()
            .into_iter()
            .map(|(r, c)| Matrix::zeros(r, c))
            .collect();
        Ok(Self {
            architecture,
            layers,
        })
    }

    pub fn from_layers(architecture: Architecture, layers: Vec<Matrix>) -> Result<Self> {
        architecture.validate()?;
        let net = Self {
            architecture,
            layers,
        };
        net.check_shapes()?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let shapes = self.architecture.shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::LengthMismatch {
                expected: shapes.len(),
                got: self.layers.len(),
            });
        }
        for ((r, c), m) in shapes.iter().zip(&self.layers) {
            if (*r, *c) != (m.rows(), m.cols()) {
                return Err(Error::invalid(format!(
                    "layer shape {}x{} does not match architecture {r}x{c}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if self.layers.iter().any(|m| !m.all_finite()) {
            return Err(Error::NonFinite("weights"));
        }
        Ok(())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn activation(&self) -> Activation {
        self.architecture.activation
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.architecture.input_width
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Matrix::len).sum()
    }

    /// Flat index range of each layer inside the vectorized weights.
    pub fn layer_offsets(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.layers
            .iter()
            .map(|m| {
                let r = start..start + m.len();
                start = r.end;
                r
            })
            .collect()
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        for m in &self.layers {
            v.extend_from_slice(m.as_slice());
        }
        v
    }

    pub fn set_from_vector(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.parameter_count() {
            return Err(Error::LengthMismatch {
                expected: self.parameter_count(),
                got: w.len(),
            });
        }
        let mut start = 0;
        for m in &mut self.layers {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&w[start..start + n]);
            start += n;
        }
        Ok(())
    }

    pub fn with_vector(&self, w: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_from_vector(w)?;
        Ok(out)
    }

    /// Add `step * direction` to the weights in place.
    pub(crate) fn axpy(&mut self, step: f64, direction: &[f64]) {
        let mut k = 0;
        for m in &mut self.layers {
            for w in m.as_mut_slice() {
                *w += step * direction[k];
                k += 1;
            }
        }
    }

    /// Network output for one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_width() {
            return Err(Error::LengthMismatch {
                expected: self.input_width(),
                got: x.len(),
            });
        }
        Ok(self.predict(x))
    }

    /// [`forward`](Self::forward) without the length check.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let f = self.activation();
        let (last, hidden) = self.layers.split_last().expect("at least one layer");
        let mut a = x.to_vec();
        for w in hidden {
            a = w.mul_vec(&a).into_iter().map(|z| f.apply(z)).collect();
        }
        crate::matrix::dot(last.row(0), &a)
    }

    /// Rescale `W^(layer) ← αW^(layer)` and `W^(layer+1) ← α⁻¹W^(layer+1)`.
    ///
    /// `layer` is zero-based and must name a hidden layer, whose relu output
    /// makes the product invariant.
    pub fn alpha_scale(&self, alpha: f64, layer: usize) -> Result<Self> {
        if self.activation() != Activation::Relu {
            return Err(Error::Activation(self.activation().to_string()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
        }
        if layer + 1 >= self.layers.len() {
            return Err(Error::invalid(format!(
                "layer {layer} has no successor in a {}-layer network",
                self.layers.len()
            )));
        }
        let mut out = self.clone();
        out.layers[layer].scale(alpha);
        out.layers[layer + 1].scale(1.0 / alpha);
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: Network = serde_json::from_str(s)?;
        net.architecture.validate()?;
        net.check_shapes()?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn arch(n0: usize, hidden: &[usize], f: Activation) -> Architecture {
        Architecture::new(n0, hidden.to_vec(), f).unwrap()
    }

    /// Straightforward re-implementation of the layer recurrence.
    fn reference_forward(net: &Network, x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        let n = net.layers().len();
        for (l, w) in net.layers().iter().enumerate() {
            let mut z = vec![0.0; w.rows()];
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    z[i] += w[(i, j)] * a[j];
                }
            }
            a = if l + 1 < n {
                z.iter().map(|&v| net.activation().apply(v)).collect()
            } else {
                z
            };
        }
        a[0]
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let net = Network::init(arch(100, &[100], Activation::Tanh), 3).unwrap();
        let w = net.layers()[0].as_slice();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var - 0.01).abs() < 0.002, "variance {var}");
        // output layer has fan-in 100 as well
        let w = net.layers()[1].as_slice();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 0.01).abs() < 0.005, "variance {var}");
    }

    #[test]
    fn width_init_uses_the_wider_side() {
        let net = Network::init_with(arch(5, &[400], Activation::Tanh), InitScheme::Width, 3).unwrap();
        for layer in net.layers() {
            let w = layer.as_slice();
            let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
            assert!((var - 1.0 / 400.0).abs() < 0.3 / 400.0, "variance {var}");
        }
        assert_eq!("width".parse::<InitScheme>().unwrap(), InitScheme::Width);
        assert_eq!(InitScheme::FanIn.to_string(), "fan-in");
        assert!("glorot".parse::<InitScheme>().is_err());
        let a = arch(3, &[4], Activation::Tanh);
        assert_eq!(Network::init(a.clone(), 2).unwrap(), Network::init_with(a, InitScheme::FanIn, 2).unwrap());
    }

    #[test]
    fn init_is_deterministic() {
        let a = arch(5, &[8, 4], Activation::Tanh);
        assert_eq!(Network::init(a.clone(), 9).unwrap(), Network::init(a.clone(), 9).unwrap());
        assert_ne!(Network::init(a.clone(), 9).unwrap(), Network::init(a, 10).unwrap());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = Network::zeros(arch(3, &[4, 4], Activation::Tanh)).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn linear_single_layer_is_dot_product() {
        let a = arch(3, &[], Activation::Linear);
        let net = Network::from_layers(a, vec![Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0])]).unwrap();
        assert_eq!(net.forward(&[2.0, 1.0, 0.25]).unwrap(), 0.5 * 2.0 - 1.0 + 0.5);
    }

    #[test]
    fn forward_matches_reference_and_is_nonlinear() {
        let net = Network::init(arch(4, &[6, 5], Activation::Tanh), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let y = net.forward(&x).unwrap();
        assert!((y - reference_forward(&net, &x)).abs() < 1e-14);
        let y2 = net.forward(&x2).unwrap();
        assert!((y2 - reference_forward(&net, &x2)).abs() < 1e-14);
        assert!((y2 - y).abs() > 1e-6);
        assert!((y2 - 2.0 * y).abs() > 1e-6, "tanh net should not be homogeneous");
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let net = Network::init(arch(3, &[2], Activation::Tanh), 0).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn alpha_scale_contract() {
        let relu = Network::init(arch(3, &[7], Activation::Relu), 4).unwrap();
        assert_eq!(relu.alpha_scale(1.0, 0).unwrap(), relu);
        let scaled = relu.alpha_scale(2.0, 0).unwrap();
        assert_eq!(scaled.layers()[0][(0, 0)], 2.0 * relu.layers()[0][(0, 0)]);
        assert!(matches!(relu.alpha_scale(0.0, 0), Err(Error::InvalidArgument(_))));
        assert!(relu.alpha_scale(2.0, 1).is_err());
        let tanh = Network::init(arch(3, &[7], Activation::Tanh), 4).unwrap();
        assert!(matches!(tanh.alpha_scale(2.0, 0), Err(Error::Activation(_))));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let net = Network::init(arch(5, &[9, 3], Activation::Relu), 77).unwrap();
        let back = Network::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
        for (a, b) in back.to_vector().iter().zip(net.to_vector()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn parameter_bookkeeping() {
        let a = arch(5, &[10, 4], Activation::Tanh);
        assert_eq!(a.parameter_count(), 5 * 10 + 10 * 4 + 4);
        let net = Network::init(a, 1).unwrap();
        assert_eq!(net.parameter_count(), 94);
        assert_eq!(net.layer_offsets(), vec![0..50, 50..90, 90..94]);
    }

    proptest! {
        #[test]
        fn relu_scaling_preserves_output(
            seed in 0u64..1000,
            alpha in 0.05f64..20.0,
            xs in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let net = Network::init(arch(4, &[6, 5], Activation::Relu), seed).unwrap();
            for layer in 0..2 {
                let scaled = net.alpha_scale(alpha, layer).unwrap();
                let a = net.forward(&xs).unwrap();
                let b = scaled.forward(&xs).unwrap();
                prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
            }
        }

        #[test]
        fn vectorization_round_trip(seed in 0u64..1000, noise in prop::collection::vec(-1.0f64..1.0, 94)) {
            let net = Network::init(arch(5, &[10, 4], Activation::Tanh), seed).unwrap();
            prop_assert_eq!(net.with_vector(&net.to_vector()).unwrap(), net.clone());
            let other = net.with_vector(&noise).unwrap();
            prop_assert_eq!(other.to_vector(), noise);
        }
    }
}

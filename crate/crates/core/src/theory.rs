//! Path-count Λ of an architecture and the expected entropy of a minimum at
//! a given loss level.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::net::Architecture;
use crate::{Error, Result};

/// Absolute tolerance of the log-potential quadrature.
pub const QUADRATURE_TOLERANCE: f64 = 1e-8;
/// Intervals narrower than this are never bisected again.
pub const INTERVAL_FLOOR: f64 = 1e-12;
const MAX_INTERVALS: usize = 10_000;

/// `Λ = (n₀ · n₁ ⋯ n_L)^{1/L}` over the `L` weight layers (output width 1).
pub fn lambda_from_arch(arch: &Architecture) -> f64 {
    let widths = arch.widths();
    let layers = arch.layer_count() as f64;
    let paths: f64 = widths.iter().map(|&w| w as f64).product();
    paths.powf(1.0 / layers)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyParams {
    pub lambda: f64,
    pub layers: usize,
    /// Probability that a path is active, in (0, 1).
    pub rho: f64,
    pub sigma: f64,
    pub loss_level: f64,
}

impl EntropyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 1.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must exceed 1, got {}", self.lambda)));
        }
        if self.layers < 2 {
            return Err(Error::invalid(format!("layers must be at least 2, got {}", self.layers)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::invalid(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !self.loss_level.is_finite() {
            return Err(Error::invalid("loss level must be finite"));
        }
        Ok(())
    }

    /// Location of the logarithmic singularity, `σ √(Λ/(Λ−1)) E/ρ`.
    pub fn t_star(&self) -> f64 {
        self.sigma * (self.lambda / (self.lambda - 1.0)).sqrt() * self.loss_level / self.rho
    }
}

/// The three summands of the expected entropy and their total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyBreakdown {
    /// `−(Λ−1) log ρ`.
    pub activity_term: f64,
    /// `((Λ−1)/2) log(Λ / (2(Λ−1)L(L−1)))`.
    pub depth_term: f64,
    /// `−(Λ−1) · potential`.
    pub potential_term: f64,
    /// `(1/π) ∫ log|t* − t| √(2 − t²) dt` over `[−√2, √2]`.
    pub potential: f64,
    pub t_star: f64,
    pub total: f64,
    /// Quadrature error bound carried into `total`.
    pub error_estimate: f64,
}

pub fn expected_entropy(params: &EntropyParams) -> Result<EntropyBreakdown> {
    params.validate()?;
    let l1 = params.lambda - 1.0;
    let layers = params.layers as f64;
    let activity_term = -l1 * params.rho.ln();
    let depth_term = 0.5 * l1 * (params.lambda / (2.0 * l1 * layers * (layers - 1.0))).ln();
    let t_star = params.t_star();
    let q = semicircle_log_potential(t_star, QUADRATURE_TOLERANCE)?;
    let potential_term = -l1 * q.value;
    Ok(EntropyBreakdown {
        activity_term,
        depth_term,
        potential_term,
        potential: q.value,
        t_star,
        total: activity_term + depth_term + potential_term,
        error_estimate: l1 * q.error,
    })
}

/// An integral value with its absolute error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
}

/// `(1/π) ∫_{−√2}^{√2} log|x − t| √(2 − t²) dt`, integrated in `θ` with
/// `t = √2 sin θ` and split at the singularity when `|x| ≤ √2`.
pub fn semicircle_log_potential(x: f64, tolerance: f64) -> Result<Quadrature> {
    if !x.is_finite() {
        return Err(Error::NonFinite("singularity location"));
    }
    if !(tolerance > 0.0) {
        return Err(Error::invalid("quadrature tolerance must be positive"));
    }
    let f = |theta: f64| {
        let c = theta.cos();
        let dist = (x - SQRT_2 * theta.sin()).abs();
        // A node landing exactly on the singularity is a null set.
        if dist == 0.0 {
            0.0
        } else {
            2.0 * c * c * dist.ln()
        }
    };
    // The integrand carries the 1/π factor outside, so scale the tolerance.
    let tol = tolerance * PI;
    let q = if x.abs() <= SQRT_2 {
        let split = (x / SQRT_2).asin();
        let left = adaptive_gauss_kronrod(f, -FRAC_PI_2, split, tol / 2.0);
        let right = adaptive_gauss_kronrod(f, split, FRAC_PI_2, tol / 2.0);
        Quadrature {
            value: left.value + right.value,
            error: left.error + right.error,
        }
    } else {
        adaptive_gauss_kronrod(f, -FRAC_PI_2, FRAC_PI_2, tol)
    };
    if !q.value.is_finite() {
        return Err(Error::NonFinite("log-potential quadrature"));
    }
    Ok(Quadrature {
        value: q.value / PI,
        error: q.error / PI,
    })
}

/// Closed form of [`semicircle_log_potential`] inside the support:
/// `log(R/2) + x²/R² − 1/2` with `R = √2`.
pub fn semicircle_log_potential_exact(x: f64) -> Option<f64> {
    (x.abs() <= SQRT_2).then(|| (SQRT_2 / 2.0).ln() + x * x / 2.0 - 0.5)
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
/// Gauss weights for the odd-indexed Kronrod nodes.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One G7-K15 panel: the Kronrod estimate and `|K15 − G7|`.
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> Quadrature {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XGK[i];
        let pair = f(c - dx) + f(c + dx);
        k += WGK[i] * pair;
        if i % 2 == 1 {
            g += WG[i / 2] * pair;
        }
    }
    Quadrature {
        value: k * h,
        error: ((k - g) * h).abs(),
    }
}

struct Panel {
    a: f64,
    b: f64,
    q: Quadrature,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.q.error == other.q.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.q.error.total_cmp(&other.q.error)
    }
}

/// Globally adaptive G7-K15: keep bisecting the panel with the largest error
/// until the summed error is below `tolerance`. Panels narrower than
/// [`INTERVAL_FLOOR`] are kept as they are.
pub fn adaptive_gauss_kronrod(f: impl Fn(f64) -> f64, a: f64, b: f64, tolerance: f64) -> Quadrature {
    if a == b {
        return Quadrature { value: 0.0, error: 0.0 };
    }
    let mut heap = BinaryHeap::new();
    let mut frozen = Quadrature { value: 0.0, error: 0.0 };
    heap.push(Panel { a, b, q: gk15(&f, a, b) });
    let total_error = |heap: &BinaryHeap<Panel>, frozen: &Quadrature| {
        frozen.error + heap.iter().map(|p| p.q.error).sum::<f64>()
    };
    let mut panels = 1;
    while total_error(&heap, &frozen) > tolerance && panels < MAX_INTERVALS {
        let Some(worst) = heap.pop() else { break };
        if worst.b - worst.a < INTERVAL_FLOOR {
            frozen.value += worst.q.value;
            frozen.error += worst.q.error;
            continue;
        }
        let mid = 0.5 * (worst.a + worst.b);
        heap.push(Panel {
            a: worst.a,
            b: mid,
            q: gk15(&f, worst.a, mid),
        });
        heap.push(Panel {
            a: mid,
            b: worst.b,
            q: gk15(&f, mid, worst.b),
        });
        panels += 1;
    }
    // Sum in position order so the result does not depend on heap layout.
    let mut rest: Vec<Panel> = heap.into_vec();
    rest.sort_by(|p, q| p.a.total_cmp(&q.a));
    rest.iter().fold(frozen, |acc, p| Quadrature {
        value: acc.value + p.q.value,
        error: acc.error + p.q.error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;

    /// Composite Simpson in θ on each side of the singularity, after
    /// `θ = θ* ± u²` removes the logarithm's blow-up.
    fn brute_potential(x: f64, n: usize) -> f64 {
        let g = |theta: f64| {
            let c = theta.cos();
            2.0 * c * c * (x - SQRT_2 * theta.sin()).abs().ln()
        };
        let simpson = |h: &dyn Fn(f64) -> f64, lo: f64, hi: f64| {
            let step = (hi - lo) / n as f64;
            let mut s = h(lo) + h(hi);
            for i in 1..n {
                s += h(lo + i as f64 * step) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * step / 3.0
        };
        let split = (x / SQRT_2).clamp(-1.0, 1.0).asin();
        // u = 0 sits on the singularity; 2u·log(...) → 0 there.
        let right = |u: f64| if u == 0.0 { 0.0 } else { g(split + u * u) * 2.0 * u };
        let left = |u: f64| if u == 0.0 { 0.0 } else { g(split - u * u) * 2.0 * u };
        let r = simpson(&right, 0.0, (FRAC_PI_2 - split).sqrt());
        let l = simpson(&left, 0.0, (split + FRAC_PI_2).sqrt());
        (r + l) / PI
    }

    fn params(e: f64) -> EntropyParams {
        EntropyParams {
            lambda: 4.0,
            layers: 2,
            rho: 0.5,
            sigma: 1.0,
            loss_level: e,
        }
    }

    #[test]
    fn lambda_examples() {
        let a = Architecture::new(4, vec![4], Activation::Relu).unwrap();
        assert!((lambda_from_arch(&a) - 4.0).abs() < 1e-14);
        let b = Architecture::new(2, vec![2, 2], Activation::Relu).unwrap();
        assert!((lambda_from_arch(&b) - 2.0).abs() < 1e-14);
        let c = Architecture::new(5, vec![500], Activation::Tanh).unwrap();
        assert!((lambda_from_arch(&c) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn potential_at_zero() {
        let want = -(1.0 + 2f64.ln()) / 2.0;
        let q = semicircle_log_potential(0.0, QUADRATURE_TOLERANCE).unwrap();
        assert!((q.value - want).abs() < 1e-8, "{q:?}");
        assert!((brute_potential(0.0, 200_000) - want).abs() < 1e-9);
        assert!((semicircle_log_potential_exact(0.0).unwrap() - want).abs() < 1e-15);
        assert!(q.error <= QUADRATURE_TOLERANCE);
    }

    #[test]
    fn potential_matches_brute_oracle_inside_and_outside() {
        for x in [-1.3, -0.4, 0.2, 0.9, 1.4142, 1.6, -3.0] {
            let q = semicircle_log_potential(x, QUADRATURE_TOLERANCE).unwrap();
            let brute = brute_potential(x, 200_000);
            assert!((q.value - brute).abs() < 1e-7, "x={x}: {} vs {brute}", q.value);
            if let Some(exact) = semicircle_log_potential_exact(x) {
                assert!((q.value - exact).abs() < 1e-8, "x={x}");
            }
        }
    }

    #[test]
    fn halving_tolerance_stays_within_error_estimate() {
        for x in [0.0, 0.7, 1.2, 2.5] {
            let coarse = semicircle_log_potential(x, 1e-8).unwrap();
            let fine = semicircle_log_potential(x, 5e-9).unwrap();
            assert!((coarse.value - fine.value).abs() <= coarse.error, "x={x}");
        }
    }

    #[test]
    fn entropy_at_zero_loss() {
        let b = expected_entropy(&params(0.0)).unwrap();
        let third = 3.0 * (1.0 + 2f64.ln()) / 2.0;
        assert!((b.potential_term - third).abs() < 1e-7);
        assert_eq!(b.activity_term, -3.0 * 0.5f64.ln());
        assert_eq!(b.depth_term, 1.5 * (4.0f64 / 12.0).ln());
        assert_eq!(b.total, b.activity_term + b.depth_term + b.potential_term);
    }

    #[test]
    fn entropy_symmetric_and_monotone() {
        let tmax = SQRT_2 * 0.5 / (4.0f64 / 3.0).sqrt();
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let e = tmax * i as f64 / 49.0;
            let plus = expected_entropy(&params(e)).unwrap().total;
            let minus = expected_entropy(&params(-e)).unwrap().total;
            assert!((plus - minus).abs() < 1e-10, "E={e}");
            assert!(plus <= prev + 1e-10, "E={e}");
            prev = plus;
        }
    }

    #[test]
    fn invalid_parameters() {
        for bad in [
            EntropyParams { lambda: 1.0, ..params(0.0) },
            EntropyParams { layers: 1, ..params(0.0) },
            EntropyParams { rho: 1.0, ..params(0.0) },
            EntropyParams { rho: 0.0, ..params(0.0) },
            EntropyParams { sigma: 0.0, ..params(0.0) },
            EntropyParams { loss_level: f64::NAN, ..params(0.0) },
        ] {
            assert!(expected_entropy(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn gauss_kronrod_integrates_polynomials_exactly() {
        let q = gk15(&|x: f64| x.powi(20) - 3.0 * x.powi(7), -1.0, 1.0);
        assert!((q.value - 2.0 / 21.0).abs() < 1e-15);
        let q = adaptive_gauss_kronrod(|x: f64| x.sqrt(), 0.0, 1.0, 1e-12);
        assert!((q.value - 2.0 / 3.0).abs() < 1e-12);
    }
}

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::{Error, Result};

const SYMMETRY_TOLERANCE: f64 = 1e-6;
const MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix in ascending order, plus the count of
/// strictly negative ones below `-tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    pub index: usize,
    pub tolerance: f64,
}

/// `1e-8 · (1 + |Tr H| / d)`.
pub fn default_index_tolerance(h: &Matrix) -> f64 {
    let d = h.rows().max(1) as f64;
    1e-8 * (1.0 + h.trace().abs() / d)
}

pub fn spectrum(h: &Matrix, tolerance: Option<f64>) -> Result<SpectrumReport> {
    let eigenvalues = symmetric_eigenvalues(h)?;
    let tolerance = tolerance.unwrap_or_else(|| default_index_tolerance(h));
    if !(tolerance >= 0.0) {
        return Err(Error::invalid("index tolerance must be non-negative"));
    }
    let index = eigenvalues.iter().filter(|&&l| l < -tolerance).count();
    Ok(SpectrumReport {
        eigenvalues,
        index,
        tolerance,
    })
}

/// Cyclic Jacobi rotations until the off-diagonal mass is below
/// `1e-10 · ‖H‖_F`. Eigenvalues only, ascending.
pub fn symmetric_eigenvalues(h: &Matrix) -> Result<Vec<f64>> {
    if !h.is_square() {
        return Err(Error::invalid(format!(
            "spectrum needs a square matrix, got {}x{}",
            h.rows(),
            h.cols()
        )));
    }
    if !h.all_finite() {
        return Err(Error::NonFinite("matrix"));
    }
    let scale = h.max_abs();
    let asym = h.max_asymmetry() / scale.max(crate::EPS_FLOOR);
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::Asymmetric(asym));
    }
    let n = h.rows();
    let mut a = h.clone();
    a.symmetrize();
    let target = 1e-10 * a.frobenius();

    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    for _ in 0..MAX_SWEEPS {
        if off(&a) <= target {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                // signum(0) = 1 picks the 45° rotation.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

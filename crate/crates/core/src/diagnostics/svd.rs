use crate::numerics::Tensor;
use crate::{Error, Result};

/// Sweep budget for [`singular_values`].
pub const MAX_SWEEPS: usize = 100;
/// Stop once the column Gram matrix's off-diagonal Frobenius norm falls
/// below this fraction of its trace.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Non-negative, non-increasing.
    pub values: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Singular values by one-sided (Hestenes) Jacobi rotations on the columns.
/// Wide matrices are transposed first so there are never more columns than
/// rows.
pub fn singular_values(a: &Tensor) -> Result<Spectrum> {
    if a.rank() != 2 {
        return Err(Error::Contract(format!(
            "expected a matrix, got shape {:?}",
            a.shape()
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite(
            "matrix handed to the SVD has non-finite entries".into(),
        ));
    }
    let (r, c) = (a.rows(), a.cols());
    // Column-major copy, oriented so that rows >= columns.
    let (m, n, mut cols) = if r >= c {
        (
            r,
            c,
            (0..c)
                .map(|j| (0..r).map(|i| a.at(i, j)).collect())
                .collect::<Vec<Vec<f64>>>(),
        )
    } else {
        (c, r, (0..r).map(|i| a.row(i).to_vec()).collect())
    };
    debug_assert!(cols.iter().all(|v| v.len() == m));

    let mut sweeps = 0;
    let mut converged = n < 2;
    while !converged && sweeps < MAX_SWEEPS {
        let (off, trace) = gram_mass(&cols);
        if trace == 0.0 || off <= OFF_DIAGONAL_TOL * trace {
            converged = true;
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut cols, p, q);
            }
        }
    }
    if !converged {
        let (off, trace) = gram_mass(&cols);
        converged = trace == 0.0 || off <= OFF_DIAGONAL_TOL * trace;
    }

    let mut values: Vec<f64> = cols
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    values.sort_by(|x, y| y.total_cmp(x));
    Ok(Spectrum {
        values,
        sweeps,
        converged,
    })
}

/// Off-diagonal Frobenius norm and trace of `AᵀA`.
fn gram_mass(cols: &[Vec<f64>]) -> (f64, f64) {
    let mut off = 0.0;
    let mut trace = 0.0;
    for (p, u) in cols.iter().enumerate() {
        trace += dot(u, u);
        for v in &cols[p + 1..] {
            let g = dot(u, v);
            off += 2.0 * g * g;
        }
    }
    (off.sqrt(), trace)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize) {
    let alpha = dot(&cols[p], &cols[p]);
    let beta = dot(&cols[q], &cols[q]);
    let gamma = dot(&cols[p], &cols[q]);
    if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
        return;
    }
    let zeta = (beta - alpha) / (2.0 * gamma);
    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = c * t;
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (u, v) = (*x, *y);
        *x = c * u - s * v;
        *y = s * u + c * v;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

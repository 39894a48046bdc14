//! Batch reference solver for
//!
//! ```text
//! min  1/2 a^T K~ a   s.t.  0 <= a_i <= C,  sum a_i = 1
//! ```
//!
//! Pairwise coordinate descent: each iteration takes the maximally violating
//! pair `(i, j)` (lowest gradient among coordinates that can grow, highest
//! among those that can shrink), moves mass from `j` to `i` by the exact
//! minimiser along that direction, and clips to the box. The pair choice and
//! summation order are fixed, so results are bitwise reproducible.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const MIN_CURVATURE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSolution {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `1/2 a^T K a`, summed row by row in index order.
pub fn objective(k: &DMatrix<f64>, alpha: &[f64]) -> f64 {
    quad_form(alpha, |i, j| k[(i, j)])
}

pub(crate) fn quad_form(alpha: &[f64], k: impl Fn(usize, usize) -> f64) -> f64 {
    let mut total = 0.0;
    for (i, &ai) in alpha.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for (j, &aj) in alpha.iter().enumerate() {
            if aj != 0.0 {
                row += k(i, j) * aj;
            }
        }
        total += ai * row;
    }
    0.5 * total
}

/// Cold-start solve.
pub fn solve_batch(k: &DMatrix<f64>, c: f64, tol: f64) -> Result<BatchSolution> {
    solve_batch_warm(k, c, tol, None)
}

/// Solve starting from `initial` (projected onto the feasible set) when given.
pub fn solve_batch_warm(
    k: &DMatrix<f64>,
    c: f64,
    tol: f64,
    initial: Option<&[f64]>,
) -> Result<BatchSolution> {
    let n = k.nrows();
    validate(k, c)?;
    let max_iters = 200usize.saturating_mul(n).saturating_mul(n).max(1000);

    let mut alpha = match initial {
        Some(a) if a.len() == n => project_feasible(a, c),
        Some(a) => {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: a.len(),
            })
        }
        None => uniform_start(n),
    };

    let mut grad = gradient(k, &alpha);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        let Some((i, j, gap)) = worst_pair(&alpha, &grad, c) else {
            converged = true;
            break;
        };
        if gap <= tol {
            converged = true;
            break;
        }
        let curvature = (k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)]).max(MIN_CURVATURE);
        let room_i = c - alpha[i];
        let room_j = alpha[j];
        let delta = (gap / curvature).min(room_i).min(room_j);
        alpha[i] = if delta == room_i { c } else { alpha[i] + delta };
        alpha[j] = if delta == room_j {
            0.0
        } else {
            alpha[j] - delta
        };
        let (ci, cj) = (k.column(i), k.column(j));
        for (t, g) in grad.iter_mut().enumerate() {
            *g += delta * (ci[t] - cj[t]);
        }
        iterations += 1;
    }

    let grad = gradient(k, &alpha);
    let rho = recover_rho(&alpha, &grad, c);
    let objective = objective(k, &alpha);
    Ok(BatchSolution {
        alpha,
        rho,
        objective,
        iterations,
        converged,
    })
}

fn validate(k: &DMatrix<f64>, c: f64) -> Result<()> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: k.ncols(),
        });
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!("C must be > 0, got {c}")));
    }
    let n_c = n as f64 * c;
    if n == 0 || n_c < 1.0 - 1e-12 {
        return Err(Error::InfeasibleProblem { n, c, n_c });
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = (k[(i, j)] - k[(j, i)]).abs();
            if diff > SYMMETRY_TOL || diff.is_nan() {
                return Err(Error::NotSymmetric { i, j, diff });
            }
        }
    }
    Ok(())
}

/// Uniform start `1/n`, feasible whenever `n C >= 1`.
fn uniform_start(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Clips to the box and redistributes the mass defect in index order.
fn project_feasible(a: &[f64], c: f64) -> Vec<f64> {
    let mut alpha: Vec<f64> = a.iter().map(|&v| v.clamp(0.0, c)).collect();
    let mut defect = 1.0 - alpha.iter().sum::<f64>();
    for v in alpha.iter_mut() {
        if defect.abs() <= 0.0 {
            break;
        }
        if defect > 0.0 {
            let take = (c - *v).min(defect);
            *v += take;
            defect -= take;
        } else {
            let take = (*v).min(-defect);
            *v -= take;
            defect += take;
        }
    }
    alpha
}

fn gradient(k: &DMatrix<f64>, alpha: &[f64]) -> Vec<f64> {
    let n = alpha.len();
    let mut g = vec![0.0; n];
    for (j, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            let col = k.column(j);
            for (t, gt) in g.iter_mut().enumerate() {
                *gt += col[t] * a;
            }
        }
    }
    g
}

/// `(i, j, G_j - G_i)` where `i` minimises the gradient over coordinates
/// below `C` and `j` maximises it over coordinates above 0. Ties go to the
/// lower index.
fn worst_pair(alpha: &[f64], grad: &[f64], c: f64) -> Option<(usize, usize, f64)> {
    let mut up: Option<usize> = None;
    let mut low: Option<usize> = None;
    for (t, (&a, &g)) in alpha.iter().zip(grad).enumerate() {
        if a < c && up.is_none_or(|i| g < grad[i]) {
            up = Some(t);
        }
        if a > 0.0 && low.is_none_or(|j| g > grad[j]) {
            low = Some(t);
        }
    }
    let (i, j) = (up?, low?);
    Some((i, j, grad[j] - grad[i]))
}

/// Mean gradient over free coordinates, or the midpoint of the feasible
/// interval `[max_E G, min_R G]` when none is free.
fn recover_rho(alpha: &[f64], grad: &[f64], c: f64) -> f64 {
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (&a, &g) in alpha.iter().zip(grad) {
        if a > 0.0 && a < c {
            free_sum += g;
            free_count += 1;
        } else if a >= c {
            lo = lo.max(g);
        } else {
            hi = hi.min(g);
        }
    }
    if free_count > 0 {
        free_sum / free_count as f64
    } else if hi.is_finite() && lo.is_finite() {
        0.5 * (lo + hi)
    } else if lo.is_finite() {
        lo
    } else {
        hi
    }
}

/// Largest KKT violation of `(alpha, rho)` under the coordinate-wise
/// classification `alpha = 0` / `0 < alpha < C` / `alpha = C`.
pub fn kkt_violation(k: &DMatrix<f64>, alpha: &[f64], rho: f64, c: f64) -> f64 {
    let g = gradient(k, alpha);
    alpha
        .iter()
        .zip(&g)
        .map(|(&a, &gi)| {
            let v = gi - rho;
            if a <= 0.0 {
                (-v).max(0.0)
            } else if a >= c {
                v.max(0.0)
            } else {
                v.abs()
            }
        })
        .fold(0.0, f64::max)
}

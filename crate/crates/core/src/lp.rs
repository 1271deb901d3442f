//! Small dense linear-programming solver.
//!
//! Solves `max c'x  s.t.  A x >= b` with free `x`, by running a two-phase
//! primal simplex (Bland's rule) on the dual. The problems this crate
//! generates are tiny in the variable dimension (factor space, d <= 3), so
//! the dual tableau has only a handful of rows regardless of how many
//! constraint rows the primal carries. No external solver dependency.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const TOL: f64 = 1e-9;

/// Outcome of `maximize`.
#[derive(Debug, Clone)]
pub enum LpOutcome {
    /// Finite optimum with an attaining point.
    Optimal { value: f64, x: DVector<f64> },
    /// The primal is infeasible; `certificate` lists rows of a Farkas
    /// witness: `y >= 0`, `A' y = 0`, `b' y > 0` supported on these rows.
    Infeasible { certificate: Vec<usize> },
    /// The objective is unbounded above (or the system is degenerate in a
    /// way the dual cannot separate). Callers here always bound their LPs,
    /// so this indicates a caller bug.
    Unbounded,
}

/// Maximize `c'x` subject to `A x >= b`, `x` free.
pub fn maximize(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<LpOutcome> {
    let (rows, n) = (a.nrows(), a.ncols());
    if c.len() != n || b.len() != rows {
        return Err(Error::Dimension {
            context: "lp operands".into(),
            expected: n,
            got: c.len(),
        });
    }
    // Dual: min (-b)'y  s.t.  A'y = -c, y >= 0. Strong duality gives the
    // primal optimum; a dual unbounded ray is a primal Farkas certificate.
    let a_d = a.transpose();
    let b_d = -c.clone();
    let c_d = -b.clone();
    match simplex_standard(&a_d, &b_d, &c_d)? {
        StdOutcome::Optimal { value, pi, .. } => Ok(LpOutcome::Optimal {
            value,
            x: -pi,
        }),
        StdOutcome::Unbounded { ray } => {
            let certificate: Vec<usize> = (0..rows).filter(|&i| ray[i] > TOL).collect();
            Ok(LpOutcome::Infeasible { certificate })
        }
        StdOutcome::Infeasible => Ok(LpOutcome::Unbounded),
    }
}

/// Is `A x >= b` feasible? On infeasibility returns the Farkas certificate rows.
pub fn feasibility(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<std::result::Result<(), Vec<usize>>> {
    let zero = DVector::zeros(a.ncols());
    match maximize(&zero, a, b)? {
        LpOutcome::Optimal { .. } => Ok(Ok(())),
        LpOutcome::Infeasible { certificate } => Ok(Err(certificate)),
        LpOutcome::Unbounded => Err(Error::Numerical(
            "feasibility probe reported unbounded".into(),
        )),
    }
}

/// Chebyshev center of `{x : A x >= b}`: the center of the largest inscribed
/// ball, radius capped at `r_cap` so unbounded regions still yield a point.
pub fn chebyshev_center(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    r_cap: f64,
) -> Result<(DVector<f64>, f64)> {
    let (rows, n) = (a.nrows(), a.ncols());
    // Variables (x, r): A x - ||a_i|| r >= b, r >= 0, -r >= -r_cap.
    let mut aa = DMatrix::zeros(rows + 2, n + 1);
    let mut bb = DVector::zeros(rows + 2);
    for i in 0..rows {
        let norm = a.row(i).norm();
        for j in 0..n {
            aa[(i, j)] = a[(i, j)];
        }
        aa[(i, n)] = -norm;
        bb[i] = b[i];
    }
    aa[(rows, n)] = 1.0;
    bb[rows] = 0.0;
    aa[(rows + 1, n)] = -1.0;
    bb[rows + 1] = -r_cap;
    let mut c = DVector::zeros(n + 1);
    c[n] = 1.0;
    match maximize(&c, &aa, &bb)? {
        LpOutcome::Optimal { value, x } => Ok((x.rows(0, n).into_owned(), value)),
        LpOutcome::Infeasible { certificate } => Err(Error::Infeasible {
            certificate: certificate.into_iter().filter(|&i| i < rows).collect(),
        }),
        LpOutcome::Unbounded => Err(Error::Numerical("chebyshev lp unbounded".into())),
    }
}

enum StdOutcome {
    Optimal {
        value: f64,
        /// Dual vector of the equality rows (one per row of `a`).
        pi: DVector<f64>,
    },
    Unbounded {
        /// Recession direction in the variables, entries >= 0.
        ray: DVector<f64>,
    },
    Infeasible,
}

/// Two-phase tableau simplex for `min c'z  s.t.  A z = b, z >= 0`.
///
/// The tableau keeps the artificial columns alive through phase 2 (barred
/// from re-entering) so that the final basis inverse, and with it the dual
/// vector, can be read off them.
fn simplex_standard(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DVector<f64>,
) -> Result<StdOutcome> {
    let m = a.nrows();
    let n = a.ncols();
    let total = n + m; // structural + artificial
    let mut t = DMatrix::zeros(m, total + 1);
    for i in 0..m {
        let flip = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[(i, j)] = flip * a[(i, j)];
        }
        t[(i, n + i)] = 1.0;
        t[(i, total)] = flip * b[i];
    }
    let mut basis: Vec<usize> = (n..total).collect();

    // Phase 1: minimize the sum of artificials.
    let phase1_cost = |j: usize| if j >= n { 1.0 } else { 0.0 };
    run_phase(&mut t, &mut basis, n, total, &phase1_cost, false)?;
    let p1: f64 = basis
        .iter()
        .enumerate()
        .map(|(i, &bj)| phase1_cost(bj) * t[(i, total)])
        .sum();
    if p1 > 1e-7 {
        return Ok(StdOutcome::Infeasible);
    }

    // Phase 2 over the real costs; artificials cost zero and cannot enter.
    let phase2_cost = |j: usize| if j >= n { 0.0 } else { c[j] };
    if let Some(ray) = run_phase(&mut t, &mut basis, n, total, &phase2_cost, true)? {
        return Ok(StdOutcome::Unbounded { ray });
    }

    let value: f64 = basis
        .iter()
        .enumerate()
        .map(|(i, &bj)| phase2_cost(bj) * t[(i, total)])
        .sum();
    // pi_i = -(reduced cost of artificial column i) since its cost is zero.
    let mut pi = DVector::zeros(m);
    for i in 0..m {
        let col = n + i;
        let mut red = 0.0;
        for (r, &bj) in basis.iter().enumerate() {
            red -= phase2_cost(bj) * t[(r, col)];
        }
        // The artificial column was sign-flipped together with its row.
        let flip = if b[i] < 0.0 { -1.0 } else { 1.0 };
        pi[i] = -red * flip;
    }
    Ok(StdOutcome::Optimal { value, pi })
}

/// Bland-rule pivoting until optimality. Returns a recession ray if the
/// objective is unbounded (only possible when `allow_unbounded`).
fn run_phase(
    t: &mut DMatrix<f64>,
    basis: &mut [usize],
    n_struct: usize,
    total: usize,
    cost: &dyn Fn(usize) -> f64,
    allow_unbounded: bool,
) -> Result<Option<DVector<f64>>> {
    let m = t.nrows();
    let max_iter = 200 * (total + m) + 1000;
    for _ in 0..max_iter {
        // Entering column: first with negative reduced cost (Bland).
        let mut entering = None;
        for j in 0..total {
            if basis.contains(&j) {
                continue;
            }
            // Artificials may not re-enter once phase 1 is done.
            if j >= n_struct && cost(j) == 0.0 && allow_unbounded {
                continue;
            }
            let mut red = cost(j);
            for (i, &bj) in basis.iter().enumerate() {
                red -= cost(bj) * t[(i, j)];
            }
            if red < -TOL {
                entering = Some(j);
                break;
            }
        }
        let Some(j) = entering else {
            return Ok(None);
        };
        // Ratio test with Bland tie-break on the leaving variable index.
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            if t[(i, j)] > TOL {
                let ratio = t[(i, total)] / t[(i, j)];
                match leave {
                    None => leave = Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - TOL || (ratio < lr + TOL && basis[i] < basis[li]) {
                            leave = Some((i, ratio));
                        }
                    }
                }
            }
        }
        let Some((r, _)) = leave else {
            if allow_unbounded {
                let mut ray = DVector::zeros(total);
                ray[j] = 1.0;
                for (i, &bj) in basis.iter().enumerate() {
                    ray[bj] = (-t[(i, j)]).max(0.0);
                }
                return Ok(Some(ray));
            }
            return Err(Error::Numerical("phase-1 simplex unbounded".into()));
        };
        pivot(t, r, j);
        basis[r] = j;
    }
    Err(Error::Numerical("simplex iteration limit".into()))
}

fn pivot(t: &mut DMatrix<f64>, r: usize, j: usize) {
    let piv = t[(r, j)];
    let ncols = t.ncols();
    for col in 0..ncols {
        t[(r, col)] /= piv;
    }
    for i in 0..t.nrows() {
        if i != r {
            let f = t[(i, j)];
            if f != 0.0 {
                for col in 0..ncols {
                    t[(i, col)] -= f * t[(r, col)];
                }
            }
        }
    }
}

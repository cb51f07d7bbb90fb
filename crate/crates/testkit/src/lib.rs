//! Independent numerical oracles for the eqalloc test suites.
//!
//! Nothing in here calls into `eqalloc`. Every routine recomputes its answer
//! by a different route (dense LAPACK-style eigensolver, interior-point
//! minimization, plain bisection, exhaustive enumeration) so that agreement
//! with the library is meaningful.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Dense row-major square matrix from nested rows.
pub fn to_dmatrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |i, j| rows[i][j])
}

/// `a aᵀ + b bᵀ − diag(c)` assembled entry by entry.
pub fn perturbed_matrix(a: &[f64], b: &[f64], c: &[f64]) -> Vec<Vec<f64>> {
    let d = a.len();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let off = a[i] * a[j] + b[i] * b[j];
                    if i == j {
                        off - c[i]
                    } else {
                        off
                    }
                })
                .collect()
        })
        .collect()
}

/// All eigenvalues of a symmetric matrix, ascending.
pub fn full_spectrum(rows: &[Vec<f64>]) -> Vec<f64> {
    let eig = SymmetricEigen::new(to_dmatrix(rows));
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|x, y| x.partial_cmp(y).unwrap());
    values
}

/// Largest eigenvalue and its unit eigenvector, sign fixed so the entries sum
/// to a nonnegative value.
pub fn top_eigenpair(rows: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let eig = SymmetricEigen::new(to_dmatrix(rows));
    let (idx, &value) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
        .unwrap();
    let col = eig.eigenvectors.column(idx);
    let sign = if col.sum() < 0.0 { -1.0 } else { 1.0 };
    (value, col.iter().map(|x| x * sign).collect())
}

pub fn determinant(rows: &[Vec<f64>]) -> f64 {
    to_dmatrix(rows).determinant()
}

/// Plain bisection for the root of a strictly decreasing function on `[lo, hi]`.
pub fn bisect_decreasing(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    assert!(f(lo) >= 0.0 && f(hi) <= 0.0, "root not bracketed");
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Every `k`-subset of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// One first-stage cell of a minimax allocation problem: its first-stage
/// coefficient and the `(B, α)` pairs of the second-stage cells beneath it.
#[derive(Debug, Clone)]
pub struct OracleCell {
    pub group: usize,
    pub a: f64,
    pub second: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct OracleProblem {
    pub groups: usize,
    pub c: Vec<f64>,
    pub cells: Vec<OracleCell>,
    pub x: f64,
    /// Second-stage budget; `None` for single-stage problems.
    pub z: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub value: f64,
    /// First-stage sizes, one per cell.
    pub first: Vec<f64>,
    /// Second-stage sizes per cell (per unit of first stage).
    pub second: Vec<Vec<f64>>,
}

/// Minimizes `max_g T_g` over positive allocations satisfying both budget
/// equalities with a primal log-barrier Newton method.
///
/// Works in the variables `y = x_cell` and `w = x_cell · z_cell,i`, in which
/// every `T_g` is a separable convex function (`Σ A/y + Σ B/w − c`) and both
/// budgets are linear. The epigraph variable `t` bounds every `T_g`.
pub fn minimax_allocation(problem: &OracleProblem) -> OracleSolution {
    let n_first = problem.cells.len();
    let second_index: Vec<Vec<usize>> = {
        let mut next = n_first;
        problem
            .cells
            .iter()
            .map(|cell| {
                if problem.z.is_none() {
                    return Vec::new();
                }
                cell.second
                    .iter()
                    .map(|_| {
                        next += 1;
                        next - 1
                    })
                    .collect()
            })
            .collect()
    };
    let n_vars = n_first + second_index.iter().map(Vec::len).sum::<usize>();
    let t_index = n_vars;
    let dim = n_vars + 1;

    // Equality constraints E u = e.
    let mut eq_rows: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut first_row = vec![0.0; dim];
    first_row[..n_first].fill(1.0);
    eq_rows.push((first_row, problem.x));
    let mut alpha_sum = 0.0;
    if let Some(z) = problem.z {
        let mut row = vec![0.0; dim];
        for (cell, idx) in problem.cells.iter().zip(&second_index) {
            for (&(_, alpha), &k) in cell.second.iter().zip(idx) {
                row[k] = alpha;
                alpha_sum += alpha;
            }
        }
        eq_rows.push((row, z));
    }

    let group_value = |u: &[f64], g: usize| -> f64 {
        let mut total = -problem.c[g];
        for (k, cell) in problem.cells.iter().enumerate() {
            if cell.group != g {
                continue;
            }
            total += cell.a / u[k];
            for (&(b, _), &idx) in cell.second.iter().zip(&second_index[k]) {
                total += b / u[idx];
            }
        }
        total
    };

    // Feasible interior start: even first-stage split and even second-stage mass.
    let mut u = vec![0.0; dim];
    u[..n_first].fill(problem.x / n_first as f64);
    if let Some(z) = problem.z {
        for idx in &second_index {
            for &k in idx {
                u[k] = z / alpha_sum;
            }
        }
    }
    let start_max = (0..problem.groups)
        .map(|g| group_value(&u, g))
        .fold(f64::NEG_INFINITY, f64::max);
    u[t_index] = start_max + start_max.abs().max(1e-3);

    let barrier = |u: &[f64], s: f64| -> Option<f64> {
        let mut val = s * u[t_index];
        for &uk in &u[..n_vars] {
            if uk <= 0.0 {
                return None;
            }
            val -= uk.ln();
        }
        for g in 0..problem.groups {
            let slack = u[t_index] - group_value(u, g);
            if slack <= 0.0 {
                return None;
            }
            val -= slack.ln();
        }
        Some(val)
    };

    let mut s = 1.0 / start_max.abs().max(1e-6);
    let m_constraints = (problem.groups + n_vars) as f64;
    for _outer in 0..80 {
        for _newton in 0..200 {
            // Gradient and Hessian of the barrier objective.
            let mut grad = DVector::<f64>::zeros(dim);
            let mut hess = DMatrix::<f64>::zeros(dim, dim);
            grad[t_index] += s;
            for k in 0..n_vars {
                grad[k] -= 1.0 / u[k];
                hess[(k, k)] += 1.0 / (u[k] * u[k]);
            }
            for g in 0..problem.groups {
                let slack = u[t_index] - group_value(&u, g);
                // ∇(t − f_g) and ∇²f_g.
                let mut dg = DVector::<f64>::zeros(dim);
                dg[t_index] = 1.0;
                let mut d2f = vec![0.0; dim];
                for (k, cell) in problem.cells.iter().enumerate() {
                    if cell.group != g {
                        continue;
                    }
                    dg[k] = cell.a / (u[k] * u[k]);
                    d2f[k] = 2.0 * cell.a / (u[k] * u[k] * u[k]);
                    for (&(b, _), &idx) in cell.second.iter().zip(&second_index[k]) {
                        dg[idx] = b / (u[idx] * u[idx]);
                        d2f[idx] = 2.0 * b / (u[idx] * u[idx] * u[idx]);
                    }
                }
                grad -= &dg / slack;
                hess += (&dg * dg.transpose()) / (slack * slack);
                for k in 0..dim {
                    hess[(k, k)] += d2f[k] / slack;
                }
            }
            // KKT system for the equality-constrained Newton step.
            let p = eq_rows.len();
            let mut kkt = DMatrix::<f64>::zeros(dim + p, dim + p);
            let mut rhs = DVector::<f64>::zeros(dim + p);
            kkt.view_mut((0, 0), (dim, dim)).copy_from(&hess);
            for (r, (row, _)) in eq_rows.iter().enumerate() {
                for k in 0..dim {
                    kkt[(dim + r, k)] = row[k];
                    kkt[(k, dim + r)] = row[k];
                }
            }
            for k in 0..dim {
                rhs[k] = -grad[k];
            }
            let step = match kkt.lu().solve(&rhs) {
                Some(sol) => sol,
                None => break,
            };
            let dx: Vec<f64> = (0..dim).map(|k| step[k]).collect();
            let decrement: f64 = -(0..dim).map(|k| grad[k] * dx[k]).sum::<f64>();
            if decrement.abs() < 1e-22 {
                break;
            }
            let current = barrier(&u, s).expect("iterate left the interior");
            let mut step_len = 1.0;
            loop {
                let trial: Vec<f64> = u.iter().zip(&dx).map(|(a, b)| a + step_len * b).collect();
                if let Some(val) = barrier(&trial, s) {
                    if val <= current - 0.25 * step_len * decrement {
                        u = trial;
                        break;
                    }
                }
                step_len *= 0.5;
                if step_len < 1e-20 {
                    break;
                }
            }
            if step_len < 1e-20 {
                break;
            }
        }
        if m_constraints / s < 1e-15 * u[t_index].abs().max(1e-300) {
            break;
        }
        s *= 8.0;
    }

    let value = (0..problem.groups)
        .map(|g| group_value(&u, g))
        .fold(f64::NEG_INFINITY, f64::max);
    let first: Vec<f64> = u[..n_first].to_vec();
    let second = second_index
        .iter()
        .enumerate()
        .map(|(k, idx)| idx.iter().map(|&i| u[i] / first[k]).collect())
        .collect();
    OracleSolution {
        value,
        first,
        second,
    }
}

//! Dense convex QP solver: equality elimination, then a dual active-set
//! iteration on the reduced inequality-constrained problem, with an
//! operator-splitting fallback on numerical failure.
//!
//! Canonical form:
//! ```text
//!     minimize    1/2 x' H x + g' x
//!     subject to  A_eq x  = b_eq
//!                 A_in x <= b_in
//!                 lb <= x <= ub       (optional per coordinate)
//! ```

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    /// Optional per-coordinate box bounds (use +-INFINITY for free).
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatusKind {
    Optimal,
    Infeasible,
    MaxIterations,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolveStatus {
    pub kind: SolveStatusKind,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: SolveStatus,
    pub x: DVector<f64>,
    pub objective: f64,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let d = hessian.nrows();
        QpProblem {
            hessian,
            linear,
            a_eq: DMatrix::zeros(0, d),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, d),
            b_in: DVector::zeros(0),
            lower: None,
            upper: None,
        }
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.hessian * x)[(0, 0)] + self.linear.dot(x)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.hessian.ncols() != d || self.linear.len() != d {
            return Err(Error::contract("qp: hessian/linear dimension mismatch"));
        }
        if self.a_eq.ncols() != d && self.a_eq.nrows() > 0 {
            return Err(Error::contract("qp: a_eq column count mismatch"));
        }
        if self.a_eq.nrows() != self.b_eq.len() {
            return Err(Error::contract("qp: a_eq/b_eq row mismatch"));
        }
        if self.a_in.ncols() != d && self.a_in.nrows() > 0 {
            return Err(Error::contract("qp: a_in column count mismatch"));
        }
        if self.a_in.nrows() != self.b_in.len() {
            return Err(Error::contract("qp: a_in/b_in row mismatch"));
        }
        let sym_err = (&self.hessian - self.hessian.transpose()).abs().max();
        if sym_err > 1e-9 * (1.0 + self.hessian.abs().max()) {
            return Err(Error::contract("qp: hessian must be symmetric"));
        }
        let min_eig = self
            .hessian
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-9 * (1.0 + self.hessian.abs().max()) {
            return Err(Error::contract("qp: hessian must be positive semidefinite"));
        }
        Ok(())
    }

    /// Inequality system with box bounds folded in as rows.
    fn full_inequalities(&self) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dim();
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for i in 0..self.a_in.nrows() {
            rows.push(((0..d).map(|j| self.a_in[(i, j)]).collect(), self.b_in[i]));
        }
        if let Some(lb) = &self.lower {
            for j in 0..d {
                if lb[j].is_finite() {
                    let mut r = vec![0.0; d];
                    r[j] = -1.0;
                    rows.push((r, -lb[j]));
                }
            }
        }
        if let Some(ub) = &self.upper {
            for j in 0..d {
                if ub[j].is_finite() {
                    let mut r = vec![0.0; d];
                    r[j] = 1.0;
                    rows.push((r, ub[j]));
                }
            }
        }
        let a = DMatrix::from_row_iterator(rows.len(), d, rows.iter().flat_map(|(r, _)| r.clone()));
        let b = DVector::from_iterator(rows.len(), rows.iter().map(|(_, b)| *b));
        (a, b)
    }

    /// Debug dump: dimensions, then row-major matrices, for external
    /// cross-checking.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(
            out,
            "dim {} eq {} in {}",
            self.dim(),
            self.a_eq.nrows(),
            self.a_in.nrows()
        )
        .unwrap();
        for (label, m) in [("H", &self.hessian), ("Aeq", &self.a_eq), ("Ain", &self.a_in)] {
            writeln!(out, "{label} {}x{}", m.nrows(), m.ncols()).unwrap();
            for i in 0..m.nrows() {
                let row: Vec<String> =
                    (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
                writeln!(out, "{}", row.join(" ")).unwrap();
            }
        }
        for (label, v) in [("g", &self.linear), ("beq", &self.b_eq), ("bin", &self.b_in)] {
            let row: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
            writeln!(out, "{label} {}", row.join(" ")).unwrap();
        }
        out
    }
}

/// Orthonormal basis of the row space and null space of `a` (p x d), built by
/// modified Gram-Schmidt with reorthogonalization. Returns the null-space
/// basis Z (d x (d - rank)).
fn null_space_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.ncols();
    let scale = 1.0 + a.abs().max();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let push_orthogonalized = |v: DVector<f64>, basis: &mut Vec<DVector<f64>>, tol: f64| {
        let mut u = v;
        for _ in 0..2 {
            for q in basis.iter() {
                let c = q.dot(&u);
                u -= q * c;
            }
        }
        let norm = u.norm();
        if norm > tol {
            basis.push(u / norm);
            true
        } else {
            false
        }
    };
    for i in 0..a.nrows() {
        let row = a.row(i).transpose();
        push_orthogonalized(row, &mut basis, 1e-12 * scale);
    }
    let rank = basis.len();
    for j in 0..d {
        if basis.len() == d {
            break;
        }
        let mut e = DVector::zeros(d);
        e[j] = 1.0;
        push_orthogonalized(e, &mut basis, 1e-8);
    }
    let null_cols = &basis[rank..];
    let mut z = DMatrix::zeros(d, null_cols.len());
    for (c, q) in null_cols.iter().enumerate() {
        z.set_column(c, q);
    }
    z
}

struct ReducedQp {
    g_chol: Cholesky<f64, nalgebra::Dyn>,
    g: DMatrix<f64>,
    a: DVector<f64>,
    /// rows: constraints c_i' y <= d_i
    c: DMatrix<f64>,
    d: DVector<f64>,
}

enum GiOutcome {
    Optimal {
        y: DVector<f64>,
        multipliers: Vec<(usize, f64)>,
        iterations: usize,
    },
    Infeasible {
        iterations: usize,
    },
    Failure {
        iterations: usize,
    },
}

/// Dual active-set iteration (Goldfarb-Idnani scheme with recomputed KKT
/// solves; problem sizes here are tens of variables).
fn solve_gi(r: &ReducedQp, tol: f64) -> GiOutcome {
    let nvar = r.g.nrows();
    let ncon = r.c.nrows();
    let mut y = -r.g_chol.solve(&r.a);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_iter = 50 * (ncon + nvar) + 100;
    let mut iterations = 0;

    // feasibility tolerance scaled by constraint magnitudes
    let feas_tol = tol.max(1e-12);

    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            return GiOutcome::Failure { iterations };
        }
        // most violated inactive constraint
        let mut p = usize::MAX;
        let mut worst = feas_tol;
        for i in 0..ncon {
            if active.contains(&i) {
                continue;
            }
            let s = r.c.row(i).transpose().dot(&y) - r.d[i];
            if s > worst {
                worst = s;
                p = i;
            }
        }
        if p == usize::MAX {
            let multipliers = active.iter().cloned().zip(u.iter().cloned()).collect();
            return GiOutcome::Optimal {
                y,
                multipliers,
                iterations,
            };
        }

        // normal of the violated constraint in >=-convention
        let n_p = -r.c.row(p).transpose();
        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return GiOutcome::Failure { iterations };
            }
            let ginv_np = r.g_chol.solve(&n_p);
            let (z, rr) = if active.is_empty() {
                (ginv_np.clone(), DVector::zeros(0))
            } else {
                let q = active.len();
                let mut n_mat = DMatrix::zeros(nvar, q);
                for (c, &idx) in active.iter().enumerate() {
                    n_mat.set_column(c, &(-r.c.row(idx).transpose()));
                }
                let ginv_n = r.g_chol.solve(&n_mat);
                let small = n_mat.transpose() * &ginv_n;
                let rhs = n_mat.transpose() * &ginv_np;
                let rr = match Cholesky::new(small.clone()) {
                    Some(ch) => ch.solve(&rhs),
                    None => match small.lu().solve(&rhs) {
                        Some(s) => s,
                        None => return GiOutcome::Failure { iterations },
                    },
                };
                (&ginv_np - &ginv_n * &rr, rr)
            };

            let ztn = n_p.dot(&z);
            let s_p = r.c.row(p).transpose().dot(&y) - r.d[p]; // violation > 0
            let t2 = if ztn > 1e-12 { s_p / ztn } else { f64::INFINITY };

            let mut t1 = f64::INFINITY;
            let mut blocking = usize::MAX;
            for (j, &rj) in rr.iter().enumerate() {
                if rj > 1e-12 {
                    let ratio = u[j] / rj;
                    if ratio < t1 {
                        t1 = ratio;
                        blocking = j;
                    }
                }
            }
            let t = t1.min(t2);
            if !t.is_finite() {
                return GiOutcome::Infeasible { iterations };
            }
            // primal step (z points toward decreasing violation)
            if t2.is_finite() || t > 0.0 {
                y += &z * t;
            }
            for (j, uj) in u.iter_mut().enumerate() {
                *uj -= t * rr[j];
            }
            u_p += t;
            if t2 <= t1 {
                active.push(p);
                u.push(u_p);
                continue 'outer;
            }
            // dual step hit zero multiplier: drop the blocking constraint
            active.remove(blocking);
            u.remove(blocking);
        }
    }
}

/// Operator-splitting fallback (ADMM) for the reduced problem.
fn solve_admm(r: &ReducedQp, tol: f64, max_iter: usize) -> Option<(DVector<f64>, usize)> {
    let nvar = r.g.nrows();
    let ncon = r.c.nrows();
    if ncon == 0 {
        return Some((-r.g_chol.solve(&r.a), 1));
    }
    let rho = 10.0;
    let sigma = 1e-6;
    let kkt = &r.g
        + DMatrix::<f64>::identity(nvar, nvar) * sigma
        + r.c.transpose() * &r.c * rho;
    let chol = Cholesky::new(kkt)?;
    let mut y = DVector::<f64>::zeros(nvar);
    let mut w = DVector::<f64>::zeros(ncon);
    let mut lam = DVector::<f64>::zeros(ncon);
    for iter in 0..max_iter {
        let rhs = -&r.a + &y * sigma + r.c.transpose() * (&w * rho - &lam);
        y = chol.solve(&rhs);
        let cy = &r.c * &y;
        let mut w_new = &cy + &lam / rho;
        for i in 0..ncon {
            if w_new[i] > r.d[i] {
                w_new[i] = r.d[i];
            }
        }
        lam += (&cy - &w_new) * rho;
        w = w_new;
        if iter % 50 == 0 {
            let prim = (&cy - &w).amax();
            let dual = (&r.g * &y + &r.a + r.c.transpose() * &lam).amax();
            if prim < tol && dual < tol.max(1e-8) {
                return Some((y, iter + 1));
            }
        }
    }
    Some((y, max_iter))
}

/// Solves the QP. On Optimal, KKT residuals are at most `tol` and every
/// inequality holds to at most `tol` slack, re-verified against the raw
/// problem data.
pub fn qp_solve(p: &QpProblem, tol: f64) -> Result<QpSolution> {
    p.validate()?;
    let d = p.dim();
    let (a_in, b_in) = p.full_inequalities();
    let neq = p.a_eq.nrows();

    // Equality elimination: particular solution + null-space basis.
    let (x_part, z) = if neq > 0 {
        let gram = &p.a_eq * p.a_eq.transpose();
        let reg = DMatrix::<f64>::identity(neq, neq) * 1e-12 * (1.0 + gram.abs().max());
        let chol = Cholesky::new(gram + reg)
            .ok_or_else(|| Error::contract("qp: degenerate equality system"))?;
        let x_part = p.a_eq.transpose() * chol.solve(&p.b_eq);
        let eq_res = (&p.a_eq * &x_part - &p.b_eq).amax();
        if eq_res > tol.max(1e-8) * (1.0 + p.b_eq.amax()) {
            return Ok(QpSolution {
                status: SolveStatus {
                    kind: SolveStatusKind::Infeasible,
                    iterations: 0,
                    primal_residual: eq_res,
                    dual_residual: 0.0,
                },
                x: x_part,
                objective: f64::NAN,
            });
        }
        (x_part, null_space_basis(&p.a_eq))
    } else {
        (DVector::zeros(d), DMatrix::identity(d, d))
    };

    if z.ncols() == 0 {
        // fully determined by equalities
        let viol = if b_in.len() > 0 {
            (&a_in * &x_part - &b_in).amax()
        } else {
            0.0
        };
        let kind = if viol <= tol {
            SolveStatusKind::Optimal
        } else {
            SolveStatusKind::Infeasible
        };
        let obj = p.objective(&x_part);
        return Ok(QpSolution {
            status: SolveStatus {
                kind,
                iterations: 0,
                primal_residual: viol.max(0.0),
                dual_residual: 0.0,
            },
            x: x_part,
            objective: obj,
        });
    }

    let g_red = z.transpose() * &p.hessian * &z;
    let a_red = z.transpose() * (&p.hessian * &x_part + &p.linear);
    let c_red = &a_in * &z;
    let d_red = &b_in - &a_in * &x_part;

    let g_chol = match Cholesky::new(g_red.clone()) {
        Some(c) => c,
        None => {
            // tiny regularization attempt before declaring failure
            let jitter = DMatrix::<f64>::identity(g_red.nrows(), g_red.nrows())
                * 1e-10
                * (1.0 + g_red.abs().max());
            Cholesky::new(&g_red + jitter).ok_or_else(|| {
                Error::contract("qp: hessian not positive definite on the feasible subspace")
            })?
        }
    };

    let reduced = ReducedQp {
        g_chol,
        g: g_red,
        a: a_red,
        c: c_red,
        d: d_red,
    };

    let (y, multipliers, iterations, via_fallback) = match solve_gi(&reduced, tol) {
        GiOutcome::Optimal {
            y,
            multipliers,
            iterations,
        } => (y, multipliers, iterations, false),
        GiOutcome::Infeasible { iterations } => {
            return Ok(QpSolution {
                status: SolveStatus {
                    kind: SolveStatusKind::Infeasible,
                    iterations,
                    primal_residual: f64::INFINITY,
                    dual_residual: 0.0,
                },
                x: x_part,
                objective: f64::NAN,
            });
        }
        GiOutcome::Failure { iterations } => match solve_admm(&reduced, tol, 20_000) {
            Some((y, admm_iters)) => {
                // recover approximate multipliers from the tight constraints
                let mult = recover_multipliers(&reduced, &y);
                (y, mult, iterations + admm_iters, true)
            }
            None => {
                return Ok(QpSolution {
                    status: SolveStatus {
                        kind: SolveStatusKind::NumericalFailure,
                        iterations,
                        primal_residual: f64::NAN,
                        dual_residual: f64::NAN,
                    },
                    x: x_part,
                    objective: f64::NAN,
                });
            }
        },
    };

    let x = &x_part + &z * &y;

    // A posteriori certificate check against the raw problem data.
    let ineq_viol = if b_in.len() > 0 {
        (&a_in * &x - &b_in).iter().cloned().fold(0.0, f64::max)
    } else {
        0.0
    };
    let eq_viol = if neq > 0 {
        (&p.a_eq * &x - &p.b_eq).amax()
    } else {
        0.0
    };
    let primal = ineq_viol.max(eq_viol);
    // Stationarity on the reduced space: G y + a + C_active' mu = 0.
    // Equality multipliers are free, so checking in the null space suffices.
    let mut stationarity = &reduced.g * &y + &reduced.a;
    for &(idx, mu) in &multipliers {
        stationarity += reduced.c.row(idx).transpose() * mu;
    }
    let dual = stationarity.amax();

    let b_scale = if b_in.len() > 0 { b_in.amax() } else { 0.0 };
    let kind = if primal <= tol * (1.0 + b_scale.max(1.0)) && dual <= tol.max(1e-6) {
        SolveStatusKind::Optimal
    } else if via_fallback {
        SolveStatusKind::MaxIterations
    } else {
        SolveStatusKind::NumericalFailure
    };

    let objective = p.objective(&x);
    Ok(QpSolution {
        status: SolveStatus {
            kind,
            iterations,
            primal_residual: primal,
            dual_residual: dual,
        },
        x,
        objective,
    })
}

/// Least-squares multipliers for the constraints tight at `y`, used after the
/// operator-splitting fallback (which does not track an active set).
fn recover_multipliers(r: &ReducedQp, y: &DVector<f64>) -> Vec<(usize, f64)> {
    let mut tight: Vec<usize> = Vec::new();
    for i in 0..r.c.nrows() {
        let s = r.c.row(i).transpose().dot(y) - r.d[i];
        if s.abs() <= 1e-6 * (1.0 + r.d[i].abs()) {
            tight.push(i);
        }
    }
    if tight.is_empty() {
        return Vec::new();
    }
    let grad = -(&r.g * y + &r.a);
    let mut n_mat = DMatrix::zeros(r.g.nrows(), tight.len());
    for (c, &idx) in tight.iter().enumerate() {
        n_mat.set_column(c, &r.c.row(idx).transpose());
    }
    let gram = n_mat.transpose() * &n_mat
        + DMatrix::<f64>::identity(tight.len(), tight.len()) * 1e-10;
    match Cholesky::new(gram) {
        Some(ch) => {
            let mu = ch.solve(&(n_mat.transpose() * grad));
            tight
                .iter()
                .zip(mu.iter())
                .map(|(&i, &m)| (i, m.max(0.0)))
                .collect()
        }
        None => Vec::new(),
    }
}

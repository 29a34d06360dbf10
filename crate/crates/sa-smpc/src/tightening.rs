//! Deterministic constraint tightening: Pontryagin differences of the state
//! polytope with PRS ellipsoids, the LQR terminal pair, the input-admissible
//! set, and the maximal positively invariant terminal set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{qp_solve, QpProblem, SolveStatusKind};
use crate::model::{spectral_radius, NormalizedModel};
use crate::prs::{Ellipsoid, PrsSchedule};
use crate::{Error, Result};

/// Polytope `{x : H x <= h}` with rows normalized to unit Euclidean norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Polytope {
    pub h_mat: Vec<Vec<f64>>,
    pub h_vec: Vec<f64>,
}

impl Polytope {
    /// Builds from raw rows, normalizing each to unit Euclidean norm.
    pub fn new(h_mat: &DMatrix<f64>, h_vec: &DVector<f64>) -> Result<Self> {
        if h_mat.nrows() != h_vec.len() {
            return Err(Error::contract("Polytope: row count mismatch"));
        }
        let mut rows = Vec::with_capacity(h_mat.nrows());
        let mut offs = Vec::with_capacity(h_mat.nrows());
        for i in 0..h_mat.nrows() {
            let norm = h_mat.row(i).norm();
            if !(norm > 0.0) {
                return Err(Error::contract("Polytope: zero row"));
            }
            rows.push((0..h_mat.ncols()).map(|j| h_mat[(i, j)] / norm).collect());
            offs.push(h_vec[i] / norm);
        }
        Ok(Polytope {
            h_mat: rows,
            h_vec: offs,
        })
    }

    pub fn dim(&self) -> usize {
        self.h_mat.first().map_or(0, |r| r.len())
    }

    pub fn rows(&self) -> usize {
        self.h_vec.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(
            self.rows(),
            self.dim(),
            self.h_mat.iter().flatten().copied(),
        )
    }

    pub fn offsets(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.h_vec)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let v = self.matrix() * x - self.offsets();
        v.iter().all(|&r| r <= tol)
    }

    /// Axis-aligned box `|x_i| <= radius`.
    pub fn bounding_box(dim: usize, radius: f64) -> Self {
        let mut h_mat = Vec::new();
        let mut h_vec = Vec::new();
        for i in 0..dim {
            for sign in [1.0, -1.0] {
                let mut row = vec![0.0; dim];
                row[i] = sign;
                h_mat.push(row);
                h_vec.push(radius);
            }
        }
        Polytope { h_mat, h_vec }
    }

    /// Stacks the rows of two polytopes (set intersection).
    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        if self.dim() != other.dim() && self.rows() > 0 && other.rows() > 0 {
            return Err(Error::contract("Polytope: dimension mismatch in intersect"));
        }
        let mut h_mat = self.h_mat.clone();
        let mut h_vec = self.h_vec.clone();
        h_mat.extend(other.h_mat.iter().cloned());
        h_vec.extend(other.h_vec.iter().cloned());
        Ok(Polytope { h_mat, h_vec })
    }

    /// Emptiness test via a slack-minimizing QP: the polytope is empty iff
    /// no point satisfies all rows, i.e. the minimal uniform slack is
    /// positive. Emptiness is data, not an error.
    pub fn is_empty(&self) -> Result<bool> {
        if self.rows() == 0 {
            return Ok(false);
        }
        let n = self.dim();
        let q = self.rows();
        // variables (x, s): min s^2 + tiny |x|^2  s.t.  Hx - s <= h, s >= 0
        let mut hessian = DMatrix::zeros(n + 1, n + 1);
        for i in 0..n {
            hessian[(i, i)] = 1e-10;
        }
        hessian[(n, n)] = 2.0;
        let mut a_in = DMatrix::zeros(q, n + 1);
        for i in 0..q {
            for j in 0..n {
                a_in[(i, j)] = self.h_mat[i][j];
            }
            a_in[(i, n)] = -1.0;
        }
        let mut lower = DVector::from_element(n + 1, f64::NEG_INFINITY);
        lower[n] = 0.0;
        let prob = QpProblem {
            hessian,
            linear: DVector::zeros(n + 1),
            a_eq: DMatrix::zeros(0, n + 1),
            b_eq: DVector::zeros(0),
            a_in,
            b_in: self.offsets(),
            lower: Some(lower),
            upper: None,
        };
        let sol = qp_solve(&prob, 1e-10)?;
        let s = sol.x[self.dim()];
        if sol.status.kind == SolveStatusKind::Optimal {
            return Ok(s > 1e-7);
        }
        // inexact solve: still conclusive when the minimal slack is far from
        // the threshold relative to the achieved KKT residual
        let res = sol.status.primal_residual.max(sol.status.dual_residual);
        if s > 1e-7 + 100.0 * res {
            return Ok(true);
        }
        if s + 100.0 * res < 1e-7 {
            return Ok(false);
        }
        Err(Error::design("Polytope::is_empty: slack QP failed"))
    }

    /// Support function `max {c' x : x in self}` via a regularized QP;
    /// requires boundedness in direction `c` (callers intersect with a
    /// bounding box first). The regularization is chosen so the unconstrained
    /// optimum lies far outside the set — then the solution sits on the
    /// boundary and the support value is vertex-exact — and shrunk further
    /// whenever it turns out to bind.
    pub fn support(&self, c: &DVector<f64>) -> Result<f64> {
        let n = self.dim();
        let c_norm = c.norm();
        if c_norm == 0.0 {
            return Ok(0.0);
        }
        let reach = 1.0 + self.h_vec.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let mut delta = c_norm / (100.0 * reach);
        for _ in 0..6 {
            let prob = QpProblem {
                hessian: DMatrix::identity(n, n) * delta,
                linear: -c,
                a_eq: DMatrix::zeros(0, n),
                b_eq: DVector::zeros(0),
                a_in: self.matrix(),
                b_in: self.offsets(),
                lower: None,
                upper: None,
            };
            let sol = qp_solve(&prob, 1e-10)?;
            if sol.status.kind != SolveStatusKind::Optimal {
                return Err(Error::design("Polytope::support: QP failed"));
            }
            // binding regularization means the true maximizer may be farther out
            if sol.x.norm() < 0.5 * c_norm / delta {
                return Ok(c.dot(&sol.x));
            }
            delta /= 100.0;
        }
        Err(Error::design(
            "Polytope::support: direction appears unbounded (missing bounding box?)",
        ))
    }
}

/// Pontryagin difference with an ellipsoid: each row offset becomes
/// `h_j - sqrt(r * H_j P^-1 H_j')`. The result may be empty; emptiness is
/// reportable data.
pub fn erode_by_ellipsoid(poly: &Polytope, ell: &Ellipsoid) -> Result<Polytope> {
    let p_inv = ell
        .p_matrix()
        .cholesky()
        .ok_or_else(|| Error::contract("erode_by_ellipsoid: shape matrix must be SPD"))?
        .inverse();
    let h = poly.matrix();
    let mut offs = poly.h_vec.clone();
    for i in 0..poly.rows() {
        let hi = h.row(i);
        let quad = (hi * &p_inv * hi.transpose())[(0, 0)];
        offs[i] -= (ell.r * quad).max(0.0).sqrt();
    }
    Ok(Polytope {
        h_mat: poly.h_mat.clone(),
        h_vec: offs,
    })
}

/// LQR terminal pair: S solves the discrete algebraic Riccati equation by
/// fixed-point iteration to 1e-12; K_f is the associated gain. Gains and
/// weights are in normalized input units.
pub fn terminal_pair(
    model: &NormalizedModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = model.n();
    let m = model.m();
    if q.nrows() != n || q.ncols() != n || r.nrows() != m || r.ncols() != m {
        return Err(Error::contract("terminal_pair: weight dimension mismatch"));
    }
    let q_eigs = q.clone().symmetric_eigen().eigenvalues;
    if q_eigs.iter().any(|&e| e < -1e-12) {
        return Err(Error::design("terminal_pair: Q must be positive semidefinite"));
    }
    if r.clone().cholesky().is_none() {
        return Err(Error::design("terminal_pair: R must be positive definite"));
    }
    let a = &model.a;
    let b = &model.b_n;
    let mut s = q.clone();
    let mut converged = false;
    for _ in 0..100_000 {
        let gram = r + b.transpose() * &s * b;
        let gram_inv = gram
            .cholesky()
            .ok_or_else(|| Error::design("terminal_pair: Riccati Gram matrix lost definiteness"))?
            .inverse();
        let next = q + a.transpose() * &s * a
            - a.transpose() * &s * b * &gram_inv * b.transpose() * &s * a;
        let next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &s).abs().max();
        s = next;
        if delta <= 1e-12 * (1.0 + s.abs().max()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::design("terminal_pair: Riccati iteration diverged"));
    }
    if s.clone().cholesky().is_none() {
        return Err(Error::design("terminal_pair: Riccati solution is not positive definite"));
    }
    let gram = r + b.transpose() * &s * b;
    let k_f = -(gram.cholesky().unwrap().inverse() * b.transpose() * &s * a);
    // self-consistency: (A+BK)'S(A+BK) - S = -(Q + K'RK)
    let a_cl = a + b * &k_f;
    let resid = (a_cl.transpose() * &s * &a_cl - &s + q + k_f.transpose() * r * &k_f)
        .abs()
        .max();
    if resid > 1e-9 * (1.0 + s.abs().max()) {
        return Err(Error::design(format!(
            "terminal_pair: Riccati residual {resid:e} exceeds tolerance"
        )));
    }
    Ok((s, k_f))
}

/// Input-admissible set `{z : |K_f z|_inf <= v_ss}` as a polytope.
pub fn input_admissible_set(k_f: &DMatrix<f64>, v_ss: f64) -> Result<Polytope> {
    if !(0.0 < v_ss && v_ss < 1.0) {
        return Err(Error::contract("input_admissible_set: v_ss must lie in (0, 1)"));
    }
    let m = k_f.nrows();
    let n = k_f.ncols();
    let mut h_mat = DMatrix::zeros(2 * m, n);
    let mut h_vec = DVector::zeros(2 * m);
    for j in 0..m {
        for c in 0..n {
            h_mat[(2 * j, c)] = k_f[(j, c)];
            h_mat[(2 * j + 1, c)] = -k_f[(j, c)];
        }
        h_vec[2 * j] = v_ss;
        h_vec[2 * j + 1] = v_ss;
    }
    Polytope::new(&h_mat, &h_vec)
}

/// Maximal positively invariant polytope for `z+ = (A + B K_f) z` inside
/// `box`, by pre-set iteration. A generous bounding box is intersected in so
/// every support-function query stays bounded. Fails if the set is (or
/// becomes) empty, or if the iteration cap is hit without certifiable
/// invariance.
pub fn terminal_set(model: &NormalizedModel, k_f: &DMatrix<f64>, box_poly: &Polytope) -> Result<Polytope> {
    let a_cl = &model.a + &model.b_n * k_f;
    if spectral_radius(&a_cl) >= 1.0 {
        return Err(Error::design("terminal_set: A + B K_f is not Schur stable"));
    }
    let scale = 1.0
        + box_poly
            .h_vec
            .iter()
            .cloned()
            .fold(0.0f64, |a, b| a.max(b.abs()));
    let bbox = Polytope::bounding_box(model.n(), 10.0 * scale);
    let mut current = box_poly.intersect(&bbox)?;
    if current.is_empty()? {
        return Err(Error::Infeasible("terminal set empty".into()));
    }

    let tol = 1e-8;
    let mut converged = false;
    for _ in 0..200 {
        // pre-set rows: H A_cl z <= h, keeping only rows not already implied
        let h = current.matrix();
        let offs = current.offsets();
        let mut new_rows: Vec<Vec<f64>> = Vec::new();
        let mut new_offs: Vec<f64> = Vec::new();
        for i in 0..current.rows() {
            let row = (h.row(i) * &a_cl).transpose();
            let norm = row.norm();
            if norm <= 1e-14 {
                continue;
            }
            let dir = &row / norm;
            let bound = offs[i] / norm;
            if current.support(&dir)? > bound + tol {
                new_rows.push(dir.iter().cloned().collect());
                new_offs.push(bound);
            }
        }
        if new_rows.is_empty() {
            converged = true;
            break;
        }
        current = current.intersect(&Polytope {
            h_mat: new_rows,
            h_vec: new_offs,
        })?;
        if current.is_empty()? {
            return Err(Error::Infeasible("terminal set empty".into()));
        }
    }
    if !converged {
        return Err(Error::design("terminal_set: pre-set iteration hit the cap"));
    }
    // independent invariance check: for every row, the one-step image stays in
    let verify = |set: &Polytope| -> Result<()> {
        let h = set.matrix();
        let offs = set.offsets();
        for i in 0..set.rows() {
            let row = (h.row(i) * &a_cl).transpose();
            let norm = row.norm();
            if norm <= 1e-14 {
                continue;
            }
            if set.support(&(&row / norm))? > offs[i] / norm + 10.0 * tol {
                return Err(Error::design("terminal_set: invariance verification failed"));
            }
        }
        Ok(())
    };
    verify(&current)?;
    Ok(current)
}

/// Full tightening schedule for one arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TighteningSchedule {
    /// Tightened state sets for shifted PRS indices 0..=cutoff; indices past
    /// the cutoff reuse the last (asymptotic-radius) entry.
    pub z: Vec<Polytope>,
    pub z_f: Polytope,
    pub s: Vec<Vec<f64>>,
    pub k_f: Vec<Vec<f64>>,
    pub v_ss: f64,
    pub hat_lambda: f64,
}

impl TighteningSchedule {
    /// Tightened set for shifted PRS index i (clamped at the cutoff).
    pub fn z_at(&self, i: usize) -> &Polytope {
        &self.z[i.min(self.z.len() - 1)]
    }

    pub fn s_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(
            self.s.len(),
            self.s[0].len(),
            self.s.iter().flatten().copied(),
        )
    }

    pub fn k_f_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(
            self.k_f.len(),
            self.k_f[0].len(),
            self.k_f.iter().flatten().copied(),
        )
    }
}

/// Shift-index cutoff: smallest i with `1 - hat_lambda^i >= 1 - 1e-9`, so
/// radii past it are indistinguishable from the asymptote.
pub fn shift_cutoff(hat_lambda: f64) -> usize {
    if hat_lambda <= 0.0 {
        return 1;
    }
    (1e-9f64.ln() / hat_lambda.ln()).ceil().max(1.0) as usize
}

/// Builds the tightening schedule: eroded state sets along the PRS radii,
/// the LQR terminal pair, and the invariant terminal set inside
/// `(X erode R_inf) ∩ X_K`. An empty terminal set is a design failure that
/// callers surface as scenario infeasibility.
pub fn build_schedule(
    model: &NormalizedModel,
    p: &DMatrix<f64>,
    prs: &PrsSchedule,
    state_poly: &Polytope,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    v_ss: f64,
) -> Result<TighteningSchedule> {
    let cutoff = shift_cutoff(prs.hat_lambda);
    let mut z = Vec::with_capacity(cutoff + 1);
    for i in 0..=cutoff {
        let radius = if i < prs.radii.len() {
            prs.radii[i]
        } else {
            crate::prs::expectation_bound(i, prs.hat_lambda, prs.tr_pw) / prs.epsilon
        };
        let radius = if i == cutoff { prs.r_inf } else { radius };
        z.push(erode_by_ellipsoid(state_poly, &Ellipsoid::new(p, radius)?)?);
    }

    let (s, k_f) = terminal_pair(model, q, r)?;
    let x_k = input_admissible_set(&k_f, v_ss)?;
    let box_poly = z.last().unwrap().intersect(&x_k)?;
    let z_f = terminal_set(model, &k_f, &box_poly)?;

    let rows = |m: &DMatrix<f64>| {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect()
    };
    Ok(TighteningSchedule {
        z,
        z_f,
        s: rows(&s),
        k_f: rows(&k_f),
        v_ss,
        hat_lambda: prs.hat_lambda,
    })
}

/// Diagnostic check of the terminal-weight condition
/// `alpha (1 - (1+delta) hat_lambda) P >= Q + K' R K` by eigenvalue test.
pub fn verify_terminal_weight(
    s_alpha_p: (&DMatrix<f64>, f64),
    k: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    hat_lambda: f64,
    delta: f64,
) -> Result<bool> {
    let (p, alpha) = s_alpha_p;
    if !(delta > 0.0 && delta <= (1.0 - hat_lambda) / hat_lambda) {
        return Err(Error::contract(
            "verify_terminal_weight: need 0 < delta <= (1 - hat_lambda)/hat_lambda",
        ));
    }
    let coeff = alpha * (1.0 - (1.0 + delta) * hat_lambda);
    let m = p * coeff - q - k.transpose() * r * k;
    let min_eig = (&m + m.transpose())
        .scale(0.5)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Ok(min_eig >= -1e-9 * (1.0 + p.abs().max() * coeff.abs()))
}

/// Smallest alpha making the terminal-weight condition pass (generalized
/// eigenvalue ratio); infinite when the rate term is nonpositive.
pub fn minimal_terminal_alpha(
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    hat_lambda: f64,
    delta: f64,
) -> Result<f64> {
    if !(delta > 0.0 && delta <= (1.0 - hat_lambda) / hat_lambda) {
        return Err(Error::contract(
            "minimal_terminal_alpha: need 0 < delta <= (1 - hat_lambda)/hat_lambda",
        ));
    }
    let coeff = 1.0 - (1.0 + delta) * hat_lambda;
    if coeff <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::contract("minimal_terminal_alpha: P must be SPD"))?;
    let l_inv = chol.l().try_inverse().unwrap();
    let rhs = q + k.transpose() * r * k;
    let whitened = &l_inv * rhs * l_inv.transpose();
    let max_eig = (&whitened + whitened.transpose())
        .scale(0.5)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(max_eig / coeff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_fixtures::*;
    use crate::prs::prs_schedule;
    use approx::assert_relative_eq;

    const TR_PW: f64 = 6.5016108e-4;

    fn state_constraint() -> Polytope {
        // x2 <= 0.25 in deviation coordinates
        Polytope::new(
            &DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            &DVector::from_row_slice(&[0.25]),
        )
        .unwrap()
    }

    #[test]
    fn polytope_normalizes_rows() {
        let p = Polytope::new(
            &DMatrix::from_row_slice(1, 2, &[3.0, 4.0]),
            &DVector::from_row_slice(&[10.0]),
        )
        .unwrap();
        assert_relative_eq!(p.h_mat[0][0], 0.6);
        assert_relative_eq!(p.h_mat[0][1], 0.8);
        assert_relative_eq!(p.h_vec[0], 2.0);
    }

    #[test]
    fn emptiness_detection() {
        let feasible = Polytope::bounding_box(2, 1.0);
        assert!(!feasible.is_empty().unwrap());
        // x <= -1 and x >= 1 cannot hold together
        let empty = Polytope::new(
            &DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            &DVector::from_row_slice(&[-1.0, -1.0]),
        )
        .unwrap();
        assert!(empty.is_empty().unwrap());
    }

    #[test]
    fn erode_zero_radius_is_identity() {
        let p = state_constraint();
        let e = Ellipsoid::new(&cstr_published_p(), 0.0).unwrap();
        let out = erode_by_ellipsoid(&p, &e).unwrap();
        assert_eq!(out.h_vec, p.h_vec);
    }

    #[test]
    fn erode_cstr_offset_value() {
        // frozen: sqrt(r_inf * H P^-1 H') with H = [0, 1]
        let p = state_constraint();
        let e = Ellipsoid::new(&cstr_published_p(), 0.0100100434).unwrap();
        let out = erode_by_ellipsoid(&p, &e).unwrap();
        assert_relative_eq!(out.h_vec[0], 0.25 - 0.09934, epsilon = 1e-5);
        assert_relative_eq!(out.h_vec[0], 0.1506565609, epsilon = 1e-8);
    }

    #[test]
    fn erode_unit_box_by_unit_ball() {
        let bx = Polytope::bounding_box(2, 1.0);
        let e = Ellipsoid::new(&DMatrix::identity(2, 2), 1.0).unwrap();
        let out = erode_by_ellipsoid(&bx, &e).unwrap();
        for &h in &out.h_vec {
            assert_relative_eq!(h, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn erode_commutes_with_intersection() {
        let a = state_constraint();
        let b = Polytope::bounding_box(2, 0.5);
        let e = Ellipsoid::new(&cstr_published_p(), 0.01).unwrap();
        let both = erode_by_ellipsoid(&a.intersect(&b).unwrap(), &e).unwrap();
        let separate = erode_by_ellipsoid(&a, &e)
            .unwrap()
            .intersect(&erode_by_ellipsoid(&b, &e).unwrap())
            .unwrap();
        for (x, y) in both.h_vec.iter().zip(separate.h_vec.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn erode_scale_invariant() {
        let a = state_constraint();
        let e1 = Ellipsoid::new(&cstr_published_p(), 0.01).unwrap();
        let e2 = Ellipsoid::new(&(cstr_published_p() * 7.0), 0.07).unwrap();
        let o1 = erode_by_ellipsoid(&a, &e1).unwrap();
        let o2 = erode_by_ellipsoid(&a, &e2).unwrap();
        assert_relative_eq!(o1.h_vec[0], o2.h_vec[0], epsilon = 1e-12);
    }

    #[test]
    fn scalar_riccati_closed_form() {
        // A = 0.5, B = 1, Q = 1, R = 1: s^2 - 0.25 s - 1 = 0
        let model = crate::model::LtiModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1e-4),
        )
        .unwrap()
        .normalize();
        let (s, k_f) = terminal_pair(
            &model,
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert_relative_eq!(s[(0, 0)], 1.1327822185, epsilon = 1e-9);
        // closed loop stable
        assert!((0.5 + k_f[(0, 0)]).abs() < 1.0);
    }

    #[test]
    fn riccati_rejects_zero_q() {
        let model = cstr().normalize();
        let out = terminal_pair(
            &model,
            &DMatrix::zeros(2, 2),
            &DMatrix::from_element(1, 1, 0.1),
        );
        assert!(out.is_err());
    }

    #[test]
    fn cstr_riccati_residual() {
        let model = cstr().normalize();
        let q = DMatrix::from_partial_diagonal(2, 2, &[20.0, 100.0]);
        let r = DMatrix::from_element(1, 1, 0.1);
        let (s, k_f) = terminal_pair(&model, &q, &r).unwrap();
        let a_cl = &model.a + &model.b_n * &k_f;
        let resid = (a_cl.transpose() * &s * &a_cl - &s + &q + k_f.transpose() * &r * &k_f)
            .abs()
            .max();
        assert!(resid <= 1e-9 * (1.0 + s.abs().max()), "residual {resid:e}");
        assert!(spectral_radius(&a_cl) < 1.0);
    }

    #[test]
    fn terminal_set_fixed_point_box() {
        // a tiny origin-centered box is invariant for the stable closed loop
        // once small enough; the iteration must terminate and verify
        let model = cstr().normalize();
        let q = DMatrix::from_partial_diagonal(2, 2, &[20.0, 100.0]);
        let r = DMatrix::from_element(1, 1, 0.1);
        let (_, k_f) = terminal_pair(&model, &q, &r).unwrap();
        let bx = Polytope::bounding_box(2, 1e-3);
        let z_f = terminal_set(&model, &k_f, &bx).unwrap();
        assert!(!z_f.is_empty().unwrap());
        assert!(z_f.contains(&DVector::zeros(2), 1e-12));
    }

    #[test]
    fn schedule_cstr_refined_arm() {
        let model = cstr().normalize();
        let p = cstr_published_p();
        let prs = prs_schedule(0.6752456250, TR_PW, 0.2, 50).unwrap();
        let q = DMatrix::from_partial_diagonal(2, 2, &[20.0, 100.0]);
        let r = DMatrix::from_element(1, 1, 0.1);
        let sched =
            build_schedule(&model, &p, &prs, &state_constraint(), &q, &r, 0.96).unwrap();
        // monotone: offsets only tighten with i
        for i in 1..sched.z.len() {
            assert!(sched.z[i].h_vec[0] <= sched.z[i - 1].h_vec[0] + 1e-15);
        }
        // terminal set nonempty and contains the origin
        assert!(sched.z_f.contains(&DVector::zeros(2), 1e-9));
        // z_at clamps beyond the cutoff
        let last = sched.z.len() - 1;
        assert_eq!(sched.z_at(10 * last).h_vec, sched.z[last].h_vec);
    }

    #[test]
    fn refined_arm_dominates_coarse_arm() {
        // the refined-rate radii are smaller, so every tightened set is
        // larger row-wise
        let p = cstr_published_p();
        let refined = prs_schedule(0.6752456250, TR_PW, 0.2, 50).unwrap();
        let coarse = prs_schedule(0.9049, TR_PW, 0.2, 50).unwrap();
        let base = state_constraint();
        for i in 1..=50 {
            let zr = erode_by_ellipsoid(&base, &Ellipsoid::new(&p, refined.radii[i]).unwrap())
                .unwrap();
            let zc = erode_by_ellipsoid(&base, &Ellipsoid::new(&p, coarse.radii[i]).unwrap())
                .unwrap();
            assert!(zr.h_vec[0] >= zc.h_vec[0]);
        }
    }

    #[test]
    fn scenario4_style_box_infeasible_for_coarse_arm() {
        // when the eroded halfspace excludes the origin, the invariant set
        // inside it is empty
        let model = cstr().normalize();
        let q = DMatrix::from_partial_diagonal(2, 2, &[20.0, 100.0]);
        let r = DMatrix::from_element(1, 1, 0.1);
        let (_, k_f) = terminal_pair(&model, &q, &r).unwrap();
        let bad_box = Polytope::new(
            &DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            &DVector::from_row_slice(&[-0.03]),
        )
        .unwrap()
        .intersect(&input_admissible_set(&k_f, 0.96).unwrap())
        .unwrap();
        let out = terminal_set(&model, &k_f, &bad_box);
        assert!(out.is_err(), "expected empty terminal set");
    }

    #[test]
    fn shift_cutoff_values() {
        // 0.6752^53 < 1e-9 <= 0.6752^52
        let c = shift_cutoff(0.6752456250);
        assert!(0.6752456250f64.powi(c as i32) <= 1e-9);
        assert!(0.6752456250f64.powi(c as i32 - 1) > 1e-9);
    }

    #[test]
    fn terminal_weight_condition() {
        let p = cstr_published_p();
        let nm = cstr().normalize();
        let k = nm.normalize_gain(&cstr_published_gain());
        let q = DMatrix::from_partial_diagonal(2, 2, &[20.0, 100.0]);
        let r = DMatrix::from_element(1, 1, 0.1);
        let hat = 0.6752456250;
        let delta = (1.0 - hat) / (2.0 * hat);
        let alpha_min = minimal_terminal_alpha(&p, &k, &q, &r, hat, delta).unwrap();
        assert!(alpha_min.is_finite() && alpha_min > 0.0);
        assert!(verify_terminal_weight((&p, alpha_min * 1.001), &k, &q, &r, hat, delta).unwrap());
        assert!(!verify_terminal_weight((&p, alpha_min * 0.5), &k, &q, &r, hat, delta).unwrap());
        // delta beyond the admissible range is a contract violation
        assert!(verify_terminal_weight((&p, 1.0), &k, &q, &r, hat, 10.0).is_err());
    }

    #[test]
    fn terminal_weight_trivial_when_costs_vanish() {
        let p = cstr_published_p();
        let k = DMatrix::zeros(1, 2);
        let q = DMatrix::zeros(2, 2);
        let r = DMatrix::from_element(1, 1, 1e-12);
        let hat = 0.5;
        assert!(verify_terminal_weight((&p, 0.0), &k, &q, &r, hat, 0.5).unwrap());
    }

    #[test]
    fn schedule_json_roundtrip() {
        let model = cstr().normalize();
        let p = cstr_published_p();
        let prs = prs_schedule(0.6752456250, TR_PW, 0.2, 50).unwrap();
        let q = DMatrix::from_partial_diagonal(2, 2, &[20.0, 100.0]);
        let r = DMatrix::from_element(1, 1, 0.1);
        let sched =
            build_schedule(&model, &p, &prs, &state_constraint(), &q, &r, 0.96).unwrap();
        let text = serde_json::to_string(&sched).unwrap();
        let back: TighteningSchedule = serde_json::from_str(&text).unwrap();
        assert_eq!(back.z.len(), sched.z.len());
        assert_eq!(back.z_f.h_vec, sched.z_f.h_vec);
        assert_eq!(back.s, sched.s);
    }
}

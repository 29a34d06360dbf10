//! SDP feasibility oracle based on projections onto the affine consistency
//! subspace (lifted slack variables, least-squares) and the product of
//! shifted PSD cones (eigenvalue clipping per block), combined through
//! Douglas-Rachford averaged reflections.
//!
//! Plain alternating projections (including the Dykstra variant) contract at
//! a rate quadratic in the Friedrichs angle between the two sets; near the
//! bisection boundary that angle is ~1e-4 and the iteration stalls for any
//! realistic budget. The reflection form contracts linearly in the angle and
//! resolves the same boundary cases in hundreds of sweeps.
//!
//! When every block has zero constant term the constraint set is a cone, so
//! any iterate with strictly positive block eigenvalues can be rescaled into
//! the `mu_s` margin; this homogeneous rescue is what makes near-boundary
//! feasible points decidable.
//!
//! Projection methods cannot prove infeasibility; the Infeasible verdict is a
//! documented heuristic (residual stalling, or iterate collapse toward the
//! origin in the homogeneous case) and is only consumed by bisection, which
//! is robust to one-sided errors.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::{Error, Result};

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// One affine symmetric matrix expression `C + sum_p v_p * G_p` of a given
/// size, required `>= mu_s * I`. Coefficient matrices must be symmetric.
#[derive(Debug, Clone)]
pub struct AffineSymBlock {
    pub size: usize,
    pub constant: DMatrix<f64>,
    /// (parameter index, symmetric coefficient matrix)
    pub coeffs: Vec<(usize, DMatrix<f64>)>,
}

impl AffineSymBlock {
    pub fn new(size: usize) -> Self {
        AffineSymBlock {
            size,
            constant: DMatrix::zeros(size, size),
            coeffs: Vec::new(),
        }
    }

    pub fn add_coeff(&mut self, param: usize, coeff: DMatrix<f64>) {
        assert_eq!(coeff.nrows(), self.size);
        assert_eq!(coeff.ncols(), self.size);
        self.coeffs.push((param, coeff));
    }

    fn check_symmetric(&self) -> Result<()> {
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).abs().max() <= 1e-10 * (1.0 + m.abs().max());
        if !sym(&self.constant) || self.coeffs.iter().any(|(_, g)| !sym(g)) {
            return Err(Error::contract(
                "sdp block: coefficient structure must be symmetric",
            ));
        }
        Ok(())
    }

    /// Evaluates the block at a parameter vector.
    pub fn eval(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (p, g) in &self.coeffs {
            m += g * v[*p];
        }
        m
    }
}

/// Feasibility problem: find parameters such that every block `>= mu_s * I`.
#[derive(Debug, Clone)]
pub struct SdpFeasibilityProblem {
    pub num_params: usize,
    pub blocks: Vec<AffineSymBlock>,
    /// Strict-feasibility margin; all blocks required `>= mu_s * I`.
    pub mu_s: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SdpOutcome {
    /// Parameter vector with every block `>= (mu_s - tol) * I`, verified
    /// a posteriori by eigenvalue computation.
    Feasible(DVector<f64>),
    /// Heuristic verdict: the projection residual stalled well above
    /// tolerance.
    Infeasible,
    /// Iteration cap reached without a verdict.
    Unknown,
}

impl SdpFeasibilityProblem {
    /// Debug dump: dimensions, then row-major matrices, for external
    /// cross-checking.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "params {}", self.num_params).unwrap();
        writeln!(out, "mu_s {:e}", self.mu_s).unwrap();
        writeln!(out, "blocks {}", self.blocks.len()).unwrap();
        for b in &self.blocks {
            writeln!(out, "block size {} coeffs {}", b.size, b.coeffs.len()).unwrap();
            dump_matrix(&mut out, "constant", &b.constant);
            for (p, g) in &b.coeffs {
                dump_matrix(&mut out, &format!("param {p}"), g);
            }
        }
        out
    }
}

fn dump_matrix(out: &mut String, label: &str, m: &DMatrix<f64>) {
    use std::fmt::Write;
    writeln!(out, "{label} {}x{}", m.nrows(), m.ncols()).unwrap();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
}

/// Scaled symmetric vectorization: Euclidean norm of svec equals the
/// Frobenius norm of the matrix, so eigenvalue clipping in matrix space is
/// the exact projection in svec coordinates.
fn svec_len(s: usize) -> usize {
    s * (s + 1) / 2
}

fn svec_into(m: &DMatrix<f64>, out: &mut [f64]) {
    let s = m.nrows();
    let mut k = 0;
    for i in 0..s {
        for j in i..s {
            out[k] = if i == j { m[(i, i)] } else { SQRT2 * m[(i, j)] };
            k += 1;
        }
    }
}

fn smat(v: &[f64], s: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(s, s);
    let mut k = 0;
    for i in 0..s {
        for j in i..s {
            let val = if i == j { v[k] } else { v[k] / SQRT2 };
            m[(i, j)] = val;
            m[(j, i)] = val;
            k += 1;
        }
    }
    m
}

/// Projects a symmetric matrix onto `{M : M >= shift * I}` by clipping
/// eigenvalues at `shift`.
fn project_psd_shifted(m: &DMatrix<f64>, shift: f64) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut d = eig.eigenvalues.clone();
    for x in d.iter_mut() {
        if *x < shift {
            *x = shift;
        }
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Smallest block eigenvalue at parameters `v`; the worst constraint
/// violation is `(mu_s - min_block_eig)_+`.
fn min_block_eig(p: &SdpFeasibilityProblem, v: &DVector<f64>) -> f64 {
    let mut worst = f64::INFINITY;
    for b in &p.blocks {
        let eigs = b.eval(v).symmetric_eigen().eigenvalues;
        worst = worst.min(eigs.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    worst
}

/// Alternating-projection feasibility oracle. Deterministic for fixed inputs
/// and iteration budget.
pub fn sdp_feasible(p: &SdpFeasibilityProblem, tol: f64) -> Result<SdpOutcome> {
    if !(tol > 0.0) {
        return Err(Error::contract("sdp_feasible: tol must be positive"));
    }
    if !(p.mu_s > 0.0) {
        return Err(Error::contract("sdp_feasible: mu_s must be positive"));
    }
    for b in &p.blocks {
        b.check_symmetric()?;
        if b.coeffs.iter().any(|(idx, _)| *idx >= p.num_params) {
            return Err(Error::contract("sdp_feasible: parameter index out of range"));
        }
    }

    let d = p.num_params;
    let total: usize = p.blocks.iter().map(|b| svec_len(b.size)).sum();

    // Lifted affine map s = F v + g over all block svecs.
    let mut f_mat = DMatrix::<f64>::zeros(total, d);
    let mut g_vec = DVector::<f64>::zeros(total);
    {
        let mut row = 0;
        let mut buf = vec![0.0; total.max(1)];
        for b in &p.blocks {
            let len = svec_len(b.size);
            svec_into(&b.constant, &mut buf[..len]);
            for (k, &val) in buf[..len].iter().enumerate() {
                g_vec[row + k] = val;
            }
            for (pi, gm) in &b.coeffs {
                svec_into(gm, &mut buf[..len]);
                for (k, &val) in buf[..len].iter().enumerate() {
                    f_mat[(row + k, *pi)] += val;
                }
            }
            row += len;
        }
    }

    // Projection onto {(v, s) : s = F v + g} minimizes |v - v0|^2 + |s - s0|^2,
    // giving v = (I + F'F)^-1 (v0 + F'(s0 - g)).
    let normal = DMatrix::identity(d, d) + f_mat.transpose() * &f_mat;
    let chol = Cholesky::new(normal)
        .ok_or_else(|| Error::contract("sdp_feasible: degenerate affine structure"))?;

    // Homogeneous problems (all constants zero) admit the scaling rescue.
    let homogeneous = p.blocks.iter().all(|b| b.constant.abs().max() == 0.0);

    // Start at X = I, Y = 0 when the caller follows the standard packing;
    // a neutral all-zero start otherwise.
    let mut zv = start_hint(p).unwrap_or_else(|| DVector::<f64>::zeros(d));
    let mut zs = &f_mat * &zv + &g_vec;

    let project_cone = |s: &DVector<f64>| {
        let mut out = DVector::<f64>::zeros(total);
        let mut row = 0;
        for b in &p.blocks {
            let len = svec_len(b.size);
            let m = smat(s.as_slice()[row..row + len].as_ref(), b.size);
            let proj = project_psd_shifted(&m, p.mu_s);
            let mut buf = vec![0.0; len];
            svec_into(&proj, &mut buf);
            for (k, &val) in buf.iter().enumerate() {
                out[row + k] = val;
            }
            row += len;
        }
        out
    };

    // Candidate acceptance: direct margin check, then the homogeneous rescue
    // (scale a strictly positive iterate up into the mu_s margin). Every
    // Feasible return is re-verified against the raw blocks.
    let accept = |v: &DVector<f64>| -> Option<(DVector<f64>, f64)> {
        let t = min_block_eig(p, v);
        if p.mu_s - t <= tol {
            return Some((v.clone(), t));
        }
        if homogeneous && t > 1e-12 * (1.0 + v.norm()) {
            let c = p.mu_s / t;
            if c.is_finite() && c < 1e12 {
                let scaled = v * c;
                let ts = min_block_eig(p, &scaled);
                if p.mu_s - ts <= tol {
                    return Some((scaled, ts));
                }
            }
        }
        None
    };

    let check_every = 25;
    let stall_window = 1000;
    let mut last_checkpoint = f64::INFINITY;
    let mut iters_since_checkpoint = 0usize;
    let mut bv = zv.clone();

    for iter in 0..p.max_iterations {
        // Douglas-Rachford sweep: reflect through the cone (acting on the
        // slack part only), reflect through the affine subspace, average.
        let as_ = project_cone(&zs);
        let rv = &zv; // cone projection leaves v untouched
        let rs = &as_ * 2.0 - &zs;
        let rhs = rv + f_mat.transpose() * (&rs - &g_vec);
        bv = chol.solve(&rhs);
        let bs = &f_mat * &bv + &g_vec;
        zs += &bs - &as_;
        zv = bv.clone();

        if iter % check_every == 0 {
            if let Some((v, _)) = accept(&bv) {
                return Ok(SdpOutcome::Feasible(v));
            }
            let t = min_block_eig(p, &bv);
            let viol = p.mu_s - t;
            // Homogeneous collapse: iterates shrink to the origin when no
            // strictly feasible direction exists.
            if homogeneous && bv.norm() < 1e-7 && t <= 0.0 {
                return Ok(SdpOutcome::Infeasible);
            }
            iters_since_checkpoint += check_every;
            if iters_since_checkpoint >= stall_window {
                if viol > 10.0 * tol && viol > 0.999 * last_checkpoint {
                    return Ok(SdpOutcome::Infeasible);
                }
                last_checkpoint = viol;
                iters_since_checkpoint = 0;
            }
        }
    }
    Ok(match accept(&bv) {
        Some((v, _)) => SdpOutcome::Feasible(v),
        None => SdpOutcome::Unknown,
    })
}

/// Identity-scale starting point: sets any parameter whose coefficient
/// matrices include a diagonal contribution in a plain `X >= mu_s I`-style
/// block to the corresponding identity entry. Falls back to zero.
fn start_hint(p: &SdpFeasibilityProblem) -> Option<DVector<f64>> {
    // Heuristic: find a block whose expression is exactly one coefficient per
    // parameter subset representing a bare symmetric variable; seed it with I.
    for b in &p.blocks {
        if b.constant.abs().max() == 0.0 && b.coeffs.len() == svec_len(b.size) {
            let mut v = DVector::zeros(p.num_params);
            for (pi, g) in &b.coeffs {
                // diagonal basis matrices have trace 1 at a single diagonal slot
                if g.trace() > 0.5 && g.abs().max() == 1.0 {
                    let mut is_diag_unit = false;
                    for i in 0..b.size {
                        if g[(i, i)] == 1.0 {
                            is_diag_unit = true;
                        }
                    }
                    if is_diag_unit {
                        v[*pi] = 1.0;
                    }
                }
            }
            if v.amax() > 0.0 {
                return Some(v);
            }
        }
    }
    None
}

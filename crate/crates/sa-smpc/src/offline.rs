//! Offline synthesis of the contraction certificate (P, K, lambda, lambda_L)
//! by two-level bisection over an LMI family, plus numerical verification of
//! the convex embedding that justifies it.
//!
//! The LMI family, in variables X = P^-1 and Y = K X, requires for every
//! saturation scenario (index subset J of the input channels)
//! ```text
//!     [ lam X   (A X + sum_{j in J} B_(j) Y_j)' ]
//!     [   .                X                    ]  >= 0,
//! ```
//! together with the closed-loop block at rate lambda_L and X > 0.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{sdp_feasible, AffineSymBlock, SdpFeasibilityProblem, SdpOutcome};
use crate::model::{error_step, spectral_radius, NormalizedModel};
use crate::{Error, Result};

/// One saturation scenario: the subset of input channels acting linearly and
/// the associated vertex matrix `A_K(J) = A + sum_{j in J} B_(j) K_j`.
#[derive(Debug, Clone)]
pub struct SaturationScenario {
    /// Bitmask over input channels; bit j set means channel j is in J.
    pub mask: u32,
    pub a_k: DMatrix<f64>,
}

/// Contraction certificate with per-scenario LMI residuals.
///
/// Residuals are minimum eigenvalues of `lam P - A_K(J)' P A_K(J)`
/// normalized by the largest eigenvalue of P, so they are invariant under
/// the joint rescaling `P -> cP` that leaves every downstream tightening
/// unchanged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionCertificate {
    pub p: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub lambda: f64,
    pub lambda_l: f64,
    /// Per-scenario residuals in subset binary-counter order, followed by the
    /// closed-loop (lambda_L) residual.
    pub residuals: Vec<f64>,
}

impl ContractionCertificate {
    pub fn p_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(
            self.p.len(),
            self.p[0].len(),
            self.p.iter().flatten().copied(),
        )
    }

    pub fn k_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(
            self.k.len(),
            self.k[0].len(),
            self.k.iter().flatten().copied(),
        )
    }

    pub fn from_matrices(
        p: &DMatrix<f64>,
        k: &DMatrix<f64>,
        lambda: f64,
        lambda_l: f64,
        residuals: Vec<f64>,
    ) -> Self {
        let rows = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                .collect()
        };
        ContractionCertificate {
            p: rows(p),
            k: rows(k),
            lambda,
            lambda_l,
            residuals,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l <= self.lambda && self.lambda < 1.0 && self.lambda_l >= 0.0) {
            return Err(Error::design(format!(
                "certificate rates out of range: lambda={} lambda_L={}",
                self.lambda, self.lambda_l
            )));
        }
        let p = self.p_matrix();
        let eigs = p.clone().symmetric_eigen().eigenvalues;
        if eigs.iter().any(|&e| e <= 0.0) {
            return Err(Error::design("certificate P is not positive definite"));
        }
        Ok(())
    }
}

/// All `2^m` saturation scenarios in subset binary-counter order.
pub fn enumerate_scenarios(
    model: &NormalizedModel,
    k: &DMatrix<f64>,
) -> Result<Vec<SaturationScenario>> {
    let m = model.m();
    if m > 16 {
        return Err(Error::contract(format!(
            "enumerate_scenarios: m = {m} exceeds the scenario-explosion guard (16)"
        )));
    }
    if k.nrows() != m || k.ncols() != model.n() {
        return Err(Error::contract("enumerate_scenarios: gain dimension mismatch"));
    }
    let mut out = Vec::with_capacity(1 << m);
    for mask in 0..(1u32 << m) {
        let mut a_k = model.a.clone();
        for j in 0..m {
            if mask & (1 << j) != 0 {
                a_k += model.b_n.column(j) * k.row(j);
            }
        }
        out.push(SaturationScenario { mask, a_k });
    }
    Ok(out)
}

/// Options for the two-level bisection.
#[derive(Debug, Clone)]
pub struct DesignOptions {
    /// Bisection tolerance on both rates.
    pub bisect_tol: f64,
    /// Feasibility tolerance handed to the SDP oracle.
    pub sdp_tol: f64,
    /// Strict-feasibility margin required of every LMI block.
    pub mu_s: f64,
    pub max_oracle_iterations: usize,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions {
            bisect_tol: 1e-3,
            sdp_tol: 1e-8,
            mu_s: 1e-6,
            max_oracle_iterations: 50_000,
        }
    }
}

/// Parameter packing: X upper triangle (row-major), then Y row-major.
fn num_params(n: usize, m: usize) -> usize {
    n * (n + 1) / 2 + m * n
}

fn x_param(n: usize, i: usize, j: usize) -> usize {
    // i <= j required
    i * n - i * (i + 1) / 2 + j
}

fn y_param(n: usize, j: usize, c: usize) -> usize {
    n * (n + 1) / 2 + j * n + c
}

fn sym_basis(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n, n);
    e[(i, j)] = 1.0;
    e[(j, i)] = 1.0;
    if i == j {
        e[(i, i)] = 1.0;
    }
    e
}

fn unpack_xy(v: &DVector<f64>, n: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut x = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let val = v[x_param(n, i, j)];
            x[(i, j)] = val;
            x[(j, i)] = val;
        }
    }
    let mut y = DMatrix::zeros(m, n);
    for j in 0..m {
        for c in 0..n {
            y[(j, c)] = v[y_param(n, j, c)];
        }
    }
    (x, y)
}

/// Builds the feasibility problem at fixed rates (lam, lam_l).
pub fn build_lmi_problem(
    model: &NormalizedModel,
    lam: f64,
    lam_l: f64,
    opts: &DesignOptions,
) -> SdpFeasibilityProblem {
    let n = model.n();
    let m = model.m();
    let d = num_params(n, m);
    let mut blocks = Vec::new();

    // X >= mu_s I
    let mut xb = AffineSymBlock::new(n);
    for i in 0..n {
        for j in i..n {
            xb.add_coeff(x_param(n, i, j), sym_basis(n, i, j));
        }
    }
    blocks.push(xb);

    // Schur blocks per scenario at rate lam, plus the closed-loop block at
    // rate lam_l (the full-subset vertex).
    let full_mask = (1u32 << m) - 1;
    let mut scenario_blocks: Vec<(u32, f64)> =
        (0..(1u32 << m)).map(|mask| (mask, lam)).collect();
    scenario_blocks.push((full_mask, lam_l));

    for (mask, rate) in scenario_blocks {
        let mut b = AffineSymBlock::new(2 * n);
        // X contributions: rate * X top-left, X bottom-right, A X off-diagonal.
        for i in 0..n {
            for j in i..n {
                let e = sym_basis(n, i, j);
                let mut g = DMatrix::zeros(2 * n, 2 * n);
                g.view_mut((0, 0), (n, n)).copy_from(&(&e * rate));
                g.view_mut((n, n), (n, n)).copy_from(&e);
                let ae = &model.a * &e;
                g.view_mut((n, 0), (n, n)).copy_from(&ae);
                g.view_mut((0, n), (n, n)).copy_from(&ae.transpose());
                b.add_coeff(x_param(n, i, j), g);
            }
        }
        // Y contributions: B_(j) Y_j enters the off-diagonal block.
        for j in 0..m {
            if mask & (1 << j) == 0 {
                continue;
            }
            for c in 0..n {
                let mut by = DMatrix::zeros(n, n);
                for r in 0..n {
                    by[(r, c)] = model.b_n[(r, j)];
                }
                let mut g = DMatrix::zeros(2 * n, 2 * n);
                g.view_mut((n, 0), (n, n)).copy_from(&by);
                g.view_mut((0, n), (n, n)).copy_from(&by.transpose());
                b.add_coeff(y_param(n, j, c), g);
            }
        }
        blocks.push(b);
    }

    SdpFeasibilityProblem {
        num_params: d,
        blocks,
        mu_s: opts.mu_s,
        max_iterations: opts.max_oracle_iterations,
    }
}

/// Same LMI family with the scale fixed by `X >= I` and the gain capped by
/// `Y X^-1 Y' <= t I` (Schur block). Used to polish the gain at fixed rates.
fn build_gain_problem(
    model: &NormalizedModel,
    lam: f64,
    lam_l: f64,
    t: f64,
    opts: &DesignOptions,
) -> SdpFeasibilityProblem {
    let n = model.n();
    let m = model.m();
    let mut prob = build_lmi_problem(model, lam, lam_l, opts);

    // X - I >= mu_s I
    let mut norm_b = AffineSymBlock::new(n);
    norm_b.constant = -DMatrix::identity(n, n);
    for i in 0..n {
        for j in i..n {
            norm_b.add_coeff(x_param(n, i, j), sym_basis(n, i, j));
        }
    }
    prob.blocks.push(norm_b);

    // [ t I  Y ; Y'  X ] >= mu_s I
    let mut tb = AffineSymBlock::new(m + n);
    let mut c = DMatrix::zeros(m + n, m + n);
    for i in 0..m {
        c[(i, i)] = t;
    }
    tb.constant = c;
    for i in 0..n {
        for j in i..n {
            let mut g = DMatrix::zeros(m + n, m + n);
            g.view_mut((m, m), (n, n)).copy_from(&sym_basis(n, i, j));
            tb.add_coeff(x_param(n, i, j), g);
        }
    }
    for j in 0..m {
        for col in 0..n {
            let mut g = DMatrix::zeros(m + n, m + n);
            g[(j, m + col)] = 1.0;
            g[(m + col, j)] = 1.0;
            tb.add_coeff(y_param(n, j, col), g);
        }
    }
    prob.blocks.push(tb);
    prob
}

/// Shrinks `K P^-1 K'` among the solutions feasible at the fixed rates.
///
/// The rate bisection only pins (lambda, lambda_L); the oracle is free to
/// return an aggressive gain, which shrinks the region of linearity and can
/// void the refined-rate construction downstream. With `X >= I` fixing the
/// scale (and bounding `Tr(P W) <= Tr(W)`), the largest eigenvalue of
/// `Y X^-1 Y'` is bisected down through the Schur cap.
fn polish_gain(
    model: &NormalizedModel,
    lam: f64,
    lam_l: f64,
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    opts: &DesignOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let x_min = x
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !(x_min > 0.0) {
        return Ok((x, y));
    }
    let xs = &x / x_min;
    let ys = &y / x_min;
    let x_inv = match xs.clone().cholesky() {
        Some(c) => c.inverse(),
        None => return Ok((x, y)),
    };
    let t_now = (&ys * x_inv * ys.transpose())
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0, f64::max);

    let mut best = (xs, ys);
    let mut lo = 0.0;
    let mut hi = t_now;
    for _ in 0..30 {
        if hi - lo <= 0.05 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let prob = build_gain_problem(model, lam, lam_l, mid, opts);
        match sdp_feasible(&prob, opts.sdp_tol)? {
            SdpOutcome::Feasible(v) => {
                best = unpack_xy(&v, model.n(), model.m());
                hi = mid;
            }
            SdpOutcome::Infeasible | SdpOutcome::Unknown => lo = mid,
        }
    }
    Ok(best)
}

/// Feasibility oracle at fixed rates; `Ok(Some((X, Y)))` on feasible.
fn oracle(
    model: &NormalizedModel,
    lam: f64,
    lam_l: f64,
    opts: &DesignOptions,
) -> Result<Option<(DMatrix<f64>, DMatrix<f64>)>> {
    let p = build_lmi_problem(model, lam, lam_l, opts);
    match sdp_feasible(&p, opts.sdp_tol)? {
        SdpOutcome::Feasible(v) => {
            let (x, y) = unpack_xy(&v, model.n(), model.m());
            Ok(Some((x, y)))
        }
        // Unknown (iteration cap) is treated as not-feasible: bisection is
        // robust to that one-sided error and shrinks toward feasibility.
        SdpOutcome::Infeasible | SdpOutcome::Unknown => Ok(None),
    }
}

/// Synthesizes a contraction certificate by two-level bisection: first the
/// global rate lambda (with lambda_L tied to it), then lambda_L at fixed
/// lambda. Deterministic for fixed tolerances.
pub fn design_certificate(
    model: &NormalizedModel,
    opts: &DesignOptions,
) -> Result<ContractionCertificate> {
    let rho_a2 = spectral_radius(&model.a).powi(2);
    if rho_a2 >= 1.0 {
        return Err(Error::design("Assumption 2a violated: A is not Schur stable"));
    }
    if model.m() == 0 {
        return Err(Error::design("m = 0: control synthesis is meaningless"));
    }
    let tol = opts.bisect_tol;

    // Phase 0: find a feasible starting lambda.
    let mut hi = f64::NAN;
    for cand in [
        (rho_a2 + 3.0 * tol).min(1.0 - 1e-9),
        (0.5 * (rho_a2 + 1.0)).min(1.0 - 1e-9),
        1.0 - 1e-4,
    ] {
        if oracle(model, cand, cand, opts)?.is_some() {
            hi = cand;
            break;
        }
    }
    if hi.is_nan() {
        return Err(Error::design(
            "no feasible lambda found up to 1 - 1e-4; LMI family appears infeasible",
        ));
    }

    // Phase 1: minimize lambda with lambda_L tied to lambda.
    // rho(A)^2 is a hard lower bound (the empty-subset scenario).
    let mut lo = rho_a2;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if oracle(model, mid, mid, opts)?.is_some() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let lambda = (hi + tol).min(1.0 - 1e-9);

    // Phase 2: minimize lambda_L at fixed lambda.
    let mut lo_l = 0.0;
    let mut hi_l = lambda;
    while hi_l - lo_l > tol {
        let mid = 0.5 * (lo_l + hi_l);
        if oracle(model, lambda, mid, opts)?.is_some() {
            hi_l = mid;
        } else {
            lo_l = mid;
        }
    }
    let lambda_l = (hi_l + tol).min(lambda);

    // Final solve with slack on both rates produces the returned (P, K).
    let (x, y) = oracle(model, lambda, lambda_l, opts)?.ok_or_else(|| {
        Error::design("final feasibility solve failed after bisection")
    })?;
    let (x, y) = polish_gain(model, lambda, lambda_l, x, y, opts)?;

    let x_inv = x
        .clone()
        .cholesky()
        .ok_or_else(|| Error::design("recovered X is not positive definite"))?
        .inverse();
    // symmetrize against accumulated round-off
    let p = (&x_inv + x_inv.transpose()) * 0.5;
    let k = &y * &x_inv;

    let residuals = lmi_residuals(model, &p, &k, lambda, lambda_l)?;
    let cert = ContractionCertificate::from_matrices(&p, &k, lambda, lambda_l, residuals);
    cert.validate()?;
    let worst = cert.residuals.iter().cloned().fold(f64::INFINITY, f64::min);
    if worst < -1e-8 {
        return Err(Error::design(format!(
            "designed certificate fails verification: worst residual {worst:e}"
        )));
    }
    Ok(cert)
}

/// Normalized LMI residuals: scenario residuals in binary-counter order, then
/// the closed-loop (lambda_L) residual.
pub fn lmi_residuals(
    model: &NormalizedModel,
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    lambda: f64,
    lambda_l: f64,
) -> Result<Vec<f64>> {
    let scenarios = enumerate_scenarios(model, k)?;
    let p_max = p
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(p_max > 0.0) {
        return Err(Error::contract("lmi_residuals: P must have a positive eigenvalue"));
    }
    let min_eig = |m: DMatrix<f64>| {
        m.symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    };
    let mut out = Vec::with_capacity(scenarios.len() + 1);
    for s in &scenarios {
        let r = p * lambda - s.a_k.transpose() * p * &s.a_k;
        out.push(min_eig((&r + r.transpose()) * 0.5) / p_max);
    }
    let a_cl = scenarios.last().unwrap().a_k.clone();
    let r = p * lambda_l - a_cl.transpose() * p * a_cl;
    out.push(min_eig((&r + r.transpose()) * 0.5) / p_max);
    Ok(out)
}

/// Residual report from re-checking a certificate against the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualReport {
    pub residuals: Vec<f64>,
    pub worst: f64,
    /// Scenario mask of the worst residual, or `u32::MAX` for the
    /// closed-loop (lambda_L) block.
    pub worst_scenario: u32,
    pub pass: bool,
}

/// Recomputes all `2^m + 1` LMI residuals by symmetric eigendecomposition;
/// passes iff all are at least `-tol`.
pub fn verify_certificate(
    model: &NormalizedModel,
    cert: &ContractionCertificate,
    tol: f64,
) -> Result<ResidualReport> {
    cert.validate()?;
    let residuals = lmi_residuals(
        model,
        &cert.p_matrix(),
        &cert.k_matrix(),
        cert.lambda,
        cert.lambda_l,
    )?;
    let m = model.m();
    let (mut worst, mut worst_scenario) = (f64::INFINITY, 0u32);
    for (idx, &r) in residuals.iter().enumerate() {
        if r < worst {
            worst = r;
            worst_scenario = if idx < (1 << m) { idx as u32 } else { u32::MAX };
        }
    }
    Ok(ResidualReport {
        pass: worst >= -tol,
        residuals,
        worst,
        worst_scenario,
    })
}

/// Randomized check of the convex embedding: for sampled (e, v) the image
/// f(e, v) must satisfy the quadratic majorization and lie in the convex hull
/// of the scenario vertices. Returns the first witness on failure.
pub fn check_embedding(
    model: &NormalizedModel,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    samples: usize,
    rng_seed: u64,
) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let scenarios = enumerate_scenarios(model, k)?;
    let n = model.n();
    let m = model.m();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
    let tol = 1e-9;

    for sample in 0..samples {
        // heavy-tailed error sampler covering linear and saturated regimes
        let log_scale: f64 = rng.random_range(-4.0..4.0);
        let scale = log_scale.exp();
        let e = DVector::from_fn(n, |_, _| {
            let g: f64 = rng.sample(rand_distr::StandardNormal);
            g * scale
        });
        let v = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let f = error_step(&e, &v, k, model)?;

        let fpf = (f.transpose() * p * &f)[(0, 0)];
        let mut hull_bound = f64::NEG_INFINITY;
        let vertices: Vec<DVector<f64>> = scenarios.iter().map(|s| &s.a_k * &e).collect();
        for vert in &vertices {
            let q = (vert.transpose() * p * vert)[(0, 0)];
            hull_bound = hull_bound.max(q);
        }
        let scale_q = 1.0 + hull_bound.abs();
        if fpf > hull_bound + tol * scale_q {
            return Err(Error::Validation(format!(
                "embedding quadratic bound violated at sample {sample}: f'Pf = {fpf:e} > {hull_bound:e}"
            )));
        }

        let dist = hull_distance(&vertices, &f)?;
        let scale_h = 1.0 + vertices.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if dist > tol.sqrt() * scale_h {
            return Err(Error::Validation(format!(
                "hull membership violated at sample {sample}: distance {dist:e}"
            )));
        }
    }
    Ok(())
}

/// Euclidean distance from a point to the convex hull of a vertex list.
/// Two vertices reduce to segment projection; the general case solves a
/// simplex-constrained least-squares problem.
pub fn hull_distance(vertices: &[DVector<f64>], point: &DVector<f64>) -> Result<f64> {
    match vertices.len() {
        0 => Err(Error::contract("hull_distance: no vertices")),
        1 => Ok((point - &vertices[0]).norm()),
        2 => {
            let d = &vertices[1] - &vertices[0];
            let dd = d.dot(&d);
            let t = if dd > 0.0 {
                (d.dot(&(point - &vertices[0])) / dd).clamp(0.0, 1.0)
            } else {
                0.0
            };
            Ok((point - (&vertices[0] + d * t)).norm())
        }
        nv => {
            use crate::conic::{qp_solve, QpProblem, SolveStatusKind};
            let dim = point.len();
            let mut vmat = DMatrix::zeros(dim, nv);
            for (c, vert) in vertices.iter().enumerate() {
                vmat.set_column(c, vert);
            }
            let scale = 1.0 + vmat.abs().max().powi(2);
            let hessian = (vmat.transpose() * &vmat) * 2.0
                + DMatrix::<f64>::identity(nv, nv) * 1e-12 * scale;
            let linear = -(vmat.transpose() * point) * 2.0;
            let mut prob = QpProblem::unconstrained(hessian, linear);
            prob.a_eq = DMatrix::from_element(1, nv, 1.0);
            prob.b_eq = DVector::from_element(1, 1.0);
            prob.lower = Some(DVector::from_element(nv, 0.0));
            let sol = qp_solve(&prob, 1e-10)?;
            if sol.status.kind != SolveStatusKind::Optimal {
                return Err(Error::design("hull_distance: inner QP failed"));
            }
            Ok((point - vmat * sol.x).norm())
        }
    }
}

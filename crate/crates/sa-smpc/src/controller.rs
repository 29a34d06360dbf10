//! Online MPC loop: assembles the tightened finite-horizon QP each step,
//! applies the saturated input, and maintains the interpolated
//! initialization between consecutive solves.
//!
//! All controller-side quantities live in normalized input units (saturation
//! at 1); applied inputs are denormalized only in the returned step record.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{qp_solve, QpProblem, SolveStatusKind};
use crate::model::{saturate, NormalizedModel};
use crate::tightening::TighteningSchedule;
use crate::{Error, Result};

/// Controller configuration: horizon, weights, the slack-penalty schedule,
/// and the offline artifacts (error-feedback gain + tightening schedule).
#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub rho0: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Error-feedback gain from the contraction certificate (normalized).
    pub k_gain: DMatrix<f64>,
    pub schedule: TighteningSchedule,
}

impl MpcConfig {
    /// Standard configuration; the slack penalty is scaled to the terminal
    /// weight so it stays commensurate with the cost.
    pub fn new(
        horizon: usize,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        epsilon: f64,
        k_gain: DMatrix<f64>,
        schedule: TighteningSchedule,
    ) -> Result<Self> {
        let s_max = schedule
            .s_matrix()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let cfg = MpcConfig {
            horizon,
            q,
            r,
            rho0: 1e3 * s_max,
            gamma: 0.9,
            epsilon,
            k_gain,
            schedule,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.rho0 > 0.0) {
            return Err(Error::Config("rho0 must be positive".into()));
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Slack penalty at time k: `rho0 * gamma^k` (summable, as the convergence
/// argument requires).
pub fn rho_schedule(k: usize, cfg: &MpcConfig) -> f64 {
    cfg.rho0 * cfg.gamma.powi(k as i32)
}

/// One optimized plan: nominal inputs, nominal states, interpolation weight.
#[derive(Debug, Clone)]
pub struct Plan {
    pub v: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub xi: f64,
    pub objective: f64,
}

/// Mutable controller state across steps.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub k: usize,
    /// Stored z*_{1} from the previous solve; present for all k >= 1.
    pub z_prev_1: Option<DVector<f64>>,
    pub last_plan: Option<Plan>,
    pub fallback_count: usize,
}

impl ControllerState {
    pub fn new() -> Self {
        ControllerState {
            k: 0,
            z_prev_1: None,
            last_plan: None,
            fallback_count: 0,
        }
    }
}

impl Default for ControllerState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepStatus {
    Optimal,
    /// Solver failed; the shifted previous plan was applied.
    Fallback,
}

/// Record of one applied control step.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// Applied input in actual actuator units.
    pub u_applied: DVector<f64>,
    pub v0: DVector<f64>,
    pub z0: DVector<f64>,
    pub xi: f64,
    pub objective: f64,
    /// Wall-clock solve time in seconds; excluded from canonical reports to
    /// keep them deterministic.
    pub solve_time: f64,
    pub status: StepStatus,
}

/// Decision-vector layout: v_0..v_{N-1}, z_0..z_N, xi.
struct Layout {
    n: usize,
    m: usize,
    horizon: usize,
}

impl Layout {
    fn dim(&self) -> usize {
        self.m * self.horizon + self.n * (self.horizon + 1) + 1
    }
    fn v(&self, i: usize) -> usize {
        self.m * i
    }
    fn z(&self, i: usize) -> usize {
        self.m * self.horizon + self.n * i
    }
    fn xi(&self) -> usize {
        self.dim() - 1
    }
}

/// Assembles the tightened finite-horizon QP at state `x_k`.
///
/// Equality rows: nominal dynamics, plus the initialization rows — at k = 0
/// the nominal state is pinned to the measurement and the interpolation
/// weight to zero; afterwards `z_0 = (1 - xi) x_k + xi z_prev_1`, which is
/// linear because both anchors are data.
pub fn build_problem(
    x_k: &DVector<f64>,
    state: &ControllerState,
    cfg: &MpcConfig,
    model: &NormalizedModel,
) -> Result<QpProblem> {
    let lay = Layout {
        n: model.n(),
        m: model.m(),
        horizon: cfg.horizon,
    };
    let (n, m, big_n) = (lay.n, lay.m, lay.horizon);
    if cfg.q.nrows() != n || cfg.r.nrows() != m {
        return Err(Error::Config("weight dimensions do not match the model".into()));
    }
    if x_k.len() != n {
        return Err(Error::contract("build_problem: state dimension mismatch"));
    }
    let d = lay.dim();
    let rho_k = rho_schedule(state.k, cfg);

    let mut hessian = DMatrix::zeros(d, d);
    for i in 0..big_n {
        let vi = lay.v(i);
        let zi = lay.z(i);
        for a in 0..m {
            for b in 0..m {
                hessian[(vi + a, vi + b)] = 2.0 * cfg.r[(a, b)];
            }
        }
        for a in 0..n {
            for b in 0..n {
                hessian[(zi + a, zi + b)] = 2.0 * cfg.q[(a, b)];
            }
        }
    }
    let s = cfg.schedule.s_matrix();
    let zn = lay.z(big_n);
    for a in 0..n {
        for b in 0..n {
            hessian[(zn + a, zn + b)] = 2.0 * s[(a, b)];
        }
    }
    hessian[(lay.xi(), lay.xi())] = 2.0 * rho_k;

    // dynamics + initialization equalities
    let init_rows = if state.k == 0 { n + 1 } else { n };
    let mut a_eq = DMatrix::zeros(big_n * n + init_rows, d);
    let mut b_eq = DVector::zeros(big_n * n + init_rows);
    for i in 0..big_n {
        for row in 0..n {
            let r_idx = i * n + row;
            a_eq[(r_idx, lay.z(i + 1) + row)] = 1.0;
            for c in 0..n {
                a_eq[(r_idx, lay.z(i) + c)] = -model.a[(row, c)];
            }
            for c in 0..m {
                a_eq[(r_idx, lay.v(i) + c)] = -model.b_n[(row, c)];
            }
        }
    }
    let base = big_n * n;
    if state.k == 0 {
        for row in 0..n {
            a_eq[(base + row, lay.z(0) + row)] = 1.0;
            b_eq[base + row] = x_k[row];
        }
        a_eq[(base + n, lay.xi())] = 1.0;
        b_eq[base + n] = 0.0;
    } else {
        let z_prev = state.z_prev_1.as_ref().ok_or_else(|| {
            Error::contract("build_problem: missing stored z_1 for k >= 1")
        })?;
        // z_0 + xi (x_k - z_prev_1) = x_k
        for row in 0..n {
            a_eq[(base + row, lay.z(0) + row)] = 1.0;
            a_eq[(base + row, lay.xi())] = x_k[row] - z_prev[row];
            b_eq[base + row] = x_k[row];
        }
    }

    // tightened state rows, terminal rows
    let mut in_rows: Vec<(usize, Vec<f64>, f64)> = Vec::new(); // (z index, row, offset)
    for i in 0..big_n {
        let zp = cfg.schedule.z_at(i + state.k);
        let h = zp.matrix();
        for r_idx in 0..zp.rows() {
            in_rows.push((
                lay.z(i),
                (0..n).map(|c| h[(r_idx, c)]).collect(),
                zp.h_vec[r_idx],
            ));
        }
    }
    {
        let zf = &cfg.schedule.z_f;
        let h = zf.matrix();
        for r_idx in 0..zf.rows() {
            in_rows.push((
                lay.z(big_n),
                (0..n).map(|c| h[(r_idx, c)]).collect(),
                zf.h_vec[r_idx],
            ));
        }
    }
    let mut a_in = DMatrix::zeros(in_rows.len(), d);
    let mut b_in = DVector::zeros(in_rows.len());
    for (r_idx, (offset, row, bound)) in in_rows.into_iter().enumerate() {
        for (c, val) in row.into_iter().enumerate() {
            a_in[(r_idx, offset + c)] = val;
        }
        b_in[r_idx] = bound;
    }

    // box bounds: |v_i| <= v_ss, xi in [0, 1]
    let mut lower = DVector::from_element(d, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(d, f64::INFINITY);
    for i in 0..big_n {
        for c in 0..m {
            lower[lay.v(i) + c] = -cfg.schedule.v_ss;
            upper[lay.v(i) + c] = cfg.schedule.v_ss;
        }
    }
    lower[lay.xi()] = 0.0;
    upper[lay.xi()] = 1.0;

    Ok(QpProblem {
        hessian,
        linear: DVector::zeros(d),
        a_eq,
        b_eq,
        a_in,
        b_in,
        lower: Some(lower),
        upper: Some(upper),
    })
}

fn extract_plan(x: &DVector<f64>, objective: f64, n: usize, m: usize, big_n: usize) -> Plan {
    let lay = Layout { n, m, horizon: big_n };
    let v = (0..big_n)
        .map(|i| DVector::from_fn(m, |r, _| x[lay.v(i) + r]))
        .collect();
    let z = (0..=big_n)
        .map(|i| DVector::from_fn(n, |r, _| x[lay.z(i) + r]))
        .collect();
    Plan {
        v,
        z,
        xi: x[lay.xi()],
        objective,
    }
}

/// Shifted candidate from the previous plan: drop the first move, append the
/// terminal controller's move and state, take the interpolation fully onto
/// the previous nominal trajectory.
fn shifted_plan(prev: &Plan, cfg: &MpcConfig, model: &NormalizedModel) -> Plan {
    let big_n = cfg.horizon;
    let k_f = cfg.schedule.k_f_matrix();
    let mut v: Vec<DVector<f64>> = prev.v[1..].to_vec();
    let z_last = prev.z[big_n].clone();
    v.push(&k_f * &z_last);
    let mut z: Vec<DVector<f64>> = prev.z[1..].to_vec();
    let z_next = &model.a * &z_last + &model.b_n * v.last().unwrap();
    z.push(z_next);
    Plan {
        v,
        z,
        xi: 1.0,
        objective: f64::NAN,
    }
}

/// Feasibility of a candidate plan against the step-k constraint rows; used
/// by the recursive-feasibility debug check.
pub fn plan_feasible(
    plan: &Plan,
    x_k: &DVector<f64>,
    z_prev: Option<&DVector<f64>>,
    k: usize,
    cfg: &MpcConfig,
    model: &NormalizedModel,
    tol: f64,
) -> bool {
    let big_n = cfg.horizon;
    // dynamics
    for i in 0..big_n {
        let pred = &model.a * &plan.z[i] + &model.b_n * &plan.v[i];
        if (&plan.z[i + 1] - pred).amax() > tol {
            return false;
        }
    }
    if !(-tol..=1.0 + tol).contains(&plan.xi) {
        return false;
    }
    // initialization: z_0 = (1 - xi) x_k + xi z_prev past the first step,
    // z_0 = x_k and xi = 0 at k = 0
    match (k, z_prev) {
        (0, _) => {
            if (&plan.z[0] - x_k).amax() > tol || plan.xi.abs() > tol {
                return false;
            }
        }
        (_, Some(zp)) => {
            let interp = x_k * (1.0 - plan.xi) + zp * plan.xi;
            let scale = 1.0 + x_k.amax().max(zp.amax());
            if (&plan.z[0] - interp).amax() > tol * scale {
                return false;
            }
        }
        (_, None) => return false,
    }
    for (i, v) in plan.v.iter().enumerate() {
        if v.amax() > cfg.schedule.v_ss + tol {
            return false;
        }
        if !cfg.schedule.z_at(i + k).contains(&plan.z[i], tol) {
            return false;
        }
    }
    cfg.schedule.z_f.contains(&plan.z[big_n], tol)
}

/// One control step: solve, apply the saturated input, store the shifted
/// initialization anchor. On solver failure past k = 0 the shifted previous
/// plan is applied (feasible by construction).
pub fn step(
    x_k: &DVector<f64>,
    state: &mut ControllerState,
    cfg: &MpcConfig,
    model: &NormalizedModel,
) -> Result<StepResult> {
    let t0 = std::time::Instant::now();
    let prob = build_problem(x_k, state, cfg, model)?;
    let sol = qp_solve(&prob, 1e-8)?;
    let n = model.n();
    let m = model.m();

    let (plan, status) = if sol.status.kind == SolveStatusKind::Optimal {
        (
            extract_plan(&sol.x, sol.objective, n, m, cfg.horizon),
            StepStatus::Optimal,
        )
    } else {
        let prev = state.last_plan.as_ref().ok_or_else(|| {
            Error::Infeasible(format!(
                "QP failed at k = 0 with status {:?}: initial state infeasible",
                sol.status.kind
            ))
        })?;
        state.fallback_count += 1;
        (shifted_plan(prev, cfg, model), StepStatus::Fallback)
    };

    debug_assert!(
        status == StepStatus::Fallback
            || plan_feasible(
                &plan,
                x_k,
                state.z_prev_1.as_ref(),
                state.k,
                cfg,
                model,
                1e-6,
            ),
        "optimal plan violates constraints"
    );

    let v0 = plan.v[0].clone();
    let z0 = plan.z[0].clone();
    let ones = DVector::from_element(m, 1.0);
    let u_norm = saturate(&(&v0 + &cfg.k_gain * (x_k - &z0)), &ones)?;
    let u_applied = model.denormalize_input(&u_norm);

    state.z_prev_1 = Some(plan.z[1].clone());
    state.k += 1;
    let objective = plan.objective;
    let xi = plan.xi;
    state.last_plan = Some(plan);

    Ok(StepResult {
        u_applied,
        v0,
        z0,
        xi,
        objective,
        solve_time: t0.elapsed().as_secs_f64(),
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_fixtures::*;
    use crate::prs::prs_schedule;
    use crate::tightening::{build_schedule, Polytope};
    use approx::assert_relative_eq;

    const TR_PW: f64 = 6.5016108e-4;
    const HAT_LAMBDA: f64 = 0.6752456250;

    fn cstr_setup() -> (NormalizedModel, MpcConfig) {
        let model = cstr().normalize();
        let p = cstr_published_p();
        let k = model.normalize_gain(&cstr_published_gain());
        let prs = prs_schedule(HAT_LAMBDA, TR_PW, 0.2, 60).unwrap();
        let state_poly = Polytope::new(
            &DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            &DVector::from_row_slice(&[0.25]),
        )
        .unwrap();
        let q = DMatrix::from_partial_diagonal(2, 2, &[20.0, 100.0]);
        let r = DMatrix::from_element(1, 1, 0.1);
        let sched = build_schedule(&model, &p, &prs, &state_poly, &q, &r, 0.96).unwrap();
        let cfg = MpcConfig::new(15, q, r, 0.2, k, sched).unwrap();
        (model, cfg)
    }

    #[test]
    fn layout_dimensions_toy() {
        let lay = Layout {
            n: 1,
            m: 1,
            horizon: 1,
        };
        assert_eq!(lay.dim(), 4); // v_0, z_0, z_1, xi
        assert_eq!(lay.v(0), 0);
        assert_eq!(lay.z(0), 1);
        assert_eq!(lay.z(1), 2);
        assert_eq!(lay.xi(), 3);
    }

    #[test]
    fn xi_column_structure() {
        let (model, cfg) = cstr_setup();
        let mut state = ControllerState::new();
        state.k = 1;
        state.z_prev_1 = Some(DVector::from_row_slice(&[0.4, 0.1]));
        let x = DVector::from_row_slice(&[0.5, 0.2]);
        let prob = build_problem(&x, &state, &cfg, &model).unwrap();
        let xi_col = prob.hessian.ncols() - 1;
        // xi appears only in the interpolation equality rows and its own
        // Hessian diagonal
        for r in 0..prob.hessian.nrows() {
            if r != xi_col {
                assert_eq!(prob.hessian[(r, xi_col)], 0.0);
                assert_eq!(prob.hessian[(xi_col, r)], 0.0);
            }
        }
        assert!(prob.hessian[(xi_col, xi_col)] > 0.0);
        let n_dyn = model.n() * cfg.horizon;
        for r in 0..prob.a_eq.nrows() {
            if r < n_dyn {
                assert_eq!(prob.a_eq[(r, xi_col)], 0.0);
            }
        }
        for r in 0..prob.a_in.nrows() {
            assert_eq!(prob.a_in[(r, xi_col)], 0.0);
        }
    }

    #[test]
    fn scenario1_initial_state_feasible() {
        let (model, cfg) = cstr_setup();
        let mut state = ControllerState::new();
        let x0 = DVector::from_row_slice(&[0.5, 0.2]);
        let out = step(&x0, &mut state, &cfg, &model).unwrap();
        assert_eq!(out.status, StepStatus::Optimal);
        assert_eq!(out.xi, 0.0); // pinned at k = 0
        assert!(out.u_applied.amax() <= 25.0);
        assert!(state.z_prev_1.is_some());
    }

    #[test]
    fn zero_noise_rollout_converges_and_telescopes() {
        let (model, cfg) = cstr_setup();
        let mut state = ControllerState::new();
        let mut x = DVector::from_row_slice(&[0.5, 0.2]);
        let mut prev_obj: Option<(f64, DVector<f64>, DVector<f64>)> = None;
        for k in 0..220 {
            let out = step(&x, &mut state, &cfg, &model).unwrap();
            assert_eq!(out.status, StepStatus::Optimal, "failed at k = {k}");
            // hard input constraint in actual units
            assert!(out.u_applied.amax() <= 25.0 + 1e-12);
            if let Some((obj, z0, v0)) = prev_obj.take() {
                let stage = (z0.transpose() * &cfg.q * &z0)[(0, 0)]
                    + (v0.transpose() * &cfg.r * &v0)[(0, 0)];
                let rho_next = rho_schedule(state.k - 1, &cfg);
                assert!(
                    out.objective <= obj - stage + rho_next + 1e-6,
                    "telescoping violated at k = {k}: {} > {}",
                    out.objective,
                    obj - stage + rho_next
                );
            }
            prev_obj = Some((out.objective, out.z0.clone(), out.v0.clone()));
            // true dynamics, zero noise, normalized saturation
            let u_norm = model.normalize_input(&out.u_applied);
            x = &model.a * &x + &model.b_n * &u_norm;
        }
        // nominal convergence
        let z0 = state.last_plan.as_ref().unwrap().z[0].clone();
        assert!(z0.norm() <= 1e-3, "|z_0| = {} at k = 220", z0.norm());
    }

    #[test]
    fn disturbance_spike_keeps_input_bounded() {
        let (model, cfg) = cstr_setup();
        let mut state = ControllerState::new();
        let mut x = DVector::from_row_slice(&[0.5, 0.2]);
        for k in 0..20 {
            let out = step(&x, &mut state, &cfg, &model).unwrap();
            assert!(out.u_applied.amax() <= 25.0 + 1e-12);
            let u_norm = model.normalize_input(&out.u_applied);
            x = &model.a * &x + &model.b_n * &u_norm;
            if k == 5 {
                // inject a gigantic disturbance
                x += DVector::from_row_slice(&[3.0, -2.0]);
            }
        }
    }

    #[test]
    fn rho_schedule_values() {
        let (_, mut cfg) = cstr_setup();
        cfg.rho0 = 1000.0;
        cfg.gamma = 0.9;
        assert_relative_eq!(rho_schedule(0, &cfg), 1000.0);
        assert_relative_eq!(rho_schedule(10, &cfg), 348.6784401, epsilon = 1e-6);
        // partial sums bounded by rho0/(1-gamma)
        let total: f64 = (0..10_000).map(|k| rho_schedule(k, &cfg)).sum();
        assert!(total <= 1000.0 / 0.1 + 1e-6);
    }

    #[test]
    fn interpolation_identity_closed_loop() {
        // e_{0|k+1} = xi_{k+1} e_{1|k}: with the stored anchor, the new
        // nominal initial state interpolates between measurement and plan
        let (model, cfg) = cstr_setup();
        let mut state = ControllerState::new();
        let mut x = DVector::from_row_slice(&[0.5, 0.2]);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let z_prev_1 = state.z_prev_1.clone();
            let out = step(&x, &mut state, &cfg, &model).unwrap();
            if let Some(zp) = z_prev_1 {
                let interp = &x * (1.0 - out.xi) + &zp * out.xi;
                assert_relative_eq!((out.z0 - interp).amax(), 0.0, epsilon = 1e-6);
            }
            let u_norm = model.normalize_input(&out.u_applied);
            let w = DVector::from_fn(2, |_, _| {
                let g: f64 = rng.sample(rand_distr::StandardNormal);
                g * 0.003
            });
            x = &model.a * &x + &model.b_n * &u_norm + w;
        }
    }

    #[test]
    fn noisy_runs_stay_feasible() {
        let (model, cfg) = cstr_setup();
        use rand::{Rng, SeedableRng};
        for seed in 0..20 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut state = ControllerState::new();
            let mut x = DVector::from_row_slice(&[0.5, 0.2]);
            for _ in 0..50 {
                let out = step(&x, &mut state, &cfg, &model).unwrap();
                assert_eq!(out.status, StepStatus::Optimal);
                let u_norm = model.normalize_input(&out.u_applied);
                let w = DVector::from_fn(2, |_, _| {
                    let g: f64 = rng.sample(rand_distr::StandardNormal);
                    g * 0.003
                });
                x = &model.a * &x + &model.b_n * &u_norm + w;
            }
        }
    }
}

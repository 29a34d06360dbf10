//! Monte Carlo closed-loop harness: disturbance samplers, scenario presets,
//! trajectory rollouts of the true saturated dynamics, report aggregation,
//! and standalone validation of the error-moment bounds.
//!
//! Randomness is counter-based: every disturbance draw is keyed by
//! (global seed, trajectory index, step), so parallel and serial runs agree
//! bitwise and the aggregation order never affects the report.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{step, ControllerState, MpcConfig, StepStatus};
use crate::model::NormalizedModel;
use crate::offline::ContractionCertificate;
use crate::prs::{
    effective_lambda, prs_schedule, region_of_linearity, select_hat_lambda, trace_pw, PrsSchedule,
};
use crate::tightening::{build_schedule, Polytope};
use crate::{Error, Result};

/// Disturbance families; all are zero mean with second moment `W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceKind {
    Gaussian,
    Uniform,
    Laplace,
}

/// Disturbance description: family plus covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub kind: DisturbanceKind,
    pub w: Vec<Vec<f64>>,
}

impl DisturbanceSpec {
    pub fn new(kind: DisturbanceKind, w: &DMatrix<f64>) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::contract("DisturbanceSpec: W must be square"));
        }
        if (w - w.transpose()).amax() > 1e-12 * (1.0 + w.amax()) {
            return Err(Error::contract("DisturbanceSpec: W must be symmetric"));
        }
        Ok(DisturbanceSpec {
            kind,
            w: (0..w.nrows())
                .map(|i| (0..w.ncols()).map(|j| w[(i, j)]).collect())
                .collect(),
        })
    }

    pub fn w_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(
            self.w.len(),
            self.w[0].len(),
            self.w.iter().flatten().copied(),
        )
    }

    /// Factor `L` with `L L' = W`; tolerates singular W via eigenvalue
    /// clipping (W = 0 gives L = 0).
    pub fn factor(&self) -> Result<DMatrix<f64>> {
        let w = self.w_matrix();
        if let Some(chol) = w.clone().cholesky() {
            return Ok(chol.l());
        }
        let eig = w.symmetric_eigen();
        if eig.eigenvalues.iter().any(|&x| x < -1e-12) {
            return Err(Error::contract("DisturbanceSpec: W must be PSD"));
        }
        let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0).sqrt()));
        Ok(&eig.eigenvectors * sqrt)
    }

    /// One draw keyed by (seed, trajectory, step).
    pub fn sample(&self, factor: &DMatrix<f64>, seed: u64, traj: u64, step: u64) -> DVector<f64> {
        let mut rng = counter_rng(seed, traj, step);
        let n = factor.nrows();
        let z = DVector::from_iterator(n, (0..n).map(|_| standardized(self.kind, &mut rng)));
        factor * z
    }
}

/// ChaCha stream keyed by a (seed, trajectory, step) counter; the tag words
/// separate these streams from any other use of the same seed.
fn counter_rng(seed: u64, traj: u64, step: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&traj.to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..32].copy_from_slice(&0x5a_5d_4d_50_43_00_00_01u64.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Zero-mean unit-variance scalar draw of the requested family.
fn standardized(kind: DisturbanceKind, rng: &mut ChaCha8Rng) -> f64 {
    match kind {
        DisturbanceKind::Gaussian => rng.sample(StandardNormal),
        DisturbanceKind::Uniform => {
            let s = 3.0f64.sqrt();
            rng.random_range(-s..s)
        }
        DisturbanceKind::Laplace => {
            // inverse CDF; variance 2 b^2 = 1
            let b = std::f64::consts::FRAC_1_SQRT_2;
            let u: f64 = rng.random_range(-0.5..0.5);
            -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
        }
    }
}

/// One closed-loop benchmark case: probabilistic state constraints, initial
/// deviation, risk level, trajectory length, and default trajectory count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub state_poly: Polytope,
    pub x0: Vec<f64>,
    pub epsilon: f64,
    pub t_steps: usize,
    pub n_traj: usize,
}

impl Scenario {
    pub fn x0_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.x0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.epsilon && self.epsilon < 1.0) {
            return Err(Error::Config("Scenario: epsilon must lie in (0, 1)".into()));
        }
        if self.t_steps < 1 || self.n_traj < 1 {
            return Err(Error::Config("Scenario: need t_steps, n_traj >= 1".into()));
        }
        if self.x0.len() != self.state_poly.dim() {
            return Err(Error::Config("Scenario: x0 dimension mismatch".into()));
        }
        Ok(())
    }
}

/// CSTR benchmark scenarios 1-4 (deviation coordinates, epsilon = 0.2,
/// 100 steps, 1000 trajectories).
pub fn scenario_preset(index: usize) -> Result<Scenario> {
    let (name, rows, offsets, x0): (&str, Vec<[f64; 2]>, Vec<f64>, [f64; 2]) = match index {
        1 => ("s1", vec![[0.0, 1.0]], vec![0.25], [0.5, 0.2]),
        2 => (
            "s2",
            vec![[1.0, 0.0], [0.0, 1.0], [2.0, 1.0]],
            vec![0.75, 0.25, 1.5],
            [0.5, 0.2],
        ),
        3 => (
            "s3",
            vec![[1.0, 0.0], [0.0, 1.0], [2.0, 1.0], [-1.0, 0.0], [0.0, -1.0]],
            vec![0.75, 0.25, 1.5, 0.5, 0.25],
            [0.5, 0.2],
        ),
        4 => ("s4", vec![[0.0, 1.0]], vec![0.15], [0.5, 0.12]),
        _ => return Err(Error::Config(format!("unknown scenario preset {index}"))),
    };
    let h = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]);
    Ok(Scenario {
        name: name.into(),
        state_poly: Polytope::new(&h, &DVector::from_vec(offsets))?,
        x0: x0.to_vec(),
        epsilon: 0.2,
        t_steps: 100,
        n_traj: 1000,
    })
}

/// Tightening variant: the global contraction rate or the refined effective
/// rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Lambda,
    LambdaStar,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Lambda => "lambda",
            Arm::LambdaStar => "lambda_star",
        }
    }
}

/// Everything the simulator needs besides the scenario: plant, certificate
/// (normalized units), MPC weights, steady-state input margin, horizon.
/// The stored `r` and `v_ss` are in normalized input units.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub model: NormalizedModel,
    pub cert: ContractionCertificate,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub v_ss: f64,
    pub horizon: usize,
}

impl SimSetup {
    /// Builds from actuator-unit data: `r_actual` weights the actual input
    /// (u = scale .* v gives R_n = diag(scale) R diag(scale)); `v_ss_actual`
    /// is the steady-state input bound in actuator units.
    pub fn new(
        model: &crate::model::LtiModel,
        cert: ContractionCertificate,
        q: DMatrix<f64>,
        r_actual: DMatrix<f64>,
        v_ss_actual: f64,
        horizon: usize,
    ) -> Result<Self> {
        let norm = model.normalize();
        let m = norm.m();
        if r_actual.nrows() != m || r_actual.ncols() != m {
            return Err(Error::contract("SimSetup: R dimension mismatch"));
        }
        let scale = DMatrix::from_diagonal(&norm.scale);
        let r = &scale * &r_actual * &scale;
        // conservative for non-uniform bounds: valid in every channel
        let v_ss = norm
            .scale
            .iter()
            .map(|s| v_ss_actual / s)
            .fold(f64::INFINITY, f64::min);
        if !(0.0 < v_ss && v_ss < 1.0) {
            return Err(Error::contract(
                "SimSetup: v_ss must leave margin inside the saturation bound",
            ));
        }
        Ok(SimSetup {
            model: norm,
            cert,
            q,
            r,
            v_ss,
            horizon,
        })
    }
}

/// Per-arm offline artifacts ready for closed-loop use.
#[derive(Debug, Clone)]
pub struct ArmArtifacts {
    pub arm: Arm,
    pub hat_lambda: f64,
    pub prs: PrsSchedule,
    pub cfg: MpcConfig,
}

/// Builds one arm's tightening and controller configuration. Returns
/// `Error::Infeasible` when the tightened terminal set is empty — a
/// reportable outcome, not a bug.
pub fn build_arm(setup: &SimSetup, scenario: &Scenario, arm: Arm) -> Result<ArmArtifacts> {
    scenario.validate()?;
    let p = setup.cert.p_matrix();
    let k = setup.cert.k_matrix();
    let tr_pw = trace_pw(&p, &setup.model.w)?;
    let hat_lambda = match arm {
        Arm::Lambda => setup.cert.lambda,
        Arm::LambdaStar => {
            let region = region_of_linearity(&p, &k, setup.v_ss)?;
            select_hat_lambda(
                effective_lambda(setup.cert.lambda, setup.cert.lambda_l, region.r_l, tr_pw)?,
                setup.cert.lambda,
            )
        }
    };
    let prs = prs_schedule(hat_lambda, tr_pw, scenario.epsilon, setup.horizon.max(64))?;
    let sched = build_schedule(
        &setup.model,
        &p,
        &prs,
        &scenario.state_poly,
        &setup.q,
        &setup.r,
        setup.v_ss,
    )?;
    let cfg = MpcConfig::new(
        setup.horizon,
        setup.q.clone(),
        setup.r.clone(),
        scenario.epsilon,
        k,
        sched,
    )?;
    Ok(ArmArtifacts {
        arm,
        hat_lambda,
        prs,
        cfg,
    })
}

/// One closed-loop trajectory record. States/inputs are stored per step;
/// inputs are in actuator units. Solve time is kept out of the CSV so
/// traces stay byte-reproducible.
#[derive(Debug, Clone)]
pub struct Trace {
    /// x_0..x_T
    pub x: Vec<DVector<f64>>,
    /// z_{0|0}..z_{0|T-1} (nominal anchors, for error diagnostics)
    pub z0: Vec<DVector<f64>>,
    /// u_0..u_{T-1} in actuator units
    pub u: Vec<DVector<f64>>,
    pub xi: Vec<f64>,
    pub stage_costs: Vec<f64>,
    pub cost: f64,
    pub fallbacks: usize,
    pub solve_time_total: f64,
}

impl Trace {
    /// CSV export: `k,x1..xn,u1..um,xi,stage_cost` with a final state-only
    /// row at k = T.
    pub fn to_csv(&self) -> String {
        let n = self.x[0].len();
        let m = self.u[0].len();
        let mut out = String::from("k");
        for i in 0..n {
            out.push_str(&format!(",x{}", i + 1));
        }
        for j in 0..m {
            out.push_str(&format!(",u{}", j + 1));
        }
        out.push_str(",xi,stage_cost\n");
        for k in 0..self.u.len() {
            out.push_str(&format!("{k}"));
            for i in 0..n {
                out.push_str(&format!(",{:.17e}", self.x[k][i]));
            }
            for j in 0..m {
                out.push_str(&format!(",{:.17e}", self.u[k][j]));
            }
            out.push_str(&format!(",{:.17e},{:.17e}\n", self.xi[k], self.stage_costs[k]));
        }
        let last = self.x.len() - 1;
        out.push_str(&format!("{last}"));
        for i in 0..n {
            out.push_str(&format!(",{:.17e}", self.x[last][i]));
        }
        for _ in 0..m {
            out.push(',');
        }
        out.push_str(&format!(",,{:.17e}\n", self.stage_costs[last]));
        out
    }
}

/// Rolls one closed-loop trajectory: measure, solve, apply the saturated
/// input, propagate the true dynamics with a sampled disturbance.
pub fn rollout(
    model: &NormalizedModel,
    cfg: &MpcConfig,
    scenario: &Scenario,
    dist: &DisturbanceSpec,
    seed: u64,
    traj: u64,
) -> Result<Trace> {
    let factor = dist.factor()?;
    let t = scenario.t_steps;
    let mut x = scenario.x0_vector();
    let mut state = ControllerState::new();
    let mut trace = Trace {
        x: Vec::with_capacity(t + 1),
        z0: Vec::with_capacity(t),
        u: Vec::with_capacity(t),
        xi: Vec::with_capacity(t),
        stage_costs: Vec::with_capacity(t + 1),
        cost: 0.0,
        fallbacks: 0,
        solve_time_total: 0.0,
    };
    for k in 0..t {
        let out = step(&x, &mut state, cfg, model)?;
        let u_norm = model.normalize_input(&out.u_applied);
        let stage = (x.transpose() * &cfg.q * &x)[(0, 0)]
            + (u_norm.transpose() * &cfg.r * &u_norm)[(0, 0)];
        trace.x.push(x.clone());
        trace.z0.push(out.z0.clone());
        trace.u.push(out.u_applied.clone());
        trace.xi.push(out.xi);
        trace.stage_costs.push(stage);
        trace.cost += stage;
        trace.solve_time_total += out.solve_time;
        if out.status == StepStatus::Fallback {
            trace.fallbacks += 1;
        }
        let w = dist.sample(&factor, seed, traj, k as u64);
        x = &model.a * &x + &model.b_n * &u_norm + w;
    }
    let terminal = (x.transpose() * &cfg.q * &x)[(0, 0)];
    trace.x.push(x);
    trace.stage_costs.push(terminal);
    trace.cost += terminal;
    Ok(trace)
}

/// Aggregated results for one arm. Infeasible arms carry no statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub feasible: bool,
    pub infeasible_reason: Option<String>,
    pub hat_lambda: Option<f64>,
    pub mean_cost: Option<f64>,
    pub cost_std: Option<f64>,
    /// `violation_freq[row][k]`: fraction of trajectories violating
    /// constraint row at step k.
    pub violation_freq: Vec<Vec<f64>>,
    pub max_violation_freq: f64,
    /// Fraction of trajectories with `e_k' P e_k <= r_k` per step.
    pub coverage: Vec<f64>,
    pub fallback_count: usize,
    pub hard_failures: usize,
    pub input_bound_violations: usize,
}

/// Full deterministic simulation report (no wall-clock data).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub schema: u32,
    pub scenario: String,
    pub n_traj: usize,
    pub t_steps: usize,
    pub seed: u64,
    pub disturbance: DisturbanceKind,
    pub arms: Vec<ArmReport>,
}

/// Wall-clock summary, reported separately so canonical outputs stay
/// byte-identical across runs.
#[derive(Debug, Clone)]
pub struct ArmTiming {
    pub arm: String,
    pub mean_solve_time: f64,
    pub total_steps: usize,
}

/// Runs `n_traj` independent rollouts per arm in parallel and aggregates
/// with a fixed reduction order. Per-trajectory hard failures are counted,
/// not fatal; a design-level infeasibility marks the whole arm.
pub fn monte_carlo(
    setup: &SimSetup,
    scenario: &Scenario,
    arms: &[Arm],
    dist: &DisturbanceSpec,
    n_traj: usize,
    seed: u64,
) -> Result<(SimulationReport, Vec<ArmTiming>)> {
    if n_traj < 1 {
        return Err(Error::Config("monte_carlo: n_traj must be >= 1".into()));
    }
    let mut reports = Vec::new();
    let mut timings = Vec::new();
    for &arm in arms {
        let arts = match build_arm(setup, scenario, arm) {
            Ok(a) => a,
            Err(Error::Infeasible(msg)) => {
                reports.push(ArmReport {
                    arm: arm.name().into(),
                    feasible: false,
                    infeasible_reason: Some(msg),
                    hat_lambda: None,
                    mean_cost: None,
                    cost_std: None,
                    violation_freq: Vec::new(),
                    max_violation_freq: 0.0,
                    coverage: Vec::new(),
                    fallback_count: 0,
                    hard_failures: 0,
                    input_bound_violations: 0,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let (rep, timing) = run_arm(setup, scenario, &arts, dist, n_traj, seed)?;
        reports.push(rep);
        timings.push(timing);
    }
    Ok((
        SimulationReport {
            schema: 1,
            scenario: scenario.name.clone(),
            n_traj,
            t_steps: scenario.t_steps,
            seed,
            disturbance: dist.kind,
            arms: reports,
        },
        timings,
    ))
}

fn run_arm(
    setup: &SimSetup,
    scenario: &Scenario,
    arts: &ArmArtifacts,
    dist: &DisturbanceSpec,
    n_traj: usize,
    seed: u64,
) -> Result<(ArmReport, ArmTiming)> {
    let t = scenario.t_steps;
    let rows = scenario.state_poly.rows();
    let h = scenario.state_poly.matrix();
    let offs = scenario.state_poly.offsets();
    let p = setup.cert.p_matrix();
    let u_max = &setup.model.scale;

    // ordered collection keeps aggregation deterministic regardless of
    // thread scheduling
    let per_traj: Vec<Result<Trace>> = (0..n_traj)
        .into_par_iter()
        .map(|traj| rollout(&setup.model, &arts.cfg, scenario, dist, seed, traj as u64))
        .collect();

    let mut costs = Vec::with_capacity(n_traj);
    let mut viol = vec![vec![0usize; t + 1]; rows];
    let mut covered = vec![0usize; t];
    let mut fallback_count = 0;
    let mut hard_failures = 0;
    let mut input_bound_violations = 0;
    let mut solve_time = 0.0;
    let mut solve_steps = 0;
    for res in &per_traj {
        let trace = match res {
            Ok(tr) => tr,
            Err(_) => {
                hard_failures += 1;
                continue;
            }
        };
        costs.push(trace.cost);
        fallback_count += trace.fallbacks;
        solve_time += trace.solve_time_total;
        solve_steps += trace.u.len();
        for (k, x) in trace.x.iter().enumerate() {
            let hx = &h * x;
            for j in 0..rows {
                if hx[j] > offs[j] + 1e-12 {
                    viol[j][k] += 1;
                }
            }
        }
        for (k, u) in trace.u.iter().enumerate() {
            for j in 0..u.len() {
                if u[j].abs() > u_max[j] {
                    input_bound_violations += 1;
                }
            }
            let e = &trace.x[k] - &trace.z0[k];
            let energy = (e.transpose() * &p * &e)[(0, 0)];
            let r_k = if k < arts.prs.radii.len() {
                arts.prs.radii[k]
            } else {
                crate::prs::expectation_bound(k, arts.prs.hat_lambda, arts.prs.tr_pw)
                    / arts.prs.epsilon
            };
            if energy <= r_k * (1.0 + 1e-9) + 1e-12 {
                covered[k] += 1;
            }
        }
    }

    let n_ok = costs.len();
    let (mean_cost, cost_std) = if n_ok > 0 {
        let mean = costs.iter().sum::<f64>() / n_ok as f64;
        let var = if n_ok > 1 {
            costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n_ok - 1) as f64
        } else {
            0.0
        };
        (Some(mean), Some(var.sqrt()))
    } else {
        (None, None)
    };
    let denom = n_ok.max(1) as f64;
    let violation_freq: Vec<Vec<f64>> = viol
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / denom).collect())
        .collect();
    let max_violation_freq = violation_freq
        .iter()
        .flatten()
        .cloned()
        .fold(0.0f64, f64::max);
    let coverage = covered.iter().map(|&c| c as f64 / denom).collect();

    Ok((
        ArmReport {
            arm: arts.arm.name().into(),
            feasible: n_ok > 0,
            infeasible_reason: None,
            hat_lambda: Some(arts.hat_lambda),
            mean_cost,
            cost_std,
            violation_freq,
            max_violation_freq,
            coverage,
            fallback_count,
            hard_failures,
            input_bound_violations,
        },
        ArmTiming {
            arm: arts.arm.name().into(),
            mean_solve_time: if solve_steps > 0 {
                solve_time / solve_steps as f64
            } else {
                0.0
            },
            total_steps: solve_steps,
        },
    ))
}

/// Standalone moment/coverage validation of the raw error recursion from
/// e = 0 under a stress nominal-input policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub depth: usize,
    pub epsilon: f64,
    /// Estimated mean of `e_i' P e_i` (exact linear-loop moment plus the
    /// sampled saturation excess; see `validate_prs`).
    pub mean_energy: Vec<f64>,
    /// Moment bound `(1 - rate^i)/(1 - rate) * trPW`.
    pub bound: Vec<f64>,
    /// Empirical fraction with `e_i' P e_i <= r_i`.
    pub coverage: Vec<f64>,
}

impl CoverageReport {
    pub fn passes(&self, slack: f64) -> bool {
        self.mean_energy
            .iter()
            .zip(&self.bound)
            .all(|(m, b)| *m <= *b * (1.0 + 1e-9) + 1e-15)
            && self.coverage.iter().all(|c| *c >= 1.0 - self.epsilon - slack)
    }
}

/// Rolls the error recursion `e+ = f(e, v) + w` from e = 0 with nominal
/// inputs stressed over the admissible set (random corners of ±v_ss and
/// uniform interior points) and compares against the Markov schedule.
pub fn validate_prs(
    model: &NormalizedModel,
    p: &DMatrix<f64>,
    k_gain: &DMatrix<f64>,
    prs: &PrsSchedule,
    v_ss: f64,
    dist: &DisturbanceSpec,
    n_traj: usize,
    depth: usize,
    seed: u64,
) -> Result<CoverageReport> {
    if n_traj < 1 || depth < 1 {
        return Err(Error::Config("validate_prs: need n_traj, depth >= 1".into()));
    }
    if !(0.0 < v_ss && v_ss <= 1.0) {
        return Err(Error::Config("validate_prs: v_ss must lie in (0, 1]".into()));
    }
    let factor = dist.factor()?;
    let m = model.m();
    let n = model.n();
    let a_cl = &model.a + &model.b_n * k_gain;

    // Exact moments of the linear (never-saturating) closed loop; used as a
    // control variate. The moment bound can be nearly tight at stationarity,
    // so the raw sample mean would exceed it by sampling noise alone; the
    // variance-reduced estimator
    //   E[V_sat] = Tr(P Sigma_i) + E[V_sat - V_lin]
    // with V_lin driven by the same noise only samples the saturation excess.
    let mut lin_exact = Vec::with_capacity(depth + 1);
    let mut sigma = DMatrix::zeros(n, n);
    for _ in 0..=depth {
        lin_exact.push((p * &sigma).trace());
        sigma = &a_cl * sigma * a_cl.transpose() + &model.w;
    }

    let per_traj: Vec<Result<(Vec<f64>, Vec<usize>)>> = (0..n_traj)
        .into_par_iter()
        .map(|traj| {
            let mut e = DVector::zeros(n);
            let mut e_lin = DVector::zeros(n);
            let mut excess = Vec::with_capacity(depth + 1);
            let mut inside = Vec::with_capacity(depth + 1);
            for i in 0..=depth {
                let en = (e.transpose() * p * &e)[(0, 0)];
                let en_lin = (e_lin.transpose() * p * &e_lin)[(0, 0)];
                excess.push(en - en_lin);
                let r_i = prs.radii[i.min(prs.radii.len() - 1)];
                inside.push((en <= r_i) as usize);
                if i == depth {
                    break;
                }
                // stress policy: corner of the admissible input set with
                // probability 1/2, uniform interior point otherwise
                let mut rng = counter_rng(seed ^ 0x7072_7376, traj as u64, i as u64);
                let v = DVector::from_iterator(
                    m,
                    (0..m).map(|_| {
                        if rng.random::<bool>() {
                            if rng.random::<bool>() {
                                v_ss
                            } else {
                                -v_ss
                            }
                        } else {
                            rng.random_range(-v_ss..v_ss)
                        }
                    }),
                );
                let w = dist.sample(&factor, seed, traj as u64, i as u64);
                e = crate::model::error_step(&e, &v, k_gain, model)? + &w;
                e_lin = &a_cl * e_lin + w;
            }
            Ok((excess, inside))
        })
        .collect();

    let mut mean_energy = lin_exact;
    let mut cov = vec![0usize; depth + 1];
    for res in per_traj {
        let (excess, inside) = res?;
        for i in 0..=depth {
            mean_energy[i] += excess[i] / n_traj as f64;
            cov[i] += inside[i];
        }
    }
    Ok(CoverageReport {
        depth,
        epsilon: prs.epsilon,
        mean_energy,
        bound: (0..=depth).map(|i| prs.expectation_bound(i)).collect(),
        coverage: cov.iter().map(|&c| c as f64 / n_traj as f64).collect(),
    })
}

/// Running average of the realized stage cost `l(x_k, phi(u_k))` along a
/// trace (diagnostic against the average-cost bound).
pub fn diagnostic_real_cost(trace: &Trace, q: &DMatrix<f64>, r: &DMatrix<f64>, model: &NormalizedModel) -> Vec<f64> {
    let mut out = Vec::with_capacity(trace.u.len());
    let mut acc = 0.0;
    for k in 0..trace.u.len() {
        let x = &trace.x[k];
        let u_norm = model.normalize_input(&trace.u[k]);
        acc += (x.transpose() * q * x)[(0, 0)] + (u_norm.transpose() * r * &u_norm)[(0, 0)];
        out.push(acc / (k + 1) as f64);
    }
    out
}

/// Asymptotic average-cost bound `(1 + 1/delta) * 4/(1 - hat_lambda) * Tr(S W)`
/// for terminal weight `S = alpha P`.
pub fn average_cost_bound(delta: f64, hat_lambda: f64, s: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    if !(delta > 0.0) || !(0.0 <= hat_lambda && hat_lambda < 1.0) {
        return Err(Error::contract(
            "average_cost_bound: need delta > 0 and hat_lambda in [0, 1)",
        ));
    }
    Ok((1.0 + 1.0 / delta) * 4.0 / (1.0 - hat_lambda) * trace_pw(s, w)?)
}

/// Minimal dependency-free SVG line plot: one polyline per series plus
/// dashed horizontal reference lines.
pub fn svg_line_plot(title: &str, series: &[(&str, &[f64])], hlines: &[f64]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const ML: f64 = 60.0;
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 40.0;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

    let mut ymin = hlines.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut ymax = hlines.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut xmax = 1.0f64;
    for (_, ys) in series {
        for &y in *ys {
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        xmax = xmax.max((ys.len().max(2) - 1) as f64);
    }
    if !ymin.is_finite() || !ymax.is_finite() {
        ymin = 0.0;
        ymax = 1.0;
    }
    if ymax - ymin < 1e-12 {
        ymax = ymin + 1.0;
    }
    let pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
    let sx = |x: f64| ML + x / xmax * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - ymin) / (ymax - ymin) * (H - MT - MB);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        W / 2.0
    );
    // axes
    s.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB,
        H - MB
    ));
    for frac in [0.0, 0.5, 1.0] {
        let y = ymin + frac * (ymax - ymin);
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>\n",
            ML - 6.0,
            sy(y) + 4.0,
            y
        ));
        let x = frac * xmax;
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{:.0}</text>\n",
            sx(x),
            H - MB + 16.0,
            x
        ));
    }
    for &hl in hlines {
        s.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{:.2}\" x2=\"{}\" y2=\"{:.2}\" stroke=\"gray\" \
             stroke-dasharray=\"6 4\"/>\n",
            sy(hl),
            W - MR,
            sy(hl)
        ));
    }
    for (idx, (name, ys)) in series.iter().enumerate() {
        let color = palette[idx % palette.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| format!("{:.2},{:.2}", sx(i as f64), sy(y)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" fill=\"{color}\">{name}</text>\n",
            W - MR - 120.0,
            MT + 16.0 * (idx as f64 + 1.0)
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_fixtures::{cstr, cstr_published_gain, cstr_published_p};
    use approx::assert_relative_eq;

    fn setup() -> SimSetup {
        let plant = cstr();
        let norm = plant.normalize();
        let cert = ContractionCertificate::from_matrices(
            &cstr_published_p(),
            &norm.normalize_gain(&cstr_published_gain()),
            0.9049,
            0.67035,
            Vec::new(),
        );
        SimSetup::new(
            &plant,
            cert,
            DMatrix::from_partial_diagonal(2, 2, &[20.0, 100.0]),
            DMatrix::from_element(1, 1, 0.1),
            24.0,
            15,
        )
        .unwrap()
    }

    fn gaussian_w() -> DisturbanceSpec {
        DisturbanceSpec::new(DisturbanceKind::Gaussian, &(DMatrix::identity(2, 2) * 9e-6)).unwrap()
    }

    #[test]
    fn samplers_match_first_two_moments() {
        let w = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        for kind in [
            DisturbanceKind::Gaussian,
            DisturbanceKind::Uniform,
            DisturbanceKind::Laplace,
        ] {
            let dist = DisturbanceSpec::new(kind, &w).unwrap();
            let factor = dist.factor().unwrap();
            let n = 200_000;
            let mut mean = DVector::zeros(2);
            let mut cov = DMatrix::zeros(2, 2);
            for i in 0..n {
                let s = dist.sample(&factor, 7, i, 0);
                mean += &s;
                cov += &s * s.transpose();
            }
            mean /= n as f64;
            cov /= n as f64;
            assert!(mean.amax() < 0.03, "{kind:?} mean {mean}");
            assert!((cov - &w).amax() < 0.1, "{kind:?} covariance off");
        }
    }

    #[test]
    fn counter_rng_is_keyed() {
        let dist = gaussian_w();
        let f = dist.factor().unwrap();
        assert_eq!(dist.sample(&f, 1, 2, 3), dist.sample(&f, 1, 2, 3));
        assert_ne!(dist.sample(&f, 1, 2, 3), dist.sample(&f, 1, 2, 4));
        assert_ne!(dist.sample(&f, 1, 2, 3), dist.sample(&f, 1, 3, 3));
        assert_ne!(dist.sample(&f, 1, 2, 3), dist.sample(&f, 2, 2, 3));
    }

    #[test]
    fn scenario_presets_match_benchmark() {
        let s1 = scenario_preset(1).unwrap();
        assert_eq!(s1.state_poly.rows(), 1);
        assert_eq!(s1.x0, vec![0.5, 0.2]);
        assert_eq!(s1.t_steps, 100);
        assert_eq!(s1.n_traj, 1000);
        assert_relative_eq!(s1.epsilon, 0.2);
        assert_eq!(scenario_preset(2).unwrap().state_poly.rows(), 3);
        assert_eq!(scenario_preset(3).unwrap().state_poly.rows(), 5);
        let s4 = scenario_preset(4).unwrap();
        assert_eq!(s4.x0, vec![0.5, 0.12]);
        assert!(scenario_preset(5).is_err());
    }

    #[test]
    fn arm_rates() {
        let setup = setup();
        let s1 = scenario_preset(1).unwrap();
        let refined = build_arm(&setup, &s1, Arm::LambdaStar).unwrap();
        assert_relative_eq!(refined.hat_lambda, 0.6752, epsilon = 1e-3);
        let global = build_arm(&setup, &s1, Arm::Lambda).unwrap();
        assert_relative_eq!(global.hat_lambda, 0.9049);
        // looser tightening for the refined arm on the binding row
        let z_r = refined.cfg.schedule.z_at(1000).offsets()[0];
        let z_g = global.cfg.schedule.z_at(1000).offsets()[0];
        assert!(z_r > z_g, "refined arm should erode less: {z_r} vs {z_g}");
    }

    #[test]
    fn scenario4_terminal_feasibility_splits_arms() {
        let setup = setup();
        let s4 = scenario_preset(4).unwrap();
        match build_arm(&setup, &s4, Arm::Lambda) {
            Err(Error::Infeasible(_)) => {}
            other => panic!("expected infeasible lambda arm, got {other:?}"),
        }
        assert!(build_arm(&setup, &s4, Arm::LambdaStar).is_ok());
    }

    #[test]
    fn rollout_is_bitwise_reproducible() {
        let setup = setup();
        let s1 = scenario_preset(1).unwrap();
        let arts = build_arm(&setup, &s1, Arm::LambdaStar).unwrap();
        let dist = gaussian_w();
        let a = rollout(&setup.model, &arts.cfg, &s1, &dist, 42, 0).unwrap();
        let b = rollout(&setup.model, &arts.cfg, &s1, &dist, 42, 0).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let c = rollout(&setup.model, &arts.cfg, &s1, &dist, 43, 0).unwrap();
        assert_ne!(a.to_csv(), c.to_csv());
    }

    #[test]
    fn zero_noise_single_trajectory() {
        let setup = setup();
        let mut s1 = scenario_preset(1).unwrap();
        s1.t_steps = 60;
        let arts = build_arm(&setup, &s1, Arm::LambdaStar).unwrap();
        let dist =
            DisturbanceSpec::new(DisturbanceKind::Gaussian, &DMatrix::zeros(2, 2)).unwrap();
        let (report, _) =
            monte_carlo(&setup, &s1, &[Arm::LambdaStar], &dist, 1, 0).unwrap();
        let arm = &report.arms[0];
        assert!(arm.feasible);
        assert_eq!(arm.cost_std, Some(0.0));
        assert_eq!(arm.hard_failures, 0);
        assert_eq!(arm.input_bound_violations, 0);
        assert_relative_eq!(arm.max_violation_freq, 0.0);
        // noise-free: the measured state tracks the nominal plan, so the
        // deviation stays inside every PRS level
        assert!(arm.coverage.iter().all(|&c| c == 1.0));
        let tr = rollout(&setup.model, &arts.cfg, &s1, &dist, 0, 0).unwrap();
        let avg = diagnostic_real_cost(&tr, &setup.q, &setup.r, &setup.model);
        assert!(avg.last().unwrap() < &(avg[0] * 0.2), "running average should decay");
    }

    #[test]
    fn monte_carlo_scenario1_orderings_and_violations() {
        let setup = setup();
        let s1 = scenario_preset(1).unwrap();
        let dist = gaussian_w();
        let n = 40;
        let (report, timings) = monte_carlo(
            &setup,
            &s1,
            &[Arm::LambdaStar, Arm::Lambda],
            &dist,
            n,
            1234,
        )
        .unwrap();
        assert_eq!(report.schema, 1);
        let refined = &report.arms[0];
        let global = &report.arms[1];
        for arm in [refined, global] {
            assert!(arm.feasible);
            assert_eq!(arm.hard_failures, 0);
            assert_eq!(arm.input_bound_violations, 0);
            let slack = 3.0 * (0.2f64 * 0.8 / n as f64).sqrt();
            assert!(
                arm.max_violation_freq <= 0.2 + slack,
                "violation rate {} too high",
                arm.max_violation_freq
            );
        }
        assert!(
            refined.mean_cost.unwrap() < global.mean_cost.unwrap(),
            "refined arm should be cheaper: {:?} vs {:?}",
            refined.mean_cost,
            global.mean_cost
        );
        assert_eq!(timings.len(), 2);
        assert_eq!(timings[0].total_steps, n * s1.t_steps);
    }

    #[test]
    fn monte_carlo_report_is_deterministic() {
        let setup = setup();
        let mut s1 = scenario_preset(1).unwrap();
        s1.t_steps = 30;
        let dist = gaussian_w();
        let run = || {
            let (report, _) =
                monte_carlo(&setup, &s1, &[Arm::LambdaStar], &dist, 8, 99).unwrap();
            serde_json::to_string_pretty(&report).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn prs_validation_gaussian() {
        let setup = setup();
        let p = setup.cert.p_matrix();
        let k = setup.cert.k_matrix();
        let prs = prs_schedule(0.6752456250, 6.5016108e-4, 0.2, 64).unwrap();
        let rep = validate_prs(
            &setup.model,
            &p,
            &k,
            &prs,
            0.96,
            &gaussian_w(),
            2000,
            30,
            5,
        )
        .unwrap();
        assert_relative_eq!(rep.coverage[0], 1.0);
        assert!(rep.passes(0.03), "coverage {:?}", rep.coverage);
        for (m, b) in rep.mean_energy.iter().zip(&rep.bound) {
            assert!(m <= b, "moment bound violated: {m} > {b}");
        }
    }

    #[test]
    fn prs_validation_is_distribution_free() {
        let setup = setup();
        let p = setup.cert.p_matrix();
        let k = setup.cert.k_matrix();
        let prs = prs_schedule(0.6752456250, 6.5016108e-4, 0.2, 64).unwrap();
        let w = DMatrix::identity(2, 2) * 9e-6;
        for kind in [DisturbanceKind::Uniform, DisturbanceKind::Laplace] {
            let dist = DisturbanceSpec::new(kind, &w).unwrap();
            let rep = validate_prs(&setup.model, &p, &k, &prs, 0.96, &dist, 1000, 20, 6).unwrap();
            assert!(rep.passes(0.04), "{kind:?} coverage {:?}", rep.coverage);
        }
    }

    #[test]
    fn average_bound_is_linear_in_w() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let w = DMatrix::identity(2, 2) * 9e-6;
        let b1 = average_cost_bound(0.5, 0.7, &s, &w).unwrap();
        let b4 = average_cost_bound(0.5, 0.7, &s, &(w * 4.0)).unwrap();
        assert_relative_eq!(b4, 4.0 * b1, epsilon = 1e-12);
        assert!(average_cost_bound(0.0, 0.7, &s, &DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn svg_plot_smoke() {
        let ys = [0.0, 1.0, 0.5, 2.0];
        let svg = svg_line_plot("test", &[("series", &ys)], &[1.5]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn trace_csv_layout() {
        let setup = setup();
        let mut s1 = scenario_preset(1).unwrap();
        s1.t_steps = 3;
        let arts = build_arm(&setup, &s1, Arm::LambdaStar).unwrap();
        let dist = gaussian_w();
        let tr = rollout(&setup.model, &arts.cfg, &s1, &dist, 0, 0).unwrap();
        let csv = tr.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "k,x1,x2,u1,xi,stage_cost");
        assert_eq!(csv.lines().count(), 1 + 3 + 1);
    }
}

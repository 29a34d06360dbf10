//! Batch front end: offline design, closed-loop simulation, scenario
//! comparison, and artifact validation. All canonical outputs are
//! schema-versioned JSON/CSV; wall-clock timings go to a separate file so
//! reports stay byte-reproducible.
//!
//! Exit codes: 0 success (including infeasibility recorded as a result),
//! 1 usage error, 2 design failure, 3 validation failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use sa_smpc::model::LtiModel;
use sa_smpc::offline::{design_certificate, verify_certificate, ContractionCertificate, DesignOptions};
use sa_smpc::prs::{effective_lambda, prs_schedule, region_of_linearity, select_hat_lambda, trace_pw};
use sa_smpc::sim::{
    build_arm, monte_carlo, rollout, scenario_preset, svg_line_plot, validate_prs, Arm,
    DisturbanceKind, DisturbanceSpec, Scenario, SimSetup,
};
use sa_smpc::tightening::{minimal_terminal_alpha, verify_terminal_weight, TighteningSchedule};
use sa_smpc::{Error, Result};

#[derive(Parser)]
#[command(name = "sa-smpc", version, about = "Saturation-aware stochastic MPC toolkit")]
struct Cli {
    /// Worker threads for Monte Carlo (default: all cores)
    #[arg(long, global = true, env = "SA_SMPC_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the contraction certificate and tightening schedules
    Design(DesignArgs),
    /// Monte Carlo closed-loop simulation of one scenario
    Simulate(SimulateArgs),
    /// Run scenarios with both tightening arms and tabulate costs
    Compare(CompareArgs),
    /// Check certificate, embedding, terminal weight, and PRS coverage
    Validate(ValidateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Model JSON path, or "cstr" for the built-in benchmark plant
    #[arg(long, default_value = "cstr")]
    model: String,
    /// Certificate JSON path, or "reference" for the built-in CSTR
    /// certificate. Default: reuse <out>/certificate.json, else design one.
    #[arg(long)]
    certificate: Option<String>,
    /// Output directory (created if missing)
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// State-cost diagonal entries
    #[arg(long, value_delimiter = ',', default_value = "20,100")]
    q: Vec<f64>,
    /// Input-cost diagonal entries, in actuator units
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    r: Vec<f64>,
    /// Steady-state nominal input bound, in actuator units
    #[arg(long, default_value_t = 24.0)]
    v_ss: f64,
    /// Prediction horizon
    #[arg(long, default_value_t = 15)]
    horizon: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct DesignArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Scenario whose constraints drive the tightening: s1-s4 or a JSON path
    #[arg(long, default_value = "s1")]
    scenario: String,
    #[arg(long, value_enum, default_value_t = ArmChoice::Both)]
    arm: ArmChoice,
    /// Bisection tolerance on the contraction rates
    #[arg(long, default_value_t = 1e-3)]
    bisect_tol: f64,
    /// Feasibility tolerance for the conic oracle
    #[arg(long, default_value_t = 1e-8)]
    sdp_tol: f64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Scenario: s1-s4 or a JSON path
    #[arg(long, default_value = "s1")]
    scenario: String,
    #[arg(long, value_enum, default_value_t = ArmChoice::Both)]
    arm: ArmChoice,
    /// Trajectory count (default: the scenario's own)
    #[arg(long)]
    traj: Option<usize>,
    #[arg(long, value_enum, default_value_t = DistChoice::Gaussian)]
    dist: DistChoice,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Scenarios to compare (presets or JSON paths)
    #[arg(long, value_delimiter = ',', default_value = "s1,s2,s3,s4")]
    scenario: Vec<String>,
    #[arg(long)]
    traj: Option<usize>,
    #[arg(long, value_enum, default_value_t = DistChoice::Gaussian)]
    dist: DistChoice,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Scenario providing epsilon and constraints for the PRS schedule
    #[arg(long, default_value = "s1")]
    scenario: String,
    /// Random samples for the convex-embedding check
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
    /// Error-recursion rollouts per disturbance family
    #[arg(long, default_value_t = 10_000)]
    traj: usize,
    /// Error-recursion depth
    #[arg(long, default_value_t = 50)]
    depth: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ArmChoice {
    Lambda,
    LambdaStar,
    Both,
}

impl ArmChoice {
    fn arms(self) -> Vec<Arm> {
        match self {
            ArmChoice::Lambda => vec![Arm::Lambda],
            ArmChoice::LambdaStar => vec![Arm::LambdaStar],
            ArmChoice::Both => vec![Arm::LambdaStar, Arm::Lambda],
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DistChoice {
    Gaussian,
    Uniform,
    Laplace,
}

impl DistChoice {
    fn kind(self) -> DisturbanceKind {
        match self {
            DistChoice::Gaussian => DisturbanceKind::Gaussian,
            DistChoice::Uniform => DisturbanceKind::Uniform,
            DistChoice::Laplace => DisturbanceKind::Laplace,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let outcome = match cli.cmd {
        Cmd::Design(args) => cmd_design(&args),
        Cmd::Simulate(args) => cmd_simulate(&args),
        Cmd::Compare(args) => cmd_compare(&args),
        Cmd::Validate(args) => cmd_validate(&args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Model(_) | Error::Design(_) | Error::Infeasible(_) => 2,
                Error::Validation(_) => 3,
                _ => 1,
            })
        }
    }
}

fn load_model(spec: &str) -> Result<LtiModel> {
    if spec == "cstr" {
        return Ok(sa_smpc::presets::cstr_model());
    }
    LtiModel::from_json(&std::fs::read_to_string(spec)?)
}

fn load_scenario(spec: &str) -> Result<Scenario> {
    match spec {
        "s1" => scenario_preset(1),
        "s2" => scenario_preset(2),
        "s3" => scenario_preset(3),
        "s4" => scenario_preset(4),
        path => {
            let text = std::fs::read_to_string(path)?;
            let sc: Scenario = serde_json::from_str(&text)?;
            sc.validate()?;
            Ok(sc)
        }
    }
}

fn diag(entries: &[f64]) -> DMatrix<f64> {
    DMatrix::from_partial_diagonal(entries.len(), entries.len(), entries)
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut body = serde_json::to_value(value)?;
    if let serde_json::Value::Object(map) = &mut body {
        map.insert("schema".into(), serde_json::json!(1));
    } else {
        body = serde_json::json!({ "schema": 1, "value": body });
    }
    std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
    Ok(path)
}

fn make_setup(common: &CommonArgs, cert: ContractionCertificate) -> Result<SimSetup> {
    let model = load_model(&common.model)?;
    SimSetup::new(
        &model,
        cert,
        diag(&common.q),
        diag(&common.r),
        common.v_ss,
        common.horizon,
    )
}

/// Resolves the certificate: an explicit path or the built-in reference if
/// `--certificate` is given; otherwise reuse `<out>/certificate.json`, else
/// design one and write it there.
fn obtain_certificate(common: &CommonArgs, opts: &DesignOptions) -> Result<ContractionCertificate> {
    let load = |path: &Path| -> Result<ContractionCertificate> {
        let cert: ContractionCertificate = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cert.validate()?;
        eprintln!("loaded certificate from {}", path.display());
        Ok(cert)
    };
    match common.certificate.as_deref() {
        Some("reference") => sa_smpc::presets::cstr_reference_certificate(),
        Some(path) => load(Path::new(path)),
        None => {
            let path = common.out.join("certificate.json");
            if path.exists() {
                return load(&path);
            }
            let model = load_model(&common.model)?;
            let cert = design_certificate(&model.normalize(), opts)?;
            write_json(&common.out, "certificate.json", &cert)?;
            Ok(cert)
        }
    }
}

fn cmd_design(args: &DesignArgs) -> Result<u8> {
    let common = &args.common;
    let model = load_model(&common.model)?;
    let norm = model.normalize();
    let opts = DesignOptions {
        bisect_tol: args.bisect_tol,
        sdp_tol: args.sdp_tol,
        ..DesignOptions::default()
    };
    let cert = design_certificate(&norm, &opts)?;
    write_json(&common.out, "certificate.json", &cert)?;

    let scenario = load_scenario(&args.scenario)?;
    let setup = make_setup(common, cert.clone())?;
    let p = cert.p_matrix();
    let tr_pw = trace_pw(&p, &norm.w)?;
    let region = region_of_linearity(&p, &cert.k_matrix(), setup.v_ss)?;
    let hat = select_hat_lambda(
        effective_lambda(cert.lambda, cert.lambda_l, region.r_l, tr_pw)?,
        cert.lambda,
    );
    println!("lambda    = {:.6}", cert.lambda);
    println!("lambda_L  = {:.6}", cert.lambda_l);
    println!("lambda^   = {:.6}", hat);
    println!("r_L       = {:.6e}", region.r_l);
    println!("Tr(PW)    = {:.6e}", tr_pw);
    println!(
        "r_inf     = {:.6e}",
        tr_pw / (scenario.epsilon * (1.0 - hat))
    );

    #[derive(serde::Serialize)]
    #[serde(untagged)]
    enum ArmEntry {
        Feasible(TighteningSchedule),
        Infeasible { infeasible: String },
    }
    let mut arms = serde_json::Map::new();
    let mut feasible_count = 0;
    for arm in args.arm.arms() {
        let entry = match build_arm(&setup, &scenario, arm) {
            Ok(arts) => {
                feasible_count += 1;
                ArmEntry::Feasible(arts.cfg.schedule)
            }
            Err(Error::Infeasible(msg)) => {
                println!("arm {}: infeasible ({msg})", arm.name());
                ArmEntry::Infeasible { infeasible: msg }
            }
            Err(e) => return Err(e),
        };
        arms.insert(arm.name().into(), serde_json::to_value(&entry)?);
    }
    #[derive(serde::Serialize)]
    struct TighteningFile {
        scenario: String,
        arms: serde_json::Map<String, serde_json::Value>,
    }
    let path = write_json(
        &common.out,
        "tightening.json",
        &TighteningFile {
            scenario: scenario.name.clone(),
            arms,
        },
    )?;
    println!("wrote {}", path.display());
    if feasible_count == 0 {
        return Err(Error::Infeasible(
            "no requested arm admits a nonempty terminal set".into(),
        ));
    }
    Ok(0)
}

/// Horizontal reference lines for rows with a single active coefficient
/// (`c * x_j <= h` plots as `x_j = h / c`).
fn axis_bounds(scenario: &Scenario, state_index: usize) -> Vec<f64> {
    let h = scenario.state_poly.matrix();
    let offs = scenario.state_poly.offsets();
    let mut out = Vec::new();
    for i in 0..scenario.state_poly.rows() {
        let row = h.row(i);
        let nonzero: Vec<usize> = (0..row.ncols()).filter(|&j| row[j].abs() > 1e-12).collect();
        if nonzero == [state_index] {
            out.push(offs[i] / row[state_index]);
        }
    }
    out
}

fn cmd_simulate(args: &SimulateArgs) -> Result<u8> {
    let common = &args.common;
    let cert = obtain_certificate(common, &DesignOptions::default())?;
    let setup = make_setup(common, cert)?;
    let scenario = load_scenario(&args.scenario)?;
    let dist = DisturbanceSpec::new(args.dist.kind(), &setup.model.w)?;
    let n_traj = args.traj.unwrap_or(scenario.n_traj);
    let arms = args.arm.arms();

    let (report, timings) = monte_carlo(&setup, &scenario, &arms, &dist, n_traj, common.seed)?;
    let path = write_json(&common.out, &format!("report_{}.json", scenario.name), &report)?;
    println!("wrote {}", path.display());

    let mut timing_text = String::new();
    for t in &timings {
        timing_text += &format!(
            "{}: mean solve {:.3} ms over {} steps\n",
            t.arm,
            t.mean_solve_time * 1e3,
            t.total_steps
        );
    }
    std::fs::write(common.out.join(format!("timing_{}.txt", scenario.name)), timing_text)?;

    for arm_report in &report.arms {
        let arm = if arm_report.arm == "lambda" {
            Arm::Lambda
        } else {
            Arm::LambdaStar
        };
        match (&arm_report.mean_cost, arm_report.feasible) {
            (Some(mean), true) => println!(
                "{}: mean cost {:.2} +- {:.2}, max violation rate {:.4}",
                arm_report.arm,
                mean,
                arm_report.cost_std.unwrap_or(0.0),
                arm_report.max_violation_freq
            ),
            _ => {
                println!("{}: Infeasible", arm_report.arm);
                continue;
            }
        }
        // representative trajectory: CSV trace + SVG plots
        let arts = match build_arm(&setup, &scenario, arm) {
            Ok(a) => a,
            Err(_) => continue,
        };
        let trace = rollout(&setup.model, &arts.cfg, &scenario, &dist, common.seed, 0)?;
        let base = format!("{}_{}", scenario.name, arm_report.arm);
        std::fs::write(common.out.join(format!("trace_{base}.csv")), trace.to_csv())?;

        let n = setup.model.n();
        let state_series: Vec<(String, Vec<f64>)> = (0..n)
            .map(|j| {
                (
                    format!("x{}", j + 1),
                    trace.x.iter().map(|x| x[j]).collect(),
                )
            })
            .collect();
        let refs: Vec<(&str, &[f64])> = state_series
            .iter()
            .map(|(name, ys)| (name.as_str(), ys.as_slice()))
            .collect();
        let hlines: Vec<f64> = (0..n).flat_map(|j| axis_bounds(&scenario, j)).collect();
        std::fs::write(
            common.out.join(format!("states_{base}.svg")),
            svg_line_plot(&format!("states, {base}"), &refs, &hlines),
        )?;

        let m = setup.model.m();
        let input_series: Vec<(String, Vec<f64>)> = (0..m)
            .map(|j| {
                (
                    format!("u{}", j + 1),
                    trace.u.iter().map(|u| u[j]).collect(),
                )
            })
            .collect();
        let refs: Vec<(&str, &[f64])> = input_series
            .iter()
            .map(|(name, ys)| (name.as_str(), ys.as_slice()))
            .collect();
        let bounds: Vec<f64> = setup
            .model
            .scale
            .iter()
            .flat_map(|&s| [s, -s])
            .collect();
        std::fs::write(
            common.out.join(format!("inputs_{base}.svg")),
            svg_line_plot(&format!("inputs, {base}"), &refs, &bounds),
        )?;
    }
    Ok(0)
}

fn cmd_compare(args: &CompareArgs) -> Result<u8> {
    let common = &args.common;
    let cert = obtain_certificate(common, &DesignOptions::default())?;
    let setup = make_setup(common, cert)?;
    let arms = [Arm::LambdaStar, Arm::Lambda];

    let mut reports = Vec::new();
    println!(
        "{:<10} {:>22} {:>22}",
        "scenario", "lambda_star cost", "lambda cost"
    );
    for spec in &args.scenario {
        let scenario = load_scenario(spec)?;
        let dist = DisturbanceSpec::new(args.dist.kind(), &setup.model.w)?;
        let n_traj = args.traj.unwrap_or(scenario.n_traj);
        let (report, _) = monte_carlo(&setup, &scenario, &arms, &dist, n_traj, common.seed)?;
        let cell = |arm: &str| -> String {
            report
                .arms
                .iter()
                .find(|a| a.arm == arm)
                .map(|a| match a.mean_cost {
                    Some(mean) => format!("{:.1} +- {:.2}", mean, a.cost_std.unwrap_or(0.0)),
                    None => "Infeasible".into(),
                })
                .unwrap_or_else(|| "-".into())
        };
        println!(
            "{:<10} {:>22} {:>22}",
            scenario.name,
            cell("lambda_star"),
            cell("lambda")
        );
        reports.push(report);
    }
    #[derive(serde::Serialize)]
    struct CompareFile {
        scenarios: Vec<sa_smpc::sim::SimulationReport>,
    }
    let path = write_json(&common.out, "compare.json", &CompareFile { scenarios: reports })?;
    println!("wrote {}", path.display());
    Ok(0)
}

fn cmd_validate(args: &ValidateArgs) -> Result<u8> {
    let common = &args.common;
    let cert = obtain_certificate(common, &DesignOptions::default())?;
    let setup = make_setup(common, cert)?;
    let scenario = load_scenario(&args.scenario)?;
    let norm = &setup.model;
    let p = setup.cert.p_matrix();
    let k = setup.cert.k_matrix();

    let mut checks: Vec<(String, bool, String)> = Vec::new();

    let report = verify_certificate(norm, &setup.cert, 1e-6)?;
    checks.push((
        "certificate".into(),
        report.pass,
        format!("worst residual {:.3e}", report.worst),
    ));

    let embedding = sa_smpc::offline::check_embedding(norm, &k, &p, args.samples, common.seed);
    checks.push((
        "embedding".into(),
        embedding.is_ok(),
        match &embedding {
            Ok(()) => format!("{} samples, no violation", args.samples),
            Err(e) => format!("{e}"),
        },
    ));

    let tr_pw = trace_pw(&p, &norm.w)?;
    let region = region_of_linearity(&p, &k, setup.v_ss)?;
    let hat = select_hat_lambda(
        effective_lambda(setup.cert.lambda, setup.cert.lambda_l, region.r_l, tr_pw)?,
        setup.cert.lambda,
    );
    let delta = 0.5 * (1.0 - hat) / hat;
    let alpha = minimal_terminal_alpha(&p, &k, &setup.q, &setup.r, hat, delta)?;
    let terminal_ok = alpha.is_finite()
        && verify_terminal_weight((&p, alpha * (1.0 + 1e-9)), &k, &setup.q, &setup.r, hat, delta)?;
    checks.push((
        "terminal-weight".into(),
        terminal_ok,
        format!("alpha {:.4e}, delta {:.4e}", alpha, delta),
    ));

    let prs = prs_schedule(hat, tr_pw, scenario.epsilon, args.depth.max(64))?;
    for kind in [
        DisturbanceKind::Gaussian,
        DisturbanceKind::Uniform,
        DisturbanceKind::Laplace,
    ] {
        let dist = DisturbanceSpec::new(kind, &norm.w)?;
        let rep = validate_prs(
            norm,
            &p,
            &k,
            &prs,
            setup.v_ss,
            &dist,
            args.traj,
            args.depth,
            common.seed,
        )?;
        let min_cov = rep.coverage.iter().cloned().fold(1.0f64, f64::min);
        let worst_ratio = rep
            .mean_energy
            .iter()
            .zip(&rep.bound)
            .skip(1)
            .map(|(m, b)| m / b)
            .fold(0.0f64, f64::max);
        checks.push((
            format!("prs-coverage-{kind:?}").to_lowercase(),
            rep.passes(0.02),
            format!("min coverage {min_cov:.4}, worst mean/bound {worst_ratio:.4}"),
        ));
    }

    let mut all_pass = true;
    for (name, pass, witness) in &checks {
        println!("{} {name}: {witness}", if *pass { "PASS" } else { "FAIL" });
        all_pass &= *pass;
    }
    #[derive(serde::Serialize)]
    struct ValidationFile {
        checks: Vec<(String, bool, String)>,
    }
    write_json(&common.out, "validation.json", &ValidationFile { checks })?;
    Ok(if all_pass { 0 } else { 3 })
}

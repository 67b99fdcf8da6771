use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kw_cli::format::{csv_row, sig6};
use kw_cli::{PlanDocument, PlanStatus};
use kw_core::baselines::{efficiency_ratios, fss_exact, sprt_characteristics, sprt_match};
use kw_core::evaluate::{asn, oc, simulate};
use kw_core::solve::{grid_sweep, solve_kw, Method, SolveReport, SolveTarget};
use kw_core::{Hypotheses, KwError};

const TABLE_LEVELS: [f64; 7] = [0.1, 0.05, 0.025, 0.01, 0.005, 0.001, 0.0005];

#[derive(Parser)]
#[command(
    name = "kw",
    version,
    about = "Kiefer-Weiss optimal sequential tests for Bernoulli data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find the plan matching nominal error probabilities.
    Solve(SolveArgs),
    /// Exact (and optionally simulated) OC and ASN of a saved plan.
    Eval(EvalArgs),
    /// One CSV row per error level: optimal plan, matched SPRT, exact FSS and efficiency ratios.
    Table(TableArgs),
    /// Sweep an equidistant grid of log multipliers.
    Grid(GridArgs),
}

#[derive(Args)]
struct HypothesisArgs {
    #[arg(long, value_parser = probability)]
    theta0: f64,
    #[arg(long, value_parser = probability)]
    theta1: f64,
}

impl HypothesisArgs {
    fn hypotheses(&self) -> Result<Hypotheses, Failure> {
        Hypotheses::new(self.theta0, self.theta1).map_err(Failure::from)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Option1,
    Option2,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Option1 => Method::Option1,
            MethodArg::Option2 => Method::Option2,
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    hyp: HypothesisArgs,
    #[arg(long, value_parser = probability)]
    alpha: f64,
    #[arg(long, value_parser = probability)]
    beta: f64,
    #[arg(long, value_enum, default_value = "option1")]
    method: MethodArg,
    #[arg(long, default_value_t = 1e-3, value_parser = positive)]
    rel_tol: f64,
    /// Where to write the JSON plan document.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, value_delimiter = ',', required = true, value_parser = probability)]
    theta: Vec<f64>,
    /// Monte Carlo replications per θ.
    #[arg(long)]
    simulate: Option<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TableArgs {
    #[command(flatten)]
    hyp: HypothesisArgs,
    #[arg(long, value_delimiter = ',', value_parser = probability, default_values_t = TABLE_LEVELS)]
    levels: Vec<f64>,
    #[arg(long, value_enum, default_value = "option1")]
    method: MethodArg,
    #[arg(long, default_value_t = 1e-3, value_parser = positive)]
    rel_tol: f64,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    hyp: HypothesisArgs,
    #[arg(long, default_value_t = 25, value_parser = clap::value_parser!(u32).range(2..))]
    points: u32,
    #[arg(long, default_value_t = 6.0, allow_negative_numbers = true)]
    log_min: f64,
    #[arg(long, default_value_t = 13.0, allow_negative_numbers = true)]
    log_max: f64,
    /// Worker threads for the sweep (default: all cores).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: Option<u32>,
}

fn probability(text: &str) -> Result<f64, String> {
    let x: f64 = text
        .parse()
        .map_err(|_| format!("`{text}` is not a number"))?;
    if x > 0.0 && x < 1.0 {
        Ok(x)
    } else {
        Err(format!("{x} must lie strictly between 0 and 1"))
    }
}

fn positive(text: &str) -> Result<f64, String> {
    let x: f64 = text
        .parse()
        .map_err(|_| format!("`{text}` is not a number"))?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be positive"))
    }
}

enum Failure {
    Usage(String),
    NonConvergence(String),
}

impl Failure {
    fn exit(self) -> ExitCode {
        match self {
            Failure::Usage(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
            Failure::NonConvergence(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(3)
            }
        }
    }
}

impl From<KwError> for Failure {
    fn from(e: KwError) -> Self {
        match e {
            KwError::NonConvergence { .. } | KwError::HorizonLimit { .. } => {
                Failure::NonConvergence(e.to_string())
            }
            other => Failure::Usage(other.to_string()),
        }
    }
}

/// A solve result, falling back to the best iterate when the search hit its cap.
fn solve_or_best(
    target: &SolveTarget,
    method: Method,
) -> Result<(SolveReport, PlanStatus, Option<String>), Failure> {
    match solve_kw(target, method) {
        Ok(report) => {
            let status = report.status.into();
            Ok((report, status, None))
        }
        Err(e @ KwError::NonConvergence { .. }) => {
            let message = e.to_string();
            match e {
                KwError::NonConvergence {
                    best: Some(best), ..
                } => Ok((*best, PlanStatus::NotConverged, Some(message))),
                _ => Err(Failure::NonConvergence(message)),
            }
        }
        Err(e) => Err(e.into()),
    }
}

fn status_name(status: PlanStatus) -> &'static str {
    match status {
        PlanStatus::Solved => "solved",
        PlanStatus::ModifiedOnly => "modified-only",
        PlanStatus::Nearest => "nearest",
        PlanStatus::NotConverged => "not-converged",
    }
}

fn cmd_solve(args: SolveArgs) -> Result<(), Failure> {
    let hyp = args.hyp.hypotheses()?;
    let target = SolveTarget::new(hyp, args.alpha, args.beta)?.with_rel_tol(args.rel_tol)?;
    let (report, status, failure) = solve_or_best(&target, args.method.into())?;
    if let Some(path) = &args.out {
        let doc = PlanDocument::from_report(&report, status);
        fs::write(path, doc.to_json())
            .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
    }
    println!("theta_star,lambda0,lambda1,H,N_star,delta,Q99,alpha,beta,status");
    println!(
        "{}",
        csv_row([
            sig6(report.theta_star),
            sig6(report.lambda0),
            sig6(report.lambda1),
            report.effective_horizon.to_string(),
            sig6(report.asn_at_star),
            sig6(report.delta),
            report.q99.to_string(),
            sig6(report.alpha_achieved),
            sig6(report.beta_achieved),
            status_name(status).to_string(),
        ])
    );
    match failure {
        Some(msg) => Err(Failure::NonConvergence(msg)),
        None => Ok(()),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.plan)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", args.plan.display())))?;
    let plan = PlanDocument::parse(&text)
        .and_then(|doc| doc.to_plan())
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.plan.display())))?;
    let mut header = vec!["theta", "oc", "asn"];
    if args.simulate.is_some() {
        header.extend(["oc_hat", "oc_se", "asn_hat", "asn_se"]);
    }
    println!("{}", csv_row(header));
    for &theta in &args.theta {
        let mut row = vec![
            sig6(theta),
            sig6(oc(&plan, theta)?),
            sig6(asn(&plan, theta)?),
        ];
        if let Some(reps) = args.simulate {
            let sim = simulate(&plan, theta, reps, args.seed)?;
            row.extend([
                sig6(sim.oc_hat),
                sig6(sim.oc_se),
                sig6(sim.asn_hat),
                sig6(sim.asn_se),
            ]);
        }
        println!("{}", csv_row(row));
    }
    Ok(())
}

fn cmd_table(args: TableArgs) -> Result<(), Failure> {
    let hyp = args.hyp.hypotheses()?;
    let symmetric = hyp.is_symmetric();
    if symmetric {
        eprintln!("note: theta0 = 1 - theta1; SPRT columns are left empty");
    }
    println!(
        "level,theta_star,lambda0,lambda1,H,N_star,delta,Q99,sprt_logA,sprt_logB,sprt_N,sprt_Q99,FSS,R,QR,R_W,QR_W"
    );
    for &level in &args.levels {
        let target = SolveTarget::new(hyp, level, level)?.with_rel_tol(args.rel_tol)?;
        let (report, status, _) = solve_or_best(&target, args.method.into())?;
        if status != PlanStatus::Solved {
            eprintln!(
                "note: level {}: status {} (alpha {}, beta {})",
                sig6(level),
                status_name(status),
                sig6(report.alpha_achieved),
                sig6(report.beta_achieved)
            );
        }
        let (fss, _) = fss_exact(&hyp, level, level)?;
        let sprt = if symmetric {
            None
        } else {
            let matched = sprt_match(&hyp, level, level, args.rel_tol)?;
            let chars = sprt_characteristics(&matched.design, report.theta_star)?;
            Some((matched.design, chars))
        };
        let ratios = efficiency_ratios(
            fss,
            report.asn_at_star,
            report.q99,
            sprt.as_ref().map(|(_, c)| (c.asn, c.q99)),
        );
        let opt = |x: Option<f64>| x.map(sig6).unwrap_or_default();
        let mut row = vec![
            sig6(level),
            sig6(report.theta_star),
            sig6(report.lambda0),
            sig6(report.lambda1),
            report.effective_horizon.to_string(),
            sig6(report.asn_at_star),
            sig6(report.delta),
            report.q99.to_string(),
        ];
        match &sprt {
            Some((design, chars)) => row.extend([
                sig6(design.log_b),
                sig6(design.log_a),
                sig6(chars.asn),
                chars.q99.to_string(),
            ]),
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        row.extend([
            fss.to_string(),
            sig6(ratios.r),
            sig6(ratios.qr),
            opt(ratios.r_w),
            opt(ratios.qr_w),
        ]);
        println!("{}", csv_row(row));
    }
    Ok(())
}

fn cmd_grid(args: GridArgs) -> Result<(), Failure> {
    let hyp = args.hyp.hypotheses()?;
    if !(args.log_min < args.log_max) {
        return Err(Failure::Usage(format!(
            "--log-min ({}) must be below --log-max ({})",
            args.log_min, args.log_max
        )));
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = args.jobs {
        pool = pool.num_threads(jobs as usize);
    }
    let pool = pool
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start worker pool: {e}")))?;
    let records =
        pool.install(|| grid_sweep(&hyp, (args.log_min, args.log_max), args.points as usize))?;
    println!("ln_lambda0,ln_lambda1,alpha,beta,N_star,N_theta0,N_theta1,delta,FSS_approx,R,R0,R1");
    for r in records {
        println!(
            "{}",
            csv_row([
                sig6(r.ln_lambda0),
                sig6(r.ln_lambda1),
                sig6(r.alpha),
                sig6(r.beta),
                sig6(r.n_star),
                sig6(r.n_theta0),
                sig6(r.n_theta1),
                sig6(r.delta),
                sig6(r.fss_approx),
                sig6(r.r),
                sig6(r.r0),
                sig6(r.r1),
            ])
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Table(args) => cmd_table(args),
        Command::Grid(args) => cmd_grid(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => failure.exit(),
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use walsh_embed::dubins::{analytic_law, dubins_rule};
use walsh_embed::measure::{
    centered_spinning, centering_deviation, is_admissible, polar_decompose, RadialMeasure, RawMeasure, SpinningMeasure,
    TargetMeasure,
};
use walsh_embed::sim::{run_until, trace_until, write_samples_csv, SimParams, StoppedSample};
use walsh_embed::stats::{
    chi2_rays, compare_cost, ks_critical, ks_distance, wasserstein1, Check, EmpiricalLaw, Moments, Report,
};
use walsh_embed::vallois::{
    build_barrier, dual_certificate, dual_m, pathwise_gap, ui_count_bound, ui_diagnostic, vallois_rule, Barrier,
    ConvexCost, GridParams,
};
use walsh_embed::Error;

const CENTERING_TOL: f64 = 1e-9;
const ALPHA: f64 = 1e-3;
const W1_MAX: f64 = 0.05;

#[derive(Parser)]
#[command(name = "walsh-embed", version, about = "Skorokhod embeddings for Walsh Brownian motion")]
struct Cli {
    /// Worker threads for path simulation (0 = all cores).
    #[arg(long, global = true, env = "WALSH_EMBED_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a target: moments, centered spinning measure, admissibility.
    Validate(Common),
    /// Tabulate the local-time barrier of a target.
    Barrier(BarrierArgs),
    /// Simulate a stopping rule and check the stopped law against the target.
    Embed(EmbedArgs),
    /// Compare the expected cost of the local time under both rules.
    Compare(CompareArgs),
    /// Evaluate the dual certificate along simulated paths.
    DualCheck(DualArgs),
}

#[derive(Args)]
struct Common {
    /// Target measure, JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Spinning measure override, e.g. `A=0.5,B=0.5`.
    #[arg(long)]
    kappa: Option<String>,
    /// Output directory; the report goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BarrierArgs {
    #[command(flatten)]
    common: Common,
    /// Rows of the uniform l-grid in barrier.csv.
    #[arg(long, default_value_t = 1000)]
    points: usize,
}

#[derive(Args)]
struct Sim {
    #[arg(long, default_value_t = 1e-4)]
    dt: f64,
    #[arg(long = "t-max", default_value_t = 1e4)]
    t_max: f64,
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    bridge: Switch,
}

impl Sim {
    fn params(&self) -> SimParams {
        SimParams {
            bridge_refinement: self.bridge == Switch::On,
            ..SimParams::new(self.dt, self.t_max, self.paths, self.seed)
        }
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    sim: Sim,
    #[arg(long, value_enum)]
    method: Method,
    /// Number of refinement stages for the barycenter rule.
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, value_enum, default_value_t = Psi::Exp)]
    psi: Psi,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    sim: Sim,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// Cost of the local time; required.
    #[arg(long, value_enum)]
    psi: Option<Psi>,
    /// Rays forming the set A of the integrability diagnostic (default: the first ray).
    #[arg(long = "ui-set", value_delimiter = ',')]
    ui_set: Vec<String>,
    /// Levels x of the integrability diagnostic.
    #[arg(long = "ui-grid", value_delimiter = ',')]
    ui_grid: Vec<f64>,
}

#[derive(Args)]
struct DualArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    sim: Sim,
    #[arg(long, value_enum, default_value_t = Psi::Exp)]
    psi: Psi,
    /// Largest tolerated value of M_t + G(Z_t) − Ψ(L_t).
    #[arg(long = "gap-bound", default_value_t = 0.02)]
    gap_bound: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Dubins,
    Vallois,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Psi {
    Exp,
    Sqrt,
}

impl From<Psi> for ConvexCost {
    fn from(p: Psi) -> Self {
        match p {
            Psi::Exp => ConvexCost::Exp,
            Psi::Sqrt => ConvexCost::Sqrt,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// Failures mapped to exit codes.
enum Fail {
    Config(String),
    Validation(String),
    Numerical(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParams(_) | Error::InvalidArgument(_) => Fail::Config(e.to_string()),
            Error::Numerical(_) => Fail::Numerical(e.to_string()),
            _ => Fail::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Config(e.to_string())
    }
}

type Outcome = Result<Report, Fail>;

fn load_target(path: &Path) -> Result<TargetMeasure, Fail> {
    let text = fs::read_to_string(path).map_err(|e| Fail::Config(format!("{}: {e}", path.display())))?;
    let raw: RawMeasure = serde_json::from_str(&text).map_err(|e| Fail::Config(format!("{}: {e}", path.display())))?;
    Ok(polar_decompose(&raw)?)
}

fn parse_kappa(s: &str) -> Result<SpinningMeasure, Fail> {
    let mut entries = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (id, p) =
            part.split_once('=').ok_or_else(|| Fail::Config(format!("kappa entry `{part}` is not ID=PROB")))?;
        let p: f64 =
            p.trim().parse().map_err(|_| Fail::Config(format!("kappa entry `{part}` has no numeric weight")))?;
        entries.push((id.trim().to_string(), p));
    }
    Ok(SpinningMeasure::new(entries)?)
}

/// The spinning measure to run with, indexed like the target's rays.
fn spinning(target: &TargetMeasure, common: &Common) -> Result<SpinningMeasure, Fail> {
    match &common.kappa {
        None => Ok(centered_spinning(target)?),
        Some(s) => {
            let k = parse_kappa(s)?;
            let deviation = centering_deviation(target, &k);
            if deviation > CENTERING_TOL {
                return Err(Error::NotCentered { deviation, tolerance: CENTERING_TOL }.into());
            }
            Ok(k.aligned_to(target)?)
        }
    }
}

fn emit(out: Option<&Path>, name: &str, bytes: &[u8]) -> Result<(), Fail> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

fn validate(c: &Common) -> Outcome {
    let target = load_target(&c.spec)?;
    let mut report = Report::new("validate");
    report.value("rays", target.ids());
    report.value("weights", target.weights());
    report.value("first_moment", target.first_moment());
    report.value("second_moment", target.second_moment());
    report.value("barycenters", target.rays().iter().map(|r| r.barycenter).collect::<Vec<_>>());
    let centered = centered_spinning(&target)?;
    report.value("centered_kappa", centered.probs());
    let kappa = match &c.kappa {
        Some(s) => parse_kappa(s)?,
        None => centered,
    };
    report.value("kappa_ids", kappa.ids());
    report.value("kappa", kappa.probs());
    report.check(Check::at_least("admissible", f64::from(u8::from(is_admissible(&target, &kappa))), 1.0));
    report.check(Check::at_most("centering deviation", centering_deviation(&target, &kappa), CENTERING_TOL));
    Ok(report)
}

fn barrier_for(target: &TargetMeasure, common: &Common) -> Result<Barrier, Fail> {
    if common.kappa.is_some() {
        // the barrier always runs with the centered measure; an override must agree with it
        spinning(target, common)?;
    }
    Ok(build_barrier(target, GridParams::default())?)
}

fn barrier(a: &BarrierArgs) -> Outcome {
    let target = load_target(&a.common.spec)?;
    let b = barrier_for(&target, &a.common)?;
    let mut csv = Vec::new();
    b.write_csv(&mut csv, a.points)?;
    emit(a.common.out.as_deref(), "barrier.csv", &csv)?;
    let mut report = Report::new("barrier");
    report.value("rays", b.ids());
    report.value("m", b.m());
    report.value("kappa", b.kappa().probs());
    report.value("l_breaks", b.l_breaks());
    report.value("l_max", b.l_max);
    report.value("truncated_mass", b.truncated_mass);
    report.value("a_limit", (0..b.len()).map(|g| b.a_limit(g)).collect::<Vec<_>>());
    Ok(report)
}

/// Chi-square on rays, per-ray KS and Wasserstein-1 against `laws`.
fn law_checks(report: &mut Report, samples: &[StoppedSample], pmf: &[f64], laws: &[RadialMeasure], ids: &[String]) {
    let law = EmpiricalLaw::from_samples(samples, ids.len(), &|x: f64| x);
    report.check(Check::at_most("censored paths", law.censored as f64, 0.0));
    let chi = chi2_rays(&law.ray_counts, pmf);
    report.check(Check::at_least("ray chi2 p-value", chi.p_value, ALPHA));
    for (g, id) in ids.iter().enumerate() {
        if law.radii[g].is_empty() {
            continue;
        }
        report.check(Check::at_most(format!("ray {id} W1"), wasserstein1(&law.radii[g], &laws[g]), W1_MAX));
        let crit = 3.0 * ks_critical(law.radii[g].len());
        report.check(Check::at_most(format!("ray {id} KS"), ks_distance(&law.radii[g], &laws[g]), crit));
    }
    report.value("ray_counts", &law.ray_counts);
    report.value("mean_tau", law.tau.mean());
    report.value("std_err_tau", law.tau.std_err());
    report.value("mean_local_time", law.local_time.mean());
}

fn set_threads(n: usize) -> Result<(), Fail> {
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Fail::Config(format!("thread pool: {e}")))
}

fn embed(a: &EmbedArgs) -> Outcome {
    let target = load_target(&a.common.spec)?;
    let params = a.sim.params();
    params.validate()?;
    let ids: Vec<String> = target.ids().iter().map(|s| s.to_string()).collect();
    let mut report = Report::new("embed");
    let cost = ConvexCost::from(a.psi);
    let samples = match a.method {
        Method::Dubins => {
            let kappa = spinning(&target, &a.common)?;
            let rule = dubins_rule(&target, &kappa, a.depth)?;
            let samples = run_until(&rule, &kappa, &params)?;
            let law = analytic_law(&target, a.depth)?;
            let laws: Vec<RadialMeasure> =
                law.radial.iter().map(|atoms| RadialMeasure::discrete(atoms.clone())).collect::<Result<_, _>>()?;
            law_checks(&mut report, &samples, &law.ray_pmf, &laws, &ids);
            let tau = Moments::from_slice(&samples.iter().map(|s| s.tau).collect::<Vec<_>>());
            report.value("expected_tau", law.expected_tau);
            report.value("exact", law.exact);
            report.check(Check::at_most(
                "E[tau] deviation in se",
                (tau.mean() - law.expected_tau).abs() / tau.std_err(),
                3.0,
            ));
            samples
        }
        Method::Vallois => {
            let b = Arc::new(barrier_for(&target, &a.common)?);
            let kappa = b.kappa().clone();
            let samples = run_until(&vallois_rule(b.clone()), &kappa, &params)?;
            let laws: Vec<RadialMeasure> = target.rays().iter().map(|r| r.radial.clone()).collect();
            law_checks(&mut report, &samples, &target.weights(), &laws, &ids);
            let n = samples.len() as f64;
            for frac in [0.25, 0.5, 0.75] {
                let s = frac * b.m();
                let (l, lam) = (b.h(s), b.lambda(s));
                let p = samples.iter().filter(|x| x.local_time >= l).count() as f64 / n;
                let se = (lam * (1.0 - lam) / n).sqrt();
                report.check(Check::at_most(format!("survival at s = {s} in se"), (p - lam).abs() / se, 3.0));
            }
            samples
        }
    };
    let m = Moments::from_slice(&samples.iter().map(|s| cost.psi(s.local_time)).collect::<Vec<_>>());
    report.value("psi", cost.name());
    report.value("mean_cost", m.mean());
    report.value("std_err_cost", m.std_err());
    let mut csv = Vec::new();
    write_samples_csv(&mut csv, &samples, &ids)?;
    emit(a.common.out.as_deref(), "samples.csv", &csv)?;
    Ok(report)
}

fn compare(a: &CompareArgs) -> Outcome {
    let psi = a.psi.ok_or_else(|| Fail::Config("compare needs --psi".into()))?;
    let cost = ConvexCost::from(psi);
    let target = load_target(&a.common.spec)?;
    let params = a.sim.params();
    params.validate()?;
    let b = Arc::new(barrier_for(&target, &a.common)?);
    let kappa = b.kappa().clone();
    let vallois = run_until(&vallois_rule(b.clone()), &kappa, &params)?;
    // independent paths for the second rule
    let other = SimParams { seed: params.seed.wrapping_add(1), ..params };
    let dubins = run_until(&dubins_rule(&target, &kappa, a.depth)?, &kappa, &other)?;
    let lv: Vec<f64> = vallois.iter().map(|s| s.local_time).collect();
    let ld: Vec<f64> = dubins.iter().map(|s| s.local_time).collect();
    let c = compare_cost(&lv, &ld, &cost);
    let mut report = Report::new("compare");
    report.value("psi", cost.name());
    report.value("comparison", c);
    report.check(Check::at_most("vallois minus dubins in se", c.diff / c.std_err, 3.0));

    let ids = kappa.ids();
    let set: Vec<String> = if a.ui_set.is_empty() { vec![ids[0].clone()] } else { a.ui_set.clone() };
    if let Some(bad) = set.iter().find(|s| !ids.contains(s)) {
        return Err(Fail::Config(format!("unknown ray `{bad}` in --ui-set")));
    }
    let in_a: Vec<bool> = ids.iter().map(|id| set.contains(id)).collect();
    let top = target.rays().iter().map(|r| r.radial.support_max()).fold(0.0, f64::max);
    let grid: Vec<f64> =
        if a.ui_grid.is_empty() { (1..=8).map(|k| top * k as f64 / 4.0).collect() } else { a.ui_grid.clone() };
    let table = ui_diagnostic(&vallois, &kappa, &in_a, &grid)?;
    let mut csv = String::from("x,estimate,std_err,count_bound\n");
    for r in &table.rows {
        csv.push_str(&format!("{},{},{},{}\n", r.x, r.estimate, r.std_err, ui_count_bound(&b, &in_a, r.x)?));
    }
    emit(a.common.out.as_deref(), "ui.csv", csv.as_bytes())?;
    report.value("ui_set", &set);
    report.value("ui", &table);
    let last = table.rows.last().map_or(0.0, |r| r.estimate.abs() - 3.0 * r.std_err);
    report.check(Check::at_most("ui value at largest x beyond 3 se", last, 0.0));
    Ok(report)
}

fn dual_check(a: &DualArgs) -> Outcome {
    let target = load_target(&a.common.spec)?;
    let params = a.sim.params();
    params.validate()?;
    let b = Arc::new(barrier_for(&target, &a.common)?);
    let kappa = b.kappa().clone();
    let cert = dual_certificate(b.clone(), a.psi.into())?;
    let rule = vallois_rule(b.clone());
    let (mut max_gap, mut max_exact) = (f64::NEG_INFINITY, 0.0f64);
    let (mut skel, mut m_end) = (Moments::default(), Moments::default());
    for i in 0..params.n_paths as u64 {
        let (path, stop) = trace_until(&rule, &kappa, &params, i)?;
        let g = pathwise_gap(&path, &stop, &cert);
        max_gap = max_gap.max(g.max_gap);
        max_exact = max_exact.max(g.stop_gap_exact.abs());
        skel.push(g.stop_gap_skeleton.abs());
        let m = dual_m(&path, &cert);
        m_end.push(m[((1.0 / params.dt).round() as usize).min(m.len() - 1)]);
    }
    let mut report = Report::new("dual-check");
    report.value("psi", cert.cost.name());
    report.value("max_gap", max_gap);
    report.value("max_stop_gap", max_exact);
    report.value("mean_skeleton_stop_gap", skel.mean());
    report.value("mean_m_at_1", m_end.mean());
    report.value("std_err_m_at_1", m_end.std_err());
    report.value("g_at_origin", cert.g(0, 0.0));
    report.check(Check::at_most("max gap", max_gap, a.gap_bound));
    report.check(Check::at_most("stop gap", max_exact, a.gap_bound));

    let l_hi = b.l_max.max(cert.l_end() * 1.25).max(1.0);
    let mut coef = Vec::new();
    cert.write_coefficients_csv(&mut coef, l_hi, 1000)?;
    emit(a.common.out.as_deref(), "certificate.csv", &coef)?;
    let r_hi = 1.25 * target.rays().iter().map(|r| r.radial.support_max()).fold(0.0, f64::max);
    let mut g = Vec::new();
    cert.write_g_csv(&mut g, r_hi, 1000)?;
    emit(a.common.out.as_deref(), "g.csv", &g)?;
    Ok(report)
}

fn run(cli: &Cli) -> Result<(Report, Option<&Path>), Fail> {
    set_threads(cli.threads)?;
    Ok(match &cli.command {
        Command::Validate(c) => (validate(c)?, c.out.as_deref()),
        Command::Barrier(a) => (barrier(a)?, a.common.out.as_deref()),
        Command::Embed(a) => (embed(a)?, a.common.out.as_deref()),
        Command::Compare(a) => (compare(a)?, a.common.out.as_deref()),
        Command::DualCheck(a) => (dual_check(a)?, a.common.out.as_deref()),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = run(&cli).and_then(|(report, out)| {
        let json = report.to_json();
        match out {
            Some(dir) => emit(Some(dir), "report.json", format!("{json}\n").as_bytes())?,
            None => println!("{json}"),
        }
        Ok(report)
    });
    match outcome {
        Ok(report) if report.pass() => ExitCode::SUCCESS,
        Ok(report) => {
            let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
            eprintln!("failed checks: {}", failed.join(", "));
            // tolerance failures of the certificate are numerical, the rest are validation
            ExitCode::from(if report.command == "dual-check" { 4 } else { 3 })
        }
        Err(Fail::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Validation(m)) => {
            eprintln!("validation failed: {m}");
            ExitCode::from(3)
        }
        Err(Fail::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(4)
        }
    }
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use fracduffy::duffy::{CaseKind, PrefactorMode};
use fracduffy::error::Error;
use fracduffy::oracle::separation::{SeparationOptions, CHECK_TOL};
use fracduffy::oracle::{separation_check, winning_mode, SeparationCheck};
use fracduffy::quadrature::MAX_ORDER;
use fracduffy::solver::SolutionDump;
use fracduffy::study::{
    ball_level, ball_order_plan, default_smoothness, observed_rate, singular_study, study_slopes, SlopeFit,
};
use serde::{Deserialize, Serialize};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "fracduffy",
    version,
    about = "Singular quadrature studies and the unit-ball benchmark for the 3D fractional Laplacian"
)]
struct Cli {
    /// TOML file with keys s, rho1, rho2, l, n1, n2, threads, prefactor_mode.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Prefactor of the tet-panel vertex rule.
    #[arg(long, global = true, value_parser = parse_mode)]
    prefactor_mode: Option<PrefactorMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Error of single singular integrals against a high-order reference.
    SingularStudy {
        #[arg(long, value_parser = parse_case)]
        case: CaseKind,
        #[arg(long)]
        s: Option<f64>,
        /// Element sizes, comma separated.
        #[arg(long, default_value = "1,0.5,0.25", value_parser = parse_f64_list)]
        h: F64List,
        /// Gauss orders: `a..b` (inclusive) or a comma list.
        #[arg(long, default_value = "2..8", value_parser = parse_usize_list)]
        n: UsizeList,
        /// Gauss order of the reference value.
        #[arg(long, default_value_t = 20)]
        ref_order: usize,
        /// CSV output (stdout if omitted); a JSON sidecar is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fractional Poisson problem on the unit ball over refinement levels.
    SolveBall {
        #[arg(long)]
        s: Option<f64>,
        /// Refinement levels: `a..b` (inclusive) or a comma list, at most 3.
        #[arg(long, default_value = "1..3", value_parser = parse_usize_list)]
        levels: UsizeList,
        #[arg(long)]
        rho1: Option<f64>,
        #[arg(long)]
        rho2: Option<f64>,
        /// Smoothness index of the order plan.
        #[arg(long)]
        l: Option<f64>,
        /// Fixed order for tetrahedron pairs, overriding the plan.
        #[arg(long)]
        n1: Option<usize>,
        /// Fixed order for tetrahedron-panel pairs, overriding the plan.
        #[arg(long)]
        n2: Option<usize>,
        /// CSV output (stdout if omitted); a JSON sidecar is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for stiffness matrices and solutions of each level.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Checks the transformed rules against separation limits.
    Oracle {
        /// `all` or a case name.
        #[arg(default_value = "all")]
        target: String,
        /// Orders, comma separated.
        #[arg(long, default_value = "0.3,0.7", value_parser = parse_f64_list)]
        s: F64List,
        /// Relative tolerance of each separated integral.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// JSON report.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    s: Option<f64>,
    rho1: Option<f64>,
    rho2: Option<f64>,
    l: Option<f64>,
    n1: Option<usize>,
    n2: Option<usize>,
    threads: Option<usize>,
    prefactor_mode: Option<String>,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    fn numerical(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERICAL,
            msg: msg.into(),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_IO,
            msg: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidParameter(_) | Error::InvalidOrder(_) | Error::WrongCase(_) => EXIT_USAGE,
            Error::Io(_) | Error::ParseError { .. } => EXIT_IO,
            _ => EXIT_NUMERICAL,
        };
        let msg = match &e {
            Error::ConsistencyError(_) => format!("{e} (raise n1/n2 or rho1/rho2)"),
            _ => e.to_string(),
        };
        CliError { code, msg }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn parse_mode(s: &str) -> Result<PrefactorMode, String> {
    PrefactorMode::parse(s).ok_or_else(|| format!("unknown prefactor mode `{s}` (expected audit or paper)"))
}

fn parse_case(s: &str) -> Result<CaseKind, String> {
    CaseKind::parse(s)
        .filter(|k| CaseKind::SINGULAR.contains(k))
        .ok_or_else(|| {
            let names: Vec<&str> = CaseKind::SINGULAR.iter().map(|k| k.name()).collect();
            format!("unknown case `{s}` (expected one of {})", names.join(", "))
        })
}

#[derive(Debug, Clone)]
struct F64List(Vec<f64>);

#[derive(Debug, Clone)]
struct UsizeList(Vec<usize>);

fn parse_f64_list(s: &str) -> Result<F64List, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<_, _>>()
        .map(F64List)
}

fn parse_usize_list(s: &str) -> Result<UsizeList, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(format!("empty range `{s}`"));
        }
        Ok(UsizeList((a..=b).collect()))
    } else {
        s.split(',').map(num).collect::<Result<_, _>>().map(UsizeList)
    }
}

fn load_config(path: Option<&Path>) -> CliResult<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Settings after applying flags over the config file over defaults.
#[derive(Debug, Clone, Serialize)]
struct Resolved {
    threads: usize,
    prefactor_mode: PrefactorMode,
}

fn resolve(cli: &Cli, cfg: &Config) -> CliResult<Resolved> {
    let mode = match (cli.prefactor_mode, &cfg.prefactor_mode) {
        (Some(m), _) => m,
        (None, Some(name)) => parse_mode(name).map_err(CliError::usage)?,
        (None, None) => PrefactorMode::default(),
    };
    let threads = cli
        .threads
        .or(cfg.threads)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(CliError::usage("threads must be positive"));
    }
    Ok(Resolved {
        threads,
        prefactor_mode: mode,
    })
}

fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn csv_writer(out: Option<&Path>) -> CliResult<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| CliError::io(p, e))?),
        None => Box::new(std::io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn csv_err(out: Option<&Path>) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::io(out.unwrap_or(Path::new("<stdout>")), e)
}

#[derive(Serialize)]
struct StudySidecar<'a> {
    command: &'static str,
    case: &'static str,
    s: f64,
    h: &'a [f64],
    n: &'a [usize],
    ref_order: usize,
    settings: &'a Resolved,
    slopes: Vec<SlopeFit>,
}

fn singular_study_cmd(
    case: CaseKind,
    s: f64,
    h: &[f64],
    n: &[usize],
    ref_order: usize,
    out: Option<&Path>,
    settings: &Resolved,
) -> CliResult<()> {
    if let Some(&bad) = n.iter().chain([&ref_order]).find(|&&k| k == 0 || k > MAX_ORDER) {
        return Err(CliError::usage(format!("Gauss order {bad} outside 1..={MAX_ORDER}")));
    }
    let rows = singular_study(case, s, h, n, ref_order, settings.prefactor_mode)?;
    let mut w = csv_writer(out)?;
    let err = csv_err(out);
    w.write_record(["case", "s", "h", "n", "value", "ref", "abs_err"])
        .map_err(&err)?;
    for r in &rows {
        w.write_record([
            case.name().to_string(),
            r.s.to_string(),
            r.h.to_string(),
            r.n.to_string(),
            r.value.to_string(),
            r.reference.to_string(),
            r.abs_err.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush()
        .map_err(|e| CliError::io(out.unwrap_or(Path::new("<stdout>")), e))?;
    let slopes = study_slopes(&rows);
    for f in &slopes {
        log::info!("h = {}: slope {:.4}, R² {:.4}", f.h, f.slope, f.r2);
    }
    if let Some(out) = out {
        write_json(
            &sidecar_path(out),
            &StudySidecar {
                command: "singular-study",
                case: case.name(),
                s,
                h,
                n,
                ref_order,
                settings,
                slopes,
            },
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct BallRow {
    level: usize,
    h: f64,
    n_dofs: usize,
    n_tets: usize,
    n1: usize,
    n2: usize,
    rel_err: f64,
    observed_rate: Option<f64>,
    exact_energy: f64,
    discrete_energy: f64,
    cg_iterations: usize,
}

#[derive(Serialize)]
struct BallSidecar<'a> {
    command: &'static str,
    s: f64,
    levels: &'a [usize],
    rho1: f64,
    rho2: f64,
    l: f64,
    n1: Option<usize>,
    n2: Option<usize>,
    settings: &'a Resolved,
    error_normalization: &'static str,
    coarse_floor: &'static str,
    rows: &'a [BallRow],
}

struct BallArgs<'a> {
    s: f64,
    levels: &'a [usize],
    rho1: f64,
    rho2: f64,
    l: f64,
    n1: Option<usize>,
    n2: Option<usize>,
    out: Option<&'a Path>,
    dump: Option<&'a Path>,
}

fn solve_ball_cmd(a: &BallArgs, settings: &Resolved) -> CliResult<()> {
    if let Some(&bad) = a.levels.iter().find(|&&k| k > 3) {
        return Err(CliError::usage(format!("level {bad} exceeds 3")));
    }
    if a.levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::usage("levels must be increasing"));
    }
    if let Some(&bad) = a.n1.iter().chain(&a.n2).find(|&&k| k == 0 || k > MAX_ORDER) {
        return Err(CliError::usage(format!("Gauss order {bad} outside 1..={MAX_ORDER}")));
    }
    if let Some(dir) = a.dump {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut rows: Vec<BallRow> = Vec::new();
    for &level in a.levels {
        let start = Instant::now();
        let run = ball_level(
            level,
            a.s,
            |h| {
                let mut plan = ball_order_plan(h, a.l, a.s, a.rho1, a.rho2)?;
                plan.n1 = a.n1.unwrap_or(plan.n1);
                plan.n2 = a.n2.unwrap_or(plan.n2);
                Ok(plan)
            },
            settings.prefactor_mode,
        )?;
        let h = run.mesh.h();
        let rel = run.error.rel;
        let rate = rows.last().map(|p| observed_rate(p.h, p.rel_err, h, rel));
        log::info!(
            "level {level}: N = {}, rel_err = {rel:.6}, {:.1} s",
            run.mesh.n_dofs(),
            start.elapsed().as_secs_f64()
        );
        if let Some(dir) = a.dump {
            run.system.dump(dir.join(format!("ball_level{level}")))?;
            let sol = SolutionDump::new(&run.mesh, &run.solution.x, a.s, Some(rel));
            write_json(&dir.join(format!("ball_level{level}_solution.json")), &sol)?;
        }
        rows.push(BallRow {
            level,
            h,
            n_dofs: run.mesh.n_dofs(),
            n_tets: run.mesh.tets.len(),
            n1: run.system.plan.n1,
            n2: run.system.plan.n2,
            rel_err: rel,
            observed_rate: rate,
            exact_energy: run.error.exact,
            discrete_energy: run.error.discrete,
            cg_iterations: run.solution.iterations,
        });
    }
    let mut w = csv_writer(a.out)?;
    let err = csv_err(a.out);
    w.write_record(["level", "h", "N", "M", "n1", "n2", "rel_err", "observed_rate"])
        .map_err(&err)?;
    for r in &rows {
        w.write_record([
            r.level.to_string(),
            r.h.to_string(),
            r.n_dofs.to_string(),
            r.n_tets.to_string(),
            r.n1.to_string(),
            r.n2.to_string(),
            r.rel_err.to_string(),
            r.observed_rate.map_or(String::new(), |x| x.to_string()),
        ])
        .map_err(&err)?;
    }
    w.flush()
        .map_err(|e| CliError::io(a.out.unwrap_or(Path::new("<stdout>")), e))?;
    if let Some(out) = a.out {
        write_json(
            &sidecar_path(out),
            &BallSidecar {
                command: "solve-ball",
                s: a.s,
                levels: a.levels,
                rho1: a.rho1,
                rho2: a.rho2,
                l: a.l,
                n1: a.n1,
                n2: a.n2,
                settings,
                error_normalization: "energy norm: rel_err = sqrt(a(u,u) - x'Ax) / sqrt(a(u,u))",
                coarse_floor: "meshes with h >= 1 use n1 = n2 = 2",
                rows: &rows,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleReport<'a> {
    command: &'static str,
    tol: f64,
    check_tol: f64,
    settings: &'a Resolved,
    checks: &'a [SeparationCheck],
    tp_vertex_mode: Option<&'static str>,
}

fn oracle_cmd(target: &str, s: &[f64], tol: f64, json: Option<&Path>, settings: &Resolved) -> CliResult<()> {
    let cases: Vec<CaseKind> = if target == "all" {
        CaseKind::SINGULAR.to_vec()
    } else {
        vec![parse_case(target).map_err(CliError::usage)?]
    };
    if !(tol > 0.0) {
        return Err(CliError::usage(format!("tol = {tol} must be positive")));
    }
    let opts = SeparationOptions {
        tol,
        ..SeparationOptions::default()
    };
    let mut checks = Vec::new();
    for &kind in &cases {
        let start = Instant::now();
        checks.extend(separation_check(kind, s, false, &opts)?);
        checks.extend(separation_check(kind, s, true, &opts)?);
        log::info!("{kind}: {:.1} s", start.elapsed().as_secs_f64());
    }
    println!(
        "{:<13} {:>5} {:<6} {:>16} {:>16} {:>10} {:>10}  result",
        "case", "s", "basis", "limit", "duffy", "rel_err", "paper_rel"
    );
    for c in &checks {
        println!(
            "{:<13} {:>5} {:<6} {:>16.9e} {:>16.9e} {:>10.2e} {:>10}  {}",
            c.case.name(),
            c.s,
            if c.zero_basis { "zero" } else { "hat" },
            c.limit,
            c.duffy,
            c.rel_err,
            c.paper.map_or("-".to_string(), |(_, p)| format!("{p:.2e}")),
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    let mode = winning_mode(&checks);
    if cases.contains(&CaseKind::TpVertex) {
        match mode {
            Some(m) => println!("tp-vertex prefactor: {} selected", m.name()),
            None => println!("tp-vertex prefactor: no mode selected"),
        }
    }
    if let Some(path) = json {
        write_json(
            path,
            &OracleReport {
                command: "oracle",
                tol,
                check_tol: CHECK_TOL,
                settings,
                checks: &checks,
                tp_vertex_mode: mode.map(|m| m.name()),
            },
        )?;
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(CliError::numerical(format!("{failed} oracle checks failed")));
    }
    if cases.contains(&CaseKind::TpVertex) && mode.is_none() {
        return Err(CliError::numerical("oracle did not select a tp-vertex prefactor"));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let settings = resolve(&cli, &cfg)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads)
        .build_global()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    match &cli.command {
        Command::SingularStudy {
            case,
            s,
            h,
            n,
            ref_order,
            out,
        } => {
            let s = s.or(cfg.s).unwrap_or(0.5);
            singular_study_cmd(*case, s, &h.0, &n.0, *ref_order, out.as_deref(), &settings)
        }
        Command::SolveBall {
            s,
            levels,
            rho1,
            rho2,
            l,
            n1,
            n2,
            out,
            dump,
        } => {
            let s = s.or(cfg.s).unwrap_or(0.5);
            let args = BallArgs {
                s,
                levels: &levels.0,
                rho1: rho1.or(cfg.rho1).unwrap_or(fracduffy::assembly::DEFAULT_RHO),
                rho2: rho2.or(cfg.rho2).unwrap_or(fracduffy::assembly::DEFAULT_RHO),
                l: l.or(cfg.l).unwrap_or_else(|| default_smoothness(s)),
                n1: n1.or(cfg.n1),
                n2: n2.or(cfg.n2),
                out: out.as_deref(),
                dump: dump.as_deref(),
            };
            solve_ball_cmd(&args, &settings)
        }
        Command::Oracle { target, s, tol, json } => oracle_cmd(target, &s.0, *tol, json.as_deref(), &settings),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

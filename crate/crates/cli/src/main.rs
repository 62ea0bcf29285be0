//! qppm: adaptive quantum PPM receiver toolbox.
//!
//! Subcommands:
//! - `curves`: sweep pulse energies over receiver schemes and emit a CSV of
//!   symbol error probabilities.
//! - `optimize`: run one backward optimization, retrace it into an explicit
//!   policy tree, report both values, and write the tree to a file.
//! - `simulate`: Monte Carlo a stored policy tree and compare against its
//!   exact error probability.
//! - `check-ordering`: assert the expected dominance ordering of the schemes
//!   at every swept point; exits nonzero on a violation.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 usage error,
//! 3 numeric failure (ordering violation).

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use qppm_core::baselines::{
    optimize_icn, pe_conditional_nulling, pe_direct_detection, pe_helstrom,
};
use qppm_core::dp::{load_result, run_backward, store_result, DpResult, Family};
use qppm_core::gk::gk_run_backward;
use qppm_core::tree::{exact_pc, export_tree, import_tree, retrace_forward, simulate};
use qppm_core::{
    config_from_mean_photons, GridSpec, Interpolation, LocalMeasurement, ModulationConfig,
};
use rayon::prelude::*;
use serde::Deserialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Dominance tolerance for `check-ordering` (absolute, per adjacent pair).
const ORDERING_TOL: f64 = 1e-3;
/// Smallest accepted grid resolution per axis.
const MIN_GRID_POINTS: usize = 100;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Other(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

#[derive(Debug)]
enum CliError {
    /// Bad arguments or configuration (exit 2).
    Usage(String),
    /// A numeric consistency check failed (exit 3).
    Numeric(String),
    /// I/O or library failure (exit 1).
    Other(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(err: anyhow::Error) -> Self {
        CliError::Other(err)
    }
}

impl From<qppm_core::Error> for CliError {
    fn from(err: qppm_core::Error) -> Self {
        CliError::Other(anyhow::Error::new(err))
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser)]
#[command(
    name = "qppm",
    version,
    about = "Optimal adaptive measurement policies for quantum PPM receivers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep |alpha|^2 over receiver schemes and write an error-probability CSV.
    Curves(SweepArgs),
    /// Optimize one instance, retrace the policy tree, and write it to a file.
    Optimize(OptimizeArgs),
    /// Monte Carlo a stored policy tree and compare with its exact value.
    Simulate(SimulateArgs),
    /// Verify the scheme dominance ordering at every swept point.
    CheckOrdering(SweepArgs),
}

#[derive(Args, Debug, Default)]
struct SweepArgs {
    /// Cardinalities to sweep, comma separated (e.g. 2,4,8).
    #[arg(long = "M", value_name = "LIST", value_delimiter = ',')]
    m: Vec<u32>,
    /// Pulse energies |alpha|^2: explicit list "0.25,0.5,1" or range "min:max:step".
    #[arg(long, value_name = "SPEC")]
    alpha2: Option<String>,
    /// Comma-separated scheme subset (default: all).
    #[arg(long, value_name = "LIST")]
    schemes: Option<String>,
    /// Grid points per axis for the optimized schemes (default scales with M).
    #[arg(long)]
    grid: Option<usize>,
    /// Value interpolation: bilinear or nearest.
    #[arg(long)]
    interp: Option<String>,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for memoized optimization tables (env: QPPM_CACHE_DIR).
    #[arg(long, env = "QPPM_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    /// TOML file providing any of the above keys; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    /// PPM cardinality.
    #[arg(long = "M")]
    m: u32,
    /// Pulse energy |alpha|^2.
    #[arg(long)]
    alpha2: f64,
    /// Measurement family: projective or gk.
    #[arg(long, default_value = "projective")]
    family: String,
    /// Grid points per axis (default scales with M).
    #[arg(long)]
    grid: Option<usize>,
    /// Value interpolation: bilinear or nearest.
    #[arg(long)]
    interp: Option<String>,
    /// Policy tree output path (omit to skip writing the tree).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for memoized optimization tables (env: QPPM_CACHE_DIR).
    #[arg(long, env = "QPPM_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Policy tree file written by `optimize`.
    #[arg(long)]
    tree: PathBuf,
    /// Pulse energy |alpha|^2 the tree is evaluated at.
    #[arg(long)]
    alpha2: f64,
    /// Monte Carlo trials (must be at least 1).
    #[arg(long, default_value_t = 1_000_000)]
    trials: u64,
    /// RNG seed; a fixed seed reproduces the report exactly.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Curves(args) => {
            let sweep = resolve_sweep(args)?;
            let rows = sweep_rows(&sweep)?;
            write_csv(&rows, sweep.out.as_deref())
        }
        Command::CheckOrdering(args) => {
            let sweep = resolve_sweep(args)?;
            check_ordering(&sweep)
        }
        Command::Optimize(args) => cmd_optimize(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

// ---------------------------------------------------------------------------
// Schemes
// ---------------------------------------------------------------------------

/// Everything the sweep can put on a curve, in dominance order (largest
/// expected error first).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum SchemeKind {
    Dd,
    Cn,
    Icn1,
    Icn2,
    GkDp,
    ProjDpRetraced,
    ProjDp,
    Theory,
}

const ALL_SCHEMES: [SchemeKind; 8] = [
    SchemeKind::Dd,
    SchemeKind::Cn,
    SchemeKind::Icn1,
    SchemeKind::Icn2,
    SchemeKind::GkDp,
    SchemeKind::ProjDpRetraced,
    SchemeKind::ProjDp,
    SchemeKind::Theory,
];

impl SchemeKind {
    fn name(self) -> &'static str {
        match self {
            SchemeKind::Theory => "theory",
            SchemeKind::Dd => "dd",
            SchemeKind::Cn => "cn",
            SchemeKind::Icn1 => "icn1",
            SchemeKind::Icn2 => "icn2",
            SchemeKind::GkDp => "gk-dp",
            SchemeKind::ProjDp => "proj-dp",
            SchemeKind::ProjDpRetraced => "proj-dp-retraced",
        }
    }

    fn parse(s: &str) -> Result<Self, CliError> {
        ALL_SCHEMES
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = ALL_SCHEMES.iter().map(|k| k.name()).collect();
                usage(format!(
                    "unknown scheme {s:?}; valid schemes: {}",
                    valid.join(", ")
                ))
            })
    }
}

// ---------------------------------------------------------------------------
// Sweep configuration
// ---------------------------------------------------------------------------

/// Optional keys mirroring the sweep flags; any flag given explicitly
/// overrides the file value.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(rename = "M")]
    m: Option<Vec<u32>>,
    alpha2: Option<String>,
    schemes: Option<String>,
    grid: Option<usize>,
    interp: Option<String>,
    out: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
}

struct Sweep {
    m: Vec<u32>,
    alpha2: Vec<f64>,
    schemes: Vec<SchemeKind>,
    grid: Option<usize>,
    interp: Interpolation,
    out: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
}

fn resolve_sweep(args: SweepArgs) -> Result<Sweep, CliError> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))
                .map_err(CliError::Other)?;
            toml::from_str(&text).map_err(|e| usage(format!("bad config file: {e}")))?
        }
        None => FileConfig::default(),
    };

    let mut m = if args.m.is_empty() {
        file.m.unwrap_or_default()
    } else {
        args.m
    };
    if m.is_empty() {
        return Err(usage("no cardinalities given (use --M, e.g. --M 2,4,8)"));
    }
    m.sort_unstable();
    m.dedup();
    if let Some(&bad) = m.iter().find(|&&v| v < 2) {
        return Err(usage(format!("cardinality {bad} is below the minimum 2")));
    }

    let alpha2_spec = args
        .alpha2
        .or(file.alpha2)
        .ok_or_else(|| usage("no pulse energies given (use --alpha2, e.g. --alpha2 0.25,1,2)"))?;
    let alpha2 = parse_alpha2(&alpha2_spec)?;

    let schemes = match args.schemes.or(file.schemes) {
        Some(list) => parse_schemes(&list)?,
        None => ALL_SCHEMES.to_vec(),
    };

    let grid = args.grid.or(file.grid);
    if let Some(n) = grid {
        if n < MIN_GRID_POINTS {
            return Err(usage(format!(
                "grid of {n} points per axis is below the minimum {MIN_GRID_POINTS}"
            )));
        }
    }

    let interp = match args.interp.or(file.interp) {
        Some(s) => Interpolation::parse(&s).map_err(|e| usage(e.to_string()))?,
        None => Interpolation::Bilinear,
    };

    Ok(Sweep {
        m,
        alpha2,
        schemes,
        grid,
        interp,
        out: args.out.or(file.out),
        cache_dir: args.cache_dir.or(file.cache_dir),
    })
}

fn parse_alpha2(spec: &str) -> Result<Vec<f64>, CliError> {
    let spec = spec.trim();
    if spec.is_empty() {
        return Err(usage("empty |alpha|^2 list"));
    }
    let parse_one = |s: &str| -> Result<f64, CliError> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad |alpha|^2 value {s:?}")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(usage(format!("|alpha|^2 value {v} must be finite and >= 0")));
        }
        Ok(v)
    };
    let values = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(usage(format!(
                "range {spec:?} must have the form min:max:step"
            )));
        }
        let (min, max, step) = (parse_one(parts[0])?, parse_one(parts[1])?, parse_one(parts[2])?);
        if step <= 0.0 {
            return Err(usage(format!("range step {step} must be positive")));
        }
        if max < min {
            return Err(usage(format!("range maximum {max} is below the minimum {min}")));
        }
        let mut v = Vec::new();
        let mut k = 0u32;
        loop {
            let x = min + f64::from(k) * step;
            if x > max + 1e-9 * step {
                break;
            }
            v.push(x);
            k += 1;
        }
        v
    } else {
        spec.split(',')
            .map(parse_one)
            .collect::<Result<Vec<_>, _>>()?
    };
    if values.is_empty() {
        return Err(usage("empty |alpha|^2 list"));
    }
    Ok(values)
}

fn parse_schemes(list: &str) -> Result<Vec<SchemeKind>, CliError> {
    let mut out = Vec::new();
    for part in list.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let kind = SchemeKind::parse(part)?;
        if !out.contains(&kind) {
            out.push(kind);
        }
    }
    if out.is_empty() {
        return Err(usage("empty scheme set"));
    }
    Ok(out)
}

/// Default grid for a cardinality: at least 251 points per axis and a cell
/// step of at most 1e-3 of the prior cap.
fn default_grid_points(m: u32) -> usize {
    (1000usize.div_ceil(m as usize) + 1).max(251)
}

// ---------------------------------------------------------------------------
// Shared optimization plumbing
// ---------------------------------------------------------------------------

/// Runs (or loads from the cache) one backward optimization. An unusable
/// cache entry is a warning, not an error: the result is recomputed and the
/// entry rewritten.
fn run_or_load(
    cfg: &ModulationConfig,
    family: Family,
    grid: &GridSpec,
    cache_dir: Option<&Path>,
) -> Result<(DpResult, bool), CliError> {
    if let Some(dir) = cache_dir {
        match load_result(dir, cfg, family, grid) {
            Ok(Some(result)) => return Ok((result, true)),
            Ok(None) => {}
            Err(err) => eprintln!(
                "warning: cache entry for M={} |alpha|^2={} ({}) is unusable ({err}); recomputing",
                cfg.m(),
                cfg.mean_photons(),
                family.name()
            ),
        }
    }
    let result = match family {
        Family::Projective => run_backward(cfg, grid)?,
        Family::Kennedy => gk_run_backward(cfg, grid)?,
    };
    if let Some(dir) = cache_dir {
        if let Err(err) = store_result(dir, &result) {
            eprintln!("warning: could not store cache entry: {err}");
        }
    }
    Ok((result, false))
}

fn grid_for(m: u32, requested: Option<usize>, interp: Interpolation) -> Result<GridSpec, CliError> {
    let n = requested.unwrap_or_else(|| default_grid_points(m));
    let grid = GridSpec::square_for(m, n, interp)?;
    if !grid.meets_reference_resolution(m) {
        eprintln!(
            "warning: grid of {n} points per axis for M={m} is coarser than the reference \
             resolution; values may carry visible interpolation bias"
        );
    }
    Ok(grid)
}

fn fmt_first_control(control: &LocalMeasurement) -> String {
    match control {
        LocalMeasurement::Projective { phi } => format!("phi0={phi}"),
        LocalMeasurement::GeneralizedKennedy { beta, association } => {
            format!("beta0={beta};assoc={}", association.name())
        }
        LocalMeasurement::Povm { a, b } => format!("a0={a};b0={b}"),
    }
}

// ---------------------------------------------------------------------------
// curves / check-ordering
// ---------------------------------------------------------------------------

struct Row {
    m: u32,
    alpha2: f64,
    scheme: SchemeKind,
    pe: f64,
    params: String,
}

/// Error probabilities of every selected scheme at one sweep point.
fn point_rows(sweep: &Sweep, m: u32, alpha2: f64) -> Result<Vec<Row>, CliError> {
    let cfg = config_from_mean_photons(m, alpha2)?;
    let cap = 1.0 - 1.0 / m as f64;
    let mut rows = Vec::with_capacity(sweep.schemes.len());
    let needs_proj = sweep
        .schemes
        .iter()
        .any(|s| matches!(s, SchemeKind::ProjDp | SchemeKind::ProjDpRetraced));
    let needs_gk = sweep.schemes.contains(&SchemeKind::GkDp);
    let grid = if needs_proj || needs_gk {
        Some(grid_for(m, sweep.grid, sweep.interp)?)
    } else {
        None
    };
    let proj = if needs_proj {
        let (result, _) = run_or_load(
            &cfg,
            Family::Projective,
            grid.as_ref().unwrap(),
            sweep.cache_dir.as_deref(),
        )?;
        Some(result)
    } else {
        None
    };
    for &scheme in &sweep.schemes {
        let (pe, params) = match scheme {
            SchemeKind::Theory => (pe_helstrom(&cfg), String::new()),
            SchemeKind::Dd => (pe_direct_detection(&cfg), String::new()),
            SchemeKind::Cn => (pe_conditional_nulling(&cfg), String::new()),
            SchemeKind::Icn1 | SchemeKind::Icn2 => {
                let r = optimize_icn(&cfg, scheme == SchemeKind::Icn2)?;
                let params = r
                    .params
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join(";");
                (r.pe, params)
            }
            SchemeKind::GkDp => {
                let (result, _) = run_or_load(
                    &cfg,
                    Family::Kennedy,
                    grid.as_ref().unwrap(),
                    sweep.cache_dir.as_deref(),
                )?;
                (1.0 - result.pc, fmt_first_control(&result.first_control))
            }
            SchemeKind::ProjDp => {
                let result = proj.as_ref().unwrap();
                (1.0 - result.pc, fmt_first_control(&result.first_control))
            }
            SchemeKind::ProjDpRetraced => {
                let result = proj.as_ref().unwrap();
                let tree = retrace_forward(result)?;
                let eval = exact_pc(&tree, &cfg)?;
                (1.0 - eval.pc, fmt_first_control(&result.first_control))
            }
        };
        rows.push(Row {
            m,
            alpha2,
            scheme,
            pe: pe.clamp(0.0, cap),
            params,
        });
    }
    Ok(rows)
}

/// All sweep rows, computed point-parallel and sorted by (M, |alpha|^2,
/// scheme name) for deterministic output.
fn sweep_rows(sweep: &Sweep) -> Result<Vec<Row>, CliError> {
    let jobs: Vec<(u32, f64)> = sweep
        .m
        .iter()
        .flat_map(|&m| sweep.alpha2.iter().map(move |&a| (m, a)))
        .collect();
    let results: Vec<Result<Vec<Row>, CliError>> = jobs
        .par_iter()
        .map(|&(m, a2)| point_rows(sweep, m, a2))
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    rows.sort_by(|a, b| {
        a.m.cmp(&b.m)
            .then(a.alpha2.total_cmp(&b.alpha2))
            .then(a.scheme.name().cmp(b.scheme.name()))
    });
    Ok(rows)
}

fn write_csv(rows: &[Row], out: Option<&Path>) -> Result<(), CliError> {
    let mut text = String::from("M,alpha2,scheme,pe,params\n");
    for row in rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            row.m,
            row.alpha2,
            row.scheme.name(),
            row.pe,
            row.params
        );
    }
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("cannot write output file {}", path.display()))
            .map_err(CliError::Other),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Scans one sweep's rows for adjacent-pair dominance failures: with the
/// selected schemes in canonical order, every point must satisfy
/// pe_left >= pe_right - tolerance. Returns (comparisons made, violations).
fn ordering_violations(
    rows: &[Row],
    points: &[(u32, f64)],
    ordered: &[SchemeKind],
    tol: f64,
) -> (usize, Vec<String>) {
    let mut checked = 0usize;
    let mut violations = Vec::new();
    for &(m, a2) in points {
        let pe_of = |kind: SchemeKind| {
            rows.iter()
                .find(|r| r.m == m && r.alpha2 == a2 && r.scheme == kind)
                .map(|r| r.pe)
                .expect("row exists for every selected scheme")
        };
        for pair in ordered.windows(2) {
            let (left, right) = (pair[0], pair[1]);
            let (pl, pr) = (pe_of(left), pe_of(right));
            checked += 1;
            if pl < pr - tol {
                violations.push(format!(
                    "M={m} |alpha|^2={a2}: {} ({pl:.6e}) fell below {} ({pr:.6e}) by {:.3e}",
                    left.name(),
                    right.name(),
                    pr - pl
                ));
            }
        }
    }
    (checked, violations)
}

/// Verifies that every adjacent pair of selected schemes (in dominance
/// order) satisfies pe_left >= pe_right - tolerance at every swept point.
fn check_ordering(sweep: &Sweep) -> Result<(), CliError> {
    let rows = sweep_rows(sweep)?;
    let mut ordered: Vec<SchemeKind> = sweep.schemes.clone();
    ordered.sort();
    let points: Vec<(u32, f64)> = sweep
        .m
        .iter()
        .flat_map(|&m| sweep.alpha2.iter().map(move |&a| (m, a)))
        .collect();
    let (checked, violations) = ordering_violations(&rows, &points, &ordered, ORDERING_TOL);
    if violations.is_empty() {
        println!(
            "ordering holds: {checked} adjacent comparisons at {} points (tolerance {ORDERING_TOL:e})",
            points.len()
        );
        Ok(())
    } else {
        for v in &violations {
            eprintln!("ordering violation: {v}");
        }
        Err(CliError::Numeric(format!(
            "{} ordering violation(s) beyond tolerance {ORDERING_TOL:e}",
            violations.len()
        )))
    }
}

// ---------------------------------------------------------------------------
// optimize
// ---------------------------------------------------------------------------

fn cmd_optimize(args: OptimizeArgs) -> Result<(), CliError> {
    let family = match args.family.as_str() {
        "projective" | "proj" => Family::Projective,
        "gk" | "kennedy" => Family::Kennedy,
        other => {
            return Err(usage(format!(
                "unknown measurement family {other:?}; valid families: projective, gk"
            )))
        }
    };
    if args.m < 2 {
        return Err(usage(format!(
            "cardinality {} is below the minimum 2",
            args.m
        )));
    }
    if let Some(n) = args.grid {
        if n < MIN_GRID_POINTS {
            return Err(usage(format!(
                "grid of {n} points per axis is below the minimum {MIN_GRID_POINTS}"
            )));
        }
    }
    let interp = match &args.interp {
        Some(s) => Interpolation::parse(s).map_err(|e| usage(e.to_string()))?,
        None => Interpolation::Bilinear,
    };
    let cfg = config_from_mean_photons(args.m, args.alpha2)?;
    let grid = grid_for(args.m, args.grid, interp)?;
    let (result, from_cache) =
        run_or_load(&cfg, family, &grid, args.cache_dir.as_deref())?;
    // Cache status goes to stderr so a warm rerun's stdout is byte-identical.
    eprintln!("cache: {}", if from_cache { "hit" } else { "miss" });
    let tree = retrace_forward(&result)?;
    let eval = exact_pc(&tree, &cfg)?;
    println!(
        "family = {}, M = {}, |alpha|^2 = {}, grid = {}x{} {}",
        family.name(),
        args.m,
        args.alpha2,
        grid.n_u,
        grid.n_v,
        grid.interpolation.name()
    );
    println!("backward pc  = {}", result.pc);
    println!("retraced pc  = {}", eval.pc);
    println!("gap          = {:e}", (result.pc - eval.pc).abs());
    println!("backward pe  = {}", 1.0 - result.pc);
    println!("first control: {}", fmt_first_control(&result.first_control));
    if let Some(path) = &args.out {
        std::fs::write(path, export_tree(&tree))
            .with_context(|| format!("cannot write tree file {}", path.display()))
            .map_err(CliError::Other)?;
        println!("tree written to {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    if args.trials == 0 {
        return Err(usage("trials must be at least 1"));
    }
    let text = std::fs::read_to_string(&args.tree)
        .with_context(|| format!("cannot read tree file {}", args.tree.display()))
        .map_err(CliError::Other)?;
    let tree = import_tree(&text).map_err(|e| {
        CliError::Other(
            anyhow::Error::new(e)
                .context(format!("cannot parse tree file {}", args.tree.display())),
        )
    })?;
    let cfg = config_from_mean_photons(tree.m, args.alpha2)?;
    let eval = exact_pc(&tree, &cfg)?;
    let (pc_hat, stderr) = simulate(&tree, &cfg, args.trials, args.seed)?;
    println!(
        "tree: {} (M = {}), |alpha|^2 = {}, trials = {}, seed = {}",
        args.tree.display(),
        tree.m,
        args.alpha2,
        args.trials,
        args.seed
    );
    println!("simulated pc = {pc_hat} +/- {stderr}");
    println!("exact pc     = {}", eval.pc);
    println!(
        "|difference| = {:e} (3 sigma = {:e})",
        (pc_hat - eval.pc).abs(),
        3.0 * stderr
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha2_list_and_range_forms_parse() {
        assert_eq!(parse_alpha2("0.25, 1, 2").unwrap(), vec![0.25, 1.0, 2.0]);
        let range = parse_alpha2("0.5:1.5:0.5").unwrap();
        assert_eq!(range.len(), 3);
        assert!((range[2] - 1.5).abs() < 1e-12);
        // Endpoint included despite accumulated rounding.
        assert_eq!(parse_alpha2("0:1:0.1").unwrap().len(), 11);
        for bad in ["", " ", "1:2", "1:2:0", "2:1:0.5", "-1", "x", "1:inf:1"] {
            assert!(
                matches!(parse_alpha2(bad), Err(CliError::Usage(_))),
                "{bad:?} should be a usage error"
            );
        }
    }

    #[test]
    fn scheme_lists_parse_dedup_and_reject_unknown_names() {
        let set = parse_schemes("dd, theory,dd").unwrap();
        assert_eq!(set, vec![SchemeKind::Dd, SchemeKind::Theory]);
        let err = parse_schemes("dd,unknown");
        assert!(matches!(err, Err(CliError::Usage(m)) if m.contains("proj-dp-retraced")));
        assert!(matches!(parse_schemes(" , "), Err(CliError::Usage(_))));
    }

    #[test]
    fn canonical_scheme_order_runs_worst_to_best() {
        let mut shuffled = vec![
            SchemeKind::Theory,
            SchemeKind::ProjDp,
            SchemeKind::Dd,
            SchemeKind::GkDp,
        ];
        shuffled.sort();
        assert_eq!(
            shuffled,
            vec![
                SchemeKind::Dd,
                SchemeKind::GkDp,
                SchemeKind::ProjDp,
                SchemeKind::Theory
            ]
        );
    }

    #[test]
    fn ordering_scan_flags_only_genuine_inversions() {
        let row = |scheme, pe| Row {
            m: 4,
            alpha2: 1.0,
            scheme,
            pe,
            params: String::new(),
        };
        let points = [(4u32, 1.0f64)];
        let ordered = [SchemeKind::Dd, SchemeKind::Cn, SchemeKind::Theory];

        // Monotone chain: no violations, both adjacent pairs checked.
        let good = vec![
            row(SchemeKind::Dd, 0.30),
            row(SchemeKind::Cn, 0.20),
            row(SchemeKind::Theory, 0.08),
        ];
        let (checked, violations) = ordering_violations(&good, &points, &ordered, 1e-3);
        assert_eq!(checked, 2);
        assert!(violations.is_empty());

        // A sub-tolerance wiggle is accepted.
        let wiggle = vec![
            row(SchemeKind::Dd, 0.30),
            row(SchemeKind::Cn, 0.3005),
            row(SchemeKind::Theory, 0.08),
        ];
        let (_, violations) = ordering_violations(&wiggle, &points, &ordered, 1e-3);
        assert!(violations.is_empty());

        // A genuine inversion is reported with both scheme names.
        let broken = vec![
            row(SchemeKind::Dd, 0.10),
            row(SchemeKind::Cn, 0.20),
            row(SchemeKind::Theory, 0.08),
        ];
        let (_, violations) = ordering_violations(&broken, &points, &ordered, 1e-3);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].contains("dd") && violations[0].contains("cn"));
    }

    #[test]
    fn default_grid_scales_inversely_with_cardinality() {
        assert_eq!(default_grid_points(2), 501);
        assert_eq!(default_grid_points(3), 335);
        assert_eq!(default_grid_points(4), 251);
        assert_eq!(default_grid_points(8), 251);
        assert_eq!(default_grid_points(100), 251);
    }
}

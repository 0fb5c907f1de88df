//! Command-line front end.
//!
//! Every command prints a `#`-prefixed header with the seed and tolerances
//! before its CSV output. Exit codes: 0 regular or clean, 1 fault found,
//! 2 inconclusive or partial, 3 usage or data error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::flatness;
use crate::fixtures;
use crate::io::{self, fmt17, StrataSet};
use crate::kuo::PaField;
use crate::refine::{self, RefineOptions};
use crate::strata::PairXY;
use crate::whitney::{self, CheckOptions, Condition, Status, DEFAULT_TOL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAULT: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_ERROR: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "stratcheck", version, about = "Whitney regularity checks for stratified sets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON set description, or the name of a built-in set.
    #[arg(long)]
    pub set: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads (default: logical cores).
    #[arg(long, env = "STRATCHECK_THREADS")]
    pub threads: Option<usize>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Pair name, or `x,y` (default: first pair of the set).
    #[arg(long)]
    pub pair: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConditionArg {
    A,
    B,
}

impl From<ConditionArg> for Condition {
    fn from(c: ConditionArg) -> Self {
        match c {
            ConditionArg::A => Condition::A,
            ConditionArg::B => Condition::B,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Ply,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Condition (a) at one point of Y.
    CheckA {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: PairArgs,
        /// Comma-separated coordinates.
        #[arg(long, allow_hyphen_values = true)]
        point: String,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = crate::sequence::DEFAULT_BUDGET)]
        budget: usize,
    },
    /// Condition (b) at one point of Y.
    CheckB {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, allow_hyphen_values = true)]
        point: String,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = crate::sequence::DEFAULT_BUDGET)]
        budget: usize,
    },
    /// Fault scan along Y.
    Scan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, value_enum, default_value = "a")]
        condition: ConditionArg,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = crate::sequence::DEFAULT_BUDGET)]
        budget: usize,
    },
    /// Local components of X at a point of Y.
    Components {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, allow_hyphen_values = true)]
        point: String,
    },
    /// Split a parametric stratum into eps-flat pieces.
    Flatten {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stratum: String,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 64)]
        max_pieces: usize,
    },
    /// Refine a pair until its (a)-scan is clean.
    Refine {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        /// Maximum number of refinement rounds.
        #[arg(long, default_value_t = 3)]
        budget: usize,
        #[arg(long, default_value_t = refine::DEFAULT_SCAN_SAMPLES)]
        samples: usize,
        /// Also write the refined set description here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Export a pair as a point cloud or the set as JSON.
    Export {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, value_enum)]
        format: Format,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::CheckA { common, .. }
            | Command::CheckB { common, .. }
            | Command::Scan { common, .. }
            | Command::Components { common, .. }
            | Command::Flatten { common, .. }
            | Command::Refine { common, .. }
            | Command::Export { common, .. } => common,
        }
    }
}

/// Loads a set from a JSON file, falling back to the built-in sets by name.
pub fn resolve_set(spec: &str) -> Result<StrataSet> {
    let path = std::path::Path::new(spec);
    if path.exists() {
        return io::load_set(path);
    }
    fixtures::set_by_name(spec).ok_or_else(|| {
        Error::Invalid(format!("`{spec}` is neither a file nor one of {}", fixtures::SET_NAMES.join(", ")))
    })
}

fn resolve_pair(set: &StrataSet, query: &Option<String>) -> Result<PairXY> {
    match query {
        Some(q) => set.pair(q),
        None => {
            let first = set.pairs.first().ok_or_else(|| Error::Invalid("the set defines no pairs".into()))?;
            set.pair(&first.name)
        }
    }
}

pub fn parse_point(text: &str) -> Result<DVector<f64>> {
    let coords = text
        .split(',')
        .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Invalid(format!("bad coordinate `{c}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(coords))
}

fn status_code(status: Status) -> i32 {
    match status {
        Status::Regular => EXIT_OK,
        Status::Fault => EXIT_FAULT,
        Status::Inconclusive => EXIT_PARTIAL,
    }
}

struct Output {
    header: String,
    body: String,
    code: i32,
}

fn header(cmd: &str, seed: u64, extra: &[(&str, String)]) -> String {
    let mut h = format!("# stratcheck {cmd} seed={seed}");
    for (k, v) in extra {
        let _ = write!(h, " {k}={v}");
    }
    h
}

fn execute(cmd: &Command) -> Result<Output> {
    let common = cmd.common();
    let set = resolve_set(&common.set)?;
    let seed = common.seed;
    match cmd {
        Command::CheckA { pair, point, tol, budget, .. } | Command::CheckB { pair, point, tol, budget, .. } => {
            let condition = if matches!(cmd, Command::CheckA { .. }) { Condition::A } else { Condition::B };
            let p = resolve_pair(&set, &pair.pair)?;
            let y = parse_point(point)?;
            let opts = CheckOptions { tol: *tol, budget: *budget, seed, ..CheckOptions::default() };
            let v = whitney::check(&p, &y, condition, &opts)?;
            let name = if condition == Condition::A { "check-a" } else { "check-b" };
            Ok(Output {
                header: header(name, seed, &[("pair", p.name.clone()), ("tol", fmt17(*tol)), ("budget", budget.to_string())]),
                code: status_code(v.status),
                body: io::verdicts_csv(&[v]),
            })
        }
        Command::Scan { pair, condition, samples, tol, budget, .. } => {
            let p = resolve_pair(&set, &pair.pair)?;
            let opts = CheckOptions { tol: *tol, budget: *budget, seed, ..CheckOptions::default() };
            let c: Condition = (*condition).into();
            let report = whitney::scan_pair(&p, c, *samples, &opts);
            let code = if report.faults() > 0 {
                EXIT_FAULT
            } else if report.inconclusive > 0 {
                EXIT_PARTIAL
            } else {
                EXIT_OK
            };
            Ok(Output {
                header: header(
                    "scan",
                    seed,
                    &[
                        ("pair", p.name.clone()),
                        ("condition", c.as_str().into()),
                        ("tol", fmt17(*tol)),
                        ("budget", budget.to_string()),
                        ("samples", samples.to_string()),
                        ("faults", report.faults().to_string()),
                        ("clusters", report.isolated_faults.len().to_string()),
                    ],
                ),
                code,
                body: io::report_csv(&report),
            })
        }
        Command::Components { pair, point, .. } => {
            let p = resolve_pair(&set, &pair.pair)?;
            let y = parse_point(point)?;
            let comps = whitney::local_components(&p, &y, seed)?;
            let flags = whitney::essential_flags(&p, &comps, seed)?;
            let mut body = String::from("component,points,pitch,essential\n");
            for (i, (c, e)) in comps.components.iter().zip(&flags).enumerate() {
                let _ = writeln!(body, "{i},{},{},{e}", c.points.len(), fmt17(c.pitch));
            }
            Ok(Output {
                header: header(
                    "components",
                    seed,
                    &[("pair", p.name.clone()), ("radius", fmt17(comps.radius)), ("stable", comps.stable.to_string())],
                ),
                code: if comps.stable { EXIT_OK } else { EXIT_PARTIAL },
                body,
            })
        }
        Command::Flatten { stratum, eps, max_pieces, .. } => {
            let s = set.stratum(stratum).ok_or_else(|| Error::Invalid(format!("no stratum named `{stratum}`")))?;
            let pieces = flatness::flatten(s, *eps, *max_pieces, seed)?;
            let m = s.dim();
            let mut body = String::from("piece");
            for i in 0..m {
                let _ = write!(body, ",lo{i},hi{i}");
            }
            body.push('\n');
            for piece in &pieces {
                body.push_str(&piece.name);
                if let Some(crate::strata::Patch::Parametric(pp)) = piece.patches.first() {
                    for iv in &pp.domain {
                        let _ = write!(body, ",{},{}", fmt17(iv.lo), fmt17(iv.hi));
                    }
                }
                body.push('\n');
            }
            Ok(Output {
                header: header(
                    "flatten",
                    seed,
                    &[("stratum", stratum.clone()), ("eps", fmt17(*eps)), ("pieces", pieces.len().to_string())],
                ),
                code: EXIT_OK,
                body,
            })
        }
        Command::Refine { pair, tol, budget, samples, json, .. } => {
            let p = resolve_pair(&set, &pair.pair)?;
            let opts = RefineOptions { tol: *tol, budget: *budget, seed, scan_samples: *samples, ..RefineOptions::default() };
            let result = refine::refine_with(&p, &opts)?;
            let mut body = String::from("stratum,dim,patches,parent,operation,values\n");
            for s in &result.strata {
                let (parent, op, values) = match result.provenance.get(&s.name) {
                    Some(pr) => (
                        pr.parent.clone(),
                        pr.operation.clone(),
                        pr.values.iter().map(|v| fmt17(*v)).collect::<Vec<_>>().join(";"),
                    ),
                    None => (String::new(), "input".into(), String::new()),
                };
                let _ = writeln!(body, "{},{},{},{parent},{op},{values}", s.name, s.dim(), s.patches.len());
            }
            if let Some(path) = json {
                io::save_set(&result.to_set()?, path)?;
            }
            let offending: Vec<String> = result.offending().iter().map(|r| r.pair.clone()).collect();
            Ok(Output {
                header: header(
                    "refine",
                    seed,
                    &[
                        ("pair", p.name.clone()),
                        ("tol", fmt17(*tol)),
                        ("budget", budget.to_string()),
                        ("iterations", result.iterations.to_string()),
                        ("complete", result.complete.to_string()),
                        ("offending", if offending.is_empty() { "-".into() } else { offending.join(";") }),
                    ],
                ),
                code: if result.complete { EXIT_OK } else { EXIT_PARTIAL },
                body,
            })
        }
        Command::Export { pair, format, samples, .. } => {
            let body = match format {
                Format::Json => io::set_to_json(&set),
                Format::Ply => {
                    let p = resolve_pair(&set, &pair.pair)?;
                    io::ply_string(&io::pair_point_cloud(&p, *samples, seed)?)
                }
                Format::Csv => {
                    let p = resolve_pair(&set, &pair.pair)?;
                    cloud_csv(&p, *samples, seed)?
                }
            };
            let fmt = match format {
                Format::Csv => "csv",
                Format::Json => "json",
                Format::Ply => "ply",
            };
            Ok(Output { header: header("export", seed, &[("format", fmt.into())]), code: EXIT_OK, body })
        }
    }
}

/// Samples of `X` with their `p_a` values, then samples of `Y`.
fn cloud_csv(pair: &PairXY, n: usize, seed: u64) -> Result<String> {
    let dim = pair.x.ambient_dim;
    let mut s = String::new();
    for i in 0..dim {
        let _ = write!(s, "x{i},");
    }
    s.push_str("stratum,patch,p_a\n");
    let field = PaField::new(pair.y.clone());
    for p in pair.x.sample(n, seed).points {
        let v = field.eval_sample(&pair.x, &p).unwrap_or(f64::NAN);
        for c in p.x.iter() {
            let _ = write!(s, "{},", fmt17(*c));
        }
        let _ = writeln!(s, "{},{},{}", pair.x.name, p.patch, fmt17(v));
    }
    for p in pair.y.sample(n / 4 + 1, seed).points {
        for c in p.x.iter() {
            let _ = write!(s, "{},", fmt17(*c));
        }
        let _ = writeln!(s, "{},{},nan", pair.y.name, p.patch);
    }
    Ok(s)
}

fn configure_threads(threads: Option<usize>) {
    if let Some(n) = threads.filter(|n| *n > 0) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn error_code(e: &Error) -> i32 {
    match e {
        Error::Budget(_) => EXIT_PARTIAL,
        _ => EXIT_ERROR,
    }
}

/// Runs the CLI on `args` (program name first), writing the header and
/// results to `out` and diagnostics to `err`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_ERROR;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    configure_threads(cli.command.common().threads);
    match execute(&cli.command) {
        Ok(o) => {
            let _ = writeln!(out, "{}", o.header);
            match &cli.command.common().out {
                Some(path) => {
                    if let Err(e) = std::fs::write(path, &o.body) {
                        let _ = writeln!(err, "error: cannot write {}: {e}", path.display());
                        return EXIT_ERROR;
                    }
                }
                None => {
                    let _ = out.write_all(o.body.as_bytes());
                }
            }
            o.code
        }
        Err(e) => {
            let _ = writeln!(out, "{}", header("error", cli.command.common().seed, &[]));
            let _ = writeln!(err, "error: {e}");
            error_code(&e)
        }
    }
}

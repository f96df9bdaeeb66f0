//! Command-line front end: config parsing, flag overrides, dispatch.
//!
//! Every subcommand takes a single JSON run config (see
//! [`crate::experiments::ExperimentConfig`]) plus optional dotted-path
//! overrides (`--set loop.radius=0.2`). Outputs land in `--out` or the
//! config's `output.dir`. Failures print a machine-readable JSON object on
//! stderr and map to stable exit codes: 2 config/schema, 3 on-EP frame,
//! 4 continuation refinement failure, 5 integrator abort, 1 anything else.
//! Set `EPLOOP_LOG` (e.g. `info`, `debug`) for diagnostics.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use crate::dynamics::DynamicsError;
use crate::experiments::{
    execute_detect, execute_evolve, execute_scan, execute_spectrum, execute_validate,
    ExperimentConfig, RunError,
};
use crate::spectral::SpectralError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ON_EP: i32 = 3;
pub const EXIT_REFINEMENT: i32 = 4;
pub const EXIT_INTEGRATOR: i32 = 5;

#[derive(Parser)]
#[command(
    name = "eploop",
    version,
    about = "Eigenvalue continuation and population transfer around exceptional points"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Continue the eigenvalue braid around the loop; export track and
    /// permutation signature.
    Spectrum(RunArgs),
    /// Integrate the occupation coefficients for each initial condition.
    Evolve(RunArgs),
    /// Sweep the loop shift parameter; export finals and the (s,t) surface.
    Scan(RunArgs),
    /// Locate exceptional points inside a rectangle by loop bisection.
    Detect(RunArgs),
    /// Run the invariant suite on the configured family and loop.
    Validate(RunArgs),
}

#[derive(Args)]
pub struct RunArgs {
    /// Run-config JSON file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overriding the config's `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Dotted-path config override, repeatable: --set loop.radius=0.2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Parses `std::env::args`, runs the requested subcommand and returns the
/// process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => emit_error(&e),
    }
}

fn dispatch(cli: Cli) -> Result<i32, RunError> {
    let (args, name): (&RunArgs, &str) = match &cli.command {
        Command::Spectrum(a) => (a, "spectrum"),
        Command::Evolve(a) => (a, "evolve"),
        Command::Scan(a) => (a, "scan"),
        Command::Detect(a) => (a, "detect"),
        Command::Validate(a) => (a, "validate"),
    };
    let cfg = load_config(args)?;
    let outdir = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    info!("running {name} into {}", outdir.display());

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| RunError::Config(format!("thread pool: {e}")))?;

    pool.install(|| -> Result<i32, RunError> {
        match &cli.command {
            Command::Spectrum(_) => {
                let summary = execute_spectrum(&cfg, &outdir)?;
                println!("signature {}", summary.signature);
                for p in &summary.outputs {
                    println!("wrote {}", p.display());
                }
                Ok(EXIT_OK)
            }
            Command::Evolve(_) => {
                let summary = execute_evolve(&cfg, &outdir)?;
                println!("signature {}", summary.signature);
                for (initial, dominant) in &summary.dominance {
                    println!("{initial} -> final dominant state {dominant}");
                }
                for p in &summary.outputs {
                    println!("wrote {}", p.display());
                }
                Ok(EXIT_OK)
            }
            Command::Scan(_) => {
                let summary = execute_scan(&cfg, &outdir)?;
                if summary.n_flagged > 0 {
                    println!("{} sample(s) flagged (loop at an EP)", summary.n_flagged);
                }
                for p in &summary.outputs {
                    println!("wrote {}", p.display());
                }
                Ok(EXIT_OK)
            }
            Command::Detect(_) => {
                let summary = execute_detect(&cfg, &outdir)?;
                for (p, order) in &summary.eps {
                    println!("EP at ({:.9}, {:.9}) order {order}", p.p1, p.p2);
                }
                if summary.eps.is_empty() {
                    println!("no EP found in the search rectangle");
                }
                if summary.undecided > 0 {
                    println!("{} region(s) undecided", summary.undecided);
                }
                for p in &summary.outputs {
                    println!("wrote {}", p.display());
                }
                Ok(EXIT_OK)
            }
            Command::Validate(_) => {
                let summary = execute_validate(&cfg)?;
                for check in &summary.checks {
                    println!(
                        "{} {}: {}",
                        if check.passed { "PASS" } else { "FAIL" },
                        check.name,
                        check.detail
                    );
                }
                Ok(if summary.all_passed() {
                    EXIT_OK
                } else {
                    EXIT_OTHER
                })
            }
        }
    })
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, RunError> {
    let text = fs::read_to_string(&args.config)?;
    let mut value: Value = serde_json::from_str(&text)?;
    for spec in &args.set {
        apply_override(&mut value, spec)?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value)?;
    // family files travel with their config: resolve relative paths against
    // the config file's directory
    if let Some(path) = &cfg.family.path {
        if path.is_relative() {
            if let Some(dir) = args.config.parent() {
                cfg.family.path = Some(dir.join(path));
            }
        }
    }
    Ok(cfg)
}

/// Applies one `key.path=value` override; the value is parsed as JSON, with
/// a bare-string fallback.
fn apply_override(root: &mut Value, spec: &str) -> Result<(), RunError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| RunError::Config(format!("--set needs KEY=VALUE, got '{spec}'")))?;
    let parsed: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(RunError::Config(format!("bad --set path '{path}'")));
    }
    for seg in &segments[..segments.len() - 1] {
        if !cursor.is_object() {
            return Err(RunError::Config(format!(
                "--set path '{path}' crosses a non-object at '{seg}'"
            )));
        }
        cursor = cursor
            .as_object_mut()
            .expect("checked")
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match cursor.as_object_mut() {
        Some(map) => {
            map.insert(segments[segments.len() - 1].to_string(), parsed);
            Ok(())
        }
        None => Err(RunError::Config(format!(
            "--set path '{path}' does not address an object field"
        ))),
    }
}

fn error_kind_and_code(e: &RunError) -> (&'static str, i32) {
    match e {
        RunError::Config(_) | RunError::Json(_) | RunError::Loop(_) | RunError::Family(_) => {
            ("config", EXIT_CONFIG)
        }
        RunError::Spectral(s) => spectral_kind(s),
        RunError::Dynamics(d) => match d {
            DynamicsError::Spectral(s) => spectral_kind(s),
            DynamicsError::NearEp { .. } => ("on-ep-frame", EXIT_ON_EP),
            DynamicsError::StepUnderflow { .. }
            | DynamicsError::MaxSteps { .. }
            | DynamicsError::QuadratureDepth { .. } => ("integrator-abort", EXIT_INTEGRATOR),
            DynamicsError::BadInitialState(_) => ("config", EXIT_CONFIG),
        },
        RunError::Io(_) => ("io", EXIT_OTHER),
    }
}

fn spectral_kind(s: &SpectralError) -> (&'static str, i32) {
    match s {
        SpectralError::OnEp { .. } | SpectralError::NonFiniteMatrix { .. } => {
            ("on-ep-frame", EXIT_ON_EP)
        }
        SpectralError::CoarseStep { .. }
        | SpectralError::RefinementLimit { .. }
        | SpectralError::TrackedNotClosed { .. } => ("refinement-failure", EXIT_REFINEMENT),
        SpectralError::BadTrackedSubset(_)
        | SpectralError::DimMismatch { .. }
        | SpectralError::Loop(_) => ("config", EXIT_CONFIG),
        SpectralError::Backend(_) => ("backend", EXIT_OTHER),
    }
}

/// Prints the machine-readable error object to stderr; returns the exit
/// code.
fn emit_error(e: &RunError) -> i32 {
    let (kind, code) = error_kind_and_code(e);
    eprintln!(
        "{}",
        json!({ "error": { "code": code, "kind": kind, "message": e.to_string() } })
    );
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_to_nested_paths() {
        let mut v: Value = serde_json::from_str(r#"{"loop":{"radius":0.1},"seed":1}"#).unwrap();
        apply_override(&mut v, "loop.radius=0.25").unwrap();
        apply_override(&mut v, "seed=42").unwrap();
        apply_override(&mut v, "output.dir=results").unwrap();
        assert_eq!(v["loop"]["radius"], json!(0.25));
        assert_eq!(v["seed"], json!(42));
        assert_eq!(v["output"]["dir"], json!("results"));
    }

    #[test]
    fn override_rejects_missing_equals() {
        let mut v = json!({});
        assert!(apply_override(&mut v, "no_equals_here").is_err());
    }

    #[test]
    fn error_codes_are_stable() {
        let cfg_err = RunError::Config("x".into());
        assert_eq!(error_kind_and_code(&cfg_err).1, EXIT_CONFIG);
        let on_ep = RunError::Spectral(SpectralError::OnEp {
            point: crate::family::ParameterPoint::new(0.0, 1.0),
            reason: crate::spectral::OnEpReason::Defective,
        });
        assert_eq!(error_kind_and_code(&on_ep).1, EXIT_ON_EP);
        let refine = RunError::Spectral(SpectralError::RefinementLimit {
            phi_from: 0.0,
            phi_to: 0.1,
            min_overlap: 0.0,
        });
        assert_eq!(error_kind_and_code(&refine).1, EXIT_REFINEMENT);
        let abort = RunError::Dynamics(DynamicsError::StepUnderflow { t: 0.0, h: 0.0 });
        assert_eq!(error_kind_and_code(&abort).1, EXIT_INTEGRATOR);
    }
}

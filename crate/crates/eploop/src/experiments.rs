//! Canned, config-driven scenario runs.
//!
//! Each run takes one [`ExperimentConfig`], produces figure-ready CSV
//! datasets plus a JSON run manifest (config, config hash, tolerances,
//! signature, final-dominance table), and is bit-reproducible: the same
//! config yields byte-identical outputs. Scan samples and initial
//! conditions execute in a work pool; result assembly is order-stable.
//!
//! The shipped configs under `configs/` name the scenario they emulate:
//! braid maps (`fig1`, `fig7`), two- and four-state flips (`fig2`, `fig3`),
//! the shift scan with its jump where the loop crosses the EP (`fig5`),
//! and the three- and six-state EP3 flips (`ep3-flip`, `fig8`).

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{
    coupling_fd_deviation, fmt_float, max_relative_coeff_deviation, max_weighted_deviation,
    reconstruct_state, DynamicsError, EvolveOptions, EvolutionResult, LoopSystem,
};
use crate::family::{FamilyError, MatrixFamily, ParameterPoint};
use crate::loops::{winding_number, LoopError, ParameterLoop};
use crate::spectral::{
    continue_loop, detect_ep, ContinuationTrack, DetectOptions, Rect, SpectralError,
    SpectralOptions,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where a run's matrix family comes from: a built-in model by name
/// (`canonical_ep2`, `ep3_companion`, `ep2_spectators`, `ep3_spectators`)
/// or a family file. Exactly one of `builtin`/`path` must be set;
/// `coupling` and `widths` parameterize the spectator variants.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl FamilySource {
    pub fn builtin(name: &str) -> Self {
        Self {
            builtin: Some(name.to_owned()),
            coupling: None,
            widths: None,
            path: None,
        }
    }

    pub fn resolve(&self) -> Result<MatrixFamily, RunError> {
        match (&self.builtin, &self.path) {
            (Some(name), None) => {
                MatrixFamily::builtin(name, self.coupling, self.widths.as_deref())
                    .ok_or_else(|| RunError::Config(format!("unknown builtin family '{name}'")))?
                    .map_err(RunError::Config)
            }
            (None, Some(path)) => {
                if self.coupling.is_some() || self.widths.is_some() {
                    return Err(RunError::Config(
                        "coupling/widths apply to builtin families only".into(),
                    ));
                }
                Ok(MatrixFamily::load(path)?)
            }
            _ => Err(RunError::Config(
                "family needs exactly one of 'builtin' or 'path'".into(),
            )),
        }
    }
}

/// An initial occupation: a tracked basis state or an explicit coefficient
/// vector (`[re, im]` pairs in track label order).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialCondition {
    Basis { basis: usize },
    Vector { vector: Vec<(f64, f64)> },
}

impl InitialCondition {
    pub fn label(&self) -> String {
        match self {
            InitialCondition::Basis { basis } => format!("basis{basis}"),
            InitialCondition::Vector { .. } => "vector".to_owned(),
        }
    }

    pub fn coefficients(&self, k: usize) -> Result<Vec<C64>, RunError> {
        match self {
            InitialCondition::Basis { basis } => {
                if *basis >= k {
                    return Err(RunError::Config(format!(
                        "initial condition basis {basis} out of range for {k} tracked states"
                    )));
                }
                Ok((0..k)
                    .map(|i| C64::new(if i == *basis { 1.0 } else { 0.0 }, 0.0))
                    .collect())
            }
            InitialCondition::Vector { vector } => {
                if vector.len() != k {
                    return Err(RunError::Config(format!(
                        "initial vector has {} entries, expected {k}",
                        vector.len()
                    )));
                }
                Ok(vector.iter().map(|&(re, im)| C64::new(re, im)).collect())
            }
        }
    }
}

/// Shift-scan block: `n_s` shift values uniformly spanning
/// `[s_min, s_max]`, with the reference EP location used for the
/// winding-number enclosure flag.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub s_min: f64,
    pub s_max: f64,
    pub n_s: usize,
    /// Reference EP location `[p1, p2]` for the enclosure flag.
    pub ep: [f64; 2],
}

/// EP-search block.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectConfig {
    /// Search rectangle `[p1_min, p1_max, p2_min, p2_max]`.
    pub rect: [f64; 4],
    #[serde(default = "default_boundary_steps")]
    pub boundary_steps: usize,
    #[serde(default = "default_detect_tol")]
    pub tol_rel: f64,
    #[serde(default = "default_max_order")]
    pub max_order: usize,
}

fn default_boundary_steps() -> usize {
    DetectOptions::default().boundary_steps
}

fn default_detect_tol() -> f64 {
    DetectOptions::default().tol_rel
}

fn default_max_order() -> usize {
    DetectOptions::default().max_order
}

impl DetectConfig {
    fn options(&self) -> DetectOptions {
        DetectOptions {
            boundary_steps: self.boundary_steps,
            tol_rel: self.tol_rel,
            max_order: self.max_order,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also emit gnuplot scripts referencing the CSVs.
    pub plot_scripts: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            plot_scripts: false,
        }
    }
}

fn default_seed() -> u64 {
    0x5eed_1001
}

/// One run's complete description. Unknown keys are rejected everywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: FamilySource,
    #[serde(rename = "loop")]
    pub loop_: ParameterLoop,
    /// Initial-frame sorted indices of the states to follow; all states
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracked: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub initial_conditions: Vec<InitialCondition>,
    #[serde(default)]
    pub dynamics: EvolveOptions,
    #[serde(default)]
    pub spectral: SpectralOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detect: Option<DetectConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    /// Seed for the deterministic random draws of `validate`.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, RunError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    /// Canonical JSON of the fully resolved config (all defaults filled).
    pub fn canonical_json(&self) -> Result<String, RunError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn sha256(&self) -> Result<String, RunError> {
        let bytes = self.canonical_json()?;
        let hash = Sha256::digest(bytes.as_bytes());
        Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Run manifest: everything needed to reproduce and interpret a run.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub config_sha256: String,
    pub tolerances: Tolerances,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub dominance: Vec<DominanceEntry>,
    pub outputs: Vec<String>,
    pub config: &'a ExperimentConfig,
}

#[derive(Debug, Serialize)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub gap_tol_rel: f64,
    pub min_step_overlap: f64,
    pub refine_overlap: f64,
}

#[derive(Debug, Serialize)]
pub struct DominanceEntry {
    pub initial: String,
    /// Track-label index (0-based) of the final dominant weighted
    /// coefficient.
    pub final_dominant: usize,
}

fn tolerances(cfg: &ExperimentConfig) -> Tolerances {
    Tolerances {
        rtol: cfg.dynamics.rtol,
        atol: cfg.dynamics.atol,
        gap_tol_rel: cfg.spectral.gap_tol_rel,
        min_step_overlap: cfg.spectral.min_step_overlap,
        refine_overlap: cfg.spectral.refine_overlap,
    }
}

fn write_manifest(
    dir: &Path,
    cfg: &ExperimentConfig,
    subcommand: &str,
    signature: Option<String>,
    dominance: Vec<DominanceEntry>,
    outputs: &[PathBuf],
) -> Result<PathBuf, RunError> {
    let manifest = Manifest {
        tool: "eploop",
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        config_sha256: cfg.sha256()?,
        tolerances: tolerances(cfg),
        signature,
        dominance,
        outputs: outputs
            .iter()
            .map(|p| {
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned()
            })
            .collect(),
        config: cfg,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

/// Track export: `step,t,phi,p1,p2`, then `Re_E_k,Im_E_k` per tracked state.
pub fn write_track_csv<W: Write>(track: &ContinuationTrack, mut w: W) -> io::Result<()> {
    let k = track.n_states();
    let mut header = String::from("step,t,phi,p1,p2");
    for i in 1..=k {
        header.push_str(&format!(",Re_E_{i},Im_E_{i}"));
    }
    writeln!(w, "{header}")?;
    for s in &track.samples {
        let mut row = format!(
            "{},{},{},{},{}",
            s.step,
            fmt_float(s.t),
            fmt_float(s.phi),
            fmt_float(s.frame.point.p1),
            fmt_float(s.frame.point.p2)
        );
        for e in &s.frame.energies {
            row.push_str(&format!(",{},{}", fmt_float(e.re), fmt_float(e.im)));
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

/// Braid run: continuation track plus the loop's permutation signature.
pub struct BraidOutcome {
    pub track: ContinuationTrack,
}

pub fn run_braid(family: &MatrixFamily, cfg: &ExperimentConfig) -> Result<BraidOutcome, RunError> {
    let track = continue_loop(family, &cfg.loop_, cfg.tracked.as_deref(), &cfg.spectral)?;
    Ok(BraidOutcome { track })
}

/// One evolution run of a flip experiment.
pub struct FlipRun {
    pub label: String,
    pub result: EvolutionResult,
}

pub struct FlipOutcome {
    pub track_signature: String,
    pub runs: Vec<FlipRun>,
}

impl FlipOutcome {
    /// (initial label, final dominant track label) per run.
    pub fn dominance(&self) -> Vec<(String, usize)> {
        self.runs
            .iter()
            .map(|r| (r.label.clone(), r.result.final_dominant()))
            .collect()
    }
}

/// Runs the full evolution for every configured initial condition, each
/// with its adiabatic reference; initial conditions run in parallel.
pub fn run_flip(family: &MatrixFamily, cfg: &ExperimentConfig) -> Result<FlipOutcome, RunError> {
    if cfg.initial_conditions.is_empty() {
        return Err(RunError::Config(
            "evolve runs need at least one initial condition".into(),
        ));
    }
    let sys = LoopSystem::prepare(family, &cfg.loop_, cfg.tracked.as_deref(), cfg.spectral)?;
    let k = sys.n_states();
    let runs: Vec<FlipRun> = cfg
        .initial_conditions
        .par_iter()
        .map(|ic| -> Result<FlipRun, RunError> {
            let a0 = ic.coefficients(k)?;
            let result = sys.evolve_full(&a0, &cfg.dynamics)?;
            Ok(FlipRun {
                label: ic.label(),
                result,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(FlipOutcome {
        track_signature: sys.track.signature.cycle_notation(),
        runs,
    })
}

/// Finals of one scan sample.
#[derive(Debug, Clone)]
pub struct ScanFinals {
    pub log_norm: f64,
    pub coeffs: Vec<C64>,
    pub weighted: Vec<f64>,
    pub adiabatic: Vec<C64>,
    pub adiabatic_weighted: Vec<f64>,
    pub dominant: usize,
}

/// One shift value of a scan.
#[derive(Debug, Clone)]
pub struct ScanSample {
    pub s: f64,
    /// Loop passed too close to an EP (or another spectral failure); finals
    /// absent, sample kept.
    pub flagged: Option<String>,
    /// Winding of the loop around the reference EP; `None` when the path
    /// runs through it.
    pub winding: Option<i32>,
    pub signature: Option<String>,
    pub finals: Option<ScanFinals>,
    /// Weighted coefficients over time, for the (s, t) surface export.
    pub series: Option<(Vec<f64>, Vec<Vec<f64>>)>,
}

impl ScanSample {
    pub fn enclosed(&self) -> Option<bool> {
        self.winding.map(|w| w != 0)
    }
}

pub struct ScanOutcome {
    pub samples: Vec<ScanSample>,
    pub n_states: usize,
    pub initial: String,
}

/// Shift scan: for each `s` on the grid, traverse the shifted loop,
/// recording finals, the adiabatic finals and the EP-enclosure flag.
/// Samples whose loop hits an EP are flagged, not fatal. Samples run in a
/// work pool; assembly is ordered by `s`.
pub fn run_shift_scan(
    family: &MatrixFamily,
    cfg: &ExperimentConfig,
) -> Result<ScanOutcome, RunError> {
    let scan = cfg
        .scan
        .as_ref()
        .ok_or_else(|| RunError::Config("scan runs need a 'scan' block".into()))?;
    if scan.n_s < 2 || !(scan.s_min < scan.s_max) {
        return Err(RunError::Config(
            "scan grid needs n_s >= 2 and s_min < s_max".into(),
        ));
    }
    let ic = cfg
        .initial_conditions
        .first()
        .ok_or_else(|| RunError::Config("scan runs need an initial condition".into()))?;
    let ep_point = ParameterPoint::new(scan.ep[0], scan.ep[1]);

    let samples: Vec<ScanSample> = (0..scan.n_s)
        .into_par_iter()
        .map(|idx| -> Result<ScanSample, RunError> {
            let s = scan.s_min + (scan.s_max - scan.s_min) * idx as f64 / (scan.n_s - 1) as f64;
            let lp = cfg.loop_.clone().with_shift(s);
            let winding = winding_number(&lp, ep_point);
            let run = || -> Result<(String, ScanFinals, (Vec<f64>, Vec<Vec<f64>>)), RunError> {
                let sys = LoopSystem::prepare(family, &lp, cfg.tracked.as_deref(), cfg.spectral)?;
                let k = sys.n_states();
                let a0 = ic.coefficients(k)?;
                let full = sys.evolve_full(&a0, &cfg.dynamics)?;
                let ad = sys.evolve_adiabatic(&a0, &cfg.dynamics)?;
                let finals = ScanFinals {
                    log_norm: *full.log_norms.last().expect("non-empty"),
                    coeffs: full.coeffs.last().expect("non-empty").clone(),
                    weighted: full.final_weighted().to_vec(),
                    adiabatic: ad.coeffs.last().expect("non-empty").clone(),
                    adiabatic_weighted: ad.final_weighted().to_vec(),
                    dominant: full.final_dominant(),
                };
                let series = (full.times.clone(), full.weighted.clone());
                Ok((sys.track.signature.cycle_notation(), finals, series))
            };
            match run() {
                Ok((signature, finals, series)) => Ok(ScanSample {
                    s,
                    flagged: None,
                    winding,
                    signature: Some(signature),
                    finals: Some(finals),
                    series: Some(series),
                }),
                // an EP on (or numerically at) the path flags the sample
                Err(RunError::Spectral(e)) => Ok(ScanSample {
                    s,
                    flagged: Some(e.to_string()),
                    winding,
                    signature: None,
                    finals: None,
                    series: None,
                }),
                Err(RunError::Dynamics(e)) => Ok(ScanSample {
                    s,
                    flagged: Some(e.to_string()),
                    winding,
                    signature: None,
                    finals: None,
                    series: None,
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, _>>()?;

    let n_states = samples
        .iter()
        .find_map(|sm| sm.finals.as_ref().map(|f| f.weighted.len()))
        .ok_or_else(|| RunError::Config("every scan sample failed".into()))?;
    Ok(ScanOutcome {
        samples,
        n_states,
        initial: ic.label(),
    })
}

/// Finals-vs-s export (one row per shift value).
pub fn write_scan_finals_csv<W: Write>(outcome: &ScanOutcome, mut w: W) -> io::Result<()> {
    let k = outcome.n_states;
    let mut header = String::from("s,flagged,enclosed,winding,signature,log_norm");
    for i in 1..=k {
        header.push_str(&format!(
            ",abs2_a_{i},weighted_{i},abs2_a_ad_{i},weighted_ad_{i}"
        ));
    }
    header.push_str(",dominant");
    writeln!(w, "{header}")?;
    for sm in &outcome.samples {
        let mut row = format!(
            "{},{},{},{},{}",
            fmt_float(sm.s),
            u8::from(sm.flagged.is_some()),
            sm.enclosed()
                .map(|b| u8::from(b).to_string())
                .unwrap_or_else(|| "nan".into()),
            sm.winding
                .map(|x| x.to_string())
                .unwrap_or_else(|| "nan".into()),
            sm.signature.clone().unwrap_or_else(|| "nan".into()),
        );
        match &sm.finals {
            Some(f) => {
                row.push_str(&format!(",{}", fmt_float(f.log_norm)));
                for i in 0..k {
                    row.push_str(&format!(
                        ",{},{},{},{}",
                        fmt_float(f.coeffs[i].norm_sqr()),
                        fmt_float(f.weighted[i]),
                        fmt_float(f.adiabatic[i].norm_sqr()),
                        fmt_float(f.adiabatic_weighted[i]),
                    ));
                }
                row.push_str(&format!(",{}", f.dominant));
            }
            None => {
                row.push_str(",nan");
                for _ in 0..k {
                    row.push_str(",nan,nan,nan,nan");
                }
                row.push_str(",nan");
            }
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

/// Long-format (s, t) surface export of the weighted coefficients.
pub fn write_scan_surface_csv<W: Write>(outcome: &ScanOutcome, mut w: W) -> io::Result<()> {
    let k = outcome.n_states;
    let mut header = String::from("s,t");
    for i in 1..=k {
        header.push_str(&format!(",weighted_{i}"));
    }
    writeln!(w, "{header}")?;
    for sm in &outcome.samples {
        let Some((times, rows)) = &sm.series else {
            continue;
        };
        for (t, row) in times.iter().zip(rows.iter()) {
            let mut line = format!("{},{}", fmt_float(sm.s), fmt_float(*t));
            for x in row {
                line.push_str(&format!(",{}", fmt_float(*x)));
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// top-level run drivers (CSV + manifest emission)
// ---------------------------------------------------------------------------

pub struct SpectrumSummary {
    pub signature: String,
    pub outputs: Vec<PathBuf>,
}

pub fn execute_spectrum(
    cfg: &ExperimentConfig,
    outdir: &Path,
) -> Result<SpectrumSummary, RunError> {
    let family = cfg.family.resolve()?;
    cfg.loop_.validate()?;
    let outcome = run_braid(&family, cfg)?;
    fs::create_dir_all(outdir)?;
    let mut outputs = Vec::new();

    let track_path = outdir.join("track.csv");
    let mut buf = Vec::new();
    write_track_csv(&outcome.track, &mut buf)?;
    fs::write(&track_path, buf)?;
    outputs.push(track_path);

    let signature = outcome.track.signature.cycle_notation();
    let sig_path = outdir.join("signature.txt");
    fs::write(&sig_path, format!("{signature}\n"))?;
    outputs.push(sig_path);

    if cfg.output.plot_scripts {
        outputs.push(emit_braid_plot(outdir, outcome.track.n_states())?);
    }
    write_manifest(
        outdir,
        cfg,
        "spectrum",
        Some(signature.clone()),
        vec![],
        &outputs,
    )?;
    Ok(SpectrumSummary { signature, outputs })
}

pub struct EvolveSummary {
    pub signature: String,
    pub dominance: Vec<(String, usize)>,
    pub outputs: Vec<PathBuf>,
}

pub fn execute_evolve(cfg: &ExperimentConfig, outdir: &Path) -> Result<EvolveSummary, RunError> {
    let family = cfg.family.resolve()?;
    cfg.loop_.validate()?;
    let outcome = run_flip(&family, cfg)?;
    fs::create_dir_all(outdir)?;
    let mut outputs = Vec::new();
    for run in &outcome.runs {
        let path = outdir.join(format!("evolve_{}.csv", run.label));
        let mut buf = Vec::new();
        run.result.write_csv(&mut buf)?;
        fs::write(&path, buf)?;
        if cfg.output.plot_scripts {
            outputs.push(emit_evolve_plot(outdir, &run.label, run.result.n_states())?);
        }
        outputs.push(path);
    }
    let dominance = outcome.dominance();
    let entries = dominance
        .iter()
        .map(|(initial, dom)| DominanceEntry {
            initial: initial.clone(),
            final_dominant: *dom,
        })
        .collect();
    write_manifest(
        outdir,
        cfg,
        "evolve",
        Some(outcome.track_signature.clone()),
        entries,
        &outputs,
    )?;
    Ok(EvolveSummary {
        signature: outcome.track_signature,
        dominance,
        outputs,
    })
}

pub struct ScanSummary {
    pub n_flagged: usize,
    pub outputs: Vec<PathBuf>,
}

pub fn execute_scan(cfg: &ExperimentConfig, outdir: &Path) -> Result<ScanSummary, RunError> {
    let family = cfg.family.resolve()?;
    cfg.loop_.validate()?;
    let outcome = run_shift_scan(&family, cfg)?;
    fs::create_dir_all(outdir)?;
    let mut outputs = Vec::new();

    let finals_path = outdir.join("scan_finals.csv");
    let mut buf = Vec::new();
    write_scan_finals_csv(&outcome, &mut buf)?;
    fs::write(&finals_path, buf)?;
    outputs.push(finals_path);

    let surface_path = outdir.join("scan_surface.csv");
    let mut buf = Vec::new();
    write_scan_surface_csv(&outcome, &mut buf)?;
    fs::write(&surface_path, buf)?;
    outputs.push(surface_path);

    if cfg.output.plot_scripts {
        outputs.push(emit_scan_plot(outdir, outcome.n_states)?);
    }

    let dominance = outcome
        .samples
        .iter()
        .filter_map(|sm| {
            sm.finals.as_ref().map(|f| DominanceEntry {
                initial: format!("{}@s={}", outcome.initial, sm.s),
                final_dominant: f.dominant,
            })
        })
        .collect();
    write_manifest(outdir, cfg, "scan", None, dominance, &outputs)?;
    Ok(ScanSummary {
        n_flagged: outcome
            .samples
            .iter()
            .filter(|s| s.flagged.is_some())
            .count(),
        outputs,
    })
}

pub struct DetectSummary {
    pub eps: Vec<(ParameterPoint, usize)>,
    pub undecided: usize,
    pub outputs: Vec<PathBuf>,
}

pub fn execute_detect(cfg: &ExperimentConfig, outdir: &Path) -> Result<DetectSummary, RunError> {
    let family = cfg.family.resolve()?;
    let det = cfg
        .detect
        .as_ref()
        .ok_or_else(|| RunError::Config("detect runs need a 'detect' block".into()))?;
    let outcome = detect_ep(&family, Rect::from(det.rect), &det.options(), &cfg.spectral)?;
    fs::create_dir_all(outdir)?;
    let mut outputs = Vec::new();

    let path = outdir.join("detected_eps.csv");
    let mut buf = String::from("p1,p2,order\n");
    for ep in &outcome.eps {
        buf.push_str(&format!(
            "{},{},{}\n",
            fmt_float(ep.point.p1),
            fmt_float(ep.point.p2),
            ep.order
        ));
    }
    fs::write(&path, buf)?;
    outputs.push(path);

    if !outcome.undecided.is_empty() {
        let path = outdir.join("undecided_regions.csv");
        let mut buf = String::from("p1_min,p1_max,p2_min,p2_max\n");
        for r in &outcome.undecided {
            buf.push_str(&format!(
                "{},{},{},{}\n",
                fmt_float(r.p1_min),
                fmt_float(r.p1_max),
                fmt_float(r.p2_min),
                fmt_float(r.p2_max)
            ));
        }
        fs::write(&path, buf)?;
        outputs.push(path);
    }
    write_manifest(outdir, cfg, "detect", None, vec![], &outputs)?;
    Ok(DetectSummary {
        eps: outcome.eps.iter().map(|e| (e.point, e.order)).collect(),
        undecided: outcome.undecided.len(),
        outputs,
    })
}

/// One validation check: name, pass/fail, measured value and its bound.
pub struct ValidationCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub struct ValidateSummary {
    pub checks: Vec<ValidationCheck>,
}

impl ValidateSummary {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs the invariant suite on the configured family and loop: frame
/// residual and bi-orthonormality bounds over the whole track, analytic
/// couplings against the finite-difference oracle at seeded random loop
/// points, fixed-basis oracle agreement, and weighted-coefficient
/// normalization. Writes no files.
pub fn execute_validate(cfg: &ExperimentConfig) -> Result<ValidateSummary, RunError> {
    let family = cfg.family.resolve()?;
    cfg.loop_.validate()?;
    let mut checks = Vec::new();
    let sys = LoopSystem::prepare(&family, &cfg.loop_, cfg.tracked.as_deref(), cfg.spectral)?;

    // frame quality along the track
    let mut max_res = 0.0_f64;
    let mut max_bio = 0.0_f64;
    let mut norm_a = 0.0_f64;
    for s in &sys.track.samples {
        let d = s.frame.diagnostics(&family);
        max_res = max_res.max(d.max_residual);
        max_bio = max_bio.max(d.max_biorth_dev);
        norm_a = norm_a.max(d.norm_a);
    }
    let res_bound = 1e-10 * norm_a.max(1e-300);
    checks.push(ValidationCheck {
        name: "frame_residual".into(),
        passed: max_res <= res_bound,
        detail: format!("max ‖A·r - μ·C·r‖ = {max_res:.3e} (bound {res_bound:.3e})"),
    });
    checks.push(ValidationCheck {
        name: "biorthonormality".into(),
        passed: max_bio <= 1e-10,
        detail: format!("max |l·C·r - δ| = {max_bio:.3e} (bound 1e-10)"),
    });

    // analytic couplings vs finite differences at random loop times
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst_fd = 0.0_f64;
    let mut n_fd = 0;
    let mut attempts = 0;
    while n_fd < 20 && attempts < 200 {
        attempts += 1;
        let t = rng.gen_range(0.0..sys.lp.total_time());
        let p = sys.lp.point_at_time(t);
        let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        match coupling_fd_deviation(&family, p, [th.cos(), th.sin()], &cfg.spectral) {
            Ok(dev) => {
                worst_fd = worst_fd.max(dev);
                n_fd += 1;
            }
            Err(_) => continue,
        }
    }
    checks.push(ValidationCheck {
        name: "coupling_fd_oracle".into(),
        passed: n_fd > 0 && worst_fd <= 1e-5,
        detail: format!("max relative deviation {worst_fd:.3e} over {n_fd} points (bound 1e-5)"),
    });

    // instantaneous-basis vs fixed-basis dynamics
    if sys.n_states() == family.dim() {
        let ic = cfg
            .initial_conditions
            .first()
            .cloned()
            .unwrap_or(InitialCondition::Basis { basis: 0 });
        let a0 = ic.coefficients(sys.n_states())?;
        let full = sys.evolve_full(&a0, &cfg.dynamics)?;
        let psi0 = reconstruct_state(&sys.track.samples[0].frame, &a0);
        let oracle = sys.evolve_oracle(&psi0, &cfg.dynamics)?;
        let wdev = max_weighted_deviation(&full, &oracle.result);
        checks.push(ValidationCheck {
            name: "oracle_weighted".into(),
            passed: wdev <= 1e-8,
            detail: format!("max weighted deviation {wdev:.3e} (bound 1e-8)"),
        });
        let cdev = max_relative_coeff_deviation(&full, &oracle.result);
        checks.push(ValidationCheck {
            name: "oracle_coefficients".into(),
            passed: cdev <= 1e-6,
            detail: format!("max relative coefficient deviation {cdev:.3e} (bound 1e-6)"),
        });
        let mut max_norm_dev = 0.0_f64;
        for row in &full.weighted {
            max_norm_dev = max_norm_dev.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        checks.push(ValidationCheck {
            name: "weighted_normalization".into(),
            passed: max_norm_dev <= 1e-12,
            detail: format!("max |Σ ā - 1| = {max_norm_dev:.3e} (bound 1e-12)"),
        });
    } else {
        checks.push(ValidationCheck {
            name: "oracle_weighted".into(),
            passed: true,
            detail: "skipped: tracked subset smaller than the family (oracle needs all states)"
                .into(),
        });
    }

    Ok(ValidateSummary { checks })
}

// ---------------------------------------------------------------------------
// gnuplot script emission
// ---------------------------------------------------------------------------

fn emit_braid_plot(outdir: &Path, k: usize) -> Result<PathBuf, RunError> {
    let mut s = String::from(
        "# gnuplot: eigenvalue braid in the complex energy plane\nset xlabel 'Re E'\nset ylabel 'Im E'\nset key outside\nplot \\\n",
    );
    for i in 1..=k {
        let col_re = 4 + 2 * i;
        let col_im = 5 + 2 * i;
        s.push_str(&format!(
            "  'track.csv' using {col_re}:{col_im} with lines title 'state {i}'{}\n",
            if i < k { ", \\" } else { "" }
        ));
    }
    let path = outdir.join("braid.gp");
    fs::write(&path, s)?;
    Ok(path)
}

fn emit_evolve_plot(outdir: &Path, label: &str, k: usize) -> Result<PathBuf, RunError> {
    let mut s = format!(
        "# gnuplot: weighted occupations, initial condition {label}\nset xlabel 't'\nset ylabel 'weighted coefficient'\nset key outside\nplot \\\n"
    );
    for i in 1..=k {
        // weighted_k sits 4 columns into each state's 7-column block
        let col = 2 + 7 * (i - 1) + 4;
        s.push_str(&format!(
            "  'evolve_{label}.csv' using 1:{col} with lines title 'state {i}'{}\n",
            if i < k { ", \\" } else { "" }
        ));
    }
    let path = outdir.join(format!("evolve_{label}.gp"));
    fs::write(&path, s)?;
    Ok(path)
}

fn emit_scan_plot(outdir: &Path, k: usize) -> Result<PathBuf, RunError> {
    let mut s = String::from(
        "# gnuplot: final weighted occupations vs shift\nset xlabel 's'\nset ylabel 'final weighted coefficient'\nset key outside\nplot \\\n",
    );
    for i in 1..=k {
        let col = 6 + 4 * (i - 1) + 2;
        s.push_str(&format!(
            "  'scan_finals.csv' using 1:{col} with linespoints title 'state {i}'{}\n",
            if i < k { ", \\" } else { "" }
        ));
    }
    let path = outdir.join("scan_finals.gp");
    fs::write(&path, s)?;
    Ok(path)
}

//! Time integration of resonance occupation coefficients.
//!
//! The state is expanded in the instantaneous eigenbasis of the loop's
//! matrix, `ψ(t) = Σ_i a_i(t) r_i(t)`, giving
//!
//! ```text
//! ȧ_i = -i·E_i(t)·a_i - Σ_j κ_ij(t)·a_j ,    κ_ij = l_i·C·ṙ_j ,
//! ```
//!
//! with the couplings evaluated in closed form from `Ȧ`:
//! `κ_ij = (l_i·Ȧ·r_j)/(μ_j - μ_i)` for `i ≠ j`. In the rigid c-product
//! gauge the diagonal coupling vanishes identically for symmetric families;
//! for general families the rigid normalization `r·C·r = 1` fixes it to
//! `κ_jj = -Σ_{m≠j} κ_mj·(r_j·C·r_m)`, so no eigenvector derivative is ever
//! differenced numerically.
//!
//! Resonance decay spans many orders of magnitude; the integrator therefore
//! carries coefficients in rescaled form, `physical = a · e^{log_norm}`,
//! keeping `max|a_i|` inside `[1e-3, 1e3]`.
//!
//! [`LoopSystem::evolve_oracle`] integrates the same physics in the fixed
//! basis, `C ψ̇ = -(i/s_E)·A(t)·ψ`, and projects onto the track's frames —
//! an independent route used to validate the instantaneous-basis path.

use std::io::{self, Write};

use ndarray::Array2;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::family::MatrixFamily;
use crate::linalg;
use crate::loops::ParameterLoop;
use crate::spectral::{
    continue_loop, eigen_frame_with, gauge_fix, match_selection, ContinuationTrack, SpectralError,
    SpectralFrame, SpectralOptions,
};

/// Rescaling window for the coefficient magnitudes.
pub const RESCALE_LO: f64 = 1e-3;
pub const RESCALE_HI: f64 = 1e3;

/// Fraction of the total time below which a step means the integrator
/// stalled (typically against an EP).
pub const STEP_UNDERFLOW_REL: f64 = 1e-13;

const MAX_STEPS: usize = 50_000_000;
const QUAD_MAX_DEPTH: u32 = 40;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("eigenvalue gap {gap:.3e} below coupling tolerance at t = {t:.6}")]
    NearEp { t: f64, gap: f64 },
    #[error(
        "integrator step underflow at t = {t:.6} (h = {h:.3e}); loop passes too close to an EP"
    )]
    StepUnderflow { t: f64, h: f64 },
    #[error("integrator exceeded {MAX_STEPS} steps at t = {t:.6}")]
    MaxSteps { t: f64 },
    #[error("adaptive quadrature failed to converge on [{t0:.6}, {t1:.6}]")]
    QuadratureDepth { t0: f64, t1: f64 },
    #[error("bad initial state: {0}")]
    BadInitialState(String),
}

/// Occupation coefficients plus the factored-out magnitude exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientState {
    pub a: Vec<C64>,
    /// Physical coefficients are `a · e^{log_norm}`.
    pub log_norm: f64,
    pub t: f64,
}

impl CoefficientState {
    pub fn new(a: Vec<C64>, t: f64) -> Self {
        let mut s = Self { a, log_norm: 0.0, t };
        s.rescale();
        s
    }

    /// Moves the overall magnitude into `log_norm` whenever `max|a_i|`
    /// leaves the `[1e-3, 1e3]` window.
    pub fn rescale(&mut self) {
        let m = self.a.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
        if m > 0.0 && (m < RESCALE_LO || m > RESCALE_HI) {
            let inv = 1.0 / m;
            for z in &mut self.a {
                *z *= inv;
            }
            self.log_norm += m.ln();
        }
    }
}

/// Weighted coefficients `ā_i = |a_i|² / Σ_j |a_j|²`.
///
/// Independent of `log_norm` and of any global rescaling of `a`.
pub fn weighted(a: &[C64]) -> Result<Vec<f64>, DynamicsError> {
    let total: f64 = a.iter().map(|z| z.norm_sqr()).sum();
    if total == 0.0 || !total.is_finite() {
        return Err(DynamicsError::BadInitialState(format!(
            "weighted coefficients undefined: Σ|a|² = {total}"
        )));
    }
    Ok(a.iter().map(|z| z.norm_sqr() / total).collect())
}

/// Integration controls for the evolution routines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveOptions {
    /// Relative tolerance of the embedded Runge-Kutta 5(4) pair.
    pub rtol: f64,
    /// Absolute tolerance, applied to the rescaled coefficients.
    pub atol: f64,
    /// Number of output intervals (`n_samples + 1` rows).
    pub n_samples: usize,
    /// Drop all couplings; the full evolution then reduces to the adiabatic
    /// one (consistency checks).
    pub zero_coupling: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-14,
            n_samples: 400,
            zero_coupling: false,
        }
    }
}

/// Non-adiabatic coupling matrix `κ_ij = l_i·C·ṙ_j` from the analytic `Ȧ`.
///
/// Off-diagonal entries are `(l_i·Ȧ·r_j)/(μ_j - μ_i)`; the diagonal is zero
/// for symmetric families and the rigid-gauge closed form otherwise. The
/// matrix diverges like the inverse gap near an EP; gaps below
/// `gap_tol_rel·‖A‖` are rejected.
pub fn coupling_matrix(
    frame: &SpectralFrame,
    a_dot: &Array2<C64>,
    family: &MatrixFamily,
    gap_tol_rel: f64,
    t: f64,
) -> Result<Array2<C64>, DynamicsError> {
    let k = frame.n_states();
    let g = frame.left.t().dot(a_dot).dot(&frame.right);
    let gap_tol = gap_tol_rel * frame.norm_a.max(f64::MIN_POSITIVE);
    let mut kappa = Array2::<C64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let denom = frame.mus[j] - frame.mus[i];
            if denom.norm() < gap_tol {
                return Err(DynamicsError::NearEp {
                    t,
                    gap: denom.norm(),
                });
            }
            kappa[[i, j]] = g[[i, j]] / denom;
        }
    }
    if !frame.symmetric {
        // κ_jj = -Σ_{m≠j} κ_mj · (r_j·C·r_m), from d/dt (r·C·r) = 0.
        let cr = family.metric_apply(&frame.right);
        let s = frame.right.t().dot(&cr);
        for j in 0..k {
            let mut acc = C64::new(0.0, 0.0);
            for m in 0..k {
                if m != j {
                    acc += kappa[[m, j]] * s[[j, m]];
                }
            }
            kappa[[j, j]] = -acc;
        }
    }
    Ok(kappa)
}

/// Time series of occupation coefficients along a loop traversal.
///
/// `coeffs[s][k]` is rescaled: the physical coefficient is
/// `coeffs[s][k] · e^{log_norms[s]}`. The adiabatic reference, when present,
/// shares the same per-row `log_norm`, so its columns are directly
/// comparable with the raw ones.
#[derive(Debug, Clone)]
pub struct EvolutionResult {
    pub times: Vec<f64>,
    pub log_norms: Vec<f64>,
    pub coeffs: Vec<Vec<C64>>,
    pub weighted: Vec<Vec<f64>>,
    pub energies: Vec<Vec<C64>>,
    pub adiabatic: Option<Vec<Vec<C64>>>,
    /// Initial-frame sorted indices of the tracked states.
    pub labels: Vec<usize>,
    pub rhs_evals: usize,
}

impl EvolutionResult {
    pub fn n_states(&self) -> usize {
        self.labels.len()
    }

    pub fn final_weighted(&self) -> &[f64] {
        self.weighted.last().expect("non-empty result")
    }

    /// Index (in track label order) of the dominant final weighted
    /// coefficient.
    pub fn final_dominant(&self) -> usize {
        let w = self.final_weighted();
        let mut best = 0;
        for k in 1..w.len() {
            if w[k] > w[best] {
                best = k;
            }
        }
        best
    }

    /// Weighted coefficients of the adiabatic reference at output row `s`.
    pub fn weighted_adiabatic(&self, s: usize) -> Option<Vec<f64>> {
        let ad = self.adiabatic.as_ref()?;
        weighted(&ad[s]).ok()
    }

    /// CSV export: `t, log_norm`, then per state `k` (1-based position)
    /// `Re_a_k, Im_a_k, abs2_a_k, weighted_k, Re_E_k, Im_E_k, abs_a_ad_k2`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let k = self.n_states();
        let mut header = String::from("t,log_norm");
        for i in 1..=k {
            header.push_str(&format!(
                ",Re_a_{i},Im_a_{i},abs2_a_{i},weighted_{i},Re_E_{i},Im_E_{i},abs_a_ad_{i}2"
            ));
        }
        writeln!(w, "{header}")?;
        for s in 0..self.times.len() {
            let mut row = format!(
                "{},{}",
                fmt_float(self.times[s]),
                fmt_float(self.log_norms[s])
            );
            for i in 0..k {
                let a = self.coeffs[s][i];
                let e = self.energies[s][i];
                let ad2 = self
                    .adiabatic
                    .as_ref()
                    .map(|ad| ad[s][i].norm_sqr())
                    .unwrap_or(f64::NAN);
                row.push_str(&format!(
                    ",{},{},{},{},{},{},{}",
                    fmt_float(a.re),
                    fmt_float(a.im),
                    fmt_float(a.norm_sqr()),
                    fmt_float(self.weighted[s][i]),
                    fmt_float(e.re),
                    fmt_float(e.im),
                    fmt_float(ad2)
                ));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

/// 17-significant-digit float formatting used by every CSV writer.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Largest pointwise deviation of the weighted coefficients between two
/// results on the same output grid.
pub fn max_weighted_deviation(a: &EvolutionResult, b: &EvolutionResult) -> f64 {
    a.weighted
        .iter()
        .zip(b.weighted.iter())
        .flat_map(|(ra, rb)| ra.iter().zip(rb.iter()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Largest row-max-relative deviation of the rescaled coefficients, aligning
/// the two results' `log_norm` conventions.
pub fn max_relative_coeff_deviation(a: &EvolutionResult, b: &EvolutionResult) -> f64 {
    let mut worst = 0.0_f64;
    for s in 0..a.times.len().min(b.times.len()) {
        let shift = (b.log_norms[s] - a.log_norms[s]).exp();
        let scale = a.coeffs[s]
            .iter()
            .map(|z| z.norm())
            .fold(f64::MIN_POSITIVE, f64::max);
        for (x, y) in a.coeffs[s].iter().zip(b.coeffs[s].iter()) {
            worst = worst.max((x - y * shift).norm() / scale);
        }
    }
    worst
}

/// Compares the analytic coupling matrix against central finite differences
/// of gauge-fixed eigenvectors at one parameter point.
///
/// The step is `1e-6·(1+|p|)`. Returns the max-entry deviation relative to
/// the largest coupling magnitude; the finite-difference route is kept
/// strictly independent of the closed form it checks. Fails where frames
/// cannot be normalized (near EPs and gauge singularities).
pub fn coupling_fd_deviation(
    family: &MatrixFamily,
    point: crate::family::ParameterPoint,
    dir: [f64; 2],
    sopts: &SpectralOptions,
) -> Result<f64, DynamicsError> {
    let frame = eigen_frame_with(family, point, sopts)?;
    let h = 1e-6 * (1.0 + point.p1.hypot(point.p2));
    let plus = crate::family::ParameterPoint::new(point.p1 + h * dir[0], point.p2 + h * dir[1]);
    let minus = crate::family::ParameterPoint::new(point.p1 - h * dir[0], point.p2 - h * dir[1]);
    let align = |p| -> Result<SpectralFrame, DynamicsError> {
        let f = eigen_frame_with(family, p, sopts)?;
        let sel = match_selection(&frame, &f);
        let picked = f.select(&sel, frame.labels.clone());
        let (g, _) = gauge_fix(&frame, &picked, sopts)?;
        Ok(g)
    };
    let fp = align(plus)?;
    let fm = align(minus)?;
    let a_dot = family.assemble_derivative(point, dir);
    let kappa = coupling_matrix(&frame, &a_dot, family, sopts.gap_tol_rel, 0.0)?;
    let k = frame.n_states();
    let mut dev = 0.0_f64;
    let mut scale = 1e-10_f64;
    for j in 0..k {
        for i in 0..k {
            let mut fd = C64::new(0.0, 0.0);
            for r in 0..frame.dim() {
                fd += frame.left_c[[r, i]] * (fp.right[[r, j]] - fm.right[[r, j]])
                    / C64::new(2.0 * h, 0.0);
            }
            dev = dev.max((kappa[[i, j]] - fd).norm());
            scale = scale.max(kappa[[i, j]].norm());
        }
    }
    Ok(dev / scale)
}

/// Reconstructs `ψ = Σ_k a_k r_k` from frame vectors and coefficients.
pub fn reconstruct_state(frame: &SpectralFrame, a: &[C64]) -> Vec<C64> {
    let n = frame.dim();
    let mut psi = vec![C64::new(0.0, 0.0); n];
    for (k, &ak) in a.iter().enumerate() {
        for i in 0..n {
            psi[i] += ak * frame.right[[i, k]];
        }
    }
    psi
}

/// Fixed-basis oracle output: the projected coefficients plus the final
/// state vector.
#[derive(Debug, Clone)]
pub struct OracleRun {
    pub result: EvolutionResult,
    /// Rescaled final state; physical is `psi_final · e^{psi_log_norm}`.
    pub psi_final: Vec<C64>,
    pub psi_log_norm: f64,
}

/// A family, a loop and its continuation track, bundled for evolution runs.
pub struct LoopSystem<'a> {
    pub family: &'a MatrixFamily,
    pub lp: &'a ParameterLoop,
    pub track: ContinuationTrack,
    pub spectral: SpectralOptions,
}

impl<'a> LoopSystem<'a> {
    /// Continues the tracked eigenpairs around the loop and bundles the
    /// result for dynamics runs.
    pub fn prepare(
        family: &'a MatrixFamily,
        lp: &'a ParameterLoop,
        tracked: Option<&[usize]>,
        spectral: SpectralOptions,
    ) -> Result<Self, DynamicsError> {
        let track = continue_loop(family, lp, tracked, &spectral)?;
        Ok(Self {
            family,
            lp,
            track,
            spectral,
        })
    }

    /// Wraps an existing track.
    pub fn from_track(
        family: &'a MatrixFamily,
        lp: &'a ParameterLoop,
        track: ContinuationTrack,
        spectral: SpectralOptions,
    ) -> Self {
        Self {
            family,
            lp,
            track,
            spectral,
        }
    }

    pub fn n_states(&self) -> usize {
        self.track.n_states()
    }

    /// Fresh frame at an arbitrary time, matched and sign-fixed against the
    /// nearest stored track frame (never interpolated).
    pub fn frame_at(&self, t: f64) -> Result<SpectralFrame, DynamicsError> {
        let reference = &self.track.nearest_sample(t).frame;
        let fresh = eigen_frame_with(self.family, self.lp.point_at_time(t), &self.spectral)?;
        let sel = match_selection(reference, &fresh);
        let picked = fresh.select(&sel, reference.labels.clone());
        let (gauged, _) = gauge_fix(reference, &picked, &self.spectral)?;
        Ok(gauged)
    }

    fn sample_times(&self, n_samples: usize) -> Vec<f64> {
        let total = self.lp.total_time();
        let n = n_samples.max(1);
        (0..=n).map(|k| total * k as f64 / n as f64).collect()
    }

    /// Integrates the full non-adiabatic evolution of the tracked states.
    ///
    /// `a0` holds the initial occupation coefficients in track label order.
    /// The result carries the adiabatic reference on the same output grid.
    pub fn evolve_full(
        &self,
        a0: &[C64],
        opts: &EvolveOptions,
    ) -> Result<EvolutionResult, DynamicsError> {
        self.check_initial(a0)?;
        let stops = self.sample_times(opts.n_samples);
        let s_e = self.family.energy_scale();
        let k = self.n_states();

        let mut rhs_evals = 0_usize;
        let mut rhs = |t: f64, a: &[C64], out: &mut [C64]| -> Result<(), DynamicsError> {
            rhs_evals += 1;
            let frame = self.frame_at(t)?;
            let minus_i = C64::new(0.0, -1.0);
            if opts.zero_coupling {
                for i in 0..k {
                    out[i] = minus_i * (frame.mus[i] / s_e) * a[i];
                }
                return Ok(());
            }
            let p = self.lp.point_at_time(t);
            let v = self.lp.velocity_at_time(t);
            let a_dot = self.family.assemble_derivative(p, v);
            let kappa =
                coupling_matrix(&frame, &a_dot, self.family, self.spectral.gap_tol_rel, t)?;
            for i in 0..k {
                let mut acc = minus_i * (frame.mus[i] / s_e) * a[i];
                for j in 0..k {
                    acc -= kappa[[i, j]] * a[j];
                }
                out[i] = acc;
            }
            Ok(())
        };

        let mut recorded: Vec<(f64, Vec<C64>, f64)> = Vec::with_capacity(stops.len());
        integrate_rescaled(
            &mut rhs,
            &stops,
            a0,
            opts,
            self.lp.total_time(),
            |t, y, ln| {
                recorded.push((t, y.to_vec(), ln));
            },
        )?;
        drop(rhs);

        self.package(recorded, a0, rhs_evals, true)
    }

    /// Adiabatic reference: each coefficient evolves only by its complex
    /// energy phase, `a_i(t) = a_i(0)·exp(-i ∫ E_i dt')`.
    pub fn evolve_adiabatic(
        &self,
        a0: &[C64],
        opts: &EvolveOptions,
    ) -> Result<EvolutionResult, DynamicsError> {
        self.check_initial(a0)?;
        let stops = self.sample_times(opts.n_samples);
        let phases = self.cumulative_phases(&stops)?;

        let mut times = Vec::with_capacity(stops.len());
        let mut log_norms = Vec::with_capacity(stops.len());
        let mut coeffs = Vec::with_capacity(stops.len());
        let mut weighted_rows = Vec::with_capacity(stops.len());
        let mut energies = Vec::with_capacity(stops.len());
        for (s, &t) in stops.iter().enumerate() {
            let (ln0, row) = adiabatic_row(a0, &phases[s], 0.0);
            let m = row.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
            let (ln, scaled) = if m > 0.0 && (m < RESCALE_LO || m > RESCALE_HI) {
                (
                    ln0 + m.ln(),
                    row.iter().map(|z| z / m).collect::<Vec<_>>(),
                )
            } else {
                (ln0, row)
            };
            let frame = self.frame_at(t)?;
            times.push(t);
            log_norms.push(ln);
            weighted_rows.push(weighted(&scaled)?);
            energies.push(frame.energies.clone());
            coeffs.push(scaled);
        }
        let adiabatic = Some(coeffs.clone());
        Ok(EvolutionResult {
            times,
            log_norms,
            coeffs,
            weighted: weighted_rows,
            energies,
            adiabatic,
            labels: self.track.tracked.clone(),
            rhs_evals: 0,
        })
    }

    /// Fixed-basis oracle: integrates `C ψ̇ = -(i/s_E)·A(t)·ψ` in the full
    /// `N`-dimensional space and projects onto the gauge-fixed track frames,
    /// `a_i(t) = l_i(t)·C·ψ(t)`.
    pub fn evolve_oracle(
        &self,
        psi0: &[C64],
        opts: &EvolveOptions,
    ) -> Result<OracleRun, DynamicsError> {
        let n = self.family.dim();
        if psi0.len() != n {
            return Err(DynamicsError::BadInitialState(format!(
                "oracle state needs {n} components, got {}",
                psi0.len()
            )));
        }
        if psi0.iter().all(|z| z.norm() == 0.0) {
            return Err(DynamicsError::BadInitialState("all-zero state".into()));
        }
        let stops = self.sample_times(opts.n_samples);
        let s_e = self.family.energy_scale();
        let chol = self.family.metric_cholesky().cloned();

        let mut rhs_evals = 0_usize;
        let mut rhs = |t: f64, psi: &[C64], out: &mut [C64]| -> Result<(), DynamicsError> {
            rhs_evals += 1;
            let a = self.family.assemble(self.lp.point_at_time(t));
            let psi_v = ndarray::ArrayView1::from(psi);
            let w = a.dot(&psi_v);
            let w = match &chol {
                None => w,
                Some(l) => linalg::solve_spd_vec(l, &w),
            };
            let factor = C64::new(0.0, -1.0 / s_e);
            for i in 0..n {
                out[i] = factor * w[i];
            }
            Ok(())
        };

        let mut recorded: Vec<(f64, Vec<C64>, f64)> = Vec::with_capacity(stops.len());
        integrate_rescaled(
            &mut rhs,
            &stops,
            psi0,
            opts,
            self.lp.total_time(),
            |t, y, ln| {
                recorded.push((t, y.to_vec(), ln));
            },
        )?;
        drop(rhs);

        let (psi_final, psi_log_norm) = {
            let last = recorded.last().expect("non-empty");
            (last.1.clone(), last.2)
        };

        let k = self.n_states();
        let mut times = Vec::with_capacity(recorded.len());
        let mut log_norms = Vec::with_capacity(recorded.len());
        let mut coeffs = Vec::with_capacity(recorded.len());
        let mut weighted_rows = Vec::with_capacity(recorded.len());
        let mut energies = Vec::with_capacity(recorded.len());
        for (t, psi, ln) in recorded {
            let frame = self.frame_at(t)?;
            let mut proj = vec![C64::new(0.0, 0.0); k];
            for (i, p) in proj.iter_mut().enumerate() {
                let mut acc = C64::new(0.0, 0.0);
                for r in 0..n {
                    acc += frame.left_c[[r, i]] * psi[r];
                }
                *p = acc;
            }
            times.push(t);
            log_norms.push(ln);
            weighted_rows.push(weighted(&proj)?);
            energies.push(frame.energies.clone());
            coeffs.push(proj);
        }
        Ok(OracleRun {
            result: EvolutionResult {
                times,
                log_norms,
                coeffs,
                weighted: weighted_rows,
                energies,
                adiabatic: None,
                labels: self.track.tracked.clone(),
                rhs_evals,
            },
            psi_final,
            psi_log_norm,
        })
    }

    fn check_initial(&self, a0: &[C64]) -> Result<(), DynamicsError> {
        if a0.len() != self.n_states() {
            return Err(DynamicsError::BadInitialState(format!(
                "expected {} coefficients, got {}",
                self.n_states(),
                a0.len()
            )));
        }
        if a0.iter().any(|z| !z.is_finite()) {
            return Err(DynamicsError::BadInitialState("non-finite entry".into()));
        }
        if a0.iter().all(|z| z.norm() == 0.0) {
            return Err(DynamicsError::BadInitialState("all-zero vector".into()));
        }
        Ok(())
    }

    /// Cumulative energy phase integrals `Φ_i(t_s) = ∫_0^{t_s} E_i dt` on
    /// the output grid, by adaptive Simpson quadrature over the track's
    /// energy curves (fresh gauge-matched frames at the quadrature nodes).
    fn cumulative_phases(&self, stops: &[f64]) -> Result<Vec<Vec<C64>>, DynamicsError> {
        let k = self.n_states();
        let total = self.lp.total_time();
        let e_bound = self.track.energy_bound();
        let tol_total = 1e-10 * (1.0 + e_bound * total);
        let mut acc = vec![C64::new(0.0, 0.0); k];
        let mut out = Vec::with_capacity(stops.len());
        out.push(acc.clone());
        for w in stops.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            let tol = tol_total * (t1 - t0) / total;
            let mut f = |t: f64| -> Result<Vec<C64>, DynamicsError> {
                Ok(self.frame_at(t)?.energies)
            };
            let seg = adaptive_simpson_vec(&mut f, t0, t1, tol)?;
            for i in 0..k {
                acc[i] += seg[i];
            }
            out.push(acc.clone());
        }
        Ok(out)
    }

    /// Packs raw integration output, attaching energies and the adiabatic
    /// reference on the same grid.
    fn package(
        &self,
        recorded: Vec<(f64, Vec<C64>, f64)>,
        a0: &[C64],
        rhs_evals: usize,
        with_adiabatic: bool,
    ) -> Result<EvolutionResult, DynamicsError> {
        let stops: Vec<f64> = recorded.iter().map(|r| r.0).collect();
        let phases = if with_adiabatic {
            Some(self.cumulative_phases(&stops)?)
        } else {
            None
        };
        let k = self.n_states();
        let mut times = Vec::with_capacity(recorded.len());
        let mut log_norms = Vec::with_capacity(recorded.len());
        let mut coeffs = Vec::with_capacity(recorded.len());
        let mut weighted_rows = Vec::with_capacity(recorded.len());
        let mut energies = Vec::with_capacity(recorded.len());
        let mut adiabatic = phases.as_ref().map(|_| Vec::with_capacity(recorded.len()));
        for (s, (t, a, ln)) in recorded.into_iter().enumerate() {
            let frame = self.frame_at(t)?;
            debug_assert_eq!(frame.n_states(), k);
            if let (Some(ad), Some(ph)) = (adiabatic.as_mut(), phases.as_ref()) {
                // adiabatic row scaled by the full run's log_norm
                let (_, row) = adiabatic_row(a0, &ph[s], ln);
                ad.push(row);
            }
            times.push(t);
            log_norms.push(ln);
            weighted_rows.push(weighted(&a)?);
            energies.push(frame.energies.clone());
            coeffs.push(a);
        }
        Ok(EvolutionResult {
            times,
            log_norms,
            coeffs,
            weighted: weighted_rows,
            energies,
            adiabatic,
            labels: self.track.tracked.clone(),
            rhs_evals,
        })
    }
}

/// Adiabatic coefficients `a0_i·exp(-iΦ_i)` rescaled by `e^{-log_norm}`,
/// evaluated in log space to dodge over/underflow.
fn adiabatic_row(a0: &[C64], phases: &[C64], log_norm: f64) -> (f64, Vec<C64>) {
    let row = a0
        .iter()
        .zip(phases.iter())
        .map(|(&a, &phi)| {
            if a.norm() == 0.0 {
                return C64::new(0.0, 0.0);
            }
            // a·e^{-iφ} = a·e^{Im φ}·e^{-i·Re φ}
            let magnitude = (a.norm().ln() + phi.im - log_norm).exp();
            let phase = a.arg() - phi.re;
            C64::from_polar(magnitude, phase)
        })
        .collect();
    (log_norm, row)
}

/// Dormand-Prince 5(4) with step control, exact landing on the stop times
/// and magnitude rescaling between accepted steps.
fn integrate_rescaled(
    rhs: &mut dyn FnMut(f64, &[C64], &mut [C64]) -> Result<(), DynamicsError>,
    stops: &[f64],
    y0: &[C64],
    opts: &EvolveOptions,
    total_time: f64,
    mut record: impl FnMut(f64, &[C64], f64),
) -> Result<(), DynamicsError> {
    const A21: f64 = 1.0 / 5.0;
    const A31: f64 = 3.0 / 40.0;
    const A32: f64 = 9.0 / 40.0;
    const A41: f64 = 44.0 / 45.0;
    const A42: f64 = -56.0 / 15.0;
    const A43: f64 = 32.0 / 9.0;
    const A51: f64 = 19372.0 / 6561.0;
    const A52: f64 = -25360.0 / 2187.0;
    const A53: f64 = 64448.0 / 6561.0;
    const A54: f64 = -212.0 / 729.0;
    const A61: f64 = 9017.0 / 3168.0;
    const A62: f64 = -355.0 / 33.0;
    const A63: f64 = 46732.0 / 5247.0;
    const A64: f64 = 49.0 / 176.0;
    const A65: f64 = -5103.0 / 18656.0;
    const B1: f64 = 35.0 / 384.0;
    const B3: f64 = 500.0 / 1113.0;
    const B4: f64 = 125.0 / 192.0;
    const B5: f64 = -2187.0 / 6784.0;
    const B6: f64 = 11.0 / 84.0;
    // b - b* of the embedded 4th-order solution
    const E1: f64 = B1 - 5179.0 / 57600.0;
    const E3: f64 = B3 - 7571.0 / 16695.0;
    const E4: f64 = B4 - 393.0 / 640.0;
    const E5: f64 = B5 + 92097.0 / 339200.0;
    const E6: f64 = B6 - 187.0 / 2100.0;
    const E7: f64 = -1.0 / 40.0;
    const C2: f64 = 1.0 / 5.0;
    const C3: f64 = 3.0 / 10.0;
    const C4: f64 = 4.0 / 5.0;
    const C5: f64 = 8.0 / 9.0;

    let n = y0.len();
    let h_min = total_time * STEP_UNDERFLOW_REL;
    let mut y = y0.to_vec();
    let mut log_norm = 0.0_f64;
    let mut t = stops[0];
    record(t, &y, log_norm);

    let mut k1 = vec![C64::new(0.0, 0.0); n];
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    let mut k5 = k1.clone();
    let mut k6 = k1.clone();
    let mut k7 = k1.clone();
    let mut ytmp = k1.clone();
    let mut y5 = k1.clone();

    let mut h = (total_time / 1e4).max(h_min * 10.0);
    let mut n_steps = 0_usize;

    for &stop in &stops[1..] {
        while t < stop {
            if n_steps > MAX_STEPS {
                return Err(DynamicsError::MaxSteps { t });
            }
            n_steps += 1;
            let h_step = h.min(stop - t);
            if h_step < h_min {
                return Err(DynamicsError::StepUnderflow { t, h: h_step });
            }

            rhs(t, &y, &mut k1)?;
            for i in 0..n {
                ytmp[i] = y[i] + h_step * A21 * k1[i];
            }
            rhs(t + C2 * h_step, &ytmp, &mut k2)?;
            for i in 0..n {
                ytmp[i] = y[i] + h_step * (A31 * k1[i] + A32 * k2[i]);
            }
            rhs(t + C3 * h_step, &ytmp, &mut k3)?;
            for i in 0..n {
                ytmp[i] = y[i] + h_step * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            rhs(t + C4 * h_step, &ytmp, &mut k4)?;
            for i in 0..n {
                ytmp[i] =
                    y[i] + h_step * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            rhs(t + C5 * h_step, &ytmp, &mut k5)?;
            for i in 0..n {
                ytmp[i] = y[i]
                    + h_step
                        * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            rhs(t + h_step, &ytmp, &mut k6)?;
            for i in 0..n {
                y5[i] = y[i]
                    + h_step * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
            }
            rhs(t + h_step, &y5, &mut k7)?;

            let mut err = 0.0_f64;
            for i in 0..n {
                let e = h_step
                    * (E1 * k1[i]
                        + E3 * k3[i]
                        + E4 * k4[i]
                        + E5 * k5[i]
                        + E6 * k6[i]
                        + E7 * k7[i]);
                let scale = opts.atol + opts.rtol * y[i].norm().max(y5[i].norm());
                err = err.max(e.norm() / scale);
            }

            if err <= 1.0 {
                t += h_step;
                y.copy_from_slice(&y5);
                // rescale between steps; the RHS is linear so this commutes
                let m = y.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
                if m > 0.0 && (m < RESCALE_LO || m > RESCALE_HI) {
                    let inv = 1.0 / m;
                    for z in &mut y {
                        *z *= inv;
                    }
                    log_norm += m.ln();
                }
            }
            let factor = if err > 0.0 {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            } else {
                5.0
            };
            h = (h_step * factor).max(h_min);
        }
        record(stop, &y, log_norm);
    }
    Ok(())
}

/// Adaptive Simpson quadrature of a vector-valued integrand with max-norm
/// error control.
fn adaptive_simpson_vec(
    f: &mut dyn FnMut(f64) -> Result<Vec<C64>, DynamicsError>,
    t0: f64,
    t1: f64,
    tol: f64,
) -> Result<Vec<C64>, DynamicsError> {
    let fa = f(t0)?;
    let fb = f(t1)?;
    let tm = 0.5 * (t0 + t1);
    let fm = f(tm)?;
    let whole = simpson(&fa, &fm, &fb, t1 - t0);
    simpson_recurse(f, t0, t1, &fa, &fm, &fb, &whole, tol, 0)
}

fn simpson(fa: &[C64], fm: &[C64], fb: &[C64], h: f64) -> Vec<C64> {
    fa.iter()
        .zip(fm.iter())
        .zip(fb.iter())
        .map(|((&a, &m), &b)| (a + 4.0 * m + b) * (h / 6.0))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn simpson_recurse(
    f: &mut dyn FnMut(f64) -> Result<Vec<C64>, DynamicsError>,
    t0: f64,
    t1: f64,
    fa: &[C64],
    fm: &[C64],
    fb: &[C64],
    whole: &[C64],
    tol: f64,
    depth: u32,
) -> Result<Vec<C64>, DynamicsError> {
    let tm = 0.5 * (t0 + t1);
    let tlm = 0.5 * (t0 + tm);
    let trm = 0.5 * (tm + t1);
    let flm = f(tlm)?;
    let frm = f(trm)?;
    let left = simpson(fa, &flm, fm, tm - t0);
    let right = simpson(fm, &frm, fb, t1 - tm);
    let dev = left
        .iter()
        .zip(right.iter())
        .zip(whole.iter())
        .map(|((&l, &r), &w)| (l + r - w).norm())
        .fold(0.0_f64, f64::max);
    if dev <= 15.0 * tol || (t1 - t0) == 0.0 {
        return Ok(left
            .iter()
            .zip(right.iter())
            .zip(whole.iter())
            .map(|((&l, &r), &w)| l + r + (l + r - w) / 15.0)
            .collect());
    }
    if depth >= QUAD_MAX_DEPTH {
        return Err(DynamicsError::QuadratureDepth { t0, t1 });
    }
    let l = simpson_recurse(f, t0, tm, fa, &flm, fm, &left, tol * 0.5, depth + 1)?;
    let r = simpson_recurse(f, tm, t1, fm, &frm, fb, &right, tol * 0.5, depth + 1)?;
    Ok(l.iter().zip(r.iter()).map(|(&a, &b)| a + b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::{FamilyTerm, ParameterPoint};
    use crate::spectral::eigen_frame;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn decay_family() -> MatrixFamily {
        // constant diagonal resonances E = -0.1i and -0.01i
        MatrixFamily::new(
            vec![FamilyTerm::new(
                0,
                0,
                array![[c(0.0, -0.1), c(0.0, 0.0)], [c(0.0, 0.0), c(0.0, -0.01)]],
            )],
            true,
        )
        .unwrap()
    }

    #[test]
    fn weighted_examples() {
        assert_eq!(
            weighted(&[c(1.0, 0.0), c(0.0, 0.0)]).unwrap(),
            vec![1.0, 0.0]
        );
        let w = weighted(&[c(0.3, 0.4), c(0.3, 0.4)]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        let w = weighted(&[c(1.0, 0.0), c(0.0, 2.0), c(-2.0, 0.0)]).unwrap();
        assert!((w[0] - 1.0 / 9.0).abs() <= 1e-12);
        assert!((w[1] - 4.0 / 9.0).abs() <= 1e-12);
        assert!((w[2] - 4.0 / 9.0).abs() <= 1e-12);
        assert!(weighted(&[c(0.0, 0.0)]).is_err());
    }

    proptest! {
        #[test]
        fn weighted_is_normalized_and_scale_invariant(
            res in proptest::collection::vec((-10.0_f64..10.0, -10.0_f64..10.0), 1..6),
            sre in -3.0_f64..3.0, sim in -3.0_f64..3.0,
        ) {
            let a: Vec<C64> = res.iter().map(|&(re, im)| c(re, im)).collect();
            prop_assume!(a.iter().any(|z| z.norm() > 1e-6));
            let s = c(sre, sim);
            prop_assume!(s.norm() > 1e-3);
            let w = weighted(&a).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|&x| (0.0..=1.0 + 1e-15).contains(&x)));
            let scaled: Vec<C64> = a.iter().map(|&z| z * s).collect();
            let ws = weighted(&scaled).unwrap();
            for (x, y) in w.iter().zip(ws.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn coefficient_state_rescaling_preserves_reconstruction() {
        let mut s = CoefficientState::new(vec![c(2e4, 0.0), c(0.0, 3e3)], 0.0);
        let phys0: Vec<C64> = s.a.iter().map(|z| z * s.log_norm.exp()).collect();
        assert!((phys0[0] - c(2e4, 0.0)).norm() < 1e-9);
        let m = s.a.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
        assert!((RESCALE_LO..=RESCALE_HI).contains(&m));
        s.rescale();
        let phys1: Vec<C64> = s.a.iter().map(|z| z * s.log_norm.exp()).collect();
        for (x, y) in phys0.iter().zip(phys1.iter()) {
            assert!((x - y).norm() < 1e-9);
        }
    }

    #[test]
    fn constant_parameters_reproduce_closed_form_decay() {
        let fam = decay_family();
        let lp = ParameterLoop::circle((0.0, 0.0), 0.0, 10.0).with_steps(8);
        let sys = LoopSystem::prepare(&fam, &lp, None, SpectralOptions::default()).unwrap();
        let opts = EvolveOptions {
            n_samples: 10,
            ..Default::default()
        };
        let res = sys.evolve_full(&[c(1.0, 0.0), c(1.0, 0.0)], &opts).unwrap();
        let ln = res.log_norms.last().unwrap();
        let a = res.coeffs.last().unwrap();
        let mag0 = a[0].norm() * ln.exp();
        let mag1 = a[1].norm() * ln.exp();
        assert!((mag0 - (-1.0_f64).exp()).abs() < 1e-9, "got {mag0}");
        assert!((mag1 - (-0.1_f64).exp()).abs() < 1e-9, "got {mag1}");
        // adiabatic reference equals the full evolution here (no couplings)
        let ad = res.adiabatic.as_ref().unwrap().last().unwrap().clone();
        for (x, y) in ad.iter().zip(a.iter()) {
            assert!((x - y).norm() < 1e-8);
        }
    }

    #[test]
    fn adiabatic_closed_forms() {
        let fam = decay_family();
        let lp = ParameterLoop::circle((0.0, 0.0), 0.0, 10.0).with_steps(8);
        let sys = LoopSystem::prepare(&fam, &lp, None, SpectralOptions::default()).unwrap();
        let opts = EvolveOptions {
            n_samples: 4,
            ..Default::default()
        };
        let res = sys
            .evolve_adiabatic(&[c(1.0, 0.0), c(0.0, 0.0)], &opts)
            .unwrap();
        let last = res.coeffs.last().unwrap();
        let mag = last[0].norm() * res.log_norms.last().unwrap().exp();
        assert!((mag - (-1.0_f64).exp()).abs() < 1e-10);

        // purely real energies: modulus conserved exactly up to quadrature
        let real_fam = MatrixFamily::new(
            vec![FamilyTerm::new(
                0,
                0,
                array![[c(0.7, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(-0.3, 0.0)]],
            )],
            true,
        )
        .unwrap();
        let sys = LoopSystem::prepare(&real_fam, &lp, None, SpectralOptions::default()).unwrap();
        let res = sys
            .evolve_adiabatic(&[c(0.6, 0.8), c(0.0, 0.0)], &opts)
            .unwrap();
        for (row, ln) in res.coeffs.iter().zip(res.log_norms.iter()) {
            assert!((row[0].norm() * ln.exp() - 1.0).abs() < 1e-10);
        }
    }

    /// Central finite differences of gauge-fixed eigenvectors must agree
    /// with the analytic coupling matrix, including the rigid-gauge diagonal
    /// of non-symmetric families.
    fn check_coupling_fd(fam: &MatrixFamily, points: usize, seed: u64, span: f64) {
        let sopts = SpectralOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checked = 0;
        while checked < points {
            let p = ParameterPoint::new(rng.gen_range(-span..span), rng.gen_range(-span..span));
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let dir = [th.cos(), th.sin()];
            match coupling_fd_deviation(fam, p, dir, &sopts) {
                Ok(dev) => {
                    assert!(
                        dev <= 1e-5,
                        "coupling FD mismatch {dev:.2e} at ({}, {})",
                        p.p1,
                        p.p2
                    );
                    checked += 1;
                }
                // near an EP or a gauge singularity; draw another point
                Err(_) => continue,
            }
        }
    }

    #[test]
    fn coupling_matches_finite_differences_canonical() {
        check_coupling_fd(&MatrixFamily::canonical_ep2(), 12, 101, 1.5);
    }

    #[test]
    fn coupling_matches_finite_differences_ep3() {
        check_coupling_fd(&MatrixFamily::ep3_companion(), 12, 202, 1.5);
    }

    #[test]
    fn coupling_matches_finite_differences_spectators() {
        check_coupling_fd(&MatrixFamily::ep2_with_spectators(0.05, [-0.02, -0.05]), 8, 303, 1.2);
        check_coupling_fd(
            &MatrixFamily::ep3_with_spectators(0.05, [-0.08, -0.01, -0.2]),
            8,
            404,
            1.2,
        );
    }

    #[test]
    fn coupling_antisymmetric_for_canonical_real_lambda() {
        let fam = MatrixFamily::canonical_ep2();
        let p = ParameterPoint::new(0.3, 0.0);
        let frame = eigen_frame(&fam, p).unwrap();
        let a_dot = fam.assemble_derivative(p, [1.0, 0.0]);
        let kappa = coupling_matrix(&frame, &a_dot, &fam, 1e-9, 0.0).unwrap();
        assert!(kappa[[0, 0]].norm() == 0.0 && kappa[[1, 1]].norm() == 0.0);
        assert!((kappa[[0, 1]] + kappa[[1, 0]]).norm() < 1e-12);
    }

    #[test]
    fn zero_a_dot_gives_zero_coupling() {
        let fam = MatrixFamily::canonical_ep2();
        let frame = eigen_frame(&fam, ParameterPoint::new(0.2, 0.3)).unwrap();
        let zero = Array2::<C64>::zeros((2, 2));
        let kappa = coupling_matrix(&frame, &zero, &fam, 1e-9, 0.0).unwrap();
        assert!(kappa.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn oracle_matches_instantaneous_basis_quickly() {
        let fam = MatrixFamily::canonical_ep2();
        let lp = ParameterLoop::circle((0.0, 1.0), 0.1, 15.0).with_steps(256);
        let sys = LoopSystem::prepare(&fam, &lp, None, SpectralOptions::default()).unwrap();
        let opts = EvolveOptions {
            n_samples: 60,
            ..Default::default()
        };
        let a0 = [c(1.0, 0.0), c(0.0, 0.0)];
        let full = sys.evolve_full(&a0, &opts).unwrap();
        let psi0 = reconstruct_state(&sys.track.samples[0].frame, &a0);
        let oracle = sys.evolve_oracle(&psi0, &opts).unwrap();
        let wdev = max_weighted_deviation(&full, &oracle.result);
        assert!(wdev <= 1e-8, "weighted deviation {wdev:.2e}");
        let cdev = max_relative_coeff_deviation(&full, &oracle.result);
        assert!(cdev <= 1e-6, "coefficient deviation {cdev:.2e}");
        // final-state reconstruction against the oracle's state vector
        let t_end = lp.total_time();
        let frame_end = sys.frame_at(t_end).unwrap();
        let rec = reconstruct_state(&frame_end, full.coeffs.last().unwrap());
        let shift = (oracle.psi_log_norm - full.log_norms.last().unwrap()).exp();
        let scale = rec.iter().map(|z| z.norm()).fold(1e-300, f64::max);
        for (r, p) in rec.iter().zip(oracle.psi_final.iter()) {
            assert!((r - p * shift).norm() / scale <= 1e-6);
        }
    }

    #[test]
    fn zero_coupling_blocks_stay_empty() {
        let fam = MatrixFamily::ep2_with_spectators(0.0, [-0.02, -0.05]);
        let lp = ParameterLoop::circle((0.0, 1.0), 0.1, 10.0).with_steps(256);
        let sys = LoopSystem::prepare(&fam, &lp, None, SpectralOptions::default()).unwrap();
        let opts = EvolveOptions {
            n_samples: 40,
            ..Default::default()
        };
        let res = sys
            .evolve_full(&[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)], &opts)
            .unwrap();
        for row in &res.weighted {
            assert!(
                row[2] < 1e-20 && row[3] < 1e-20,
                "leakage {} {}",
                row[2],
                row[3]
            );
        }
    }

    #[test]
    fn forced_zero_coupling_reproduces_adiabatic() {
        let fam = MatrixFamily::canonical_ep2();
        let lp = ParameterLoop::circle((0.0, 1.0), 0.1, 8.0).with_steps(128);
        let sys = LoopSystem::prepare(&fam, &lp, None, SpectralOptions::default()).unwrap();
        let opts = EvolveOptions {
            n_samples: 30,
            zero_coupling: true,
            ..Default::default()
        };
        let a0 = [c(0.8, 0.0), c(0.0, 0.6)];
        let full = sys.evolve_full(&a0, &opts).unwrap();
        let ad = sys.evolve_adiabatic(&a0, &opts).unwrap();
        assert!(max_weighted_deviation(&full, &ad) <= 1e-8);
        assert!(max_relative_coeff_deviation(&full, &ad) <= 1e-7);
    }

    #[test]
    fn halved_tolerances_move_finals_within_bound() {
        let fam = MatrixFamily::canonical_ep2();
        let lp = ParameterLoop::circle((0.0, 1.0), 0.1, 12.0).with_steps(256);
        let sys = LoopSystem::prepare(&fam, &lp, None, SpectralOptions::default()).unwrap();
        let base = EvolveOptions {
            n_samples: 16,
            ..Default::default()
        };
        let tight = EvolveOptions {
            rtol: base.rtol / 2.0,
            atol: base.atol / 2.0,
            ..base
        };
        let a0 = [c(1.0, 0.0), c(0.0, 0.0)];
        let r1 = sys.evolve_full(&a0, &base).unwrap();
        let r2 = sys.evolve_full(&a0, &tight).unwrap();
        let dev: f64 = r1
            .final_weighted()
            .iter()
            .zip(r2.final_weighted())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 10.0 * base.rtol, "final weighted moved {dev:.2e}");
    }

    #[test]
    fn weighted_rows_normalized_and_rescaled_window_holds() {
        let fam = MatrixFamily::canonical_ep2();
        let lp = ParameterLoop::circle((0.0, 1.0), 0.1, 20.0).with_steps(256);
        let sys = LoopSystem::prepare(&fam, &lp, None, SpectralOptions::default()).unwrap();
        let res = sys
            .evolve_full(
                &[c(1.0, 0.0), c(0.0, 0.0)],
                &EvolveOptions {
                    n_samples: 50,
                    ..Default::default()
                },
            )
            .unwrap();
        for row in &res.weighted {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        for row in &res.coeffs {
            let m = row.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
            assert!(
                m <= RESCALE_HI * 1.0001 && m >= RESCALE_LO * 0.9999,
                "max |a| = {m}"
            );
        }
    }

    #[test]
    fn csv_shape_and_determinism() {
        let fam = decay_family();
        let lp = ParameterLoop::circle((0.0, 0.0), 0.0, 1.0).with_steps(8);
        let sys = LoopSystem::prepare(&fam, &lp, None, SpectralOptions::default()).unwrap();
        let opts = EvolveOptions {
            n_samples: 3,
            ..Default::default()
        };
        let res = sys.evolve_full(&[c(1.0, 0.0), c(1.0, 0.0)], &opts).unwrap();
        let mut buf1 = Vec::new();
        res.write_csv(&mut buf1).unwrap();
        let res2 = sys.evolve_full(&[c(1.0, 0.0), c(1.0, 0.0)], &opts).unwrap();
        let mut buf2 = Vec::new();
        res2.write_csv(&mut buf2).unwrap();
        assert_eq!(buf1, buf2);
        let text = String::from_utf8(buf1).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("t,log_norm,Re_a_1"));
        assert_eq!(lines.count(), 4);
        assert!(!text.contains('\r'));
    }
}

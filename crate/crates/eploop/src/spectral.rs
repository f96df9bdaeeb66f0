//! Generalized eigenproblem solves, bi-orthonormal frames, eigenpair
//! continuation along loops, permutation signatures and EP detection.
//!
//! The generalized problem `A(p) r = μ C r` is reduced through the metric's
//! Cholesky factor (`C = L Lᵀ`, `M = L⁻¹ A L⁻ᵀ`), which keeps a complex
//! symmetric `A` complex symmetric. Eigenvector pairs are normalized to
//! `l_i·C·r_j = δ_ij`; for symmetric families this is the c-product
//! `r_i·C·r_j = δ_ij` with `l = r`. For non-symmetric families the right
//! vector's bilinear self-product `r·C·r` is additionally pinned to 1, so in
//! both cases the normalization is rigid up to an overall sign per state —
//! the two-valuedness of the square root. Continuation fixes the signs step
//! by step, and the leftover sign at loop closure is the geometric-phase
//! sign.

use ndarray::{Array2, Axis};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::assign;
use crate::family::{MatrixFamily, ParameterPoint};
use crate::linalg;
use crate::loops::{LoopError, ParameterLoop};
use crate::perm::Permutation;

/// Weight of the eigenvalue-distance tie-break in the matching cost; small
/// enough to only decide ties in the overlap score below ~1e-12.
const TIE_BREAK_EPS: f64 = 1e-13;

/// Numerical knobs of the spectral pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralOptions {
    /// A frame is flagged on-EP when the minimum eigenvalue gap falls below
    /// `gap_tol_rel · ‖A‖_F`.
    pub gap_tol_rel: f64,
    /// A frame is flagged on-EP when a normalized eigenvector's bilinear
    /// self-product falls below this (self-orthogonality).
    pub self_overlap_tol: f64,
    /// Hard floor on the matched step overlap; below it a continuation step
    /// is too coarse to gauge-fix.
    pub min_step_overlap: f64,
    /// Matched overlaps below this trigger midpoint refinement during
    /// continuation.
    pub refine_overlap: f64,
    /// Maximum number of interval halvings during continuation refinement.
    pub refinement_limit: u32,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            gap_tol_rel: 1e-12,
            self_overlap_tol: 1e-14,
            min_step_overlap: 1e-8,
            refine_overlap: 0.85,
            refinement_limit: 12,
        }
    }
}

/// Why a frame was flagged as sitting on (or numerically at) an EP.
///
/// For non-symmetric families, `SelfOrthogonal` can also mark one of the
/// isolated regular points where an eigenvector's bilinear self-product
/// happens to vanish (a gauge singularity of the rigid normalization, e.g.
/// the EP3 companion model at real λ); the frame cannot be normalized there
/// either way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OnEpReason {
    MinGap { gap: f64, tol: f64 },
    SelfOrthogonal { state: usize, c_norm: f64 },
    Defective,
}

impl fmt::Display for OnEpReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OnEpReason::MinGap { gap, tol } => {
                write!(f, "eigenvalue gap {gap:.3e} below tolerance {tol:.3e}")
            }
            OnEpReason::SelfOrthogonal { state, c_norm } => {
                write!(f, "state {state} is self-orthogonal (|r·C·r| = {c_norm:.3e})")
            }
            OnEpReason::Defective => write!(f, "eigenvector matrix is numerically singular"),
        }
    }
}

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("on-EP frame at ({:.9}, {:.9}): {reason}", point.p1, point.p2)]
    OnEp {
        point: ParameterPoint,
        reason: OnEpReason,
    },
    #[error(
        "continuation step from ({:.6}, {:.6}) to ({:.6}, {:.6}) too coarse: overlap {overlap:.3e}",
        from.p1, from.p2, to.p1, to.p2
    )]
    CoarseStep {
        from: ParameterPoint,
        to: ParameterPoint,
        overlap: f64,
    },
    #[error(
        "refinement limit reached on angle interval [{phi_from:.6}, {phi_to:.6}] (min matched overlap {min_overlap:.3e})"
    )]
    RefinementLimit {
        phi_from: f64,
        phi_to: f64,
        min_overlap: f64,
    },
    #[error("tracked state {label} continues into untracked state {landed} at loop closure")]
    TrackedNotClosed { label: usize, landed: usize },
    #[error("bad tracked subset: {0}")]
    BadTrackedSubset(String),
    #[error("frame state counts differ: {expected} vs {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("assembled matrix has non-finite entries at ({:.6}, {:.6})", point.p1, point.p2)]
    NonFiniteMatrix { point: ParameterPoint },
    #[error("eigensolver backend: {0}")]
    Backend(String),
    #[error(transparent)]
    Loop(#[from] LoopError),
}

/// Eigenvalues and bi-orthonormal eigenvector pairs at one parameter point.
///
/// Stores `K ≤ N` states as columns; standalone frames carry all `N` states
/// sorted by `(Re μ, Im μ)`, track frames carry the tracked states in track
/// label order. `left_c` caches `C·l` so overlaps need no metric.
#[derive(Debug, Clone)]
pub struct SpectralFrame {
    pub point: ParameterPoint,
    /// Raw generalized eigenvalues μ.
    pub mus: Vec<C64>,
    /// Physical energies `E = μ / s_E`.
    pub energies: Vec<C64>,
    /// Right eigenvectors, one column per state.
    pub right: Array2<C64>,
    /// Left eigenvectors; the same vectors as `right` for symmetric families.
    pub left: Array2<C64>,
    /// `C · left`, cached for overlap evaluation.
    pub left_c: Array2<C64>,
    /// State identities: original sorted indices for standalone frames,
    /// track labels inside a continuation.
    pub labels: Vec<usize>,
    /// Frobenius norm of the assembled matrix, the scale behind gap checks.
    pub norm_a: f64,
    pub symmetric: bool,
}

impl SpectralFrame {
    /// Number of stored states.
    pub fn n_states(&self) -> usize {
        self.mus.len()
    }

    /// Ambient dimension `N`.
    pub fn dim(&self) -> usize {
        self.right.nrows()
    }

    /// Bilinear overlap table `l_i·C·r_j` between this frame's left vectors
    /// and another frame's right vectors.
    pub fn overlap_table(&self, other: &SpectralFrame) -> Array2<C64> {
        self.left_c.t().dot(&other.right)
    }

    /// Sub-frame with the given state positions, relabeled.
    pub(crate) fn select(&self, positions: &[usize], labels: Vec<usize>) -> SpectralFrame {
        SpectralFrame {
            point: self.point,
            mus: positions.iter().map(|&j| self.mus[j]).collect(),
            energies: positions.iter().map(|&j| self.energies[j]).collect(),
            right: self.right.select(Axis(1), positions),
            left: self.left.select(Axis(1), positions),
            left_c: self.left_c.select(Axis(1), positions),
            labels,
            norm_a: self.norm_a,
            symmetric: self.symmetric,
        }
    }

    /// Restricts a standalone frame to a subset of its states; labels keep
    /// the original indices.
    pub fn restrict(&self, subset: &[usize]) -> SpectralFrame {
        self.select(subset, subset.to_vec())
    }

    /// Rescales state `k`'s vector pair by `factor`, keeping `l·C·r = 1`.
    /// Only `±1` also preserves the rigid self-product normalization.
    pub fn rescale_state(&mut self, k: usize, factor: C64) {
        for i in 0..self.dim() {
            self.right[[i, k]] *= factor;
            self.left[[i, k]] /= factor;
            self.left_c[[i, k]] /= factor;
        }
    }

    /// Residual and bi-orthonormality diagnostics against the family.
    pub fn diagnostics(&self, family: &MatrixFamily) -> FrameDiagnostics {
        let a = family.assemble(self.point);
        let cr = family.metric_apply(&self.right);
        let ar = a.dot(&self.right);
        let mut max_residual = 0.0_f64;
        for (k, &mu) in self.mus.iter().enumerate() {
            let res: f64 = (0..self.dim())
                .map(|i| (ar[[i, k]] - mu * cr[[i, k]]).norm_sqr())
                .sum::<f64>()
                .sqrt();
            max_residual = max_residual.max(res);
        }
        let overlaps = self.overlap_table(self);
        let mut max_biorth_dev = 0.0_f64;
        for i in 0..self.n_states() {
            for j in 0..self.n_states() {
                let want = if i == j { 1.0 } else { 0.0 };
                max_biorth_dev =
                    max_biorth_dev.max((overlaps[[i, j]] - C64::new(want, 0.0)).norm());
            }
        }
        FrameDiagnostics {
            max_residual,
            norm_a: self.norm_a,
            max_biorth_dev,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FrameDiagnostics {
    /// max over states of ‖A·r − μ·C·r‖₂.
    pub max_residual: f64,
    pub norm_a: f64,
    /// max |l_i·C·r_j − δ_ij|.
    pub max_biorth_dev: f64,
}

/// Solves the generalized eigenproblem at one point with default options.
pub fn eigen_frame(
    family: &MatrixFamily,
    point: ParameterPoint,
) -> Result<SpectralFrame, SpectralError> {
    eigen_frame_with(family, point, &SpectralOptions::default())
}

/// Eigenvalues μ only, sorted by `(Re, Im)`, without normalization.
///
/// Usable on EPs and on the isolated points of non-symmetric families where
/// an eigenvector is bilinearly self-orthogonal and a full frame cannot be
/// normalized.
pub fn eigenvalues(
    family: &MatrixFamily,
    point: ParameterPoint,
) -> Result<Vec<C64>, SpectralError> {
    let a = family.assemble(point);
    if a.iter().any(|z| !z.is_finite()) {
        return Err(SpectralError::NonFiniteMatrix { point });
    }
    let m = match family.metric_cholesky() {
        None => a,
        Some(l) => {
            let mut x = a;
            linalg::solve_lower_real(l, &mut x);
            let mut xt = x.t().to_owned();
            linalg::solve_lower_real(l, &mut xt);
            xt.t().to_owned()
        }
    };
    let fm = linalg::nd_to_faer(&m);
    let evd = fm
        .eigen()
        .map_err(|e| SpectralError::Backend(format!("{e:?}")))?;
    let mut vals: Vec<C64> = (0..family.dim()).map(|k| evd.S()[k]).collect();
    vals.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    Ok(vals)
}

/// Solves the generalized eigenproblem at one point.
///
/// States come sorted by `(Re μ, Im μ)`. Near-degenerate or self-orthogonal
/// spectra are flagged [`SpectralError::OnEp`] rather than normalized, since
/// the c-product normalization diverges there. The sign of each state's
/// vector pair is left unspecified; continuation pins it.
pub fn eigen_frame_with(
    family: &MatrixFamily,
    point: ParameterPoint,
    opts: &SpectralOptions,
) -> Result<SpectralFrame, SpectralError> {
    let a = family.assemble(point);
    if a.iter().any(|z| !z.is_finite()) {
        return Err(SpectralError::NonFiniteMatrix { point });
    }
    let n = family.dim();
    let norm_a = linalg::frobenius(&a);

    // Reduce through the metric: M = L⁻¹ A L⁻ᵀ.
    let m = match family.metric_cholesky() {
        None => a,
        Some(l) => {
            let mut x = a;
            linalg::solve_lower_real(l, &mut x);
            let mut xt = x.t().to_owned();
            linalg::solve_lower_real(l, &mut xt);
            xt.t().to_owned()
        }
    };

    let fm = linalg::nd_to_faer(&m);
    let evd = fm
        .eigen()
        .map_err(|e| SpectralError::Backend(format!("{e:?}")))?;
    let raw_vals: Vec<C64> = (0..n).map(|k| evd.S()[k]).collect();
    let u = evd.U();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        raw_vals[i]
            .re
            .total_cmp(&raw_vals[j].re)
            .then(raw_vals[i].im.total_cmp(&raw_vals[j].im))
    });
    let mus: Vec<C64> = order.iter().map(|&k| raw_vals[k]).collect();
    let mut right_red = Array2::<C64>::zeros((n, n));
    for (col, &k) in order.iter().enumerate() {
        for i in 0..n {
            right_red[[i, col]] = u[(i, k)];
        }
    }

    if n >= 2 {
        let tol = opts.gap_tol_rel * norm_a.max(f64::MIN_POSITIVE);
        let mut min_gap = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                min_gap = min_gap.min((mus[i] - mus[j]).norm());
            }
        }
        if min_gap < tol {
            return Err(SpectralError::OnEp {
                point,
                reason: OnEpReason::MinGap { gap: min_gap, tol },
            });
        }
    }

    // Rigid normalization: unit Euclidean length, then unit bilinear
    // self-product. In the reduced space r·C·r equals yᵀy.
    for k in 0..n {
        let mut col = right_red.column_mut(k);
        let nrm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        col.mapv_inplace(|z| z / nrm);
        let s2: C64 = col.iter().map(|z| z * z).sum();
        if s2.norm() < opts.self_overlap_tol {
            return Err(SpectralError::OnEp {
                point,
                reason: OnEpReason::SelfOrthogonal {
                    state: k,
                    c_norm: s2.norm(),
                },
            });
        }
        let scale = s2.sqrt();
        col.mapv_inplace(|z| z / scale);
    }

    let left_red = if family.symmetric() {
        right_red.clone()
    } else {
        match linalg::inverse(&right_red) {
            Some(inv) => inv.t().to_owned(),
            None => {
                return Err(SpectralError::OnEp {
                    point,
                    reason: OnEpReason::Defective,
                })
            }
        }
    };

    let (right, left) = match family.metric_cholesky() {
        None => (right_red, left_red),
        Some(l) => {
            let mut r = right_red;
            let mut le = left_red;
            linalg::solve_lower_transpose_real(l, &mut r);
            linalg::solve_lower_transpose_real(l, &mut le);
            (r, le)
        }
    };
    let left_c = family.metric_apply(&left);
    let s_e = family.energy_scale();
    let energies = mus.iter().map(|&mu| mu / s_e).collect();

    Ok(SpectralFrame {
        point,
        mus,
        energies,
        right,
        left,
        left_c,
        labels: (0..n).collect(),
        norm_a,
        symmetric: family.symmetric(),
    })
}

/// Overlap-based state assignment from `prev`'s states to `next`'s states.
///
/// Maximizes the total matched overlap `Σ |l_i·C·r_j|`; ties below 1e-12 in
/// the score are broken toward the smaller eigenvalue distance. Exact up to
/// [`assign::EXACT_LIMIT`] states, greedy with local swaps above.
pub fn match_step(
    prev: &SpectralFrame,
    next: &SpectralFrame,
) -> Result<Permutation, SpectralError> {
    if prev.n_states() != next.n_states() {
        return Err(SpectralError::DimMismatch {
            expected: prev.n_states(),
            found: next.n_states(),
        });
    }
    let sel = match_selection(prev, next);
    Permutation::from_image(sel)
        .map_err(|e| SpectralError::Backend(format!("assignment not bijective: {e}")))
}

/// Rectangular variant: picks, for each of `prev`'s states, a distinct state
/// of `next` (which may hold more states).
pub(crate) fn match_selection(prev: &SpectralFrame, next: &SpectralFrame) -> Vec<usize> {
    let overlaps = prev.overlap_table(next);
    let (ka, kb) = (prev.n_states(), next.n_states());
    let cost = Array2::from_shape_fn((ka, kb), |(i, j)| {
        let d = (prev.mus[i] - next.mus[j]).norm();
        -overlaps[[i, j]].norm() + TIE_BREAK_EPS * d / (1.0 + d)
    });
    assign::assign(&cost)
}

/// Fixes the sign of each state of `next` so the overlap with the matched
/// state of `prev` has positive real part, i.e. is real and positive up to
/// discretization error. Frames must be label-aligned. Returns the gauged
/// frame and the per-state factors.
pub fn gauge_fix(
    prev: &SpectralFrame,
    next: &SpectralFrame,
    opts: &SpectralOptions,
) -> Result<(SpectralFrame, Vec<C64>), SpectralError> {
    if prev.n_states() != next.n_states() {
        return Err(SpectralError::DimMismatch {
            expected: prev.n_states(),
            found: next.n_states(),
        });
    }
    let mut out = next.clone();
    let mut factors = Vec::with_capacity(prev.n_states());
    for k in 0..prev.n_states() {
        let o: C64 = prev
            .left_c
            .column(k)
            .iter()
            .zip(next.right.column(k).iter())
            .map(|(a, b)| a * b)
            .sum();
        if o.norm() < opts.min_step_overlap {
            return Err(SpectralError::CoarseStep {
                from: prev.point,
                to: next.point,
                overlap: o.norm(),
            });
        }
        let f = if o.re >= 0.0 { 1.0 } else { -1.0 };
        if f < 0.0 {
            out.rescale_state(k, C64::new(-1.0, 0.0));
        }
        factors.push(C64::new(f, 0.0));
    }
    Ok((out, factors))
}

/// One stored continuation node.
#[derive(Debug, Clone)]
pub struct TrackSample {
    pub step: usize,
    pub t: f64,
    pub phi: f64,
    pub frame: SpectralFrame,
}

/// Gauge-fixed, label-aligned frames along a discretized loop together with
/// the loop's permutation signature.
///
/// `samples[s].frame` holds the tracked states in label order: column `k`
/// always continues track label `k`. `match_maps[s]` is the label-to-label
/// continuation map of step `s`; interior steps are the identity and the
/// closure step carries the braid, so the composition of all maps equals
/// `signature`.
#[derive(Debug, Clone)]
pub struct ContinuationTrack {
    pub samples: Vec<TrackSample>,
    pub match_maps: Vec<Permutation>,
    pub signature: Permutation,
    /// Sign each state picked up at closure relative to the initial frame
    /// (the geometric-phase sign).
    pub closure_signs: Vec<f64>,
    /// Initial-frame sorted indices of the tracked states.
    pub tracked: Vec<usize>,
}

impl ContinuationTrack {
    pub fn n_states(&self) -> usize {
        self.tracked.len()
    }

    /// The stored sample nearest to time `t` (uniform grid).
    pub fn nearest_sample(&self, t: f64) -> &TrackSample {
        let m = self.samples.len() - 1;
        let dt = self.samples[1].t - self.samples[0].t;
        let k = (t / dt).round();
        let k = if k < 0.0 { 0 } else { (k as usize).min(m) };
        &self.samples[k]
    }

    /// Largest |E| over all samples and states.
    pub fn energy_bound(&self) -> f64 {
        self.samples
            .iter()
            .flat_map(|s| s.frame.energies.iter())
            .map(|e| e.norm())
            .fold(0.0, f64::max)
    }

    /// Largest deviation of any matched step overlap from 1 along the track.
    pub fn max_overlap_deviation(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| {
                let table = w[0].frame.overlap_table(&w[1].frame);
                (0..self.n_states())
                    .map(|k| (table[[k, k]] - C64::new(1.0, 0.0)).norm())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

/// Continues all (or a tracked subset of) eigenpairs around a loop.
///
/// Frames at the discretization nodes are computed in parallel, then matched
/// and gauge-fixed sequentially. Where the matched overlap drops below
/// `opts.refine_overlap` the offending interval is bisected, up to
/// `opts.refinement_limit` halvings.
pub fn continue_loop(
    family: &MatrixFamily,
    lp: &ParameterLoop,
    tracked: Option<&[usize]>,
    opts: &SpectralOptions,
) -> Result<ContinuationTrack, SpectralError> {
    let tracked_vec = match tracked {
        None => (0..family.dim()).collect::<Vec<_>>(),
        Some(subset) => {
            let mut seen = vec![false; family.dim()];
            for &k in subset {
                if k >= family.dim() {
                    return Err(SpectralError::BadTrackedSubset(format!(
                        "index {k} out of range for dimension {}",
                        family.dim()
                    )));
                }
                if seen[k] {
                    return Err(SpectralError::BadTrackedSubset(format!("duplicate index {k}")));
                }
                seen[k] = true;
            }
            if subset.is_empty() {
                return Err(SpectralError::BadTrackedSubset("empty subset".into()));
            }
            subset.to_vec()
        }
    };
    run_continuation(family, lp, opts, tracked_vec, None)
}

/// Like [`continue_loop`], but starting from a caller-supplied initial frame
/// (e.g. with re-chosen signs); its `labels` name the tracked states.
pub fn continue_loop_from(
    family: &MatrixFamily,
    lp: &ParameterLoop,
    initial: SpectralFrame,
    opts: &SpectralOptions,
) -> Result<ContinuationTrack, SpectralError> {
    let tracked = initial.labels.clone();
    run_continuation(family, lp, opts, tracked, Some(initial))
}

fn run_continuation(
    family: &MatrixFamily,
    lp: &ParameterLoop,
    opts: &SpectralOptions,
    tracked: Vec<usize>,
    initial: Option<SpectralFrame>,
) -> Result<ContinuationTrack, SpectralError> {
    lp.validate()?;
    let disc = lp.discretize();
    let m = lp.total_steps();
    let n_unique = lp.n_steps;

    // Frames at the unique per-circuit points; repeated turns reuse them.
    let unique_frames: Vec<SpectralFrame> = (0..n_unique)
        .into_par_iter()
        .map(|k| eigen_frame_with(family, disc[k].point, opts))
        .collect::<Result<_, _>>()?;

    let init = match initial {
        Some(f) => {
            if f.dim() != family.dim() || f.n_states() != tracked.len() {
                return Err(SpectralError::DimMismatch {
                    expected: family.dim(),
                    found: f.dim(),
                });
            }
            f
        }
        None => unique_frames[0].restrict(&tracked),
    };
    let k_states = init.n_states();

    let mut aligned: Vec<SpectralFrame> = Vec::with_capacity(m + 1);
    aligned.push(init);
    let mut match_maps: Vec<Permutation> = Vec::with_capacity(m);

    // Interior steps: target the fresh sorted frame at the next node.
    for s in 0..m.saturating_sub(1) {
        let target = &unique_frames[(s + 1) % n_unique];
        let cur = aligned.last().expect("non-empty");
        let (next_aligned, _sel) = align_interval(
            family,
            lp,
            cur,
            target,
            disc[s].phi,
            disc[s + 1].phi,
            0,
            opts,
        )?;
        // Label-to-label the step is the identity: each state continues
        // itself; the braid only shows at closure.
        match_maps.push(Permutation::identity(k_states));
        aligned.push(next_aligned);
    }

    // Closure step: the final node is the initial point again, so the target
    // is the initial frame itself and the assignment is the loop signature.
    let init_clone = aligned[0].clone();
    let cur = aligned.last().expect("non-empty");
    let closure = align_interval(
        family,
        lp,
        cur,
        &init_clone,
        disc[m - 1].phi,
        disc[m].phi,
        0,
        opts,
    );
    let (closed, sel) = match closure {
        Ok(ok) => ok,
        Err(SpectralError::RefinementLimit { .. }) if k_states < family.dim() => {
            // Diagnose whether the braid left the tracked subset.
            let full0 = &unique_frames[0];
            let landed = match_selection(cur, full0);
            for (label_pos, &land) in landed.iter().enumerate() {
                if !tracked.contains(&land) {
                    return Err(SpectralError::TrackedNotClosed {
                        label: tracked[label_pos],
                        landed: land,
                    });
                }
            }
            return closure.map(|_| unreachable!("closure already failed"));
        }
        Err(e) => return Err(e),
    };
    let signature = Permutation::from_image(sel)
        .map_err(|e| SpectralError::Backend(format!("closure assignment not bijective: {e}")))?;
    match_maps.push(signature.clone());

    // Closure gauge factors: column i of the closed frame is ± column
    // signature(i) of the initial frame.
    let init_frame = &aligned[0];
    let mut closure_signs = Vec::with_capacity(k_states);
    for i in 0..k_states {
        let j = signature.apply(i);
        let (mut idx, mut mag) = (0, 0.0);
        for (r, z) in init_frame.right.column(j).iter().enumerate() {
            if z.norm() > mag {
                mag = z.norm();
                idx = r;
            }
        }
        let ratio = closed.right[[idx, i]] / init_frame.right[[idx, j]];
        closure_signs.push(if ratio.re >= 0.0 { 1.0 } else { -1.0 });
    }
    let mut closed = closed;
    closed.labels = (0..k_states).map(|i| tracked[signature.apply(i)]).collect();
    aligned.push(closed);

    let samples = disc
        .into_iter()
        .zip(aligned)
        .map(|(s, frame)| TrackSample {
            step: s.step,
            t: s.t,
            phi: s.phi,
            frame,
        })
        .collect();

    Ok(ContinuationTrack {
        samples,
        match_maps,
        signature,
        closure_signs,
        tracked,
    })
}

/// Matches `cur` into `target` (possibly holding more states), bisecting the
/// angle interval while the matched overlaps stay unconvincing.
#[allow(clippy::too_many_arguments)]
fn align_interval(
    family: &MatrixFamily,
    lp: &ParameterLoop,
    cur: &SpectralFrame,
    target: &SpectralFrame,
    phi_a: f64,
    phi_b: f64,
    depth: u32,
    opts: &SpectralOptions,
) -> Result<(SpectralFrame, Vec<usize>), SpectralError> {
    let sel = match_selection(cur, target);
    let picked = target.select(&sel, cur.labels.clone());
    let mut min_overlap = f64::INFINITY;
    for k in 0..cur.n_states() {
        let o: C64 = cur
            .left_c
            .column(k)
            .iter()
            .zip(picked.right.column(k).iter())
            .map(|(a, b)| a * b)
            .sum();
        min_overlap = min_overlap.min(o.norm());
    }
    if min_overlap >= opts.refine_overlap {
        let (gauged, _) = gauge_fix(cur, &picked, opts)?;
        return Ok((gauged, sel));
    }
    if depth >= opts.refinement_limit {
        return Err(SpectralError::RefinementLimit {
            phi_from: phi_a,
            phi_to: phi_b,
            min_overlap,
        });
    }
    let phi_mid = 0.5 * (phi_a + phi_b);
    let mid = eigen_frame_with(family, lp.point_at(phi_mid), opts)?;
    let (mid_aligned, _) =
        align_interval(family, lp, cur, &mid, phi_a, phi_mid, depth + 1, opts)?;
    align_interval(family, lp, &mid_aligned, target, phi_mid, phi_b, depth + 1, opts)
}

/// Axis-aligned search rectangle in the parameter plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub p1_min: f64,
    pub p1_max: f64,
    pub p2_min: f64,
    pub p2_max: f64,
}

impl Rect {
    pub fn new(p1_min: f64, p1_max: f64, p2_min: f64, p2_max: f64) -> Self {
        Self {
            p1_min,
            p1_max,
            p2_min,
            p2_max,
        }
    }

    pub fn center(&self) -> ParameterPoint {
        ParameterPoint::new(
            0.5 * (self.p1_min + self.p1_max),
            0.5 * (self.p2_min + self.p2_max),
        )
    }

    pub fn diameter(&self) -> f64 {
        (self.p1_max - self.p1_min).max(self.p2_max - self.p2_min)
    }

    pub fn corners(&self) -> Vec<ParameterPoint> {
        vec![
            ParameterPoint::new(self.p1_min, self.p2_min),
            ParameterPoint::new(self.p1_max, self.p2_min),
            ParameterPoint::new(self.p1_max, self.p2_max),
            ParameterPoint::new(self.p1_min, self.p2_max),
        ]
    }

    fn is_valid(&self) -> bool {
        self.p1_min < self.p1_max
            && self.p2_min < self.p2_max
            && [self.p1_min, self.p1_max, self.p2_min, self.p2_max]
                .iter()
                .all(|x| x.is_finite())
    }
}

impl From<[f64; 4]> for Rect {
    fn from(v: [f64; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

/// Knobs of the EP search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectOptions {
    /// Discretization of each rectangle-boundary loop.
    pub boundary_steps: usize,
    /// Bisection stops when a rectangle's diameter falls below
    /// `tol_rel · initial diameter`.
    pub tol_rel: f64,
    /// Largest EP order the search will classify; regions whose boundary
    /// signature has a longer cycle are reported as undecided.
    pub max_order: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            boundary_steps: 64,
            tol_rel: 1e-8,
            max_order: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedEp {
    pub point: ParameterPoint,
    /// Estimated EP order = length of the boundary signature's longest cycle.
    pub order: usize,
}

#[derive(Debug, Clone, Default)]
pub struct DetectOutcome {
    pub eps: Vec<DetectedEp>,
    /// Regions where the signature could not be decided (refinement failure
    /// or unclassifiable cycle structure).
    pub undecided: Vec<Rect>,
}

/// Split fractions tried when a sub-rectangle boundary lands on an EP.
const SPLIT_FRACTIONS: [(f64, f64); 5] = [
    (0.5, 0.5),
    (0.53819, 0.46181),
    (0.46181, 0.53819),
    (0.58503, 0.5),
    (0.5, 0.41497),
];

/// Locates exceptional points inside `rect` by recursive loop bisection.
///
/// The boundary of a rectangle is traversed as a polygon loop; a
/// non-identity permutation signature means an EP (of order = cycle length)
/// is enclosed, and the rectangle is split in four until its diameter drops
/// below `tol_rel` times the initial diameter. Identity signatures prune the
/// search, so pairs of EPs that cancel each other's permutation inside one
/// rectangle are not separable at that rectangle's scale.
pub fn detect_ep(
    family: &MatrixFamily,
    rect: Rect,
    dopts: &DetectOptions,
    sopts: &SpectralOptions,
) -> Result<DetectOutcome, SpectralError> {
    if !rect.is_valid() {
        return Err(SpectralError::BadTrackedSubset(format!(
            "invalid search rectangle {rect:?}"
        )));
    }
    let signature = boundary_signature(family, &rect, dopts, sopts)?;
    let mut out = DetectOutcome::default();
    if signature.is_identity() {
        return Ok(out);
    }
    let tol = dopts.tol_rel * rect.diameter();
    bisect(family, rect, &signature, tol, dopts, sopts, &mut out);

    // Merge duplicates that converged from adjacent rectangles.
    let mut eps: Vec<DetectedEp> = Vec::new();
    for ep in out.eps {
        if !eps
            .iter()
            .any(|e| e.point.dist(&ep.point) < 10.0 * tol && e.order == ep.order)
        {
            eps.push(ep);
        }
    }
    out.eps = eps;
    Ok(out)
}

fn boundary_signature(
    family: &MatrixFamily,
    rect: &Rect,
    dopts: &DetectOptions,
    sopts: &SpectralOptions,
) -> Result<Permutation, SpectralError> {
    let lp = ParameterLoop::polygon(rect.corners(), 1.0).with_steps(dopts.boundary_steps);
    continue_loop(family, &lp, None, sopts).map(|t| t.signature)
}

fn bisect(
    family: &MatrixFamily,
    rect: Rect,
    signature: &Permutation,
    tol: f64,
    dopts: &DetectOptions,
    sopts: &SpectralOptions,
    out: &mut DetectOutcome,
) {
    let order = signature.max_cycle_len();
    if order > dopts.max_order.max(1) {
        out.undecided.push(rect);
        return;
    }
    if rect.diameter() < tol {
        out.eps.push(DetectedEp {
            point: rect.center(),
            order,
        });
        return;
    }
    'fractions: for &(fx, fy) in &SPLIT_FRACTIONS {
        let xm = rect.p1_min + fx * (rect.p1_max - rect.p1_min);
        let ym = rect.p2_min + fy * (rect.p2_max - rect.p2_min);
        let quads = [
            Rect::new(rect.p1_min, xm, rect.p2_min, ym),
            Rect::new(xm, rect.p1_max, rect.p2_min, ym),
            Rect::new(rect.p1_min, xm, ym, rect.p2_max),
            Rect::new(xm, rect.p1_max, ym, rect.p2_max),
        ];
        let mut hot = Vec::new();
        for quad in quads {
            match boundary_signature(family, &quad, dopts, sopts) {
                Ok(sig) if sig.is_identity() => {}
                Ok(sig) => hot.push((quad, sig)),
                // A boundary through the EP; retry with shifted split lines.
                Err(_) => continue 'fractions,
            }
        }
        if hot.is_empty() {
            // The split swallowed the permutation; try other fractions.
            continue 'fractions;
        }
        for (quad, sig) in hot {
            bisect(family, quad, &sig, tol, dopts, sopts, out);
        }
        return;
    }
    out.undecided.push(rect);
}

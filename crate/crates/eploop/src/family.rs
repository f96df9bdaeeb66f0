//! Parameter-dependent matrix families.
//!
//! A family is a finite monomial expansion
//! `A(p1,p2) = Σ_k p1^{e1_k} p2^{e2_k} B_k` of constant complex matrices
//! together with a real symmetric positive-definite metric `C`, the setting
//! of the generalized eigenproblem `A(p) r = μ C r`. Keeping families
//! polynomial makes parameter derivatives exact and the on-disk format
//! portable.
//!
//! Raw eigenvalues `μ` relate to physical energies by `μ = s_E · E`, where
//! the positive `energy_scale` `s_E` carries whatever constant the producer
//! of an ingested family absorbed into the pencil (synthetic built-ins use
//! `s_E = 1`).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Relative tolerance for the complex-symmetry check of family terms.
pub const SYMMETRY_RTOL: f64 = 1e-14;

/// A point in the two-dimensional physical parameter plane.
///
/// For field-driven atomic families `p1` plays the magnetic and `p2` the
/// electric dimensionless field strength; the canonical one-complex-parameter
/// models embed `λ = p1 + i·p2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterPoint {
    pub p1: f64,
    pub p2: f64,
}

impl ParameterPoint {
    pub fn new(p1: f64, p2: f64) -> Self {
        Self { p1, p2 }
    }

    pub fn is_finite(&self) -> bool {
        self.p1.is_finite() && self.p2.is_finite()
    }

    pub fn dist(&self, other: &ParameterPoint) -> f64 {
        (self.p1 - other.p1).hypot(self.p2 - other.p2)
    }

    /// The embedded complex parameter `λ = p1 + i·p2`.
    pub fn as_complex(&self) -> C64 {
        C64::new(self.p1, self.p2)
    }
}

impl From<(f64, f64)> for ParameterPoint {
    fn from((p1, p2): (f64, f64)) -> Self {
        Self { p1, p2 }
    }
}

/// One monomial term `p1^e1 p2^e2 · B` of a family.
#[derive(Debug, Clone)]
pub struct FamilyTerm {
    pub e1: u32,
    pub e2: u32,
    pub matrix: Array2<C64>,
}

impl FamilyTerm {
    pub fn new(e1: u32, e2: u32, matrix: Array2<C64>) -> Self {
        Self { e1, e2, matrix }
    }
}

#[derive(Debug, Error)]
pub enum FamilyError {
    #[error("a family needs at least one term")]
    NoTerms,
    #[error("term {index} is {rows}x{cols}, expected {dim}x{dim}")]
    TermShape {
        index: usize,
        rows: usize,
        cols: usize,
        dim: usize,
    },
    #[error("duplicate exponent pair ({e1},{e2})")]
    DuplicateExponents { e1: u32, e2: u32 },
    #[error("term {index} breaks the symmetric flag: max |B - Bᵀ| = {dev:.3e} > {tol:.3e}")]
    NotSymmetric { index: usize, dev: f64, tol: f64 },
    #[error("metric is {rows}x{cols}, expected {dim}x{dim}")]
    MetricShape {
        rows: usize,
        cols: usize,
        dim: usize,
    },
    #[error("metric is not symmetric: max |C - Cᵀ| = {dev:.3e}")]
    MetricNotSymmetric { dev: f64 },
    #[error("metric is not positive definite: pivot {index} is {pivot:.3e}")]
    MetricNotPositiveDefinite { index: usize, pivot: f64 },
    #[error("non-finite entry in {what}")]
    NonFinite { what: String },
    #[error("energy scale must be positive and finite, got {0}")]
    BadEnergyScale(f64),
    #[error("family file {what}: expected {expected} values, found {found}")]
    FieldLength {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("reading family file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing family file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// A validated parameter-dependent matrix pencil with its metric.
///
/// Immutable after construction; safe to share across worker threads.
#[derive(Debug, Clone)]
pub struct MatrixFamily {
    dim: usize,
    terms: Vec<FamilyTerm>,
    metric: Array2<f64>,
    /// Lower Cholesky factor of the metric; `None` when the metric is exactly
    /// the identity, which short-circuits the generalized-problem reduction.
    metric_chol: Option<Array2<f64>>,
    symmetric: bool,
    energy_scale: f64,
    meta: Option<serde_json::Value>,
}

impl MatrixFamily {
    /// Builds a family with the identity metric and unit energy scale.
    pub fn new(terms: Vec<FamilyTerm>, symmetric: bool) -> Result<Self, FamilyError> {
        let dim = terms.first().map(|t| t.matrix.nrows()).unwrap_or(0);
        let metric = Array2::eye(dim);
        Self::with_metric(terms, symmetric, metric, 1.0)
    }

    /// Builds a family with an explicit metric and energy scale, running the
    /// full validation suite.
    pub fn with_metric(
        terms: Vec<FamilyTerm>,
        symmetric: bool,
        metric: Array2<f64>,
        energy_scale: f64,
    ) -> Result<Self, FamilyError> {
        if terms.is_empty() {
            return Err(FamilyError::NoTerms);
        }
        if !(energy_scale > 0.0 && energy_scale.is_finite()) {
            return Err(FamilyError::BadEnergyScale(energy_scale));
        }
        let dim = terms[0].matrix.nrows();
        for (index, term) in terms.iter().enumerate() {
            let (rows, cols) = (term.matrix.nrows(), term.matrix.ncols());
            if rows != dim || cols != dim {
                return Err(FamilyError::TermShape {
                    index,
                    rows,
                    cols,
                    dim,
                });
            }
            if term.matrix.iter().any(|z| !z.is_finite()) {
                return Err(FamilyError::NonFinite {
                    what: format!("term {index}"),
                });
            }
        }
        for (i, a) in terms.iter().enumerate() {
            for b in terms.iter().skip(i + 1) {
                if a.e1 == b.e1 && a.e2 == b.e2 {
                    return Err(FamilyError::DuplicateExponents { e1: a.e1, e2: a.e2 });
                }
            }
        }
        if symmetric {
            for (index, term) in terms.iter().enumerate() {
                let scale = term
                    .matrix
                    .iter()
                    .map(|z| z.norm())
                    .fold(0.0_f64, f64::max)
                    .max(1.0);
                let dev = asym_dev(&term.matrix);
                let tol = SYMMETRY_RTOL * scale;
                if dev > tol {
                    return Err(FamilyError::NotSymmetric { index, dev, tol });
                }
            }
        }
        if metric.nrows() != dim || metric.ncols() != dim {
            return Err(FamilyError::MetricShape {
                rows: metric.nrows(),
                cols: metric.ncols(),
                dim,
            });
        }
        if metric.iter().any(|x| !x.is_finite()) {
            return Err(FamilyError::NonFinite {
                what: "metric".to_owned(),
            });
        }
        let mdev = (&metric - &metric.t())
            .iter()
            .map(|x| x.abs())
            .fold(0.0_f64, f64::max);
        if mdev > SYMMETRY_RTOL * metric.iter().map(|x| x.abs()).fold(1.0_f64, f64::max) {
            return Err(FamilyError::MetricNotSymmetric { dev: mdev });
        }
        let metric_chol = if is_identity(&metric) {
            None
        } else {
            match linalg::cholesky_lower(&metric) {
                Ok(l) => Some(l),
                Err((index, pivot)) => {
                    return Err(FamilyError::MetricNotPositiveDefinite { index, pivot })
                }
            }
        };
        Ok(Self {
            dim,
            terms,
            metric,
            metric_chol,
            symmetric,
            energy_scale,
            meta: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[FamilyTerm] {
        &self.terms
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn energy_scale(&self) -> f64 {
        self.energy_scale
    }

    pub fn metric(&self) -> &Array2<f64> {
        &self.metric
    }

    pub fn metric_is_identity(&self) -> bool {
        self.metric_chol.is_none()
    }

    pub(crate) fn metric_cholesky(&self) -> Option<&Array2<f64>> {
        self.metric_chol.as_ref()
    }

    pub fn meta(&self) -> Option<&serde_json::Value> {
        self.meta.as_ref()
    }

    pub fn set_meta(&mut self, meta: Option<serde_json::Value>) {
        self.meta = meta;
    }

    /// Evaluates the pencil at a parameter point.
    pub fn assemble(&self, p: ParameterPoint) -> Array2<C64> {
        let mut a = Array2::<C64>::zeros((self.dim, self.dim));
        for term in &self.terms {
            let c = p.p1.powi(term.e1 as i32) * p.p2.powi(term.e2 as i32);
            if c != 0.0 {
                a.scaled_add(C64::new(c, 0.0), &term.matrix);
            }
        }
        a
    }

    /// Evaluates `dA/dt = ∂A/∂p1·ṗ1 + ∂A/∂p2·ṗ2` exactly from the monomial
    /// expansion.
    pub fn assemble_derivative(&self, p: ParameterPoint, dpdt: [f64; 2]) -> Array2<C64> {
        let mut a = Array2::<C64>::zeros((self.dim, self.dim));
        for term in &self.terms {
            let mut c = 0.0;
            if term.e1 > 0 {
                c += term.e1 as f64
                    * p.p1.powi(term.e1 as i32 - 1)
                    * p.p2.powi(term.e2 as i32)
                    * dpdt[0];
            }
            if term.e2 > 0 {
                c += term.e2 as f64
                    * p.p1.powi(term.e1 as i32)
                    * p.p2.powi(term.e2 as i32 - 1)
                    * dpdt[1];
            }
            if c != 0.0 {
                a.scaled_add(C64::new(c, 0.0), &term.matrix);
            }
        }
        a
    }

    /// Applies the metric to a set of column vectors: `C · V`.
    pub(crate) fn metric_apply(&self, v: &Array2<C64>) -> Array2<C64> {
        if self.metric_is_identity() {
            v.clone()
        } else {
            let c = self.metric.mapv(|x| C64::new(x, 0.0));
            c.dot(v)
        }
    }

    /// The canonical EP2 model `[[1, λ], [λ, -1]]` with `λ = p1 + i·p2`.
    ///
    /// Eigenvalues are `±√(1+λ²)`; the exceptional points sit at
    /// `λ = ±i`, i.e. `(p1,p2) = (0, ±1)`.
    pub fn canonical_ep2() -> Self {
        let one = C64::new(1.0, 0.0);
        let i = C64::new(0.0, 1.0);
        let zero = C64::new(0.0, 0.0);
        let constant = ndarray::array![[one, zero], [zero, -one]];
        let x = ndarray::array![[zero, one], [one, zero]];
        let ix = ndarray::array![[zero, i], [i, zero]];
        Self::new(
            vec![
                FamilyTerm::new(0, 0, constant),
                FamilyTerm::new(1, 0, x),
                FamilyTerm::new(0, 1, ix),
            ],
            true,
        )
        .expect("canonical EP2 family is valid")
    }

    /// Companion-matrix EP3 model: eigenvalues are the three cube roots of
    /// `λ = p1 + i·p2`, coalescing in a third-order EP at `λ = 0`.
    ///
    /// The matrix is not symmetric, so this family exercises the
    /// bi-orthogonal code path.
    pub fn ep3_companion() -> Self {
        let one = C64::new(1.0, 0.0);
        let i = C64::new(0.0, 1.0);
        let zero = C64::new(0.0, 0.0);
        let constant = ndarray::array![[zero, one, zero], [zero, zero, one], [zero, zero, zero]];
        let mut e31 = Array2::<C64>::zeros((3, 3));
        e31[[2, 0]] = one;
        let mut ie31 = Array2::<C64>::zeros((3, 3));
        ie31[[2, 0]] = i;
        Self::new(
            vec![
                FamilyTerm::new(0, 0, constant),
                FamilyTerm::new(1, 0, e31),
                FamilyTerm::new(0, 1, ie31),
            ],
            false,
        )
        .expect("EP3 companion family is valid")
    }

    /// Uniform width offset of the EP2 block in [`Self::ep2_with_spectators`]:
    /// both exchanging states decay at least this fast, like the broad
    /// resonances they model, while the spectators outlive them.
    pub const EP2_BLOCK_WIDTH: f64 = 0.5;

    /// Uniform width offset of the companion block in
    /// [`Self::ep3_with_spectators`].
    pub const EP3_BLOCK_WIDTH: f64 = 1.0;

    /// Canonical EP2 block plus two weakly decaying spectator resonances.
    ///
    /// The 4×4 symmetric family is the EP2 block, shifted down in width by
    /// `EP2_BLOCK_WIDTH` so both exchanging states decay, ⊕ `diag(0.6 +
    /// i·w0, -0.6 + i·w1)` with a constant symmetric off-block coupling.
    /// `widths` are the spectator imaginary parts (take them small and
    /// negative for long-lived spectators); with `coupling = 0` the blocks
    /// decouple exactly. The block shift moves no EP: the exchange still
    /// happens around `(p1,p2) = (0, ±1)`.
    pub fn ep2_with_spectators(coupling: f64, widths: [f64; 2]) -> Self {
        let re = [0.6, -0.6];
        let mut constant = Array2::<C64>::zeros((4, 4));
        constant[[0, 0]] = C64::new(1.0, -Self::EP2_BLOCK_WIDTH);
        constant[[1, 1]] = C64::new(-1.0, -Self::EP2_BLOCK_WIDTH);
        for k in 0..2 {
            constant[[2 + k, 2 + k]] = C64::new(re[k], widths[k]);
        }
        for i in 0..2 {
            for j in 2..4 {
                constant[[i, j]] = C64::new(coupling, 0.0);
                constant[[j, i]] = C64::new(coupling, 0.0);
            }
        }
        let mut x = Array2::<C64>::zeros((4, 4));
        x[[0, 1]] = C64::new(1.0, 0.0);
        x[[1, 0]] = C64::new(1.0, 0.0);
        let mut ix = Array2::<C64>::zeros((4, 4));
        ix[[0, 1]] = C64::new(0.0, 1.0);
        ix[[1, 0]] = C64::new(0.0, 1.0);
        Self::new(
            vec![
                FamilyTerm::new(0, 0, constant),
                FamilyTerm::new(1, 0, x),
                FamilyTerm::new(0, 1, ix),
            ],
            true,
        )
        .expect("EP2 spectator family is valid")
    }

    /// EP3 companion block plus three spectator resonances.
    ///
    /// The 6×6 family is the companion block, shifted down in width by
    /// `EP3_BLOCK_WIDTH` so all three exchanging states decay, ⊕ `diag(0.9 +
    /// i·w0, 0.0 + i·w1, -0.9 + i·w2)` with a constant off-block coupling;
    /// non-symmetric like the companion block itself. The EP3 stays at
    /// `λ = 0`.
    pub fn ep3_with_spectators(coupling: f64, widths: [f64; 3]) -> Self {
        let re = [0.9, 0.0, -0.9];
        let mut constant = Array2::<C64>::zeros((6, 6));
        constant[[0, 1]] = C64::new(1.0, 0.0);
        constant[[1, 2]] = C64::new(1.0, 0.0);
        for k in 0..3 {
            constant[[k, k]] = C64::new(0.0, -Self::EP3_BLOCK_WIDTH);
            constant[[3 + k, 3 + k]] = C64::new(re[k], widths[k]);
        }
        for i in 0..3 {
            for j in 3..6 {
                constant[[i, j]] = C64::new(coupling, 0.0);
                constant[[j, i]] = C64::new(coupling, 0.0);
            }
        }
        let mut e31 = Array2::<C64>::zeros((6, 6));
        e31[[2, 0]] = C64::new(1.0, 0.0);
        let mut ie31 = Array2::<C64>::zeros((6, 6));
        ie31[[2, 0]] = C64::new(0.0, 1.0);
        Self::new(
            vec![
                FamilyTerm::new(0, 0, constant),
                FamilyTerm::new(1, 0, e31),
                FamilyTerm::new(0, 1, ie31),
            ],
            false,
        )
        .expect("EP3 spectator family is valid")
    }

    /// Looks up a built-in family by name.
    ///
    /// `coupling`/`widths` apply to the spectator variants and are rejected
    /// for the plain models.
    pub fn builtin(
        name: &str,
        coupling: Option<f64>,
        widths: Option<&[f64]>,
    ) -> Option<Result<Self, String>> {
        let plain = |family: MatrixFamily| {
            if coupling.is_some() || widths.is_some() {
                Err(format!("builtin '{name}' takes no coupling/widths"))
            } else {
                Ok(family)
            }
        };
        match name {
            "canonical_ep2" => Some(plain(Self::canonical_ep2())),
            "ep3_companion" => Some(plain(Self::ep3_companion())),
            "ep2_spectators" => {
                let c = coupling.unwrap_or(0.05);
                let w: [f64; 2] = match widths {
                    None => [-0.02, -0.05],
                    Some(&[a, b]) => [a, b],
                    Some(other) => {
                        return Some(Err(format!(
                            "ep2_spectators needs 2 widths, got {}",
                            other.len()
                        )))
                    }
                };
                Some(Ok(Self::ep2_with_spectators(c, w)))
            }
            "ep3_spectators" => {
                let c = coupling.unwrap_or(0.05);
                let w: [f64; 3] = match widths {
                    None => [-0.08, -0.01, -0.2],
                    Some(&[a, b, c3]) => [a, b, c3],
                    Some(other) => {
                        return Some(Err(format!(
                            "ep3_spectators needs 3 widths, got {}",
                            other.len()
                        )))
                    }
                };
                Some(Ok(Self::ep3_with_spectators(c, w)))
            }
            _ => None,
        }
    }

    /// Reads a family from the JSON file format described in the README.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, FamilyError> {
        let text = fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// Writes the family as JSON. Floats are emitted with shortest
    /// round-trip precision, so `load(save(f)) == f` bit-exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FamilyError> {
        fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self, FamilyError> {
        let file: FamilyFile = serde_json::from_str(text)?;
        let dim = file.dim;
        let n2 = dim * dim;
        let mut terms = Vec::with_capacity(file.terms.len());
        for (k, t) in file.terms.into_iter().enumerate() {
            if t.re.len() != n2 {
                return Err(FamilyError::FieldLength {
                    what: format!("terms[{k}].re"),
                    expected: n2,
                    found: t.re.len(),
                });
            }
            if t.im.len() != n2 {
                return Err(FamilyError::FieldLength {
                    what: format!("terms[{k}].im"),
                    expected: n2,
                    found: t.im.len(),
                });
            }
            let data: Vec<C64> = t
                .re
                .iter()
                .zip(t.im.iter())
                .map(|(&re, &im)| C64::new(re, im))
                .collect();
            let matrix = Array2::from_shape_vec((dim, dim), data).expect("length checked");
            terms.push(FamilyTerm::new(t.e1, t.e2, matrix));
        }
        let metric = match file.metric {
            None => Array2::eye(dim),
            Some(values) => {
                if values.len() != n2 {
                    return Err(FamilyError::FieldLength {
                        what: "metric".to_owned(),
                        expected: n2,
                        found: values.len(),
                    });
                }
                Array2::from_shape_vec((dim, dim), values).expect("length checked")
            }
        };
        let mut family = Self::with_metric(terms, file.symmetric, metric, file.energy_scale)?;
        family.set_meta(file.meta);
        Ok(family)
    }

    pub fn to_json_string(&self) -> Result<String, FamilyError> {
        let n2 = self.dim * self.dim;
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let mut re = Vec::with_capacity(n2);
                let mut im = Vec::with_capacity(n2);
                for z in t.matrix.iter() {
                    re.push(z.re);
                    im.push(z.im);
                }
                TermFile {
                    e1: t.e1,
                    e2: t.e2,
                    re,
                    im,
                }
            })
            .collect();
        let metric = if self.metric_is_identity() {
            None
        } else {
            Some(self.metric.iter().copied().collect())
        };
        let file = FamilyFile {
            dim: self.dim,
            symmetric: self.symmetric,
            energy_scale: self.energy_scale,
            metric,
            terms,
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

fn asym_dev(m: &Array2<C64>) -> f64 {
    let n = m.nrows();
    let mut dev = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            dev = dev.max((m[[i, j]] - m[[j, i]]).norm());
        }
    }
    dev
}

fn is_identity(m: &Array2<f64>) -> bool {
    m.indexed_iter()
        .all(|((i, j), &x)| x == if i == j { 1.0 } else { 0.0 })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyFile {
    dim: usize,
    symmetric: bool,
    energy_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metric: Option<Vec<f64>>,
    terms: Vec<TermFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermFile {
    e1: u32,
    e2: u32,
    re: Vec<f64>,
    im: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn canonical_assemble_at_origin_and_real_lambda() {
        let fam = MatrixFamily::canonical_ep2();
        let a0 = fam.assemble(ParameterPoint::new(0.0, 0.0));
        assert_eq!(a0, array![[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(-1.0, 0.0)]]);
        let a = fam.assemble(ParameterPoint::new(0.3, 0.0));
        assert_eq!(a, array![[c(1.0, 0.0), c(0.3, 0.0)], [c(0.3, 0.0), c(-1.0, 0.0)]]);
    }

    #[test]
    fn assemble_at_origin_is_constant_term() {
        let fam = MatrixFamily::ep2_with_spectators(0.05, [-0.02, -0.05]);
        let a = fam.assemble(ParameterPoint::new(0.0, 0.0));
        assert_eq!(a, fam.terms()[0].matrix);
    }

    #[test]
    fn derivative_examples() {
        let fam = MatrixFamily::canonical_ep2();
        let zero = fam.assemble_derivative(ParameterPoint::new(0.4, -0.2), [0.0, 0.0]);
        assert!(zero.iter().all(|z| z.norm() == 0.0));
        let dx = fam.assemble_derivative(ParameterPoint::new(0.4, -0.2), [1.0, 0.0]);
        assert_eq!(dx, array![[c(0.0, 0.0), c(1.0, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]]);

        // power rule: term p1²·B at p1=2 differentiates to 4·B
        let b = array![[c(1.0, 0.5), c(0.0, 0.0)], [c(0.0, 0.0), c(2.0, 0.0)]];
        let fam2 = MatrixFamily::new(
            vec![
                FamilyTerm::new(0, 0, Array2::zeros((2, 2))),
                FamilyTerm::new(2, 0, b.clone()),
            ],
            false,
        )
        .unwrap();
        let d = fam2.assemble_derivative(ParameterPoint::new(2.0, 7.0), [1.0, 0.0]);
        for (x, y) in d.iter().zip(b.iter()) {
            assert!((x - 4.0 * y).norm() < 1e-15);
        }
    }

    #[test]
    fn derivative_has_no_singularity_at_origin() {
        let fam = MatrixFamily::canonical_ep2();
        let d = fam.assemble_derivative(ParameterPoint::new(0.0, 0.0), [1.0, 1.0]);
        assert!(d.iter().all(|z| z.is_finite()));
    }

    #[test]
    fn derivative_matches_central_differences() {
        // relative error ≤ 1e-6 with step h = 1e-6·(1+|p|)
        let fams = [
            MatrixFamily::canonical_ep2(),
            MatrixFamily::ep3_companion(),
            MatrixFamily::ep2_with_spectators(0.05, [-0.02, -0.05]),
            MatrixFamily::ep3_with_spectators(0.05, [-0.08, -0.01, -0.2]),
        ];
        let points = [(0.3, 0.7), (-1.1, 0.2), (0.0, 1.0), (2.0, -0.5)];
        let dirs = [[1.0, 0.0], [0.0, 1.0], [0.6, -0.8]];
        for fam in &fams {
            for &(p1, p2) in &points {
                let p = ParameterPoint::new(p1, p2);
                let h = 1e-6 * (1.0 + p1.hypot(p2));
                for dir in dirs {
                    let exact = fam.assemble_derivative(p, dir);
                    let plus = fam.assemble(ParameterPoint::new(p1 + h * dir[0], p2 + h * dir[1]));
                    let minus = fam.assemble(ParameterPoint::new(p1 - h * dir[0], p2 - h * dir[1]));
                    let fd = (&plus - &minus) / c(2.0 * h, 0.0);
                    let scale = exact.iter().map(|z| z.norm()).fold(1e-12, f64::max);
                    let dev = (&exact - &fd)
                        .iter()
                        .map(|z| z.norm())
                        .fold(0.0_f64, f64::max);
                    assert!(
                        dev / scale <= 1e-6,
                        "relative FD deviation {:.2e} at ({p1},{p2})",
                        dev / scale
                    );
                }
            }
        }
    }

    #[test]
    fn symmetric_flag_rejects_asymmetric_terms() {
        let bad = array![[c(0.0, 0.0), c(1.0, 0.0)], [c(0.9, 0.0), c(0.0, 0.0)]];
        let err = MatrixFamily::new(vec![FamilyTerm::new(0, 0, bad)], true).unwrap_err();
        assert!(matches!(err, FamilyError::NotSymmetric { index: 0, .. }));
    }

    #[test]
    fn duplicate_exponents_rejected() {
        let z = Array2::<C64>::eye(2);
        let err = MatrixFamily::new(
            vec![FamilyTerm::new(1, 0, z.clone()), FamilyTerm::new(1, 0, z)],
            false,
        )
        .unwrap_err();
        assert!(matches!(err, FamilyError::DuplicateExponents { e1: 1, e2: 0 }));
    }

    #[test]
    fn indefinite_metric_rejected() {
        let z = Array2::<C64>::eye(2);
        let metric = array![[1.0, 2.0], [2.0, 1.0]];
        let err =
            MatrixFamily::with_metric(vec![FamilyTerm::new(0, 0, z)], false, metric, 1.0)
                .unwrap_err();
        assert!(matches!(err, FamilyError::MetricNotPositiveDefinite { .. }));
    }

    #[test]
    fn file_round_trip_is_exact() {
        let mut fam = MatrixFamily::ep2_with_spectators(0.05, [-0.02, -0.05]);
        fam.set_meta(Some(serde_json::json!({
            "source": "builtin",
            "ep_gamma": 0.005388,
            "ep_f": 0.0002619,
        })));
        let text = fam.to_json_string().unwrap();
        let back = MatrixFamily::from_json_str(&text).unwrap();
        assert_eq!(back.dim(), fam.dim());
        assert_eq!(back.symmetric(), fam.symmetric());
        assert_eq!(back.energy_scale(), fam.energy_scale());
        assert_eq!(back.terms().len(), fam.terms().len());
        for (a, b) in back.terms().iter().zip(fam.terms()) {
            assert_eq!(a.e1, b.e1);
            assert_eq!(a.e2, b.e2);
            assert_eq!(a.matrix, b.matrix);
        }
        assert_eq!(back.metric(), fam.metric());
        assert_eq!(back.meta(), fam.meta());
    }

    #[test]
    fn load_diagnostics_are_distinct() {
        // malformed JSON
        assert!(matches!(
            MatrixFamily::from_json_str("{not json").unwrap_err(),
            FamilyError::Parse(_)
        ));
        // wrong value count
        let short = r#"{"dim":2,"symmetric":false,"energy_scale":1.0,
            "terms":[{"e1":0,"e2":0,"re":[1.0,0.0,0.0],"im":[0.0,0.0,0.0,0.0]}]}"#;
        assert!(matches!(
            MatrixFamily::from_json_str(short).unwrap_err(),
            FamilyError::FieldLength { .. }
        ));
        // indefinite metric
        let bad_metric = r#"{"dim":2,"symmetric":false,"energy_scale":1.0,
            "metric":[1.0,2.0,2.0,1.0],
            "terms":[{"e1":0,"e2":0,"re":[1.0,0.0,0.0,1.0],"im":[0.0,0.0,0.0,0.0]}]}"#;
        assert!(matches!(
            MatrixFamily::from_json_str(bad_metric).unwrap_err(),
            FamilyError::MetricNotPositiveDefinite { .. }
        ));
        // symmetry violation under the flag
        let asym = r#"{"dim":2,"symmetric":true,"energy_scale":1.0,
            "terms":[{"e1":0,"e2":0,"re":[0.0,1.0,0.5,0.0],"im":[0.0,0.0,0.0,0.0]}]}"#;
        assert!(matches!(
            MatrixFamily::from_json_str(asym).unwrap_err(),
            FamilyError::NotSymmetric { .. }
        ));
        // unknown key
        let unknown = r#"{"dim":2,"symmetric":false,"energy_scale":1.0,"bogus":3,
            "terms":[{"e1":0,"e2":0,"re":[1.0,0.0,0.0,1.0],"im":[0.0,0.0,0.0,0.0]}]}"#;
        assert!(matches!(
            MatrixFamily::from_json_str(unknown).unwrap_err(),
            FamilyError::Parse(_)
        ));
    }

    #[test]
    fn builtin_lookup() {
        assert!(MatrixFamily::builtin("canonical_ep2", None, None)
            .unwrap()
            .is_ok());
        assert!(MatrixFamily::builtin("nope", None, None).is_none());
        assert!(MatrixFamily::builtin("canonical_ep2", Some(0.1), None)
            .unwrap()
            .is_err());
        let w = [-0.1, -0.2];
        let fam = MatrixFamily::builtin("ep2_spectators", Some(0.02), Some(&w))
            .unwrap()
            .unwrap();
        assert_eq!(fam.dim(), 4);
    }
}

//! Closed paths in the parameter plane with a time parametrization.
//!
//! Loops traverse at uniform angular speed `φ(t) = direction·2π·t/T`, with
//! `T` the per-circuit traversal time; `turns` circuits run back to back.
//! Circles come in two radius conventions:
//!
//! * `relative` — `p1 = c1·[1+δ(s+cosφ)]`, `p2 = c2·(1+δ·sinφ)`: the radius
//!   is relative to the field strengths at the center, natural for
//!   field-driven families. Degenerates when a center component vanishes.
//! * `absolute` — `p = center + δ·(s+cosφ, sinφ)`: an absolute radius, used
//!   by the built-in models whose centers sit on the axes.
//!
//! The shift `s` slides the circle along `p1` in units of the radius; `s = 1`
//! makes the circle pass through the unshifted center.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

use crate::family::ParameterPoint;

/// Smallest accepted discretization per circuit.
pub const MIN_STEPS: usize = 8;

/// Default discretization per circuit for spectral continuation.
pub const DEFAULT_N_STEPS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum LoopError {
    #[error("loop needs at least {MIN_STEPS} steps per turn, got {0}")]
    TooFewSteps(usize),
    #[error("radius must be non-negative and finite, got {0}")]
    BadRadius(f64),
    #[error("traversal time must be positive and finite, got {0}")]
    BadTraversalTime(f64),
    #[error("direction must be +1 or -1, got {0}")]
    BadDirection(i8),
    #[error("turns must be at least 1")]
    ZeroTurns,
    #[error("relative-radius circle requires nonzero center components, center = ({0}, {1})")]
    RelativeDegenerate(f64, f64),
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("non-finite loop parameter")]
    NonFinite,
}

/// Radius convention for circular loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMode {
    Relative,
    Absolute,
}

/// Geometric shape of a loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LoopShape {
    Circle {
        center: ParameterPoint,
        radius: f64,
        #[serde(default)]
        shift: f64,
        mode: RadiusMode,
    },
    Polygon { vertices: Vec<ParameterPoint> },
}

/// A discretized closed path with a time parametrization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterLoop {
    pub shape: LoopShape,
    /// Samples per circuit.
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    /// Time per circuit, in model time units.
    pub traversal_time: f64,
    /// +1 traverses angles counterclockwise, -1 clockwise.
    #[serde(default = "default_direction")]
    pub direction: i8,
    /// Number of consecutive circuits.
    #[serde(default = "default_turns")]
    pub turns: u32,
}

fn default_steps() -> usize {
    DEFAULT_N_STEPS
}

fn default_direction() -> i8 {
    1
}

fn default_turns() -> u32 {
    1
}

/// One discretization node: time, unwound angle and the loop point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSample {
    pub step: usize,
    pub t: f64,
    pub phi: f64,
    pub point: ParameterPoint,
}

impl ParameterLoop {
    /// Absolute-radius circle, the convention of the built-in models.
    pub fn circle(center: impl Into<ParameterPoint>, radius: f64, traversal_time: f64) -> Self {
        Self {
            shape: LoopShape::Circle {
                center: center.into(),
                radius,
                shift: 0.0,
                mode: RadiusMode::Absolute,
            },
            n_steps: DEFAULT_N_STEPS,
            traversal_time,
            direction: 1,
            turns: 1,
        }
    }

    /// Relative-radius circle `p1 = c1(1+δcosφ)`, `p2 = c2(1+δsinφ)`.
    pub fn relative_circle(
        center: impl Into<ParameterPoint>,
        delta: f64,
        traversal_time: f64,
    ) -> Self {
        Self {
            shape: LoopShape::Circle {
                center: center.into(),
                radius: delta,
                shift: 0.0,
                mode: RadiusMode::Relative,
            },
            n_steps: DEFAULT_N_STEPS,
            traversal_time,
            direction: 1,
            turns: 1,
        }
    }

    /// Closed polygon through the given vertices, traversed edge by edge
    /// with equal angular span per edge.
    pub fn polygon(vertices: Vec<ParameterPoint>, traversal_time: f64) -> Self {
        Self {
            shape: LoopShape::Polygon { vertices },
            n_steps: DEFAULT_N_STEPS,
            traversal_time,
            direction: 1,
            turns: 1,
        }
    }

    pub fn with_steps(mut self, n_steps: usize) -> Self {
        self.n_steps = n_steps;
        self
    }

    pub fn with_shift(mut self, s: f64) -> Self {
        if let LoopShape::Circle { ref mut shift, .. } = self.shape {
            *shift = s;
        }
        self
    }

    pub fn with_direction(mut self, direction: i8) -> Self {
        self.direction = direction;
        self
    }

    pub fn with_turns(mut self, turns: u32) -> Self {
        self.turns = turns;
        self
    }

    pub fn validate(&self) -> Result<(), LoopError> {
        if self.n_steps < MIN_STEPS {
            return Err(LoopError::TooFewSteps(self.n_steps));
        }
        if !(self.traversal_time > 0.0 && self.traversal_time.is_finite()) {
            return Err(LoopError::BadTraversalTime(self.traversal_time));
        }
        if self.direction != 1 && self.direction != -1 {
            return Err(LoopError::BadDirection(self.direction));
        }
        if self.turns == 0 {
            return Err(LoopError::ZeroTurns);
        }
        match &self.shape {
            LoopShape::Circle {
                center,
                radius,
                shift,
                mode,
            } => {
                // radius 0 is allowed: a degenerate loop holding the
                // parameters constant (pure-decay runs).
                if !(*radius >= 0.0 && radius.is_finite()) {
                    return Err(LoopError::BadRadius(*radius));
                }
                if !center.is_finite() || !shift.is_finite() {
                    return Err(LoopError::NonFinite);
                }
                if *mode == RadiusMode::Relative && (center.p1 == 0.0 || center.p2 == 0.0) {
                    return Err(LoopError::RelativeDegenerate(center.p1, center.p2));
                }
            }
            LoopShape::Polygon { vertices } => {
                if vertices.len() < 3 {
                    return Err(LoopError::TooFewVertices(vertices.len()));
                }
                if vertices.iter().any(|v| !v.is_finite()) {
                    return Err(LoopError::NonFinite);
                }
            }
        }
        Ok(())
    }

    /// Total duration `T · turns`.
    pub fn total_time(&self) -> f64 {
        self.traversal_time * self.turns as f64
    }

    /// Total number of discretization steps `n_steps · turns`.
    pub fn total_steps(&self) -> usize {
        self.n_steps * self.turns as usize
    }

    /// Unwound angle at time `t`.
    pub fn phi_at_time(&self, t: f64) -> f64 {
        self.direction as f64 * TAU * t / self.traversal_time
    }

    /// The loop point at (unwound) angle `phi`.
    pub fn point_at(&self, phi: f64) -> ParameterPoint {
        match &self.shape {
            LoopShape::Circle {
                center,
                radius,
                shift,
                mode,
            } => {
                let (c1, c2) = (center.p1, center.p2);
                let (s, r) = (*shift, *radius);
                match mode {
                    RadiusMode::Relative => ParameterPoint::new(
                        c1 * (1.0 + r * (s + phi.cos())),
                        c2 * (1.0 + r * phi.sin()),
                    ),
                    RadiusMode::Absolute => {
                        ParameterPoint::new(c1 + r * (s + phi.cos()), c2 + r * phi.sin())
                    }
                }
            }
            LoopShape::Polygon { vertices } => {
                let v = vertices.len();
                let u = (phi / TAU).rem_euclid(1.0) * v as f64;
                let e = (u as usize).min(v - 1);
                let frac = u - e as f64;
                let a = vertices[e];
                let b = vertices[(e + 1) % v];
                ParameterPoint::new(a.p1 + frac * (b.p1 - a.p1), a.p2 + frac * (b.p2 - a.p2))
            }
        }
    }

    pub fn point_at_time(&self, t: f64) -> ParameterPoint {
        self.point_at(self.phi_at_time(t))
    }

    /// Path derivative `dp/dφ` at angle `phi`.
    pub fn velocity_at(&self, phi: f64) -> [f64; 2] {
        match &self.shape {
            LoopShape::Circle {
                center,
                radius,
                mode,
                ..
            } => {
                let r = *radius;
                match mode {
                    RadiusMode::Relative => {
                        [-center.p1 * r * phi.sin(), center.p2 * r * phi.cos()]
                    }
                    RadiusMode::Absolute => [-r * phi.sin(), r * phi.cos()],
                }
            }
            LoopShape::Polygon { vertices } => {
                let v = vertices.len();
                let u = (phi / TAU).rem_euclid(1.0) * v as f64;
                let e = (u as usize).min(v - 1);
                let a = vertices[e];
                let b = vertices[(e + 1) % v];
                let scale = v as f64 / TAU;
                [(b.p1 - a.p1) * scale, (b.p2 - a.p2) * scale]
            }
        }
    }

    /// Path velocity `dp/dt` at time `t`.
    pub fn velocity_at_time(&self, t: f64) -> [f64; 2] {
        let dphi_dt = self.direction as f64 * TAU / self.traversal_time;
        let v = self.velocity_at(self.phi_at_time(t));
        [v[0] * dphi_dt, v[1] * dphi_dt]
    }

    /// Angle of discretization node `k`, folded to one circuit so repeated
    /// turns revisit bit-identical points.
    fn node_phi_folded(&self, k: usize) -> f64 {
        let k_mod = k % self.n_steps;
        self.direction as f64 * TAU * k_mod as f64 / self.n_steps as f64
    }

    /// `n_steps·turns + 1` samples; the first and last point coincide
    /// bit-exactly.
    pub fn discretize(&self) -> Vec<LoopSample> {
        let m = self.total_steps();
        (0..=m)
            .map(|k| {
                let t = self.traversal_time * k as f64 / self.n_steps as f64;
                let phi = self.direction as f64 * TAU * k as f64 / self.n_steps as f64;
                LoopSample {
                    step: k,
                    t,
                    phi,
                    point: self.point_at(self.node_phi_folded(k)),
                }
            })
            .collect()
    }
}

/// Winding number of the discretized loop around `q` by angle summation.
///
/// Returns `None` if a discretization node coincides with `q`.
pub fn winding_number(lp: &ParameterLoop, q: ParameterPoint) -> Option<i32> {
    let samples = lp.discretize();
    let mut total = 0.0_f64;
    for w in samples.windows(2) {
        let (ax, ay) = (w[0].point.p1 - q.p1, w[0].point.p2 - q.p2);
        let (bx, by) = (w[1].point.p1 - q.p1, w[1].point.p2 - q.p2);
        if (ax == 0.0 && ay == 0.0) || (bx == 0.0 && by == 0.0) {
            return None;
        }
        let cross = ax * by - ay * bx;
        let dot = ax * bx + ay * by;
        total += cross.atan2(dot);
    }
    Some((total / TAU).round() as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn loop_point_examples() {
        // relative circle at the first tabulated EP geometry
        let lp = ParameterLoop::relative_circle((0.005388, 0.0002619), 1e-2, 1.0);
        let p0 = lp.point_at(0.0);
        assert!((p0.p1 - 0.005388 * 1.01).abs() < 1e-18);
        assert!((p0.p2 - 0.0002619).abs() < 1e-18);
        let p90 = lp.point_at(std::f64::consts::FRAC_PI_2);
        assert!((p90.p1 - 0.005388 * (1.0 + 1e-2 * (std::f64::consts::FRAC_PI_2).cos())).abs() < 1e-18);
        assert!((p90.p2 - 0.0002619 * 1.01).abs() < 1e-18);

        // shifted circle at φ=π: p1 = c1(1 + δ(s-1)), p2 = c2·(1+δ·sin π)
        let lp = ParameterLoop::relative_circle((0.005388, 0.0002619), 1e-2, 1.0).with_shift(1.1);
        let p = lp.point_at(std::f64::consts::PI);
        assert!((p.p1 - 0.005388 * (1.0 + 1e-2 * (1.1 + std::f64::consts::PI.cos()))).abs() < 1e-18);
    }

    #[test]
    fn discretize_small_grid() {
        let lp = ParameterLoop::circle((0.0, 1.0), 0.1, 2.0).with_steps(8);
        let samples = lp.discretize();
        assert_eq!(samples.len(), 9);
        assert_eq!(samples[0].point, samples[8].point);
        assert!((samples[2].phi - TAU / 4.0).abs() < 1e-15);
        assert!((samples[8].t - 2.0).abs() < 1e-15);
    }

    #[test]
    fn three_turns_close_after_three_circuits() {
        let lp = ParameterLoop::circle((0.0, 0.0), 0.5, 3.0)
            .with_steps(16)
            .with_turns(3);
        let samples = lp.discretize();
        assert_eq!(samples.len(), 49);
        assert_eq!(samples[0].point, samples[48].point);
        assert_eq!(samples[16].point, samples[0].point);
        assert!((samples[48].t - 9.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_direction_reverses_points() {
        let fw = ParameterLoop::circle((0.2, 0.4), 0.3, 1.0).with_steps(16);
        let bw = fw.clone().with_direction(-1);
        let pf = fw.discretize();
        let pb = bw.discretize();
        for k in 0..=16 {
            let a = pf[k].point;
            let b = pb[16 - k].point;
            assert!((a.p1 - b.p1).abs() < 1e-15 && (a.p2 - b.p2).abs() < 1e-15);
        }
    }

    #[test]
    fn refinement_keeps_shared_angles_identical() {
        let lp = ParameterLoop::circle((0.0, 1.0), 0.1, 1.0).with_steps(64);
        let lp2 = lp.clone().with_steps(128);
        let a = lp.discretize();
        let b = lp2.discretize();
        for k in 0..=64 {
            assert_eq!(a[k].point, b[2 * k].point, "node {k} must be bit-identical");
        }
    }

    #[test]
    fn winding_numbers() {
        let lp = ParameterLoop::circle((0.0, 1.0), 0.1, 1.0).with_steps(64);
        assert_eq!(winding_number(&lp, ParameterPoint::new(0.0, 1.0)), Some(1));
        let shifted = ParameterLoop::circle((0.5, 1.0), 0.1, 1.0).with_steps(64);
        assert_eq!(
            winding_number(&shifted, ParameterPoint::new(0.0, 1.0)),
            Some(0)
        );
        let cw = lp.clone().with_direction(-1);
        assert_eq!(winding_number(&cw, ParameterPoint::new(0.0, 1.0)), Some(-1));
        let three = lp.with_turns(3);
        assert_eq!(
            winding_number(&three, ParameterPoint::new(0.0, 1.0)),
            Some(3)
        );
    }

    #[test]
    fn validation_catches_degenerate_relative_center() {
        let lp = ParameterLoop::relative_circle((0.0, 1.0), 0.1, 1.0);
        assert_eq!(
            lp.validate().unwrap_err(),
            LoopError::RelativeDegenerate(0.0, 1.0)
        );
        assert!(ParameterLoop::circle((0.0, 1.0), 0.1, 1.0).validate().is_ok());
    }

    #[test]
    fn polygon_closes_and_interpolates() {
        let lp = ParameterLoop::polygon(
            vec![
                ParameterPoint::new(0.0, 0.0),
                ParameterPoint::new(1.0, 0.0),
                ParameterPoint::new(1.0, 1.0),
                ParameterPoint::new(0.0, 1.0),
            ],
            1.0,
        )
        .with_steps(8);
        let s = lp.discretize();
        assert_eq!(s[0].point, s[8].point);
        // halfway along the first edge
        assert_eq!(s[1].point, ParameterPoint::new(0.5, 0.0));
        assert_eq!(winding_number(&lp, ParameterPoint::new(0.5, 0.5)), Some(1));
        assert_eq!(winding_number(&lp, ParameterPoint::new(1.5, 0.5)), Some(0));
    }

    proptest! {
        #[test]
        fn closure_holds_for_random_circles(
            c1 in -2.0_f64..2.0, c2 in -2.0_f64..2.0,
            r in 1e-3_f64..1.0, steps in 8_usize..300, turns in 1_u32..4
        ) {
            let lp = ParameterLoop::circle((c1, c2), r, 1.0).with_steps(steps).with_turns(turns);
            let samples = lp.discretize();
            let first = samples.first().unwrap().point;
            let last = samples.last().unwrap().point;
            prop_assert_eq!(first, last);
        }
    }
}

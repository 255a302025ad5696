//! Reference gaits as per-phase Bézier polynomials over a normalized phase
//! variable, plus the template generator that produces a periodic pronking
//! gait for a commanded speed.
//!
//! A gait entry holds one polynomial per joint for each of the two phases
//! (stance, flight). Entries for different speeds form a library; queries
//! between stored speeds blend coefficients of the two adjacent entries
//! convexly, and queries outside the stored range clamp to the nearest
//! entry.

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::model::{JointVec, Leg, RobotModel, N_JOINTS};

#[derive(Debug, Error, PartialEq)]
pub enum GaitError {
    #[error("sample and value counts differ ({samples} vs {values})")]
    SampleMismatch { samples: usize, values: usize },
    #[error("{samples} samples cannot determine {coeffs} polynomial coefficients")]
    FitUnderdetermined { samples: usize, coeffs: usize },
    #[error("fit requires samples at both phase endpoints")]
    MissingEndpoints,
    #[error("least-squares system is rank deficient")]
    RankDeficient,
    #[error("target at radius {radius:.4} outside reachable range [{lo:.4}, {hi:.4}]")]
    UnreachableTarget { radius: f64, lo: f64, hi: f64 },
    #[error("gait library needs at least one entry")]
    EmptyLibrary,
    #[error("entry speeds must be strictly increasing (violated near {speed})")]
    UnsortedSpeeds { speed: f64 },
    #[error("invalid gait template: {0}")]
    InvalidTemplate(String),
    #[error("phase curves must have degree {expected}, found {found}")]
    DegreeMismatch { expected: usize, found: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Bernstein basis polynomial `C(n,i)·sⁱ·(1−s)^{n−i}`.
pub fn bernstein(degree: usize, i: usize, s: f64) -> f64 {
    let mut binom = 1.0f64;
    for k in 0..i {
        binom *= (degree - k) as f64 / (k + 1) as f64;
    }
    binom * s.powi(i as i32) * (1.0 - s).powi((degree - i) as i32)
}

/// Evaluate a Bézier polynomial by De Casteljau recursion; exact at the
/// endpoints and convex-hull bounded everywhere.
pub fn bezier_eval(coeffs: &[f64], s: f64) -> f64 {
    debug_assert!(!coeffs.is_empty());
    let mut tmp = coeffs.to_vec();
    for level in (1..tmp.len()).rev() {
        for i in 0..level {
            tmp[i] = (1.0 - s) * tmp[i] + s * tmp[i + 1];
        }
    }
    tmp[0]
}

/// Derivative with respect to the phase variable `s`.
pub fn bezier_derivative(coeffs: &[f64], s: f64) -> f64 {
    let n = coeffs.len() - 1;
    if n == 0 {
        return 0.0;
    }
    let diffs: Vec<f64> = coeffs.windows(2).map(|w| (w[1] - w[0]) * n as f64).collect();
    bezier_eval(&diffs, s)
}

/// Least-squares Bézier fit of `(s, value)` samples.
pub fn fit_bezier(s: &[f64], values: &[f64], degree: usize) -> Result<Vec<f64>, GaitError> {
    if s.len() != values.len() {
        return Err(GaitError::SampleMismatch { samples: s.len(), values: values.len() });
    }
    if s.len() < degree + 1 {
        return Err(GaitError::FitUnderdetermined { samples: s.len(), coeffs: degree + 1 });
    }
    let basis = DMatrix::from_fn(s.len(), degree + 1, |r, c| bernstein(degree, c, s[r]));
    let rhs = DVector::from_column_slice(values);
    let svd = basis.svd(true, true);
    let sol = svd.solve(&rhs, 1e-12).map_err(|_| GaitError::RankDeficient)?;
    if svd.singular_values.iter().any(|&sv| sv <= 1e-12) {
        return Err(GaitError::RankDeficient);
    }
    Ok(sol.iter().copied().collect())
}

/// Bézier fit with the first and last coefficients pinned to the sample
/// values at `s = 0` and `s = 1`, so fitted phases meet their neighbors
/// exactly. Requires the sample grid to start at 0 and end at 1.
pub fn fit_bezier_pinned(s: &[f64], values: &[f64], degree: usize) -> Result<Vec<f64>, GaitError> {
    if s.len() != values.len() {
        return Err(GaitError::SampleMismatch { samples: s.len(), values: values.len() });
    }
    if s.len() < degree + 1 {
        return Err(GaitError::FitUnderdetermined { samples: s.len(), coeffs: degree + 1 });
    }
    if degree < 2 {
        return Err(GaitError::FitUnderdetermined { samples: s.len(), coeffs: degree + 1 });
    }
    let first = *s.first().unwrap();
    let last = *s.last().unwrap();
    if first != 0.0 || last != 1.0 {
        return Err(GaitError::MissingEndpoints);
    }
    let c0 = values[0];
    let cn = *values.last().unwrap();
    let interior = degree - 1;
    let basis = DMatrix::from_fn(s.len(), interior, |r, c| bernstein(degree, c + 1, s[r]));
    let rhs = DVector::from_fn(s.len(), |r, _| {
        values[r] - c0 * bernstein(degree, 0, s[r]) - cn * bernstein(degree, degree, s[r])
    });
    let svd = basis.svd(true, true);
    let sol = svd.solve(&rhs, 1e-12).map_err(|_| GaitError::RankDeficient)?;
    if svd.singular_values.iter().any(|&sv| sv <= 1e-12) {
        return Err(GaitError::RankDeficient);
    }
    let mut coeffs = Vec::with_capacity(degree + 1);
    coeffs.push(c0);
    coeffs.extend(sol.iter().copied());
    coeffs.push(cn);
    Ok(coeffs)
}

/// Bézier fit pinning endpoint values and endpoint derivatives: the first
/// two and last two coefficients are fixed by the boundary data, the rest
/// fitted by least squares. Adjacent phases fitted this way join with both
/// matching positions and matching rates.
pub fn fit_bezier_hermite(
    s: &[f64],
    values: &[f64],
    degree: usize,
    deriv_start: f64,
    deriv_end: f64,
) -> Result<Vec<f64>, GaitError> {
    if s.len() != values.len() {
        return Err(GaitError::SampleMismatch { samples: s.len(), values: values.len() });
    }
    if s.len() < degree + 1 {
        return Err(GaitError::FitUnderdetermined { samples: s.len(), coeffs: degree + 1 });
    }
    if degree < 4 {
        return Err(GaitError::FitUnderdetermined { samples: s.len(), coeffs: degree + 1 });
    }
    if *s.first().unwrap() != 0.0 || *s.last().unwrap() != 1.0 {
        return Err(GaitError::MissingEndpoints);
    }
    let n = degree as f64;
    let c0 = values[0];
    let cn = *values.last().unwrap();
    let c1 = c0 + deriv_start / n;
    let cm = cn - deriv_end / n;

    let free = degree - 3;
    let basis = DMatrix::from_fn(s.len(), free, |r, c| bernstein(degree, c + 2, s[r]));
    let rhs = DVector::from_fn(s.len(), |r, _| {
        values[r]
            - c0 * bernstein(degree, 0, s[r])
            - c1 * bernstein(degree, 1, s[r])
            - cm * bernstein(degree, degree - 1, s[r])
            - cn * bernstein(degree, degree, s[r])
    });
    let svd = basis.svd(true, true);
    let sol = svd.solve(&rhs, 1e-12).map_err(|_| GaitError::RankDeficient)?;
    if svd.singular_values.iter().any(|&sv| sv <= 1e-12) {
        return Err(GaitError::RankDeficient);
    }
    let mut coeffs = Vec::with_capacity(degree + 1);
    coeffs.push(c0);
    coeffs.push(c1);
    coeffs.extend(sol.iter().copied());
    coeffs.push(cm);
    coeffs.push(cn);
    Ok(coeffs)
}

/// Two-link inverse kinematics for a hip-relative foot target, on the
/// calf-folded-back branch (`q_calf ≤ 0`).
pub fn leg_ik(model: &RobotModel, target: Vector2<f64>) -> Result<(f64, f64), GaitError> {
    let (lt, lc) = (model.thigh.length, model.calf.length);
    let (lo, hi) = model.leg_reach();
    let r = target.norm();
    if r < lo - 1e-12 || r > hi + 1e-12 {
        return Err(GaitError::UnreachableTarget { radius: r, lo, hi });
    }
    let cos_calf = ((r * r - lt * lt - lc * lc) / (2.0 * lt * lc)).clamp(-1.0, 1.0);
    let q_calf = -cos_calf.acos();
    let gamma = target.x.atan2(-target.y);
    let q_thigh = gamma + (lc * (-q_calf).sin()).atan2(lt + lc * q_calf.cos());
    Ok((q_thigh, q_calf))
}

/// Hip-relative foot position from joint angles (forward counterpart of
/// [`leg_ik`]).
pub fn leg_fk(model: &RobotModel, q_thigh: f64, q_calf: f64) -> Vector2<f64> {
    let phi_tc = q_thigh + q_calf;
    Vector2::new(
        model.thigh.length * q_thigh.sin() + model.calf.length * phi_tc.sin(),
        -model.thigh.length * q_thigh.cos() - model.calf.length * phi_tc.cos(),
    )
}

/// Leg angle from vertical of the virtual hip-to-foot line; exact for equal
/// thigh and calf lengths.
pub fn leg_angle(q_thigh: f64, q_calf: f64) -> f64 {
    q_thigh + 0.5 * q_calf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaitPhase {
    Stance,
    Flight,
}

/// One phase of a gait: a fixed duration and a Bézier polynomial per joint
/// over normalized phase `s ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseCurve {
    duration: f64,
    joints: [Vec<f64>; N_JOINTS],
}

impl PhaseCurve {
    pub fn new(duration: f64, joints: [Vec<f64>; N_JOINTS]) -> Result<Self, GaitError> {
        if !(duration > 0.0) {
            return Err(GaitError::InvalidTemplate(format!(
                "phase duration must be positive, got {duration}"
            )));
        }
        let degree = joints[0].len().saturating_sub(1);
        for j in &joints {
            if j.len() != degree + 1 {
                return Err(GaitError::DegreeMismatch { expected: degree, found: j.len() - 1 });
            }
        }
        Ok(Self { duration, joints })
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn degree(&self) -> usize {
        self.joints[0].len() - 1
    }

    pub fn coefficients(&self, joint: usize) -> &[f64] {
        &self.joints[joint]
    }

    /// Joint positions at phase `s` (clamped to [0, 1]).
    pub fn position(&self, s: f64) -> JointVec {
        let s = s.clamp(0.0, 1.0);
        JointVec::from_fn(|j, _| bezier_eval(&self.joints[j], s))
    }

    /// Joint velocities at phase `s`, in rad/s of wall time.
    pub fn velocity(&self, s: f64) -> JointVec {
        let s = s.clamp(0.0, 1.0);
        JointVec::from_fn(|j, _| bezier_derivative(&self.joints[j], s) / self.duration)
    }
}

/// Periodic gait for one commanded speed.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitEntry {
    pub speed: f64,
    pub stance: PhaseCurve,
    pub flight: PhaseCurve,
}

impl GaitEntry {
    pub fn phase(&self, phase: GaitPhase) -> &PhaseCurve {
        match phase {
            GaitPhase::Stance => &self.stance,
            GaitPhase::Flight => &self.flight,
        }
    }

    pub fn period(&self) -> f64 {
        self.stance.duration() + self.flight.duration()
    }
}

/// Result of a library query; `clamped` marks speeds outside the stored
/// range, which snap to the nearest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolatedGait {
    pub entry: GaitEntry,
    pub clamped: bool,
}

/// Gait entries for a set of speeds, sorted strictly ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitLibrary {
    entries: Vec<GaitEntry>,
}

impl GaitLibrary {
    pub fn new(entries: Vec<GaitEntry>) -> Result<Self, GaitError> {
        if entries.is_empty() {
            return Err(GaitError::EmptyLibrary);
        }
        for pair in entries.windows(2) {
            if pair[1].speed <= pair[0].speed {
                return Err(GaitError::UnsortedSpeeds { speed: pair[1].speed });
            }
        }
        let degree = entries[0].stance.degree();
        for e in &entries {
            for curve in [&e.stance, &e.flight] {
                if curve.degree() != degree {
                    return Err(GaitError::DegreeMismatch {
                        expected: degree,
                        found: curve.degree(),
                    });
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[GaitEntry] {
        &self.entries
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.speed).collect()
    }

    pub fn speed_range(&self) -> (f64, f64) {
        (self.entries[0].speed, self.entries[self.entries.len() - 1].speed)
    }

    /// Entry stored for exactly this speed, if any.
    pub fn entry_at(&self, speed: f64) -> Option<&GaitEntry> {
        self.entries.iter().find(|e| e.speed == speed)
    }

    /// Reference gait for an arbitrary speed: stored entries are returned
    /// as-is, speeds between entries blend the two neighbors convexly, and
    /// speeds outside the range clamp to the boundary entry.
    pub fn interpolate(&self, speed: f64) -> InterpolatedGait {
        let (lo, hi) = self.speed_range();
        if speed <= lo {
            return InterpolatedGait {
                entry: self.entries[0].clone(),
                clamped: speed < lo,
            };
        }
        if speed >= hi {
            return InterpolatedGait {
                entry: self.entries[self.entries.len() - 1].clone(),
                clamped: speed > hi,
            };
        }
        let idx = self
            .entries
            .windows(2)
            .position(|w| speed >= w[0].speed && speed <= w[1].speed)
            .expect("interior speed brackets an adjacent pair");
        let (a, b) = (&self.entries[idx], &self.entries[idx + 1]);
        if speed == a.speed {
            return InterpolatedGait { entry: a.clone(), clamped: false };
        }
        let w = (speed - a.speed) / (b.speed - a.speed);
        let blend_phase = |pa: &PhaseCurve, pb: &PhaseCurve| {
            let joints = std::array::from_fn(|j| {
                pa.joints[j]
                    .iter()
                    .zip(&pb.joints[j])
                    .map(|(ca, cb)| (1.0 - w) * ca + w * cb)
                    .collect()
            });
            PhaseCurve {
                duration: (1.0 - w) * pa.duration + w * pb.duration,
                joints,
            }
        };
        InterpolatedGait {
            entry: GaitEntry {
                speed,
                stance: blend_phase(&a.stance, &b.stance),
                flight: blend_phase(&a.flight, &b.flight),
            },
            clamped: false,
        }
    }

    /// Serialize to a line-oriented text form with 17 fractional digits,
    /// enough for bit-exact round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("gait-library format 1\n");
        out.push_str(&format!("entries {}\n", self.entries.len()));
        for e in &self.entries {
            out.push_str(&format!("speed {:.17e}\n", e.speed));
            for (name, curve) in [("stance", &e.stance), ("flight", &e.flight)] {
                out.push_str(&format!("{name} duration {:.17e}\n", curve.duration));
                for j in 0..N_JOINTS {
                    out.push_str("joint");
                    for c in &curve.joints[j] {
                        out.push_str(&format!(" {c:.17e}"));
                    }
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, GaitError> {
        let mut lines = text.lines().enumerate();
        let mut next_line = |expect: &str| -> Result<(usize, String), GaitError> {
            lines
                .next()
                .map(|(i, l)| (i + 1, l.to_string()))
                .ok_or(GaitError::Parse { line: 0, message: format!("unexpected end, expected {expect}") })
        };

        let (ln, header) = next_line("header")?;
        if header.trim() != "gait-library format 1" {
            return Err(GaitError::Parse { line: ln, message: format!("bad header {header:?}") });
        }
        let (ln, count_line) = next_line("entry count")?;
        let count: usize = parse_field(&count_line, "entries", ln)?;

        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, speed_line) = next_line("speed")?;
            let speed: f64 = parse_field(&speed_line, "speed", ln)?;
            let mut phases = Vec::with_capacity(2);
            for name in ["stance", "flight"] {
                let (ln, dur_line) = next_line("phase duration")?;
                let tokens: Vec<&str> = dur_line.split_whitespace().collect();
                if tokens.len() != 3 || tokens[0] != name || tokens[1] != "duration" {
                    return Err(GaitError::Parse {
                        line: ln,
                        message: format!("expected '{name} duration <value>', got {dur_line:?}"),
                    });
                }
                let duration: f64 = tokens[2].parse().map_err(|_| GaitError::Parse {
                    line: ln,
                    message: format!("bad duration {:?}", tokens[2]),
                })?;
                let mut joints: [Vec<f64>; N_JOINTS] = Default::default();
                for joint in joints.iter_mut() {
                    let (ln, row) = next_line("joint row")?;
                    let mut toks = row.split_whitespace();
                    if toks.next() != Some("joint") {
                        return Err(GaitError::Parse {
                            line: ln,
                            message: format!("expected joint row, got {row:?}"),
                        });
                    }
                    for tok in toks {
                        let v: f64 = tok.parse().map_err(|_| GaitError::Parse {
                            line: ln,
                            message: format!("bad coefficient {tok:?}"),
                        })?;
                        joint.push(v);
                    }
                    if joint.is_empty() {
                        return Err(GaitError::Parse {
                            line: ln,
                            message: "joint row has no coefficients".into(),
                        });
                    }
                }
                let curve = PhaseCurve::new(duration, joints)
                    .map_err(|e| GaitError::Parse { line: ln, message: e.to_string() })?;
                phases.push(curve);
            }
            let flight = phases.pop().unwrap();
            let stance = phases.pop().unwrap();
            entries.push(GaitEntry { speed, stance, flight });
        }
        if let Some((i, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(GaitError::Parse {
                line: i + 1,
                message: format!("unexpected trailing content {extra:?}"),
            });
        }
        GaitLibrary::new(entries)
    }
}

fn parse_field<T: std::str::FromStr>(line: &str, key: &str, ln: usize) -> Result<T, GaitError> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some(key) {
        return Err(GaitError::Parse { line: ln, message: format!("expected '{key} <value>', got {line:?}") });
    }
    let value = toks.next().ok_or(GaitError::Parse {
        line: ln,
        message: format!("missing value for {key}"),
    })?;
    if toks.next().is_some() {
        return Err(GaitError::Parse { line: ln, message: format!("trailing tokens after {key}") });
    }
    value.parse().map_err(|_| GaitError::Parse {
        line: ln,
        message: format!("bad value {value:?} for {key}"),
    })
}

/// Parameters of the periodic pronking template.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitTemplate {
    /// Full stride period in seconds.
    pub period: f64,
    /// Fraction of the period spent in stance.
    pub duty_factor: f64,
    /// Peak base height at the flight apex, in meters.
    pub apex_height: f64,
    /// Extra foot lift added mid-flight, in meters.
    pub ground_clearance: f64,
    /// Fraction of the stride length covered by the stance sweep; the
    /// remainder is assigned to base travel during flight. Values above 1
    /// model a base that drifts backward while airborne, which is what a
    /// robot with legs this heavy actually does: swinging the legs forward
    /// for the next touchdown recoils the torso.
    pub stance_transport_share: f64,
    /// Samples per phase fed to the polynomial fit.
    pub samples_per_phase: usize,
    /// Bézier degree of the fitted phases.
    pub degree: usize,
}

impl Default for GaitTemplate {
    fn default() -> Self {
        Self {
            period: 0.4,
            duty_factor: 0.5,
            apex_height: 0.34,
            ground_clearance: 0.07,
            stance_transport_share: 1.0,
            samples_per_phase: 25,
            degree: 8,
        }
    }
}

impl GaitTemplate {
    pub fn validate(&self) -> Result<(), GaitError> {
        let bad = |msg: String| Err(GaitError::InvalidTemplate(msg));
        if !(self.period > 0.0) {
            return bad(format!("period must be positive, got {}", self.period));
        }
        if !(self.duty_factor > 0.0 && self.duty_factor < 1.0) {
            return bad(format!("duty factor must lie in (0, 1), got {}", self.duty_factor));
        }
        if !(self.apex_height > 0.0) {
            return bad(format!("apex height must be positive, got {}", self.apex_height));
        }
        if self.ground_clearance < 0.0 {
            return bad(format!("ground clearance must be non-negative, got {}", self.ground_clearance));
        }
        if !(self.stance_transport_share > 0.0 && self.stance_transport_share <= 2.0) {
            return bad(format!(
                "stance transport share must lie in (0, 2], got {}",
                self.stance_transport_share
            ));
        }
        if self.samples_per_phase < self.degree + 1 {
            return bad(format!(
                "{} samples per phase cannot fit degree {}",
                self.samples_per_phase, self.degree
            ));
        }
        if self.degree < 2 {
            return bad(format!("degree must be at least 2, got {}", self.degree));
        }
        Ok(())
    }

    pub fn stance_duration(&self) -> f64 {
        self.duty_factor * self.period
    }

    pub fn flight_duration(&self) -> f64 {
        (1.0 - self.duty_factor) * self.period
    }

    /// Vertical liftoff speed required for a ballistic flight phase.
    pub fn liftoff_speed(&self, gravity: f64) -> f64 {
        gravity * self.flight_duration() / 2.0
    }

    /// Base height at touchdown and liftoff.
    pub fn touchdown_height(&self, gravity: f64) -> f64 {
        let tf = self.flight_duration();
        self.apex_height - gravity * tf * tf / 8.0
    }

    /// Base height at phase `s` of stance: a half-sine dip whose boundary
    /// rates match the ballistic arc.
    pub fn stance_base_height(&self, gravity: f64, s: f64) -> f64 {
        let dip = self.liftoff_speed(gravity) * self.stance_duration() / std::f64::consts::PI;
        self.touchdown_height(gravity) - dip * (std::f64::consts::PI * s).sin()
    }

    /// Base advance during stance, in meters.
    pub fn stance_travel(&self, speed: f64) -> f64 {
        self.stance_transport_share * speed * self.period
    }

    /// Base velocity while airborne: whatever share of the stride length
    /// stance does not cover, spread over the flight duration.
    pub fn flight_base_speed(&self, speed: f64) -> f64 {
        (1.0 - self.stance_transport_share) * speed * self.period / self.flight_duration()
    }

    /// Base advance between touchdown and phase `s` of stance: mean rate
    /// `stance_travel / ts` with a raised-cosine profile whose endpoint
    /// rates equal the flight base velocity, keeping the torso path C1 at
    /// both contact events.
    fn stance_base_advance(&self, speed: f64, s: f64) -> f64 {
        let ts = self.stance_duration();
        let end = self.flight_base_speed(speed) * ts;
        let swing = self.stance_travel(speed) - end;
        end * s + swing * (s - (2.0 * std::f64::consts::PI * s).sin() / (2.0 * std::f64::consts::PI))
    }

    /// Phase derivative of [`Self::stance_base_advance`].
    fn stance_base_advance_rate(&self, speed: f64, s: f64) -> f64 {
        let ts = self.stance_duration();
        let end = self.flight_base_speed(speed) * ts;
        let swing = self.stance_travel(speed) - end;
        end + swing * (1.0 - (2.0 * std::f64::consts::PI * s).cos())
    }

    /// Hip-relative foot target at phase `s` of stance for speed `v`.
    fn stance_rel_target(&self, gravity: f64, speed: f64, s: f64) -> Vector2<f64> {
        let x = 0.5 * self.stance_travel(speed) - self.stance_base_advance(speed, s);
        Vector2::new(x, -self.stance_base_height(gravity, s))
    }

    /// Phase derivative of [`Self::stance_rel_target`].
    fn stance_rel_rate(&self, gravity: f64, speed: f64, s: f64) -> Vector2<f64> {
        let dip = self.liftoff_speed(gravity) * self.stance_duration() / std::f64::consts::PI;
        Vector2::new(
            -self.stance_base_advance_rate(speed, s),
            dip * std::f64::consts::PI * (std::f64::consts::PI * s).cos(),
        )
    }

    /// Hip-relative foot target at phase `s` of flight: a Hermite blend
    /// from the liftoff pose to the next touchdown pose whose endpoint
    /// rates match stance, plus a clearance bump that vanishes smoothly at
    /// both ends.
    fn flight_rel_target(&self, gravity: f64, speed: f64, s: f64) -> Vector2<f64> {
        let tf = self.flight_duration();
        let p0 = self.stance_rel_target(gravity, speed, 1.0);
        let p1 = self.stance_rel_target(gravity, speed, 0.0);
        let v_lo = self.liftoff_speed(gravity);
        let vx = self.flight_base_speed(speed);
        let m0 = Vector2::new(-vx, -v_lo) * tf;
        let m1 = Vector2::new(-vx, v_lo) * tf;

        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let mut p = h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1;
        p.y += self.ground_clearance * 16.0 * s2 * (1.0 - s) * (1.0 - s);
        p
    }

    /// Phase derivative of [`Self::flight_rel_target`] at the endpoints,
    /// where the clearance bump contributes nothing.
    fn flight_rel_rate_at_ends(&self, gravity: f64, speed: f64, end: bool) -> Vector2<f64> {
        let tf = self.flight_duration();
        let v_lo = self.liftoff_speed(gravity);
        let vx = self.flight_base_speed(speed);
        if end {
            Vector2::new(-vx, v_lo) * tf
        } else {
            Vector2::new(-vx, -v_lo) * tf
        }
    }
}

/// Generate the reference gait for one commanded speed by sampling the
/// template's hip-relative foot path, converting to joint angles, and
/// fitting endpoint-pinned Bézier polynomials per phase. Front and rear
/// legs move identically, as pronking demands.
pub fn generate_reference_gait(
    model: &RobotModel,
    template: &GaitTemplate,
    speed: f64,
) -> Result<GaitEntry, GaitError> {
    template.validate()?;
    let g = model.gravity;
    let n = template.samples_per_phase;
    let grid: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();

    // Map a hip-relative foot rate to joint rates through the 2x2 leg
    // Jacobian at the matching pose.
    let joint_rate = |qt: f64, qc: f64, rel_rate: Vector2<f64>| -> Result<Vector2<f64>, GaitError> {
        let (lt, lc) = (model.thigh.length, model.calf.length);
        let jac = nalgebra::Matrix2::new(
            lt * qt.cos() + lc * (qt + qc).cos(),
            lc * (qt + qc).cos(),
            lt * qt.sin() + lc * (qt + qc).sin(),
            lc * (qt + qc).sin(),
        );
        jac.lu().solve(&rel_rate).ok_or(GaitError::InvalidTemplate(
            "leg singular at a phase boundary".into(),
        ))
    };

    let fit_phase = |targets: &[Vector2<f64>],
                     rate_start: Vector2<f64>,
                     rate_end: Vector2<f64>,
                     duration: f64|
     -> Result<PhaseCurve, GaitError> {
        let mut thigh = Vec::with_capacity(n);
        let mut calf = Vec::with_capacity(n);
        for t in targets {
            let (qt, qc) = leg_ik(model, *t)?;
            thigh.push(qt);
            calf.push(qc);
        }
        let d0 = joint_rate(thigh[0], calf[0], rate_start)?;
        let d1 = joint_rate(thigh[n - 1], calf[n - 1], rate_end)?;
        let ct = fit_bezier_hermite(&grid, &thigh, template.degree, d0.x, d1.x)?;
        let cc = fit_bezier_hermite(&grid, &calf, template.degree, d0.y, d1.y)?;
        PhaseCurve::new(duration, [ct.clone(), cc.clone(), ct, cc])
    };

    let stance_targets: Vec<Vector2<f64>> =
        grid.iter().map(|&s| template.stance_rel_target(g, speed, s)).collect();
    let flight_targets: Vec<Vector2<f64>> =
        grid.iter().map(|&s| template.flight_rel_target(g, speed, s)).collect();

    let stance = fit_phase(
        &stance_targets,
        template.stance_rel_rate(g, speed, 0.0),
        template.stance_rel_rate(g, speed, 1.0),
        template.stance_duration(),
    )?;
    let flight = fit_phase(
        &flight_targets,
        template.flight_rel_rate_at_ends(g, speed, false),
        template.flight_rel_rate_at_ends(g, speed, true),
        template.flight_duration(),
    )?;

    Ok(GaitEntry { speed, stance, flight })
}

/// Generate a library entry per requested speed, sequentially.
pub fn generate_gait_library(
    model: &RobotModel,
    template: &GaitTemplate,
    speeds: &[f64],
) -> Result<GaitLibrary, GaitError> {
    let entries = speeds
        .iter()
        .map(|&v| generate_reference_gait(model, template, v))
        .collect::<Result<Vec<_>, _>>()?;
    GaitLibrary::new(entries)
}

/// Default commanded-speed grid: −0.5 to 0.8 m/s in 0.1 m/s steps.
pub fn default_speed_grid() -> Vec<f64> {
    (0..14).map(|i| -0.5 + 0.1 * i as f64).collect()
}

/// Weights of the quadratic gait cost: torque effort plus deviation from a
/// nominal posture.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitCostWeights {
    pub torque: JointVec,
    pub posture: JointVec,
    pub nominal_posture: JointVec,
}

impl Default for GaitCostWeights {
    fn default() -> Self {
        Self {
            torque: JointVec::repeat(1.0),
            posture: JointVec::zeros(),
            nominal_posture: JointVec::zeros(),
        }
    }
}

/// One quadrature sample of the gait cost integrand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSample {
    pub torque: JointVec,
    pub joints: JointVec,
}

/// Trapezoidal integral of `‖τ‖²_{Wτ} + ‖q − q_nom‖²_{Wq}` over uniformly
/// spaced samples `dt` apart. Diagnostic only; nothing in the control loop
/// consumes it.
pub fn evaluate_gait_cost(weights: &GaitCostWeights, samples: &[CostSample], dt: f64) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    let integrand = |s: &CostSample| -> f64 {
        let mut acc = 0.0;
        for j in 0..N_JOINTS {
            let dq = s.joints[j] - weights.nominal_posture[j];
            acc += weights.torque[j] * s.torque[j] * s.torque[j] + weights.posture[j] * dq * dq;
        }
        acc
    };
    let mut total = 0.0;
    for pair in samples.windows(2) {
        total += 0.5 * (integrand(&pair[0]) + integrand(&pair[1])) * dt;
    }
    total
}

/// Worst margins of a gait against the model's limits; negative margins are
/// violations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    /// Smallest distance from any sampled joint angle to its nearer limit.
    pub joint_margin: f64,
    /// Smallest distance from any sampled joint speed to the rate limit.
    pub velocity_margin: f64,
    /// Smallest distance from the hip-foot distance to the reachable
    /// annulus boundary.
    pub reach_margin: f64,
}

impl FeasibilityReport {
    pub fn ok(&self) -> bool {
        self.joint_margin >= 0.0 && self.velocity_margin >= 0.0 && self.reach_margin >= 0.0
    }
}

/// Sample both phases of a gait and report worst-case margins against joint
/// limits, velocity limits, and leg reach.
pub fn check_gait_constraints(model: &RobotModel, entry: &GaitEntry) -> FeasibilityReport {
    const SAMPLES: usize = 101;
    let mut joint_margin = f64::INFINITY;
    let mut velocity_margin = f64::INFINITY;
    let mut reach_margin = f64::INFINITY;
    let (reach_lo, reach_hi) = model.leg_reach();

    for phase in [GaitPhase::Stance, GaitPhase::Flight] {
        let curve = entry.phase(phase);
        for i in 0..SAMPLES {
            let s = i as f64 / (SAMPLES - 1) as f64;
            let q = curve.position(s);
            let qd = curve.velocity(s);
            for j in 0..N_JOINTS {
                joint_margin = joint_margin.min(q[j] - model.q_min[j]).min(model.q_max[j] - q[j]);
                velocity_margin = velocity_margin.min(model.qd_max[j] - qd[j].abs());
            }
            for leg in Leg::ALL {
                let rel = leg_fk(model, q[leg.joint_offset()], q[leg.joint_offset() + 1]);
                let r = rel.norm();
                reach_margin = reach_margin.min(r - reach_lo).min(reach_hi - r);
            }
        }
    }
    FeasibilityReport { joint_margin, velocity_margin, reach_margin }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> RobotModel {
        RobotModel::default_planar()
    }

    #[test]
    fn bernstein_partition_of_unity() {
        for &s in &[0.0, 0.13, 0.5, 0.77, 1.0] {
            let sum: f64 = (0..7).map(|i| bernstein(6, i, s)).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn bezier_eval_matches_bernstein_sum() {
        let coeffs = [0.3, -1.2, 0.8, 2.0, -0.5, 0.1, 1.4];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let s: f64 = rng.random_range(0.0..1.0);
            let direct: f64 =
                coeffs.iter().enumerate().map(|(i, c)| c * bernstein(6, i, s)).sum();
            assert_abs_diff_eq!(bezier_eval(&coeffs, s), direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn bezier_eval_exact_at_endpoints() {
        let coeffs = [0.3, -1.2, 0.8, 2.0, -0.5, 0.1, 1.4];
        assert_eq!(bezier_eval(&coeffs, 0.0), coeffs[0]);
        assert_eq!(bezier_eval(&coeffs, 1.0), coeffs[6]);
    }

    #[test]
    fn bezier_constant_coefficients_stay_constant() {
        let coeffs = [0.7; 7];
        for &s in &[0.0, 0.21, 0.68, 1.0] {
            assert_eq!(bezier_eval(&coeffs, s), 0.7);
            assert_abs_diff_eq!(bezier_derivative(&coeffs, s), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn bezier_derivative_matches_finite_difference() {
        let coeffs = [0.3, -1.2, 0.8, 2.0, -0.5, 0.1, 1.4];
        let h = 1e-6;
        for &s in &[0.1, 0.35, 0.5, 0.82, 0.9] {
            let fd = (bezier_eval(&coeffs, s + h) - bezier_eval(&coeffs, s - h)) / (2.0 * h);
            assert_abs_diff_eq!(bezier_derivative(&coeffs, s), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn fit_recovers_exact_polynomial() {
        let truth = [0.3, -1.2, 0.8, 2.0, -0.5, 0.1, 1.4];
        let grid: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let values: Vec<f64> = grid.iter().map(|&s| bezier_eval(&truth, s)).collect();
        let fitted = fit_bezier(&grid, &values, 6).unwrap();
        for (f, t) in fitted.iter().zip(&truth) {
            assert_abs_diff_eq!(f, t, epsilon = 1e-9);
        }
    }

    #[test]
    fn fit_of_sine_meets_residual_bound() {
        let grid: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let values: Vec<f64> =
            grid.iter().map(|&s| (std::f64::consts::PI * s).sin()).collect();
        let fitted = fit_bezier(&grid, &values, 6).unwrap();
        let mut sq = 0.0;
        let mut max: f64 = 0.0;
        for (&s, &v) in grid.iter().zip(&values) {
            let r = bezier_eval(&fitted, s) - v;
            sq += r * r;
            max = max.max(r.abs());
        }
        let rms = (sq / grid.len() as f64).sqrt();
        assert!(rms < 1e-5, "rms {rms}");
        assert!(max < 2e-5, "max {max}");
    }

    #[test]
    fn pinned_fit_hits_endpoints_exactly() {
        let grid: Vec<f64> = (0..21).map(|i| i as f64 / 20.0).collect();
        let values: Vec<f64> =
            grid.iter().map(|&s| (std::f64::consts::PI * s).sin() + 0.3 * s).collect();
        let fitted = fit_bezier_pinned(&grid, &values, 6).unwrap();
        assert_eq!(fitted[0], values[0]);
        assert_eq!(fitted[6], values[20]);
        assert_eq!(bezier_eval(&fitted, 0.0), values[0]);
        assert_eq!(bezier_eval(&fitted, 1.0), values[20]);
        for (&s, &v) in grid.iter().zip(&values) {
            assert_abs_diff_eq!(bezier_eval(&fitted, s), v, epsilon = 1e-3);
        }
    }

    #[test]
    fn fit_rejects_underdetermined_input() {
        let grid = [0.0, 0.5, 1.0];
        let values = [1.0, 2.0, 3.0];
        assert_eq!(
            fit_bezier(&grid, &values, 6).unwrap_err(),
            GaitError::FitUnderdetermined { samples: 3, coeffs: 7 }
        );
    }

    #[test]
    fn pinned_fit_requires_endpoint_samples() {
        let grid: Vec<f64> = (0..21).map(|i| 0.1 + 0.8 * i as f64 / 20.0).collect();
        let values = vec![0.0; 21];
        assert_eq!(fit_bezier_pinned(&grid, &values, 6).unwrap_err(), GaitError::MissingEndpoints);
    }

    #[test]
    fn ik_fk_round_trip() {
        let model = model();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..200 {
            let r = rng.random_range(0.05..0.395);
            let ang = rng.random_range(-1.2..1.2f64);
            let target = Vector2::new(r * ang.sin(), -r * ang.cos());
            let (qt, qc) = leg_ik(&model, target).unwrap();
            assert!(qc <= 0.0, "calf branch violated: {qc}");
            let back = leg_fk(&model, qt, qc);
            assert_abs_diff_eq!(back.x, target.x, epsilon = 1e-10);
            assert_abs_diff_eq!(back.y, target.y, epsilon = 1e-10);
        }
    }

    #[test]
    fn ik_rejects_unreachable_targets() {
        let model = model();
        assert!(matches!(
            leg_ik(&model, Vector2::new(0.0, -0.5)),
            Err(GaitError::UnreachableTarget { .. })
        ));
    }

    #[test]
    fn ik_straight_down_at_known_height() {
        let model = model();
        let (qt, qc) = leg_ik(&model, Vector2::new(0.0, -0.291)).unwrap();
        // Law of cosines for r = 0.291 with two 0.2 m links.
        let expect_calf = -(((0.291f64.powi(2) - 0.08) / 0.08).acos());
        assert_abs_diff_eq!(qc, expect_calf, epsilon = 1e-12);
        assert_abs_diff_eq!(leg_angle(qt, qc), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn leg_angle_is_exact_virtual_leg_direction() {
        let model = model();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let r = rng.random_range(0.05..0.395);
            let ang = rng.random_range(-1.2..1.2f64);
            let target = Vector2::new(r * ang.sin(), -r * ang.cos());
            let (qt, qc) = leg_ik(&model, target).unwrap();
            assert_abs_diff_eq!(leg_angle(qt, qc), ang, epsilon = 1e-10);
        }
    }

    #[test]
    fn template_ballistics_are_consistent() {
        let t = GaitTemplate::default();
        let g = 9.81;
        assert_abs_diff_eq!(t.stance_duration(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(t.flight_duration(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(t.liftoff_speed(g), 0.981, epsilon = 1e-12);
        assert_abs_diff_eq!(t.touchdown_height(g), 0.34 - 9.81 * 0.04 / 8.0, epsilon = 1e-12);
        // Stance height meets the ballistic arc at both ends.
        assert_abs_diff_eq!(t.stance_base_height(g, 0.0), t.touchdown_height(g), epsilon = 1e-15);
        assert_abs_diff_eq!(t.stance_base_height(g, 1.0), t.touchdown_height(g), epsilon = 1e-12);
    }

    #[test]
    fn generated_gait_phases_are_continuous() {
        let model = model();
        let template = GaitTemplate::default();
        for &v in &[-0.5, 0.0, 0.3, 0.8] {
            let entry = generate_reference_gait(&model, &template, v).unwrap();
            let lo_stance = entry.stance.position(1.0);
            let lo_flight = entry.flight.position(0.0);
            let td_flight = entry.flight.position(1.0);
            let td_stance = entry.stance.position(0.0);
            for j in 0..N_JOINTS {
                assert_eq!(lo_stance[j], lo_flight[j], "liftoff discontinuity at v={v}");
                assert_eq!(td_flight[j], td_stance[j], "touchdown discontinuity at v={v}");
            }
            let dv_lo = entry.stance.velocity(1.0) - entry.flight.velocity(0.0);
            let dv_td = entry.flight.velocity(1.0) - entry.stance.velocity(0.0);
            assert!(dv_lo.abs().max() < 1e-9, "liftoff rate jump {}", dv_lo.abs().max());
            assert!(dv_td.abs().max() < 1e-9, "touchdown rate jump {}", dv_td.abs().max());
        }
    }

    #[test]
    fn generated_gait_tracks_template_targets() {
        let model = model();
        let template = GaitTemplate::default();
        let entry = generate_reference_gait(&model, &template, 0.3).unwrap();
        for i in 0..=20 {
            let s = i as f64 / 20.0;
            let q = entry.stance.position(s);
            let rel = leg_fk(&model, q[0], q[1]);
            let target = template.stance_rel_target(model.gravity, 0.3, s);
            assert_abs_diff_eq!(rel.x, target.x, epsilon = 2e-4);
            assert_abs_diff_eq!(rel.y, target.y, epsilon = 2e-4);
            let qf = entry.flight.position(s);
            let relf = leg_fk(&model, qf[0], qf[1]);
            let targetf = template.flight_rel_target(model.gravity, 0.3, s);
            assert_abs_diff_eq!(relf.x, targetf.x, epsilon = 5e-4);
            assert_abs_diff_eq!(relf.y, targetf.y, epsilon = 5e-4);
        }
    }

    #[test]
    fn generated_gait_front_rear_identical() {
        let model = model();
        let entry = generate_reference_gait(&model, &GaitTemplate::default(), 0.4).unwrap();
        for curve in [&entry.stance, &entry.flight] {
            assert_eq!(curve.coefficients(0), curve.coefficients(2));
            assert_eq!(curve.coefficients(1), curve.coefficients(3));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let model = model();
        let template = GaitTemplate::default();
        let a = generate_reference_gait(&model, &template, 0.3).unwrap();
        let b = generate_reference_gait(&model, &template, 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn default_grid_gaits_all_feasible() {
        let model = model();
        let lib =
            generate_gait_library(&model, &GaitTemplate::default(), &default_speed_grid()).unwrap();
        assert_eq!(lib.entries().len(), 14);
        assert_abs_diff_eq!(lib.speed_range().0, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(lib.speed_range().1, 0.8, epsilon = 1e-12);
        for entry in lib.entries() {
            let report = check_gait_constraints(&model, entry);
            assert!(
                report.ok(),
                "infeasible gait at v={}: {report:?}",
                entry.speed
            );
        }
    }

    #[test]
    fn feasibility_flags_violations() {
        let mut model = model();
        let entry = generate_reference_gait(&model, &GaitTemplate::default(), 0.3).unwrap();
        model.qd_max = JointVec::repeat(0.01);
        let report = check_gait_constraints(&model, &entry);
        assert!(report.velocity_margin < 0.0);
        assert!(!report.ok());
    }

    #[test]
    fn interpolation_at_knot_returns_stored_entry() {
        let model = model();
        let lib =
            generate_gait_library(&model, &GaitTemplate::default(), &[0.0, 0.1, 0.2]).unwrap();
        for knot in lib.entries() {
            let q = lib.interpolate(knot.speed);
            assert!(!q.clamped);
            assert_eq!(&q.entry, knot);
        }
    }

    #[test]
    fn interpolation_midpoint_blends_coefficients() {
        let model = model();
        let lib = generate_gait_library(&model, &GaitTemplate::default(), &[0.2, 0.4]).unwrap();
        let mid = lib.interpolate(0.3);
        assert!(!mid.clamped);
        let (a, b) = (&lib.entries()[0], &lib.entries()[1]);
        for j in 0..N_JOINTS {
            for (i, c) in mid.entry.stance.coefficients(j).iter().enumerate() {
                let expect = 0.5 * (a.stance.coefficients(j)[i] + b.stance.coefficients(j)[i]);
                assert_abs_diff_eq!(c, &expect, epsilon = 1e-15);
            }
        }
        // Linearity carries through evaluation.
        let qa = a.stance.position(0.37);
        let qb = b.stance.position(0.37);
        let qm = mid.entry.stance.position(0.37);
        for j in 0..N_JOINTS {
            assert_abs_diff_eq!(qm[j], 0.5 * (qa[j] + qb[j]), epsilon = 1e-12);
        }
    }

    #[test]
    fn interpolation_clamps_out_of_range() {
        let model = model();
        let lib = generate_gait_library(&model, &GaitTemplate::default(), &[0.0, 0.3]).unwrap();
        let below = lib.interpolate(-1.0);
        assert!(below.clamped);
        assert_eq!(below.entry, lib.entries()[0]);
        let above = lib.interpolate(2.0);
        assert!(above.clamped);
        assert_eq!(above.entry, lib.entries()[1]);
    }

    #[test]
    fn library_rejects_unsorted_speeds() {
        let model = model();
        let template = GaitTemplate::default();
        let e1 = generate_reference_gait(&model, &template, 0.3).unwrap();
        let e2 = generate_reference_gait(&model, &template, 0.1).unwrap();
        assert!(matches!(
            GaitLibrary::new(vec![e1, e2]),
            Err(GaitError::UnsortedSpeeds { .. })
        ));
    }

    #[test]
    fn serialization_round_trips_bit_exact() {
        let model = model();
        let lib =
            generate_gait_library(&model, &GaitTemplate::default(), &[-0.2, 0.0, 0.55]).unwrap();
        let text = lib.to_text();
        let back = GaitLibrary::from_text(&text).unwrap();
        assert_eq!(lib.entries().len(), back.entries().len());
        for (a, b) in lib.entries().iter().zip(back.entries()) {
            assert_eq!(a.speed.to_bits(), b.speed.to_bits());
            for (pa, pb) in [(&a.stance, &b.stance), (&a.flight, &b.flight)] {
                assert_eq!(pa.duration().to_bits(), pb.duration().to_bits());
                for j in 0..N_JOINTS {
                    let ca = pa.coefficients(j);
                    let cb = pb.coefficients(j);
                    assert_eq!(ca.len(), cb.len());
                    for (x, y) in ca.iter().zip(cb) {
                        assert_eq!(x.to_bits(), y.to_bits(), "joint {j} coefficient differs");
                    }
                }
            }
        }
        // A second serialize produces identical text.
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn parser_reports_line_numbers() {
        let model = model();
        let lib = generate_gait_library(&model, &GaitTemplate::default(), &[0.3]).unwrap();
        let mut text = lib.to_text();
        text = text.replace("stance duration", "stance dur");
        match GaitLibrary::from_text(&text) {
            Err(GaitError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            GaitLibrary::from_text("gait-library format 2\n"),
            Err(GaitError::Parse { line: 1, .. })
        ));
        let truncated: String = lib.to_text().lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(matches!(GaitLibrary::from_text(&truncated), Err(GaitError::Parse { .. })));
    }

    #[test]
    fn cost_of_constant_torque_is_closed_form() {
        let weights = GaitCostWeights::default();
        let n = 41;
        let dt = 0.4 / (n as f64 - 1.0);
        let samples: Vec<CostSample> = (0..n)
            .map(|_| CostSample { torque: JointVec::repeat(1.0), joints: JointVec::zeros() })
            .collect();
        // Four joints at unit torque for 0.4 s.
        assert_abs_diff_eq!(evaluate_gait_cost(&weights, &samples, dt), 1.6, epsilon = 1e-12);
    }

    #[test]
    fn cost_posture_term() {
        let weights = GaitCostWeights {
            torque: JointVec::zeros(),
            posture: JointVec::repeat(1.0),
            nominal_posture: JointVec::repeat(0.5),
        };
        let n = 11;
        let dt = 0.1;
        let samples: Vec<CostSample> = (0..n)
            .map(|_| CostSample { torque: JointVec::zeros(), joints: JointVec::repeat(1.5) })
            .collect();
        assert_abs_diff_eq!(evaluate_gait_cost(&weights, &samples, dt), 4.0, epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Convex-hull property: a Bézier value never leaves the range of
        /// its coefficients.
        #[test]
        fn bezier_stays_in_coefficient_hull(
            coeffs in proptest::collection::vec(-10.0f64..10.0, 2..=9),
            s in 0.0f64..=1.0,
        ) {
            let v = bezier_eval(&coeffs, s);
            let lo = coeffs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = coeffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        /// Interpolated coefficients stay between the bracketing knots'.
        #[test]
        fn interpolation_is_convex_in_speed(w in 0.0f64..=1.0) {
            let model = RobotModel::default_planar();
            let lib = generate_gait_library(
                &model, &GaitTemplate::default(), &[0.1, 0.5],
            ).unwrap();
            let v = 0.1 + w * 0.4;
            let q = lib.interpolate(v);
            prop_assert!(!q.clamped);
            let (a, b) = (&lib.entries()[0], &lib.entries()[1]);
            for j in 0..N_JOINTS {
                for (i, c) in q.entry.stance.coefficients(j).iter().enumerate() {
                    let ca = a.stance.coefficients(j)[i];
                    let cb = b.stance.coefficients(j)[i];
                    let lo = ca.min(cb) - 1e-12;
                    let hi = ca.max(cb) + 1e-12;
                    prop_assert!(*c >= lo && *c <= hi);
                }
            }
        }

        /// Speed queries never fail and always produce the requested speed
        /// inside the range.
        #[test]
        fn interpolation_total_over_speed(v in -2.0f64..2.0) {
            let model = RobotModel::default_planar();
            let lib = generate_gait_library(
                &model, &GaitTemplate::default(), &[-0.5, 0.0, 0.8],
            ).unwrap();
            let q = lib.interpolate(v);
            if (-0.5..=0.8).contains(&v) {
                prop_assert!(!q.clamped);
                prop_assert!((q.entry.speed - v).abs() < 1e-12);
            } else {
                prop_assert!(q.clamped);
            }
        }
    }
}

//! Iterative learning control over strides, the PD feedback law, the
//! stride-indexed feedforward buffer, and the torque library that stores
//! converged profiles per speed.
//!
//! Each stance tick is controlled by `τ = τ_fb + τ_ff(s)` where `τ_fb` is a
//! PD law on the joint tracking error and `τ_ff` is looked up from the
//! current iteration buffer. At liftoff the buffer absorbs the stride's
//! applied feedback plus a phase-led error correction:
//!
//! ```text
//! τ_ff[k+1](s) = τ_ff[k](s) + Q( fb(s) + Kp·e(s+δs) + Kd·ė(s+δs) )
//! ```
//!
//! with `Q` a zero-phase low-pass over the stride grid. Filtering the
//! increment rather than the accumulated profile keeps converged profiles
//! exact fixed points: zero error contributes an exactly zero increment.

use nalgebra::Vector2;
use thiserror::Error;

use crate::dynamics::{center_of_mass, foot_position};
use crate::filters::{FilterError, FilterPreset, IirCoefficients, VelocityEstimator};
use crate::gait::{GaitEntry, GaitLibrary, GaitPhase, InterpolatedGait};
use crate::model::{GeneralizedState, JointVec, Leg, RobotModel, StateVec, N_BASE, N_JOINTS};

#[derive(Debug, Error, PartialEq)]
pub enum IlcError {
    #[error("profile needs at least two nodes, got {0}")]
    ProfileTooShort(usize),
    #[error("profiles to average must share a grid ({0} vs {1} nodes)")]
    ProfileLengthMismatch(usize, usize),
    #[error("cannot average zero profiles")]
    NothingToAverage,
    #[error("torque library has no entries")]
    EmptyLibrary,
    #[error("replay mode requires a torque library")]
    MissingTorqueLibrary,
    #[error("update period must be at least one stride")]
    ZeroUpdatePeriod,
    #[error("update rate must lie in (0, 1], got {0}")]
    InvalidUpdateRate(f64),
    #[error("update step bound must be positive, got {0}")]
    InvalidUpdateStep(f64),
    #[error("learning window must satisfy 0 <= start < end <= 1, got ({0}, {1})")]
    InvalidUpdateWindow(f64, f64),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Feedback and learning gains, per joint in the order
/// (front thigh, front calf, rear thigh, rear calf).
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGains {
    pub kp_feedback: JointVec,
    pub kd_feedback: JointVec,
    pub kp_learning: JointVec,
    pub kd_learning: JointVec,
    /// Phase lead `δs` applied to the error signals in the learning update.
    pub phase_lead: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        let kp = JointVec::new(60.0, 90.0, 60.0, 90.0);
        let kd = JointVec::new(6.0, 2.0, 6.0, 2.0);
        Self {
            kp_feedback: kp,
            kd_feedback: kd,
            kp_learning: kp,
            kd_learning: kd,
            phase_lead: 0.05,
        }
    }
}

/// Joint tracking error `e = q_d − q` and its rate.
pub fn tracking_error(
    reference: &JointVec,
    reference_rate: &JointVec,
    joints: &JointVec,
    joint_rates: &JointVec,
) -> (JointVec, JointVec) {
    (reference - joints, reference_rate - joint_rates)
}

/// PD feedback torque `Kp∘e + Kd∘ė`.
pub fn feedback_torque(gains: &ControllerGains, error: &JointVec, error_rate: &JointVec) -> JointVec {
    JointVec::from_fn(|i, _| {
        gains.kp_feedback[i] * error[i] + gains.kd_feedback[i] * error_rate[i]
    })
}

/// One recorded stance tick, the raw material of a learning update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StanceSample {
    pub s: f64,
    pub error: JointVec,
    pub error_rate: JointVec,
    /// Applied torque minus the commanded feedforward: the share of the
    /// plant input attributable to feedback, after saturation.
    pub feedback_applied: JointVec,
}

/// Outcome of one learning update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrideUpdateResult {
    /// Sup-norm change of the feedforward profile.
    pub ff_delta: f64,
    /// True when the stride had too few ticks for the smoothing filter and
    /// the raw increment was applied instead.
    pub filter_skipped: bool,
}

/// Stride-indexed feedforward profile on a uniform phase grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationBuffer {
    tau: Vec<JointVec>,
    iteration: u32,
}

impl IterationBuffer {
    pub fn new(nodes: usize) -> Result<Self, IlcError> {
        if nodes < 2 {
            return Err(IlcError::ProfileTooShort(nodes));
        }
        Ok(Self { tau: vec![JointVec::zeros(); nodes], iteration: 0 })
    }

    pub fn nodes(&self) -> usize {
        self.tau.len()
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn values(&self) -> &[JointVec] {
        &self.tau
    }

    /// Replace the stored profile, resampling onto this buffer's grid; the
    /// iteration counter is untouched.
    pub fn load_profile(&mut self, profile: &TorqueProfile) {
        let n = self.tau.len();
        for (i, slot) in self.tau.iter_mut().enumerate() {
            let s = i as f64 / (n - 1) as f64;
            *slot = profile.value_at(s);
        }
    }

    pub fn reset(&mut self) {
        for v in &mut self.tau {
            *v = JointVec::zeros();
        }
        self.iteration = 0;
    }

    /// Linear interpolation of the profile; exact at grid nodes, clamped
    /// outside [0, 1].
    pub fn value_at(&self, s: f64) -> JointVec {
        interp_uniform(&self.tau, s)
    }

    /// Fold a completed stride into the profile. The recorded samples are
    /// resampled onto the buffer grid, errors are advanced by the phase
    /// lead, and the resulting increment is smoothed, then limited and
    /// masked by `policy`, and accumulated under the actuator limits.
    pub fn apply_stride(
        &mut self,
        samples: &[StanceSample],
        gains: &ControllerGains,
        filter: &IirCoefficients,
        tau_max: &JointVec,
        policy: &UpdatePolicy,
    ) -> StrideUpdateResult {
        let n = self.tau.len();
        let fb = resample_onto_grid(samples, n, |t| t.feedback_applied);
        let err = resample_onto_grid(samples, n, |t| t.error);
        let err_rate = resample_onto_grid(samples, n, |t| t.error_rate);

        let shift = ((gains.phase_lead * (n - 1) as f64).round() as usize).min(n - 1);
        let mut increment = vec![JointVec::zeros(); n];
        for i in 0..n {
            let j = (i + shift).min(n - 1);
            increment[i] = JointVec::from_fn(|k, _| {
                fb[i][k] + gains.kp_learning[k] * err[j][k] + gains.kd_learning[k] * err_rate[j][k]
            });
        }

        // Strides too short to inform the smoother get the raw increment;
        // the threshold mirrors the filter's own padding requirement.
        let mut filter_skipped = samples.len() <= 3 * filter.order();
        if !filter_skipped {
            for joint in 0..N_JOINTS {
                let column: Vec<f64> = increment.iter().map(|v| v[joint]).collect();
                match filter.filter_zero_phase(&column) {
                    Ok(smoothed) => {
                        for (slot, v) in increment.iter_mut().zip(smoothed) {
                            slot[joint] = v;
                        }
                    }
                    Err(FilterError::SignalTooShort { .. }) => {
                        filter_skipped = true;
                        break;
                    }
                    Err(_) => unreachable!("zero-phase filtering only fails on short signals"),
                }
            }
        }

        let mut ff_delta: f64 = 0.0;
        for i in 0..n {
            let s = i as f64 / (n - 1) as f64;
            if s < policy.window.0 || s > policy.window.1 {
                continue;
            }
            for k in 0..N_JOINTS {
                let step =
                    (policy.rate * increment[i][k]).clamp(-policy.max_step, policy.max_step);
                let updated = (self.tau[i][k] + step).clamp(-tau_max[k], tau_max[k]);
                ff_delta = ff_delta.max((updated - self.tau[i][k]).abs());
                self.tau[i][k] = updated;
            }
        }
        self.iteration += 1;
        StrideUpdateResult { ff_delta, filter_skipped }
    }
}

/// Linear interpolation over a uniform grid on [0, 1], clamped at the ends.
fn interp_uniform(values: &[JointVec], s: f64) -> JointVec {
    let n = values.len();
    let x = s.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = (x.floor() as usize).min(n - 2);
    let w = x - i as f64;
    if w == 0.0 {
        values[i]
    } else {
        (1.0 - w) * values[i] + w * values[i + 1]
    }
}

/// Resample scattered stance ticks onto a uniform grid by linear
/// interpolation in `s`, holding the boundary values beyond the recorded
/// range. Non-increasing phase samples (clamped overruns) are dropped.
fn resample_onto_grid(
    samples: &[StanceSample],
    nodes: usize,
    pick: impl Fn(&StanceSample) -> JointVec,
) -> Vec<JointVec> {
    let mut table: Vec<(f64, JointVec)> = Vec::with_capacity(samples.len());
    for t in samples {
        if table.last().is_none_or(|(prev, _)| t.s > *prev) {
            table.push((t.s, pick(t)));
        }
    }
    if table.is_empty() {
        return vec![JointVec::zeros(); nodes];
    }
    // Grid points more than half a step outside the observed span were
    // never visited this stride and contribute nothing.
    let grace = 0.5 / (nodes - 1) as f64;
    let (s_first, s_last) = (table[0].0, table[table.len() - 1].0);
    let mut out = Vec::with_capacity(nodes);
    let mut seg = 0usize;
    for i in 0..nodes {
        let s = i as f64 / (nodes - 1) as f64;
        if s < s_first - grace || s > s_last + grace {
            out.push(JointVec::zeros());
            continue;
        }
        if s <= table[0].0 {
            out.push(table[0].1);
            continue;
        }
        if s >= table[table.len() - 1].0 {
            out.push(table[table.len() - 1].1);
            continue;
        }
        while table[seg + 1].0 < s {
            seg += 1;
        }
        let (s0, v0) = table[seg];
        let (s1, v1) = table[seg + 1];
        let w = (s - s0) / (s1 - s0);
        out.push((1.0 - w) * v0 + w * v1);
    }
    out
}

/// Declares a learning run converged when the last `window` profile changes
/// all stayed at or below `tolerance`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceMonitor {
    tolerance: f64,
    window: usize,
    deltas: Vec<f64>,
    converged_at: Option<usize>,
}

impl ConvergenceMonitor {
    pub fn new(tolerance: f64, window: usize) -> Self {
        Self { tolerance, window, deltas: Vec::new(), converged_at: None }
    }

    pub fn record(&mut self, ff_delta: f64) {
        self.deltas.push(ff_delta);
        if self.converged_at.is_none()
            && self.deltas.len() >= self.window
            && self.deltas[self.deltas.len() - self.window..]
                .iter()
                .all(|d| *d <= self.tolerance)
        {
            self.converged_at = Some(self.deltas.len());
        }
    }

    pub fn converged(&self) -> bool {
        self.converged_at.is_some()
    }

    /// Number of learning updates after which convergence held, counting
    /// the update that completed the quiet window.
    pub fn converged_at(&self) -> Option<usize> {
        self.converged_at
    }

    pub fn updates(&self) -> usize {
        self.deltas.len()
    }

    pub fn reset(&mut self) {
        self.deltas.clear();
        self.converged_at = None;
    }
}

/// Feedforward torque profile over the stance phase on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TorqueProfile {
    tau: Vec<JointVec>,
}

impl TorqueProfile {
    pub fn new(tau: Vec<JointVec>) -> Result<Self, IlcError> {
        if tau.len() < 2 {
            return Err(IlcError::ProfileTooShort(tau.len()));
        }
        Ok(Self { tau })
    }

    pub fn nodes(&self) -> usize {
        self.tau.len()
    }

    pub fn values(&self) -> &[JointVec] {
        &self.tau
    }

    pub fn value_at(&self, s: f64) -> JointVec {
        interp_uniform(&self.tau, s)
    }

    /// Node-wise mean of equally sized profiles.
    pub fn average(profiles: &[Vec<JointVec>]) -> Result<Self, IlcError> {
        let first = profiles.first().ok_or(IlcError::NothingToAverage)?;
        let n = first.len();
        if n < 2 {
            return Err(IlcError::ProfileTooShort(n));
        }
        for p in profiles {
            if p.len() != n {
                return Err(IlcError::ProfileLengthMismatch(n, p.len()));
            }
        }
        let scale = 1.0 / profiles.len() as f64;
        let tau = (0..n)
            .map(|i| profiles.iter().fold(JointVec::zeros(), |acc, p| acc + p[i]) * scale)
            .collect();
        Ok(Self { tau })
    }
}

/// Converged feedforward profiles keyed by commanded speed; the muscle
/// memory consulted by replay runs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TorqueLibrary {
    entries: Vec<(f64, TorqueProfile)>,
}

impl TorqueLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.entries.iter().map(|(v, _)| *v).collect()
    }

    /// Store a profile for a speed, replacing any existing entry at exactly
    /// that speed; insertion keeps the entries sorted.
    pub fn insert(&mut self, speed: f64, profile: TorqueProfile) {
        match self.entries.binary_search_by(|(v, _)| v.partial_cmp(&speed).unwrap()) {
            Ok(i) => self.entries[i] = (speed, profile),
            Err(i) => self.entries.insert(i, (speed, profile)),
        }
    }

    pub fn profile_exact(&self, speed: f64) -> Option<&TorqueProfile> {
        self.entries.iter().find(|(v, _)| *v == speed).map(|(_, p)| p)
    }

    /// Feedforward torque at stance phase `s` for a speed, blending the two
    /// bracketing stored profiles convexly and clamping speeds outside the
    /// stored range.
    pub fn feedforward(&self, speed: f64, s: f64) -> Result<JointVec, IlcError> {
        let (lo, hi, w) = self.bracket(speed)?;
        let a = self.entries[lo].1.value_at(s);
        if lo == hi {
            return Ok(a);
        }
        let b = self.entries[hi].1.value_at(s);
        Ok((1.0 - w) * a + w * b)
    }

    /// Whole-profile blend at a speed, on the grid of the denser neighbor.
    pub fn profile_at(&self, speed: f64) -> Result<TorqueProfile, IlcError> {
        let (lo, hi, w) = self.bracket(speed)?;
        if lo == hi {
            return Ok(self.entries[lo].1.clone());
        }
        let nodes = self.entries[lo].1.nodes().max(self.entries[hi].1.nodes());
        let tau = (0..nodes)
            .map(|i| {
                let s = i as f64 / (nodes - 1) as f64;
                let a = self.entries[lo].1.value_at(s);
                let b = self.entries[hi].1.value_at(s);
                (1.0 - w) * a + w * b
            })
            .collect();
        Ok(TorqueProfile { tau })
    }

    fn bracket(&self, speed: f64) -> Result<(usize, usize, f64), IlcError> {
        if self.entries.is_empty() {
            return Err(IlcError::EmptyLibrary);
        }
        let last = self.entries.len() - 1;
        if speed <= self.entries[0].0 {
            return Ok((0, 0, 0.0));
        }
        if speed >= self.entries[last].0 {
            return Ok((last, last, 0.0));
        }
        let hi = self.entries.partition_point(|(v, _)| *v < speed);
        let lo = hi - 1;
        if self.entries[lo].0 == speed {
            return Ok((lo, lo, 0.0));
        }
        let w = (speed - self.entries[lo].0) / (self.entries[hi].0 - self.entries[lo].0);
        Ok((lo, hi, w))
    }

    /// Serialize with 17 fractional digits for bit-exact round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::from("torque-library format 1\n");
        out.push_str(&format!("entries {}\n", self.entries.len()));
        for (speed, profile) in &self.entries {
            out.push_str(&format!("speed {speed:.17e}\n"));
            out.push_str(&format!("samples {}\n", profile.nodes()));
            for row in profile.values() {
                let mut line = String::from("tau");
                for k in 0..N_JOINTS {
                    line.push_str(&format!(" {:.17e}", row[k]));
                }
                line.push('\n');
                out.push_str(&line);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, IlcError> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String), IlcError> {
            lines
                .next()
                .map(|(i, l)| (i + 1, l.to_string()))
                .ok_or(IlcError::Parse { line: 0, message: format!("unexpected end, expected {what}") })
        };
        let (ln, header) = next("header")?;
        if header.trim() != "torque-library format 1" {
            return Err(IlcError::Parse { line: ln, message: format!("bad header {header:?}") });
        }
        let (ln, count_line) = next("entry count")?;
        let count: usize = field(&count_line, "entries", ln)?;
        let mut lib = TorqueLibrary::new();
        for _ in 0..count {
            let (ln, speed_line) = next("speed")?;
            let speed: f64 = field(&speed_line, "speed", ln)?;
            let (ln, samples_line) = next("sample count")?;
            let samples: usize = field(&samples_line, "samples", ln)?;
            let mut tau = Vec::with_capacity(samples);
            for _ in 0..samples {
                let (ln, row) = next("torque row")?;
                let mut toks = row.split_whitespace();
                if toks.next() != Some("tau") {
                    return Err(IlcError::Parse {
                        line: ln,
                        message: format!("expected torque row, got {row:?}"),
                    });
                }
                let mut v = JointVec::zeros();
                for k in 0..N_JOINTS {
                    let tok = toks.next().ok_or(IlcError::Parse {
                        line: ln,
                        message: "torque row too short".into(),
                    })?;
                    v[k] = tok.parse().map_err(|_| IlcError::Parse {
                        line: ln,
                        message: format!("bad torque value {tok:?}"),
                    })?;
                }
                if toks.next().is_some() {
                    return Err(IlcError::Parse { line: ln, message: "torque row too long".into() });
                }
                tau.push(v);
            }
            let profile = TorqueProfile::new(tau)
                .map_err(|e| IlcError::Parse { line: ln, message: e.to_string() })?;
            lib.insert(speed, profile);
        }
        if let Some((i, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(IlcError::Parse {
                line: i + 1,
                message: format!("unexpected trailing content {extra:?}"),
            });
        }
        Ok(lib)
    }
}

fn field<T: std::str::FromStr>(line: &str, key: &str, ln: usize) -> Result<T, IlcError> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some(key) {
        return Err(IlcError::Parse { line: ln, message: format!("expected '{key} <value>', got {line:?}") });
    }
    let value = toks.next().ok_or(IlcError::Parse { line: ln, message: format!("missing value for {key}") })?;
    if toks.next().is_some() {
        return Err(IlcError::Parse { line: ln, message: format!("trailing tokens after {key}") });
    }
    value.parse().map_err(|_| IlcError::Parse { line: ln, message: format!("bad value {value:?} for {key}") })
}

/// Foot-placement speed regulation: the leg touchdown angle is offset by
/// `k · (v − v_cmd)` plus an integrated term, reaching further forward when
/// flying too fast. The integral accumulates once per stride; it supplies
/// the standing offset that the gait template cannot, since leg swing and
/// touchdown losses leave every template with some steady speed bias that
/// a purely proportional correction would only shrink, never remove.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedRegulator {
    pub gain: f64,
    /// Per-stride gain on the accumulated speed error.
    pub integral_gain: f64,
    /// Clamp on the total leg-angle offset (and on the integral state), in
    /// radians.
    pub max_offset: f64,
}

impl Default for SpeedRegulator {
    fn default() -> Self {
        Self { gain: 0.25, integral_gain: 0.08, max_offset: 0.35 }
    }
}

impl SpeedRegulator {
    pub fn leg_angle_offset(&self, speed_estimate: f64, speed_cmd: f64) -> f64 {
        self.gain * (speed_estimate - speed_cmd)
    }
}

/// How the per-stride learning update behaves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlMode {
    /// Feedback only; the feedforward buffer stays zero.
    Pd,
    /// Feedback plus learned feedforward; updates start once simulation
    /// time reaches `enable_at` seconds.
    Ilc { enable_at: f64 },
    /// Feedback plus a frozen feedforward served from a torque library; no
    /// updates ever run.
    Replay,
}

/// Bounds on how much a single stride may change the stored feedforward.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdatePolicy {
    /// Relaxation factor on the whole per-stride increment. Full-strength
    /// updates step the profile so hard that the orbit is re-excited every
    /// stride and the iteration chatters instead of settling; scaling the
    /// step keeps it proportional to the remaining error, so updates are
    /// large while errors are large and taper off on approach.
    pub rate: f64,
    /// Hard per-node bound on the feedforward change in one update, a
    /// backstop against a single wild stride ejecting the orbit from the
    /// pronking basin. Sized so it does not bind on ordinary strides.
    pub max_step: f64,
    /// Stance-phase interval whose nodes learning may modify. The impact
    /// transient after touchdown and the unloading transient before
    /// liftoff live outside it; their error spikes come from constraint
    /// impulses that no feedforward torque can remove, and learning on
    /// them ratchets the profile instead of converging.
    pub window: (f64, f64),
}

impl Default for UpdatePolicy {
    fn default() -> Self {
        Self { rate: 0.3, max_step: 25.0, window: (0.1, 0.95) }
    }
}

impl UpdatePolicy {
    /// Full-rate steps, no trust region, no masking: the textbook update
    /// law.
    pub fn unrestricted() -> Self {
        Self { rate: 1.0, max_step: f64::INFINITY, window: (0.0, 1.0) }
    }

    fn validate(&self) -> Result<(), IlcError> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(IlcError::InvalidUpdateRate(self.rate));
        }
        if !(self.max_step > 0.0) {
            return Err(IlcError::InvalidUpdateStep(self.max_step));
        }
        let (a, b) = self.window;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a >= b {
            return Err(IlcError::InvalidUpdateWindow(a, b));
        }
        Ok(())
    }
}

/// Everything configurable about the stride controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub gains: ControllerGains,
    pub mode: ControlMode,
    pub filter: FilterPreset,
    /// Nodes of the feedforward grid over stance phase.
    pub buffer_nodes: usize,
    /// Exponential smoothing factor of the speed estimate.
    pub speed_smoothing: f64,
    pub regulator: SpeedRegulator,
    pub convergence_tolerance: f64,
    pub convergence_window: usize,
    /// Strides between learning updates. Updating less often than every
    /// stride gives the hybrid orbit time to settle after each feedforward
    /// change, so updates always record a settled stride.
    pub update_period: usize,
    pub update_policy: UpdatePolicy,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            gains: ControllerGains::default(),
            mode: ControlMode::Ilc { enable_at: 20.3 },
            filter: FilterPreset::Quantized,
            buffer_nodes: 101,
            speed_smoothing: 0.005,
            regulator: SpeedRegulator::default(),
            convergence_tolerance: 0.1,
            convergence_window: 5,
            update_period: 2,
            update_policy: UpdatePolicy::default(),
        }
    }
}

/// Controller output for one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTick {
    pub s: f64,
    pub reference: JointVec,
    pub reference_rate: JointVec,
    pub error: JointVec,
    pub error_rate: JointVec,
    pub tau_feedback: JointVec,
    pub tau_feedforward: JointVec,
    /// Sum of feedback and feedforward before actuator saturation.
    pub tau_command: JointVec,
    /// True once the phase clock passed the nominal phase duration.
    pub overrun: bool,
}

/// Result of closing out a stride at liftoff.
#[derive(Debug, Clone, PartialEq)]
pub struct StrideSummary {
    pub stride: usize,
    pub update: Option<StrideUpdateResult>,
    pub converged: bool,
    /// Smoothed measured speed at the stride boundary.
    pub boundary_speed: f64,
    pub gait_clamped: bool,
}

/// Stride-oriented tracking controller: PD feedback around a per-stride
/// gait snapshot, learned stance feedforward, and foot-placement speed
/// regulation during flight.
pub struct IlcController {
    model: RobotModel,
    gait_library: GaitLibrary,
    torque_library: Option<TorqueLibrary>,
    config: ControllerConfig,
    filter: IirCoefficients,
    snapshot: GaitEntry,
    snapshot_clamped: bool,
    buffer: IterationBuffer,
    records: Vec<StanceSample>,
    monitor: ConvergenceMonitor,
    estimator: VelocityEstimator,
    speed_cmd: f64,
    raibert_offset: f64,
    regulator_integral: f64,
    flight_duration: Option<f64>,
    stride_anchor: Option<(f64, f64)>,
    stride_speed: Option<f64>,
    stride_index: usize,
    strides_since_update: usize,
    learning_updates: u32,
}

impl IlcController {
    pub fn new(
        model: RobotModel,
        gait_library: GaitLibrary,
        config: ControllerConfig,
        speed_cmd: f64,
    ) -> Result<Self, IlcError> {
        Self::with_torque_library(model, gait_library, config, speed_cmd, None)
    }

    pub fn with_torque_library(
        model: RobotModel,
        gait_library: GaitLibrary,
        config: ControllerConfig,
        speed_cmd: f64,
        torque_library: Option<TorqueLibrary>,
    ) -> Result<Self, IlcError> {
        if matches!(config.mode, ControlMode::Replay) && torque_library.is_none() {
            return Err(IlcError::MissingTorqueLibrary);
        }
        if config.update_period == 0 {
            return Err(IlcError::ZeroUpdatePeriod);
        }
        config.update_policy.validate()?;
        let filter = config.filter.coefficients();
        let InterpolatedGait { entry, clamped } = gait_library.interpolate(speed_cmd);
        let mut buffer = IterationBuffer::new(config.buffer_nodes)?;
        if let (ControlMode::Replay, Some(lib)) = (&config.mode, &torque_library) {
            buffer.load_profile(&lib.profile_at(speed_cmd)?);
        }
        let estimator = VelocityEstimator::new(config.speed_smoothing)?;
        let monitor = ConvergenceMonitor::new(config.convergence_tolerance, config.convergence_window);
        Ok(Self {
            model,
            gait_library,
            torque_library,
            filter,
            snapshot: entry,
            snapshot_clamped: clamped,
            buffer,
            records: Vec::new(),
            monitor,
            estimator,
            speed_cmd,
            raibert_offset: 0.0,
            regulator_integral: 0.0,
            flight_duration: None,
            stride_anchor: None,
            stride_speed: None,
            stride_index: 0,
            strides_since_update: usize::MAX,
            learning_updates: 0,
            config,
        })
    }

    pub fn speed_command(&self) -> f64 {
        self.speed_cmd
    }

    /// Current gait snapshot (fixed within a stride).
    pub fn snapshot(&self) -> &GaitEntry {
        &self.snapshot
    }

    pub fn buffer(&self) -> &IterationBuffer {
        &self.buffer
    }

    /// Copy of the feedforward profile, for freezing into a torque library.
    pub fn buffer_values(&self) -> Vec<JointVec> {
        self.buffer.values().to_vec()
    }

    pub fn converged(&self) -> bool {
        self.monitor.converged()
    }

    pub fn convergence(&self) -> &ConvergenceMonitor {
        &self.monitor
    }

    pub fn learning_updates(&self) -> u32 {
        self.learning_updates
    }

    pub fn stride_index(&self) -> usize {
        self.stride_index
    }

    /// Smoothed planar base-velocity estimate; the commanded speed before
    /// any measurement arrives.
    pub fn speed_estimate(&self) -> f64 {
        self.estimator.value().map_or(self.speed_cmd, |v| v.x)
    }

    /// Fold a raw velocity measurement into the speed estimate.
    pub fn observe_velocity(&mut self, raw: Vector2<f64>) -> Vector2<f64> {
        self.estimator.update(raw)
    }

    /// Leg-angle offset currently applied by the speed regulator.
    pub fn foot_placement_offset(&self) -> f64 {
        self.raibert_offset
    }

    /// Compute the control torque for one tick. `elapsed` is the time since
    /// the current phase began.
    pub fn control(&mut self, phase: GaitPhase, elapsed: f64, state: &GeneralizedState) -> ControlTick {
        // Stance that has run its nominal course hands the reference over to
        // the start of the flight curve while the feet are still pinned:
        // retraction is what actually breaks the contact. Holding the end
        // pose instead would brake the rising body through the planted feet
        // and bleed off the liftoff momentum the stance just built up.
        let stance_duration = self.snapshot.phase(GaitPhase::Stance).duration();
        let releasing = phase == GaitPhase::Stance && elapsed > stance_duration;
        let (ref_phase, ref_elapsed) = if releasing {
            (GaitPhase::Flight, elapsed - stance_duration)
        } else {
            (phase, elapsed)
        };
        let curve = self.snapshot.phase(ref_phase);
        let duration = if ref_phase == GaitPhase::Flight && !releasing {
            if self.flight_duration.is_none() {
                self.flight_duration = Some(self.predict_flight_duration(state));
            }
            self.flight_duration.unwrap()
        } else {
            curve.duration()
        };
        let progress = ref_elapsed / duration;
        let overrun = progress > 1.0;
        let s = progress.min(1.0);

        let mut reference = curve.position(s);
        let mut reference_rate = if overrun {
            JointVec::zeros()
        } else {
            curve.velocity(s) * (curve.duration() / duration)
        };
        if self.raibert_offset != 0.0 {
            // Ramp the touchdown-angle offset in over the flight so the full
            // correction is reached exactly at touchdown, then hold it for
            // the whole stance and through the release. Holding keeps the
            // references consistent with where the feet actually landed;
            // walking them back to nominal would drag the planted-foot hip
            // through extra travel and fight the foot-placement correction.
            let (blend, blend_rate) = if releasing {
                (1.0, 0.0)
            } else {
                match phase {
                    GaitPhase::Flight => (s, 1.0),
                    GaitPhase::Stance => (1.0, 0.0),
                }
            };
            for leg in Leg::ALL {
                reference[leg.joint_offset()] += self.raibert_offset * blend;
                if !overrun {
                    reference_rate[leg.joint_offset()] += self.raibert_offset * blend_rate / duration;
                }
            }
        }

        let joints = state.joint_positions();
        let joint_rates = state.joint_velocities();
        let (error, error_rate) = tracking_error(&reference, &reference_rate, &joints, &joint_rates);
        let tau_feedback = feedback_torque(&self.config.gains, &error, &error_rate);
        let tau_feedforward = match ref_phase {
            GaitPhase::Stance => self.buffer.value_at(s),
            GaitPhase::Flight => JointVec::zeros(),
        };
        let tau_command = tau_feedback + tau_feedforward;

        if phase == GaitPhase::Stance && !releasing {
            let applied = JointVec::from_fn(|i, _| {
                tau_command[i].clamp(-self.model.tau_max[i], self.model.tau_max[i])
            });
            // Learning records are measured against the nominal references,
            // not the offset ones the feedback tracks. The foot-placement
            // offset is per-stride speed feedback; letting it into the
            // records would bake whatever correction was active into the
            // profile and turn the speed loop into a slow integrator
            // through the learned torques.
            let mut error_learn = error;
            let mut feedback_learn = applied - tau_feedforward;
            if self.raibert_offset != 0.0 {
                for leg in Leg::ALL {
                    let j = leg.joint_offset();
                    error_learn[j] -= self.raibert_offset;
                    feedback_learn[j] -= self.config.gains.kp_feedback[j] * self.raibert_offset;
                }
            }
            self.records.push(StanceSample {
                s,
                error: error_learn,
                error_rate,
                feedback_applied: feedback_learn,
            });
        }

        ControlTick {
            s,
            reference,
            reference_rate,
            error,
            error_rate,
            tau_feedback,
            tau_feedforward,
            tau_command,
            overrun,
        }
    }

    /// Expected time from the current airborne state until the ballistic
    /// arc brings the foot, held at the stride's landing pose, down to the
    /// ground. Flight is clocked by this estimate instead of the nominal
    /// duration: when the apex is off-nominal, a fixed clock truncates the
    /// swing mid-extension and plants the foot short of its mark, which
    /// robs the following stance sweep of most of its forward travel. The
    /// prediction propagates the center of mass, the only point that falls
    /// ballistically while the legs reposition under power.
    fn predict_flight_duration(&self, state: &GeneralizedState) -> f64 {
        let curve = self.snapshot.phase(GaitPhase::Flight);
        let nominal = curve.duration();
        let landing = curve.position(1.0);
        let mut q = StateVec::zeros();
        for i in 0..N_JOINTS {
            q[N_BASE + i] = landing[i];
        }
        for leg in Leg::ALL {
            q[leg.thigh_index()] += self.raibert_offset;
        }
        let posed = GeneralizedState::new(q, StateVec::zeros());
        let com_at_touchdown =
            center_of_mass(&self.model, &posed).0.y - foot_position(&self.model, &q, Leg::Front).y;
        let (com, com_vel) = center_of_mass(&self.model, state);
        let vz = com_vel.y;
        let disc = vz * vz + 2.0 * self.model.gravity * (com.y - com_at_touchdown);
        if disc <= 0.0 {
            return nominal;
        }
        let predicted = (vz + disc.sqrt()) / self.model.gravity;
        predicted.clamp(0.25 * nominal, 2.5 * nominal)
    }

    /// Close out a stride at liftoff: run the learning update if the mode
    /// allows it, then snapshot the gait and the foot-placement offset for
    /// the stride that begins now. `base_x` is the base position at this
    /// boundary; successive boundaries give the odometric stride speed the
    /// regulator runs on, which unlike any instantaneous reading is immune
    /// to the within-stride velocity swing. Strides whose stance did not
    /// run at least 90% of its nominal course are skipped by the update;
    /// they are stumbles, not data.
    pub fn end_stride(&mut self, time: f64, base_x: f64) -> StrideSummary {
        if let Some((t0, x0)) = self.stride_anchor {
            if time > t0 {
                self.stride_speed = Some((base_x - x0) / (time - t0));
            }
        }
        self.stride_anchor = Some((time, base_x));
        self.strides_since_update = self.strides_since_update.saturating_add(1);
        let full_stance = self.records.last().is_some_and(|r| r.s >= 0.9);
        let update = match self.config.mode {
            ControlMode::Ilc { enable_at }
                if time >= enable_at
                    && full_stance
                    && self.strides_since_update >= self.config.update_period =>
            {
                let result = self.buffer.apply_stride(
                    &self.records,
                    &self.config.gains,
                    &self.filter,
                    &self.model.tau_max,
                    &self.config.update_policy,
                );
                self.monitor.record(result.ff_delta);
                self.learning_updates += 1;
                self.strides_since_update = 0;
                Some(result)
            }
            _ => None,
        };
        self.records.clear();
        self.flight_duration = None;
        self.stride_index += 1;

        let speed_est = self.stride_speed.unwrap_or(self.speed_cmd);
        let regulator = &self.config.regulator;
        let speed_error = speed_est - self.speed_cmd;
        self.regulator_integral = (self.regulator_integral
            + regulator.integral_gain * speed_error)
            .clamp(-regulator.max_offset, regulator.max_offset);
        self.raibert_offset = (regulator.leg_angle_offset(speed_est, self.speed_cmd)
            + self.regulator_integral)
            .clamp(-regulator.max_offset, regulator.max_offset);

        // References for the stride that begins now come from the library
        // at the commanded speed, so learning always chases one fixed
        // target and the stance sweep itself servos the body toward the
        // command; the measured speed feeds the foot-placement offset
        // that rejects speed disturbances.
        let InterpolatedGait { entry, clamped } = self.gait_library.interpolate(self.speed_cmd);
        self.snapshot = entry;
        self.snapshot_clamped = clamped;
        if let (ControlMode::Replay, Some(lib)) = (&self.config.mode, &self.torque_library) {
            if let Ok(profile) = lib.profile_at(self.speed_cmd) {
                self.buffer.load_profile(&profile);
            }
        }

        StrideSummary {
            stride: self.stride_index,
            update,
            converged: self.monitor.converged(),
            boundary_speed: speed_est,
            gait_clamped: self.snapshot_clamped,
        }
    }
}

//! IIR smoothing filters and base-velocity estimation.
//!
//! Learning updates smooth recorded profiles with a zero-phase filter: one
//! forward and one backward pass of the same low-pass, with odd-symmetric
//! edge padding and steady-state initial conditions so constants pass
//! through unchanged and no phase lag is introduced.

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::dynamics::foot_jacobian;
use crate::model::{ContactSet, GeneralizedState, RobotModel};

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("filter coefficients must be non-empty")]
    EmptyCoefficients,
    #[error("leading denominator coefficient must be non-zero")]
    ZeroLeadingDenominator,
    #[error("filter is unstable: pole magnitude {0:.6} outside the unit circle")]
    Unstable(f64),
    #[error("cutoff {cutoff_hz} Hz invalid for sample rate {sample_rate_hz} Hz")]
    InvalidCutoff { cutoff_hz: f64, sample_rate_hz: f64 },
    #[error("signal of length {len} too short for zero-phase filtering (needs at least {min})")]
    SignalTooShort { len: usize, min: usize },
    #[error("smoothing factor must lie in (0, 1], got {0}")]
    InvalidSmoothing(f64),
}

/// Discrete transfer-function coefficients `b(z)/a(z)`, normalized so that
/// `a[0] = 1`. Construction rejects unstable filters.
#[derive(Debug, Clone, PartialEq)]
pub struct IirCoefficients {
    b: Vec<f64>,
    a: Vec<f64>,
}

/// Named smoothing presets selectable from experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterPreset {
    /// Third-order Butterworth low-pass, 25 Hz cutoff at 1 kHz, unity DC.
    #[default]
    Butter25,
    /// Three-decimal quantized low-pass with 0.8 DC gain per pass, matching
    /// coefficient tables used on embedded joint controllers.
    Quantized,
}

impl FilterPreset {
    pub fn coefficients(self) -> IirCoefficients {
        match self {
            FilterPreset::Butter25 => IirCoefficients::butterworth3_lowpass(25.0, 1000.0)
                .expect("default cutoff is valid"),
            FilterPreset::Quantized => IirCoefficients::quantized_lowpass(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterPreset::Butter25 => "butter25",
            FilterPreset::Quantized => "quantized",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "butter25" => Some(FilterPreset::Butter25),
            "quantized" => Some(FilterPreset::Quantized),
            _ => None,
        }
    }
}

impl IirCoefficients {
    /// Validate and normalize a transfer function. `b` and `a` are padded to
    /// a common length and scaled so `a[0] = 1`.
    pub fn new(b: Vec<f64>, a: Vec<f64>) -> Result<Self, FilterError> {
        if b.is_empty() || a.is_empty() {
            return Err(FilterError::EmptyCoefficients);
        }
        if a[0] == 0.0 {
            return Err(FilterError::ZeroLeadingDenominator);
        }
        let n = b.len().max(a.len());
        let a0 = a[0];
        let mut bb = vec![0.0; n];
        let mut aa = vec![0.0; n];
        for (dst, src) in bb.iter_mut().zip(&b) {
            *dst = src / a0;
        }
        for (dst, src) in aa.iter_mut().zip(&a) {
            *dst = src / a0;
        }
        let coeffs = Self { b: bb, a: aa };
        let rho = coeffs.max_pole_magnitude();
        if rho >= 1.0 {
            return Err(FilterError::Unstable(rho));
        }
        Ok(coeffs)
    }

    /// Quantized three-decimal low-pass with DC gain 0.8 per pass (0.64
    /// after a forward-backward application).
    pub fn quantized_lowpass() -> Self {
        Self::new(
            vec![0.003, 0.009, 0.009, 0.003],
            vec![1.00, -2.37, 1.93, -0.53],
        )
        .expect("quantized preset is stable")
    }

    /// Third-order Butterworth low-pass designed by bilinear transform with
    /// cutoff prewarping; the numerator gain is chosen so the DC gain is
    /// exactly one.
    pub fn butterworth3_lowpass(cutoff_hz: f64, sample_rate_hz: f64) -> Result<Self, FilterError> {
        if !(cutoff_hz > 0.0 && sample_rate_hz > 0.0 && cutoff_hz < sample_rate_hz / 2.0) {
            return Err(FilterError::InvalidCutoff { cutoff_hz, sample_rate_hz });
        }
        let fs2 = 2.0 * sample_rate_hz;
        let wa = fs2 * (std::f64::consts::PI * cutoff_hz / sample_rate_hz).tan();

        // Analog poles: one real at -wa, a conjugate pair at wa·e^{±i·2π/3}.
        // Bilinear map z = (fs2 + s) / (fs2 - s), expanded in real arithmetic.
        let z_real = (fs2 - wa) / (fs2 + wa);
        let sigma = -wa / 2.0;
        let wi = wa * 3.0f64.sqrt() / 2.0;
        let denom = (fs2 - sigma) * (fs2 - sigma) + wi * wi;
        let re_pair = (fs2 * fs2 - sigma * sigma - wi * wi) / denom;
        let mag2_pair = ((fs2 + sigma) * (fs2 + sigma) + wi * wi) / denom;

        // a(z) = (z - z_real)(z² - 2·Re·z + |z|²)
        let a1 = -(z_real + 2.0 * re_pair);
        let a2 = mag2_pair + 2.0 * re_pair * z_real;
        let a3 = -z_real * mag2_pair;
        let k = (1.0 + a1 + a2 + a3) / 8.0;
        Self::new(vec![k, 3.0 * k, 3.0 * k, k], vec![1.0, a1, a2, a3])
    }

    pub fn order(&self) -> usize {
        self.b.len() - 1
    }

    pub fn numerator(&self) -> &[f64] {
        &self.b
    }

    pub fn denominator(&self) -> &[f64] {
        &self.a
    }

    /// Gain at zero frequency, `Σb / Σa`.
    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }

    /// Largest pole magnitude, from the eigenvalues of the denominator's
    /// companion matrix.
    pub fn max_pole_magnitude(&self) -> f64 {
        let n = self.order();
        if n == 0 {
            return 0.0;
        }
        let mut companion = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            companion[(0, j)] = -self.a[j + 1];
        }
        for i in 1..n {
            companion[(i, i - 1)] = 1.0;
        }
        companion
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Single forward pass (transposed direct form II) with zero initial
    /// state; causal, so it introduces phase lag.
    pub fn filter_forward(&self, x: &[f64]) -> Vec<f64> {
        self.filter_with_state(x, &vec![0.0; self.order()])
    }

    fn filter_with_state(&self, x: &[f64], z0: &[f64]) -> Vec<f64> {
        let m = self.order();
        let mut z = z0.to_vec();
        let mut y = Vec::with_capacity(x.len());
        for &xk in x {
            let yk = self.b[0] * xk + if m > 0 { z[0] } else { 0.0 };
            for i in 0..m {
                let carry = if i + 1 < m { z[i + 1] } else { 0.0 };
                z[i] = self.b[i + 1] * xk - self.a[i + 1] * yk + carry;
            }
            y.push(yk);
        }
        y
    }

    /// Internal-state vector that puts the filter in steady state for a unit
    /// step, so scaling by the first sample suppresses startup transients.
    pub fn steady_state_init(&self) -> Vec<f64> {
        let m = self.order();
        if m == 0 {
            return Vec::new();
        }
        let mut sys = DMatrix::<f64>::identity(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        for j in 0..m {
            sys[(j, 0)] += self.a[j + 1];
            if j + 1 < m {
                sys[(j, j + 1)] -= 1.0;
            }
            rhs[j] = self.b[j + 1] - self.a[j + 1] * self.b[0];
        }
        let zi = sys.lu().solve(&rhs).expect("steady-state system is nonsingular");
        zi.iter().copied().collect()
    }

    /// Zero-phase filtering: forward pass, reverse, second pass, reverse.
    /// The signal is extended at both ends by odd reflection over
    /// `3 × order` samples and each pass starts from step-matched initial
    /// conditions, which together remove edge transients and keep the DC
    /// level exact for unity-gain filters.
    pub fn filter_zero_phase(&self, x: &[f64]) -> Result<Vec<f64>, FilterError> {
        let pad = 3 * self.order();
        if x.len() <= pad {
            return Err(FilterError::SignalTooShort { len: x.len(), min: pad + 1 });
        }
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in 0..pad {
            ext.push(2.0 * x[0] - x[pad - i]);
        }
        ext.extend_from_slice(x);
        for i in 0..pad {
            ext.push(2.0 * x[n - 1] - x[n - 2 - i]);
        }

        let zi = self.steady_state_init();
        let scaled = |s: f64| zi.iter().map(|v| v * s).collect::<Vec<_>>();

        let fwd = self.filter_with_state(&ext, &scaled(ext[0]));
        let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
        rev = self.filter_with_state(&rev, &scaled(rev[0]));
        rev.reverse();
        Ok(rev[pad..pad + n].to_vec())
    }
}

/// First-order exponential smoother for planar base velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityEstimator {
    alpha: f64,
    state: Option<Vector2<f64>>,
}

impl VelocityEstimator {
    /// `alpha` is the weight on the newest raw measurement.
    pub fn new(alpha: f64) -> Result<Self, FilterError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(FilterError::InvalidSmoothing(alpha));
        }
        Ok(Self { alpha, state: None })
    }

    /// Fold in a raw measurement; the first sample initializes the state.
    pub fn update(&mut self, raw: Vector2<f64>) -> Vector2<f64> {
        let next = match self.state {
            Some(prev) => (1.0 - self.alpha) * prev + self.alpha * raw,
            None => raw,
        };
        self.state = Some(next);
        next
    }

    pub fn value(&self) -> Option<Vector2<f64>> {
        self.state
    }

    pub fn reset(&mut self) {
        self.state = None;
    }
}

/// Raw base velocity from leg odometry: each stance foot is assumed pinned,
/// so the base moves opposite to the joint-driven foot motion. Estimates
/// from multiple contact legs are averaged. Returns `None` in flight.
pub fn leg_odometry_velocity(
    model: &RobotModel,
    state: &GeneralizedState,
    contacts: &ContactSet,
) -> Option<Vector2<f64>> {
    let legs = contacts.active_legs();
    if legs.is_empty() {
        return None;
    }
    let mut joints_only = *state;
    joints_only.qd[0] = 0.0;
    joints_only.qd[1] = 0.0;
    let mut sum = Vector2::zeros();
    for &leg in &legs {
        let swing = foot_jacobian(model, &state.q, leg) * joints_only.qd;
        sum += -swing;
    }
    Some(sum / legs.len() as f64)
}

//! Floating-base rigid-body dynamics of the planar pronking robot.
//!
//! The equations of motion are `M(q)·q̈ + h(q, q̇) = S·τ + Jᵀ·λ` with the
//! bias vector `h` collecting Coriolis, centrifugal and gravity terms. In
//! flight `λ = 0`; in stance the no-slip foot constraint `J·q̈ + σ = 0`
//! closes the system into a KKT solve that yields accelerations and ground
//! reaction forces together.
//!
//! All terms are assembled numerically from per-body contributions; each
//! body adds `m·JᵥᵀJᵥ + I·jωjωᵀ` to the mass matrix and the matching
//! quadratic-velocity and gravity terms to the bias vector.

use nalgebra::{DMatrix, DVector, Matrix2, SMatrix, Vector2};
use thiserror::Error;

use crate::model::{
    ContactSet, GeneralizedState, GroundReaction, JointVec, Leg, MassMatrix, RobotModel, StateVec,
    N_JOINTS, N_STATE,
};

/// Contact Jacobian of one foot: rows are ∂(foot x, foot z)/∂q.
pub type FootJacobian = SMatrix<f64, 2, N_STATE>;

/// Diagonal regularization added to a singular joint-space mass block so
/// that degenerate test fixtures (massless legs) remain factorizable.
pub const MASS_REGULARIZATION: f64 = 1e-9;

/// Reciprocal-condition estimate below which the stance KKT system is
/// treated as degenerate instead of silently solved.
pub const KKT_RCOND_LIMIT: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("stance dynamics requires at least one leg in contact")]
    NoContact,
    #[error("degenerate contact configuration for {legs:?} (rcond estimate {rcond:.3e})")]
    DegenerateContact { legs: Vec<Leg>, rcond: f64 },
    #[error("state contains non-finite entries")]
    NonFiniteState,
}

/// Unit vector along a leg segment at absolute angle `phi` from straight
/// down, positive swinging toward +x.
#[inline]
fn seg_dir(phi: f64) -> Vector2<f64> {
    Vector2::new(phi.sin(), -phi.cos())
}

/// Derivative of [`seg_dir`] with respect to the angle.
#[inline]
fn seg_dir_deriv(phi: f64) -> Vector2<f64> {
    Vector2::new(phi.cos(), phi.sin())
}

/// Joint-space mass matrix `M(q)`. Symmetric, and positive definite for any
/// physically valid model; depends on joint angles only.
pub fn mass_matrix(model: &RobotModel, q: &StateVec) -> MassMatrix {
    let mut m = MassMatrix::zeros();

    // Torso translates with the base and cannot pitch.
    m[(0, 0)] += model.torso_mass;
    m[(1, 1)] += model.torso_mass;

    for leg in Leg::ALL {
        let it = leg.thigh_index();
        let ic = leg.calf_index();
        let phi_t = q[it];
        let phi_tc = q[it] + q[ic];

        // Thigh: COM at hip + c_t·dir(phi_t).
        let jt = model.thigh.com_offset * seg_dir_deriv(phi_t);
        m[(0, 0)] += model.thigh.mass;
        m[(1, 1)] += model.thigh.mass;
        m[(0, it)] += model.thigh.mass * jt.x;
        m[(1, it)] += model.thigh.mass * jt.y;
        m[(it, it)] += model.thigh.mass * jt.dot(&jt) + model.thigh.inertia;

        // Calf: COM at hip + L_t·dir(phi_t) + c_c·dir(phi_tc); its angular
        // velocity is the sum of both joint rates.
        let u = model.thigh.length * seg_dir_deriv(phi_t)
            + model.calf.com_offset * seg_dir_deriv(phi_tc);
        let w = model.calf.com_offset * seg_dir_deriv(phi_tc);
        m[(0, 0)] += model.calf.mass;
        m[(1, 1)] += model.calf.mass;
        m[(0, it)] += model.calf.mass * u.x;
        m[(1, it)] += model.calf.mass * u.y;
        m[(0, ic)] += model.calf.mass * w.x;
        m[(1, ic)] += model.calf.mass * w.y;
        m[(it, it)] += model.calf.mass * u.dot(&u) + model.calf.inertia;
        m[(it, ic)] += model.calf.mass * u.dot(&w) + model.calf.inertia;
        m[(ic, ic)] += model.calf.mass * w.dot(&w) + model.calf.inertia;
    }

    // Mirror the upper triangle.
    for r in 0..N_STATE {
        for c in 0..r {
            m[(r, c)] = m[(c, r)];
        }
    }
    m
}

/// Gravity term `G(q)` of the equations of motion (gradient of potential
/// energy, so the base-z entry is the total weight).
pub fn gravity_forces(model: &RobotModel, q: &StateVec) -> StateVec {
    let g = model.gravity;
    let mut grad = StateVec::zeros();
    grad[1] = model.torso_mass * g;

    for leg in Leg::ALL {
        let it = leg.thigh_index();
        let ic = leg.calf_index();
        let phi_t = q[it];
        let phi_tc = q[it] + q[ic];

        grad[1] += (model.thigh.mass + model.calf.mass) * g;
        grad[it] += model.thigh.mass * g * model.thigh.com_offset * phi_t.sin();
        grad[it] += model.calf.mass
            * g
            * (model.thigh.length * phi_t.sin() + model.calf.com_offset * phi_tc.sin());
        grad[ic] += model.calf.mass * g * model.calf.com_offset * phi_tc.sin();
    }
    grad
}

/// Combined bias vector `H(q, q̇)·q̇ + G(q)`.
pub fn bias_forces(model: &RobotModel, state: &GeneralizedState) -> StateVec {
    let q = &state.q;
    let qd = &state.qd;
    let mut h = gravity_forces(model, q);

    for leg in Leg::ALL {
        let it = leg.thigh_index();
        let ic = leg.calf_index();
        let phi_t = q[it];
        let phi_tc = q[it] + q[ic];
        let w_t = qd[it];
        let w_tc = qd[it] + qd[ic];

        // Quadratic-velocity COM accelerations (J̇ᵥ·q̇ with q̈ = 0); link
        // angular rates are linear in q̇ so they add no bias torque of
        // their own.
        let a_thigh = -model.thigh.com_offset * seg_dir(phi_t) * w_t * w_t;
        let a_calf = -model.thigh.length * seg_dir(phi_t) * w_t * w_t
            - model.calf.com_offset * seg_dir(phi_tc) * w_tc * w_tc;

        let jt = model.thigh.com_offset * seg_dir_deriv(phi_t);
        let u = model.thigh.length * seg_dir_deriv(phi_t)
            + model.calf.com_offset * seg_dir_deriv(phi_tc);
        let w = model.calf.com_offset * seg_dir_deriv(phi_tc);

        h[0] += model.thigh.mass * a_thigh.x + model.calf.mass * a_calf.x;
        h[1] += model.thigh.mass * a_thigh.y + model.calf.mass * a_calf.y;
        h[it] += model.thigh.mass * jt.dot(&a_thigh) + model.calf.mass * u.dot(&a_calf);
        h[ic] += model.calf.mass * w.dot(&a_calf);
    }
    h
}

/// World-frame knee position of `leg`.
pub fn knee_position(model: &RobotModel, q: &StateVec, leg: Leg) -> Vector2<f64> {
    let hip = Vector2::new(q[0], q[1]) + model.hip_offset(leg);
    hip + model.thigh.length * seg_dir(q[leg.thigh_index()])
}

/// World-frame foot position of `leg` (forward kinematics `g_l(q)`).
pub fn foot_position(model: &RobotModel, q: &StateVec, leg: Leg) -> Vector2<f64> {
    let phi_tc = q[leg.thigh_index()] + q[leg.calf_index()];
    knee_position(model, q, leg) + model.calf.length * seg_dir(phi_tc)
}

/// Contact Jacobian `J_l = ∂g_l/∂q` of the foot of `leg`.
pub fn foot_jacobian(model: &RobotModel, q: &StateVec, leg: Leg) -> FootJacobian {
    let it = leg.thigh_index();
    let ic = leg.calf_index();
    let phi_t = q[it];
    let phi_tc = q[it] + q[ic];

    let mut j = FootJacobian::zeros();
    j[(0, 0)] = 1.0;
    j[(1, 1)] = 1.0;
    let col_t = model.thigh.length * seg_dir_deriv(phi_t) + model.calf.length * seg_dir_deriv(phi_tc);
    let col_c = model.calf.length * seg_dir_deriv(phi_tc);
    j[(0, it)] = col_t.x;
    j[(1, it)] = col_t.y;
    j[(0, ic)] = col_c.x;
    j[(1, ic)] = col_c.y;
    j
}

/// Foot velocity of `leg`, `J_l·q̇`.
pub fn foot_velocity(model: &RobotModel, state: &GeneralizedState, leg: Leg) -> Vector2<f64> {
    foot_jacobian(model, &state.q, leg) * state.qd
}

/// Bias acceleration `σ_l = J̇_l·q̇` of the foot of `leg`.
pub fn bias_acceleration(model: &RobotModel, state: &GeneralizedState, leg: Leg) -> Vector2<f64> {
    let it = leg.thigh_index();
    let ic = leg.calf_index();
    let phi_t = state.q[it];
    let phi_tc = state.q[it] + state.q[ic];
    let w_t = state.qd[it];
    let w_tc = state.qd[it] + state.qd[ic];

    -model.thigh.length * seg_dir(phi_t) * w_t * w_t
        - model.calf.length * seg_dir(phi_tc) * w_tc * w_tc
}

/// Result of a forward-dynamics solve.
#[derive(Debug, Clone, PartialEq)]
pub struct FlightAccel {
    pub qdd: StateVec,
    /// Torques after actuator saturation; these are what acted on the plant.
    pub applied_torque: JointVec,
    /// Per-joint saturation indicators.
    pub saturated: [bool; N_JOINTS],
    /// True when the mass matrix needed Tikhonov regularization.
    pub regularized: bool,
}

/// Result of a stance-phase constrained solve.
#[derive(Debug, Clone, PartialEq)]
pub struct StanceAccel {
    pub qdd: StateVec,
    pub grf: GroundReaction,
    pub applied_torque: JointVec,
    pub saturated: [bool; N_JOINTS],
    pub regularized: bool,
}

/// Clamp commanded torques to the actuator limits, mirroring physical
/// saturation; over-limit commands are flagged, never rejected.
pub fn saturate_torque(tau: &JointVec, tau_max: &JointVec) -> (JointVec, [bool; N_JOINTS]) {
    let mut out = *tau;
    let mut flags = [false; N_JOINTS];
    for i in 0..N_JOINTS {
        let lim = tau_max[i];
        if out[i] > lim {
            out[i] = lim;
            flags[i] = true;
        } else if out[i] < -lim {
            out[i] = -lim;
            flags[i] = true;
        }
    }
    (out, flags)
}

/// Mass matrix with D3 fallback: a joint block that cannot be factored
/// (massless-leg fixtures) gets `MASS_REGULARIZATION` on its diagonal.
fn factorable_mass(model: &RobotModel, q: &StateVec) -> (MassMatrix, bool) {
    let m = mass_matrix(model, q);
    if m.cholesky().is_some() {
        return (m, false);
    }
    let mut reg = m;
    for i in crate::model::N_BASE..N_STATE {
        reg[(i, i)] += MASS_REGULARIZATION;
    }
    (reg, true)
}

fn actuation(tau: &JointVec) -> StateVec {
    let mut rhs = StateVec::zeros();
    for i in 0..N_JOINTS {
        rhs[crate::model::N_BASE + i] = tau[i];
    }
    rhs
}

/// Flight-phase forward dynamics: `M·q̈ = S·τ − h` with zero ground forces.
pub fn flight_dynamics(
    model: &RobotModel,
    state: &GeneralizedState,
    tau: &JointVec,
) -> Result<FlightAccel, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFiniteState);
    }
    let (applied, saturated) = saturate_torque(tau, &model.tau_max);
    let (m, regularized) = factorable_mass(model, &state.q);
    let rhs = actuation(&applied) - bias_forces(model, state);
    let chol = m.cholesky().expect("regularized mass matrix must factor");
    let qdd = chol.solve(&rhs);
    Ok(FlightAccel { qdd, applied_torque: applied, saturated, regularized })
}

/// Position- and velocity-level constraint feedback added to the
/// acceleration-level contact equation to suppress integration drift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaumgarteStabilization {
    /// Feedback bandwidth in rad/s; damping is critical (2ω on velocity, ω²
    /// on position error against the touchdown anchor).
    pub omega: f64,
}

/// Stance-phase constrained dynamics: solves the KKT system
///
/// ```text
/// [ M  −Jᵀ ][ q̈ ]   [ S·τ − h ]
/// [ J   0  ][ λ ] = [   −σ    ]
/// ```
///
/// by direct dense factorization. The returned accelerations satisfy the
/// stacked contact constraint and `grf` carries the multiplier block.
pub fn stance_dynamics(
    model: &RobotModel,
    state: &GeneralizedState,
    tau: &JointVec,
    contacts: &ContactSet,
) -> Result<StanceAccel, DynamicsError> {
    stance_dynamics_stabilized(model, state, tau, contacts, None)
}

/// [`stance_dynamics`] with optional Baumgarte constraint stabilization;
/// the integrator uses this form.
pub fn stance_dynamics_stabilized(
    model: &RobotModel,
    state: &GeneralizedState,
    tau: &JointVec,
    contacts: &ContactSet,
    stabilization: Option<BaumgarteStabilization>,
) -> Result<StanceAccel, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFiniteState);
    }
    let legs = contacts.active_legs();
    if legs.is_empty() {
        return Err(DynamicsError::NoContact);
    }
    let (applied, saturated) = saturate_torque(tau, &model.tau_max);
    let (m, regularized) = factorable_mass(model, &state.q);

    let nc = 2 * legs.len();
    let dim = N_STATE + nc;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);

    kkt.view_mut((0, 0), (N_STATE, N_STATE)).copy_from(&m);
    let top = actuation(&applied) - bias_forces(model, state);
    rhs.rows_mut(0, N_STATE).copy_from(&top);

    for (k, &leg) in legs.iter().enumerate() {
        let j = foot_jacobian(model, &state.q, leg);
        let row = N_STATE + 2 * k;
        for c in 0..N_STATE {
            kkt[(row, c)] = j[(0, c)];
            kkt[(row + 1, c)] = j[(1, c)];
            kkt[(c, row)] = -j[(0, c)];
            kkt[(c, row + 1)] = -j[(1, c)];
        }
        let mut accel_rhs = -bias_acceleration(model, state, leg);
        if let Some(stab) = stabilization {
            let anchor = contacts.anchor(leg).expect("active leg has an anchor");
            let pos_err = foot_position(model, &state.q, leg) - anchor;
            let vel = foot_velocity(model, state, leg);
            accel_rhs -= 2.0 * stab.omega * vel + stab.omega * stab.omega * pos_err;
        }
        rhs[row] = accel_rhs.x;
        rhs[row + 1] = accel_rhs.y;
    }

    let lu = kkt.lu();
    let rcond = u_diagonal_rcond(lu.u());
    if rcond < KKT_RCOND_LIMIT {
        return Err(DynamicsError::DegenerateContact { legs, rcond });
    }
    let sol = lu.solve(&rhs).ok_or(DynamicsError::DegenerateContact {
        legs: contacts.active_legs(),
        rcond,
    })?;

    let qdd = StateVec::from_iterator(sol.rows(0, N_STATE).iter().copied());
    let mut grf = GroundReaction::default();
    for (k, &leg) in legs.iter().enumerate() {
        let lam = Vector2::new(sol[N_STATE + 2 * k], sol[N_STATE + 2 * k + 1]);
        match leg {
            Leg::Front => grf.front = Some(lam),
            Leg::Rear => grf.rear = Some(lam),
        }
    }
    Ok(StanceAccel { qdd, grf, applied_torque: applied, saturated, regularized })
}

/// Result of an inelastic touchdown impulse.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactResult {
    /// Post-impact generalized velocity with zero foot velocity at every
    /// active contact.
    pub qd_post: StateVec,
    /// Contact impulse in N·s per active leg.
    pub impulse: GroundReaction,
    pub regularized: bool,
}

/// Inelastic impact map applied when feet strike the ground: projects the
/// incoming velocity onto the contact-consistent subspace,
///
/// ```text
/// [ M  −Jᵀ ][ q̇⁺ ]   [ M·q̇⁻ ]
/// [ J   0  ][ Λ  ] = [   0   ]
/// ```
///
/// conserving generalized momentum up to the constraint impulse `Jᵀ·Λ` and
/// never increasing kinetic energy.
pub fn touchdown_impulse(
    model: &RobotModel,
    state: &GeneralizedState,
    contacts: &ContactSet,
) -> Result<ImpactResult, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFiniteState);
    }
    let legs = contacts.active_legs();
    if legs.is_empty() {
        return Err(DynamicsError::NoContact);
    }
    let (m, regularized) = factorable_mass(model, &state.q);

    let nc = 2 * legs.len();
    let dim = N_STATE + nc;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);

    kkt.view_mut((0, 0), (N_STATE, N_STATE)).copy_from(&m);
    let momentum = m * state.qd;
    rhs.rows_mut(0, N_STATE).copy_from(&momentum);

    for (k, &leg) in legs.iter().enumerate() {
        let j = foot_jacobian(model, &state.q, leg);
        let row = N_STATE + 2 * k;
        for c in 0..N_STATE {
            kkt[(row, c)] = j[(0, c)];
            kkt[(row + 1, c)] = j[(1, c)];
            kkt[(c, row)] = -j[(0, c)];
            kkt[(c, row + 1)] = -j[(1, c)];
        }
    }

    let lu = kkt.lu();
    let rcond = u_diagonal_rcond(lu.u());
    if rcond < KKT_RCOND_LIMIT {
        return Err(DynamicsError::DegenerateContact { legs, rcond });
    }
    let sol = lu.solve(&rhs).ok_or(DynamicsError::DegenerateContact {
        legs: contacts.active_legs(),
        rcond,
    })?;

    let qd_post = StateVec::from_iterator(sol.rows(0, N_STATE).iter().copied());
    let mut impulse = GroundReaction::default();
    for (k, &leg) in legs.iter().enumerate() {
        let lam = Vector2::new(sol[N_STATE + 2 * k], sol[N_STATE + 2 * k + 1]);
        match leg {
            Leg::Front => impulse.front = Some(lam),
            Leg::Rear => impulse.rear = Some(lam),
        }
    }
    Ok(ImpactResult { qd_post, impulse, regularized })
}

/// Cheap reciprocal-condition estimate from the LU factor's diagonal.
fn u_diagonal_rcond(u: DMatrix<f64>) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..u.nrows() {
        let v = u[(i, i)].abs();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == 0.0 {
        0.0
    } else {
        lo / hi
    }
}

/// Whole-body center of mass: world position and velocity.
pub fn center_of_mass(
    model: &RobotModel,
    state: &GeneralizedState,
) -> (Vector2<f64>, Vector2<f64>) {
    let q = &state.q;
    let qd = &state.qd;
    let base = Vector2::new(q[0], q[1]);
    let v_base = Vector2::new(qd[0], qd[1]);
    let mut p = model.torso_mass * base;
    let mut v = model.torso_mass * v_base;
    for leg in Leg::ALL {
        let it = leg.thigh_index();
        let ic = leg.calf_index();
        let phi_t = q[it];
        let phi_tc = q[it] + q[ic];
        let w_t = qd[it];
        let w_tc = qd[it] + qd[ic];
        let hip = base + model.hip_offset(leg);
        let thigh_com = hip + model.thigh.com_offset * seg_dir(phi_t);
        let calf_com = hip
            + model.thigh.length * seg_dir(phi_t)
            + model.calf.com_offset * seg_dir(phi_tc);
        let thigh_vel = v_base + model.thigh.com_offset * seg_dir_deriv(phi_t) * w_t;
        let calf_vel = v_base
            + model.thigh.length * seg_dir_deriv(phi_t) * w_t
            + model.calf.com_offset * seg_dir_deriv(phi_tc) * w_tc;
        p += model.thigh.mass * thigh_com + model.calf.mass * calf_com;
        v += model.thigh.mass * thigh_vel + model.calf.mass * calf_vel;
    }
    (p / model.total_mass(), v / model.total_mass())
}

/// Total potential energy with the ground plane as datum.
pub fn potential_energy(model: &RobotModel, q: &StateVec) -> f64 {
    let g = model.gravity;
    let mut v = model.torso_mass * g * q[1];
    for leg in Leg::ALL {
        let it = leg.thigh_index();
        let ic = leg.calf_index();
        let hip_z = q[1] + model.hip_offset(leg).y;
        let thigh_z = hip_z - model.thigh.com_offset * q[it].cos();
        let calf_z = hip_z
            - model.thigh.length * q[it].cos()
            - model.calf.com_offset * (q[it] + q[ic]).cos();
        v += model.thigh.mass * g * thigh_z + model.calf.mass * g * calf_z;
    }
    v
}

/// Total kinetic energy `½·q̇ᵀM(q)·q̇`.
pub fn kinetic_energy(model: &RobotModel, state: &GeneralizedState) -> f64 {
    0.5 * (state.qd.transpose() * mass_matrix(model, &state.q) * state.qd)[0]
}

/// Total mechanical energy; conserved in unactuated flight.
pub fn total_energy(model: &RobotModel, state: &GeneralizedState) -> f64 {
    kinetic_energy(model, state) + potential_energy(model, &state.q)
}

//! Planar robot description and core state types.
//!
//! The robot is a sagittal-plane reduction of a pronking quadruped: a torso
//! with locked pitch plus two lumped leg pairs (front, rear), each a
//! thigh-calf chain. Generalized coordinates are ordered
//! `[x, z, thigh_front, calf_front, thigh_rear, calf_rear]`.

use nalgebra::{SMatrix, SVector, Vector2};
use thiserror::Error;

/// Base (floating torso) coordinate count: x, z.
pub const N_BASE: usize = 2;
/// Actuated joint count: front thigh, front calf, rear thigh, rear calf.
pub const N_JOINTS: usize = 4;
/// Total generalized coordinate count.
pub const N_STATE: usize = N_BASE + N_JOINTS;

/// Generalized position or velocity vector.
pub type StateVec = SVector<f64, N_STATE>;
/// Actuated-joint vector (torques, errors, references).
pub type JointVec = SVector<f64, N_JOINTS>;
/// Joint-space mass matrix.
pub type MassMatrix = SMatrix<f64, N_STATE, N_STATE>;

/// Lumped leg pair identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leg {
    Front,
    Rear,
}

impl Leg {
    pub const ALL: [Leg; 2] = [Leg::Front, Leg::Rear];

    /// Column index of this leg's thigh coordinate in a [`StateVec`].
    pub fn thigh_index(self) -> usize {
        match self {
            Leg::Front => N_BASE,
            Leg::Rear => N_BASE + 2,
        }
    }

    /// Column index of this leg's calf coordinate in a [`StateVec`].
    pub fn calf_index(self) -> usize {
        self.thigh_index() + 1
    }

    /// Index of this leg's thigh in a [`JointVec`].
    pub fn joint_offset(self) -> usize {
        self.thigh_index() - N_BASE
    }
}

/// One rigid link of a leg chain (a lumped left/right pair).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    /// Pair mass in kg.
    pub mass: f64,
    /// Link length in m (pivot to distal joint).
    pub length: f64,
    /// Center-of-mass distance from the proximal pivot in m.
    pub com_offset: f64,
    /// Rotational inertia about the pair's center of mass in kg·m².
    pub inertia: f64,
}

/// Physical parameters of the planar pronking robot.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    /// Torso mass in kg.
    pub torso_mass: f64,
    /// Torso inertia about its center of mass in kg·m². Unused while pitch
    /// is locked, kept for completeness.
    pub torso_inertia: f64,
    /// Lumped thigh pair.
    pub thigh: LinkParams,
    /// Lumped calf pair.
    pub calf: LinkParams,
    /// Horizontal hip mounting offset from the torso origin in m
    /// (+ for front, − for rear).
    pub hip_offset_x: f64,
    /// Vertical hip mounting offset from the torso origin in m.
    pub hip_offset_z: f64,
    /// Lower joint limits `[thigh_f, calf_f, thigh_r, calf_r]` in rad.
    pub q_min: JointVec,
    /// Upper joint limits in rad.
    pub q_max: JointVec,
    /// Joint velocity limits in rad/s.
    pub qd_max: JointVec,
    /// Joint torque limits in N·m (lumped pair).
    pub tau_max: JointVec,
    /// Ground friction coefficient.
    pub friction: f64,
    /// Gravitational acceleration in m/s².
    pub gravity: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{field} must be strictly positive, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error("joint limit q_min[{index}] = {min} must be below q_max[{index}] = {max}")]
    InvertedLimits { index: usize, min: f64, max: f64 },
}

impl RobotModel {
    /// Default parameters: an A1-scale planar reduction with left/right legs
    /// lumped into pairs of doubled mass and torque.
    pub fn default_planar() -> Self {
        RobotModel {
            torso_mass: 6.0,
            torso_inertia: 0.10,
            thigh: LinkParams {
                mass: 2.0,
                length: 0.2,
                com_offset: 0.1,
                inertia: 2.0 * 1.0 * 0.2 * 0.2 / 12.0,
            },
            calf: LinkParams {
                mass: 0.4,
                length: 0.2,
                com_offset: 0.1,
                inertia: 2.0 * 0.2 * 0.2 * 0.2 / 12.0,
            },
            hip_offset_x: 0.18,
            hip_offset_z: 0.0,
            q_min: JointVec::new(-1.6, -2.6, -1.6, -2.6),
            q_max: JointVec::new(1.6, 0.0, 1.6, 0.0),
            qd_max: JointVec::repeat(21.0),
            tau_max: JointVec::repeat(67.0),
            friction: 0.6,
            gravity: 9.81,
        }
    }

    /// Check the physical-parameter invariants. Test fixtures may skip this
    /// (e.g. massless legs); configs loaded from disk must not.
    pub fn validate(&self) -> Result<(), ModelError> {
        let positives = [
            ("torso_mass", self.torso_mass),
            ("thigh.mass", self.thigh.mass),
            ("thigh.length", self.thigh.length),
            ("thigh.inertia", self.thigh.inertia),
            ("calf.mass", self.calf.mass),
            ("calf.length", self.calf.length),
            ("calf.inertia", self.calf.inertia),
            ("friction", self.friction),
            ("gravity", self.gravity),
        ];
        for (field, value) in positives {
            if !(value > 0.0) {
                return Err(ModelError::NonPositive { field, value });
            }
        }
        for i in 0..N_JOINTS {
            if !(self.q_min[i] < self.q_max[i]) {
                return Err(ModelError::InvertedLimits {
                    index: i,
                    min: self.q_min[i],
                    max: self.q_max[i],
                });
            }
            if !(self.tau_max[i] > 0.0) {
                return Err(ModelError::NonPositive { field: "tau_max", value: self.tau_max[i] });
            }
            if !(self.qd_max[i] > 0.0) {
                return Err(ModelError::NonPositive { field: "qd_max", value: self.qd_max[i] });
            }
        }
        Ok(())
    }

    /// Hip pivot offset from the torso origin for `leg`.
    pub fn hip_offset(&self, leg: Leg) -> Vector2<f64> {
        let sign = match leg {
            Leg::Front => 1.0,
            Leg::Rear => -1.0,
        };
        Vector2::new(sign * self.hip_offset_x, self.hip_offset_z)
    }

    /// Total robot mass (torso plus both lumped leg pairs).
    pub fn total_mass(&self) -> f64 {
        self.torso_mass + 2.0 * (self.thigh.mass + self.calf.mass)
    }

    /// Leg reach bounds `[min, max]` of the hip-to-foot distance.
    pub fn leg_reach(&self) -> (f64, f64) {
        let lo = (self.thigh.length - self.calf.length).abs();
        (lo, self.thigh.length + self.calf.length)
    }
}

/// Full generalized position and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizedState {
    pub q: StateVec,
    pub qd: StateVec,
}

impl GeneralizedState {
    pub fn new(q: StateVec, qd: StateVec) -> Self {
        GeneralizedState { q, qd }
    }

    pub fn zero() -> Self {
        GeneralizedState { q: StateVec::zeros(), qd: StateVec::zeros() }
    }

    /// Torso position (x, z).
    pub fn base_position(&self) -> Vector2<f64> {
        Vector2::new(self.q[0], self.q[1])
    }

    /// Torso velocity (ẋ, ż).
    pub fn base_velocity(&self) -> Vector2<f64> {
        Vector2::new(self.qd[0], self.qd[1])
    }

    /// Actuated joint angles as a [`JointVec`].
    pub fn joint_positions(&self) -> JointVec {
        JointVec::new(self.q[2], self.q[3], self.q[4], self.q[5])
    }

    /// Actuated joint rates as a [`JointVec`].
    pub fn joint_velocities(&self) -> JointVec {
        JointVec::new(self.qd[2], self.qd[3], self.qd[4], self.qd[5])
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).all(|v| v.is_finite())
    }
}

/// Stance contact bookkeeping: which lumped legs are pinned and where.
///
/// An anchor is present exactly when the leg is in contact; it is the world
/// foot position recorded at touchdown.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContactSet {
    pub front: Option<Vector2<f64>>,
    pub rear: Option<Vector2<f64>>,
}

impl ContactSet {
    pub fn flight() -> Self {
        ContactSet::default()
    }

    pub fn anchor(&self, leg: Leg) -> Option<Vector2<f64>> {
        match leg {
            Leg::Front => self.front,
            Leg::Rear => self.rear,
        }
    }

    pub fn set_anchor(&mut self, leg: Leg, point: Vector2<f64>) {
        match leg {
            Leg::Front => self.front = Some(point),
            Leg::Rear => self.rear = Some(point),
        }
    }

    pub fn in_contact(&self, leg: Leg) -> bool {
        self.anchor(leg).is_some()
    }

    pub fn any_contact(&self) -> bool {
        self.front.is_some() || self.rear.is_some()
    }

    /// Contacting legs in the fixed (front, rear) order.
    pub fn active_legs(&self) -> Vec<Leg> {
        Leg::ALL.iter().copied().filter(|l| self.in_contact(*l)).collect()
    }
}

/// Ground reaction forces, reported only for legs in contact.
/// Components are (tangential λ_t, normal λ_n) in N.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroundReaction {
    pub front: Option<Vector2<f64>>,
    pub rear: Option<Vector2<f64>>,
}

impl GroundReaction {
    pub fn leg(&self, leg: Leg) -> Option<Vector2<f64>> {
        match leg {
            Leg::Front => self.front,
            Leg::Rear => self.rear,
        }
    }

    /// Sum of normal components over contacting legs.
    pub fn total_normal(&self) -> f64 {
        self.front.map_or(0.0, |f| f.y) + self.rear.map_or(0.0, |f| f.y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_is_valid() {
        RobotModel::default_planar().validate().unwrap();
    }

    #[test]
    fn validation_rejects_nonpositive_mass() {
        let mut model = RobotModel::default_planar();
        model.torso_mass = 0.0;
        assert_eq!(
            model.validate(),
            Err(ModelError::NonPositive { field: "torso_mass", value: 0.0 })
        );
    }

    #[test]
    fn validation_rejects_inverted_limits() {
        let mut model = RobotModel::default_planar();
        model.q_min[1] = 0.5;
        model.q_max[1] = -0.5;
        assert!(matches!(model.validate(), Err(ModelError::InvertedLimits { index: 1, .. })));
    }

    #[test]
    fn contact_set_anchor_iff_in_contact() {
        let mut contacts = ContactSet::flight();
        assert!(!contacts.any_contact());
        contacts.set_anchor(Leg::Front, Vector2::new(0.2, 0.0));
        assert!(contacts.in_contact(Leg::Front));
        assert!(!contacts.in_contact(Leg::Rear));
        assert_eq!(contacts.active_legs(), vec![Leg::Front]);
    }

    #[test]
    fn leg_indices_match_coordinate_order() {
        assert_eq!(Leg::Front.thigh_index(), 2);
        assert_eq!(Leg::Front.calf_index(), 3);
        assert_eq!(Leg::Rear.thigh_index(), 4);
        assert_eq!(Leg::Rear.calf_index(), 5);
        assert_eq!(Leg::Rear.joint_offset(), 2);
    }
}

//! Master-to-slave command generation: scaled incremental translation and
//! mirrored orientation.
//!
//! ```text
//! p_sm[n] = scale * (p_m[n] - p_m[n-1]) + reference
//! q_sm[n] = q_m[n]
//! ```
//!
//! In the default [`ReferenceMode::Integrator`] mode `reference` is the
//! previous command, seeded from the delayed slave feedback at engage time.
//! [`ReferenceMode::LatestFeedback`] instead takes `reference` from the most
//! recent (delayed) slave position reported through
//! [`TeleopState::observe_feedback`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    #[default]
    Integrator,
    LatestFeedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeleopParams {
    /// Translation scale from master to slave, in (0, 1].
    pub scale: f64,
    pub reference_mode: ReferenceMode,
}

impl Default for TeleopParams {
    fn default() -> Self {
        TeleopParams {
            scale: 0.2,
            reference_mode: ReferenceMode::Integrator,
        }
    }
}

impl TeleopParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::invalid(format!(
                "teleop scale must lie in (0, 1], got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TeleopState {
    pub prev_master: Pose,
    pub reference: Vec3,
    pub engaged: bool,
    latest_feedback: Option<Vec3>,
}

impl TeleopState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Couples master and slave: the reference becomes the latest delayed
    /// slave position and the current master pose becomes the increment origin.
    pub fn engage(&mut self, latest_feedback: &Pose, master: &Pose) {
        self.reference = latest_feedback.translation;
        self.prev_master = *master;
        self.latest_feedback = Some(latest_feedback.translation);
        self.engaged = true;
    }

    pub fn disengage(&mut self) {
        self.engaged = false;
    }

    /// Records the newest delayed slave position.
    pub fn observe_feedback(&mut self, slave_position: Vec3) {
        self.latest_feedback = Some(slave_position);
    }

    /// Produces the slave target `s_m[n]` for master pose `m[n]`.
    pub fn step(&mut self, master: &Pose, params: &TeleopParams) -> Result<Pose> {
        if !self.engaged {
            return Err(Error::State("teleop step called while disengaged".into()));
        }
        let reference = match params.reference_mode {
            ReferenceMode::Integrator => self.reference,
            ReferenceMode::LatestFeedback => self.latest_feedback.unwrap_or(self.reference),
        };
        let position = params.scale * (master.translation - self.prev_master.translation) + reference;
        self.reference = position;
        self.prev_master = *master;
        Ok(Pose::new(master.rotation, position))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Quaternion;

    fn mm(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z) * 1e-3
    }

    #[test]
    fn engage_sets_reference() {
        let mut s = TeleopState::new();
        s.engage(&Pose::from_translation(mm(100.0, 50.0, 0.0)), &Pose::IDENTITY);
        assert_eq!(s.reference, mm(100.0, 50.0, 0.0));
        assert!(s.engaged);
    }

    #[test]
    fn zero_increment_holds_feedback_position() {
        let mut s = TeleopState::new();
        let fb = Pose::from_translation(mm(12.0, -3.0, 140.0));
        let m = Pose::from_translation(Vec3::new(0.3, 0.1, 0.0));
        s.engage(&fb, &m);
        let cmd = s.step(&m, &TeleopParams::default()).unwrap();
        assert_eq!(cmd.translation, fb.translation);
    }

    #[test]
    fn scaled_increment() {
        let mut s = TeleopState::new();
        s.engage(&Pose::from_translation(mm(100.0, 50.0, 0.0)), &Pose::IDENTITY);
        let cmd = s
            .step(&Pose::from_translation(mm(10.0, 0.0, 0.0)), &TeleopParams::default())
            .unwrap();
        assert!((cmd.translation - mm(102.0, 50.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn orientation_is_mirrored() {
        let mut s = TeleopState::new();
        s.engage(&Pose::IDENTITY, &Pose::IDENTITY);
        let q = Quaternion::rz(30f64.to_radians());
        for scale in [0.1, 0.2, 1.0] {
            let p = TeleopParams { scale, ..Default::default() };
            let cmd = s.step(&Pose::from_rotation(q), &p).unwrap();
            assert_eq!(cmd.rotation, q);
        }
    }

    #[test]
    fn step_requires_engage() {
        let mut s = TeleopState::new();
        assert!(matches!(s.step(&Pose::IDENTITY, &TeleopParams::default()), Err(Error::State(_))));
    }

    #[test]
    fn reengage_has_no_jump() {
        let p = TeleopParams::default();
        let mut s = TeleopState::new();
        s.engage(&Pose::IDENTITY, &Pose::IDENTITY);
        s.step(&Pose::from_translation(mm(50.0, 0.0, 0.0)), &p).unwrap();
        s.disengage();
        let fb = Pose::from_translation(mm(9.0, 1.0, 2.0));
        let m = Pose::from_translation(mm(400.0, 0.0, 0.0));
        s.engage(&fb, &m);
        assert_eq!(s.step(&m, &p).unwrap().translation, fb.translation);
    }

    #[test]
    fn path_length_scales_exactly() {
        let p = TeleopParams::default();
        let mut s = TeleopState::new();
        let start = Pose::IDENTITY;
        s.engage(&Pose::IDENTITY, &start);
        let mut prev_m = start.translation;
        let mut prev_c = Vec3::zeros();
        let (mut master_len, mut cmd_len) = (0.0, 0.0);
        for n in 1..500 {
            let t = n as f64 * 0.01;
            let m = Pose::from_translation(Vec3::new((3.0 * t).sin(), (2.0 * t).cos() - 1.0, 0.1 * t) * 0.05);
            let c = s.step(&m, &p).unwrap().translation;
            master_len += (m.translation - prev_m).norm();
            cmd_len += (c - prev_c).norm();
            prev_m = m.translation;
            prev_c = c;
        }
        assert!((cmd_len - 0.2 * master_len).abs() < 1e-12);
    }

    #[test]
    fn latest_feedback_mode_uses_feedback() {
        let p = TeleopParams {
            reference_mode: ReferenceMode::LatestFeedback,
            ..Default::default()
        };
        let mut s = TeleopState::new();
        s.engage(&Pose::IDENTITY, &Pose::IDENTITY);
        s.observe_feedback(mm(5.0, 0.0, 0.0));
        let cmd = s.step(&Pose::from_translation(mm(10.0, 0.0, 0.0)), &p).unwrap();
        assert!((cmd.translation - mm(7.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn scale_validation() {
        assert!(TeleopParams { scale: 0.0, ..Default::default() }.validate().is_err());
        assert!(TeleopParams { scale: 1.5, ..Default::default() }.validate().is_err());
        assert!(TeleopParams::default().validate().is_ok());
    }
}

use super::{quat_to_rotation, Mat3, Quat, Vec3};

/// Rotation about the local z (up) axis.
pub fn rot_z(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// d Rz / d theta.
pub fn rot_z_derivative(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    Mat3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Heading of a rotation about world z, `atan2(R10, R00)`.
pub fn yaw_of(r: &Mat3) -> f64 {
    r[(1, 0)].atan2(r[(0, 0)])
}

/// World <- object rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `R' = R·Rz(dtheta)`, `T' = T + dT`.
    pub fn with_delta(&self, delta_translation: &Vec3, delta_yaw: f64) -> Self {
        Self {
            rotation: self.rotation * rot_z(delta_yaw),
            translation: self.translation + delta_translation,
        }
    }
}

/// Carries an object-local Gaussian mean and orientation into the world.
pub fn object_to_world(mu_o: &Vec3, q_o: Quat, pose: &RigidPose) -> (Vec3, Mat3) {
    (pose.apply(mu_o), pose.rotation * quat_to_rotation(q_o))
}

//! Pure math kernels shared by the renderer, the trainer and the ingest
//! code. Every forward kernel that sits on a learnable path has a matching
//! `*_backward` that propagates an upstream gradient to its inputs.

mod camera;
mod covariance;
mod fourier;
mod pose;
mod projection;
mod sh;

pub use camera::{Camera, CameraRecord, DEFAULT_NEAR_CLIP};
pub use covariance::{
    build_covariance, covariance_from_rotation, covariance_from_rotation_backward, normalize_quat,
    quat_to_rotation, quat_to_rotation_backward, Quat, IDENTITY_QUAT,
};
pub use fourier::{eval_fourier, fourier_basis};
pub use pose::{object_to_world, rot_z, rot_z_derivative, yaw_of, RigidPose};
pub use projection::{
    project_gaussian, project_gaussian_backward, CovGrad2, ProjectedGaussian, FRUSTUM_GUARD,
    LOW_PASS_DILATION,
};
pub use sh::{
    eval_sh_color, sh_basis, sh_basis_count, sh_color_backward, MAX_SH_DEGREE, SH_C0,
    SH_COLOR_OFFSET,
};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

pub fn mat3_from_row_major(v: &[f64; 9]) -> Mat3 {
    Mat3::from_row_slice(v)
}

pub fn mat3_to_row_major(m: &Mat3) -> [f64; 9] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

/// Orthonormal with determinant +1, up to `tol` per entry.
pub fn is_rotation(m: &Mat3, tol: f64) -> bool {
    let gram = m.transpose() * m - Mat3::identity();
    gram.iter().all(|v| v.abs() <= tol) && (m.determinant() - 1.0).abs() <= tol
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

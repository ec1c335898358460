use super::{Mat3, Vec3};
use crate::error::{Error, Result};

/// Quaternion stored as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn normalize_quat(q: Quat) -> Option<Quat> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n.is_finite() && n > 0.0) {
        return None;
    }
    Some([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Rotation matrix of a quaternion (normalized first). A zero quaternion
/// yields NaNs, which is how callers see it rejected.
pub fn quat_to_rotation(q: Quat) -> Mat3 {
    let [w, x, y, z] = normalize_quat(q).unwrap_or([f64::NAN; 4]);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of a loss w.r.t. the raw (unnormalized) quaternion given the
/// gradient w.r.t. its rotation matrix.
pub fn quat_to_rotation_backward(q: Quat, d_rot: &Mat3) -> Quat {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
    let g = d_rot;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let dn = [dw, dx, dy, dz];
    let qn = [w, x, y, z];
    let radial: f64 = dn.iter().zip(&qn).map(|(a, b)| a * b).sum();
    [
        (dn[0] - qn[0] * radial) / norm,
        (dn[1] - qn[1] * radial) / norm,
        (dn[2] - qn[2] * radial) / norm,
        (dn[3] - qn[3] * radial) / norm,
    ]
}

/// `R·S·Sᵀ·Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance_from_rotation(rot: &Mat3, log_scale: &Vec3) -> Mat3 {
    let s = log_scale.map(f64::exp);
    let mut m = *rot;
    for j in 0..3 {
        for i in 0..3 {
            m[(i, j)] *= s[j];
        }
    }
    m * m.transpose()
}

/// Backward of [`covariance_from_rotation`]. `d_cov` is the (symmetric)
/// gradient w.r.t. the full covariance matrix.
pub fn covariance_from_rotation_backward(
    rot: &Mat3,
    log_scale: &Vec3,
    d_cov: &Mat3,
) -> (Mat3, Vec3) {
    let s = log_scale.map(f64::exp);
    let mut m = *rot;
    for j in 0..3 {
        for i in 0..3 {
            m[(i, j)] *= s[j];
        }
    }
    let d_m = (d_cov + d_cov.transpose()) * m;
    let mut d_rot = d_m;
    let mut d_log = Vec3::zeros();
    for j in 0..3 {
        let mut ds = 0.0;
        for i in 0..3 {
            d_rot[(i, j)] = d_m[(i, j)] * s[j];
            ds += d_m[(i, j)] * rot[(i, j)];
        }
        d_log[j] = ds * s[j];
    }
    (d_rot, d_log)
}

/// 3D covariance of a Gaussian from its log-scales and rotation quaternion.
pub fn build_covariance(log_scale: &Vec3, q: Quat) -> Result<Mat3> {
    if !log_scale.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "log-scale".into(),
        });
    }
    if normalize_quat(q).is_none() {
        return Err(Error::NonFinite {
            context: "quaternion".into(),
        });
    }
    Ok(covariance_from_rotation(&quat_to_rotation(q), log_scale))
}

use super::{Camera, Mat3, Vec3};
use nalgebra::{Matrix2x3, Vector2};

/// Screen-space variance added to both axes of every projected Gaussian (px²).
pub const LOW_PASS_DILATION: f64 = 0.3;
/// Means projecting further than this multiple of the half image size from
/// the image centre are culled.
pub const FRUSTUM_GUARD: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: [f64; 2],
    /// Dilated screen covariance as (xx, xy, yy).
    pub cov2d: [f64; 3],
    pub view_depth: f64,
    pub source_index: usize,
}

/// Gradient w.r.t. a symmetric 2×2 matrix, stored as (xx, xy, yy). The `xy`
/// entry is the derivative w.r.t. each off-diagonal element on its own, so the
/// full gradient matrix is `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CovGrad2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

fn jacobian(cam: &Camera, p: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz * iz,
    )
}

/// EWA projection of a world-space Gaussian. `None` means culled.
pub fn project_gaussian(
    mu_w: &Vec3,
    cov_w: &Mat3,
    cam: &Camera,
    source_index: usize,
) -> Option<ProjectedGaussian> {
    let p = cam.world_to_camera(mu_w);
    if !(p.z > cam.near_clip) {
        return None;
    }
    let u = cam.fx * p.x / p.z + cam.cx;
    let v = cam.fy * p.y / p.z + cam.cy;
    let hw = 0.5 * cam.width as f64;
    let hh = 0.5 * cam.height as f64;
    if (u - hw).abs() > FRUSTUM_GUARD * hw || (v - hh).abs() > FRUSTUM_GUARD * hh {
        return None;
    }
    let t = jacobian(cam, &p) * cam.rotation;
    let c = t * cov_w * t.transpose();
    Some(ProjectedGaussian {
        mean2d: [u, v],
        cov2d: [
            c[(0, 0)] + LOW_PASS_DILATION,
            0.5 * (c[(0, 1)] + c[(1, 0)]),
            c[(1, 1)] + LOW_PASS_DILATION,
        ],
        view_depth: p.z,
        source_index,
    })
}

/// Backward of [`project_gaussian`] for a Gaussian that was not culled.
/// Returns `(dL/dμ_w, dL/dΣ_w)`; the covariance gradient is symmetric.
pub fn project_gaussian_backward(
    mu_w: &Vec3,
    cov_w: &Mat3,
    cam: &Camera,
    d_mean2d: [f64; 2],
    d_cov2d: CovGrad2,
    d_depth: f64,
) -> (Vec3, Mat3) {
    let p = cam.world_to_camera(mu_w);
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let wr = cam.rotation;
    let j = jacobian(cam, &p);
    let t = j * wr;
    let g = nalgebra::Matrix2::new(d_cov2d.xx, d_cov2d.xy, d_cov2d.xy, d_cov2d.yy);

    let d_cov_w = t.transpose() * g * t;
    let d_t = 2.0 * g * t * cov_w;
    let d_j = d_t * wr.transpose();

    let mut d_p = Vec3::new(
        d_mean2d[0] * cam.fx * iz,
        d_mean2d[1] * cam.fy * iz,
        -d_mean2d[0] * cam.fx * p.x * iz2 - d_mean2d[1] * cam.fy * p.y * iz2 + d_depth,
    );
    d_p.x += -d_j[(0, 2)] * cam.fx * iz2;
    d_p.y += -d_j[(1, 2)] * cam.fy * iz2;
    d_p.z += -d_j[(0, 0)] * cam.fx * iz2 + d_j[(0, 2)] * 2.0 * cam.fx * p.x * iz2 * iz
        - d_j[(1, 1)] * cam.fy * iz2
        + d_j[(1, 2)] * 2.0 * cam.fy * p.y * iz2 * iz;

    (wr.transpose() * d_p, d_cov_w)
}

impl ProjectedGaussian {
    pub fn mean(&self) -> Vector2<f64> {
        Vector2::new(self.mean2d[0], self.mean2d[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_covariance, rot_z, IDENTITY_QUAT};
    use proptest::prelude::*;

    fn cam() -> Camera {
        Camera::look_at(
            Vec3::new(-6.0, 0.5, 2.0),
            Vec3::new(0.0, 0.0, 0.5),
            Vec3::z(),
            110.0,
            95.0,
            128,
            96,
        )
    }

    fn forward_axis_camera() -> Camera {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 48.0,
            width: 128,
            height: 96,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            near_clip: 0.2,
        }
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let c = forward_axis_camera();
        let g = project_gaussian(&Vec3::new(0.0, 0.0, 1.0), &Mat3::identity(), &c, 0).unwrap();
        assert_eq!(g.mean2d, [64.0, 48.0]);
    }

    #[test]
    fn culled_behind_near_plane_and_outside_guard() {
        let c = forward_axis_camera();
        assert!(project_gaussian(&Vec3::new(0.0, 0.0, 0.1), &Mat3::identity(), &c, 0).is_none());
        assert!(project_gaussian(&Vec3::new(5.0, 0.0, 1.0), &Mat3::identity(), &c, 0).is_none());
    }

    #[test]
    fn small_isotropic_limit() {
        let c = forward_axis_camera();
        let (sigma, d) = (0.01, 2.0);
        let g = project_gaussian(
            &Vec3::new(0.0, 0.0, d),
            &(Mat3::identity() * sigma * sigma),
            &c,
            0,
        )
        .unwrap();
        let expect = (100.0 * sigma / d).powi(2) + LOW_PASS_DILATION;
        assert!((g.cov2d[0] - expect).abs() <= 1e-6 * expect);
        assert!((g.cov2d[2] - expect).abs() <= 1e-6 * expect);
        assert!(g.cov2d[1].abs() <= 1e-12);
    }

    fn project_point(c: &Camera, x: &Vec3) -> Vector2<f64> {
        let p = c.world_to_camera(x);
        Vector2::new(c.fx * p.x / p.z + c.cx, c.fy * p.y / p.z + c.cy)
    }

    proptest! {
        #[test]
        fn covariance_matches_numeric_jacobian(
            mx in -1.0f64..1.0, my in -1.0f64..1.0, mz in 0.0f64..1.0,
            ls in prop::array::uniform3(-3.0f64..-1.0),
            q in prop::array::uniform4(-1.0f64..1.0),
        ) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 0.05);
            let c = cam();
            let mu = Vec3::new(mx, my, mz);
            let cov = build_covariance(&Vec3::from(ls), q).unwrap();
            let g = project_gaussian(&mu, &cov, &c, 0).unwrap();
            let h = 1e-5;
            let mut jac = Matrix2x3::zeros();
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                let col = (project_point(&c, &(mu + e)) - project_point(&c, &(mu - e))) / (2.0 * h);
                jac.set_column(a, &col);
            }
            let oracle = jac * cov * jac.transpose();
            let got = [g.cov2d[0] - LOW_PASS_DILATION, g.cov2d[1], g.cov2d[2] - LOW_PASS_DILATION];
            let want = [oracle[(0, 0)], oracle[(0, 1)], oracle[(1, 1)]];
            let scale = want[0].abs().max(want[2].abs());
            for k in 0..3 {
                prop_assert!((got[k] - want[k]).abs() <= 1e-4 * scale);
            }
        }

        #[test]
        fn rigid_invariance(
            yaw in -3.0f64..3.0, tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -2.0f64..2.0,
            mx in -1.0f64..1.0, my in -1.0f64..1.0, mz in 0.0f64..1.0,
            ls in prop::array::uniform3(-3.0f64..-1.0),
        ) {
            let c = cam();
            let g_rot = rot_z(yaw) * crate::geometry::quat_to_rotation([0.9, 0.2, -0.1, 0.3]);
            let g_t = Vec3::new(tx, ty, tz);
            let mu = Vec3::new(mx, my, mz);
            let r = crate::geometry::quat_to_rotation([0.3, -0.5, 0.2, 0.7]);
            let cov = crate::geometry::covariance_from_rotation(&r, &Vec3::from(ls));
            let a = project_gaussian(&mu, &cov, &c, 0).unwrap();

            let mut c2 = c.clone();
            c2.rotation = c.rotation * g_rot.transpose();
            c2.translation = c.translation - c2.rotation * g_t;
            let cov2 = crate::geometry::covariance_from_rotation(&(g_rot * r), &Vec3::from(ls));
            let b = project_gaussian(&(g_rot * mu + g_t), &cov2, &c2, 0).unwrap();
            for k in 0..2 {
                prop_assert!((a.mean2d[k] - b.mean2d[k]).abs() <= 1e-9);
            }
            for k in 0..3 {
                prop_assert!((a.cov2d[k] - b.cov2d[k]).abs() <= 1e-9);
            }
            prop_assert!((a.view_depth - b.view_depth).abs() <= 1e-9);
        }

        #[test]
        fn backward_matches_differences(
            mx in -1.0f64..1.0, my in -1.0f64..1.0, mz in 0.0f64..1.0,
            ls in prop::array::uniform3(-2.0f64..-0.5),
            w in prop::array::uniform6(-1.0f64..1.0),
        ) {
            let c = cam();
            let mu = Vec3::new(mx, my, mz);
            let cov = build_covariance(&Vec3::from(ls), [0.8, 0.1, 0.4, -0.3]).unwrap();
            let loss = |m: &Vec3, s: &Mat3| {
                let g = project_gaussian(m, s, &c, 0).unwrap();
                w[0] * g.mean2d[0] + w[1] * g.mean2d[1] + w[2] * g.cov2d[0] + w[3] * g.cov2d[1] * 2.0
                    + w[4] * g.cov2d[2] + w[5] * g.view_depth
            };
            let (dm, dc) = project_gaussian_backward(
                &mu, &cov, &c, [w[0], w[1]], CovGrad2 { xx: w[2], xy: w[3], yy: w[4] }, w[5],
            );
            let h = 1e-5;
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                let fd = (loss(&(mu + e), &cov) - loss(&(mu - e), &cov)) / (2.0 * h);
                prop_assert!((fd - dm[a]).abs() <= 1e-5 * (1.0 + fd.abs()), "axis {} fd {} an {}", a, fd, dm[a]);
            }
            for i in 0..3 {
                for j in 0..3 {
                    let mut e = Mat3::zeros();
                    e[(i, j)] = h;
                    let fd = (loss(&mu, &(cov + e)) - loss(&mu, &(cov - e))) / (2.0 * h);
                    prop_assert!((fd - dc[(i, j)]).abs() <= 1e-5 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn identity_quat_projects() {
        let c = cam();
        let cov = build_covariance(&Vec3::repeat(-2.0), IDENTITY_QUAT).unwrap();
        assert!(project_gaussian(&Vec3::zeros(), &cov, &c, 3).is_some());
    }
}

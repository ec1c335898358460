use proptest::prelude::*;
use urbansplat::geometry::{logit, Camera, Vec3, SH_C0, SH_COLOR_OFFSET};
use urbansplat::raster::{
    assemble_world_set, render, render_backward, render_decomposed, render_reference,
    DecomposeTarget, IncludeFilter, Origin, RenderConfig, UpstreamGrads,
};
use urbansplat::scene::{GaussianPoint, SceneGraph};
use urbansplat::synth::{random_camera, random_scene, RandomSceneSpec};

fn camera(w: u32, h: u32) -> Camera {
    Camera::look_at(
        Vec3::new(0.0, -6.0, 0.0),
        Vec3::zeros(),
        Vec3::new(0.0, 0.0, 1.0),
        40.0,
        40.0,
        w,
        h,
    )
}

/// Degree-0 scene with no points and the given class count.
fn bare_scene(num_classes: usize) -> SceneGraph {
    random_scene(
        0,
        &RandomSceneSpec {
            background_points: 0,
            objects: 0,
            sh_degree: 0,
            num_classes,
            ..Default::default()
        },
    )
}

/// DC coefficients producing `rgb` after the SH offset.
fn dc_for(rgb: [f64; 3]) -> Vec<f64> {
    rgb.iter().map(|c| (c - SH_COLOR_OFFSET) / SH_C0).collect()
}

/// Adds a small isotropic background Gaussian on the ray through the centre
/// of pixel `(x, y)` at distance `dist` from the camera. Returns its view
/// depth.
fn push_on_pixel(
    scene: &mut SceneGraph,
    cam: &Camera,
    x: usize,
    y: usize,
    dist: f64,
    opacity: f64,
    rgb: [f64; 3],
) -> f64 {
    let d = cam
        .ray_direction(x as f64 + 0.5, y as f64 + 0.5)
        .normalize();
    let p = cam.center() + d * dist;
    let sem = vec![0.0; scene.num_classes];
    scene.background.push(GaussianPoint {
        position: p.into(),
        log_scale: [-4.0; 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity_logit: logit(opacity),
        appearance: &dc_for(rgb),
        semantic: &sem,
    });
    cam.world_to_camera(&p).z
}

fn no_sky() -> RenderConfig {
    RenderConfig {
        composite_sky: false,
        ..RenderConfig::at(0)
    }
}

fn no_stop(cfg: RenderConfig) -> RenderConfig {
    RenderConfig {
        saturation_stop: f64::MIN_POSITIVE,
        ..cfg
    }
}

fn oracle_spec() -> RandomSceneSpec {
    RandomSceneSpec {
        background_points: 300,
        objects: 2,
        points_per_object: 40,
        ..Default::default()
    }
}

#[test]
fn empty_scene_shows_the_sky() {
    let scene = bare_scene(8);
    let cam = camera(24, 16);
    for out in [
        render(&scene, &cam, &RenderConfig::at(0)).unwrap(),
        render_reference(&scene, &cam, &RenderConfig::at(0)).unwrap(),
    ] {
        assert!(out.opacity.data.iter().all(|v| *v == 0.0));
        for y in 0..16 {
            for x in 0..24 {
                let want = scene
                    .sky
                    .sample(&cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5));
                let i = (y * 24 + x) * 3;
                assert_eq!(&out.color.data[i..i + 3], &want);
            }
        }
    }
}

#[test]
fn single_opaque_gaussian() {
    let cam = camera(16, 16);
    let mut scene = bare_scene(8);
    push_on_pixel(&mut scene, &cam, 7, 9, 6.0, 1.0 - 1e-9, [0.2, 0.6, 0.9]);
    for out in [
        render(&scene, &cam, &no_sky()).unwrap(),
        render_reference(&scene, &cam, &no_sky()).unwrap(),
    ] {
        let p = 9 * 16 + 7;
        assert!((out.opacity.data[p] - 0.99).abs() < 1e-12);
        for (c, want) in out.color.data[p * 3..p * 3 + 3].iter().zip([0.2, 0.6, 0.9]) {
            assert!((c - 0.99 * want).abs() < 1e-12, "{c}");
        }
    }
}

#[test]
fn two_half_transparent_gaussians() {
    let cam = camera(16, 16);
    let mut scene = bare_scene(8);
    let (c1, c2) = ([0.8, 0.1, 0.3], [0.2, 0.7, 0.5]);
    // Inserted back to front so the sort has to reorder them.
    let z2 = push_on_pixel(&mut scene, &cam, 4, 5, 8.0, 0.5, c2);
    let z1 = push_on_pixel(&mut scene, &cam, 4, 5, 5.0, 0.5, c1);
    for out in [
        render(&scene, &cam, &no_sky()).unwrap(),
        render_reference(&scene, &cam, &no_sky()).unwrap(),
    ] {
        let p = 5 * 16 + 4;
        assert!((out.opacity.data[p] - 0.75).abs() < 1e-12);
        for k in 0..3 {
            let want = 0.5 * c1[k] + 0.25 * c2[k];
            assert!((out.color.data[p * 3 + k] - want).abs() < 1e-12);
        }
        assert!((out.depth.data[p] - (0.5 * z1 + 0.25 * z2)).abs() < 1e-12);
    }
}

#[test]
fn tile_sizes_agree_bitwise() {
    for seed in 0..4 {
        let scene = random_scene(seed, &oracle_spec());
        let cam = random_camera(seed, 6.0, 96, 80);
        let base = render(&scene, &cam, &RenderConfig::at(2)).unwrap();
        for ts in [1, 8, 32, 200] {
            let cfg = RenderConfig {
                tile_size: ts,
                ..RenderConfig::at(2)
            };
            let out = render(&scene, &cam, &cfg).unwrap();
            assert_eq!(out.color, base.color, "tile {ts}");
            assert_eq!(out.opacity, base.opacity);
            assert_eq!(out.depth, base.depth);
            assert_eq!(out.semantic, base.semantic);
        }
    }
}

#[test]
fn matches_reference_without_saturation_stop() {
    for seed in 0..6 {
        let scene = random_scene(seed, &oracle_spec());
        let cam = random_camera(seed, 6.0, 64, 64);
        for ts in [8, 16, 32] {
            let cfg = no_stop(RenderConfig {
                tile_size: ts,
                ..RenderConfig::at(1)
            });
            let a = render(&scene, &cam, &cfg).unwrap();
            let b = render_reference(&scene, &cam, &cfg).unwrap();
            assert_eq!(a.color.max_abs_diff(&b.color), 0.0);
            assert_eq!(a.opacity.max_abs_diff(&b.opacity), 0.0);
            assert_eq!(a.depth.max_abs_diff(&b.depth), 0.0);
            assert_eq!(a.semantic.max_abs_diff(&b.semantic), 0.0);
        }
    }
}

#[test]
fn saturation_stop_only_drops_a_small_tail() {
    // After the stop the remaining weight is below the stop transmittance.
    let scene = random_scene(3, &oracle_spec());
    let cam = random_camera(3, 6.0, 64, 64);
    let cfg = RenderConfig {
        composite_sky: false,
        ..RenderConfig::at(1)
    };
    let a = render(&scene, &cam, &cfg).unwrap();
    let b = render_reference(&scene, &cam, &cfg).unwrap();
    assert!(a.opacity.max_abs_diff(&b.opacity) <= cfg.saturation_stop);
    let max_color = 2.0;
    assert!(a.color.max_abs_diff(&b.color) <= cfg.saturation_stop * max_color);
}

#[test]
fn same_result_on_one_or_many_threads() {
    let scene = random_scene(9, &oracle_spec());
    let cam = random_camera(9, 6.0, 80, 64);
    let run = |n: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| render(&scene, &cam, &RenderConfig::at(4)).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(1));
}

#[test]
fn weights_are_shared_between_color_and_semantics() {
    let mut scene = bare_scene(3);
    let cam = random_camera(2, 6.0, 48, 48);
    let src = random_scene(
        2,
        &RandomSceneSpec {
            background_points: 200,
            objects: 0,
            sh_degree: 0,
            num_classes: 3,
            ..Default::default()
        },
    );
    for i in 0..src.background.len() {
        let g = src.background.get(i);
        // Keep colours off the clamp at zero so colour is linear in the DC term.
        let rgb = [
            0.2 + 0.6 * (i % 5) as f64 / 4.0,
            0.3,
            0.9 - 0.1 * (i % 7) as f64,
        ];
        scene.background.push(GaussianPoint {
            appearance: &dc_for(rgb),
            semantic: &rgb,
            ..g
        });
    }
    let cfg = RenderConfig {
        composite_sky: false,
        ..RenderConfig::at(0)
    };
    let out = render(&scene, &cam, &cfg).unwrap();
    assert!(out.stats.blended > 0);
    for (c, s) in out.color.data.iter().zip(&out.semantic.data) {
        assert!((c - s).abs() <= 1e-12, "{c} vs {s}");
    }
}

#[test]
fn permuting_points_does_not_change_the_render() {
    let scene = random_scene(5, &oracle_spec());
    let cam = random_camera(5, 6.0, 64, 48);
    let n = scene.background.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let mut shuffled = scene.clone();
    shuffled.background = scene.background.select(&perm);
    let a = render(&scene, &cam, &RenderConfig::at(2)).unwrap();
    let b = render(&shuffled, &cam, &RenderConfig::at(2)).unwrap();
    assert!(a.color.max_abs_diff(&b.color) <= 1e-12);
    assert!(a.opacity.max_abs_diff(&b.opacity) <= 1e-12);
    assert!(a.depth.max_abs_diff(&b.depth) <= 1e-12);
    assert!(a.semantic.max_abs_diff(&b.semantic) <= 1e-12);
}

#[test]
fn background_only_world_set_is_the_background() {
    let spec = RandomSceneSpec {
        objects: 0,
        ..Default::default()
    };
    let scene = random_scene(1, &spec);
    let w = assemble_world_set(&scene, 3, &IncludeFilter::all());
    assert_eq!(w.len(), scene.background.len());
    for i in 0..w.len() {
        assert_eq!(w.positions[i], Vec3::from(scene.background.positions[i]));
        assert_eq!(w.log_scales[i], Vec3::from(scene.background.log_scales[i]));
        assert_eq!(w.opacities[i], scene.background.opacity(i));
        assert_eq!(w.semantic_of(i), scene.background.semantic.point(i));
        assert_eq!(w.origins[i], Origin::Background(i));
    }
}

#[test]
fn identity_pose_object_is_appended_verbatim() {
    let mut scene = random_scene(2, &RandomSceneSpec::default());
    let obj = &mut scene.objects[0];
    for t in 0..obj.track.frame_count() {
        obj.track.rotations[t] = urbansplat::geometry::Mat3::identity();
        obj.track.translations[t] = Vec3::zeros();
        obj.track.delta_translations[t] = Vec3::zeros();
        obj.track.delta_yaws[t] = 0.0;
    }
    let w = assemble_world_set(&scene, 1, &IncludeFilter::all());
    let nb = scene.background.len();
    let obj = &scene.objects[0];
    assert_eq!(w.len(), nb + obj.gaussians.len());
    for i in 0..obj.gaussians.len() {
        assert_eq!(w.positions[nb + i], Vec3::from(obj.gaussians.positions[i]));
        assert_eq!(w.origins[nb + i], Origin::Object(0, i));
        let sem = w.semantic_of(nb + i);
        let l = obj.gaussians.semantic.point(i)[0];
        for (c, v) in sem.iter().enumerate() {
            assert_eq!(*v, if c == scene.vehicle_class { l } else { 0.0 });
        }
    }
}

#[test]
fn object_points_follow_the_corrected_pose() {
    let scene = random_scene(
        4,
        &RandomSceneSpec {
            objects: 3,
            ..Default::default()
        },
    );
    for t in [0, 3, 7] {
        let w = assemble_world_set(&scene, t, &IncludeFilter::all());
        for (i, origin) in w.origins.iter().enumerate() {
            if let Origin::Object(k, j) = *origin {
                let tr = &scene.objects[k].track;
                let yaw = tr.delta_yaws[t];
                let rz = urbansplat::geometry::Mat3::new(
                    yaw.cos(),
                    -yaw.sin(),
                    0.0,
                    yaw.sin(),
                    yaw.cos(),
                    0.0,
                    0.0,
                    0.0,
                    1.0,
                );
                let r = tr.rotations[t] * rz;
                let want = r * Vec3::from(scene.objects[k].gaussians.positions[j])
                    + tr.translations[t]
                    + tr.delta_translations[t];
                assert!((w.positions[i] - want).norm() < 1e-12);
            }
        }
    }
}

#[test]
fn untracked_objects_are_skipped() {
    let mut scene = random_scene(6, &RandomSceneSpec::default());
    scene.objects[0].track.valid[2] = false;
    let w = assemble_world_set(&scene, 2, &IncludeFilter::all());
    assert_eq!(w.len(), scene.background.len());
    let w = assemble_world_set(&scene, 3, &IncludeFilter::all());
    assert_eq!(w.len(), scene.total_points());
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let scene = random_scene(7, &oracle_spec());
    let cam = random_camera(7, 6.0, 32, 32);
    let (g, _) = render_backward(
        &scene,
        &cam,
        &RenderConfig::at(1),
        &UpstreamGrads::default(),
    )
    .unwrap();
    assert!(g.is_zero());
}

#[test]
fn upstream_shape_is_checked() {
    let scene = random_scene(7, &oracle_spec());
    let cam = random_camera(7, 6.0, 32, 32);
    let up = UpstreamGrads {
        color: Some(urbansplat::image::Image::new(31, 32, 3)),
        ..Default::default()
    };
    assert!(render_backward(&scene, &cam, &RenderConfig::at(1), &up).is_err());
}

#[test]
fn decomposition_trivial_cases() {
    let scene = random_scene(8, &oracle_spec());
    let cam = random_camera(8, 6.0, 48, 48);
    let cfg = RenderConfig::at(2);
    let full = render(&scene, &cam, &cfg).unwrap();
    let (all, _) = render_decomposed(&scene, &cam, &cfg, DecomposeTarget::All).unwrap();
    assert_eq!(all, full);

    let bg_only = random_scene(
        8,
        &RandomSceneSpec {
            objects: 0,
            ..Default::default()
        },
    );
    let (bg, obj_alpha) =
        render_decomposed(&bg_only, &cam, &cfg, DecomposeTarget::Background).unwrap();
    assert_eq!(bg, render(&bg_only, &cam, &cfg).unwrap());
    assert!(obj_alpha.data.iter().all(|v| *v == 0.0));

    assert!(render_decomposed(&scene, &cam, &cfg, DecomposeTarget::Object(99)).is_err());
}

#[test]
fn object_in_front_composites_over_background() {
    // Object points near the camera, background far behind: the full render
    // is the object layer over the background layer.
    let cam = camera(48, 48);
    let mut scene = random_scene(
        10,
        &RandomSceneSpec {
            background_points: 150,
            objects: 1,
            points_per_object: 60,
            ..Default::default()
        },
    );
    for p in &mut scene.background.positions {
        p[1] += 4.0;
    }
    let track = &mut scene.objects[0].track;
    for t in 0..track.frame_count() {
        track.translations[t] = Vec3::new(0.0, -3.0, 0.0);
        track.delta_translations[t] = Vec3::zeros();
    }
    // The saturation stop cuts the two layers at different points, so the
    // layer identity is checked with it off.
    let cfg = no_stop(RenderConfig {
        composite_sky: false,
        ..RenderConfig::at(1)
    });
    let full = render(&scene, &cam, &cfg).unwrap();
    let (obj, obj_alpha) =
        render_decomposed(&scene, &cam, &cfg, DecomposeTarget::Object(1)).unwrap();
    let (bg, _) = render_decomposed(&scene, &cam, &cfg, DecomposeTarget::Background).unwrap();
    assert_eq!(obj_alpha, obj.opacity);
    assert!(obj.opacity.data.iter().any(|v| *v > 0.1));
    for p in 0..48 * 48 {
        let t_obj = 1.0 - obj.opacity.data[p];
        let o = 1.0 - t_obj * (1.0 - bg.opacity.data[p]);
        assert!((full.opacity.data[p] - o).abs() <= 1e-12);
        for k in 0..3 {
            let c = obj.color.data[p * 3 + k] + t_obj * bg.color.data[p * 3 + k];
            assert!((full.color.data[p * 3 + k] - c).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn opacity_grows_as_farther_points_are_added(seed in 0u64..10_000, k in 1usize..60) {
        let spec = RandomSceneSpec { background_points: 60, objects: 0, ..Default::default() };
        let scene = random_scene(seed, &spec);
        let cam = random_camera(seed, 6.0, 32, 32);
        let mut order: Vec<usize> = (0..scene.background.len()).collect();
        let depth = |i: usize| cam.world_to_camera(&Vec3::from(scene.background.positions[i])).z;
        order.sort_by(|a, b| depth(*a).total_cmp(&depth(*b)));
        let cfg = RenderConfig::at(0);
        let mut fewer = scene.clone();
        fewer.background = scene.background.select(&order[..k]);
        let mut more = scene.clone();
        more.background = scene.background.select(&order[..k + 1]);
        let a = render(&fewer, &cam, &cfg).unwrap();
        let b = render(&more, &cam, &cfg).unwrap();
        for (x, y) in a.opacity.data.iter().zip(&b.opacity.data) {
            prop_assert!(y >= x);
            prop_assert!((0.0..=1.0).contains(y));
        }
    }
}

use proptest::prelude::*;
use urbansplat::ingest::{init_scene, Dataset, InitConfig};
use urbansplat::raster::gradcheck::{gradient_values, ParamClass};
use urbansplat::raster::{render, PointStat, RenderConfig};
use urbansplat::scene::SceneGraph;
use urbansplat::synth::{generate, random_scene, RandomSceneSpec, SynthSpec};
use urbansplat::train::{
    densify_and_prune, train, train_to_dir, ControlParams, DensifyConfig, LossWeights, PointAccum,
    TrainConfig, Trainer, ADAM_EPS,
};
use urbansplat::Error;

fn small(objects: usize) -> SynthSpec {
    SynthSpec {
        width: 32,
        height: 24,
        focal: 30.0,
        num_frames: 4,
        objects,
        lidar_rays: [16, 12],
        sky_resolution: 8,
        ..Default::default()
    }
}

fn initialized(objects: usize) -> (Dataset, SceneGraph) {
    let (_, ds) = generate(&small(objects)).unwrap();
    let init = InitConfig {
        voxel_size: 0.5,
        sky_resolution: 8,
        ..Default::default()
    };
    let scene = init_scene(&ds, &init).unwrap();
    (ds, scene)
}

fn quick(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        densify: DensifyConfig {
            start: 10,
            end: iterations,
            interval: 10,
            ..Default::default()
        },
        reg_start: Some(0),
        ..Default::default()
    }
}

fn colour_only() -> LossWeights {
    LossWeights {
        depth: 0.0,
        sky: 0.0,
        semantic: 0.0,
        reg: 0.0,
        ..Default::default()
    }
}

#[test]
fn own_render_is_a_fixed_point() {
    let (gt, mut ds) = generate(&small(1)).unwrap();
    let cfg = TrainConfig {
        weights: colour_only(),
        ..quick(3)
    };
    for f in &mut ds.frames {
        let rc = RenderConfig {
            tile_size: cfg.tile_size,
            ..RenderConfig::at(f.timestep)
        };
        f.image = render(&gt, &f.camera, &rc).unwrap().color;
    }
    let lr = cfg.lr.position.at(0, cfg.iterations) * cfg.densify.background_extent;
    let mut t = Trainer::new(&ds, gt.clone(), cfg).unwrap();
    let mut gmax = 0.0f64;
    for i in 0..ds.frames.len() {
        let (terms, grads, _) = t.compute(i).unwrap();
        assert!(terms.total.abs() < 1e-12, "frame {i}: loss {}", terms.total);
        for class in ParamClass::ALL {
            let g = gradient_values(&grads, class);
            let m = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(m < 1e-9, "frame {i} {}: gradient {m:e}", class.name());
            if class == ParamClass::Position {
                gmax = gmax.max(m);
            }
        }
    }
    // A first Adam step moves by lr*g/(|g|+eps), so roundoff still shifts
    // points by a bounded amount.
    let bound = lr * gmax / (gmax + ADAM_EPS) * 1.001;
    t.step().unwrap();
    let moved = t
        .scene
        .background
        .positions
        .iter()
        .zip(&gt.background.positions);
    for (a, b) in moved {
        for k in 0..3 {
            assert!(
                (a[k] - b[k]).abs() <= bound,
                "{} > {bound:e}",
                (a[k] - b[k]).abs()
            );
        }
    }
}

#[test]
fn training_reduces_the_loss_on_a_static_scene() {
    let (ds, scene) = initialized(0);
    let cfg = quick(300);
    let mean_loss = |s: &SceneGraph| {
        let t = Trainer::new(&ds, s.clone(), cfg.clone()).unwrap();
        (0..ds.frames.len())
            .map(|i| t.compute(i).unwrap().0.color)
            .sum::<f64>()
            / ds.frames.len() as f64
    };
    let before = mean_loss(&scene);
    let trained = train(&ds, scene, &cfg, None, |_, _| Ok(())).unwrap();
    let after = mean_loss(&trained);
    assert!(after < 0.8 * before, "colour loss {before} -> {after}");
}

#[test]
fn loss_terms_add_linearly_in_the_gradient() {
    let (ds, scene) = initialized(1);
    let all = LossWeights {
        reg: 0.3,
        ..Default::default()
    };
    let grads_for = |w: LossWeights| {
        let cfg = TrainConfig {
            weights: w,
            ..quick(10)
        };
        let t = Trainer::new(&ds, scene.clone(), cfg).unwrap();
        let (terms, g, _) = t.compute(1).unwrap();
        (terms, g)
    };
    let (terms, g_all) = grads_for(all.clone());
    assert!(
        terms.depth.is_some()
            && terms.sky.is_some()
            && terms.semantic.is_some()
            && terms.reg.is_some()
    );
    let base = LossWeights {
        ssim: all.ssim,
        ..colour_only()
    };
    let (_, g_base) = grads_for(base.clone());
    let singles = [
        LossWeights {
            depth: all.depth,
            ..base.clone()
        },
        LossWeights {
            sky: all.sky,
            ..base.clone()
        },
        LossWeights {
            semantic: all.semantic,
            ..base.clone()
        },
        LossWeights {
            reg: all.reg,
            ..base.clone()
        },
    ];
    let g_singles: Vec<_> = singles.into_iter().map(|w| grads_for(w).1).collect();
    for class in ParamClass::ALL {
        let a = gradient_values(&g_all, class);
        let b = gradient_values(&g_base, class);
        let parts: Vec<Vec<f64>> = g_singles
            .iter()
            .map(|g| gradient_values(g, class))
            .collect();
        for j in 0..a.len() {
            let sum: f64 = b[j] + parts.iter().map(|p| p[j] - b[j]).sum::<f64>();
            let scale = a[j].abs().max(sum.abs()).max(1e-12);
            assert!(
                (a[j] - sum).abs() / scale < 1e-9,
                "{} [{j}]: {} vs {sum}",
                class.name(),
                a[j]
            );
        }
    }
}

#[test]
fn semantic_weight_leaves_geometry_gradients_untouched() {
    let (ds, scene) = initialized(1);
    let grads_for = |semantic: f64| {
        let w = LossWeights {
            semantic,
            ..Default::default()
        };
        let cfg = TrainConfig {
            weights: w,
            ..quick(10)
        };
        Trainer::new(&ds, scene.clone(), cfg)
            .unwrap()
            .compute(2)
            .unwrap()
            .1
    };
    let (off, on) = (grads_for(0.0), grads_for(0.1));
    for class in ParamClass::ALL {
        let (a, b) = (gradient_values(&off, class), gradient_values(&on, class));
        if class == ParamClass::Semantic {
            assert!(a.iter().all(|v| *v == 0.0));
            assert!(b.iter().any(|v| *v != 0.0));
        } else {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b), "{}", class.name());
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let (ds, scene) = initialized(1);
    let cfg = quick(40);
    let run = || {
        let mut logs = Vec::new();
        let s = train(&ds, scene.clone(), &cfg, None, |l, _| {
            logs.push(serde_json::to_string(l).unwrap());
            Ok(())
        })
        .unwrap();
        (s, logs)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(a, b);
}

#[test]
fn non_finite_loss_stops_with_diagnostics() {
    let (mut ds, scene) = initialized(0);
    for f in &mut ds.frames {
        f.image.data[0] = f64::NAN;
    }
    let tmp = tempfile::tempdir().unwrap();
    let err = train_to_dir(&ds, scene, &quick(5), None, tmp.path()).unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteLoss { iteration: 0, .. }),
        "{err}"
    );
    let diag: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("diagnostics.json")).unwrap())
            .unwrap();
    assert!(
        diag["error"].as_str().unwrap().contains("non-finite"),
        "{diag}"
    );
}

#[test]
fn training_writes_a_log_line_per_iteration() {
    let (ds, scene) = initialized(1);
    let tmp = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 5,
        ..quick(10)
    };
    train_to_dir(&ds, scene, &cfg, None, tmp.path()).unwrap();
    let log = std::fs::read_to_string(tmp.path().join("log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 10);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["iteration"], i);
        assert!(l["total"].as_f64().unwrap().is_finite(), "{l}");
    }
    assert!(tmp.path().join("checkpoints/000005/meta.json").exists());
    assert!(tmp.path().join("checkpoints/000010/meta.json").exists());
    assert!(tmp.path().join("meta.json").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn control_step_keeps_the_set_consistent(
        seed in 0u64..10_000,
        grads in prop::collection::vec(0.0f64..5e-4, 30),
        prune_large in any::<bool>(),
        min_opacity in 0.0f64..0.5,
        object in any::<bool>(),
    ) {
        let scene = random_scene(seed, &RandomSceneSpec { background_points: 30, points_per_object: 30, ..Default::default() });
        let (set, track) = if object {
            (&scene.objects[0].gaussians, Some(&scene.objects[0].track))
        } else {
            (&scene.background, None)
        };
        let n = set.len();
        let mut acc = PointAccum::new(n);
        let stats: Vec<PointStat> = (0..n)
            .map(|i| PointStat { grad_ndc: grads[i % grads.len()], visible: i % 7 != 0, max_weight: 0.5 })
            .collect();
        acc.add(&stats);
        let cfg = DensifyConfig { min_opacity, ..Default::default() };
        let r = densify_and_prune(set, &acc, &ControlParams { cfg: &cfg, extent: 5.0, prune_large, track }, seed);
        prop_assert!(r.set.validate("control").is_ok());
        prop_assert_eq!(r.set.len(), r.sources.len());
        prop_assert_eq!(
            n - r.split + r.cloned + r.split * cfg.split_children,
            r.set.len() + r.pruned
        );
        for (j, s) in r.sources.iter().enumerate() {
            prop_assert!(r.set.opacity(j) >= min_opacity);
            if let Some(src) = s {
                prop_assert!(*src < n);
                prop_assert_eq!(r.set.get(j), set.get(*src));
            }
        }
    }
}

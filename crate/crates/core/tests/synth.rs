use urbansplat::geometry::{rot_z, Vec3};
use urbansplat::ingest::{default_class_names, load_dataset, write_dataset, Dataset, Tracklet};
use urbansplat::raster::{render_reference, RenderConfig};
use urbansplat::scene::{load_checkpoint, PoseTrack};
use urbansplat::synth::{
    generate, perturb, write_synth, NoiseSpec, SynthSpec, GT_CHECKPOINT_DIR, POSE_NOISE_FILE,
    POSE_TRUTH_FILE,
};

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

#[test]
fn generation_is_deterministic() {
    let a = generate(&small(2)).unwrap();
    let b = generate(&small(2)).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let c = generate(&SynthSpec {
        seed: 1,
        ..small(2)
    })
    .unwrap();
    assert_ne!(a.1.frames[0].image, c.1.frames[0].image);
}

#[test]
fn written_dataset_reloads_identically() {
    let (gt, ds) = generate(&small(2)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&ds, tmp.path()).unwrap();
    let back = load_dataset(tmp.path()).unwrap();
    assert_eq!(back, ds);
    for (t, o) in back.tracklets.iter().zip(&gt.objects) {
        assert_eq!(t.id, o.id);
        assert_eq!(t.track, o.track);
    }
}

#[test]
fn images_are_reproduced_by_rerendering_the_ground_truth() {
    let (gt, ds) = generate(&small(2)).unwrap();
    for f in &ds.frames {
        let out = render_reference(&gt, &f.camera, &RenderConfig::at(f.timestep)).unwrap();
        assert_eq!(out.color.quantized_u8(), f.image);
    }
}

#[test]
fn static_scene_has_no_tracklets_and_loads() {
    let (gt, ds) = generate(&small(0)).unwrap();
    assert!(gt.objects.is_empty());
    assert!(ds.tracklets.is_empty());
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&ds, tmp.path()).unwrap();
    assert_eq!(load_dataset(tmp.path()).unwrap().frames.len(), 4);
}

#[test]
fn frames_carry_masks_labels_and_lidar() {
    let (_, ds) = generate(&small(1)).unwrap();
    for f in &ds.frames {
        let n = f.image.width * f.image.height;
        let sky = f.sky_mask.as_ref().unwrap();
        let sem = f.semantic.as_ref().unwrap();
        assert_eq!(sky.len(), n);
        assert_eq!(sem.len(), n);
        assert!(sem.iter().all(|l| (*l as usize) < ds.num_classes()));
        // Sky pixels are labelled sky.
        let sky_class = ds.class_names.iter().position(|c| c == "sky").unwrap() as u8;
        for (m, l) in sky.iter().zip(sem) {
            if *m == 1 {
                assert_eq!(*l, sky_class);
            }
        }
        assert!(!f.lidar.is_empty());
    }
}

#[test]
fn zero_noise_leaves_the_dataset_unchanged() {
    let (_, ds) = generate(&small(2)).unwrap();
    let (noisy, noise) = perturb(&ds, 0.0, 0.0, 9).unwrap();
    assert_eq!(noisy, ds);
    for o in &noise.objects {
        assert!(o.translations.iter().flatten().all(|v| *v == 0.0));
        assert!(o.yaws.iter().all(|v| *v == 0.0));
    }
    assert!(perturb(&ds, -1.0, 0.0, 9).is_err());
}

#[test]
fn recorded_noise_reproduces_noisy_poses() {
    let (_, ds) = generate(&small(2)).unwrap();
    let (noisy, noise) = perturb(&ds, 0.2, 5f64.to_radians(), 3).unwrap();
    for ((clean, dirty), rec) in ds
        .tracklets
        .iter()
        .zip(&noisy.tracklets)
        .zip(&noise.objects)
    {
        assert_eq!(clean.id, rec.id);
        for t in 0..clean.track.frame_count() {
            let d = dirty.track.translations[t] - clean.track.translations[t];
            assert_eq!(<[f64; 3]>::from(d), rec.translations[t]);
            assert_eq!(d.z, 0.0);
            let r = clean.track.rotations[t] * rot_z(rec.yaws[t]);
            assert!((r - dirty.track.rotations[t]).norm() < 1e-15);
        }
    }
}

#[test]
fn noise_has_the_requested_spread() {
    // Std of the sample std is ~sigma/sqrt(2n); 1e5 frames keeps it near 0.2%.
    let n = 100_000;
    let track = PoseTrack::new(
        vec![rot_z(0.0); n],
        vec![Vec3::zeros(); n],
        Vec3::repeat(1.0),
        vec![true; n],
    );
    let ds = Dataset {
        num_frames: n,
        class_names: default_class_names(),
        vehicle_class: 2,
        frames: Vec::new(),
        tracklets: vec![Tracklet { id: 1, track }],
        sfm_points: None,
    };
    let (sigma_t, sigma_yaw) = (0.2, 5f64.to_radians());
    let (_, noise) = perturb(&ds, sigma_t, sigma_yaw, 42).unwrap();
    let rec = &noise.objects[0];
    let std = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let xs: Vec<f64> = rec.translations.iter().map(|t| t[0]).collect();
    let ys: Vec<f64> = rec.translations.iter().map(|t| t[1]).collect();
    for (name, s, want) in [
        ("x", std(&xs), sigma_t),
        ("y", std(&ys), sigma_t),
        ("yaw", std(&rec.yaws), sigma_yaw),
    ] {
        assert!((s / want - 1.0).abs() <= 0.05, "{name}: {s} vs {want}");
    }
}

#[test]
fn write_synth_emits_ground_truth_files() {
    let spec = SynthSpec {
        noise: NoiseSpec {
            translation: 0.1,
            yaw: 0.02,
            depth: 0.0,
        },
        ..small(1)
    };
    let tmp = tempfile::tempdir().unwrap();
    let noisy = write_synth(&spec, tmp.path()).unwrap();
    assert_eq!(load_dataset(tmp.path()).unwrap(), noisy);
    let gt = load_checkpoint(&tmp.path().join(GT_CHECKPOINT_DIR)).unwrap();
    assert_eq!(gt.objects.len(), 1);
    assert!(tmp.path().join(POSE_TRUTH_FILE).exists());
    assert!(tmp.path().join(POSE_NOISE_FILE).exists());
    let (clean_gt, clean) = generate(&spec).unwrap();
    assert_eq!(clean_gt.objects[0].track.translations.len(), 4);
    assert_ne!(clean.tracklets, noisy.tracklets);
}

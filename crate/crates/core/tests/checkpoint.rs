use std::fs;
use std::path::Path;

use proptest::prelude::*;
use urbansplat::scene::{load_checkpoint, save_checkpoint, SceneGraph};
use urbansplat::synth::{random_scene, RandomSceneSpec};
use urbansplat::Error;

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

/// Saves and reloads once so every value sits on the stored precision.
fn stored(scene: &SceneGraph) -> SceneGraph {
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(scene, tmp.path()).unwrap();
    load_checkpoint(tmp.path()).unwrap()
}

fn empty_scene() -> SceneGraph {
    let spec = RandomSceneSpec {
        background_points: 0,
        objects: 0,
        ..Default::default()
    };
    random_scene(0, &spec)
}

#[test]
fn empty_scene_round_trips() {
    let s = empty_scene();
    assert_eq!(s.total_points(), 0);
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(&s, tmp.path()).unwrap();
    let back = load_checkpoint(tmp.path()).unwrap();
    assert_eq!(back.total_points(), 0);
    assert_eq!(back.objects.len(), 0);
    assert_eq!(stored(&back), back);
}

#[test]
fn layout_has_documented_files() {
    let s = random_scene(
        1,
        &RandomSceneSpec {
            objects: 2,
            ..Default::default()
        },
    );
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(&s, tmp.path()).unwrap();
    let names: Vec<String> = dir_bytes(tmp.path()).into_iter().map(|(n, _)| n).collect();
    let mut want = vec!["background.bin".to_string(), "meta.json".to_string()];
    for o in &s.objects {
        want.push(format!("object_{}.bin", o.id));
    }
    want.extend((0..6).map(|f| format!("sky_face_{f}.png")));
    want.sort();
    assert_eq!(names, want);
    let meta: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("meta.json")).unwrap()).unwrap();
    assert!(meta["schema_version"].is_u64());
}

#[test]
fn object_columns_reload_bit_identical() {
    let spec = RandomSceneSpec {
        background_points: 5,
        objects: 1,
        points_per_object: 8,
        ..Default::default()
    };
    let s = stored(&random_scene(2, &spec));
    assert_eq!(s.objects[0].gaussians.len(), 8);
    let again = stored(&s);
    let (a, b) = (&s.objects[0].gaussians, &again.objects[0].gaussians);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(
        bits(a.positions.as_flattened()),
        bits(b.positions.as_flattened())
    );
    assert_eq!(
        bits(a.log_scales.as_flattened()),
        bits(b.log_scales.as_flattened())
    );
    assert_eq!(
        bits(a.rotations.as_flattened()),
        bits(b.rotations.as_flattened())
    );
    assert_eq!(bits(&a.opacity_logits), bits(&b.opacity_logits));
    assert_eq!(bits(&a.appearance.coeffs), bits(&b.appearance.coeffs));
    assert_eq!(bits(&a.semantic.logits), bits(&b.semantic.logits));
    assert_eq!(again, s);
}

#[test]
fn stored_values_are_close_to_the_originals() {
    let s = random_scene(3, &RandomSceneSpec::default());
    let back = stored(&s);
    for (a, b) in s
        .background
        .positions
        .iter()
        .zip(&back.background.positions)
    {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= 1e-6 * a[k].abs().max(1.0));
        }
    }
    for (a, b) in s.sky.texels.iter().zip(&back.sky.texels) {
        assert!((a.clamp(0.0, 1.0) - b).abs() <= 0.5 / 65535.0 + 1e-12);
    }
    assert_eq!(s.objects[0].track, back.objects[0].track);
}

#[test]
fn negative_determinant_rotation_is_rejected() {
    let s = random_scene(4, &RandomSceneSpec::default());
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(&s, tmp.path()).unwrap();
    let path = tmp.path().join("meta.json");
    let mut meta: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    // -R is orthonormal with determinant -1, whatever the storage order.
    let rot = &mut meta["objects"][0]["track"]["rotations"][0];
    let neg: Vec<f64> = rot
        .as_array()
        .unwrap()
        .iter()
        .map(|v| -v.as_f64().unwrap())
        .collect();
    *rot = serde_json::json!(neg);
    fs::write(&path, serde_json::to_vec(&meta).unwrap()).unwrap();
    let err = load_checkpoint(tmp.path()).unwrap_err();
    assert!(err.to_string().contains("invalid rotation"), "{err}");
    assert!(err.is_validation());
}

#[test]
fn off_unit_quaternion_is_normalized() {
    let spec = RandomSceneSpec {
        background_points: 1,
        objects: 0,
        ..Default::default()
    };
    let s = random_scene(5, &spec);
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(&s, tmp.path()).unwrap();
    let path = tmp.path().join("background.bin");
    let mut bytes = fs::read(&path).unwrap();
    // Rotation column follows position (3) and log-scale (3) for one point.
    for k in 0..4 {
        let at = (6 + k) * 4;
        let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        bytes[at..at + 4].copy_from_slice(&(v * 0.999).to_le_bytes());
    }
    fs::write(&path, bytes).unwrap();
    let back = load_checkpoint(tmp.path()).unwrap();
    let q = back.background.rotations[0];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-12, "norm {n}");
}

#[test]
fn truncated_column_file_is_a_shape_mismatch() {
    let s = random_scene(6, &RandomSceneSpec::default());
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(&s, tmp.path()).unwrap();
    let path = tmp.path().join("background.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        load_checkpoint(tmp.path()),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn missing_file_is_reported() {
    let s = random_scene(7, &RandomSceneSpec::default());
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(&s, tmp.path()).unwrap();
    fs::remove_file(tmp.path().join("sky_face_3.png")).unwrap();
    assert!(matches!(
        load_checkpoint(tmp.path()),
        Err(Error::MissingFile { .. })
    ));
    assert!(matches!(
        load_checkpoint(&tmp.path().join("nope")),
        Err(Error::MissingFile { .. })
    ));
}

#[test]
fn non_finite_value_is_rejected() {
    let s = random_scene(8, &RandomSceneSpec::default());
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(&s, tmp.path()).unwrap();
    let path = tmp.path().join("background.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0..4].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    assert!(matches!(
        load_checkpoint(tmp.path()),
        Err(Error::NonFinite { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn save_load_save_is_byte_identical(seed in 0u64..1_000_000, objects in 0usize..3, k in 1usize..4) {
        let spec = RandomSceneSpec { objects, fourier_k: k, background_points: 40, points_per_object: 10, ..Default::default() };
        let s = random_scene(seed, &spec);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_checkpoint(&s, a.path()).unwrap();
        save_checkpoint(&load_checkpoint(a.path()).unwrap(), b.path()).unwrap();
        prop_assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }
}

//! Checkpoint directory layout:
//!
//! * `meta.json`: scene configuration, pose tracks, views and, per model, the
//!   point count and the ordered list of `(column, width)` pairs.
//! * `background.bin`, `object_<id>.bin`: little-endian f32, one column after
//!   another in the declared order; each column holds `count × width` values
//!   point-major.
//! * `sky_face_{0..5}.png`: 16-bit RGB cubemap faces (+X, -X, +Y, -Y, +Z, -Z).
//!
//! Values are stored at f32 / 16-bit precision. Anything already
//! representable at that precision reloads bit-exactly, so
//! save∘load∘save writes identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    canonical_quat, AppearanceCoeffs, AppearanceMode, GaussianSet, ObjectModel, PoseTrack,
    SceneGraph, SemanticField, SemanticKind, SkyCubemap, View,
};
use crate::error::{Error, Result};
use crate::image::{read_png, write_png16, Image};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub file: String,
    pub count: usize,
    pub appearance_mode: AppearanceMode,
    pub fourier_k: usize,
    pub semantic_kind: SemanticKind,
    pub columns: Vec<Column>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub id: u32,
    pub model: ModelMeta,
    pub track: PoseTrack,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkyMeta {
    pub resolution: usize,
    pub faces: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub num_classes: usize,
    pub vehicle_class: usize,
    pub num_frames: usize,
    pub sh_degree: usize,
    pub background: ModelMeta,
    pub objects: Vec<ObjectMeta>,
    pub sky: SkyMeta,
    pub views: Vec<View>,
}

fn columns_for(set: &GaussianSet) -> Vec<Column> {
    let col = |name: &str, width: usize| Column {
        name: name.into(),
        width,
    };
    vec![
        col("position", 3),
        col("log_scale", 3),
        col("rotation", 4),
        col("opacity_logit", 1),
        col("appearance", set.appearance.stride()),
        col("semantic", set.semantic.width()),
    ]
}

fn encode_set(set: &GaussianSet) -> Vec<u8> {
    let n = set.len();
    let total: usize = columns_for(set).iter().map(|c| c.width).sum();
    let mut out = Vec::with_capacity(n * total * 4);
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    set.positions.iter().flatten().for_each(|v| put(*v));
    set.log_scales.iter().flatten().for_each(|v| put(*v));
    set.rotations
        .iter()
        .flat_map(|q| canonical_quat(*q))
        .for_each(&mut put);
    set.opacity_logits.iter().for_each(|v| put(*v));
    set.appearance.coeffs.iter().for_each(|v| put(*v));
    set.semantic.logits.iter().for_each(|v| put(*v));
    out
}

fn model_meta(set: &GaussianSet, file: String) -> ModelMeta {
    ModelMeta {
        file,
        count: set.len(),
        appearance_mode: set.appearance.mode,
        fourier_k: set.appearance.fourier_k,
        semantic_kind: set.semantic.kind,
        columns: columns_for(set),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(scene: &SceneGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scene.validate()?;

    write_file(&dir.join("background.bin"), &encode_set(&scene.background))?;
    let mut objects = Vec::new();
    for o in &scene.objects {
        let file = format!("object_{}.bin", o.id);
        write_file(&dir.join(&file), &encode_set(&o.gaussians))?;
        objects.push(ObjectMeta {
            id: o.id,
            model: model_meta(&o.gaussians, file),
            track: o.track.clone(),
        });
    }

    let r = scene.sky.resolution;
    let per_face = r * r * 3;
    let mut faces = Vec::new();
    for f in 0..6 {
        let name = format!("sky_face_{f}.png");
        let img = Image {
            width: r,
            height: r,
            channels: 3,
            data: scene.sky.texels[f * per_face..(f + 1) * per_face].to_vec(),
        };
        write_png16(&dir.join(&name), &img)?;
        faces.push(name);
    }

    let meta = CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        num_classes: scene.num_classes,
        vehicle_class: scene.vehicle_class,
        num_frames: scene.num_frames,
        sh_degree: scene.sh_degree(),
        background: model_meta(&scene.background, "background.bin".into()),
        objects,
        sky: SkyMeta {
            resolution: r,
            faces,
        },
        views: scene.views.clone(),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    write_file(&dir.join("meta.json"), &json)
}

fn decode_set(
    dir: &Path,
    meta: &ModelMeta,
    sh_degree: usize,
    num_classes: usize,
) -> Result<GaussianSet> {
    let path = dir.join(&meta.file);
    let appearance = AppearanceCoeffs::new(meta.appearance_mode, sh_degree, meta.fourier_k);
    let semantic = match meta.semantic_kind {
        SemanticKind::BackgroundVector => SemanticField::background(num_classes),
        SemanticKind::ObjectScalar => SemanticField::object(num_classes),
    };
    let mut set = GaussianSet::empty(appearance, semantic);
    let expected = columns_for(&set);
    if meta.columns != expected {
        return Err(Error::format(
            &path,
            format!(
                "column layout {:?} does not match expected {:?}",
                meta.columns, expected
            ),
        ));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let width: usize = expected.iter().map(|c| c.width).sum();
    if bytes.len() != meta.count * width * 4 {
        return Err(Error::ShapeMismatch {
            context: format!("{}: bytes", path.display()),
            expected: meta.count * width * 4,
            found: bytes.len(),
        });
    }
    let mut vals = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let n = meta.count;
    let mut take = |k: usize| -> Vec<f64> { vals.by_ref().take(k).collect() };
    set.positions = take(3 * n)
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    set.log_scales = take(3 * n)
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    set.rotations = take(4 * n)
        .chunks_exact(4)
        .map(|c| canonical_quat([c[0], c[1], c[2], c[3]]))
        .collect();
    set.opacity_logits = take(n);
    set.appearance.coeffs = take(n * set.appearance.stride());
    set.semantic.logits = take(n * set.semantic.width());
    set.validate(&path.display().to_string())?;
    Ok(set)
}

pub fn load_checkpoint(dir: &Path) -> Result<SceneGraph> {
    let meta_path = dir.join("meta.json");
    let text = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::format(
            &meta_path,
            format!("unsupported schema version {}", meta.schema_version),
        ));
    }
    let background = decode_set(dir, &meta.background, meta.sh_degree, meta.num_classes)?;
    let mut objects = Vec::new();
    for o in &meta.objects {
        objects.push(ObjectModel {
            id: o.id,
            gaussians: decode_set(dir, &o.model, meta.sh_degree, meta.num_classes)?,
            track: o.track.clone(),
        });
    }

    let r = meta.sky.resolution;
    if meta.sky.faces.len() != 6 || r == 0 {
        return Err(Error::format(&meta_path, "sky cubemap needs six faces"));
    }
    let mut texels = Vec::with_capacity(6 * r * r * 3);
    for name in &meta.sky.faces {
        let path = dir.join(name);
        let img = read_png(&path)?;
        if img.width != r || img.height != r || img.channels != 3 {
            return Err(Error::ShapeMismatch {
                context: format!("{}: face size", path.display()),
                expected: r * r * 3,
                found: img.width * img.height * img.channels,
            });
        }
        texels.extend_from_slice(&img.data);
    }

    let scene = SceneGraph {
        background,
        objects,
        sky: SkyCubemap {
            resolution: r,
            texels,
        },
        num_classes: meta.num_classes,
        vehicle_class: meta.vehicle_class,
        num_frames: meta.num_frames,
        views: meta.views,
    };
    scene.validate()?;
    Ok(scene)
}

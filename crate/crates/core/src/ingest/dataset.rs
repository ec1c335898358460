//! On-disk dataset layout:
//!
//! ```text
//! scene.json        frames (timestep + camera), class names, tracklets
//! images/NNNN.png   RGB image of frame NNNN (index into `frames`)
//! lidar/NNNN.ply    world-frame LiDAR points of frame NNNN
//! sky/NNNN.png      optional sky mask, non-zero = sky
//! sem/NNNN.png      optional 8-bit class labels, 255 = ignore
//! sfm.ply           optional world-frame SfM points
//! ```
//!
//! Rotations are row-major, units are meters and the world is z-up.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pointcloud::{read_ply, write_ply, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::{read_label_png, read_png_rgb, write_label_png, write_png8, Image};
use crate::scene::{PoseTrack, DEFAULT_VEHICLE_CLASS};

/// Label value excluded from the semantic loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

pub fn default_class_names() -> Vec<String> {
    [
        "sky",
        "road",
        "vehicle",
        "building",
        "vegetation",
        "pole",
        "sign",
        "other",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub timestep: usize,
    pub camera: Camera,
    pub image: Image,
    pub lidar: PointCloud,
    /// 1 where the pixel is sky.
    pub sky_mask: Option<Vec<u8>>,
    pub semantic: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: u32,
    pub track: PoseTrack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_frames: usize,
    pub class_names: Vec<String>,
    pub vehicle_class: usize,
    pub frames: Vec<FrameRecord>,
    pub tracklets: Vec<Tracklet>,
    pub sfm_points: Option<PointCloud>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    timestep: usize,
    camera: Camera,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackletEntry {
    id: u32,
    track: PoseTrack,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    num_frames: usize,
    #[serde(default = "default_class_names")]
    class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vehicle_class: Option<usize>,
    frames: Vec<FrameEntry>,
    #[serde(default)]
    tracklets: Vec<TrackletEntry>,
}

fn frame_file(dir: &str, i: usize, ext: &str) -> PathBuf {
    PathBuf::from(dir).join(format!("{i:04}.{ext}"))
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn tracklet(&self, id: u32) -> Option<&Tracklet> {
        self.tracklets.iter().find(|t| t.id == id)
    }

    /// Copy keeping only the frames at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            ..self.clone_without_frames()
        }
    }

    fn clone_without_frames(&self) -> Dataset {
        Dataset {
            num_frames: self.num_frames,
            class_names: self.class_names.clone(),
            vehicle_class: self.vehicle_class,
            frames: Vec::new(),
            tracklets: self.tracklets.clone(),
            sfm_points: self.sfm_points.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(Error::invalid("dataset declares zero frames"));
        }
        if self.class_names.is_empty() || self.vehicle_class >= self.class_names.len() {
            return Err(Error::invalid("vehicle class outside the class list"));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if i > 0 && f.timestep <= self.frames[i - 1].timestep {
                return Err(Error::invalid(format!(
                    "frame {i}: timesteps must strictly increase"
                )));
            }
            if f.timestep >= self.num_frames {
                return Err(Error::invalid(format!(
                    "frame {i}: timestep {} not below frame count {}",
                    f.timestep, self.num_frames
                )));
            }
            f.camera.validate()?;
            let (w, h) = (f.camera.width as usize, f.camera.height as usize);
            if f.image.width != w || f.image.height != h {
                return Err(Error::invalid(format!(
                    "frame {i}: image is {}x{}, camera expects {w}x{h}",
                    f.image.width, f.image.height
                )));
            }
            for (name, m) in [("sky mask", &f.sky_mask), ("semantic map", &f.semantic)] {
                if let Some(m) = m {
                    if m.len() != w * h {
                        return Err(Error::invalid(format!(
                            "frame {i}: {name} size differs from the image"
                        )));
                    }
                }
            }
            if let Some(sem) = &f.semantic {
                if let Some(bad) = sem
                    .iter()
                    .find(|&&l| l != IGNORE_LABEL && l as usize >= self.num_classes())
                {
                    return Err(Error::invalid(format!(
                        "frame {i}: label {bad} outside {} classes",
                        self.num_classes()
                    )));
                }
            }
        }
        let mut ids: Vec<u32> = self.tracklets.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate tracklet id"));
        }
        for t in &self.tracklets {
            t.track.validate()?;
            if t.track.frame_count() != self.num_frames {
                return Err(Error::invalid(format!(
                    "tracklet {} covers {} frames, dataset has {}",
                    t.id,
                    t.track.frame_count(),
                    self.num_frames
                )));
            }
        }
        Ok(())
    }
}

fn read_json(path: &Path) -> Result<SceneFile> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let scene = read_json(&root.join("scene.json"))?;
    let frames: Vec<FrameRecord> = scene
        .frames
        .into_par_iter()
        .enumerate()
        .map(|(i, entry)| -> Result<FrameRecord> {
            let image = read_png_rgb(&root.join(frame_file("images", i, "png")))?;
            let lidar = read_ply(&root.join(frame_file("lidar", i, "ply")))?;
            let optional_labels = |dir: &str| -> Result<Option<Vec<u8>>> {
                let p = root.join(frame_file(dir, i, "png"));
                if !p.exists() {
                    return Ok(None);
                }
                let (w, h, labels) = read_label_png(&p)?;
                if w != image.width || h != image.height {
                    return Err(Error::format(&p, "size differs from the frame image"));
                }
                Ok(Some(labels))
            };
            let sky_mask =
                optional_labels("sky")?.map(|m| m.into_iter().map(|v| (v != 0) as u8).collect());
            let semantic = optional_labels("sem")?;
            Ok(FrameRecord {
                timestep: entry.timestep,
                camera: entry.camera,
                image,
                lidar,
                sky_mask,
                semantic,
            })
        })
        .collect::<Result<_>>()?;
    let sfm_path = root.join("sfm.ply");
    let sfm_points = if sfm_path.exists() {
        Some(read_ply(&sfm_path)?)
    } else {
        None
    };
    let vehicle_class = scene.vehicle_class.unwrap_or_else(|| {
        scene
            .class_names
            .iter()
            .position(|n| n == "vehicle")
            .unwrap_or(DEFAULT_VEHICLE_CLASS)
    });
    let ds = Dataset {
        num_frames: scene.num_frames,
        class_names: scene.class_names,
        vehicle_class,
        frames,
        tracklets: scene
            .tracklets
            .into_iter()
            .map(|t| Tracklet {
                id: t.id,
                track: t.track,
            })
            .collect(),
        sfm_points,
    };
    ds.validate()?;
    Ok(ds)
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `ds` in the layout read by [`load_dataset`]. Images are stored as
/// 8-bit PNG and LiDAR as f32.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    ds.validate()?;
    for d in ["images", "lidar"] {
        ensure_dir(&root.join(d))?;
    }
    if ds.frames.iter().any(|f| f.sky_mask.is_some()) {
        ensure_dir(&root.join("sky"))?;
    }
    if ds.frames.iter().any(|f| f.semantic.is_some()) {
        ensure_dir(&root.join("sem"))?;
    }
    ds.frames
        .par_iter()
        .enumerate()
        .try_for_each(|(i, f)| -> Result<()> {
            write_png8(&root.join(frame_file("images", i, "png")), &f.image)?;
            write_ply(&root.join(frame_file("lidar", i, "ply")), &f.lidar)?;
            let (w, h) = (f.image.width, f.image.height);
            if let Some(m) = &f.sky_mask {
                let bytes: Vec<u8> = m.iter().map(|v| if *v != 0 { 255 } else { 0 }).collect();
                write_label_png(&root.join(frame_file("sky", i, "png")), w, h, &bytes)?;
            }
            if let Some(s) = &f.semantic {
                write_label_png(&root.join(frame_file("sem", i, "png")), w, h, s)?;
            }
            Ok(())
        })?;
    if let Some(sfm) = &ds.sfm_points {
        write_ply(&root.join("sfm.ply"), sfm)?;
    }
    let scene = SceneFile {
        num_frames: ds.num_frames,
        class_names: ds.class_names.clone(),
        vehicle_class: Some(ds.vehicle_class),
        frames: ds
            .frames
            .iter()
            .map(|f| FrameEntry {
                timestep: f.timestep,
                camera: f.camera.clone(),
            })
            .collect(),
        tracklets: ds
            .tracklets
            .iter()
            .map(|t| TrackletEntry {
                id: t.id,
                track: t.track.clone(),
            })
            .collect(),
    };
    let path = root.join("scene.json");
    let json = serde_json::to_vec_pretty(&scene).expect("scene file serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

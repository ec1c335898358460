//! Image and label-map quality metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Vec3};
use crate::image::Image;
use crate::ingest::{Dataset, Tracklet, IGNORE_LABEL};
use crate::raster::{render, RenderConfig, RenderOutputs};
use crate::scene::SceneGraph;

pub use crate::train::ssim;

/// Box growth along the object length and width axes for the moving-object mask.
pub const BOX_EXPANSION: f64 = 1.5;

fn check_shape(img: &Image, reference: &Image) -> Result<()> {
    if !img.same_shape(reference) {
        return Err(Error::invalid(format!(
            "image is {}x{}x{}, reference is {}x{}x{}",
            img.width,
            img.height,
            img.channels,
            reference.width,
            reference.height,
            reference.channels
        )));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR in dB for images in [0, 1]; `+inf` when they are identical.
pub fn psnr(img: &Image, reference: &Image) -> Result<f64> {
    check_shape(img, reference)?;
    let n = img.data.len().max(1) as f64;
    let mse = img
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

/// Masked PSNR; `None` when the mask selects no pixel.
pub fn psnr_masked(img: &Image, reference: &Image, mask: &[bool]) -> Result<Option<f64>> {
    check_shape(img, reference)?;
    if mask.len() != img.width * img.height {
        return Err(Error::invalid("mask size differs from the image"));
    }
    let c = img.channels;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for k in 0..c {
            let d = img.data[i * c + k] - reference.data[i * c + k];
            sum += d * d;
        }
        count += c;
    }
    Ok((count > 0).then(|| psnr_from_mse(sum / count as f64)))
}

/// Corners of the box at timestep `t`, expanded in length and width, in
/// world coordinates. Uses the tracked pose without learned corrections.
pub fn expanded_box_corners(tracklet: &Tracklet, t: usize) -> Option<[Vec3; 8]> {
    let pose = tracklet.track.base_pose(t).ok()?;
    let d = tracklet.track.box_dims;
    let h = Vec3::new(
        0.5 * BOX_EXPANSION * d.x,
        0.5 * BOX_EXPANSION * d.y,
        0.5 * d.z,
    );
    let mut out = [Vec3::zeros(); 8];
    for (i, c) in out.iter_mut().enumerate() {
        let s = |bit: usize| if i & bit != 0 { 1.0 } else { -1.0 };
        *c = pose.apply(&Vec3::new(s(1) * h.x, s(2) * h.y, s(4) * h.z));
    }
    Some(out)
}

const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Image-plane points of the box clipped to the near plane: corners in front
/// plus the crossings of edges that straddle it.
fn clipped_projection(camera: &Camera, corners: &[Vec3; 8]) -> Vec<(f64, f64)> {
    let cam: Vec<Vec3> = corners.iter().map(|p| camera.world_to_camera(p)).collect();
    let near = camera.near_clip;
    let project = |c: &Vec3| {
        (
            camera.fx * c.x / c.z + camera.cx,
            camera.fy * c.y / c.z + camera.cy,
        )
    };
    let mut pts: Vec<(f64, f64)> = cam.iter().filter(|c| c.z >= near).map(project).collect();
    for &(a, b) in &BOX_EDGES {
        let (pa, pb) = (cam[a], cam[b]);
        if (pa.z < near) != (pb.z < near) {
            let s = (near - pa.z) / (pb.z - pa.z);
            let mut p = pa + (pb - pa) * s;
            p.z = near;
            pts.push(project(&p));
        }
    }
    pts
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    hull.len() >= 3 && (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0)
}

/// Pixels whose centres fall inside the union of the projected, expanded
/// boxes of every tracklet valid at `t`.
pub fn object_mask(camera: &Camera, tracklets: &[Tracklet], t: usize) -> Vec<bool> {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut mask = vec![false; w * h];
    for tr in tracklets {
        let Some(corners) = expanded_box_corners(tr, t) else {
            continue;
        };
        let hull = convex_hull(clipped_projection(camera, &corners));
        if hull.len() < 3 {
            continue;
        }
        let (mut x0, mut x1, mut y0, mut y1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for &(u, v) in &hull {
            x0 = x0.min(u);
            x1 = x1.max(u);
            y0 = y0.min(v);
            y1 = y1.max(v);
        }
        // Pixel x has its centre at x + 0.5.
        let first = |lo: f64| (lo - 0.5).ceil().max(0.0) as isize;
        let last = |hi: f64, n: usize| ((hi - 0.5).floor() as isize).min(n as isize - 1);
        let (xa, xb, ya, yb) = (first(x0), last(x1, w), first(y0), last(y1, h));
        if xa > xb || ya > yb {
            continue;
        }
        let (xs, ys) = (xa as usize..=xb as usize, ya as usize..=yb as usize);
        for y in ys {
            for x in xs.clone() {
                if inside_hull(&hull, (x as f64 + 0.5, y as f64 + 0.5)) {
                    mask[y * w + x] = true;
                }
            }
        }
    }
    mask
}

/// PSNR over the moving-object mask; `None` when no box is visible.
pub fn psnr_star(
    img: &Image,
    reference: &Image,
    tracklets: &[Tracklet],
    camera: &Camera,
    t: usize,
) -> Result<Option<f64>> {
    if img.width != camera.width as usize || img.height != camera.height as usize {
        return Err(Error::invalid("image size differs from the camera"));
    }
    psnr_masked(img, reference, &object_mask(camera, tracklets, t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// Mean over classes present in the reference.
    pub miou: f64,
    /// IoU per class, `None` for classes absent from the reference.
    pub per_class: Vec<Option<f64>>,
}

/// Mean IoU over the classes present in `reference`. Pixels labelled
/// [`IGNORE_LABEL`] in the reference are skipped.
pub fn miou(pred: &[u8], reference: &[u8], num_classes: usize) -> Result<MiouReport> {
    if pred.len() != reference.len() {
        return Err(Error::invalid("label maps differ in size"));
    }
    let m = num_classes;
    let mut confusion = vec![0u64; m * m];
    for (&p, &r) in pred.iter().zip(reference) {
        if r == IGNORE_LABEL {
            continue;
        }
        if p as usize >= m || r as usize >= m {
            return Err(Error::invalid(format!(
                "label {} outside {m} classes",
                p.max(r)
            )));
        }
        confusion[r as usize * m + p as usize] += 1;
    }
    let mut per_class = vec![None; m];
    let mut sum = 0.0;
    let mut present = 0usize;
    for (c, slot) in per_class.iter_mut().enumerate() {
        let row: u64 = confusion[c * m..(c + 1) * m].iter().sum();
        if row == 0 {
            continue;
        }
        let col: u64 = (0..m).map(|r| confusion[r * m + c]).sum();
        let tp = confusion[c * m + c];
        let iou = tp as f64 / (row + col - tp) as f64;
        *slot = Some(iou);
        sum += iou;
        present += 1;
    }
    Ok(MiouReport {
        miou: if present == 0 {
            f64::NAN
        } else {
            sum / present as f64
        },
        per_class,
    })
}

/// Opacity below which a pixel counts as sky in label maps.
pub const SKY_OPACITY: f64 = 0.5;

/// Per-pixel class: `sky_class` where the accumulated opacity is below
/// [`SKY_OPACITY`] (when given), otherwise the argmax of the semantic logits.
pub fn label_map(out: &RenderOutputs, num_classes: usize, sky_class: Option<u8>) -> Vec<u8> {
    let m = num_classes;
    (0..out.opacity.data.len())
        .map(|i| match sky_class {
            Some(sky) if out.opacity.data[i] < SKY_OPACITY => sky,
            _ => {
                let z = &out.semantic.data[i * m..(i + 1) * m];
                (0..m).fold(0, |b, c| if z[c] > z[b] { c } else { b }) as u8
            }
        })
        .collect()
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn ser_db_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => ser_db(v, s),
        None => s.serialize_none(),
    }
}

fn de_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad dB value {t:?}"))),
    }
}

fn de_db_opt<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    struct Wrap(#[serde(deserialize_with = "de_db")] f64);
    Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub timestep: usize,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(serialize_with = "ser_db_opt", deserialize_with = "de_db_opt", default)]
    pub psnr_star: Option<f64>,
    #[serde(default)]
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    /// Mean over frames; PSNR* and mIoU over the frames that have them.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(serialize_with = "ser_db_opt", deserialize_with = "de_db_opt", default)]
    pub psnr_star: Option<f64>,
    #[serde(default)]
    pub miou: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Render and labels of one dataset frame as they would be saved: colour
/// rounded to 8 bits, labels from [`label_map`].
pub fn render_frame(
    scene: &SceneGraph,
    ds: &Dataset,
    frame: usize,
    tile_size: usize,
) -> Result<(Image, Vec<u8>)> {
    let f = ds
        .frames
        .get(frame)
        .ok_or_else(|| Error::invalid(format!("frame {frame} out of range")))?;
    let cfg = RenderConfig {
        tile_size,
        ..RenderConfig::at(f.timestep)
    };
    let out = render(scene, &f.camera, &cfg)?;
    let sky = ds
        .class_names
        .iter()
        .position(|n| n == "sky")
        .map(|i| i as u8);
    Ok((
        out.color.quantized_u8(),
        label_map(&out, scene.num_classes, sky),
    ))
}

/// Metrics of the given dataset frames rendered from `scene`. Frames render
/// in parallel; the report keeps the order of `frames`.
pub fn evaluate(
    scene: &SceneGraph,
    ds: &Dataset,
    frames: &[usize],
    tile_size: usize,
) -> Result<EvalReport> {
    let per: Vec<FrameMetrics> = frames
        .par_iter()
        .map(|&i| -> Result<FrameMetrics> {
            let (img, labels) = render_frame(scene, ds, i, tile_size)?;
            frame_metrics(ds, i, &img, &labels)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(per))
}

/// Metrics of one frame from an already rendered image and label map.
pub fn frame_metrics(
    ds: &Dataset,
    frame: usize,
    img: &Image,
    labels: &[u8],
) -> Result<FrameMetrics> {
    let f = &ds.frames[frame];
    Ok(FrameMetrics {
        frame,
        timestep: f.timestep,
        psnr: psnr(img, &f.image)?,
        ssim: ssim(img, &f.image)?,
        psnr_star: psnr_star(img, &f.image, &ds.tracklets, &f.camera, f.timestep)?,
        miou: match &f.semantic {
            Some(r) => Some(miou(labels, r, ds.num_classes())?.miou).filter(|v| v.is_finite()),
            None => None,
        },
    })
}

pub fn summarize(frames: Vec<FrameMetrics>) -> EvalReport {
    EvalReport {
        psnr: mean(frames.iter().map(|f| f.psnr)).unwrap_or(f64::NAN),
        ssim: mean(frames.iter().map(|f| f.ssim)).unwrap_or(f64::NAN),
        psnr_star: mean(frames.iter().filter_map(|f| f.psnr_star)),
        miou: mean(frames.iter().filter_map(|f| f.miou)),
        frames,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_z;
    use crate::scene::PoseTrack;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_images_give_infinite_psnr() {
        let a = Image::filled(8, 6, &[0.3, 0.4, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn uniform_half_offset() {
        let a = Image::filled(8, 6, &[0.0; 3]);
        let b = Image::filled(8, 6, &[0.5; 3]);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((p - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(psnr(&Image::new(2, 2, 3), &Image::new(3, 2, 3)).is_err());
    }

    fn tracklet(yaw: f64, pos: Vec3) -> Tracklet {
        Tracklet {
            id: 1,
            track: PoseTrack::new(
                vec![rot_z(yaw)],
                vec![pos],
                Vec3::new(2.0, 1.0, 1.2),
                vec![true],
            ),
        }
    }

    fn camera() -> Camera {
        Camera::look_at(
            Vec3::new(-8.0, -3.0, 2.5),
            Vec3::zeros(),
            Vec3::z(),
            70.0,
            70.0,
            64,
            48,
        )
    }

    /// Slab test of the pixel-centre ray against the expanded box.
    fn ray_hits_box(cam: &Camera, tr: &Tracklet, x: usize, y: usize) -> bool {
        let pose = tr.track.base_pose(0).unwrap();
        let d = tr.track.box_dims;
        let half = [0.75 * d.x, 0.75 * d.y, 0.5 * d.z];
        let origin = pose.rotation.transpose() * (cam.center() - pose.translation);
        let dir = pose.rotation.transpose() * cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            let (lo, hi) = (
                (-half[a] - origin[a]) / dir[a],
                (half[a] - origin[a]) / dir[a],
            );
            t0 = t0.max(lo.min(hi));
            t1 = t1.min(lo.max(hi));
        }
        t0 <= t1
    }

    #[test]
    fn box_mask_matches_ray_slab_oracle() {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let tr = tracklet(
                rng.random_range(-3.0..3.0),
                Vec3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-0.5..0.5),
                ),
            );
            let mask = object_mask(&cam, std::slice::from_ref(&tr), 0);
            let mut disagreements = 0;
            for y in 0..48 {
                for x in 0..64 {
                    if mask[y * 64 + x] != ray_hits_box(&cam, &tr, x, y) {
                        disagreements += 1;
                    }
                }
            }
            // Pixel centres exactly on a silhouette edge may go either way.
            assert!(disagreements <= 2, "{disagreements} pixels differ");
            assert!(mask.iter().any(|m| *m));
        }
    }

    #[test]
    fn box_behind_camera_gives_no_mask() {
        let cam = camera();
        let tr = tracklet(0.0, Vec3::new(-20.0, -7.5, 5.0));
        assert!(object_mask(&cam, &[tr.clone()], 0).iter().all(|m| !m));
        let img = Image::new(64, 48, 3);
        assert_eq!(psnr_star(&img, &img, &[tr], &cam, 0).unwrap(), None);
    }

    #[test]
    fn box_straddling_near_plane_is_clipped() {
        // Box around the camera centre: every pixel sees it.
        let cam = camera();
        let tr = tracklet(0.3, cam.center());
        assert!(object_mask(&cam, &[tr], 0).iter().all(|m| *m));
    }

    #[test]
    fn union_of_overlapping_boxes() {
        let cam = camera();
        let a = tracklet(0.0, Vec3::zeros());
        let mut b = tracklet(0.5, Vec3::new(0.5, 0.5, 0.0));
        b.id = 2;
        let ma = object_mask(&cam, &[a.clone()], 0);
        let mb = object_mask(&cam, &[b.clone()], 0);
        let mu = object_mask(&cam, &[a, b], 0);
        for i in 0..mu.len() {
            assert_eq!(mu[i], ma[i] || mb[i]);
        }
    }

    #[test]
    fn invalid_frames_are_skipped() {
        let cam = camera();
        let mut tr = tracklet(0.0, Vec3::zeros());
        tr.track.valid[0] = false;
        assert!(object_mask(&cam, &[tr], 0).iter().all(|m| !m));
    }

    #[test]
    fn infinite_psnr_serializes_as_text() {
        let f = FrameMetrics {
            frame: 0,
            timestep: 0,
            psnr: f64::INFINITY,
            ssim: 1.0,
            psnr_star: None,
            miou: None,
        };
        let j = serde_json::to_string(&f).unwrap();
        assert!(j.contains(r#""psnr":"inf""#), "{j}");
        assert_eq!(serde_json::from_str::<FrameMetrics>(&j).unwrap(), f);
        let g = FrameMetrics {
            psnr: 31.5,
            psnr_star: Some(f64::INFINITY),
            ..f
        };
        let j = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<FrameMetrics>(&j).unwrap(), g);
    }

    #[test]
    fn miou_trivial_cases() {
        let a = vec![0u8, 1, 2, 2, 1];
        assert_eq!(miou(&a, &a, 3).unwrap().miou, 1.0);
        let r = miou(&[1, 1, 1], &[0, 0, 0], 3).unwrap();
        assert_eq!(r.miou, 0.0);
        assert_eq!(r.per_class, vec![Some(0.0), None, None]);
        assert!(miou(&[5], &[0], 3).is_err());
    }

    proptest! {
        #[test]
        fn miou_matches_set_oracle(
            pairs in prop::collection::vec((0u8..4, prop_oneof![0u8..4, Just(IGNORE_LABEL)]), 1..200)
        ) {
            let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let reference: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let r = miou(&pred, &reference, 4).unwrap();
            let mut ious = Vec::new();
            for c in 0..4u8 {
                let kept: Vec<&(u8, u8)> = pairs.iter().filter(|p| p.1 != IGNORE_LABEL).collect();
                if !kept.iter().any(|p| p.1 == c) {
                    prop_assert_eq!(r.per_class[c as usize], None);
                    continue;
                }
                let inter = kept.iter().filter(|p| p.0 == c && p.1 == c).count();
                let union = kept.iter().filter(|p| p.0 == c || p.1 == c).count();
                let iou = inter as f64 / union as f64;
                prop_assert!((r.per_class[c as usize].unwrap() - iou).abs() < 1e-12);
                ious.push(iou);
            }
            if !ious.is_empty() {
                prop_assert!((r.miou - ious.iter().sum::<f64>() / ious.len() as f64).abs() < 1e-12);
            }
        }

        #[test]
        fn masked_psnr_over_full_mask_is_psnr(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = Image::new(5, 4, 3);
            let mut b = Image::new(5, 4, 3);
            for v in a.data.iter_mut().chain(b.data.iter_mut()) {
                *v = rng.random_range(0.0..1.0);
            }
            let full = psnr_masked(&a, &b, &[true; 20]).unwrap().unwrap();
            prop_assert!((full - psnr(&a, &b).unwrap()).abs() < 1e-12);
        }
    }
}

//! Deterministic box-world scenes rendered into posed depth frames and detection streams,
//! with exact ground truth for evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ClassEmbeddings, LabeledCloud};
use crate::geometry::{Aabb, CameraIntrinsics, FeatureVector, FrameId, Pose};
use crate::ingest::{
    write_detections, DatasetManifest, DepthGrid, DepthUnit, DetectionRecord, FrameEntry, FrameRecord, Mask,
};
use crate::localization::{CameraMount, Pose2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_name: String,
    pub bbox: Aabb,
    /// Unit-norm feature every detection of this object is drawn around.
    pub archetype: FeatureVector,
    /// Marks walls, floors and the like; only relevant to detector-mode class hints.
    #[serde(default)]
    pub background: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    /// Probability that a visible object yields no detection in a frame.
    pub mask_dropout: f64,
    /// Standard deviation of per-component feature noise before renormalization.
    pub feature_sigma: f64,
    /// Standard deviation of additive depth noise, meters.
    pub depth_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    /// Camera → map pose per frame.
    pub trajectory: Vec<Pose>,
    /// Planar robot poses that produced `trajectory`, when it came from a mounted camera.
    #[serde(default)]
    pub robot_path: Option<Vec<Pose2>>,
    pub intrinsics: CameraIntrinsics,
    pub noise: NoiseParams,
    pub seed: u64,
    /// Objects covering fewer pixels than this in a frame produce no detection.
    pub min_mask_pixels: usize,
}

impl SceneSpec {
    pub fn feature_dim(&self) -> usize {
        self.objects.first().map_or(0, |o| o.archetype.dim())
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let dim = self.feature_dim();
        for (i, o) in self.objects.iter().enumerate() {
            if o.bbox.volume() <= 0.0 {
                return Err(Error::invalid("scene", format!("object {i} has a degenerate box")));
            }
            if o.archetype.dim() != dim || !o.archetype.is_unit(1e-6) {
                return Err(Error::invalid(
                    "scene",
                    format!("object {i} archetype must be unit-norm, dim {dim}"),
                ));
            }
        }
        if let Some(path) = &self.robot_path {
            if path.len() != self.trajectory.len() {
                return Err(Error::invalid("scene", "robot path and trajectory lengths differ"));
            }
        }
        for (p, q) in [("mask_dropout", self.noise.mask_dropout)] {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::invalid("scene", format!("{p} must lie in [0, 1]")));
            }
        }
        if self.noise.feature_sigma < 0.0 || self.noise.depth_sigma < 0.0 {
            return Err(Error::invalid("scene", "noise deviations must be non-negative"));
        }
        Ok(())
    }

    /// Class table: distinct class names in first-appearance order.
    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for o in &self.objects {
            if !names.contains(&o.class_name) {
                names.push(o.class_name.clone());
            }
        }
        names
    }

    /// One embedding per class, taken from the class's first object.
    pub fn class_embeddings(&self) -> ClassEmbeddings {
        let class_names = self.class_names();
        let embeddings = class_names
            .iter()
            .map(|c| {
                self.objects
                    .iter()
                    .find(|o| &o.class_name == c)
                    .unwrap()
                    .archetype
                    .clone()
            })
            .collect();
        ClassEmbeddings {
            class_names,
            embeddings,
        }
    }
}

/// `n` seeded random unit vectors of dimension `dim`.
pub fn archetypes(n: usize, dim: usize, seed: u64) -> Vec<FeatureVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            FeatureVector::new(v)
                .renormalized()
                .expect("random gaussian vector is non-zero")
        })
        .collect()
}

pub const DESK_CLASSES: [(&str, [f64; 3]); 10] = [
    ("chair", [0.45, 0.45, 0.5]),
    ("sofa", [0.7, 0.4, 0.45]),
    ("table", [0.6, 0.5, 0.4]),
    ("lamp", [0.3, 0.3, 0.5]),
    ("tv", [0.55, 0.3, 0.4]),
    ("clock", [0.35, 0.3, 0.35]),
    ("mug", [0.3, 0.3, 0.3]),
    ("book", [0.4, 0.3, 0.3]),
    ("trash can", [0.35, 0.35, 0.45]),
    ("backpack", [0.4, 0.3, 0.45]),
];

pub const FEATURE_DIM: usize = 32;

/// Grid cells (x, y) used by the desk scene, meters.
const DESK_SLOTS: [[f64; 2]; 10] = [
    [-1.5, -1.0],
    [-0.5, -1.0],
    [0.5, -1.0],
    [1.5, -1.0],
    [-1.0, 0.0],
    [0.0, 0.0],
    [1.0, 0.0],
    [-1.5, 1.0],
    [0.5, 1.0],
    [1.5, 1.0],
];

/// Ten boxes on the floor, one per class, at least 0.3 m apart.
pub fn desk_objects(seed: u64) -> Vec<SceneObject> {
    let arch = archetypes(DESK_CLASSES.len(), FEATURE_DIM, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    DESK_CLASSES
        .iter()
        .zip(DESK_SLOTS)
        .zip(arch)
        .map(|(((name, ext), [x, y]), archetype)| {
            let jitter = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
            let c = Point3::new(x + jitter[0], y + jitter[1], ext[2] / 2.0);
            SceneObject {
                class_name: name.to_string(),
                bbox: Aabb::from_center_extent(c, Vector3::from(*ext)).unwrap(),
                archetype,
                background: false,
            }
        })
        .collect()
}

pub fn desk_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 240.0,
        fy: 240.0,
        cx: 160.0,
        cy: 120.0,
        width: 320,
        height: 240,
    }
}

/// Camera mount aimed at the loop center from `radius` away.
pub fn loop_mount(height: f64, radius: f64) -> CameraMount {
    CameraMount {
        height,
        pitch: height.atan2(radius),
    }
}

/// `n` robot poses evenly spaced on a circle around the origin, facing the center.
pub fn loop_path(radius: f64, n: usize, phase: f64) -> Vec<Pose2> {
    (0..n)
        .map(|i| {
            let a = phase + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            Pose2::new(radius * a.cos(), radius * a.sin(), a + std::f64::consts::PI)
        })
        .collect()
}

pub const LOOP_RADIUS: f64 = 3.0;
pub const CAMERA_HEIGHT: f64 = 2.0;

/// The default ten-object scene observed from `frames` poses on one loop.
pub fn desk_scene(seed: u64, frames: usize) -> SceneSpec {
    let mount = loop_mount(CAMERA_HEIGHT, LOOP_RADIUS);
    let path = loop_path(LOOP_RADIUS, frames, 0.0);
    SceneSpec {
        objects: desk_objects(seed),
        trajectory: path.iter().map(|p| mount.camera_pose(p)).collect(),
        robot_path: Some(path),
        intrinsics: desk_intrinsics(),
        noise: NoiseParams::default(),
        seed,
        min_mask_pixels: 30,
    }
}

/// Distance along `dir` from `origin` to the first intersection with `b` in front of the
/// origin (slab method). Origins inside the box return the exit distance.
pub fn ray_box(origin: &Point3<f64>, dir: &Vector3<f64>, b: &Aabb) -> Option<f64> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        if dir[k] == 0.0 {
            if origin[k] < b.min[k] || origin[k] > b.max[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[k];
        let (mut a, mut c) = ((b.min[k] - origin[k]) * inv, (b.max[k] - origin[k]) * inv);
        if a > c {
            std::mem::swap(&mut a, &mut c);
        }
        t0 = t0.max(a);
        t1 = t1.min(c);
        if t0 > t1 {
            return None;
        }
    }
    Some(if t0 > 0.0 { t0 } else { t1 }).filter(|t| *t > 0.0)
}

/// Camera-frame ray through pixel (u, v) with unit z component, so hit distances along it
/// are depths.
pub fn pixel_ray(k: &CameraIntrinsics, u: u32, v: u32) -> Vector3<f64> {
    Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0)
}

/// Nearest box hit by the ray: (object index, depth).
pub fn cast(objects: &[SceneObject], origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(usize, f64)> {
    objects
        .iter()
        .enumerate()
        .filter_map(|(i, o)| ray_box(origin, dir, &o.bbox).map(|t| (i, t)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

/// Which scene object produced one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtDetection {
    pub frame_id: FrameId,
    /// Line index in the frame's detection file.
    pub detection_index: usize,
    pub object_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub record: FrameRecord,
    pub detections: Vec<DetectionRecord>,
    /// Scene object index per detection.
    pub sources: Vec<usize>,
    /// Scene object index per pixel, `None` where no box was hit.
    pub hits: Vec<Option<usize>>,
    pub odometry: Option<Pose2>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SceneSpec,
    pub frames: Vec<RenderedFrame>,
    /// Observed surface points labeled with their object's class.
    pub gt_cloud: LabeledCloud,
    pub warnings: Vec<String>,
}

/// Spacing of the ground-truth point grid, meters.
pub const GT_SPACING: f64 = 0.01;

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64 + 1);
    rng
}

fn render_frame(spec: &SceneSpec, index: usize) -> Result<RenderedFrame> {
    let k = &spec.intrinsics;
    let pose = &spec.trajectory[index];
    let frame_id = index as FrameId;
    let mut rng = frame_rng(spec.seed, index);
    let depth_noise = Normal::new(0.0, spec.noise.depth_sigma.max(0.0)).unwrap();
    let origin = Point3::from(*pose.translation());
    let mut depth = DepthGrid::filled(k.width, k.height, 0.0);
    let mut hits = vec![None; k.pixel_count()];
    for v in 0..k.height {
        for u in 0..k.width {
            let dir = pose.rotation() * pixel_ray(k, u, v);
            if let Some((obj, t)) = cast(&spec.objects, &origin, &dir) {
                let noisy = if spec.noise.depth_sigma > 0.0 {
                    t + depth_noise.sample(&mut rng)
                } else {
                    t
                };
                if noisy > 0.0 {
                    depth.set(u, v, noisy as f32);
                    hits[(v * k.width + u) as usize] = Some(obj);
                }
            }
        }
    }

    let mut pixels: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (p, h) in hits.iter().enumerate() {
        if let Some(o) = h {
            pixels.entry(*o).or_default().push(p as u32);
        }
    }
    let feature_noise = Normal::new(0.0, spec.noise.feature_sigma.max(0.0)).unwrap();
    let mut detections = Vec::new();
    let mut sources = Vec::new();
    for (obj, px) in pixels {
        // draw both numbers for every object so dropout does not shift later draws
        let dropped = rng.random::<f64>() < spec.noise.mask_dropout;
        let o = &spec.objects[obj];
        let feature = if spec.noise.feature_sigma > 0.0 {
            let noisy: Vec<f64> = o
                .archetype
                .as_slice()
                .iter()
                .map(|a| a + feature_noise.sample(&mut rng))
                .collect();
            FeatureVector::new(noisy).renormalized()?.into_inner()
        } else {
            o.archetype.as_slice().to_vec()
        };
        if dropped || px.len() < spec.min_mask_pixels {
            continue;
        }
        detections.push(DetectionRecord {
            frame_id,
            mask_rle: Mask::from_pixels(px).to_rle(),
            feature,
            class_hint: Some(o.class_name.clone()),
            crop_ref: Some(format!("mock:{}#f{frame_id}o{obj}", o.class_name)),
        });
        sources.push(obj);
    }
    let odometry = spec
        .robot_path
        .as_ref()
        .and_then(|p| index.checked_sub(1).map(|prev| p[prev].delta_to(&p[index])));
    Ok(RenderedFrame {
        record: FrameRecord {
            frame_id,
            depth,
            pose: *pose,
            intrinsics: *k,
            color_ref: None,
        },
        detections,
        sources,
        hits,
        odometry,
    })
}

/// Renders every frame. Frames are independent and rendered in parallel; each draws from
/// its own seeded stream.
pub fn render(spec: &SceneSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let frames = (0..spec.trajectory.len())
        .into_par_iter()
        .map(|i| render_frame(spec, i))
        .collect::<Result<Vec<_>>>()?;

    let mut warnings = Vec::new();
    let seen: BTreeSet<usize> = frames.iter().flat_map(|f| f.sources.iter().copied()).collect();
    for (i, o) in spec.objects.iter().enumerate() {
        if !seen.contains(&i) {
            warnings.push(format!("object {i} ({}) is never detected", o.class_name));
        }
    }

    let class_names = spec.class_names();
    let class_of: Vec<u32> = spec
        .objects
        .iter()
        .map(|o| class_names.iter().position(|c| c == &o.class_name).unwrap() as u32)
        .collect();
    let mut cells: BTreeMap<(usize, [i64; 3]), Point3<f64>> = BTreeMap::new();
    for f in &frames {
        let k = &f.record.intrinsics;
        for (p, h) in f.hits.iter().enumerate() {
            let Some(obj) = h else { continue };
            let (u, v) = (p as u32 % k.width, p as u32 / k.width);
            let Some(z) = f.record.depth.at(u, v) else { continue };
            let cam = Point3::from(pixel_ray(k, u, v) * z);
            let world = f.record.pose.transform_point(&cam);
            let cell = std::array::from_fn(|i| (world[i] / GT_SPACING).floor() as i64);
            cells.entry((*obj, cell)).or_insert(world);
        }
    }
    let (points, labels): (Vec<_>, Vec<_>) = cells.into_iter().map(|((obj, _), p)| (p, class_of[obj])).unzip();
    Ok(SyntheticDataset {
        spec: spec.clone(),
        frames,
        gt_cloud: LabeledCloud::new(class_names, points, labels)?,
        warnings,
    })
}

impl SyntheticDataset {
    pub fn gt_table(&self) -> Vec<GtDetection> {
        self.frames
            .iter()
            .flat_map(|f| {
                f.sources.iter().enumerate().map(|(i, &o)| GtDetection {
                    frame_id: f.record.frame_id,
                    detection_index: i,
                    object_index: o,
                })
            })
            .collect()
    }

    /// Writes `manifest.json`, `depth/*.depth`, `detections/*.jsonl` and `ground_truth.json`
    /// under `dir`, returning the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let depth_dir = dir.join("depth");
        let det_dir = dir.join("detections");
        for d in [&depth_dir, &det_dir] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut manifest = DatasetManifest::new(dir, self.spec.feature_dim());
        manifest.depth_unit = DepthUnit::Meters;
        for f in &self.frames {
            let id = f.record.frame_id;
            let depth_rel = PathBuf::from(format!("depth/{id:06}.depth"));
            let det_rel = PathBuf::from(format!("detections/{id:06}.jsonl"));
            f.record.depth.write(&dir.join(&depth_rel))?;
            write_detections(&dir.join(&det_rel), &f.detections)?;
            manifest.frames.push(FrameEntry {
                frame_id: id,
                depth: depth_rel,
                detections: Some(det_rel),
                pose: f.record.pose,
                intrinsics: f.record.intrinsics,
                color: None,
                odometry: f.odometry.map(|d| [d.x, d.y, d.yaw]),
            });
        }
        let manifest_path = dir.join("manifest.json");
        manifest.write(&manifest_path)?;
        let gt = GroundTruthFile {
            objects: self
                .spec
                .objects
                .iter()
                .map(|o| GroundTruthObject {
                    class_name: o.class_name.clone(),
                    bbox: o.bbox,
                })
                .collect(),
            detections: self.gt_table(),
            class_embeddings: self.spec.class_embeddings(),
            robot_path: self.spec.robot_path.clone(),
            warnings: self.warnings.clone(),
        };
        let gt_path = dir.join("ground_truth.json");
        let text = serde_json::to_string(&gt).expect("serializable");
        std::fs::write(&gt_path, text).map_err(|e| Error::io(&gt_path, e))?;
        self.gt_cloud.write(&dir.join("gt_labels.json"))?;
        Ok(manifest_path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub class_name: String,
    pub bbox: Aabb,
}

/// `ground_truth.json` next to a rendered dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub objects: Vec<GroundTruthObject>,
    pub detections: Vec<GtDetection>,
    pub class_embeddings: ClassEmbeddings,
    pub robot_path: Option<Vec<Pose2>>,
    pub warnings: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::load_manifest;

    /// Steps along the ray until inside the box, then bisects the entry point.
    fn march(origin: &Point3<f64>, dir: &Vector3<f64>, objects: &[SceneObject]) -> Option<f64> {
        let inside = |t: f64| objects.iter().any(|o| o.bbox.contains(&(origin + dir * t)));
        let step = 1e-3;
        let mut t = step;
        while t < 20.0 {
            if inside(t) {
                let (mut lo, mut hi) = (t - step, t);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if inside(mid) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Some(hi);
            }
            t += step;
        }
        None
    }

    fn small_spec(frames: usize) -> SceneSpec {
        let mut spec = desk_scene(1, frames);
        spec.objects.truncate(3);
        spec
    }

    #[test]
    fn depth_matches_ray_march() {
        let spec = small_spec(4);
        let data = render(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = &spec.intrinsics;
        let mut checked = 0;
        for f in &data.frames {
            for _ in 0..10 {
                let (u, v) = (rng.random_range(0..k.width), rng.random_range(0..k.height));
                let dir = f.record.pose.rotation() * pixel_ray(k, u, v);
                let origin = Point3::from(*f.record.pose.translation());
                match (f.record.depth.at(u, v), march(&origin, &dir, &spec.objects)) {
                    (Some(d), Some(m)) => {
                        assert!((d - m).abs() < 1e-6, "pixel ({u},{v}): {d} vs {m}");
                        checked += 1;
                    }
                    (None, None) => {}
                    other => panic!("pixel ({u},{v}) disagrees: {other:?}"),
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn facing_box_is_always_detected() {
        let mut spec = desk_scene(2, 8);
        spec.objects = vec![SceneObject {
            bbox: Aabb::from_center_extent(Point3::new(0.0, 0.0, 0.25), Vector3::new(0.5, 0.5, 0.5)).unwrap(),
            ..spec.objects[0].clone()
        }];
        let data = render(&spec).unwrap();
        assert!(data.warnings.is_empty());
        for f in &data.frames {
            assert_eq!(f.detections.len(), 1);
            assert!(!Mask::from_rle(&f.detections[0].mask_rle, k_pixels(&spec))
                .unwrap()
                .is_empty());
            assert_eq!(f.detections[0].feature, spec.objects[0].archetype.as_slice());
        }
    }

    fn k_pixels(spec: &SceneSpec) -> usize {
        spec.intrinsics.pixel_count()
    }

    #[test]
    fn seeded_render_is_identical_and_roundtrips() {
        let mut spec = small_spec(3);
        spec.noise = NoiseParams {
            mask_dropout: 0.1,
            feature_sigma: 0.05,
            depth_sigma: 0.002,
        };
        let a = render(&spec).unwrap();
        let b = render(&spec).unwrap();
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        a.write(da.path()).unwrap();
        b.write(db.path()).unwrap();
        for rel in [
            "manifest.json",
            "detections/000001.jsonl",
            "depth/000002.depth",
            "ground_truth.json",
        ] {
            let x = std::fs::read(da.path().join(rel)).unwrap();
            let y = std::fs::read(db.path().join(rel)).unwrap();
            assert!(x == y, "{rel} differs");
        }
        let m = load_manifest(&da.path().join("manifest.json")).unwrap();
        assert_eq!(m.frames.len(), 3);
        let f = m.load_frame(1).unwrap();
        assert_eq!(f.depth, a.frames[1].record.depth);
        assert_eq!(m.load_detections(1).unwrap(), a.frames[1].detections);
    }

    #[test]
    fn ray_box_cases() {
        let b = Aabb::new(Point3::new(1.0, -1.0, -1.0), Point3::new(2.0, 1.0, 1.0)).unwrap();
        let o = Point3::origin();
        assert_eq!(ray_box(&o, &Vector3::new(1.0, 0.0, 0.0), &b), Some(1.0));
        assert_eq!(ray_box(&o, &Vector3::new(-1.0, 0.0, 0.0), &b), None);
        assert_eq!(ray_box(&o, &Vector3::new(0.0, 1.0, 0.0), &b), None);
        assert_eq!(
            ray_box(&Point3::new(1.5, 0.0, 0.0), &Vector3::new(1.0, 0.0, 0.0), &b),
            Some(0.5)
        );
    }
}

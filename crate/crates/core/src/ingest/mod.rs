//! Dataset loading: manifests, depth grids, per-frame detection streams, and the
//! mask → denoised map-frame cloud path.

mod dbscan;
mod depth;
mod mask;
mod project;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use dbscan::{dbscan_labels, denoise};
pub use depth::{DepthGrid, DepthUnit, DEPTH_MAGIC};
pub use mask::Mask;
pub use project::{backproject_mask, to_map_frame};

use crate::error::{Error, Result};
use crate::geometry::{renormalize, CameraIntrinsics, FeatureVector, FrameId, Pose};
use crate::model::Detection;

/// A posed depth observation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: FrameId,
    pub depth: DepthGrid,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub color_ref: Option<PathBuf>,
}

/// One frame entry of `manifest.json`. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_id: FrameId,
    pub depth: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<PathBuf>,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<PathBuf>,
    /// Planar odometry `[dx, dy, dyaw]` since the previous frame, in the previous robot frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub odometry: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestFile {
    feature_dim: usize,
    #[serde(default)]
    depth_unit: DepthUnit,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub feature_dim: usize,
    pub depth_unit: DepthUnit,
    pub frames: Vec<FrameEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, feature_dim: usize) -> Self {
        DatasetManifest {
            root: root.into(),
            feature_dim,
            depth_unit: DepthUnit::default(),
            frames: Vec::new(),
        }
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = ManifestFile {
            feature_dim: self.feature_dim,
            depth_unit: self.depth_unit,
            frames: self.frames.clone(),
        };
        let text = serde_json::to_string_pretty(&file).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_frame(&self, index: usize) -> Result<FrameRecord> {
        let entry = &self.frames[index];
        let path = self.resolve(&entry.depth);
        let depth = DepthGrid::read(&path, self.depth_unit)?;
        if depth.width() != entry.intrinsics.width || depth.height() != entry.intrinsics.height {
            return Err(Error::parse(
                &path,
                None,
                format!(
                    "depth is {}x{} but intrinsics declare {}x{}",
                    depth.width(),
                    depth.height(),
                    entry.intrinsics.width,
                    entry.intrinsics.height
                ),
            ));
        }
        Ok(FrameRecord {
            frame_id: entry.frame_id,
            depth,
            pose: entry.pose,
            intrinsics: entry.intrinsics,
            color_ref: entry.color.as_ref().map(|c| self.resolve(c)),
        })
    }

    /// Raw detection lines for frame `index`; empty when the frame lists no detection file.
    pub fn load_detections(&self, index: usize) -> Result<Vec<DetectionRecord>> {
        let entry = &self.frames[index];
        match &entry.detections {
            Some(rel) => read_detections(
                &self.resolve(rel),
                self.feature_dim,
                Some(entry.frame_id),
                entry.intrinsics.pixel_count(),
            ),
            None => Ok(Vec::new()),
        }
    }
}

/// Loads and validates `manifest.json`. Every problem found is reported, not just the first.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, Some(e.line()), e.to_string()))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut errors = Vec::new();
    if file.feature_dim == 0 {
        errors.push(Error::parse(path, None, "feature_dim must be positive"));
    }
    let mut seen = BTreeSet::new();
    let mut prev: Option<FrameId> = None;
    for (i, frame) in file.frames.iter().enumerate() {
        let ctx = |msg: String| Error::parse(path, None, format!("frames[{i}] (frame_id {}): {msg}", frame.frame_id));
        if !seen.insert(frame.frame_id) {
            errors.push(ctx("duplicate frame id".into()));
        } else if prev.is_some_and(|p| frame.frame_id < p) {
            errors.push(ctx("frame ids are not in increasing order".into()));
        }
        prev = Some(frame.frame_id);
        if let Err(e) = frame.intrinsics.validate() {
            errors.push(ctx(e.to_string()));
        }
        let mut required = vec![("depth", &frame.depth)];
        required.extend(frame.detections.as_ref().map(|d| ("detections", d)));
        required.extend(frame.color.as_ref().map(|c| ("color", c)));
        for (what, rel) in required {
            let full = root.join(rel);
            if !full.is_file() {
                errors.push(ctx(format!("missing {what} file {}", full.display())));
            }
        }
    }
    match errors.len() {
        0 => Ok(DatasetManifest {
            root,
            feature_dim: file.feature_dim,
            depth_unit: file.depth_unit,
            frames: file.frames,
        }),
        1 => Err(errors.pop().unwrap()),
        _ => Err(Error::Multiple(errors)),
    }
}

/// One line of a per-frame detection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_id: FrameId,
    pub mask_rle: Vec<u32>,
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_hint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_ref: Option<String>,
}

/// Parses a JSON-lines detection file. Blank lines are skipped; every other line must parse,
/// carry a `feature_dim`-sized non-degenerate feature, and a mask that fits the image.
pub fn read_detections(
    path: &Path,
    feature_dim: usize,
    frame_id: Option<FrameId>,
    pixel_count: usize,
) -> Result<Vec<DetectionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::parse(path, Some(lineno), msg);
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.feature.len() != feature_dim {
            return Err(bad(format!(
                "feature has {} values, manifest declares {feature_dim}",
                rec.feature.len()
            )));
        }
        if let Some(expected) = frame_id {
            if rec.frame_id != expected {
                return Err(bad(format!("frame_id {} in file for frame {expected}", rec.frame_id)));
            }
        }
        Mask::from_rle(&rec.mask_rle, pixel_count).map_err(|e| bad(e.to_string()))?;
        renormalize(&FeatureVector::new(rec.feature.clone())).map_err(|e| bad(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("detection serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    pub eps: f64,
    pub min_pts: usize,
    /// Detections with fewer denoised points are discarded.
    pub min_points: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            eps: 0.05,
            min_pts: 10,
            min_points: 25,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config("dbscan eps must be positive".into()));
        }
        if self.min_pts == 0 {
            return Err(Error::Config("dbscan min_pts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mask → back-projection → DBSCAN in the camera frame. Returns `None` when the result is too
/// small to keep.
pub fn camera_cloud(
    frame: &FrameRecord,
    mask: &Mask,
    cfg: &DenoiseConfig,
) -> Result<Option<crate::geometry::PointCloud>> {
    let raw = backproject_mask(frame, mask)?;
    if raw.is_empty() {
        return Ok(None);
    }
    let clean = denoise(&raw, cfg.eps, cfg.min_pts)?;
    Ok((clean.len() >= cfg.min_points.max(1)).then_some(clean))
}

/// Turns one frame's detection records into map-frame detections. Returns the surviving
/// detections paired with their index in `records`.
pub fn prepare_detections(
    frame: &FrameRecord,
    records: &[DetectionRecord],
    cfg: &DenoiseConfig,
) -> Result<Vec<(usize, Detection)>> {
    let mut out = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let mask = Mask::from_rle(&rec.mask_rle, frame.intrinsics.pixel_count())?;
        let Some(cloud) = camera_cloud(frame, &mask, cfg)? else {
            continue;
        };
        out.push((
            i,
            Detection {
                frame_id: frame.frame_id,
                mask,
                feature: renormalize(&FeatureVector::new(rec.feature.clone()))?,
                cloud: to_map_frame(&cloud, &frame.pose),
                class_hint: rec.class_hint.clone(),
                crop_ref: rec.crop_ref.clone(),
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_min_frame(dir: &Path, id: FrameId) -> FrameEntry {
        let depth = PathBuf::from(format!("d{id}.depth"));
        DepthGrid::filled(4, 4, 1.0).write(&dir.join(&depth)).unwrap();
        FrameEntry {
            frame_id: id,
            depth,
            detections: None,
            pose: Pose::identity(),
            intrinsics: CameraIntrinsics {
                fx: 2.0,
                fy: 2.0,
                cx: 2.0,
                cy: 2.0,
                width: 4,
                height: 4,
            },
            color: None,
            odometry: None,
        }
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, r#"{"frames": [], "feature_dim": 8, "depth_unit": "m"}"#).unwrap();
        let m = load_manifest(&path).unwrap();
        assert!(m.frames.is_empty());
        assert_eq!(m.feature_dim, 8);
        assert_eq!(m.depth_unit, DepthUnit::Meters);
    }

    #[test]
    fn missing_depth_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(dir.path(), 4);
        let mut f = write_min_frame(dir.path(), 0);
        f.depth = PathBuf::from("absent.depth");
        m.frames.push(f);
        let path = dir.path().join("manifest.json");
        m.write(&path).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("absent.depth"), "{err}");
    }

    #[test]
    fn errors_are_aggregated() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(dir.path(), 4);
        m.frames.push(write_min_frame(dir.path(), 3));
        m.frames.push(write_min_frame(dir.path(), 3));
        let mut bad = write_min_frame(dir.path(), 5);
        bad.detections = Some("nope.jsonl".into());
        m.frames.push(bad);
        let path = dir.path().join("manifest.json");
        m.write(&path).unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::Multiple(errs) => {
                assert_eq!(errs.len(), 2);
                assert!(errs[0].to_string().contains("duplicate frame id"));
                assert!(errs[1].to_string().contains("nope.jsonl"));
            }
            other => panic!("expected aggregated errors, got {other}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, "{\n \"frames\": [,]\n}").unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: Some(2), .. }), "{err}");
    }

    #[test]
    fn detection_lines_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            "{\"frame_id\":1,\"mask_rle\":[1,2],\"feature\":[1.0,0.0]}\n\n{\"frame_id\":1,\"mask_rle\":[0,1],\"feature\":[1.0]}\n",
        )
        .unwrap();
        let err = read_detections(&path, 2, Some(1), 16).unwrap_err();
        assert!(matches!(err, Error::Parse { line: Some(3), .. }), "{err}");
        assert!(err.to_string().contains("d.jsonl:3"));

        std::fs::write(
            &path,
            "{\"frame_id\":1,\"mask_rle\":[1,2],\"feature\":[0.0,2.0],\"class_hint\":\"wall\",\"extra\":1}\n",
        )
        .unwrap();
        let recs = read_detections(&path, 2, Some(1), 16).unwrap();
        assert_eq!(recs[0].class_hint.as_deref(), Some("wall"));

        std::fs::write(&path, "{\"frame_id\":1,\"mask_rle\":[10,20],\"feature\":[0.0,2.0]}\n").unwrap();
        assert!(read_detections(&path, 2, Some(1), 16).is_err());
    }

    #[test]
    fn prepare_discards_small_and_renormalizes() {
        let entry = write_min_frame(tempfile::tempdir().unwrap().path(), 2);
        let frame = FrameRecord {
            frame_id: 2,
            depth: DepthGrid::filled(4, 4, 1.0),
            pose: entry.pose,
            intrinsics: entry.intrinsics,
            color_ref: None,
        };
        let recs = vec![
            DetectionRecord {
                frame_id: 2,
                mask_rle: Mask::from_pixels((0..16).collect()).to_rle(),
                feature: vec![0.0, 3.0],
                class_hint: None,
                crop_ref: Some("c".into()),
            },
            DetectionRecord {
                frame_id: 2,
                mask_rle: vec![0, 2],
                feature: vec![1.0, 0.0],
                class_hint: None,
                crop_ref: None,
            },
        ];
        let cfg = DenoiseConfig {
            eps: 1.0,
            min_pts: 1,
            min_points: 10,
        };
        let dets = prepare_detections(&frame, &recs, &cfg).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].0, 0);
        assert_eq!(dets[0].1.cloud.len(), 16);
        assert_eq!(dets[0].1.feature.as_slice(), &[0.0, 1.0]);
    }
}

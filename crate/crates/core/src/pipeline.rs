//! Frame-by-frame map building.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::association::{AssociationConfig, MapState};
use crate::error::Result;
use crate::geometry::{FrameId, ObjectId};
use crate::ingest::{prepare_detections, DatasetManifest, DenoiseConfig, DetectionRecord, FrameRecord};
use crate::scenegraph::bbox_iou;

/// Object pairs at least this overlapping and this similar count as likely duplicates.
pub const DUPLICATE_IOU: f64 = 0.25;
pub const DUPLICATE_COSINE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAssignments {
    pub frame_id: FrameId,
    /// Object per detection line; `None` for detections discarded during denoising.
    pub objects: Vec<Option<ObjectId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub frames: usize,
    pub detections: usize,
    pub detections_kept: usize,
    pub objects: usize,
    pub likely_duplicates: usize,
    pub elapsed_ms: u64,
    pub assignments: Vec<FrameAssignments>,
}

/// Pairs of foreground objects whose boxes overlap by at least [`DUPLICATE_IOU`] and whose
/// features agree to [`DUPLICATE_COSINE`].
pub fn likely_duplicates(map: &MapState) -> Result<usize> {
    let objs: Vec<_> = map.objects().filter(|o| !o.is_background).collect();
    let mut n = 0;
    for (i, a) in objs.iter().enumerate() {
        for b in &objs[i + 1..] {
            if bbox_iou(&a.bbox, &b.bbox) >= DUPLICATE_IOU && a.feature.cosine(&b.feature)? >= DUPLICATE_COSINE {
                n += 1;
            }
        }
    }
    Ok(n)
}

/// Incremental builder. Holds only the map and a per-detection assignment log, so memory
/// follows the object count rather than the frame count.
pub struct MapBuilder {
    map: MapState,
    association: AssociationConfig,
    denoise: DenoiseConfig,
    started: Instant,
    detections: usize,
    kept: usize,
    assignments: Vec<FrameAssignments>,
}

impl MapBuilder {
    pub fn new(association: AssociationConfig, denoise: DenoiseConfig, base_id: ObjectId) -> Result<Self> {
        association.validate()?;
        denoise.validate()?;
        Ok(MapBuilder {
            map: MapState::with_base_id(base_id),
            association,
            denoise,
            started: Instant::now(),
            detections: 0,
            kept: 0,
            assignments: Vec::new(),
        })
    }

    pub fn map(&self) -> &MapState {
        &self.map
    }

    pub fn add_frame(&mut self, frame: &FrameRecord, records: &[DetectionRecord]) -> Result<&FrameAssignments> {
        let prepared = prepare_detections(frame, records, &self.denoise)?;
        let (indices, detections): (Vec<usize>, Vec<_>) = prepared.into_iter().unzip();
        let ids = self.map.integrate(&detections, &self.association)?;
        let mut objects = vec![None; records.len()];
        for (i, id) in indices.iter().zip(ids) {
            objects[*i] = Some(id);
        }
        self.detections += records.len();
        self.kept += indices.len();
        self.assignments.push(FrameAssignments {
            frame_id: frame.frame_id,
            objects,
        });
        Ok(self.assignments.last().unwrap())
    }

    pub fn finish(self) -> Result<(MapState, BuildReport)> {
        let report = BuildReport {
            frames: self.assignments.len(),
            detections: self.detections,
            detections_kept: self.kept,
            objects: self.map.len(),
            likely_duplicates: likely_duplicates(&self.map)?,
            elapsed_ms: self.started.elapsed().as_millis() as u64,
            assignments: self.assignments,
        };
        Ok((self.map, report))
    }
}

/// Builds a map from every frame of a manifest, loading one frame at a time.
pub fn build_from_manifest(
    manifest: &DatasetManifest,
    association: &AssociationConfig,
    denoise: &DenoiseConfig,
    base_id: ObjectId,
) -> Result<(MapState, BuildReport)> {
    let mut builder = MapBuilder::new(association.clone(), *denoise, base_id)?;
    for i in 0..manifest.frames.len() {
        let frame = manifest.load_frame(i)?;
        let records = manifest.load_detections(i)?;
        builder.add_frame(&frame, &records)?;
    }
    builder.finish()
}

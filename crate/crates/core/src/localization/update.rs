use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LocalizationConfig, ObservationBatch};
use crate::association::{geometric_similarity, semantic_similarity, MapState};
use crate::error::Result;
use crate::geometry::{Aabb, FrameId, ObjectId, PointCloud, Pose};
use crate::ingest::Mask;
use crate::model::Detection;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "snake_case")]
pub enum MapChange {
    Removed { object_id: ObjectId, frame_id: FrameId },
    Added { object_id: ObjectId, frame_id: FrameId },
}

/// Which map objects the camera should currently see: box center inside the horizontal
/// field of view and within range. Occlusion is not modeled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisibilityModel {
    /// Full horizontal field of view, radians.
    pub hfov: f64,
    pub max_range: f64,
}

impl Default for VisibilityModel {
    fn default() -> Self {
        VisibilityModel {
            hfov: 2.0 * (80.0f64 / 120.0).atan(),
            max_range: 5.0,
        }
    }
}

pub fn expected_visible(camera_pose: &Pose, bbox: &Aabb, vis: &VisibilityModel) -> bool {
    let c = camera_pose.inverse().transform_point(&bbox.center());
    c.z > 0.0 && c.coords.norm() <= vis.max_range && c.x.atan2(c.z).abs() <= vis.hfov / 2.0
}

struct Candidate {
    detections: Vec<Detection>,
    cloud: PointCloud,
    bbox: Aabb,
    last_frame: FrameId,
}

/// Persistence bookkeeping for map maintenance. An object expected in view but unmatched
/// for `k` consecutive updates is removed; an unmatched detection seen in `k` consecutive
/// updates becomes a new object.
pub struct MapUpdater {
    k: u32,
    misses: BTreeMap<ObjectId, u32>,
    candidates: Vec<Candidate>,
}

impl MapUpdater {
    pub fn new(k: u32) -> Self {
        MapUpdater {
            k: k.max(1),
            misses: BTreeMap::new(),
            candidates: Vec::new(),
        }
    }

    pub fn pending_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn update(
        &mut self,
        map: &mut MapState,
        camera_pose: &Pose,
        obs: &ObservationBatch,
        cfg: &LocalizationConfig,
    ) -> Result<Vec<MapChange>> {
        let assoc = &cfg.association;
        let frame_id = obs.frame_id;
        let mut matched = Vec::new();
        let mut unmatched = Vec::new();
        for det in &obs.detections {
            let world = det.cloud.transformed(camera_pose);
            let bbox = world.bbox()?;
            match map.best_match(&world, &bbox, &det.feature, assoc.delta_nn)? {
                Some((id, phi)) if phi >= assoc.delta_sim => matched.push(id),
                _ => unmatched.push(Detection {
                    frame_id,
                    mask: Mask::default(),
                    feature: det.feature.clone(),
                    cloud: world,
                    class_hint: None,
                    crop_ref: det.crop_ref.clone(),
                }),
            }
        }

        let mut changes = Vec::new();
        let ids: Vec<(ObjectId, Aabb)> = map
            .objects()
            .filter(|o| !o.is_background)
            .map(|o| (o.object_id, o.bbox))
            .collect();
        for (id, bbox) in ids {
            if expected_visible(camera_pose, &bbox, &cfg.visibility) && !matched.contains(&id) {
                let misses = self.misses.entry(id).or_insert(0);
                *misses += 1;
                if *misses >= self.k {
                    map.remove_object(id)?;
                    self.misses.remove(&id);
                    changes.push(MapChange::Removed {
                        object_id: id,
                        frame_id,
                    });
                }
            } else {
                self.misses.remove(&id);
            }
        }

        for det in unmatched {
            let bbox = det.cloud.bbox()?;
            let mut best: Option<(usize, f64)> = None;
            for (i, c) in self.candidates.iter().enumerate() {
                if c.last_frame == frame_id || !c.bbox.intersects(&bbox) {
                    continue;
                }
                let latest = &c.detections.last().expect("candidate has detections").feature;
                let phi = semantic_similarity(&det.feature, latest)?
                    + geometric_similarity(&det.cloud, &c.cloud, assoc.delta_nn);
                if phi >= assoc.delta_sim && best.is_none_or(|(_, b)| phi > b) {
                    best = Some((i, phi));
                }
            }
            match best {
                Some((i, _)) => {
                    let c = &mut self.candidates[i];
                    c.cloud.extend_from(&det.cloud);
                    c.bbox = c.cloud.bbox()?;
                    c.last_frame = frame_id;
                    c.detections.push(det);
                }
                None => self.candidates.push(Candidate {
                    cloud: det.cloud.clone(),
                    bbox,
                    last_frame: frame_id,
                    detections: vec![det],
                }),
            }
        }
        self.candidates.retain(|c| c.last_frame == frame_id);

        let mut kept = Vec::new();
        for c in std::mem::take(&mut self.candidates) {
            if c.detections.len() as u32 >= self.k {
                let id = map.init_object(&c.detections[0], assoc)?;
                for det in &c.detections[1..] {
                    map.fuse(id, det, assoc)?;
                }
                changes.push(MapChange::Added {
                    object_id: id,
                    frame_id,
                });
            } else {
                kept.push(c);
            }
        }
        self.candidates = kept;
        Ok(changes)
    }
}

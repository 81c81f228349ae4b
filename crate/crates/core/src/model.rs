//! Map-level domain types: detections, fused objects and the relation-labeled scene graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{bbox_of, Aabb, FeatureVector, FrameId, ObjectId, PointCloud};
use crate::ingest::Mask;

/// One segmented region of one frame, already back-projected, denoised and in the map frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame_id: FrameId,
    pub mask: Mask,
    pub feature: FeatureVector,
    pub cloud: PointCloud,
    pub class_hint: Option<String>,
    pub crop_ref: Option<String>,
}

impl Detection {
    pub fn bbox(&self) -> Result<Aabb> {
        bbox_of(&self.cloud)
    }
}

/// A persistent map object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub object_id: ObjectId,
    pub cloud: PointCloud,
    /// Raw running mean of fused detection features (not renormalized).
    pub feature: FeatureVector,
    pub num_detections: u32,
    pub bbox: Aabb,
    /// Noise-free points each view contributed.
    pub view_contributions: BTreeMap<FrameId, u64>,
    /// Image crop per contributing view, used for captioning.
    pub view_crops: BTreeMap<FrameId, String>,
    pub caption: Option<String>,
    pub object_tag: Option<String>,
    pub is_background: bool,
    /// Class of a background node (detector mode only).
    pub background_class: Option<String>,
}

impl ObjectNode {
    pub fn from_detection(object_id: ObjectId, det: &Detection) -> Result<Self> {
        let bbox = det.bbox()?;
        let mut view_contributions = BTreeMap::new();
        view_contributions.insert(det.frame_id, det.cloud.len() as u64);
        let mut view_crops = BTreeMap::new();
        if let Some(crop) = &det.crop_ref {
            view_crops.insert(det.frame_id, crop.clone());
        }
        Ok(ObjectNode {
            object_id,
            cloud: det.cloud.clone(),
            feature: det.feature.clone(),
            num_detections: 1,
            bbox,
            view_contributions,
            view_crops,
            caption: None,
            object_tag: None,
            is_background: false,
            background_class: None,
        })
    }

    /// SHA-256 over geometry, provenance and crop references. Captions, tags and the id are
    /// not included.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (p, v) in self.cloud.iter() {
            for c in p.coords.iter() {
                h.update(c.to_le_bytes());
            }
            h.update(v.to_le_bytes());
        }
        for (frame, crop) in &self.view_crops {
            h.update(frame.to_le_bytes());
            h.update(crop.as_bytes());
            h.update([0]);
        }
        for (frame, n) in &self.view_contributions {
            h.update(frame.to_le_bytes());
            h.update(n.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn refresh_bbox(&mut self) -> Result<()> {
        self.bbox = bbox_of(&self.cloud)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEdge {
    pub source_id: ObjectId,
    pub target_id: ObjectId,
    pub relation: String,
    pub rationale: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub objects: Vec<ObjectNode>,
    pub edges: Vec<SceneEdge>,
    pub config_digest: String,
}

impl SceneGraph {
    pub fn object(&self, id: ObjectId) -> Option<&ObjectNode> {
        self.objects.iter().find(|o| o.object_id == id)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.edges {
            if e.source_id == e.target_id {
                return Err(Error::invalid("scene edge", format!("self loop on {}", e.source_id)));
            }
            for id in [e.source_id, e.target_id] {
                if self.object(id).is_none() {
                    return Err(Error::UnknownObject(id));
                }
            }
            if !(0.0..=1.0).contains(&e.iou) {
                return Err(Error::invalid("scene edge", format!("iou {} outside [0, 1]", e.iou)));
            }
        }
        Ok(())
    }
}

//! Incremental association of per-frame detections with map objects, and fusion of matches.
//!
//! Each detection is scored against every map object whose box overlaps its own with
//! `φ = φ_sem + φ_geo`, where `φ_geo` is the share of detection points with a map-object
//! neighbor within `delta_nn` and `φ_sem = (cos + 1) / 2`. The best-scoring object wins when
//! `φ ≥ delta_sim`; otherwise the detection starts a new object. Assignment is greedy in
//! detection order against the map as it stood before the frame.

mod voxel;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use voxel::{voxel_cell, voxel_downsample};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, FeatureVector, ObjectId, PointCloud};
use crate::model::{Detection, ObjectNode};
use crate::spatial::{BoxIndex, KdTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    /// Nearest-neighbor radius for geometric similarity, meters.
    pub delta_nn: f64,
    /// Minimum combined similarity for a match, in [0, 2].
    pub delta_sim: f64,
    /// Voxel edge for cloud downsampling, meters.
    pub voxel_size: f64,
    /// Detections hinted with one of these classes merge into that class's background node
    /// regardless of similarity. Empty outside detector mode.
    pub background_classes: BTreeSet<String>,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        AssociationConfig {
            delta_nn: 0.025,
            delta_sim: 1.1,
            voxel_size: 0.025,
            background_classes: BTreeSet::new(),
        }
    }
}

impl AssociationConfig {
    pub fn detector_defaults() -> Self {
        AssociationConfig {
            background_classes: ["wall", "floor", "ceiling"].map(String::from).into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_nn > 0.0) {
            return Err(Error::Config("delta_nn must be positive".into()));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        if !(0.0..=2.0).contains(&self.delta_sim) {
            return Err(Error::Config("delta_sim must lie in [0, 2]".into()));
        }
        Ok(())
    }
}

/// Share of `det_cloud` points with a neighbor in the tree within `delta_nn`.
pub fn nn_ratio(det_cloud: &PointCloud, tree: &KdTree, delta_nn: f64) -> f64 {
    if det_cloud.is_empty() || tree.is_empty() {
        return 0.0;
    }
    let hits = det_cloud
        .points()
        .iter()
        .filter(|p| tree.any_within(p, delta_nn))
        .count();
    hits as f64 / det_cloud.len() as f64
}

pub fn geometric_similarity(det_cloud: &PointCloud, obj_cloud: &PointCloud, delta_nn: f64) -> f64 {
    nn_ratio(det_cloud, &KdTree::build(obj_cloud.points()), delta_nn)
}

/// `(cos(f_det, f_obj) + 1) / 2`, renormalizing both sides first.
pub fn semantic_similarity(f_det: &FeatureVector, f_obj: &FeatureVector) -> Result<f64> {
    Ok((f_det.cosine(f_obj)? + 1.0) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assignment {
    Matched(ObjectId),
    New,
}

#[derive(Debug)]
struct Entry {
    node: ObjectNode,
    tree: OnceLock<KdTree>,
}

impl Entry {
    fn new(node: ObjectNode) -> Self {
        Entry {
            node,
            tree: OnceLock::new(),
        }
    }

    fn tree(&self) -> &KdTree {
        self.tree.get_or_init(|| KdTree::build(self.node.cloud.points()))
    }
}

const BOX_INDEX_CELL: f64 = 1.0;

/// The live object set plus its box index. Mutated only through `init_object`, `fuse` and
/// `remove_object`, which keep the index in step with object boxes.
#[derive(Debug)]
pub struct MapState {
    objects: BTreeMap<ObjectId, Entry>,
    index: BoxIndex,
    next_id: ObjectId,
    background: BTreeMap<String, ObjectId>,
}

impl Default for MapState {
    fn default() -> Self {
        Self::new()
    }
}

impl MapState {
    pub fn new() -> Self {
        Self::with_base_id(0)
    }

    pub fn with_base_id(base: ObjectId) -> Self {
        MapState {
            objects: BTreeMap::new(),
            index: BoxIndex::new(BOX_INDEX_CELL),
            next_id: base,
            background: BTreeMap::new(),
        }
    }

    /// Rebuilds a map from stored nodes; `next_id` must exceed every stored id.
    pub fn from_objects(nodes: Vec<ObjectNode>, next_id: ObjectId) -> Result<Self> {
        let mut map = MapState::with_base_id(next_id);
        for node in nodes {
            if node.object_id >= next_id {
                return Err(Error::invalid(
                    "map",
                    format!("object id {} >= next id {next_id}", node.object_id),
                ));
            }
            if let (true, Some(class)) = (node.is_background, &node.background_class) {
                map.background.insert(class.clone(), node.object_id);
            }
            map.index.insert(node.object_id, node.bbox);
            map.objects.insert(node.object_id, Entry::new(node));
        }
        Ok(map)
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn next_id(&self) -> ObjectId {
        self.next_id
    }

    pub fn object(&self, id: ObjectId) -> Option<&ObjectNode> {
        self.objects.get(&id).map(|e| &e.node)
    }

    /// Objects in ascending id order.
    pub fn objects(&self) -> impl Iterator<Item = &ObjectNode> {
        self.objects.values().map(|e| &e.node)
    }

    pub fn into_objects(self) -> Vec<ObjectNode> {
        self.objects.into_values().map(|e| e.node).collect()
    }

    pub fn object_mut_meta(&mut self, id: ObjectId) -> Option<&mut ObjectNode> {
        // Geometry edits must go through `fuse`; captions and tags are safe to change here.
        self.objects.get_mut(&id).map(|e| &mut e.node)
    }

    pub fn background_object(&self, class: &str) -> Option<ObjectId> {
        self.background.get(class).copied()
    }

    /// Ids of non-background objects whose box overlaps `bbox`, ascending.
    pub fn overlapping(&self, bbox: &Aabb) -> Vec<ObjectId> {
        self.index
            .overlapping(bbox)
            .into_iter()
            .filter(|id| !self.objects[id].node.is_background)
            .collect()
    }

    /// `φ_geo` of a cloud against a stored object, using the object's cached kd-tree.
    pub fn geometric_similarity(&self, id: ObjectId, cloud: &PointCloud, delta_nn: f64) -> Result<f64> {
        let entry = self.objects.get(&id).ok_or(Error::UnknownObject(id))?;
        Ok(nn_ratio(cloud, entry.tree(), delta_nn))
    }

    /// Best `(object id, φ)` among box-overlapping objects; ties go to the lowest id.
    pub fn best_match(
        &self,
        cloud: &PointCloud,
        bbox: &Aabb,
        feature: &FeatureVector,
        delta_nn: f64,
    ) -> Result<Option<(ObjectId, f64)>> {
        let mut best: Option<(ObjectId, f64)> = None;
        for id in self.overlapping(bbox) {
            let entry = &self.objects[&id];
            let phi = semantic_similarity(feature, &entry.node.feature)? + nn_ratio(cloud, entry.tree(), delta_nn);
            if best.is_none_or(|(_, b)| phi > b) {
                best = Some((id, phi));
            }
        }
        Ok(best)
    }

    fn assign_one(&self, det: &Detection, cfg: &AssociationConfig) -> Result<Assignment> {
        if let Some(class) = det
            .class_hint
            .as_deref()
            .filter(|c| cfg.background_classes.contains(*c))
        {
            return Ok(self
                .background_object(class)
                .map_or(Assignment::New, Assignment::Matched));
        }
        let bbox = det.bbox()?;
        Ok(match self.best_match(&det.cloud, &bbox, &det.feature, cfg.delta_nn)? {
            Some((id, phi)) if phi >= cfg.delta_sim => Assignment::Matched(id),
            _ => Assignment::New,
        })
    }

    /// Decides a target for every detection of one frame against the current (frozen) map.
    /// The result is index-aligned with `detections`.
    pub fn associate(&self, detections: &[Detection], cfg: &AssociationConfig) -> Result<Vec<Assignment>> {
        detections.par_iter().map(|d| self.assign_one(d, cfg)).collect()
    }

    pub fn init_object(&mut self, det: &Detection, cfg: &AssociationConfig) -> Result<ObjectId> {
        let id = self.next_id;
        let mut node = ObjectNode::from_detection(id, det)?;
        node.cloud = voxel_downsample(&node.cloud, cfg.voxel_size)?;
        node.refresh_bbox()?;
        if let Some(class) = det.class_hint.as_ref().filter(|c| cfg.background_classes.contains(*c)) {
            node.is_background = true;
            node.background_class = Some(class.clone());
            self.background.entry(class.clone()).or_insert(id);
        }
        self.next_id = self
            .next_id
            .checked_add(1)
            .ok_or_else(|| Error::invalid("map", "object id counter overflow"))?;
        self.index.insert(id, node.bbox);
        self.objects.insert(id, Entry::new(node));
        Ok(id)
    }

    /// Merges `det` into object `id`: running-mean feature, cloud union then voxel downsample.
    pub fn fuse(&mut self, id: ObjectId, det: &Detection, cfg: &AssociationConfig) -> Result<()> {
        let entry = self.objects.get_mut(&id).ok_or(Error::UnknownObject(id))?;
        let node = &mut entry.node;
        let feature = node.feature.running_mean(node.num_detections, &det.feature)?;
        let mut union = node.cloud.clone();
        union.extend_from(&det.cloud);
        let cloud = voxel_downsample(&union, cfg.voxel_size)?;

        node.feature = feature;
        node.num_detections += 1;
        node.cloud = cloud;
        node.refresh_bbox()?;
        *node.view_contributions.entry(det.frame_id).or_insert(0) += det.cloud.len() as u64;
        if let Some(crop) = &det.crop_ref {
            node.view_crops.entry(det.frame_id).or_insert_with(|| crop.clone());
        }
        entry.tree = OnceLock::new();
        let bbox = node.bbox;
        self.index.insert(id, bbox);
        Ok(())
    }

    /// Applies one frame: associate, then fuse or initialize in detection order. Returns the
    /// object each detection ended up in.
    pub fn integrate(&mut self, detections: &[Detection], cfg: &AssociationConfig) -> Result<Vec<ObjectId>> {
        let decisions = self.associate(detections, cfg)?;
        let mut out = Vec::with_capacity(detections.len());
        for (det, decision) in detections.iter().zip(decisions) {
            let id = match decision {
                Assignment::Matched(id) => {
                    self.fuse(id, det, cfg)?;
                    id
                }
                // A background class seen twice in one frame still gets a single node.
                Assignment::New => match det
                    .class_hint
                    .as_deref()
                    .filter(|c| cfg.background_classes.contains(*c))
                    .and_then(|c| self.background_object(c))
                {
                    Some(bg) => {
                        self.fuse(bg, det, cfg)?;
                        bg
                    }
                    None => self.init_object(det, cfg)?,
                },
            };
            out.push(id);
        }
        Ok(out)
    }

    pub fn remove_object(&mut self, id: ObjectId) -> Result<ObjectNode> {
        let entry = self.objects.remove(&id).ok_or(Error::UnknownObject(id))?;
        self.index.remove(id);
        if let Some(class) = &entry.node.background_class {
            if self.background.get(class) == Some(&id) {
                self.background.remove(class);
            }
        }
        Ok(entry.node)
    }

    /// Index/box consistency check, used by tests and debug assertions.
    pub fn check_index(&self) -> bool {
        self.index.len() == self.objects.len()
            && self
                .objects
                .iter()
                .all(|(id, e)| self.index.get(*id) == Some(&e.node.bbox))
    }
}

#[cfg(test)]
mod tests;

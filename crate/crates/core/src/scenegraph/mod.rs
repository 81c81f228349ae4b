//! Scene-graph construction: node captioning, overlap-tree pruning, relation labeling and
//! the planner-facing JSON export.

mod cache;
mod caption;
mod tree;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use cache::{GraphCache, CACHE_ENV};
pub use caption::{best_views, caption_object, CaptionBundle, DEFAULT_VIEWS, INVALID_TAG};
pub use tree::{bbox_iou, overlap_edges, prune_to_tree, CandidateEdge};

use crate::clients::{describe_relation, LmClient, RelationLabel, RelationObject, TemplateId};
use crate::geometry::{Aabb, ObjectId};
use crate::model::{ObjectNode, SceneEdge, SceneGraph};

pub const UNKNOWN_RELATION: &str = "unknown";

/// The three model roles used while building a graph. They may all be the same client.
#[derive(Clone, Copy)]
pub struct GraphClients<'a> {
    pub captioner: &'a dyn LmClient,
    pub summarizer: &'a dyn LmClient,
    pub relations: &'a dyn LmClient,
}

impl<'a> GraphClients<'a> {
    pub fn single(client: &'a dyn LmClient) -> Self {
        GraphClients {
            captioner: client,
            summarizer: client,
            relations: client,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphOptions {
    pub views_per_object: usize,
    pub cache: Option<GraphCache>,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            views_per_object: DEFAULT_VIEWS,
            cache: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphBuild {
    pub graph: SceneGraph,
    pub bundles: Vec<CaptionBundle>,
}

fn cached_caption(obj: &ObjectNode, clients: &GraphClients, opts: &GraphOptions) -> CaptionBundle {
    let key = opts.cache.as_ref().map(|_| {
        GraphCache::key(
            "caption",
            &[TemplateId::CaptionView, TemplateId::SummarizeCaptions],
            &[
                &obj.content_hash(),
                &opts.views_per_object.to_string(),
                &clients.captioner.fingerprint(),
                &clients.summarizer.fingerprint(),
            ],
        )
    });
    if let (Some(cache), Some(key)) = (&opts.cache, &key) {
        if let Some(mut hit) = cache.get::<CaptionBundle>(key) {
            hit.object_id = obj.object_id;
            return hit;
        }
    }
    let bundle = caption_object(obj, opts.views_per_object, clients.captioner, clients.summarizer);
    if let (Some(cache), Some(key), None) = (&opts.cache, &key, &bundle.error) {
        // a failed write only costs a future cache miss
        let _ = cache.put(key, &bundle);
    }
    bundle
}

/// Labels each candidate edge with the relation client. `objects` must already carry
/// captions. Client failures yield relation `unknown` with the error as rationale.
pub fn label_edges(
    edges: &[CandidateEdge],
    objects: &BTreeMap<ObjectId, &ObjectNode>,
    client: &dyn LmClient,
    cache: Option<&GraphCache>,
) -> Vec<SceneEdge> {
    edges
        .iter()
        .map(|e| {
            let (a, b) = (objects[&e.source_id], objects[&e.target_id]);
            let ra = RelationObject::new(a.object_id, a.caption.clone().unwrap_or_default(), &a.bbox);
            let rb = RelationObject::new(b.object_id, b.caption.clone().unwrap_or_default(), &b.bbox);
            let key = cache.map(|_| {
                let parts = [
                    a.content_hash(),
                    b.content_hash(),
                    serde_json::to_string(&(&ra, &rb)).expect("serializable"),
                    client.fingerprint(),
                ];
                GraphCache::key(
                    "edge",
                    &[TemplateId::EdgeRelation],
                    &parts.each_ref().map(String::as_str),
                )
            });
            let cached = cache.zip(key.as_ref()).and_then(|(c, k)| c.get::<RelationLabel>(k));
            let label = match cached {
                Some(hit) => Ok(hit),
                None => describe_relation(client, &ra, &rb).inspect(|label| {
                    if let (Some(c), Some(k)) = (cache, &key) {
                        let _ = c.put(k, label);
                    }
                }),
            };
            let (relation, rationale) = match label {
                Ok(l) => (l.object_relation, l.reason),
                Err(err) => (UNKNOWN_RELATION.to_string(), err.to_string()),
            };
            SceneEdge {
                source_id: e.source_id,
                target_id: e.target_id,
                relation,
                rationale,
                iou: e.iou,
            }
        })
        .collect()
}

/// Builds the relation-labeled graph from a final object set.
///
/// Foreground objects are captioned from their best views. Background objects (detector
/// mode) are tagged with their class, skip captioning and take no part in edges. Requests
/// are issued sequentially in id order so that journaled transcripts are reproducible.
pub fn build_scene_graph(
    objects: &[ObjectNode],
    clients: &GraphClients,
    opts: &GraphOptions,
    config_digest: &str,
) -> GraphBuild {
    let mut nodes: Vec<ObjectNode> = objects.to_vec();
    nodes.sort_by_key(|o| o.object_id);
    let mut bundles = Vec::new();
    for node in nodes.iter_mut() {
        if node.is_background {
            let class = node.background_class.clone().unwrap_or_else(|| "background".into());
            node.caption = Some(class.clone());
            node.object_tag = Some(class);
            continue;
        }
        let bundle = cached_caption(node, clients, opts);
        node.caption = Some(bundle.final_caption.clone());
        node.object_tag = Some(bundle.object_tag.clone());
        bundles.push(bundle);
    }
    let boxes: Vec<(ObjectId, Aabb)> = nodes
        .iter()
        .filter(|o| !o.is_background)
        .map(|o| (o.object_id, o.bbox))
        .collect();
    let candidates = prune_to_tree(&boxes);
    let by_id: BTreeMap<ObjectId, &ObjectNode> = nodes.iter().map(|o| (o.object_id, o)).collect();
    let edges = label_edges(&candidates, &by_id, clients.relations, opts.cache.as_ref());
    GraphBuild {
        graph: SceneGraph {
            objects: nodes,
            edges,
            config_digest: config_digest.to_string(),
        },
        bundles,
    }
}

/// One node as the planner sees it. Field order is part of the format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerNode {
    pub id: ObjectId,
    pub bbox_extent: [f64; 3],
    pub bbox_center: [f64; 3],
    pub object_tag: String,
    pub caption: String,
}

impl PlannerNode {
    pub fn from_object(obj: &ObjectNode) -> Self {
        PlannerNode {
            id: obj.object_id,
            bbox_extent: obj.bbox.extent().into(),
            bbox_center: obj.bbox.center().coords.into(),
            object_tag: obj.object_tag.clone().unwrap_or_default(),
            caption: obj.caption.clone().unwrap_or_default(),
        }
    }
}

/// The `graph.json` document: planner-visible nodes, edges, and nodes withheld from the
/// planner because their tag is `invalid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub config_digest: String,
    pub objects: Vec<PlannerNode>,
    pub edges: Vec<SceneEdge>,
    pub suppressed: Vec<PlannerNode>,
}

impl GraphDocument {
    pub fn from_graph(graph: &SceneGraph) -> Self {
        let (suppressed, objects): (Vec<PlannerNode>, Vec<PlannerNode>) = graph
            .objects
            .iter()
            .map(PlannerNode::from_object)
            .partition(|n| n.object_tag == INVALID_TAG);
        GraphDocument {
            config_digest: graph.config_digest.clone(),
            objects,
            edges: graph.edges.clone(),
            suppressed,
        }
    }

    /// Compact JSON list of the planner-visible nodes, as substituted into planner prompts.
    pub fn scene_json(&self) -> String {
        serde_json::to_string(&self.objects).expect("serializable")
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }
}

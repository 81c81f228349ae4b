//! Deterministic rule-based stand-ins for every template. Outputs are pure functions of the
//! request and the mock's seed, so offline runs are reproducible byte for byte.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{ClientError, ClientRequest, ClientResponse, LmClient, RelationObject, TemplateId};
use crate::geometry::ObjectId;

/// Crop references understood by the mock captioner look like `mock:<label>` with an optional
/// `#<anything>` suffix.
pub const MOCK_CROP_PREFIX: &str = "mock:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub seed: u64,
    /// Probability that a view caption names the wrong label.
    pub flip_probability: f64,
    /// Labels a flipped caption draws from.
    pub vocabulary: Vec<String>,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            seed: 0,
            flip_probability: 0.0,
            vocabulary: ["toothbrush", "pair of scissors", "box", "bottle", "bag"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockClient {
    config: MockConfig,
}

impl MockClient {
    pub fn new(config: MockConfig) -> Self {
        MockClient { config }
    }

    pub fn with_seed(seed: u64) -> Self {
        MockClient::new(MockConfig {
            seed,
            ..MockConfig::default()
        })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn rng_for(&self, key: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.config.seed.to_le_bytes());
        hasher.update(key.as_bytes());
        let digest = hasher.finalize();
        ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
    }

    fn caption(&self, request: &ClientRequest) -> Result<String, ClientError> {
        let crop = request.str_slot("crop_ref")?;
        let label = crop_label(crop).ok_or_else(|| ClientError::BadRequest(format!("unreadable crop `{crop}`")))?;
        let mut label = label.to_string();
        if self.config.flip_probability > 0.0 {
            let mut rng = self.rng_for(crop);
            if rng.random::<f64>() < self.config.flip_probability {
                let choices: Vec<&String> = self.config.vocabulary.iter().filter(|v| **v != label).collect();
                if !choices.is_empty() {
                    label = choices[rng.random_range(0..choices.len())].clone();
                }
            }
        }
        Ok(with_article(&label))
    }
}

impl LmClient for MockClient {
    fn fingerprint(&self) -> String {
        format!("mock:seed={}:flip={}", self.config.seed, self.config.flip_probability)
    }

    fn max_in_flight(&self) -> usize {
        usize::MAX
    }

    fn send(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        let text = match request.template_id {
            TemplateId::CaptionView => self.caption(request)?,
            TemplateId::SummarizeCaptions => summarize(request)?.to_string(),
            TemplateId::EdgeRelation => relation(request)?.to_string(),
            TemplateId::PlanQuery => {
                let scene = scene_slot(request)?;
                plan(&scene, request.str_slot("query")?).to_string()
            }
            TemplateId::LocateMissingObject => {
                let scene = scene_slot(request)?;
                locate(&scene, request.str_slot("description")?).to_string()
            }
            TemplateId::Traversability => traverse(request)?.to_string(),
        };
        Ok(ClientResponse::from_text(request, text))
    }
}

pub fn crop_label(crop: &str) -> Option<&str> {
    let rest = crop.strip_prefix(MOCK_CROP_PREFIX)?;
    let label = rest.split('#').next().unwrap_or("").trim();
    (!label.is_empty()).then_some(label)
}

fn with_article(label: &str) -> String {
    let article = match label.chars().next() {
        Some(c) if "aeiou".contains(c.to_ascii_lowercase()) => "an",
        _ => "a",
    };
    format!("{article} {label}")
}

/// Lowercases, replaces punctuation with spaces and collapses whitespace.
pub fn normalize(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn strip_article(text: &str) -> &str {
    for a in ["a ", "an ", "the "] {
        if let Some(rest) = text.strip_prefix(a) {
            return rest;
        }
    }
    text
}

/// Whole-word containment on normalized text.
fn contains_phrase(haystack: &str, needle: &str) -> bool {
    !needle.is_empty() && format!(" {haystack} ").contains(&format!(" {needle} "))
}

fn caption_to_label(caption: &str) -> String {
    strip_article(&normalize(caption)).to_string()
}

/// Strict plurality vote over caption labels; no unique winner means `invalid`.
fn summarize(request: &ClientRequest) -> Result<Value, ClientError> {
    let captions: Vec<String> = request
        .slots
        .get("captions")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| ClientError::BadRequest("summarize_captions needs a `captions` list".into()))?;
    if captions.is_empty() {
        return Err(ClientError::BadRequest("no captions".into()));
    }
    // (label, count) in order of first appearance
    let mut counts: Vec<(String, usize)> = Vec::new();
    for c in &captions {
        let label = caption_to_label(c);
        match counts.iter_mut().find(|(l, _)| *l == label) {
            Some(entry) => entry.1 += 1,
            None => counts.push((label, 1)),
        }
    }
    let top = counts.iter().map(|(_, n)| *n).max().unwrap_or(0);
    let winners: Vec<&String> = counts.iter().filter(|(_, n)| *n == top).map(|(l, _)| l).collect();
    let mut ranked = counts.clone();
    ranked.sort_by_key(|e| std::cmp::Reverse(e.1));
    let possible: Vec<&String> = ranked.iter().map(|(l, _)| l).collect();
    Ok(if winners.len() == 1 && !winners[0].is_empty() {
        json!({
            "summary": with_article(winners[0]),
            "possible_tags": possible,
            "object_tag": winners[0],
        })
    } else {
        json!({
            "summary": format!("conflicting captions about {}", possible.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")),
            "possible_tags": possible,
            "object_tag": "invalid",
        })
    })
}

const ADJACENCY_TOL: f64 = 0.05;
const CONTAINMENT_RATIO: f64 = 0.9;

fn bounds(o: &RelationObject) -> ([f64; 3], [f64; 3]) {
    let lo = std::array::from_fn(|i| o.bbox_center[i] - o.bbox_extent[i] / 2.0);
    let hi = std::array::from_fn(|i| o.bbox_center[i] + o.bbox_extent[i] / 2.0);
    (lo, hi)
}

fn overlap_1d(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// `top` rests on `bottom`: bottom face within tolerance of the other's top face, with
/// positive footprint overlap.
fn rests_on(top: &RelationObject, bottom: &RelationObject) -> bool {
    let (tl, th) = bounds(top);
    let (bl, bh) = bounds(bottom);
    (tl[2] - bh[2]).abs() <= ADJACENCY_TOL
        && overlap_1d((tl[0], th[0]), (bl[0], bh[0])) > 0.0
        && overlap_1d((tl[1], th[1]), (bl[1], bh[1])) > 0.0
}

/// Share of `inner`'s volume inside `outer`.
fn contained_fraction(inner: &RelationObject, outer: &RelationObject) -> f64 {
    let (il, ih) = bounds(inner);
    let (ol, oh) = bounds(outer);
    let vol: f64 = (0..3).map(|i| ih[i] - il[i]).product();
    if vol <= 0.0 {
        return if (0..3).all(|i| il[i] >= ol[i] && ih[i] <= oh[i]) {
            1.0
        } else {
            0.0
        };
    }
    let inter: f64 = (0..3).map(|i| overlap_1d((il[i], ih[i]), (ol[i], oh[i]))).product();
    inter / vol
}

pub(crate) fn mock_relation(a: &RelationObject, b: &RelationObject) -> (&'static str, &'static str) {
    if rests_on(a, b) {
        (
            "a on b",
            "the bottom of a meets the top of b and their footprints overlap",
        )
    } else if rests_on(b, a) {
        (
            "b on a",
            "the bottom of b meets the top of a and their footprints overlap",
        )
    } else if contained_fraction(a, b) >= CONTAINMENT_RATIO {
        ("a in b", "a lies within the bounding box of b")
    } else if contained_fraction(b, a) >= CONTAINMENT_RATIO {
        ("b in a", "b lies within the bounding box of a")
    } else {
        ("a next to b", "the boxes overlap without support or containment")
    }
}

fn relation(request: &ClientRequest) -> Result<Value, ClientError> {
    let obj = |name: &str| -> Result<RelationObject, ClientError> {
        request
            .slots
            .get(name)
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| ClientError::BadRequest(format!("edge_relation needs object slot `{name}`")))
    };
    let (rel, why) = mock_relation(&obj("object_a")?, &obj("object_b")?);
    Ok(json!({ "object_relation": rel, "reason": why }))
}

#[derive(Debug, Clone, Deserialize)]
struct SceneNode {
    id: ObjectId,
    #[serde(default)]
    object_tag: String,
}

fn scene_slot(request: &ClientRequest) -> Result<Vec<SceneNode>, ClientError> {
    let text = request.str_slot("scene")?;
    serde_json::from_str(text).map_err(|e| ClientError::BadRequest(format!("scene is not a node list: {e}")))
}

/// Keyword → object tags, in preference order. Drives affordance-style queries.
pub const AFFORDANCES: &[(&[&str], &[&str])] = &[
    (&["sit", "seat"], &["chair", "sofa", "stool", "bench"]),
    (&["watch", "news", "movie"], &["tv", "monitor", "laptop"]),
    (&["time"], &["clock"]),
    (
        &["illuminate", "lighting", "bright", "dark"],
        &["lamp", "light fixture"],
    ),
    (&["dispose", "trash", "garbage", "waste", "wastepaper"], &["trash can"]),
    (&["drink", "coffee", "tea"], &["mug", "cup", "bottle"]),
    (&["read", "study", "learn"], &["book"]),
    (&["carry", "pack", "hike"], &["backpack", "bag"]),
    (&["eat", "dinner", "food", "work", "write"], &["table", "desk"]),
    (&["sleep", "nap", "lie"], &["sofa", "bed"]),
    (&["grow", "nature"], &["plant"]),
    (&["store", "storage"], &["cabinet", "shelf", "backpack"]),
];

/// Phrases that split a query into wanted / unwanted halves.
pub const NEGATIONS: &[&str] = &["other than", "unlike", "that s not", "that is not", "except", "not"];

/// Where things usually go when put away.
pub const CONTAINERS: &[(&[&str], &[&str])] = &[
    (
        &["shirt", "t shirt", "jacket", "sock", "socks", "sweater"],
        &["laundry bag", "closet", "wardrobe"],
    ),
    (&["shoes", "sneakers", "boots"], &["shoe rack", "closet"]),
    (&["wineglass", "glass", "mug", "cup", "plate"], &["cabinet", "cupboard"]),
    (&["broom", "mop"], &["closet"]),
    (&["book", "notebook"], &["bookshelf", "shelf"]),
    (&["toy", "toy car", "ball"], &["toy box", "box"]),
];

fn split_negation(query: &str) -> (String, String) {
    let padded = format!(" {query} ");
    for marker in NEGATIONS {
        if let Some(pos) = padded.find(&format!(" {marker} ")) {
            let wanted = padded[..pos].trim().to_string();
            let unwanted = padded[pos + marker.len() + 2..].trim().to_string();
            return (wanted, unwanted);
        }
    }
    (query.to_string(), String::new())
}

/// Tags from `candidates` that `text` mentions, minus those only present as part of a
/// longer mentioned tag.
fn mentioned<'a>(text: &str, candidates: impl IntoIterator<Item = &'a str>) -> BTreeSet<&'a str> {
    let hits: BTreeSet<&str> = candidates.into_iter().filter(|t| contains_phrase(text, t)).collect();
    hits.iter()
        .copied()
        .filter(|t| !hits.iter().any(|o| o != t && contains_phrase(o, t)))
        .collect()
}

/// Rule-based planner:
/// 1. The query is normalized and split at the first negation phrase.
/// 2. Tags mentioned in the unwanted half are excluded.
/// 3. If the wanted half mentions scene tags, those objects are returned: a tag equal to the
///    whole wanted half (articles stripped) first, then by first mention, then lower ids.
/// 4. Otherwise affordance keywords in the wanted half select tags in table order.
pub(crate) fn mock_plan(scene: &[(ObjectId, String)], query: &str) -> (Vec<ObjectId>, String) {
    let q = normalize(query);
    let (wanted, unwanted) = split_negation(&q);
    let wanted_core = strip_article(&wanted).to_string();
    let all_tags = scene
        .iter()
        .map(|(_, t)| t.as_str())
        .chain(AFFORDANCES.iter().flat_map(|(_, tags)| tags.iter().copied()));
    let excluded = mentioned(&unwanted, all_tags);
    let wanted_tags = mentioned(&wanted, scene.iter().map(|(_, t)| t.as_str()));

    let padded = format!(" {wanted} ");
    let mut descriptive: Vec<(bool, usize, ObjectId)> = scene
        .iter()
        .filter(|(_, tag)| wanted_tags.contains(tag.as_str()) && !excluded.contains(tag.as_str()))
        .map(|(id, tag)| {
            let pos = padded.find(&format!(" {tag} ")).unwrap_or(usize::MAX);
            (*tag != wanted_core, pos, *id)
        })
        .collect();
    if !descriptive.is_empty() {
        descriptive.sort();
        return (
            descriptive.into_iter().map(|(_, _, id)| id).collect(),
            "descriptive match".into(),
        );
    }

    let mut ranked: Vec<ObjectId> = Vec::new();
    let mut reasons = Vec::new();
    for (keywords, tags) in AFFORDANCES {
        if !keywords.iter().any(|k| contains_phrase(&wanted, k)) {
            continue;
        }
        for tag in *tags {
            if excluded.contains(tag) {
                continue;
            }
            let mut ids: Vec<ObjectId> = scene.iter().filter(|(_, t)| t == tag).map(|(id, _)| *id).collect();
            ids.sort_unstable();
            for id in ids {
                if !ranked.contains(&id) {
                    ranked.push(id);
                    reasons.push(format!("{tag} ({id})"));
                }
            }
        }
    }
    let why = if ranked.is_empty() {
        "no object in the scene fits the request".to_string()
    } else {
        format!("objects that afford the request: {}", reasons.join(", "))
    };
    (ranked, why)
}

fn tagged(scene: &[SceneNode]) -> Vec<(ObjectId, String)> {
    scene.iter().map(|n| (n.id, normalize(&n.object_tag))).collect()
}

fn plan(scene: &[SceneNode], query: &str) -> Value {
    let (ranked, why) = mock_plan(&tagged(scene), query);
    let mut relevant = ranked.clone();
    relevant.sort_unstable();
    json!({
        "inferred_query": normalize(query),
        "relevant_objects": relevant,
        "query_achievable": !ranked.is_empty(),
        "final_relevant_objects": ranked,
        "explanation": why,
    })
}

pub(crate) fn mock_locate(scene: &[(ObjectId, String)], description: &str) -> Option<ObjectId> {
    let d = normalize(description);
    let containers: Vec<&str> = CONTAINERS
        .iter()
        .filter(|(items, _)| items.iter().any(|i| contains_phrase(&d, i)))
        .flat_map(|(_, c)| c.iter().copied())
        .collect();
    scene
        .iter()
        .filter(|(_, tag)| containers.contains(&tag.as_str()))
        .map(|(id, _)| *id)
        .min()
}

fn locate(scene: &[SceneNode], description: &str) -> Value {
    let found = mock_locate(&tagged(scene), description);
    json!({
        "inferred_query": format!("find a container for {}", normalize(description)),
        "relevant_objects": found.into_iter().collect::<Vec<_>>(),
        "query_achievable": found.is_some(),
        "final_relevant_objects": found.into_iter().collect::<Vec<_>>(),
        "explanation": match found {
            Some(id) => format!("object {id} is a typical place to put it away"),
            None => "no likely container in the scene".to_string(),
        },
    })
}

/// Light objects the robot may push through.
pub const TRAVERSABLE: &[&str] = &[
    "curtain",
    "basketball",
    "ball",
    "cushion",
    "pillow",
    "plush toy",
    "cardboard box",
    "paper",
    "towel",
    "blanket",
    "balloon",
];

/// Heavy or fragile objects to avoid.
pub const NON_TRAVERSABLE: &[&str] = &[
    "brick",
    "bricks",
    "iron dumbbell",
    "dumbbell",
    "flower pot",
    "chair",
    "table",
    "sofa",
];

pub(crate) fn mock_traversable(description: &str, tags: &[String]) -> (bool, String) {
    let mut texts = vec![normalize(description)];
    texts.extend(tags.iter().map(|t| normalize(t)));
    let hit = |list: &[&str]| {
        texts
            .iter()
            .find_map(|t| list.iter().find(|w| contains_phrase(t, w)).map(|w| w.to_string()))
    };
    if let Some(w) = hit(NON_TRAVERSABLE) {
        (false, format!("a {w} is too heavy or fragile to push"))
    } else if let Some(w) = hit(TRAVERSABLE) {
        (true, format!("a {w} is light enough to push or pass through"))
    } else {
        (false, "unknown object; avoiding it".to_string())
    }
}

fn traverse(request: &ClientRequest) -> Result<Value, ClientError> {
    let description = request.str_slot("description")?;
    let tags: Vec<String> = request
        .slots
        .get("possible_tags")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    let (ok, why) = mock_traversable(description, &tags);
    Ok(json!({ "traversable": ok, "rationale": why }))
}

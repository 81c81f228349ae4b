//! Language and vision-language model clients.
//!
//! Every call is a [`ClientRequest`]: a template id plus named slots. A [`LmClient`] turns it
//! into raw response text; the typed helpers in this module parse that text against the
//! template's schema, retrying once when the model returns something malformed. Three client
//! families exist: deterministic mocks for offline runs, transcript replay, and adapters that
//! speak a line-delimited JSON protocol to an external process or HTTP endpoint.

mod adapter;
mod mock;
mod templates;
mod transcript;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use adapter::{HttpClient, ProcessClient};
pub use mock::{MockClient, MockConfig};
pub use templates::TemplateId;
pub use transcript::{Journaled, ReplayClient, TranscriptEntry};

use crate::geometry::{Aabb, ObjectId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    #[error("client unavailable: {0}")]
    Unavailable(String),
    #[error("client transport error: {0}")]
    Transport(String),
    #[error("malformed {template} response: {message}")]
    Malformed { template: TemplateId, message: String },
    #[error("client rejected request: {0}")]
    BadRequest(String),
    #[error("no recorded response for {0} request")]
    NotRecorded(TemplateId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRequest {
    pub template_id: TemplateId,
    pub slots: BTreeMap<String, Value>,
}

impl ClientRequest {
    pub fn new(template_id: TemplateId) -> Self {
        ClientRequest {
            template_id,
            slots: BTreeMap::new(),
        }
    }

    pub fn slot(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.slots.insert(name.to_string(), value.into());
        self
    }

    pub fn rendered(&self) -> String {
        self.template_id.render(&self.slots)
    }

    pub fn str_slot(&self, name: &str) -> Result<&str, ClientError> {
        self.slots
            .get(name)
            .and_then(Value::as_str)
            .ok_or_else(|| ClientError::BadRequest(format!("{} needs string slot `{name}`", self.template_id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResponse {
    pub text: String,
    pub latency_ms: u64,
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

impl ClientResponse {
    /// Builds a response with whitespace-token counts and no latency.
    pub fn from_text(request: &ClientRequest, text: String) -> Self {
        ClientResponse {
            prompt_tokens: count_tokens(&request.rendered()),
            completion_tokens: count_tokens(&text),
            text,
            latency_ms: 0,
        }
    }
}

fn count_tokens(text: &str) -> u32 {
    text.split_whitespace().count() as u32
}

/// Anything that answers template requests with text.
pub trait LmClient: Send + Sync {
    /// Stable identity used in cache keys; mocks include their seed.
    fn fingerprint(&self) -> String;

    /// Largest number of concurrent requests the backend tolerates.
    fn max_in_flight(&self) -> usize {
        1
    }

    fn send(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError>;
}

impl<C: LmClient + ?Sized> LmClient for &C {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
    fn send(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        (**self).send(request)
    }
}

impl<C: LmClient + ?Sized> LmClient for Box<C> {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
    fn send(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        (**self).send(request)
    }
}

/// Sends and times one request.
pub fn timed_send(client: &dyn LmClient, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
    let start = Instant::now();
    let mut response = client.send(request)?;
    if response.latency_ms == 0 {
        response.latency_ms = start.elapsed().as_millis() as u64;
    }
    Ok(response)
}

/// Pulls the outermost `{...}` object out of model text, tolerating prose or code fences
/// around it.
fn extract_json(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

fn parse_payload<T: DeserializeOwned>(template: TemplateId, text: &str) -> Result<T, ClientError> {
    let body = extract_json(text).ok_or_else(|| ClientError::Malformed {
        template,
        message: "no JSON object in response".into(),
    })?;
    serde_json::from_str(body).map_err(|e| ClientError::Malformed {
        template,
        message: e.to_string(),
    })
}

/// Sends `request` and parses the response, retrying once on a malformed payload.
fn request_parsed<T: DeserializeOwned>(
    client: &dyn LmClient,
    request: &ClientRequest,
    validate: impl Fn(&T) -> Result<(), String>,
) -> Result<T, ClientError> {
    let mut last = None;
    for _ in 0..2 {
        let response = timed_send(client, request)?;
        match parse_payload::<T>(request.template_id, &response.text).and_then(|v| {
            validate(&v).map(|_| v).map_err(|message| ClientError::Malformed {
                template: request.template_id,
                message,
            })
        }) {
            Ok(v) => return Ok(v),
            Err(e @ ClientError::Malformed { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("loop ran"))
}

/// One rough caption for one view crop.
pub fn caption_view(client: &dyn LmClient, crop_ref: &str) -> Result<String, ClientError> {
    let request = ClientRequest::new(TemplateId::CaptionView).slot("crop_ref", crop_ref);
    let text = timed_send(client, &request)?.text.trim().to_string();
    if text.is_empty() {
        return Err(ClientError::Malformed {
            template: TemplateId::CaptionView,
            message: "empty caption".into(),
        });
    }
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSummary {
    pub summary: String,
    pub object_tag: String,
    #[serde(default)]
    pub possible_tags: Vec<String>,
}

impl CaptionSummary {
    pub fn is_invalid(&self) -> bool {
        self.object_tag.trim().eq_ignore_ascii_case("invalid")
    }
}

pub fn summarize_captions(client: &dyn LmClient, captions: &[String]) -> Result<CaptionSummary, ClientError> {
    if captions.is_empty() {
        return Err(ClientError::BadRequest("no captions to summarize".into()));
    }
    let request = ClientRequest::new(TemplateId::SummarizeCaptions).slot("captions", json!(captions));
    request_parsed(client, &request, |s: &CaptionSummary| {
        if s.object_tag.trim().is_empty() {
            Err("empty object_tag".into())
        } else {
            Ok(())
        }
    })
}

/// What the relation prompt sees of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationObject {
    pub id: ObjectId,
    pub caption: String,
    pub bbox_center: [f64; 3],
    pub bbox_extent: [f64; 3],
}

impl RelationObject {
    pub fn new(id: ObjectId, caption: impl Into<String>, bbox: &Aabb) -> Self {
        RelationObject {
            id,
            caption: caption.into(),
            bbox_center: bbox.center().coords.into(),
            bbox_extent: bbox.extent().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationLabel {
    pub object_relation: String,
    pub reason: String,
}

pub fn describe_relation(
    client: &dyn LmClient,
    a: &RelationObject,
    b: &RelationObject,
) -> Result<RelationLabel, ClientError> {
    let request = ClientRequest::new(TemplateId::EdgeRelation)
        .slot("object_a", serde_json::to_value(a).expect("serializable"))
        .slot("object_b", serde_json::to_value(b).expect("serializable"));
    request_parsed(client, &request, |r: &RelationLabel| {
        if r.object_relation.trim().is_empty() {
            Err("empty object_relation".into())
        } else {
            Ok(())
        }
    })
}

/// The planner's answer. All five fields are required and no others are accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerResponse {
    pub inferred_query: String,
    pub relevant_objects: Vec<ObjectId>,
    pub query_achievable: bool,
    /// Most relevant first.
    pub final_relevant_objects: Vec<ObjectId>,
    pub explanation: String,
}

pub fn plan_query(client: &dyn LmClient, scene_json: &str, query: &str) -> Result<PlannerResponse, ClientError> {
    let request = ClientRequest::new(TemplateId::PlanQuery)
        .slot("scene", scene_json)
        .slot("query", query);
    request_parsed(client, &request, |_: &PlannerResponse| Ok(()))
}

/// Asks where a missing object was likely put away. `None` when the planner finds no
/// plausible container in the scene.
pub fn locate_missing_object(
    client: &dyn LmClient,
    scene_json: &str,
    description: &str,
) -> Result<Option<ObjectId>, ClientError> {
    let request = ClientRequest::new(TemplateId::LocateMissingObject)
        .slot("scene", scene_json)
        .slot("description", description);
    let response: PlannerResponse = request_parsed(client, &request, |_: &PlannerResponse| Ok(()))?;
    Ok(response
        .query_achievable
        .then(|| response.final_relevant_objects.first().copied())
        .flatten())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Traversability {
    pub traversable: bool,
    pub rationale: String,
}

pub fn traversability(
    client: &dyn LmClient,
    description: &str,
    possible_tags: &[String],
) -> Result<Traversability, ClientError> {
    let request = ClientRequest::new(TemplateId::Traversability)
        .slot("description", description)
        .slot("possible_tags", json!(possible_tags));
    request_parsed(client, &request, |_: &Traversability| Ok(()))
}

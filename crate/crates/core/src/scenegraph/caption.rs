use serde::{Deserialize, Serialize};

use crate::clients::{caption_view, summarize_captions, LmClient};
use crate::geometry::{FrameId, ObjectId};
use crate::model::ObjectNode;

/// Views captioned per object.
pub const DEFAULT_VIEWS: usize = 10;

pub const INVALID_TAG: &str = "invalid";

/// Top-`k` views by contributed point count, ties broken by the earlier frame.
pub fn best_views(obj: &ObjectNode, k: usize) -> Vec<FrameId> {
    let mut views: Vec<(FrameId, u64)> = obj.view_contributions.iter().map(|(f, n)| (*f, *n)).collect();
    views.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    views.into_iter().take(k).map(|(f, _)| f).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionBundle {
    pub object_id: ObjectId,
    pub rough_captions: Vec<String>,
    pub final_caption: String,
    pub object_tag: String,
    #[serde(default)]
    pub possible_tags: Vec<String>,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CaptionBundle {
    fn failed(object_id: ObjectId, rough_captions: Vec<String>, error: String) -> Self {
        CaptionBundle {
            object_id,
            rough_captions,
            final_caption: String::new(),
            object_tag: INVALID_TAG.to_string(),
            possible_tags: Vec::new(),
            valid: false,
            error: Some(error),
        }
    }
}

/// Captions the object's best views, then asks the summarizer for a final caption and tag.
/// Client failures produce an invalid bundle rather than an error.
pub fn caption_object(obj: &ObjectNode, k: usize, lvlm: &dyn LmClient, llm: &dyn LmClient) -> CaptionBundle {
    let crops: Vec<&String> = best_views(obj, k)
        .iter()
        .filter_map(|f| obj.view_crops.get(f))
        .collect();
    if crops.is_empty() {
        return CaptionBundle::failed(obj.object_id, Vec::new(), "no view crops recorded".into());
    }
    let mut rough = Vec::with_capacity(crops.len());
    for crop in crops {
        match caption_view(lvlm, crop) {
            Ok(c) => rough.push(c),
            Err(e) => return CaptionBundle::failed(obj.object_id, rough, e.to_string()),
        }
    }
    match summarize_captions(llm, &rough) {
        Ok(summary) => {
            let valid = !summary.is_invalid();
            CaptionBundle {
                object_id: obj.object_id,
                rough_captions: rough,
                final_caption: summary.summary,
                object_tag: if valid {
                    summary.object_tag
                } else {
                    INVALID_TAG.to_string()
                },
                possible_tags: summary.possible_tags,
                valid,
                error: None,
            }
        }
        Err(e) => CaptionBundle::failed(obj.object_id, rough, e.to_string()),
    }
}

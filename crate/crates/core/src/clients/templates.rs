use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Every prompt the pipeline can issue. The wire name doubles as the asset file stem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    CaptionView,
    SummarizeCaptions,
    EdgeRelation,
    PlanQuery,
    LocateMissingObject,
    Traversability,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::CaptionView,
        TemplateId::SummarizeCaptions,
        TemplateId::EdgeRelation,
        TemplateId::PlanQuery,
        TemplateId::LocateMissingObject,
        TemplateId::Traversability,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::CaptionView => "caption_view",
            TemplateId::SummarizeCaptions => "summarize_captions",
            TemplateId::EdgeRelation => "edge_relation",
            TemplateId::PlanQuery => "plan_query",
            TemplateId::LocateMissingObject => "locate_missing_object",
            TemplateId::Traversability => "traversability",
        }
    }

    pub fn parse(name: &str) -> Option<TemplateId> {
        Self::ALL.into_iter().find(|t| t.as_str() == name)
    }

    pub fn text(self) -> &'static str {
        match self {
            TemplateId::CaptionView => include_str!("../../assets/prompts/caption_view.txt"),
            TemplateId::SummarizeCaptions => include_str!("../../assets/prompts/summarize_captions.txt"),
            TemplateId::EdgeRelation => include_str!("../../assets/prompts/edge_relation.txt"),
            TemplateId::PlanQuery => include_str!("../../assets/prompts/plan_query.txt"),
            TemplateId::LocateMissingObject => include_str!("../../assets/prompts/locate_missing_object.txt"),
            TemplateId::Traversability => include_str!("../../assets/prompts/traversability.txt"),
        }
    }

    /// First 16 hex digits of the template's SHA-256.
    pub fn hash(self) -> String {
        let digest = Sha256::digest(self.text().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Substitutes `{slot}` placeholders. String slots are inserted raw, anything else as
    /// compact JSON. Braces that don't name a known slot are left alone.
    pub fn render(self, slots: &BTreeMap<String, Value>) -> String {
        render(self.text(), slots)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn render(text: &str, slots: &BTreeMap<String, Value>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        let name = &after[..name_len];
        let closes = after[name_len..].starts_with('}');
        match slots.get(name).filter(|_| closes && !name.is_empty()) {
            Some(value) => {
                match value {
                    Value::String(s) => out.push_str(s),
                    other => out.push_str(&other.to_string()),
                }
                rest = &after[name_len + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn renders_known_slots_only() {
        let mut slots = BTreeMap::new();
        slots.insert("description".to_string(), json!("iron dumbbell"));
        slots.insert("possible_tags".to_string(), json!(["dumbbell", "weight"]));
        let text = TemplateId::Traversability.render(&slots);
        assert!(text.contains("`iron dumbbell'"));
        assert!(text.contains(r#"`["dumbbell","weight"]'"#));
        assert!(!text.contains("{description}"));

        let mut slots = BTreeMap::new();
        slots.insert("captions".to_string(), json!(["a mug"]));
        let text = TemplateId::SummarizeCaptions.render(&slots);
        assert!(text.ends_with("Input: {\"captions\": [\"a mug\"]}\n"), "{text}");
    }

    #[test]
    fn names_roundtrip_and_hashes_differ() {
        let mut hashes = std::collections::BTreeSet::new();
        for t in TemplateId::ALL {
            assert_eq!(TemplateId::parse(t.as_str()), Some(t));
            assert_eq!(serde_json::to_value(t).unwrap(), json!(t.as_str()));
            assert_eq!(t.hash().len(), 16);
            hashes.insert(t.hash());
        }
        assert_eq!(hashes.len(), TemplateId::ALL.len());
        assert!(TemplateId::parse("nope").is_none());
    }

    #[test]
    fn planner_prompt_lists_five_fields() {
        let text = TemplateId::PlanQuery.text();
        for field in [
            "\"id\"",
            "\"bbox_extent\"",
            "\"bbox_center\"",
            "\"object_tag\"",
            "\"caption\"",
        ] {
            assert!(text.contains(field));
        }
        for field in [
            "inferred_query",
            "relevant_objects",
            "query_achievable",
            "final_relevant_objects",
            "explanation",
        ] {
            assert!(text.contains(field));
        }
    }
}

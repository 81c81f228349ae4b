//! Object retrieval with recall@k, and semantic-segmentation export and scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clients::{plan_query, ClientError, LmClient};
use crate::error::{Error, Result};
use crate::geometry::{FeatureVector, ObjectId};
use crate::model::ObjectNode;
use crate::scenegraph::GraphDocument;
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Descriptive,
    Affordance,
    Negation,
}

impl QueryKind {
    pub const ALL: [QueryKind; 3] = [QueryKind::Descriptive, QueryKind::Affordance, QueryKind::Negation];
}

/// One retrieval query with its accepted answers. `embedding` is the precomputed text
/// embedding used by embedding retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub text: String,
    #[serde(rename = "type")]
    pub kind: QueryKind,
    pub ground_truth_ids: BTreeSet<ObjectId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<FeatureVector>,
}

impl QuerySpec {
    pub fn validate(&self) -> Result<()> {
        if self.ground_truth_ids.is_empty() {
            return Err(Error::invalid(
                "query",
                format!("`{}` has no ground-truth objects", self.text),
            ));
        }
        Ok(())
    }
}

pub fn load_queries(path: &Path) -> Result<Vec<QuerySpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let queries: Vec<QuerySpec> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, Some(e.line()), e.to_string()))?;
    for q in &queries {
        q.validate()?;
    }
    Ok(queries)
}

/// Objects ranked by cosine between their renormalized feature and the query embedding.
/// Ties go to the lower id.
pub fn embed_retrieve(objects: &[ObjectNode], query: &FeatureVector, k: usize) -> Result<Vec<ObjectId>> {
    let mut scored = objects
        .iter()
        .map(|o| Ok((o.feature.cosine(query)?, o.object_id)))
        .collect::<Result<Vec<(f64, ObjectId)>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
}

/// First `k` of the planner's final ranking.
pub fn llm_retrieve(
    graph: &GraphDocument,
    query: &str,
    planner: &dyn LmClient,
    k: usize,
) -> std::result::Result<Vec<ObjectId>, ClientError> {
    let response = plan_query(planner, &graph.scene_json(), query)?;
    Ok(response.final_relevant_objects.into_iter().take(k).collect())
}

/// Share of queries whose top-`k` ranking contains a ground-truth object.
pub fn recall_at_k(rankings: &[Vec<ObjectId>], queries: &[QuerySpec], k: usize) -> f64 {
    assert_eq!(rankings.len(), queries.len(), "one ranking per query");
    if queries.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(queries)
        .filter(|(r, q)| r.iter().take(k).any(|id| q.ground_truth_ids.contains(id)))
        .count();
    hits as f64 / queries.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    /// Query type, or `all`.
    pub queries: String,
    pub count: usize,
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@2")]
    pub r2: f64,
    #[serde(rename = "R@3")]
    pub r3: f64,
}

/// Recall at 1, 2 and 3 per query type plus an overall row.
pub fn recall_table(rankings: &[Vec<ObjectId>], queries: &[QuerySpec]) -> Vec<RecallRow> {
    let row = |name: String, idx: Vec<usize>| {
        let r: Vec<Vec<ObjectId>> = idx.iter().map(|&i| rankings[i].clone()).collect();
        let q: Vec<QuerySpec> = idx.iter().map(|&i| queries[i].clone()).collect();
        RecallRow {
            queries: name,
            count: q.len(),
            r1: recall_at_k(&r, &q, 1),
            r2: recall_at_k(&r, &q, 2),
            r3: recall_at_k(&r, &q, 3),
        }
    };
    let mut rows: Vec<RecallRow> = QueryKind::ALL
        .iter()
        .map(|kind| {
            let idx = (0..queries.len()).filter(|&i| queries[i].kind == *kind).collect();
            let name = serde_json::to_value(kind).unwrap().as_str().unwrap().to_string();
            row(name, idx)
        })
        .filter(|r| r.count > 0)
        .collect();
    rows.push(row("all".into(), (0..queries.len()).collect()));
    rows
}

/// Points with one class label each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCloud {
    pub class_names: Vec<String>,
    pub points: Vec<Point3<f64>>,
    pub labels: Vec<u32>,
}

impl LabeledCloud {
    pub fn new(class_names: Vec<String>, points: Vec<Point3<f64>>, labels: Vec<u32>) -> Result<Self> {
        let cloud = LabeledCloud {
            class_names,
            points,
            labels,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.labels.len() {
            return Err(Error::invalid(
                "labeled cloud",
                format!("{} points but {} labels", self.points.len(), self.labels.len()),
            ));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize >= self.class_names.len()) {
            return Err(Error::invalid(
                "labeled cloud",
                format!("label {bad} outside class table"),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cloud: LabeledCloud =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, Some(e.line()), e.to_string()))?;
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("serializable");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Text embeddings of the class prompts, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbeddings {
    pub class_names: Vec<String>,
    pub embeddings: Vec<FeatureVector>,
}

/// Gives each object the class whose embedding is most similar to its feature (lower class
/// index on ties); every point of the object inherits that label.
pub fn export_semseg(objects: &[ObjectNode], classes: &ClassEmbeddings) -> Result<LabeledCloud> {
    if classes.class_names.len() != classes.embeddings.len() {
        return Err(Error::invalid(
            "class embeddings",
            "one embedding per class name required",
        ));
    }
    if classes.embeddings.is_empty() {
        return Err(Error::invalid("class embeddings", "empty class table"));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for obj in objects {
        let mut best = (0u32, f64::NEG_INFINITY);
        for (c, emb) in classes.embeddings.iter().enumerate() {
            let s = obj.feature.cosine(emb)?;
            if s > best.1 {
                best = (c as u32, s);
            }
        }
        points.extend_from_slice(obj.cloud.points());
        labels.extend(std::iter::repeat_n(best.0, obj.cloud.len()));
    }
    LabeledCloud::new(classes.class_names.clone(), points, labels)
}

/// Ground-truth points match the nearest predicted point within this distance (meters).
pub const MATCH_RADIUS: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub support: usize,
    pub accuracy: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemsegReport {
    #[serde(rename = "mAcc")]
    pub m_acc: f64,
    #[serde(rename = "F_mIoU")]
    pub f_miou: f64,
    pub matched_points: usize,
    pub gt_points: usize,
    pub per_class: BTreeMap<String, ClassScore>,
}

/// Predicted class for each ground-truth point, in ground-truth class indices. `None` marks
/// an unmatched point or a predicted class absent from the ground-truth table.
pub fn match_predictions(pred: &LabeledCloud, gt: &LabeledCloud) -> Vec<Option<u32>> {
    let remap: Vec<Option<u32>> = pred
        .class_names
        .iter()
        .map(|n| gt.class_names.iter().position(|g| g == n).map(|i| i as u32))
        .collect();
    if pred.is_empty() {
        return vec![None; gt.len()];
    }
    let tree = KdTree::build(&pred.points);
    gt.points
        .par_iter()
        .map(|p| match tree.nearest(p) {
            Some((i, d2)) if d2 <= MATCH_RADIUS * MATCH_RADIUS => remap[pred.labels[i] as usize],
            _ => None,
        })
        .collect()
}

/// Mean class accuracy and frequency-weighted IoU over the ground-truth points.
pub fn semseg_metrics(pred: &LabeledCloud, gt: &LabeledCloud) -> Result<SemsegReport> {
    pred.validate()?;
    gt.validate()?;
    if gt.is_empty() {
        return Err(Error::invalid("ground truth", "no points"));
    }
    let matched = match_predictions(pred, gt);
    let nc = gt.class_names.len();
    let (mut tp, mut fp, mut support) = (vec![0usize; nc], vec![0usize; nc], vec![0usize; nc]);
    for (g, p) in gt.labels.iter().zip(&matched) {
        support[*g as usize] += 1;
        match p {
            Some(p) if p == g => tp[*g as usize] += 1,
            Some(p) => fp[*p as usize] += 1,
            None => {}
        }
    }
    let n = gt.len() as f64;
    let mut per_class = BTreeMap::new();
    let (mut acc_sum, mut present, mut f_miou) = (0.0, 0usize, 0.0);
    for c in 0..nc {
        if support[c] == 0 {
            continue;
        }
        let accuracy = tp[c] as f64 / support[c] as f64;
        let fn_c = support[c] - tp[c];
        let iou = tp[c] as f64 / (tp[c] + fp[c] + fn_c) as f64;
        acc_sum += accuracy;
        present += 1;
        f_miou += support[c] as f64 / n * iou;
        per_class.insert(
            gt.class_names[c].clone(),
            ClassScore {
                support: support[c],
                accuracy,
                iou,
            },
        );
    }
    Ok(SemsegReport {
        m_acc: acc_sum / present as f64,
        f_miou,
        matched_points: matched.iter().filter(|m| m.is_some()).count(),
        gt_points: gt.len(),
        per_class,
    })
}

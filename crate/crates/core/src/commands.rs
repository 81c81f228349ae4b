//! The operations behind each `cgmap` subcommand, usable without the binary.
//!
//! Every operation writes its files under an output directory and returns what it wrote.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::clients::{ClientError, Journaled, LmClient};
use crate::config::{ClientSpec, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    embed_retrieve, export_semseg, llm_retrieve, recall_table, semseg_metrics, ClassEmbeddings, LabeledCloud,
    QueryKind, QuerySpec, RecallRow, SemsegReport,
};
use crate::geometry::{Aabb, ObjectId};
use crate::ingest::load_manifest;
use crate::localization::{observations, Localizer, Pose2, StepLog};
use crate::mapfile::{read_map, write_map};
use crate::pipeline::{build_from_manifest, BuildReport};
use crate::scenegraph::{build_scene_graph, CaptionBundle, GraphCache, GraphClients, GraphDocument, GraphOptions};
use crate::synthetic::{
    archetypes, desk_scene, loop_mount, loop_path, render, NoiseParams, SceneObject, CAMERA_HEIGHT, FEATURE_DIM,
    LOOP_RADIUS,
};

pub const MAP_FILE: &str = "map.cgm";
pub const BUILD_REPORT_FILE: &str = "build_report.json";
pub const GRAPH_FILE: &str = "graph.json";
pub const CAPTIONS_FILE: &str = "captions.json";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const QUERY_REPORT_FILE: &str = "query_report.json";
pub const SEMSEG_PRED_FILE: &str = "semseg_pred.json";
pub const SEMSEG_REPORT_FILE: &str = "semseg_report.json";
pub const LOCALIZATION_LOG_FILE: &str = "localization.jsonl";
pub const UPDATED_MAP_FILE: &str = "map_updated.cgm";
pub const SYNTH_CONFIG_FILE: &str = "cgmap.toml";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, Some(e.line()), e.to_string()))
}

/// Fuses every frame of `manifest` into `out/map.cgm` and writes `out/build_report.json`.
pub fn build(manifest: &Path, cfg: &RunConfig, out: &Path) -> Result<BuildReport> {
    cfg.validate()?;
    let dataset = load_manifest(manifest)?;
    create_dir(out)?;
    let (map, report) = build_from_manifest(&dataset, &cfg.effective_association(), &cfg.dbscan, cfg.base_object_id)?;
    write_map(&out.join(MAP_FILE), &map, &cfg.digest())?;
    write_json(&out.join(BUILD_REPORT_FILE), &report)?;
    Ok(report)
}

/// Captions the objects of a map and labels their relations, writing `out/graph.json`,
/// `out/captions.json` and, unless replaying, the request transcript.
///
/// Fails with a client error only when every foreground object failed to caption.
pub fn graph(map_path: &Path, cfg: &RunConfig, out: &Path) -> Result<GraphDocument> {
    cfg.validate()?;
    let stored = read_map(map_path)?;
    create_dir(out)?;
    let client = cfg.connect()?;
    let replaying = matches!(&cfg.clients, ClientSpec::Endpoint(uri) if uri.starts_with("replay:"));
    let journal;
    let active: &dyn LmClient = if replaying {
        client.as_ref()
    } else {
        let path = out.join(TRANSCRIPT_FILE);
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        journal = Journaled::to_file(client.as_ref(), path)?;
        &journal
    };
    let opts = GraphOptions {
        views_per_object: cfg.views_per_object,
        cache: GraphCache::from_env()?,
    };
    let objects = stored.map.into_objects();
    let built = build_scene_graph(&objects, &GraphClients::single(active), &opts, &cfg.digest());
    let doc = GraphDocument::from_graph(&built.graph);
    std::fs::write(out.join(GRAPH_FILE), doc.to_json_pretty()).map_err(|e| Error::io(out.join(GRAPH_FILE), e))?;
    write_json(&out.join(CAPTIONS_FILE), &built.bundles)?;
    check_captions(&built.bundles)?;
    Ok(doc)
}

fn check_captions(bundles: &[CaptionBundle]) -> Result<()> {
    if !bundles.is_empty() && bundles.iter().all(|b| b.error.is_some()) {
        let first = bundles[0].error.clone().unwrap_or_default();
        return Err(ClientError::Unavailable(format!("every object failed to caption; first error: {first}")).into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Embed,
    Llm,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "embed" => Ok(Strategy::Embed),
            "llm" => Ok(Strategy::Llm),
            other => Err(format!("unknown strategy `{other}` (expected embed or llm)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub text: String,
    #[serde(rename = "type")]
    pub kind: QueryKind,
    pub ranked: Vec<ObjectId>,
    pub hit: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub strategy: Strategy,
    pub k: usize,
    pub results: Vec<QueryResult>,
    /// Only over queries that carry ground truth.
    pub recall: Vec<RecallRow>,
}

/// Inputs for [`query`]. Embedding retrieval needs the map (for object features) and a
/// query embedding on every query; planner retrieval needs the graph.
pub struct QueryInputs<'a> {
    pub graph: Option<&'a Path>,
    pub map: Option<&'a Path>,
    pub queries: Vec<QuerySpec>,
    pub strategy: Strategy,
    pub k: usize,
}

pub fn query(inputs: QueryInputs, cfg: &RunConfig, out: &Path) -> Result<QueryReport> {
    cfg.validate()?;
    if inputs.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut rankings = Vec::with_capacity(inputs.queries.len());
    match inputs.strategy {
        Strategy::Embed => {
            let map_path = inputs
                .map
                .ok_or_else(|| Error::Config("embedding retrieval needs --map".into()))?;
            let objects = read_map(map_path)?.map.into_objects();
            for q in &inputs.queries {
                let emb = q.embedding.as_ref().ok_or_else(|| {
                    Error::Config(format!("query `{}` has no embedding for embedding retrieval", q.text))
                })?;
                rankings.push(embed_retrieve(&objects, &emb.renormalized()?, inputs.k)?);
            }
        }
        Strategy::Llm => {
            let graph_path = inputs
                .graph
                .ok_or_else(|| Error::Config("planner retrieval needs --graph".into()))?;
            let doc: GraphDocument = read_json(graph_path)?;
            let client = cfg.connect()?;
            for q in &inputs.queries {
                rankings.push(llm_retrieve(&doc, &q.text, client.as_ref(), inputs.k)?);
            }
        }
    }
    let labeled: Vec<usize> = (0..inputs.queries.len())
        .filter(|&i| !inputs.queries[i].ground_truth_ids.is_empty())
        .collect();
    let recall = if labeled.is_empty() {
        Vec::new()
    } else {
        let r: Vec<_> = labeled.iter().map(|&i| rankings[i].clone()).collect();
        let q: Vec<_> = labeled.iter().map(|&i| inputs.queries[i].clone()).collect();
        recall_table(&r, &q)
    };
    let results = inputs
        .queries
        .iter()
        .zip(rankings)
        .map(|(q, ranked)| QueryResult {
            text: q.text.clone(),
            kind: q.kind,
            hit: (!q.ground_truth_ids.is_empty()).then(|| ranked.iter().any(|id| q.ground_truth_ids.contains(id))),
            ranked,
        })
        .collect();
    let report = QueryReport {
        strategy: inputs.strategy,
        k: inputs.k,
        results,
        recall,
    };
    create_dir(out)?;
    write_json(&out.join(QUERY_REPORT_FILE), &report)?;
    Ok(report)
}

/// Reads class embeddings from either a bare class-embedding file or a dataset's
/// `ground_truth.json`.
pub fn load_class_embeddings(path: &Path) -> Result<ClassEmbeddings> {
    let value: serde_json::Value = read_json(path)?;
    let inner = value.get("class_embeddings").cloned().unwrap_or(value);
    serde_json::from_value(inner).map_err(|e| Error::parse(path, None, e.to_string()))
}

/// Labels every map point with its object's nearest class and, given ground truth, scores
/// the labeling.
pub fn segment(
    map_path: &Path,
    classes: &ClassEmbeddings,
    gt: Option<&LabeledCloud>,
    out: &Path,
) -> Result<Option<SemsegReport>> {
    let objects = read_map(map_path)?.map.into_objects();
    let pred = export_semseg(&objects, classes)?;
    create_dir(out)?;
    pred.write(&out.join(SEMSEG_PRED_FILE))?;
    let report = gt.map(|g| semseg_metrics(&pred, g)).transpose()?;
    if let Some(r) = &report {
        write_json(&out.join(SEMSEG_REPORT_FILE), r)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Initialization {
    /// All particles at a known pose.
    At(Pose2),
    /// Particles uniform over `[x0, x1] × [y0, y1]` with uniform yaw.
    Uniform { x: (f64, f64), y: (f64, f64) },
}

/// Runs the particle filter over every frame of `manifest` against the map, writing the
/// session log and the updated map.
pub fn localize(
    map_path: &Path,
    manifest: &Path,
    init: Initialization,
    cfg: &RunConfig,
    out: &Path,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    let mut map = read_map(map_path)?.map;
    let dataset = load_manifest(manifest)?;
    let mut lcfg = cfg.localization.clone();
    lcfg.seed = cfg.seed;
    let voxel = lcfg.observation_voxel;
    let mut filter = match init {
        Initialization::At(p) => Localizer::at(lcfg, p)?,
        Initialization::Uniform { x, y } => Localizer::uniform(lcfg, x, y)?,
    };
    create_dir(out)?;
    let log_path = out.join(LOCALIZATION_LOG_FILE);
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut steps = Vec::with_capacity(dataset.frames.len());
    for (i, entry) in dataset.frames.iter().enumerate() {
        let frame = dataset.load_frame(i)?;
        let records = dataset.load_detections(i)?;
        let obs = observations(&frame, &records, &cfg.dbscan, voxel)?;
        let odometry = entry.odometry.map(|[x, y, yaw]| Pose2::new(x, y, yaw));
        let step = filter.step(&mut map, &obs, odometry.as_ref())?;
        writeln!(log, "{}", serde_json::to_string(&step).expect("serializable"))
            .map_err(|e| Error::io(&log_path, e))?;
        steps.push(step);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    write_map(&out.join(UPDATED_MAP_FILE), &map, &cfg.digest())?;
    Ok(steps)
}

/// A box added to the default scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub class_name: String,
    pub center: [f64; 3],
    pub extent: [f64; 3],
}

impl std::str::FromStr for Placement {
    type Err = String;

    /// `name@x,y,z/ex,ey,ez`
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let err = || format!("bad placement `{s}` (expected name@x,y,z/ex,ey,ez)");
        let (name, rest) = s.split_once('@').ok_or_else(err)?;
        let (c, e) = rest.split_once('/').ok_or_else(err)?;
        let triple = |t: &str| -> std::result::Result<[f64; 3], String> {
            let v: Vec<f64> = t
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err())?;
            v.try_into().map_err(|_| err())
        };
        if name.is_empty() {
            return Err(err());
        }
        Ok(Placement {
            class_name: name.to_string(),
            center: triple(c)?,
            extent: triple(e)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub frames: usize,
    pub seed: u64,
    pub noise: NoiseParams,
    /// Start angle on the loop, radians.
    pub phase: f64,
    /// Frames per full loop; defaults to `frames`.
    pub loop_frames: Option<usize>,
    /// Indices of default objects to leave out.
    pub remove: Vec<usize>,
    pub place: Vec<Placement>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            frames: 50,
            seed: 0,
            noise: NoiseParams::default(),
            phase: 0.0,
            loop_frames: None,
            remove: Vec::new(),
            place: Vec::new(),
        }
    }
}

/// Renders the default desk scene to `out`, plus a `cgmap.toml` carrying the camera mount
/// for localization. Returns the manifest path and render warnings.
pub fn synth(opts: &SynthOptions, out: &Path) -> Result<(PathBuf, Vec<String>)> {
    if opts.frames == 0 {
        return Err(Error::Config("frames must be at least 1".into()));
    }
    let per_loop = opts.loop_frames.unwrap_or(opts.frames).max(1);
    let mut spec = desk_scene(opts.seed, per_loop);
    let mount = loop_mount(CAMERA_HEIGHT, LOOP_RADIUS);
    let path: Vec<Pose2> = (0..opts.frames)
        .map(|i| loop_path(LOOP_RADIUS, per_loop, opts.phase)[i % per_loop])
        .collect();
    spec.trajectory = path.iter().map(|p| mount.camera_pose(p)).collect();
    spec.robot_path = Some(path);
    spec.noise = opts.noise;
    let base = spec.objects.len();
    for &i in &opts.remove {
        if i >= base {
            return Err(Error::Config(format!("cannot remove object {i}; the scene has {base}")));
        }
    }
    let mut objects: Vec<SceneObject> = spec
        .objects
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !opts.remove.contains(i))
        .map(|(_, o)| o)
        .collect();
    let extra = archetypes(base + opts.place.len(), FEATURE_DIM, opts.seed);
    for (p, archetype) in opts.place.iter().zip(extra.into_iter().skip(base)) {
        objects.push(SceneObject {
            class_name: p.class_name.clone(),
            bbox: Aabb::from_center_extent(Point3::from(p.center), Vector3::from(p.extent))?,
            archetype,
            background: false,
        });
    }
    spec.objects = objects;
    let dataset = render(&spec)?;
    create_dir(out)?;
    let manifest = dataset.write(out)?;
    let toml = format!(
        "[localization.mount]\nheight = {:?}\npitch = {:?}\n",
        mount.height, mount.pitch
    );
    let cfg_path = out.join(SYNTH_CONFIG_FILE);
    std::fs::write(&cfg_path, toml).map_err(|e| Error::io(&cfg_path, e))?;
    Ok((manifest, dataset.warnings))
}

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgmap::commands::{self, Initialization, Placement, QueryInputs, Strategy, SynthOptions};
use cgmap::eval::{load_queries, LabeledCloud, QueryKind, QuerySpec};
use cgmap::localization::Pose2;
use cgmap::synthetic::NoiseParams;
use cgmap::{ClientSpec, Error, ErrorKind, Mode, RunConfig};

#[derive(Parser)]
#[command(name = "cgmap", version, about = "Object-centric 3D scene-graph mapping")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration, TOML or JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// cg (class-agnostic) or cg-d (detector; merges background classes).
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// `mock` or `endpoint=<exec:cmd | http(s)://url | replay:transcript.jsonl>`.
    #[arg(long, global = true)]
    clients: Option<ClientSpec>,
    /// Output directory [default: the config's output_dir, else ./out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse a dataset's detections into a map (map.cgm + build_report.json).
    Build {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Caption map objects and label their relations (graph.json).
    Graph {
        #[arg(long)]
        map: PathBuf,
    },
    /// Retrieve objects for language queries.
    Query(QueryArgs),
    /// Export per-point class labels and score them against ground truth.
    Segment {
        #[arg(long)]
        map: PathBuf,
        /// Class embeddings, or a dataset's ground_truth.json.
        #[arg(long)]
        classes: PathBuf,
        /// Ground-truth labeled cloud to score against.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Localize against a map over a dataset's frames, updating the map as objects change.
    Localize(LocalizeArgs),
    /// Render the synthetic desk scene.
    Synth(SynthArgs),
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long, default_value = "llm")]
    strategy: Strategy,
    #[arg(short, long, default_value_t = 3)]
    k: usize,
    /// One query text (planner retrieval only).
    #[arg(long, conflicts_with = "queries")]
    text: Option<String>,
    /// JSON list of queries with type, ground_truth_ids and optional embedding.
    #[arg(long, required_unless_present = "text")]
    queries: Option<PathBuf>,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Known start pose `x,y,yaw`.
    #[arg(long, value_parser = parse_floats::<3>, conflicts_with = "area", allow_hyphen_values = true)]
    start: Option<[f64; 3]>,
    /// Uniform start over `x0,x1,y0,y1`.
    #[arg(
        long = "box",
        id = "area",
        value_parser = parse_floats::<4>,
        required_unless_present = "start",
        allow_hyphen_values = true
    )]
    area: Option<[f64; 4]>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    frames: usize,
    /// Frames per full loop [default: --frames].
    #[arg(long)]
    loop_frames: Option<usize>,
    /// Start angle on the loop, radians.
    #[arg(long, default_value_t = 0.0)]
    phase: f64,
    #[arg(long, default_value_t = 0.0)]
    feature_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0.0)]
    depth_sigma: f64,
    /// Index of a default object to leave out; repeatable.
    #[arg(long)]
    remove: Vec<usize>,
    /// Extra box `name@x,y,z/ex,ey,ez`; repeatable.
    #[arg(long)]
    place: Vec<Placement>,
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    v.try_into()
        .map_err(|_| format!("expected {N} comma-separated numbers"))
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Client => 4,
    }
}

fn resolve_config(g: &Global) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(m) = g.mode {
        cfg.mode = m;
    }
    if let Some(c) = &g.clients {
        cfg.clients = c.clone();
    }
    if let Some(o) = &g.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), Error> {
    let (cfg, out) = resolve_config(&cli.global)?;
    match cli.command {
        Command::Build { manifest } => {
            let r = commands::build(&manifest, &cfg, &out)?;
            print(serde_json::json!({
                "map": out.join(commands::MAP_FILE),
                "frames": r.frames,
                "detections": r.detections,
                "detections_kept": r.detections_kept,
                "objects": r.objects,
                "likely_duplicates": r.likely_duplicates,
                "elapsed_ms": r.elapsed_ms,
            }));
        }
        Command::Graph { map } => {
            let doc = commands::graph(&map, &cfg, &out)?;
            print(serde_json::json!({
                "graph": out.join(commands::GRAPH_FILE),
                "objects": doc.objects.len(),
                "suppressed": doc.suppressed.len(),
                "edges": doc.edges.len(),
            }));
        }
        Command::Query(q) => {
            let queries = match (&q.text, &q.queries) {
                (Some(text), _) => vec![QuerySpec {
                    text: text.clone(),
                    kind: QueryKind::Descriptive,
                    ground_truth_ids: BTreeSet::new(),
                    embedding: None,
                }],
                (None, Some(path)) => load_queries(path)?,
                (None, None) => unreachable!("clap requires one of --text and --queries"),
            };
            let inputs = QueryInputs {
                graph: q.graph.as_deref(),
                map: q.map.as_deref(),
                queries,
                strategy: q.strategy,
                k: q.k,
            };
            let report = commands::query(inputs, &cfg, &out)?;
            print(serde_json::to_value(&report).expect("serializable"));
        }
        Command::Segment { map, classes, gt } => {
            let classes = commands::load_class_embeddings(&classes)?;
            let gt = gt.as_deref().map(LabeledCloud::read).transpose()?;
            let report = commands::segment(&map, &classes, gt.as_ref(), &out)?;
            match report {
                Some(r) => print(serde_json::json!({
                    "predictions": out.join(commands::SEMSEG_PRED_FILE),
                    "mAcc": r.m_acc,
                    "F-mIoU": r.f_miou,
                    "matched_points": r.matched_points,
                    "gt_points": r.gt_points,
                })),
                None => print(serde_json::json!({ "predictions": out.join(commands::SEMSEG_PRED_FILE) })),
            }
        }
        Command::Localize(l) => {
            let init = match (l.start, l.area) {
                (Some([x, y, yaw]), _) => Initialization::At(Pose2::new(x, y, yaw)),
                (None, Some([x0, x1, y0, y1])) => Initialization::Uniform {
                    x: (x0, x1),
                    y: (y0, y1),
                },
                (None, None) => unreachable!("clap requires one of --start and --box"),
            };
            let steps = commands::localize(&l.map, &l.manifest, init, &cfg, &out)?;
            let changes: Vec<_> = steps.iter().flat_map(|s| s.changes.iter()).collect();
            print(serde_json::json!({
                "log": out.join(commands::LOCALIZATION_LOG_FILE),
                "map": out.join(commands::UPDATED_MAP_FILE),
                "frames": steps.len(),
                "final_pose": steps.last().map(|s| s.est_pose),
                "changes": changes,
            }));
        }
        Command::Synth(s) => {
            let opts = SynthOptions {
                frames: s.frames,
                seed: cfg.seed,
                noise: NoiseParams {
                    mask_dropout: s.dropout,
                    feature_sigma: s.feature_sigma,
                    depth_sigma: s.depth_sigma,
                },
                phase: s.phase,
                loop_frames: s.loop_frames,
                remove: s.remove,
                place: s.place,
            };
            let (manifest, warnings) = commands::synth(&opts, &out)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            print(serde_json::json!({
                "manifest": manifest,
                "config": out.join(commands::SYNTH_CONFIG_FILE),
                "ground_truth": out.join("ground_truth.json"),
                "gt_labels": out.join("gt_labels.json"),
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

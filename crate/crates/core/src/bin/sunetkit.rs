use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sunetkit::accounting::format_millions_delta;
use sunetkit::convectional::{attention_increment, cn_param_count, CnConfig, Fusion};
use sunetkit::heads::{decode_panoptic, panoptic_fuse};
use sunetkit::init::ParamRng;
use sunetkit::io;
use sunetkit::metrics::{evaluate_maps, panoptic_quality, PqReport, PqStats};
use sunetkit::panoptic::CategoryTable;
use sunetkit::pipeline::{run_pipeline, Mode, PipelineConfig, Precision};
use sunetkit::pixel_relation::{equivalence_chain, parse_stages, pb_param_count, pb_param_ledger, PbPlacement};
use sunetkit::scene::{synth_scene, SceneConfig};
use sunetkit::{gradcheck, par, Error, Result, Scalar, Tensor};

const CHAIN_TOLERANCE: f64 = 1e-10;
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "sunetkit", version, about = "Panoptic segmentation building blocks and checks")]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: image, ground-truth map and exact instances.
    Synth(SynthArgs),
    /// Run the network and fusion on an image; writes the map and a report.
    Forward(ForwardArgs),
    /// Compare the four global-context operators on a random input.
    DeriveCheck(DeriveArgs),
    /// Check pixel-relation gradients against finite differences.
    GradCheck(GradArgs),
    /// Print parameter counts.
    ParamCount(ParamArgs),
    /// Fuse semantic logits and instance predictions into a panoptic map.
    Fuse(FuseArgs),
    /// Score predicted maps against ground truth (files or directories).
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene configuration (JSON); flags below override its fields.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    things: Option<usize>,
    #[arg(long)]
    bands: Option<usize>,
}

#[derive(Args)]
struct ForwardArgs {
    /// Input image tensor; a synthetic scene is generated when omitted.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Instance predictions (JSON).
    #[arg(long)]
    instances: Option<PathBuf>,
    /// Ground-truth map for losses and metrics.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Replace semantic logits by one-hot ground truth.
    #[arg(long)]
    oracle: bool,
    /// Also write the pyramid levels and a manifest.
    #[arg(long)]
    dump_pyramid: bool,
}

#[derive(Args)]
struct DeriveArgs {
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Component {
    Pb,
    Cn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backbone {
    Resnet50,
    Resnet101,
}

#[derive(Args)]
struct ParamArgs {
    #[arg(long, value_enum, default_value = "pb")]
    component: Component,
    /// Stages with pixel-relation blocks.
    #[arg(long, default_value = "res3,res4")]
    stages: String,
    #[arg(long, value_enum, default_value = "resnet50")]
    backbone: Backbone,
    #[arg(long, value_enum, default_value = "add")]
    fusion: FusionArg,
    #[arg(long, default_value_t = 16)]
    reduction: usize,
    /// One channel-attention module per level instead of a shared one.
    #[arg(long)]
    independent_attention: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Add,
    Concat,
}

#[derive(Args)]
struct FuseArgs {
    /// Full-resolution semantic logits, `(1, K, H, W)`.
    #[arg(long)]
    semantic: PathBuf,
    #[arg(long)]
    instances: Option<PathBuf>,
    /// Category table (JSON); defaults to the 19 Cityscapes classes.
    #[arg(long)]
    categories: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    pred: PathBuf,
    gt: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SUNETKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config {
            field: "SUNETKIT_THREADS".into(),
            reason: format!("`{raw}` is not a non-negative integer"),
        })?;
    par::init_threads(n);
    Ok(())
}

/// Validation failure reported with exit code 1.
fn check_failed(msg: String) -> Error {
    Error::InvalidArgument(msg)
}

fn out_dir(cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &cli.config {
        Some(p) => io::read_json(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(&cli, a),
        Command::Forward(a) => {
            let cfg = load_config(&cli)?;
            match cfg.precision {
                Precision::F32 => forward::<f32>(&cli, &cfg, a),
                Precision::F64 => forward::<f64>(&cli, &cfg, a),
            }
        }
        Command::DeriveCheck(a) => derive_check(cli.seed.unwrap_or(0), a),
        Command::GradCheck(a) => grad_check(cli.seed.unwrap_or(0), a),
        Command::ParamCount(a) => param_count(a),
        Command::Fuse(a) => fuse(&cli, a),
        Command::Eval(a) => eval(&cli, a),
    }
}

fn scene_config(cli: &Cli, a: &SynthArgs) -> Result<SceneConfig> {
    let mut cfg = match &a.scene {
        Some(p) => io::read_json(p)?,
        None => SceneConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.height = a.height.unwrap_or(cfg.height);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.n_things = a.things.unwrap_or(cfg.n_things);
    cfg.stuff_bands = a.bands.unwrap_or(cfg.stuff_bands);
    cfg.validate()?;
    Ok(cfg)
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let cfg = scene_config(cli, a)?;
    let scene = synth_scene::<f32>(&cfg)?;
    let dir = out_dir(&cli.out);
    io::write_tensor(&dir.join("image.sunt"), &scene.image)?;
    io::write_map(&dir.join("gt.pano"), &scene.gt)?;
    io::write_instances(&dir, "instances", &scene.instances)?;
    println!(
        "wrote {}x{} scene with {} things and {} stuff bands to {}",
        cfg.height,
        cfg.width,
        cfg.n_things,
        cfg.stuff_bands,
        dir.display()
    );
    Ok(())
}

fn forward<T: Scalar>(cli: &Cli, cfg: &PipelineConfig, a: &ForwardArgs) -> Result<()> {
    let dir = out_dir(&cli.out);
    let (image, instances, gt) = match &a.image {
        Some(p) => {
            let image: Tensor<T> = io::read_tensor(p)?.cast();
            let instances = match &a.instances {
                Some(p) => io::read_instances::<T>(p)?,
                None => Vec::new(),
            };
            let gt = a.gt.as_deref().map(io::read_map).transpose()?;
            (image, instances, gt)
        }
        None => {
            let scene = synth_scene::<T>(&SceneConfig {
                seed: cfg.seed,
                ..SceneConfig::default()
            })?;
            let instances = match &a.instances {
                Some(p) => io::read_instances::<T>(p)?,
                None => scene.instances,
            };
            let gt = match &a.gt {
                Some(p) => io::read_map(p)?,
                None => scene.gt,
            };
            (scene.image, instances, Some(gt))
        }
    };
    let categories = gt.as_ref().map_or_else(CategoryTable::cityscapes, |g| g.categories().clone());
    let mode = if a.oracle {
        if gt.is_none() {
            return Err(Error::InvalidArgument("--oracle needs --gt".into()));
        }
        Mode::Oracle(&instances)
    } else {
        Mode::Predicted(&instances)
    };
    let (map, report) = run_pipeline(cfg, &categories, &image, mode, gt.as_ref())?;
    io::write_map(&dir.join("pred.pano"), &map)?;
    io::write_json(&dir.join("report.json"), &report)?;
    if a.dump_pyramid {
        let net = sunetkit::pipeline::Network::<T>::random(cfg, categories.len())?;
        let pyramid = sunetkit::convectional::convectional_forward(&net.backbone(&image)?, &net.cn)?;
        io::write_pyramid(&dir.join("pyramid"), &pyramid)?;
    }
    for s in &report.shapes {
        println!("{:<16} {:?}", s.name, s.shape);
    }
    println!(
        "pixel-relation params at ResNet-50 geometry: {} ({}M)",
        report.ledger.pb_total, report.ledger.pb_millions
    );
    if let Some(l) = &report.losses {
        println!(
            "loss {:.6} (semantic {:.6}, instance {:.6}, panoptic {:.6})",
            l.total, l.semantic, l.instance, l.panoptic
        );
    }
    if let Some(q) = &report.quality {
        println!("PQ {:.3}  SQ {:.3}  RQ {:.3}  mIoU {:.3}", q.pq, q.sq, q.rq, q.miou);
    }
    Ok(())
}

fn derive_check(seed: u64, a: &DeriveArgs) -> Result<()> {
    if a.channels == 0 || a.height == 0 || a.width == 0 {
        return Err(Error::InvalidArgument("input extents must be positive".into()));
    }
    let mut rng = ParamRng::new(seed);
    let x: Tensor<f64> = rng.tensor([1, a.channels, a.height, a.width], -1.0, 1.0);
    let report = equivalence_chain(&x, &mut rng)?;
    for (name, v) in report.entries() {
        println!("{name:<34} {v:.3e}");
    }
    let worst = report.max();
    if worst < CHAIN_TOLERANCE {
        println!("all differences below {CHAIN_TOLERANCE:e}");
        Ok(())
    } else {
        Err(check_failed(format!("max difference {worst:e} exceeds {CHAIN_TOLERANCE:e}")))
    }
}

fn grad_check(seed: u64, a: &GradArgs) -> Result<()> {
    if !(a.eps > 0.0) {
        return Err(Error::InvalidArgument("--eps must be positive".into()));
    }
    let r = gradcheck::run(seed, a.cases, a.eps)?;
    println!(
        "max relative error {:.3e} over {} gradient entries ({} cases)",
        r.max_rel_error, r.checked, a.cases
    );
    if r.max_rel_error < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(check_failed(format!("relative error exceeds {GRAD_TOLERANCE:e}")))
    }
}

fn param_count(a: &ParamArgs) -> Result<()> {
    match a.component {
        Component::Pb => {
            let stages = parse_stages(&a.stages)?;
            let placement = match a.backbone {
                Backbone::Resnet50 => PbPlacement::resnet50(&stages)?,
                Backbone::Resnet101 => PbPlacement::resnet101(&stages)?,
            };
            for (stage, n) in pb_param_ledger(&placement) {
                let g = placement.stages().iter().find(|g| g.stage == stage).expect("declared");
                println!("{stage}: {} x ({} + 1) = {n}", g.units, g.channels);
            }
            let total = pb_param_count(&placement);
            println!("{total} ({}M)", format_millions_delta(total as i64));
        }
        Component::Cn => {
            let cfg = CnConfig {
                fusion: match a.fusion {
                    FusionArg::Add => Fusion::Add,
                    FusionArg::Concat => Fusion::Concat,
                },
                reduction: a.reduction,
                shared_attention: !a.independent_attention,
                ..CnConfig::resnet50()
            };
            cfg.validate()?;
            let l = cn_param_count(&cfg);
            for (name, n) in [
                ("laterals", l.laterals),
                ("semantic pathway", l.semantic_pathway),
                ("resolution pathway", l.resolution_pathway),
                ("ffm convs", l.ffm_convs),
                ("channel attention", l.attention),
                ("total", l.total),
            ] {
                println!("{name:<20} {n}");
            }
            let inc = attention_increment(&cfg);
            println!("attention increment {inc} ({}M)", format_millions_delta(inc));
        }
    }
    Ok(())
}

fn fuse(cli: &Cli, a: &FuseArgs) -> Result<()> {
    let categories = match &a.categories {
        Some(p) => {
            let t: CategoryTable = io::read_json(p)?;
            t.validate()?;
            t
        }
        None => CategoryTable::cityscapes(),
    };
    let semantic = io::read_tensor(&a.semantic)?;
    let instances = match &a.instances {
        Some(p) => io::read_instances::<f32>(p)?,
        None => Vec::new(),
    };
    let logits = panoptic_fuse(&semantic, &instances, &categories)?;
    let map = decode_panoptic(&logits, &categories)?;
    let path = out_dir(&cli.out).join("fused.pano");
    io::write_map(&path, &map)?;
    println!(
        "{} panoptic channels ({} instances, {} stuff, unlabel); wrote {}",
        logits.tensor.channels(),
        logits.num_instances(),
        logits.stuff_classes.len(),
        path.display()
    );
    Ok(())
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

#[derive(Serialize)]
struct Scores {
    pq: f64,
    sq: f64,
    rq: f64,
    /// PQ in percent, one decimal, as commonly tabulated.
    pq_percent: f64,
}

impl Scores {
    fn new(pq: f64, sq: f64, rq: f64) -> Self {
        Scores {
            pq: round3(pq),
            sq: round3(sq),
            rq: round3(rq),
            pq_percent: (pq * 1000.0).round() / 10.0,
        }
    }
}

#[derive(Serialize)]
struct ClassEntry {
    #[serde(flatten)]
    scores: Scores,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    isthing: bool,
}

#[derive(Serialize)]
struct GroupEntry {
    #[serde(flatten)]
    scores: Scores,
    n: usize,
}

#[derive(Serialize)]
struct EvalReport {
    images: usize,
    per_class: BTreeMap<u32, ClassEntry>,
    all: GroupEntry,
    things: GroupEntry,
    stuff: GroupEntry,
}

impl EvalReport {
    fn new(images: usize, r: &PqReport) -> Self {
        let group = |s: &sunetkit::metrics::Summary| GroupEntry {
            scores: Scores::new(s.pq, s.sq, s.rq),
            n: s.n,
        };
        EvalReport {
            images,
            per_class: r
                .per_class
                .iter()
                .map(|(&c, q)| {
                    (
                        c,
                        ClassEntry {
                            scores: Scores::new(q.pq, q.sq, q.rq),
                            tp: q.tp,
                            fp: q.fp,
                            fn_: q.fn_,
                            isthing: q.isthing,
                        },
                    )
                })
                .collect(),
            all: group(&r.all),
            things: group(&r.things),
            stuff: group(&r.stuff),
        }
    }
}

/// Pairs of (pred, gt) files: the two paths themselves, or every `*.pano`
/// in the prediction directory with its namesake in the ground-truth one.
fn eval_pairs(pred: &Path, gt: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if !pred.is_dir() {
        return Ok(vec![(pred.to_path_buf(), gt.to_path_buf())]);
    }
    let mut names: Vec<_> = std::fs::read_dir(pred)
        .map_err(|e| Error::Io {
            path: pred.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .filter(|n| Path::new(n).extension().is_some_and(|x| x == "pano"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!("no .pano files in {}", pred.display())));
    }
    Ok(names.into_iter().map(|n| (pred.join(&n), gt.join(&n))).collect())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let pairs = eval_pairs(&a.pred, &a.gt)?;
    let per_image: Vec<Result<PqStats>> =
        par::map_slice(&pairs, |(p, g)| evaluate_maps(&io::read_map(p)?, &io::read_map(g)?));
    let mut total = PqStats::default();
    for s in per_image {
        total.merge(&s?);
    }
    let report = EvalReport::new(pairs.len(), &panoptic_quality(&total));
    for (name, g) in [("all", &report.all), ("things", &report.things), ("stuff", &report.stuff)] {
        println!(
            "{name:<7} PQ {:.3}  SQ {:.3}  RQ {:.3}  ({} classes)",
            g.scores.pq, g.scores.sq, g.scores.rq, g.n
        );
    }
    if let Some(dir) = &cli.out {
        io::write_json(&dir.join("eval.json"), &report)?;
    } else {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Json {
            context: "eval report".into(),
            source: e,
        })?;
        println!("{text}");
    }
    Ok(())
}

//! `sshface` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

mod svg;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use sshface::anchors::{self, ModuleId};
use sshface::config::RunConfig;
use sshface::eval::{self, GroundTruthDB};
use sshface::gradcheck;
use sshface::image::Image;
use sshface::infer::{self, ImageDetections};
use sshface::sshgraph::SshNet;
use sshface::trainer;
use sshface::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sshface", version, about = "Single-stage scale-invariant face detector")]
struct Cli {
    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect faces in every PNG/PPM image under a directory.
    Detect(DetectArgs),
    /// Score a detection file against WIDER-style ground truth.
    Eval(EvalArgs),
    /// Train on the synthetic dataset.
    TrainToy(TrainToyArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Print one module's anchor grid as CSV.
    AnchorsDump(AnchorsDumpArgs),
    /// Render an eval CSV as a standalone SVG precision-recall plot.
    PrPlot(PrPlotArgs),
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON run config; defaults to the built-in one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    min_side: Option<f64>,
    #[arg(long)]
    max_side: Option<f64>,
    /// Use the config's image pyramid instead of one scale.
    #[arg(long)]
    pyramid: bool,
    #[arg(long)]
    nms_threshold: Option<f32>,
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    dets: PathBuf,
    /// Faces absent from this file are treated as ignore regions.
    #[arg(long)]
    subset_gt: Option<PathBuf>,
    #[arg(long)]
    pr_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    iou: f32,
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the effective config, for use with `detect --config`.
    #[arg(long)]
    config_out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    images_per_step: Option<usize>,
    #[arg(long)]
    only_m2: bool,
    #[arg(long)]
    no_fusion: bool,
    /// Print train-set AP per size band after training.
    #[arg(long)]
    report: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

#[derive(Debug, Args)]
struct AnchorsDumpArgs {
    /// Module number, 1 to 3.
    #[arg(long)]
    module: u32,
    /// Feature map size as WxH.
    #[arg(long)]
    feat: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PrPlotArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "Precision-recall")]
    title: String,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<S: AsRef<str>>(argv: &[S]) -> i32 {
    let cli = match Cli::try_parse_from(argv.iter().map(|s| s.as_ref())) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let seed = cli.seed;
    let res = match cli.command {
        Command::Detect(a) => detect(a),
        Command::Eval(a) => evaluate(a),
        Command::TrainToy(a) => train_toy(a, seed),
        Command::Gradcheck(a) => run_gradcheck(a, seed),
        Command::AnchorsDump(a) => anchors_dump(a),
        Command::PrPlot(a) => pr_plot(a),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{f}");
            f.code()
        }
    }
}

fn load_config(path: Option<&Path>, fallback: RunConfig) -> std::result::Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(fallback),
    }
}

fn read(path: &Path) -> std::result::Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn detect(a: DetectArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref(), RunConfig::default())?;
    if let Some(v) = a.min_side {
        cfg.sizes.min_side = v;
    }
    if let Some(v) = a.max_side {
        cfg.sizes.max_side = v;
    }
    if let Some(v) = a.nms_threshold {
        cfg.infer.nms_threshold = v;
    }
    if let Some(v) = a.top_k {
        cfg.infer.top_k = v;
    }
    cfg.validate()?;
    let mut net = SshNet::build(&cfg.backbone, &cfg.anchors, 0)?;
    net.load(&a.weights)?;

    if !a.input.is_dir() {
        return Err(Failure::Runtime(format!("{} is not a directory", a.input.display())));
    }
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in walkdir::WalkDir::new(&a.input).sort_by_file_name() {
        let entry = entry.map_err(|e| Failure::Runtime(e.to_string()))?;
        let p = entry.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if entry.file_type().is_file() && matches!(ext.as_deref(), Some("png" | "ppm")) {
            let rel = p.strip_prefix(&a.input).unwrap_or(p);
            let name = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            files.push((name, p.to_path_buf()));
        }
    }
    files.sort();

    let results: Vec<std::result::Result<ImageDetections, Failure>> = files
        .par_iter()
        .map(|(name, path)| {
            let img = Image::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            let set = if a.pyramid {
                infer::pyramid_detect(&net, &cfg.anchors, &img, &cfg.sizes.pyramid, &cfg.infer)?
            } else {
                infer::detect(&net, &cfg.anchors, &img, cfg.sizes.min_side, cfg.sizes.max_side, &cfg.infer)?
            };
            Ok(ImageDetections {
                image: name.clone(),
                boxes: set.scored_boxes(),
            })
        })
        .collect();
    let dets = results.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
    write(&a.out, &infer::format_detections(&dets))?;
    let total: usize = dets.iter().map(|d| d.boxes.len()).sum();
    println!("{} images, {total} detections", dets.len());
    Ok(())
}

fn load_gt(path: &Path) -> std::result::Result<GroundTruthDB, Failure> {
    let (db, warnings) = GroundTruthDB::parse_wider(&read(path)?)?;
    for w in warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(db)
}

fn evaluate(a: EvalArgs) -> CliResult {
    let mut gt = load_gt(&a.gt)?;
    if let Some(p) = &a.subset_gt {
        gt = gt.with_subset(&load_gt(p)?);
    }
    let dets = infer::parse_detections(&read(&a.dets)?)?;
    let (curve, _) = eval::evaluate(&dets, &gt, a.iou)?;
    let csv = eval::pr_csv(&curve);
    if let Some(p) = &a.pr_out {
        write(p, &csv)?;
    }
    println!("AP,{:.6}", curve.ap);
    Ok(())
}

fn train_toy(a: TrainToyArgs, seed: Option<u64>) -> CliResult {
    let mut cfg = load_config(a.config.as_deref(), RunConfig::toy())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(v) = a.iterations {
        cfg.train.iterations = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = a.images_per_step {
        cfg.train.images_per_step = v;
    }
    if a.only_m2 {
        cfg.backbone.only_m2 = true;
    }
    if a.no_fusion {
        cfg.backbone.use_fusion = false;
    }
    cfg.validate()?;
    if let Some(p) = &a.config_out {
        write(p, &cfg.to_json())?;
    }
    let started = std::time::Instant::now();
    let run = match trainer::train_toy(&cfg) {
        Ok(r) => r,
        Err(abort) => {
            if let Some(p) = &a.trace {
                write(p, &trainer::trace_csv(&abort.trace))?;
            }
            return Err(abort.error.into());
        }
    };
    if let Some(p) = &a.trace {
        write(p, &trainer::trace_csv(&run.trace))?;
    }
    run.net.save(&a.out)?;
    let last = run.trace.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} iterations in {:.1}s, final loss {last:.6}",
        run.trace.len(),
        started.elapsed().as_secs_f64()
    );
    if a.report {
        let rep = trainer::evaluate_toy(&run.net, &cfg.anchors, &run.dataset, &cfg.infer)?;
        println!("AP,{:.6}", rep.ap);
        for b in &rep.bands {
            println!(
                "band {} faces={} ap={:.6} designated_fraction={:.3}",
                b.band.name(),
                b.faces,
                b.ap,
                b.designated_fraction
            );
        }
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs, seed: Option<u64>) -> CliResult {
    if a.instances == 0 {
        return Err(Failure::Config("--instances must be positive".into()));
    }
    let report = gradcheck::run(seed.unwrap_or(0), a.instances);
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn parse_feat(s: &str) -> std::result::Result<(usize, usize), Failure> {
    let bad = || Failure::Config(format!("--feat expects WxH, got `{s}`"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn anchors_dump(a: AnchorsDumpArgs) -> CliResult {
    let cfg = load_config(a.config.as_deref(), RunConfig::default())?;
    let module = ModuleId::from_number(a.module)?;
    let (w, h) = parse_feat(&a.feat)?;
    let set = anchors::generate(&cfg.anchors, module, w, h)?;
    let mut csv = String::from("module,row,col,scale,x1,y1,x2,y2\n");
    for (i, b) in set.boxes.iter().enumerate() {
        let (r, c, k) = set.position(i);
        let [x1, y1, x2, y2] = b.coords();
        csv.push_str(&format!(
            "{},{r},{c},{},{x1},{y1},{x2},{y2}\n",
            module.number(),
            set.scales[k]
        ));
    }
    match &a.out {
        Some(p) => write(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn pr_plot(a: PrPlotArgs) -> CliResult {
    let text = read(&a.csv)?;
    let (points, ap) = svg::parse_pr_csv(&text).map_err(Failure::Runtime)?;
    write(&a.out, &svg::render(&points, ap, &a.title))
}

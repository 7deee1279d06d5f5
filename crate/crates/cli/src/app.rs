//! Argument parsing and subcommand dispatch.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use involute::evalharness::{emit_report, evaluate, read_record, EvalConfig, MetricsRecord};
use involute::extract::{correspondences, mc_mesh, project_points, FieldGrid, DEFAULT_BOUND};
use involute::scansynth::{
    build_dataset, primitive_sources, read_observation, read_ply_points, write_ply_mesh, write_ply_points, Dataset,
    DatasetConfig, Family, Split,
};
use involute::trainer::{load_checkpoint, read_log, train, Mode, TrainConfig, LOG_FILE};
use involute::{Error, Execution};

use crate::checks::quick_checks;
use crate::pipeline::pipeline_smoke;

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nfeatures: ",
    env!("INVOLUTE_FEATURES"),
    "\nprofile: ",
    env!("INVOLUTE_PROFILE"),
    "\ntarget: ",
    env!("INVOLUTE_TARGET"),
);

#[derive(Parser, Debug)]
#[command(name = "involute", version, long_version = LONG_VERSION, about = "Self-supervised point-cloud shape completion")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Global {
    /// Random seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config file for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a partial-scan corpus.
    GenData(GenData),
    /// Train the completion and template networks.
    Train(Train),
    /// Evaluate a checkpoint on a dataset split.
    Eval(Eval),
    /// Complete one partial scan and extract points (and optionally a mesh).
    Extract(Extract),
    /// Dense correspondences between two partial scans.
    Correspond(Correspond),
    /// Plots and an ablation table from evaluated runs.
    Report(Report),
    /// Gradient and geometry oracles; `--full` adds an end-to-end run.
    Selftest(Selftest),
}

#[derive(Args, Debug, Serialize)]
pub struct GenData {
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub train_views: Option<usize>,
    #[arg(long)]
    pub test_views: Option<usize>,
    #[arg(long)]
    pub n_surface: Option<usize>,
    #[arg(long)]
    pub n_gt: Option<usize>,
    /// Desk-scale per-view sample counts.
    #[arg(long)]
    pub desk: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct Train {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l1: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub l3: Option<f64>,
    #[arg(long)]
    pub l4: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Desk-scale network and point sizes.
    #[arg(long)]
    pub desk: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct Eval {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the dataset the checkpoint was trained on.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub n_points: Option<usize>,
    #[arg(long)]
    pub corr_pairs: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct Extract {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Partial scan: `.pudf` observation or `.ply` point cloud.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub n_points: Option<usize>,
    /// Also run marching cubes on the eps level set.
    #[arg(long)]
    pub mesh: bool,
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0.01)]
    pub eps: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct Correspond {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Query shape (`.pudf` or `.ply`).
    #[arg(long)]
    pub source: PathBuf,
    /// Target shape (`.pudf` or `.ply`).
    #[arg(long)]
    pub target: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct Report {
    /// Run directories holding `metrics.json` (and optionally `loss_log.csv`).
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct Selftest {
    #[arg(long)]
    pub full: bool,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, configs or input files (exit 1).
    Invalid(String),
    /// Anything that went wrong while running (exit 2).
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Validation(_) | Error::Format { .. } | Error::Json(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

/// Parses `argv` and runs the subcommand; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn execution(g: &Global) -> Outcome {
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(format!("--threads: {e}")))?;
    }
    Ok(())
}

fn exec_of(g: &Global) -> Execution {
    if g.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn require_out(g: &Global) -> std::result::Result<PathBuf, Failure> {
    g.out.clone().ok_or_else(|| invalid("--out is required for this subcommand"))
}

/// Missing inputs are caller errors; the message names the flag.
fn must_exist(flag: &str, p: &Path) -> Outcome {
    if p.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{flag} {}: no such file or directory", p.display())))
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> std::result::Result<T, Failure> {
    must_exist("--config", path)?;
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("--config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("--config {}: {e}", path.display())))
}

fn mkdir(p: &Path) -> Outcome {
    fs::create_dir_all(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))
}

/// Writes `resolved_config.json` with the exact settings of this run.
fn write_resolved<T: Serialize>(out: &Path, command: &str, config: &T, global: &Global) -> Outcome {
    #[derive(Serialize)]
    struct Resolved<'a, T> {
        command: &'a str,
        version: &'a str,
        global: &'a Global,
        config: &'a T,
    }
    mkdir(out)?;
    let r = Resolved {
        command,
        version: env!("CARGO_PKG_VERSION"),
        global,
        config,
    };
    let p = out.join("resolved_config.json");
    let text = serde_json::to_string_pretty(&r).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(&p, text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))
}

fn dispatch(cli: Cli) -> Outcome {
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    execution(&cli.global)?;
    let g = cli.global;
    match cli.command {
        Command::GenData(a) => gen_data(&g, a),
        Command::Train(a) => train_cmd(&g, a),
        Command::Eval(a) => eval_cmd(&g, a),
        Command::Extract(a) => extract_cmd(&g, a),
        Command::Correspond(a) => correspond_cmd(&g, a),
        Command::Report(a) => report_cmd(&g, a),
        Command::Selftest(a) => selftest_cmd(&g, a),
    }
}

fn gen_data(g: &Global, a: GenData) -> Outcome {
    let out = require_out(g)?;
    let mut cfg: DatasetConfig = match &g.config {
        Some(p) => read_config(p)?,
        None if a.desk => DatasetConfig::desk(),
        None => DatasetConfig::default(),
    };
    if let Some(v) = a.family {
        cfg.family = v;
    }
    if let Some(v) = a.instances {
        cfg.instances = v;
    }
    if let Some(v) = a.views {
        cfg.views = v;
    }
    if let Some(v) = a.train_views {
        cfg.train_views = v;
    }
    if let Some(v) = a.test_views {
        cfg.test_views = v;
    }
    if let Some(v) = a.n_surface {
        cfg.n_surface = v;
    }
    if let Some(v) = a.n_gt {
        cfg.n_gt = v;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    write_resolved(&out, "gen-data", &cfg, g)?;
    let t = Instant::now();
    let m = build_dataset(&primitive_sources(&cfg), &cfg, &out, exec_of(g))?;
    let files: usize = m.instances.iter().map(|i| i.views.len()).sum();
    println!(
        "wrote {} instances, {files} observation files to {} in {:.1}s",
        m.instances.len(),
        out.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn train_cmd(g: &Global, a: Train) -> Outcome {
    let out = require_out(g)?;
    let mut cfg: TrainConfig = match &g.config {
        Some(p) => read_config(p)?,
        None if a.desk => TrainConfig::desk(),
        None => TrainConfig::default(),
    };
    if let Some(v) = a.dataset {
        cfg.dataset = v;
    }
    if let Some(v) = a.mode {
        cfg.mode = v;
    }
    if let Some(v) = a.iterations {
        cfg.max_iterations = Some(v);
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.l1 {
        cfg.completion.l1 = v;
    }
    if let Some(v) = a.l2 {
        cfg.completion.l2 = v;
    }
    if let Some(v) = a.l3 {
        cfg.template.l3 = v;
    }
    if let Some(v) = a.l4 {
        cfg.template.l4 = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if cfg.dataset.as_os_str().is_empty() && a.resume.is_none() {
        return Err(invalid("--dataset is required (or set `dataset` in --config)"));
    }
    if let Some(r) = &a.resume {
        must_exist("--resume", r)?;
    } else {
        must_exist("--dataset", &cfg.dataset)?;
    }
    cfg.validate()?;
    write_resolved(&out, "train", &cfg, g)?;
    let t = Instant::now();
    let summary = train(cfg, &out, a.resume.as_deref(), exec_of(g))?;
    println!(
        "trained {} iterations in {:.1}s; checkpoint {}, log {}",
        summary.iterations,
        t.elapsed().as_secs_f64(),
        summary.checkpoint.display(),
        summary.log.display()
    );
    if summary.template_failures > 0 {
        println!("note: {} template extractions failed (previous template kept)", summary.template_failures);
    }
    Ok(())
}

fn parse_split(s: &str) -> std::result::Result<Split, Failure> {
    match s {
        "test" => Ok(Split::Test),
        "train" => Ok(Split::Train),
        _ => Err(invalid(format!("--split must be 'train' or 'test', got '{s}'"))),
    }
}

fn eval_cmd(g: &Global, a: Eval) -> Outcome {
    let out = require_out(g)?;
    let split = parse_split(&a.split)?;
    must_exist("--checkpoint", &a.checkpoint)?;
    if let Some(d) = &a.dataset {
        must_exist("--dataset", d)?;
    }
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let dataset = a.dataset.clone().unwrap_or_else(|| model.cfg.dataset.clone());
    let mut ecfg: EvalConfig = match &g.config {
        Some(p) => read_config(p)?,
        None => EvalConfig::for_model(&model),
    };
    if let Some(v) = a.n_points {
        ecfg.n_points = v;
    }
    if let Some(v) = a.corr_pairs {
        ecfg.corr_pairs = v;
    }
    if let Some(s) = g.seed {
        ecfg.seed = s;
    }
    write_resolved(&out, "eval", &(&a, &ecfg, &dataset), g)?;
    let exec = exec_of(g);
    let ds = Dataset::load(&dataset, exec)?;
    let t = Instant::now();
    let rec = evaluate(&model, &a.checkpoint.display().to_string(), &ds, split, &ecfg, exec)?;
    let log_path = a.checkpoint.parent().map(|p| p.join(LOG_FILE));
    let log = match log_path.filter(|p| p.exists()) {
        Some(p) => Some(read_log(&p)?),
        None => None,
    };
    emit_report(&rec, log.as_deref(), &out)?;
    print_aggregates(&rec);
    println!("evaluated {} shapes in {:.1}s", rec.rows.len(), t.elapsed().as_secs_f64());
    Ok(())
}

fn print_aggregates(rec: &MetricsRecord) {
    let a = &rec.aggregates;
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "{}: F1 {} CD {} Fidelity {} MMD {} Corr {} (CD of X {})",
        rec.mode,
        f(a.f1),
        f(a.cd),
        f(a.fidelity),
        f(a.mmd),
        f(a.corr_l2),
        f(a.cd_x)
    );
}

fn read_points(path: &Path) -> std::result::Result<Vec<involute::geometry::Point3>, Failure> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pudf") => Ok(read_observation(path)?.surface),
        Some("ply") => Ok(read_ply_points(path)?),
        _ => Err(invalid(format!("{}: expected a .pudf or .ply file", path.display()))),
    }
}

fn extract_cmd(g: &Global, a: Extract) -> Outcome {
    let out = require_out(g)?;
    must_exist("--checkpoint", &a.checkpoint)?;
    must_exist("--input", &a.input)?;
    write_resolved(&out, "extract", &a, g)?;
    let exec = exec_of(g);
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let ecfg = EvalConfig::for_model(&model);
    let partial = read_points(&a.input)?;
    let input = involute::geometry::fps_points(&partial, ecfg.n_input.min(partial.len()), 0)?;
    let inf = model.infer(&input)?;
    write_ply_points(&out.join("upsampled.ply"), &inf.x)?;
    write_ply_points(&out.join("coarse.ply"), &inf.xc)?;
    if !model.cfg.mode.has_field() {
        println!("{} has no implicit field; upsampled.ply is the completion", model.cfg.mode);
        return Ok(());
    }
    let field = model.field(inf.code.clone());
    let n = a.n_points.unwrap_or(ecfg.n_points);
    let proj = project_points(&field, n, &ecfg.projection, g.seed.unwrap_or(model.cfg.seed), exec)?;
    write_ply_points(&out.join("points.ply"), &proj.points)?;
    println!("extracted {} points ({} survivors)", proj.points.len(), proj.survivors);
    if a.mesh {
        let grid = FieldGrid::evaluate(&field, a.resolution, DEFAULT_BOUND, 4096, exec)?;
        let mc = mc_mesh(&grid, a.eps, exec)?;
        if mc.empty {
            println!("warning: eps level set is empty; mesh.ply has no faces");
        }
        write_ply_mesh(&out.join("mesh.ply"), &mc.mesh)?;
        println!("mesh: {} vertices, {} triangles", mc.mesh.vertices.len(), mc.mesh.triangles.len());
    }
    Ok(())
}

fn correspond_cmd(g: &Global, a: Correspond) -> Outcome {
    let out = require_out(g)?;
    must_exist("--checkpoint", &a.checkpoint)?;
    must_exist("--source", &a.source)?;
    must_exist("--target", &a.target)?;
    write_resolved(&out, "correspond", &a, g)?;
    let exec = exec_of(g);
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let ecfg = EvalConfig::for_model(&model);
    let prep = |p: &Path| -> std::result::Result<_, Failure> {
        let pts = read_points(p)?;
        let input = involute::geometry::fps_points(&pts, ecfg.n_input.min(pts.len()), 0)?;
        Ok((pts, model.infer(&input)?.code))
    };
    let (query, ca) = prep(&a.source)?;
    let (target, cb) = prep(&a.target)?;
    let m = correspondences(|p, c| model.warp(p, c), &query, &ca, &target, &cb, exec)?;
    let mut csv = String::from("qx,qy,qz,mx,my,mz\n");
    for (q, t) in query.iter().zip(&m) {
        csv.push_str(&format!("{},{},{},{},{},{}\n", q[0], q[1], q[2], t[0], t[1], t[2]));
    }
    let p = out.join("correspondences.csv");
    fs::write(&p, csv).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    println!("matched {} points -> {}", m.len(), p.display());
    Ok(())
}

fn report_cmd(g: &Global, a: Report) -> Outcome {
    let out = require_out(g)?;
    write_resolved(&out, "report", &a, g)?;
    let mut table = String::from("run,mode,f1,cd,fidelity,mmd,corr_l2,cd_x,rows\n");
    for run in &a.runs {
        must_exist("--run", &run.join("metrics.json"))?;
        let rec = read_record(&run.join("metrics.json"))?;
        let log_path = run.join(LOG_FILE);
        let log = if log_path.exists() { Some(read_log(&log_path)?) } else { None };
        let name = run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| rec.mode.clone());
        emit_report(&rec, log.as_deref(), &out.join(&name))?;
        let a = &rec.aggregates;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        table.push_str(&format!(
            "{name},{},{},{},{},{},{},{},{}\n",
            rec.mode,
            f(a.f1),
            f(a.cd),
            f(a.fidelity),
            f(a.mmd),
            f(a.corr_l2),
            f(a.cd_x),
            a.count
        ));
        print_aggregates(&rec);
    }
    let p = out.join("summary.csv");
    fs::write(&p, table).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    Ok(())
}

fn selftest_cmd(g: &Global, a: Selftest) -> Outcome {
    let seed = g.seed.unwrap_or(0);
    let exec = exec_of(g);
    let t = Instant::now();
    let mut checks = quick_checks(seed, exec);
    let mut hash = None;
    if a.full {
        let tmp;
        let dir = match &g.out {
            Some(o) => o.clone(),
            None => {
                tmp = tempfile::tempdir().map_err(|e| Failure::Runtime(e.to_string()))?;
                tmp.path().to_path_buf()
            }
        };
        let rep = pipeline_smoke(&dir, seed, exec)?;
        checks.extend(rep.checks);
        hash = Some(rep.log_hash);
    }
    for c in &checks {
        println!("{c}");
    }
    if let Some(h) = hash {
        println!("summary hash {h}");
    }
    println!("selftest finished in {:.1}s", t.elapsed().as_secs_f64());
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("failed checks: {}", failed.join(", "))))
    }
}

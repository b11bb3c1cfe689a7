use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ottalk::data::{self, DataSource, Dataset};
use ottalk::eval::{self, Masks};
use ottalk::mesh::{self, MaskLabel, VertexMask};
use ottalk::model;
use ottalk::ot::{self, SwdTarget};
use ottalk::resample;
use ottalk::train::{self, TrainConfig};
use ottalk::{ottk, selftest, Error, Result};

#[derive(Parser, Serialize)]
#[command(name = "ottalk", version, about = "Speech-driven mesh animation with a sliced optimal-transport loss")]
struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
enum Command {
    /// Generate the synthetic talking-sphere dataset.
    SynthData(SynthArgs),
    /// Decimate a mesh into a resampling hierarchy.
    BuildHierarchy(HierarchyArgs),
    /// Sliced Wasserstein distance between the varifolds of two meshes.
    Swd(SwdArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Predict a mesh sequence from features.
    Infer(InferArgs),
    /// Masked vertex errors and lip DTW on a dataset.
    Eval(EvalArgs),
    /// Run the built-in oracle checks.
    Selftest,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Icosphere subdivisions of the template.
    #[arg(long, default_value_t = 3)]
    subdiv: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct HierarchyArgs {
    /// Input OBJ.
    #[arg(long, conflicts_with = "vertices", required_unless_present = "vertices")]
    mesh: Option<PathBuf>,
    /// Use a generated open surface with exactly this many vertices.
    #[arg(long)]
    vertices: Option<usize>,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SwdArgs {
    /// Prediction mesh.
    #[arg(long)]
    a: PathBuf,
    /// Target mesh; its centroid and mean edge length define the frame.
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = ot::DEFAULT_PROJECTIONS)]
    projections: usize,
    #[arg(long, default_value_t = ot::DEFAULT_P)]
    p: f64,
    #[arg(long, default_value_t = ot::DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or `synth:seed=1,n=8,frames=16`.
    #[arg(long)]
    data: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Serialize)]
struct InferArgs {
    /// Run directory or model archive.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    template: PathBuf,
    /// `[T_a, F]` OTTK feature tensor.
    #[arg(long)]
    features: PathBuf,
    /// Output frame count (default: one per feature row).
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Val,
    All,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: String,
    /// `lip.txt,face.txt,head.txt`; defaults to the dataset's masks.
    #[arg(long)]
    masks: Option<String>,
    /// Which sequences to score; train/val need the run's split.json.
    #[arg(long, value_enum, default_value_t = Split::Val)]
    split: Split,
    /// Score the untrained initialization stored with the run instead.
    #[arg(long)]
    initial: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    flags: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    version: &'static str,
    inputs: Vec<String>,
    outputs: Vec<String>,
    duration_s: f64,
}

const RUN_MANIFEST: &str = "run.json";
const SPLIT_FILE: &str = "split.json";
const CONFIG_ECHO: &str = "config.json";
const HISTORY_FILE: &str = "history.csv";
const STEPS_FILE: &str = "steps.csv";

struct Ctx {
    cli_seed: u64,
    args: Vec<String>,
    flags: serde_json::Value,
    start: Instant,
}

impl Ctx {
    fn write_manifest(&self, dir: &Path, command: &str, seeds: BTreeMap<String, u64>, inputs: Vec<String>, outputs: Vec<String>) -> Result<()> {
        let m = RunManifest {
            command: command.into(),
            args: self.args.clone(),
            flags: self.flags.clone(),
            seeds,
            version: env!("CARGO_PKG_VERSION"),
            inputs,
            outputs,
            duration_s: self.start.elapsed().as_secs_f64(),
        };
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([("seed".to_string(), self.cli_seed)])
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{} does not exist", path.display())))
    }
}

fn load_data(spec: &str) -> Result<Dataset> {
    let source = DataSource::parse(spec)?;
    if let DataSource::Dir(dir) = &source {
        require(&dir.join(data::DATASET_MANIFEST))?;
    }
    source.load()
}

fn synth_data(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let mut cfg = train::SynthConfig::new(ctx.cli_seed, a.sequences, a.frames);
    cfg.fps = a.fps;
    cfg.subdivisions = a.subdiv;
    let d: Dataset = train::synth_dataset(&cfg)?.into();
    let manifest = data::save_dataset(&d, &a.out)?;
    ctx.write_manifest(&a.out, "synth-data", ctx.seeds(), vec![], vec![a.out.display().to_string()])?;
    print_json(&manifest)
}

fn build_hierarchy(ctx: &Ctx, a: &HierarchyArgs) -> Result<()> {
    let (m, input) = match (&a.mesh, a.vertices) {
        (Some(p), _) => {
            require(p)?;
            (mesh::load_obj(p)?, p.display().to_string())
        }
        (None, Some(n)) => (mesh::surface_with_vertex_count(n)?, format!("generated:{n}")),
        (None, None) => return Err(invalid("--mesh or --vertices is required")),
    };
    let h = resample::build_hierarchy(&m, a.levels, ctx.cli_seed)?;
    let sizes = h.sizes();
    if let Some(out) = &a.out {
        resample::save_hierarchy(&h, out)?;
        ctx.write_manifest(out, "build-hierarchy", ctx.seeds(), vec![input], vec![out.display().to_string()])?;
    }
    print_json(&serde_json::json!({ "sizes": sizes }))
}

fn swd(ctx: &Ctx, a: &SwdArgs) -> Result<()> {
    require(&a.a)?;
    require(&a.b)?;
    let (ma, mb) = (mesh::load_obj(&a.a)?, mesh::load_obj(&a.b)?);
    let target = SwdTarget::new(&mb, a.gamma)?;
    let mu = ot::mesh_to_varifold_in(&ma, a.gamma, target.frame())?;
    let proj = ot::sample_projections(ot::VARIFOLD_DIM, a.projections, ottalk::seed::derive(ctx.cli_seed, "projections", 0))?;
    let est = ot::sliced_wasserstein(&mu, target.measure(), a.p, &proj)?;
    let report = serde_json::json!({
        "value": est.value,
        "std_error": est.std_error,
        "projections": a.projections,
        "p": a.p,
        "gamma": a.gamma,
    });
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("swd.json"), serde_json::to_string_pretty(&report)?)?;
        let inputs = vec![a.a.display().to_string(), a.b.display().to_string()];
        ctx.write_manifest(out, "swd", ctx.seeds(), inputs, vec![out.join("swd.json").display().to_string()])?;
    }
    print_json(&report)
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => {
            require(p)?;
            serde_json::from_str(&std::fs::read_to_string(p)?)?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = ctx.cli_seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let d = load_data(&a.data)?;
    let h = Arc::new(resample::build_hierarchy(&d.template, cfg.model.levels, ottalk::seed::derive(cfg.seed, "hierarchy", 0))?);
    let outcome = train::train(&cfg, &d.samples, h)?;

    std::fs::create_dir_all(&a.out)?;
    let seeds = BTreeMap::from([
        ("seed".to_string(), cfg.seed),
        ("init".to_string(), ottalk::seed::derive(cfg.seed, "init", 0)),
        ("pca".to_string(), ottalk::seed::derive(cfg.seed, "pca", 0)),
    ]);
    model::save_model(&outcome.best, &a.out.join("model"), cfg.gamma, seeds.clone())?;
    model::save_model(&outcome.initial, &a.out.join("initial"), cfg.gamma, seeds.clone())?;
    train::write_history(&a.out.join(HISTORY_FILE), &outcome.history)?;
    let steps: String = std::iter::once("step,loss".to_string())
        .chain(outcome.step_losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")))
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(a.out.join(STEPS_FILE), steps + "\n")?;
    std::fs::write(a.out.join(CONFIG_ECHO), serde_json::to_string_pretty(&cfg)?)?;
    let split = serde_json::json!({ "train": outcome.train_indices, "val": outcome.val_indices });
    std::fs::write(a.out.join(SPLIT_FILE), serde_json::to_string_pretty(&split)?)?;
    let outputs = ["model", "initial", HISTORY_FILE, STEPS_FILE, CONFIG_ECHO, SPLIT_FILE]
        .iter()
        .map(|f| a.out.join(f).display().to_string())
        .collect();
    ctx.write_manifest(&a.out, "train", seeds, vec![a.data.clone()], outputs)?;
    let last = outcome.history.last().copied();
    print_json(&serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "steps": outcome.step_losses.len(),
        "last": last,
    }))
}

/// Accepts either a run directory (with `model/`) or an archive.
fn model_dir(path: &Path, initial: bool) -> Result<PathBuf> {
    let sub = if initial { "initial" } else { "model" };
    let dir = if path.join(sub).join(model::MODEL_MANIFEST).exists() {
        path.join(sub)
    } else {
        path.to_path_buf()
    };
    require(&dir.join(model::MODEL_MANIFEST))?;
    Ok(dir)
}

fn infer(ctx: &Ctx, a: &InferArgs) -> Result<()> {
    let (m, _) = model::load_model(&model_dir(&a.model, false)?)?;
    require(&a.template)?;
    require(&a.features)?;
    let template = mesh::load_obj(&a.template)?;
    let features = ottk::read(&a.features)?;
    let (t_a, _) = features.dims2()?;
    let frames = a.frames.unwrap_or(t_a);
    if frames == 0 {
        return Err(invalid("--frames must be positive"));
    }
    let t0 = Instant::now();
    let pred = m.predict(&template, &features, frames)?;
    let ms_per_frame = t0.elapsed().as_secs_f64() * 1e3 / frames as f64;
    std::fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::with_capacity(frames);
    for j in 0..frames {
        let path = a.out.join(format!("frame_{j:04}.obj"));
        mesh::save_obj(&model::frame_mesh(&template, &pred, j)?, &path)?;
        outputs.push(path.display().to_string());
    }
    let inputs = vec![a.model.display().to_string(), a.template.display().to_string(), a.features.display().to_string()];
    ctx.write_manifest(&a.out, "infer", ctx.seeds(), inputs, outputs)?;
    print_json(&serde_json::json!({ "frames": frames, "ms_per_frame": ms_per_frame }))
}

fn eval_cmd(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let (m, _) = model::load_model(&model_dir(&a.model, a.initial)?)?;
    let d = load_data(&a.data)?;
    let n = d.template.n_vertices();
    let (lip, face, head) = match &a.masks {
        Some(list) => {
            let files: Vec<&str> = list.split(',').collect();
            let [l, f, h] = files.as_slice() else {
                return Err(invalid("--masks expects lip,face,head files"));
            };
            let load = |p: &str, label: MaskLabel| -> Result<VertexMask> {
                let m = VertexMask::load(p, n)?;
                if m.label != label {
                    return Err(invalid(format!("{p} holds a {} mask", m.label.as_str())));
                }
                Ok(m)
            };
            (load(l, MaskLabel::Lip)?, load(f, MaskLabel::Face)?, load(h, MaskLabel::Head)?)
        }
        None => (d.lip.clone(), d.face.clone(), d.head.clone()),
    };
    let indices: Vec<usize> = match a.split {
        Split::All => (0..d.samples.len()).collect(),
        split => {
            let path = a.model.join(SPLIT_FILE);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| invalid(format!("{}: {e}; pass --split all for an archive without a split", path.display())))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let key = if matches!(split, Split::Train) { "train" } else { "val" };
            serde_json::from_value(v[key].clone())?
        }
    };
    let samples = indices
        .iter()
        .map(|&i| d.samples.get(i).cloned().ok_or_else(|| invalid(format!("split index {i} outside the dataset"))))
        .collect::<Result<Vec<_>>>()?;
    let report = eval::evaluate(&m, &samples, Masks { lip: &lip, face: &face, head: &head })?;
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
            ctx.write_manifest(parent, "eval", ctx.seeds(), vec![a.model.display().to_string(), a.data.clone()], vec![out.display().to_string()])?;
        }
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    print_json(&report)
}

fn selftest_cmd(ctx: &Ctx) -> Result<bool> {
    let results = selftest::run(ctx.cli_seed);
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    Ok(results.iter().all(|r| r.passed))
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::NonFinite(_) => "non_finite",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Parse { .. } => "parse",
        Error::Mesh(_) => "mesh",
        Error::Decimation { .. } => "decimation",
        Error::Format(_) => "format",
        Error::Topology { .. } => "topology",
        Error::Training { .. } => "training",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("{}", serde_json::json!({ "error": e.to_string(), "kind": "threads" }));
        return ExitCode::FAILURE;
    }
    let ctx = Ctx {
        cli_seed: cli.seed,
        args: std::env::args().collect(),
        flags: serde_json::to_value(&cli).unwrap_or(serde_json::Value::Null),
        start: Instant::now(),
    };
    let result = match &cli.command {
        Command::SynthData(a) => synth_data(&ctx, a).map(|_| true),
        Command::BuildHierarchy(a) => build_hierarchy(&ctx, a).map(|_| true),
        Command::Swd(a) => swd(&ctx, a).map(|_| true),
        Command::Train(a) => train_cmd(&ctx, a).map(|_| true),
        Command::Infer(a) => infer(&ctx, a).map(|_| true),
        Command::Eval(a) => eval_cmd(&ctx, a).map(|_| true),
        Command::Selftest => selftest_cmd(&ctx),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string(), "kind": error_kind(&e) }));
            ExitCode::FAILURE
        }
    }
}

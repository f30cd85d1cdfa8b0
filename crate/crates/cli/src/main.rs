use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boxseg::annotate::{AnnotationSession, LinearMarker};
use boxseg::imgproc::{normalize_rgb, normalize_volume, ImagePlane};
use boxseg::iohub::{self, VolumeContainer};
use boxseg::mask::BinaryMask;
use boxseg::metrics::{self, EvalOptions};
use boxseg::model::{predict, BoundingBox, ModelConfig};
use boxseg::synth::{generate_dataset, generate_tumor_volume, Sample, StyleMix, SynthSpec};
use boxseg::train::{split_dataset, train_split, TrainConfig};
use boxseg::Error;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "boxseg", version, about = "Box-prompted segmentation toolkit")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset, or one tumor volume with --tumor-depth.
    Synth(SynthArgs),
    /// Normalize a volume (MIV1) or image (PNG).
    Preprocess(PreprocessArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Segment one image or slice from a box.
    Infer(InferArgs),
    /// Score a checkpoint (or stored predictions) on a dataset.
    Eval(EvalArgs),
    /// Paired Wilcoxon signed-rank test on two metric CSVs.
    Stats(StatsArgs),
    /// Marker-driven assist over a volume.
    Assist(AssistArgs),
    /// Run the HTTP annotation service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// mixed, ct-like, us-like or rgb-like.
    #[arg(long)]
    style: Option<String>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    tumor_depth: Option<usize>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    /// Also write every normalized slice as PNG.
    #[arg(long)]
    png: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    perturb_max: Option<u32>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG image or MIV1 volume.
    #[arg(long)]
    image: PathBuf,
    /// Slice of a volume input.
    #[arg(long, default_value_t = 0)]
    slice: usize,
    /// x_min,y_min,x_max,y_max in input pixels.
    #[arg(long = "box", value_parser = parse_box)]
    bbox: BoundingBox,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of `<id>.masks.miv` predictions, laid out like a dataset.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    perturb_max: Option<u32>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args, Debug)]
struct AssistArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    /// JSON array of markers.
    #[arg(long)]
    markers: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Defaults to $BOXSEG_CHECKPOINT.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to $BOXSEG_PORT, then 8080.
    #[arg(long)]
    port: Option<u16>,
}

fn parse_box(s: &str) -> Result<BoundingBox, String> {
    let v: Vec<u32> = s
        .split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c, d] => Ok(BoundingBox::new(a, b, c, d)),
        _ => Err("expected x_min,y_min,x_max,y_max".into()),
    }
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
enum Failure {
    Config(String),
    Io(String),
    Format(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 3,
            Failure::Io(_) => 4,
            Failure::Format(_) => 5,
            Failure::Runtime(_) => 6,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::Io(_) => "io",
            Failure::Format(_) => "format",
            Failure::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Format(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Io(_) => Failure::Io(m),
            Error::Format(_) => Failure::Format(m),
            Error::Divergence { .. } | Error::NonFiniteGradient(_) => Failure::Runtime(m),
            _ => Failure::Config(m),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| Failure::Format(format!("{}: {e}", path.display())))
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

/// Everything needed to re-run an invocation and check its artifacts.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    subcommand: String,
    argv: Vec<String>,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<Artifact>,
    seed: u64,
    version: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Artifact {
    path: String,
    sha256: String,
}

struct Run {
    out: PathBuf,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(out: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
        Ok(Self {
            out: out.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let p = self.out.join(name);
        iohub::write_atomic(&p, bytes)?;
        self.outputs.push(p.clone());
        Ok(p)
    }

    /// Records a file some library call already wrote.
    fn track(&mut self, p: PathBuf) {
        self.outputs.push(p);
    }

    fn finish(self, cli: &Cli, name: &str, config: serde_json::Value, inputs: &[&Path]) -> CliResult<()> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for p in &self.outputs {
            outputs.push(Artifact {
                path: p.strip_prefix(&self.out).unwrap_or(p).display().to_string(),
                sha256: hex::encode(Sha256::digest(read(p)?)),
            });
        }
        let manifest = RunManifest {
            subcommand: name.into(),
            argv: std::env::args().skip(1).collect(),
            config,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs,
            seed: cli.seed.unwrap_or(0),
            version: env!("CARGO_PKG_VERSION").into(),
        };
        iohub::write_atomic(&self.out.join("run.json"), &json_bytes(&manifest))?;
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(Failure::Config(e.to_string()));
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    let line = serde_json::json!({ "error": { "kind": f.kind(), "message": f.message() } });
    eprintln!("{line}");
    ExitCode::from(f.code())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Preprocess(a) => preprocess(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Stats(a) => stats(cli, a),
        Command::Assist(a) => assist(cli, a),
        Command::Serve(a) => serve(a),
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> CliResult<()> {
    let mut spec: SynthSpec = match &cli.config {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = &a.style {
        spec.style = serde_json::from_value(serde_json::Value::String(s.clone()))
            .map(StyleMix::Single)
            .or_else(|_| serde_json::from_value(serde_json::Value::String(s.clone())))
            .map_err(|_| Failure::Config(format!("unknown style {s:?}")))?;
    }
    if let Some(n) = a.image_size {
        spec.image_size = n;
    }
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let mut run = Run::new(&cli.out)?;
    let config = match a.tumor_depth {
        Some(depth) => {
            let (vol, truth) = generate_tumor_volume(&spec, depth)?;
            run.write("volume.miv", &iohub::encode_volume(&VolumeContainer::from_volume(&vol)))?;
            run.write("truth.miv", &iohub::encode_volume(&VolumeContainer::from_mask(&truth)))?;
            serde_json::json!({ "spec": spec, "tumor_depth": depth })
        }
        None => {
            let ds = generate_dataset(&spec, a.count)?;
            iohub::save_dataset(&cli.out, &ds)?;
            run.track(cli.out.join(iohub::DATASET_INDEX));
            serde_json::json!({ "spec": spec, "count": a.count })
        }
    };
    run.finish(cli, "synth", config, &[])
}

fn preprocess(cli: &Cli, a: &PreprocessArgs) -> CliResult<()> {
    let mut run = Run::new(&cli.out)?;
    let bytes = read(&a.input)?;
    let degenerate = if bytes.starts_with(iohub::VOLUME_MAGIC) {
        let vol = iohub::decode_volume(&bytes).map_err(Error::from)?.to_volume()?;
        let n = normalize_volume(&vol)?;
        run.write("normalized.miv", &iohub::encode_volume(&VolumeContainer::from_volume(&n.output)))?;
        if a.png {
            for k in 0..n.output.depth() {
                run.write(&format!("slice{k:04}.png"), &iohub::encode_png(&n.output.slice(k)?)?)?;
            }
        }
        n.degenerate
    } else {
        let img = iohub::decode_png(&bytes)?;
        let n = normalize_rgb(&img.to_rgb())?;
        run.write("normalized.png", &iohub::encode_png(&n.output)?)?;
        n.degenerate
    };
    run.finish(cli, "preprocess", serde_json::json!({ "png": a.png, "degenerate": degenerate }), &[&a.input])
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
}

fn train(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let mut cfg: TrainFile = match &cli.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.perturb_max {
        cfg.train.perturb_max = v;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let ds = iohub::load_dataset(&a.data)?;
    if ds.spec.image_size != cfg.model.image_size {
        return Err(Failure::Config(format!(
            "dataset images are {} px, model expects {}",
            ds.spec.image_size, cfg.model.image_size
        )));
    }
    let split = split_dataset(&ds.group_ids(), cfg.train.fractions, cfg.train.seed)?;
    let outcome = train_split(&ds, &split.train, &split.tune, &cfg.model, &cfg.train, |log| {
        eprintln!("{}", serde_json::to_string(log).expect("log serializes"));
    })?;
    let mut run = Run::new(&cli.out)?;
    run.write("checkpoint.bsck", &iohub::encode_checkpoint(&outcome.params, &cfg.model))?;
    run.write("train_log.json", &json_bytes(&outcome.log))?;
    run.write("split.json", &json_bytes(&split))?;
    run.finish(cli, "train", serde_json::to_value(&cfg).expect("config serializes"), &[&a.data])
}

/// Model-ready 3-channel plane from a PNG image or a volume slice, plus the
/// source size.
fn load_plane(path: &Path, slice: usize, cfg: &ModelConfig) -> CliResult<(ImagePlane, usize, usize)> {
    let bytes = read(path)?;
    let plane = if bytes.starts_with(iohub::VOLUME_MAGIC) {
        let vol = iohub::decode_volume(&bytes).map_err(Error::from)?.to_volume()?;
        normalize_volume(&vol)?.output.slice(slice)?.to_rgb()
    } else {
        normalize_rgb(&iohub::decode_png(&bytes)?.to_rgb())?.output
    };
    let (w, h) = (plane.width(), plane.height());
    Ok((boxseg::imgproc::resize_image(&plane, cfg.image_size, cfg.image_size)?, w, h))
}

#[derive(Debug, Serialize)]
struct Prediction {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    confidence: f32,
    foreground: usize,
    mask: iohub::RleMask,
}

fn infer(cli: &Cli, a: &InferArgs) -> CliResult<()> {
    let (cfg, params) = iohub::load_checkpoint(&a.checkpoint)?;
    let (plane, w, h) = load_plane(&a.image, a.slice, &cfg)?;
    a.bbox.validate(w, h)?;
    let s = cfg.image_size;
    let out = predict(&plane, &a.bbox.rescale((w, h), (s, s)), &params, &cfg)?;
    let mask = boxseg::imgproc::resize_mask(&out.mask, w, h)?;
    let mut run = Run::new(&cli.out)?;
    run.write("mask.png", &iohub::encode_png(&iohub::mask_to_plane(&mask)?)?)?;
    let pred = Prediction {
        bbox: a.bbox,
        confidence: out.confidence,
        foreground: mask.count(),
        mask: iohub::rle_encode(&mask),
    };
    run.write("prediction.json", &json_bytes(&pred))?;
    run.finish(
        cli,
        "infer",
        serde_json::json!({ "model": cfg, "slice": a.slice, "box": a.bbox }),
        &[&a.checkpoint, &a.image],
    )
}

fn eval(cli: &Cli, a: &EvalArgs) -> CliResult<()> {
    let mut opts: EvalOptions = match &cli.config {
        Some(p) => read_json(p)?,
        None => EvalOptions::default(),
    };
    if let Some(t) = a.tolerance {
        opts.tolerance = t;
    }
    if let Some(p) = a.perturb_max {
        opts.perturb_max = p;
    }
    if let Some(s) = cli.seed {
        opts.seed = s;
    }
    if !(opts.tolerance >= 0.0) {
        return Err(Failure::Config(format!("tolerance {} must be >= 0", opts.tolerance)));
    }
    let ds = iohub::load_dataset(&a.data)?;
    let samples: Vec<&Sample> = ds.samples.iter().collect();
    let mut inputs: Vec<&Path> = vec![&a.data];
    let report = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            inputs.push(ckpt);
            let (cfg, params) = iohub::load_checkpoint(ckpt)?;
            metrics::evaluate_run(&samples, &params, &cfg, &opts)?
        }
        (None, Some(dir)) => {
            inputs.push(dir);
            let preds = samples
                .iter()
                .map(|s| iohub::read_mask_stack(&dir.join(format!("{}.masks.miv", s.id)), s.masks.len()))
                .collect::<boxseg::Result<Vec<Vec<BinaryMask>>>>()?;
            let index: std::collections::HashMap<&str, usize> =
                samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
            metrics::evaluate_with(&samples, opts.tolerance, |c| {
                Ok(preds[index[c.sample.id.as_str()]][c.object].clone())
            })?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let mut csv = Vec::new();
    metrics::write_csv(&report.records, &mut csv)?;
    let mut run = Run::new(&cli.out)?;
    run.write("metrics.csv", &csv)?;
    run.write("summary.json", &json_bytes(&report.summary))?;
    run.finish(cli, "eval", serde_json::to_value(&opts).expect("options serialize"), &inputs)
}

fn stats(cli: &Cli, a: &StatsArgs) -> CliResult<()> {
    let load = |p: &Path| -> CliResult<Vec<metrics::MetricRecord>> { Ok(metrics::read_csv(&read(p)?[..])?) };
    let result = metrics::compare_runs(&load(&a.a)?, &load(&a.b)?)?;
    let body = json_bytes(&result);
    print!("{}", String::from_utf8_lossy(&body));
    let mut run = Run::new(&cli.out)?;
    run.write("stats.json", &body)?;
    run.finish(cli, "stats", serde_json::json!({ "test": "wilcoxon-signed-rank", "sides": 2 }), &[&a.a, &a.b])
}

fn assist(cli: &Cli, a: &AssistArgs) -> CliResult<()> {
    let (cfg, params) = iohub::load_checkpoint(&a.checkpoint)?;
    let raw = iohub::decode_volume(&read(&a.volume)?).map_err(Error::from)?.to_volume()?;
    let volume = normalize_volume(&raw)?.output;
    let markers: Vec<LinearMarker> = read_json(&a.markers)?;
    let mut session = AnnotationSession::new(&volume);
    session.add_markers(&markers, 0.0)?;
    session.run_assist(&volume, &params, &cfg)?;
    let (manifest, masks) = session.export();
    let mut run = Run::new(&cli.out)?;
    run.write("masks.miv", &masks)?;
    run.write("session.json", &json_bytes(&manifest))?;
    run.finish(
        cli,
        "assist",
        serde_json::json!({ "model": cfg, "markers": markers.len() }),
        &[&a.checkpoint, &a.volume, &a.markers],
    )
}

fn serve(a: &ServeArgs) -> CliResult<()> {
    let env = boxseg_service::env_config();
    let ckpt = match (&a.checkpoint, &env) {
        (Some(p), _) => p.clone(),
        (None, Ok((p, _))) => p.clone(),
        (None, Err(e)) => return Err(Failure::Config(e.clone())),
    };
    let port = a.port.or_else(|| std::env::var(boxseg_service::ENV_PORT).ok()?.parse().ok());
    let port = port.unwrap_or(boxseg_service::DEFAULT_PORT);
    let state = boxseg_service::AppState::from_checkpoint(&ckpt)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    eprintln!("listening on 0.0.0.0:{port}, checkpoint {}", state.checkpoint_hash());
    rt.block_on(boxseg_service::serve(std::sync::Arc::new(state), ([0, 0, 0, 0], port).into()))
        .map_err(|e| Failure::Io(e.to_string()))
}

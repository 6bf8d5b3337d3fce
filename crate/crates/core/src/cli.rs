//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 when validation or a pipeline step fails, 2 on
//! usage errors. `--config FILE` supplies flag values from a JSON object keyed
//! by long flag name; flags given on the command line take precedence.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dataset::{self, EmbeddingDataset, Split};
use crate::disentangle::{self, HeadPair, TrainConfig};
use crate::error::Error;
use crate::features::{gather, FeatureSpace, Source};
use crate::metrics;
use crate::probe::{self, DEFAULT_LAMBDA};
use crate::synth::{self, SynthConfig};
use crate::tsne::{self, PointInfo, TsneConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "clusterprobe", version, about, args_override_self = true)]
pub struct Cli {
    /// Random seed used by every subcommand.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Bound on worker threads for data-parallel steps.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
    /// JSON file of flag values; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use stored embeddings as-is instead of L2-normalizing them on load.
    #[arg(long, global = true)]
    no_normalize: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a dataset directory and check every invariant.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a synthetic dataset with a planted style direction.
    Synth(SynthArgs),
    /// Train the style and semantics heads.
    Train(TrainArgs),
    /// Fit a linear real/fake probe.
    Probe(ProbeArgs),
    /// Compute all metrics on a split and write a JSON report.
    Eval(EvalArgs),
    /// Project a split to 2-D with exact t-SNE.
    Tsne(TsneArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    clusters: usize,
    #[arg(long, default_value_t = 5)]
    fakes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.5)]
    style_offset: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    caption_noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    #[arg(long, default_value_t = 1024)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 0.01)]
    wd: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "raw")]
    space: FeatureSpace,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Select λ by validation accuracy over 1e-6..1e2.
    #[arg(long)]
    sweep: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "validation")]
    split: Split,
    #[arg(long, default_value = "raw")]
    space: FeatureSpace,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    probe: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct TsneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "validation")]
    split: Split,
    #[arg(long, default_value = "raw")]
    space: FeatureSpace,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Keep a seeded random subset of this many images.
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 200.0)]
    learning_rate: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write an SVG scatter plot.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Help,
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match parse_with_config(&argv) {
        Ok(cli) => cli,
        Err(CliError::Help) => return EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("{msg}");
            return EXIT_USAGE;
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(&cli) {
        Ok(()) | Err(CliError::Help) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Run(e)) => {
            if matches!(e, Error::Validation(_)) {
                eprintln!("validation failed: {e}");
            } else {
                eprintln!("error: {e}");
            }
            EXIT_FAILURE
        }
    }
}

fn parse_with_config(argv: &[OsString]) -> CliResult<Cli> {
    let Some((path, sub)) = prescan(argv) else {
        return parse(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Run(Error::io(&path, e)))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Run(Error::Json(e)))?;
    let Value::Object(map) = value else {
        return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display())));
    };
    let mut injected = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            Value::Bool(true) => injected.push(OsString::from(flag)),
            Value::Bool(false) | Value::Null => {}
            Value::String(s) => {
                injected.push(OsString::from(flag));
                injected.push(OsString::from(s));
            }
            Value::Number(n) => {
                injected.push(OsString::from(flag));
                injected.push(OsString::from(n.to_string()));
            }
            other => {
                return Err(CliError::Usage(format!("config key `{key}`: unsupported value {other}")));
            }
        }
    }
    // file values go right after the subcommand so later command-line flags win
    let mut merged: Vec<OsString> = argv[..=sub].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&argv[sub + 1..]);
    parse(&merged)
}

fn parse(argv: &[OsString]) -> CliResult<Cli> {
    Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            let _ = e.print();
            CliError::Help
        }
        _ => CliError::Usage(e.render().to_string()),
    })
}

const SUBCOMMANDS: [&str; 6] = ["validate", "synth", "train", "probe", "eval", "tsne"];

/// Finds `--config` and the subcommand index without a full parse, so that
/// required flags may come from the file.
fn prescan(argv: &[OsString]) -> Option<(PathBuf, usize)> {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if s == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(v) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if sub.is_none() && SUBCOMMANDS.contains(&s.as_ref()) {
            sub = Some(i);
        } else if sub.is_none() && matches!(s.as_ref(), "--seed" | "--threads") {
            i += 1;
        }
        i += 1;
    }
    Some((config?, sub?))
}

fn log(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Validate { data } => {
            let ds = dataset::load_dataset(data)?;
            log(cli, summary(&ds));
            println!("ok");
            Ok(())
        }
        Command::Synth(a) => synth_cmd(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Probe(a) => probe_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Tsne(a) => tsne_cmd(cli, a),
    }
}

fn summary(ds: &EmbeddingDataset) -> String {
    format!(
        "dim {} | images {} | texts {} | train {} / validation {} / test {} clusters | normalized {}",
        ds.dim(),
        ds.images().rows(),
        ds.texts().rows(),
        ds.split(Split::Train).len(),
        ds.split(Split::Validation).len(),
        ds.split(Split::Test).len(),
        ds.is_normalized()
    )
}

fn load(cli: &Cli, dir: &Path) -> CliResult<EmbeddingDataset> {
    let ds = dataset::load_dataset(dir)?;
    if cli.no_normalize || ds.is_normalized() {
        Ok(ds)
    } else {
        Ok(dataset::l2_normalize(&ds)?)
    }
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn dataset_hashes(dir: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(dir.join(dataset::MANIFEST_FILE))
        .map_err(|e| Error::io(dir.join(dataset::MANIFEST_FILE), e))?;
    let manifest: dataset::DatasetManifest = serde_json::from_str(&text).map_err(Error::Json)?;
    Ok(json!({
        "manifest": sha256_file(&dir.join(dataset::MANIFEST_FILE))?,
        "images": sha256_file(&dir.join(&manifest.image_file))?,
        "texts": sha256_file(&dir.join(&manifest.text_file))?,
    }))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::Json)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn read_sidecar(path: &Path) -> Value {
    fs::read_to_string(sidecar(path))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or(Value::Null)
}

fn heads_for(space: FeatureSpace, model: Option<&PathBuf>) -> CliResult<Option<HeadPair>> {
    match (space, model) {
        (FeatureSpace::Raw, _) => Ok(None),
        (_, Some(p)) => Ok(Some(disentangle::load_heads(p)?)),
        (s, None) => Err(CliError::Usage(format!("--space {s} requires --model"))),
    }
}

fn synth_cmd(cli: &Cli, a: &SynthArgs) -> CliResult<()> {
    let config = SynthConfig {
        clusters: a.clusters,
        fakes: a.fakes,
        dim: a.dim,
        style_offset: a.style_offset,
        semantic_noise: a.noise,
        caption_noise: a.caption_noise,
        seed: cli.seed,
    };
    let ds = synth::generate_synthetic(&config)?;
    dataset::save_dataset(&ds, &a.out)?;
    write_json(&a.out.join("synth_config.json"), &serde_json::to_value(&config).map_err(Error::Json)?)?;
    log(cli, summary(&ds));
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let ds = load(cli, &a.data)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        weight_decay: a.wd,
        temperature: a.tau,
        seed: cli.seed,
    };
    let trained = disentangle::train_disentangle(&ds, &config)?;
    for rec in &trained.history.epochs {
        log(
            cli,
            format!(
                "epoch {:>3}  L_T {:>12.4}  L_S {:>12.4}",
                rec.epoch,
                rec.mean_l_t(),
                rec.mean_l_s()
            ),
        );
    }
    disentangle::save_heads(&trained.heads, &a.out)?;
    write_json(
        &sidecar(&a.out),
        &json!({
            "train": config,
            "normalized_on_load": !cli.no_normalize,
            "data": dataset_hashes(&a.data)?,
            "history": trained.history,
        }),
    )
}

fn probe_cmd(cli: &Cli, a: &ProbeArgs) -> CliResult<()> {
    let ds = load(cli, &a.data)?;
    let heads = heads_for(a.space, a.model.as_ref())?;
    let model = if a.sweep {
        probe::fit_probe_sweep(&ds, a.space, heads.as_ref(), cli.seed)?
    } else {
        probe::fit_probe(&ds, a.space, heads.as_ref(), a.lambda, cli.seed)?
    };
    probe::save_probe(&model, &a.out)?;
    let model_hash = match (&a.model, a.space) {
        (Some(p), s) if s != FeatureSpace::Raw => Value::String(sha256_file(p)?),
        _ => Value::Null,
    };
    log(cli, format!("probe fit in space {} with lambda {:?}", model.space, model.lambda));
    write_json(
        &sidecar(&a.out),
        &json!({
            "space": model.space,
            "lambda": model.lambda,
            "sweep": a.sweep,
            "seed": cli.seed,
            "grad_tolerance": probe::GRAD_TOLERANCE,
            "max_iterations": probe::MAX_ITERATIONS,
            "normalized_on_load": !cli.no_normalize,
            "data": dataset_hashes(&a.data)?,
            "model": model_hash,
        }),
    )
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> CliResult<()> {
    let ds = load(cli, &a.data)?;
    let heads = heads_for(a.space, a.model.as_ref())?;
    let probe_model = probe::load_probe(&a.probe)?;
    if probe_model.space != a.space {
        return Err(CliError::Usage(format!(
            "probe was fit in space `{}`, not `{}`",
            probe_model.space, a.space
        )));
    }
    let mut report = metrics::evaluate(&ds, a.split, a.space, heads.as_ref(), Some(&probe_model))?;
    let (model_hash, train_echo) = match (&a.model, a.space) {
        (Some(p), s) if s != FeatureSpace::Raw => {
            let side = read_sidecar(p);
            (Value::String(sha256_file(p)?), side.get("train").cloned().unwrap_or(Value::Null))
        }
        _ => (Value::Null, Value::Null),
    };
    let probe_side = read_sidecar(&a.probe);
    report.config = json!({
        "distance": "cosine",
        "seed": cli.seed,
        "normalized_on_load": !cli.no_normalize,
        "tau": train_echo.get("temperature").cloned().unwrap_or(Value::Null),
        "lambda": probe_side.get("lambda").cloned().unwrap_or(Value::Null),
        "train": train_echo,
        "probe": probe_side,
        "inputs": {
            "data": dataset_hashes(&a.data)?,
            "model": model_hash,
            "probe": sha256_file(&a.probe)?,
        },
    });
    let value = serde_json::to_value(&report).map_err(Error::Json)?;
    write_json(&a.report, &value)?;
    if let Some(acc) = report.overall_accuracy {
        log(cli, format!("{} {}: overall accuracy {:.2}%", a.split, a.space, acc.percent));
    }
    log(
        cli,
        format!(
            "min dist {:.2}%  max dist {:.2}%",
            report.min_dist_accuracy.percent, report.max_dist_accuracy.percent
        ),
    );
    Ok(())
}

fn tsne_cmd(cli: &Cli, a: &TsneArgs) -> CliResult<()> {
    let ds = load(cli, &a.data)?;
    let heads = heads_for(a.space, a.model.as_ref())?;
    let clusters = ds.split(a.split);
    let mut points: Vec<PointInfo> = clusters
        .iter()
        .flat_map(|c| {
            c.members().map(|(row, label)| PointInfo {
                row,
                label,
                cluster_id: c.cluster_id.clone(),
            })
        })
        .collect();
    if let Some(m) = a.subsample {
        if m < points.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
            let mut keep = rand::seq::index::sample(&mut rng, points.len(), m).into_vec();
            keep.sort_unstable();
            points = keep.into_iter().map(|i| points[i].clone()).collect();
        }
    }
    let rows: Vec<usize> = points.iter().map(|p| p.row).collect();
    let x = gather(&ds, Source::Images, &rows, a.space, heads.as_ref(), true)?;
    let config = TsneConfig {
        perplexity: a.perplexity,
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        seed: cli.seed,
        ..Default::default()
    };
    let result = tsne::tsne_embed(&x, &config)?;
    let comment = format!("tsne {} split={} space={}", config.describe(), a.split, a.space);
    let file = fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    tsne::write_csv(std::io::BufWriter::new(file), &comment, &points, &result.coords)?;
    if let Some(svg) = &a.svg {
        fs::write(svg, tsne::render_svg(&points, &result.coords)).map_err(|e| Error::io(svg, e))?;
    }
    if let Some((it, kl)) = result.kl_history.last() {
        log(cli, format!("t-SNE: {} points, KL {kl:.4} at iteration {it}", points.len()));
    }
    Ok(())
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use realspike::analysis::{capacity_bound, spike_stats, write_channel_csv};
use realspike::data_io::{load_idx, load_model, save_model, IdxDataset};
use realspike::network::{evaluate, train_with, OptimizerKind, RunHeader, Schedule, Trace, TrainConfig};
use realspike::reparam::{cost_report, fold_network, verify_equivalence};
use realspike::{Architecture, Error, ForwardOptions, Granularity, Network, NeuronConfig, Tensor};

const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Parser)]
#[command(name = "realspike", version, about = "Train, fold and inspect real-spike SNNs", args_override_self = true)]
struct Cli {
    /// TOML file supplying defaults for any flag; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write it as an RSPK container.
    Train(TrainArgs),
    /// Report test accuracy of a stored model.
    Eval(EvalArgs),
    /// Fold spike coefficients into the following layers.
    Fold(FoldArgs),
    /// Compare the logits of a model and its folded form.
    Verify(VerifyArgs),
    /// Entropy and spike statistics of a stored model.
    Analyze(AnalyzeArgs),
    /// Parameter and synapse counts before and after folding.
    CostReport(CostArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    arch: Option<String>,
    /// none, layer, channel or element
    #[arg(long)]
    granularity: Option<String>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// adam or sgd-momentum
    #[arg(long)]
    optimizer: Option<String>,
    /// cosine or constant
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    vth: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use only the first N training images.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Run report as JSON lines, without wall-clock times.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    model: PathBuf,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(Args)]
struct FoldArgs {
    model: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    source: PathBuf,
    folded: PathBuf,
    #[arg(long)]
    tol: Option<f64>,
    /// Test images to compare on. Without it, seeded uniform noise is used.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    model: PathBuf,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for per-channel scaled spike maps of the first sample.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    model: PathBuf,
    /// Folded counterpart; computed from MODEL when omitted.
    folded: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    arch: Option<String>,
    granularity: Option<String>,
    timesteps: Option<usize>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    optimizer: Option<String>,
    schedule: Option<String>,
    tau: Option<f32>,
    vth: Option<f32>,
    seed: Option<u64>,
    tol: Option<f64>,
    data_dir: Option<PathBuf>,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
    samples: Option<usize>,
}

enum Failure {
    Usage(String),
    Lib(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Divergence { .. } => 4,
                _ => 2,
            })
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| Failure::Usage(format!("bad config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Train(a) => train(a, file),
        Command::Eval(a) => eval(a, file),
        Command::Fold(a) => fold(a),
        Command::Verify(a) => verify(a, file),
        Command::Analyze(a) => analyze(a, file),
        Command::CostReport(a) => cost(a),
    }
}

fn parse_granularity(s: &str) -> std::result::Result<Option<Granularity>, Failure> {
    if s == "none" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Failure::Usage(format!("unknown granularity `{s}` (expected none, layer, channel or element)")))
}

fn data_dir(flag: Option<PathBuf>, file: &FileConfig) -> PathBuf {
    flag.or_else(|| file.data_dir.clone())
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

fn load_split(dir: &Path, train: bool, limit: Option<usize>) -> Result<IdxDataset, Failure> {
    let (images, labels) = if train {
        (TRAIN_IMAGES, TRAIN_LABELS)
    } else {
        (TEST_IMAGES, TEST_LABELS)
    };
    let ds = load_idx(dir.join(images), dir.join(labels))?;
    Ok(match limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

fn json_line(value: &impl serde::Serialize) -> String {
    serde_json::to_string(value).expect("serializable")
}

fn train(a: TrainArgs, file: FileConfig) -> CliResult {
    let granularity = parse_granularity(a.granularity.as_deref().or(file.granularity.as_deref()).unwrap_or("element"))?;
    let defaults = NeuronConfig::default();
    let neuron = NeuronConfig {
        tau: a.tau.or(file.tau).unwrap_or(defaults.tau),
        v_th: a.vth.or(file.vth).unwrap_or(defaults.v_th),
        ..defaults
    };
    neuron.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let arch_name = a.arch.or(file.arch.clone()).unwrap_or_else(|| "mnist-small".into());
    let arch = Architecture::by_name(&arch_name, granularity, neuron).map_err(|e| Failure::Usage(e.to_string()))?;
    let base = TrainConfig::default();
    let optimizer = match a.optimizer.or(file.optimizer.clone()) {
        Some(s) => s.parse::<OptimizerKind>().map_err(|e| Failure::Usage(e.to_string()))?,
        None => base.optimizer,
    };
    let schedule = match a.schedule.or(file.schedule.clone()) {
        Some(s) => s.parse::<Schedule>().map_err(|e| Failure::Usage(e.to_string()))?,
        None => base.schedule,
    };
    let cfg = TrainConfig {
        timesteps: a.timesteps.or(file.timesteps).unwrap_or(base.timesteps),
        epochs: a.epochs.or(file.epochs).unwrap_or(base.epochs),
        batch_size: a.batch.or(file.batch).unwrap_or(base.batch_size),
        learning_rate: a.lr.or(file.lr).unwrap_or(base.learning_rate),
        optimizer,
        schedule,
        seed: a.seed.or(file.seed).unwrap_or(base.seed),
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let out = a.out.unwrap_or_else(|| PathBuf::from("model.rspk"));

    let dir = data_dir(a.data_dir, &file);
    let train_set = load_split(&dir, true, a.train_limit.or(file.train_limit))?;
    let test_set = load_split(&dir, false, a.test_limit.or(file.test_limit))?;
    let net = Network::init(&arch, cfg.seed)?;

    let stdout = std::io::stdout();
    let header = RunHeader {
        config: cfg.clone(),
        parameters: net.parameter_count(),
    };
    println!("{}", json_line(&header));
    let (trained, report) = train_with(&net, &train_set, Some(&test_set), &cfg, |record| {
        let mut lock = stdout.lock();
        let _ = writeln!(lock, "{}", json_line(record));
        let _ = lock.flush();
    })?;
    save_model(&trained, Some(cfg.timesteps), &out)?;
    if let Some(path) = a.report {
        fs::write(path, report.without_timing().to_jsonl())?;
    }
    eprintln!(
        "saved {} ({} parameters), test accuracy {:.4}",
        out.display(),
        report.parameters,
        report.final_test_accuracy().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval(a: EvalArgs, file: FileConfig) -> CliResult {
    let stored = load_model(&a.model)?;
    let timesteps = a.timesteps.or(file.timesteps).or(stored.timesteps).unwrap_or(4);
    let test_set = load_split(&data_dir(a.data_dir, &file), false, a.test_limit.or(file.test_limit))?;
    let acc = evaluate(&stored.network, &test_set, timesteps)?;
    let correct = (acc * test_set.len() as f64).round() as usize;
    println!("accuracy {acc:.4} ({correct}/{}) at T={timesteps}", test_set.len());
    Ok(())
}

fn fold(a: FoldArgs) -> CliResult {
    let stored = load_model(&a.model)?;
    let folded = fold_network(&stored.network)?;
    save_model(folded.network(), stored.timesteps, &a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

/// Test images when a data directory is given, seeded noise otherwise.
fn sample_inputs(
    net: &Network,
    dir: Option<PathBuf>,
    samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f32>>, Failure> {
    match dir {
        Some(dir) => {
            let ds = load_split(&dir, false, Some(samples))?;
            Ok((0..ds.len()).map(|i| ds.image(i).to_vec()).collect())
        }
        None => {
            let per: usize = net.input_shape().iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..samples)
                .map(|_| (0..per).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect())
        }
    }
}

fn verify(a: VerifyArgs, file: FileConfig) -> CliResult {
    let source = load_model(&a.source)?;
    let folded = load_model(&a.folded)?;
    let tol = a.tol.or(file.tol).unwrap_or(1e-4);
    let timesteps = a.timesteps.or(file.timesteps).or(source.timesteps).unwrap_or(4);
    let samples = a.samples.or(file.samples).unwrap_or(1000);
    let inputs = sample_inputs(
        &source.network,
        a.data_dir.or(file.data_dir),
        samples,
        a.seed.or(file.seed).unwrap_or(0),
    )?;
    let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
    let report = verify_equivalence(&source.network, &folded.network, &refs, timesteps)?;
    println!("{}", json_line(&report));
    if report.passes(tol) {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "max |logit diff| {:.3e} (tolerance {tol:.1e}), argmax agreement {:.4}",
            report.max_abs_diff, report.argmax_agreement
        )))
    }
}

fn analyze(a: AnalyzeArgs, file: FileConfig) -> CliResult {
    let stored = load_model(&a.model)?;
    let net = &stored.network;
    let timesteps = a.timesteps.or(file.timesteps).or(stored.timesteps).unwrap_or(4);
    let samples = a.samples.or(file.samples).unwrap_or(100);
    let inputs = sample_inputs(net, a.data_dir.or(file.data_dir), samples, a.seed.or(file.seed).unwrap_or(0))?;
    if inputs.is_empty() {
        return Err(Failure::Usage("need at least one sample".into()));
    }
    let opts = ForwardOptions::new(timesteps).recording();
    let mut merged = Trace::default();
    for (i, x) in inputs.iter().enumerate() {
        let t = Tensor::new(net.input_shape().to_vec(), x.clone())?;
        let trace = net.forward(&t, &opts)?.trace.expect("recorded");
        if i == 0 {
            if let Some(dir) = &a.csv {
                dump_maps(dir, &trace)?;
            }
            merged = trace;
        } else {
            for (acc, nt) in merged.neurons.iter_mut().zip(trace.neurons) {
                acc.potentials.extend(nt.potentials);
                acc.spikes.extend(nt.spikes);
                acc.scaled.extend(nt.scaled);
            }
        }
    }
    let stats = spike_stats(&merged, net)?;
    let summary = serde_json::json!({
        "samples": inputs.len(),
        "timesteps": timesteps,
        "capacity_bits": {
            "binary_spike": capacity_bound(1)?,
            "real_spike": capacity_bound(32)?,
        },
        "layers": stats.layers,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
    Ok(())
}

fn dump_maps(dir: &Path, trace: &Trace) -> CliResult {
    fs::create_dir_all(dir)?;
    for nt in &trace.neurons {
        for (t, map) in nt.scaled.iter().enumerate() {
            let f = fs::File::create(dir.join(format!("layer{}_t{t}.csv", nt.layer)))?;
            write_channel_csv(std::io::BufWriter::new(f), map)?;
        }
    }
    Ok(())
}

fn cost(a: CostArgs) -> CliResult {
    let source = load_model(&a.model)?.network;
    let folded = match a.folded {
        Some(path) => load_model(path)?.network,
        None => fold_network(&source)?.into_network(),
    };
    let report = cost_report(&source, &folded)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    } else {
        println!("{report}");
    }
    Ok(())
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use quadcomp::inference::{export_records, read_export, write_export};
use quadcomp::metrics::{mean_report, EvalReport};
use quadcomp::network::{
    load_checkpoint, load_optimizer, optimizer_path, save_checkpoint, save_optimizer, AdamW, GradcheckOptions, Model,
    NetworkError,
};
use quadcomp::pipeline::{
    evaluate_scan, gradcheck_seeds, oracle_report, predict, scan_for, train, training_shapes, PipelineError, RunConfig,
};
use quadcomp::scene::{generate_shape, read_lpc, read_scan, write_lpc, LabeledCloud, SceneError, ShapeSpec};

const MANIFEST: &str = "manifest.json";
const SWEEP: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Parser)]
#[command(name = "quadcomp", version, about = "Shape completion with quadric primitives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic shapes and a manifest.
    Generate {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON shape spec; defaults to the desk-scale data spec.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from `out` and its optimizer sidecar.
        #[arg(long)]
        resume: bool,
        /// JSON-lines log file; defaults to stdout.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or the ground truth itself) on a dataset.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Evaluate at thresholds 0.3, 0.5 and 0.7.
        #[arg(long, conflicts_with = "threshold")]
        sweep: bool,
        /// Override the crop ratio of the evaluation scans.
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        project: bool,
        /// Score ground-truth primitives against themselves.
        #[arg(long)]
        oracle: bool,
    },
    /// Export the primitives predicted for one scan.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = quadcomp::inference::DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Project inlier points onto their primitives and include them.
        #[arg(long)]
        project: bool,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Damage the analytic gradient of parameter groups with this prefix.
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Network(NetworkError::NonFiniteLoss { .. }) => Failure::Numeric(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

macro_rules! usage_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Usage(e.to_string())
            }
        }
    )*};
}
usage_from!(std::io::Error, serde_json::Error, SceneError, quadcomp::inference::InferenceError);

impl From<NetworkError> for Failure {
    fn from(e: NetworkError) -> Self {
        PipelineError::from(e).into()
    }
}

type Outcome<T = ()> = Result<T, Failure>;

#[derive(Debug, Serialize, Deserialize)]
struct ShapeEntry {
    file: String,
    seed: u64,
    primitives: usize,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    spec: ShapeSpec,
    spec_hash: String,
    shapes: Vec<ShapeEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Worker count from `UNICO_THREADS`, default 1.
fn thread_count() -> usize {
    std::env::var("UNICO_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Maps `f` over `0..n` on up to `thread_count()` threads; results keep index order.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = thread_count().min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let mut out: Vec<(usize, T)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || (t..n).step_by(threads).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, v)| v).collect()
}

fn load_config(path: Option<&Path>, preset: Option<Preset>) -> Outcome<RunConfig> {
    let cfg = match (path, preset) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        (None, Some(Preset::Full)) => RunConfig::full(),
        (None, _) => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(dir: &Path) -> Outcome<Vec<LabeledCloud>> {
    if !dir.is_dir() {
        return Err(Failure::Usage(format!("data directory {} does not exist", dir.display())));
    }
    let manifest = dir.join(MANIFEST);
    let files: Vec<PathBuf> = if manifest.exists() {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(&manifest)?)?;
        m.shapes.iter().map(|s| dir.join(&s.file)).collect()
    } else {
        let mut v: Vec<PathBuf> =
            fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "lpc")).collect();
        v.sort();
        v
    };
    if files.is_empty() {
        return Err(Failure::Usage(format!("no shapes in {}", dir.display())));
    }
    par_map(files.len(), |i| read_lpc(&files[i]).map_err(|e| Failure::Usage(format!("{}: {e}", files[i].display()))))
        .into_iter()
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_generate(count: usize, out: &Path, seed: u64, spec: Option<&Path>) -> Outcome {
    let spec: ShapeSpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Failure::Usage(format!("spec: {e}")))?,
        None => RunConfig::default().data.spec,
    };
    spec.validate()?;
    fs::create_dir_all(out)?;
    let spec_hash = sha256_hex(serde_json::to_string(&spec)?.as_bytes());
    let shapes = par_map(count, |i| -> Outcome<ShapeEntry> {
        let s = seed.wrapping_add(i as u64);
        let cloud = generate_shape(&spec.with_seed(s))?;
        let file = format!("shape_{i:04}.lpc");
        let path = out.join(&file);
        write_lpc(&cloud, &path)?;
        if !read_lpc(&path)?.approx_eq(&cloud, 1e-9) {
            return Err(Failure::Usage(format!("{file} does not read back")));
        }
        Ok(ShapeEntry { file, seed: s, primitives: cloud.primitives.len(), sha256: sha256_hex(&fs::read(&path)?) })
    })
    .into_iter()
    .collect::<Outcome<Vec<_>>>()?;
    let manifest = Manifest { seed, spec, spec_hash, shapes };
    write_json(&out.join(MANIFEST), &manifest)?;
    println!("wrote {count} shapes to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: u64,
    lr: f64,
    total: f64,
    #[serde(flatten)]
    breakdown: &'a quadcomp::assignment::LossBreakdown,
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    term: &'a str,
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    preset: Option<Preset>,
    out: &Path,
    steps: Option<usize>,
    resume: bool,
    log: Option<&Path>,
) -> Outcome {
    let cfg = load_config(config, preset)?;
    let clouds = load_dataset(data)?;
    let shapes = training_shapes(&clouds, &cfg)?;
    let (mut model, mut opt) = if resume {
        let m = load_checkpoint(out)?;
        if m.config != cfg.model {
            return Err(Failure::Usage("checkpoint model config differs from the run config".into()));
        }
        (m, load_optimizer(out)?)
    } else {
        let m = Model::new(cfg.model.clone())?;
        let o = AdamW::new(cfg.optimizer.clone(), m.param_count(), shapes.len());
        (m, o)
    };
    let mut sink: Box<dyn Write> = match log {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::options().create(true).append(resume).write(true).truncate(!resume).open(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let steps = steps.unwrap_or_else(|| cfg.dataset_steps(shapes.len()));
    let mut io_err = None;
    let result = train(&mut model, &mut opt, &shapes, &cfg.weights, steps, |r| {
        let line = LogLine { step: r.step, lr: r.lr, total: r.total, breakdown: &r.breakdown };
        let text = serde_json::to_string(&line).expect("log line serializes");
        if let Err(e) = writeln!(sink, "{text}") {
            io_err.get_or_insert(e);
        }
    });
    if let Err(PipelineError::Network(NetworkError::NonFiniteLoss { term })) = &result {
        writeln!(sink, "{}", serde_json::to_string(&ErrorLine { error: "non-finite loss", term })?)?;
        sink.flush()?;
    }
    result?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    sink.flush()?;
    save_checkpoint(&model, out)?;
    save_optimizer(&opt, out)?;
    if load_checkpoint(out)?.params != model.params || load_optimizer(out)? != opt {
        return Err(Failure::Usage("checkpoint does not read back".into()));
    }
    eprintln!("saved {} and {}", out.display(), optimizer_path(out).display());
    Ok(())
}

#[derive(Serialize)]
struct SweepEntry {
    threshold: f64,
    report: EvalReport,
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    model: Option<&Path>,
    data: &Path,
    report: &Path,
    config: Option<&Path>,
    threshold: Option<f64>,
    sweep: bool,
    ratio: Option<f64>,
    project: bool,
    oracle: bool,
) -> Outcome {
    let clouds = load_dataset(data)?;
    if oracle {
        let reports = par_map(clouds.len(), |i| oracle_report(&clouds[i])).into_iter().collect::<Result<Vec<_>, _>>()?;
        return write_json(report, &mean_report(&reports).expect("non-empty dataset"));
    }
    let model = load_checkpoint(model.expect("clap requires --model"))?;
    let mut cfg = load_config(config, None)?;
    cfg.model = model.config.clone();
    let ratio = ratio.unwrap_or(cfg.data.ratio);
    let scans = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| scan_for(c, i, &cfg.data, ratio, cfg.seed).map(|s| s.points))
        .collect::<Result<Vec<_>, _>>()?;
    let run = |t: f64| -> Outcome<EvalReport> {
        let reports = par_map(clouds.len(), |i| evaluate_scan(&model, &scans[i], &clouds[i], t, project))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        Ok(mean_report(&reports).expect("non-empty dataset"))
    };
    if sweep {
        let entries = SWEEP.iter().map(|&t| Ok(SweepEntry { threshold: t, report: run(t)? })).collect::<Outcome<Vec<_>>>()?;
        write_json(report, &entries)
    } else {
        write_json(report, &run(threshold.unwrap_or(cfg.threshold))?)
    }
}

fn cmd_infer(model: &Path, input: &Path, out: &Path, threshold: f64, project: bool) -> Outcome {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Failure::Usage(format!("threshold {threshold} outside [0, 1]")));
    }
    let model = load_checkpoint(model)?;
    let points = read_scan(input).or_else(|_| read_lpc(input).map(|c| c.points))?;
    let (chosen, _) = predict(&model, &points, threshold, project);
    let records = export_records(&chosen, project);
    write_export(out, &records)?;
    if read_export(out)? != records {
        return Err(Failure::Usage("export does not read back".into()));
    }
    println!("exported {} primitives to {}", records.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(
    config: Option<&Path>,
    preset: Option<Preset>,
    tol: f64,
    seeds: u64,
    corrupt: Option<String>,
    report: Option<&Path>,
) -> Outcome {
    let cfg = load_config(config, preset)?;
    let opts = GradcheckOptions { tol, corrupt, ..GradcheckOptions::default() };
    let seeds: Vec<u64> = (0..seeds).collect();
    let reports = gradcheck_seeds(&cfg, &seeds, &opts)?;
    for (s, r) in seeds.iter().zip(&reports) {
        println!("seed {s}: {} params, max relative error {:.3e} at {}", r.params, r.max_rel, r.worst_layer);
        for l in &r.layers {
            println!("  {:<48} {:>6} {:.3e}", l.name, l.params, l.max_rel);
        }
    }
    if let Some(p) = report {
        write_json(p, &reports)?;
    }
    match reports.iter().find(|r| !r.passed) {
        Some(r) => Err(Failure::Numeric(format!("gradient check failed: {} has relative error {:.3e}", r.worst_layer, r.max_rel))),
        None => {
            println!("gradient check passed");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Generate { count, out, seed, spec } => cmd_generate(count, &out, seed, spec.as_deref()),
        Command::Train { data, config, preset, out, steps, resume, log } => {
            cmd_train(&data, config.as_deref(), preset, &out, steps, resume, log.as_deref())
        }
        Command::Eval { model, data, report, config, threshold, sweep, ratio, project, oracle } => cmd_eval(
            model.as_deref(),
            &data,
            &report,
            config.as_deref(),
            threshold,
            sweep,
            ratio,
            project,
            oracle,
        ),
        Command::Infer { model, input, out, threshold, project } => cmd_infer(&model, &input, &out, threshold, project),
        Command::Gradcheck { config, preset, tol, seeds, corrupt, report } => {
            cmd_gradcheck(config.as_deref(), preset, tol, seeds, corrupt, report.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

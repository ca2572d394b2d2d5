mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use rae_core::codec::{
    compress, decompress_bytes, metrics, CodecConfig, CompressedStream, STREAM_MAGIC,
};
use rae_core::par::map_collect;
use rae_core::preprocess::{load_csv_path, write_csv, TimeSeries};
use rae_core::rae::{RaeParams, MODEL_MAGIC};
use rae_core::synth::{sinusoid_trace, SynthConfig};
use rae_core::trainer::{build_dataset, evict_outliers, train_with};

use config::TrainSettings;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] rae_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(rae_core::Error::Numeric(_)) => 3,
            _ => 2,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "rae",
    version,
    about = "Recurrent autoencoder compressor for time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on CSV traces.
    Train(TrainArgs),
    /// Compress a CSV series into a stream file.
    Compress(CompressArgs),
    /// Rebuild a CSV series from a stream file.
    Decompress(DecompressArgs),
    /// Sweep epsilon and report ratio and error per value.
    Eval(EvalArgs),
    /// Print a summary of a model or stream file.
    Inspect(InspectArgs),
    /// Write a seeded synthetic sinusoid corpus as CSV files.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// CSV file or directory of CSV files.
    #[arg(long)]
    data: PathBuf,
    /// Model output path. The per-epoch loss log goes to `<out>.log.csv`.
    #[arg(long)]
    out: PathBuf,
    /// key=value configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rae_len: Option<usize>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the reconstruction as CSV, by default to `<out>.csv`.
    #[arg(long, num_args = 0..=1, value_name = "PATH")]
    emit_reconstruction: Option<Option<PathBuf>>,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long)]
    model: PathBuf,
    /// Stream file produced by `compress`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated epsilon values.
    #[arg(long, value_delimiter = ',', required = true)]
    epsilon_list: Vec<f64>,
    /// Metrics CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    traces: usize,
    #[arg(long, default_value_t = 2000)]
    len: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Compress(a) => cmd_compress(a),
        Command::Decompress(a) => cmd_decompress(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a temporary file in the target directory and renames it into
/// place, so a failed command never leaves a partial file behind.
fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> CliResult) -> CliResult {
    let io_err = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        write(&mut buf)?;
        buf.flush().map_err(io_err)?;
    }
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_model(path: &Path) -> CliResult<RaeParams> {
    Ok(RaeParams::load(&read(path)?)?)
}

fn load_series(path: &Path) -> CliResult<TimeSeries> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "{}: not a readable file",
            path.display()
        )));
    }
    Ok(load_csv_path(path)?)
}

fn csv_files(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no CSV files found",
            path.display()
        )));
    }
    Ok(files)
}

fn check_epsilon(eps: f64) -> CliResult {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "epsilon must be positive and finite, got {eps}"
        )))
    }
}

fn codec_config(params: &RaeParams, eps: f64) -> CodecConfig {
    CodecConfig::new(eps, params.dims.rae_len())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut settings = TrainSettings::default();
    if let Some(path) = &a.config {
        let text = String::from_utf8(read(path)?)
            .map_err(|_| CliError::Usage(format!("{}: config is not UTF-8", path.display())))?;
        settings.apply_file(&text)?;
    }
    settings.tau = a.tau.unwrap_or(settings.tau);
    settings.rae_len = a.rae_len.unwrap_or(settings.rae_len);
    settings.d_h = a.d_h.unwrap_or(settings.d_h);
    settings.seed = a.seed.unwrap_or(settings.seed);
    settings.epochs = a.epochs.unwrap_or(settings.epochs);

    let traces = csv_files(&a.data)?
        .iter()
        .map(|p| load_series(p))
        .collect::<CliResult<Vec<_>>>()?;
    let channels = traces[0].channels();
    if let Some(t) = traces.iter().find(|t| t.channels() != channels) {
        return Err(CliError::Usage(format!(
            "trace {:?} has {} channels, expected {channels}",
            t.name,
            t.channels()
        )));
    }
    let cfg = settings.to_train_config(channels)?;
    let mut normalized: Vec<TimeSeries> = traces.iter().map(TimeSeries::normalize).collect();
    if settings.evict_outliers {
        normalized = evict_outliers(normalized);
    }
    let dataset = build_dataset(&normalized, &cfg)?;
    log::info!("{} traces, {} sequences", normalized.len(), dataset.len());

    let init = RaeParams::init(cfg.dims, cfg.seed)?;
    let (params, log) = train_with(&cfg, &dataset, init, |r| {
        log::info!(
            "epoch {} train {:.6e} validation {:?}",
            r.epoch,
            r.train_loss,
            r.validation_loss
        )
    })?;

    let model = params.save();
    write_atomic(&a.out, |w| {
        Ok(w.write_all(&model).map_err(rae_core::Error::from)?)
    })?;
    let log_csv = log.to_csv();
    write_atomic(&with_suffix(&a.out, ".log.csv"), |w| {
        Ok(w.write_all(log_csv.as_bytes())
            .map_err(rae_core::Error::from)?)
    })?;
    println!(
        "{}",
        json!({
            "model": a.out.display().to_string(),
            "fingerprint": format!("{:#010x}", params.fingerprint()),
            "epochs": log.epochs.len(),
            "best_epoch": log.best_epoch,
            "train_sequences": log.train_sequences,
            "validation_sequences": log.validation_sequences,
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct CompressReport {
    ratio: f64,
    rmse: f64,
    linf: f64,
    n_blocks: usize,
    n_raw_blocks: usize,
}

fn cmd_compress(a: CompressArgs) -> CliResult {
    check_epsilon(a.epsilon)?;
    let params = load_model(&a.model)?;
    let series = load_series(&a.data)?.normalize();
    let out = compress(&params, &series, &codec_config(&params, a.epsilon))?;
    let m = metrics(series.samples(), out.reconstruction.samples())?;
    let bytes = out.stream.to_bytes();
    write_atomic(&a.out, |w| {
        Ok(w.write_all(&bytes).map_err(rae_core::Error::from)?)
    })?;
    if let Some(path) = a.emit_reconstruction {
        let path = path.unwrap_or_else(|| with_suffix(&a.out, ".csv"));
        let raw = out.reconstruction.denormalize();
        write_atomic(&path, |w| Ok(write_csv(w, series.channels(), &raw)?))?;
    }
    let report = CompressReport {
        ratio: out.ratio(),
        rmse: m.rmse,
        linf: m.linf,
        n_blocks: out.stream.blocks.len(),
        n_raw_blocks: out.stream.n_raw_blocks(),
    };
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    Ok(())
}

fn cmd_decompress(a: DecompressArgs) -> CliResult {
    let params = load_model(&a.model)?;
    let series = decompress_bytes(&params, &read(&a.data)?)?;
    let raw = series.denormalize();
    write_atomic(&a.out, |w| Ok(write_csv(w, series.channels(), &raw)?))
}

fn eval_threads() -> CliResult<Option<usize>> {
    match std::env::var("RAE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "RAE_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(None),
    }
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    for &eps in &a.epsilon_list {
        check_epsilon(eps)?;
    }
    let params = load_model(&a.model)?;
    let series = load_series(&a.data)?.normalize();
    let run = |eps: &f64| -> rae_core::Result<(f64, f64, f64, f64, f64)> {
        let t0 = Instant::now();
        let out = compress(&params, &series, &codec_config(&params, *eps))?;
        let m = metrics(series.samples(), out.reconstruction.samples())?;
        Ok((
            *eps,
            out.ratio(),
            m.rmse,
            m.linf,
            t0.elapsed().as_secs_f64() * 1e3,
        ))
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = eval_threads()? {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let rows = pool.install(|| map_collect(&a.epsilon_list, run));

    let mut text = String::from("epsilon,ratio,rmse,linf,runtime_ms\n");
    for row in rows {
        let (eps, ratio, rmse, linf, ms) = row?;
        text.push_str(&format!("{eps},{ratio},{rmse},{linf},{ms:.3}\n"));
    }
    match a.out {
        Some(path) => write_atomic(&path, |w| {
            Ok(w.write_all(text.as_bytes())
                .map_err(rae_core::Error::from)?)
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_inspect(a: InspectArgs) -> CliResult {
    let bytes = read(&a.path)?;
    let summary = if bytes.starts_with(MODEL_MAGIC) {
        let p = RaeParams::load(&bytes)?;
        json!({
            "kind": "model",
            "d_in": p.dims.d_in,
            "d_z": p.dims.d_z,
            "d_h": p.dims.d_h,
            "d_m": p.dims.d_m,
            "n_channels": p.dims.n_channels,
            "rae_len": p.dims.rae_len(),
            "parameters": rae_core::nn::ParamSet::num_params(&p),
            "fingerprint": format!("{:#010x}", p.fingerprint()),
        })
    } else if bytes.starts_with(STREAM_MAGIC) {
        let s = CompressedStream::from_bytes(&bytes)?;
        let h = &s.header;
        json!({
            "kind": "stream",
            "version": h.version,
            "n_samples": h.n_samples,
            "n_channels": h.n_channels,
            "rae_len": h.rae_len,
            "d_h": h.d_h,
            "epsilon": h.epsilon,
            "n_blocks": s.blocks.len(),
            "n_raw_blocks": s.n_raw_blocks(),
            "bytes": bytes.len(),
            "ratio": bytes.len() as f64 / (h.n_samples as f64 * h.n_channels as f64 * 4.0),
            "fingerprint": format!("{:#010x}", h.fingerprint),
        })
    } else {
        return Err(CliError::Usage(format!(
            "{}: neither a model nor a stream file",
            a.path.display()
        )));
    };
    println!("{summary}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        n_traces: a.traces,
        len: a.len,
        channels: a.channels,
        seed: a.seed,
        ..SynthConfig::default()
    };
    fs::create_dir_all(&a.out).map_err(|source| CliError::Io {
        path: a.out.clone(),
        source,
    })?;
    let width = a.traces.saturating_sub(1).to_string().len();
    for i in 0..a.traces {
        let trace = sinusoid_trace(&cfg, i)?;
        let path = a.out.join(format!("trace-{i:0width$}.csv"));
        write_atomic(&path, |w| {
            Ok(write_csv(w, trace.channels(), trace.samples())?)
        })?;
    }
    Ok(())
}

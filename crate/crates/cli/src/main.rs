//! `echofree` command line: simulate, train, process, evaluate, summarize.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use echofree::config::{ConfigError, PipelineConfig};
use echofree::dsp::wav::{read_wav, write_wav, WavEncoding, WavError};
use echofree::eval::{evaluate, EvalError};
use echofree::model::weights::{load_params, save_params};
use echofree::model::{count_macs_per_second, count_params, init_params, summary, ModelParams};
use echofree::pipeline::{process_signals, GainOverride};
use echofree::sim::{make_dataset, write_synthetic_corpus};
use echofree::training::{load_manifest_examples, train, write_history_csv, ProxyEmbedding, Stage, TrainError};
use echofree::{AudioBuffer, SAMPLE_RATE};

/// Exit codes. 1 covers everything not listed.
mod code {
    pub const SAMPLE_RATE: u8 = 2;
    pub const WEIGHTS: u8 = 3;
    pub const WAV: u8 = 4;
    pub const CONFIG: u8 = 5;
    pub const DATA: u8 = 6;
}

#[derive(Debug)]
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self { code: 1, err: e.into() }
    }
}

fn with_code<E: Into<anyhow::Error>>(code: u8) -> impl FnOnce(E) -> Failure {
    move |e| Failure { code, err: e.into() }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "echofree", version, about = "Hybrid Kalman + neural post-filter echo canceller")]
struct Cli {
    /// Run configuration (TOML). Omitted keys take the reference values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cancel echo in a recording.
    Process {
        #[arg(long)]
        mic: PathBuf,
        #[arg(long)]
        far: PathBuf,
        /// Model weights (EFWT); defaults to `paths.weights`.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write ê, z, gains and masks to this directory.
        #[arg(long)]
        dump_intermediates: Option<PathBuf>,
        /// Debug: bypass the network with all-ones gains.
        #[arg(long)]
        unit_gains: bool,
        /// Feed the stream in pieces of this many samples.
        #[arg(long)]
        chunk: Option<usize>,
    },
    /// Generate a simulated dataset and its manifest.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// Directory of 16 kHz mono source speech; a synthetic corpus is generated when omitted.
        #[arg(long)]
        sources: Option<PathBuf>,
        /// Clip length in seconds; defaults to `train.segment_s`.
        #[arg(long)]
        clip_s: Option<f64>,
    },
    /// Two-stage training on a simulated dataset.
    Train {
        /// Dataset manifest; defaults to `paths.data`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Start from these weights instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory; defaults to `paths.out_dir`, then `runs/`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer shapes, parameter count and MACs/s.
    Summary,
    /// Score processed files against a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        processed: PathBuf,
        /// Directory holding `<id>_out.efem` / `<id>_near.efem` embeddings.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Per-file CSV report; a `_summary.csv` sibling gets the aggregates.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

impl StageArg {
    fn plan(self) -> Vec<Stage> {
        match self {
            StageArg::One => vec![Stage::One],
            StageArg::Two => vec![Stage::Two],
            StageArg::Both => vec![Stage::One, Stage::Two],
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", render(&f.err));
            ExitCode::from(f.code)
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn run(cli: Cli) -> CliResult {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Process { mic, far, weights, out, dump_intermediates, unit_gains, chunk } => {
            let weights = weights.or_else(|| cfg.paths.weights.clone());
            cmd_process(&cfg, &mic, &far, weights.as_deref(), &out, dump_intermediates.as_deref(), unit_gains, chunk)
        }
        Cmd::Simulate { out, n, sources, clip_s } => cmd_simulate(&cfg, &out, n, sources.as_deref(), clip_s),
        Cmd::Train { data, stage, resume, out } => {
            let data = data.or_else(|| cfg.paths.data.clone()).ok_or_else(|| Failure {
                code: code::DATA,
                err: anyhow!("no dataset: pass --data or set paths.data"),
            })?;
            let out = out.or_else(|| cfg.paths.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));
            cmd_train(&cfg, &data, stage, resume.as_deref(), &out)
        }
        Cmd::Summary => cmd_summary(&cfg),
        Cmd::Eval { manifest, processed, embeddings, report } => cmd_eval(&manifest, &processed, embeddings.as_deref(), report.as_deref()),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    PipelineConfig::load(path).map_err(|e| {
        if let ConfigError::UnknownKey { key, .. } = &e {
            log::error!("unknown config key: {key}");
        }
        Failure { code: code::CONFIG, err: e.into() }
    })
}

fn wav_failure(e: WavError) -> Failure {
    let code = match e {
        WavError::SampleRate { .. } => code::SAMPLE_RATE,
        _ => code::WAV,
    };
    Failure { code, err: e.into() }
}

fn read_input(path: &Path) -> CliResult<Vec<f64>> {
    Ok(read_wav::<f64>(path).map_err(wav_failure)?.into_samples())
}

fn load_weights(cfg: &PipelineConfig, path: &Path) -> CliResult<ModelParams<f64>> {
    load_params(path, &cfg.model)
        .with_context(|| format!("loading weights {}", path.display()))
        .map_err(with_code(code::WEIGHTS))
}

#[allow(clippy::too_many_arguments)]
fn cmd_process(
    cfg: &PipelineConfig,
    mic_path: &Path,
    far_path: &Path,
    weights: Option<&Path>,
    out: &Path,
    dump: Option<&Path>,
    unit_gains: bool,
    chunk: Option<usize>,
) -> CliResult {
    let mut mic = read_input(mic_path)?;
    let mut far = read_input(far_path)?;
    if mic.len() != far.len() {
        log::warn!("mic has {} samples, far {}; zero-padding the shorter", mic.len(), far.len());
        let n = mic.len().max(far.len());
        mic.resize(n, 0.0);
        far.resize(n, 0.0);
    }
    let params = match weights {
        Some(p) => load_weights(cfg, p)?,
        None if unit_gains => init_params(&cfg.model, 0)?,
        None => {
            return Err(Failure { code: code::WEIGHTS, err: anyhow!("no weights: pass --weights or set paths.weights") });
        }
    };
    let result = process_signals(cfg, params, &mic, &far, chunk, unit_gains.then_some(GainOverride::Constant(1.0)), dump.is_some())?;
    let audio = AudioBuffer::new(result.output)?;
    write_wav(out, &audio, WavEncoding::Float32).map_err(wav_failure)?;
    if let (Some(dir), Some(dumps)) = (dump, &result.intermediates) {
        dumps.write(dir, SAMPLE_RATE, cfg.stft.hop, cfg.latency_samples())?;
    }
    println!("wrote {} ({} samples)", out.display(), audio.len());
    println!("algorithmic latency: {} samples ({:.1} ms)", cfg.latency_samples(), cfg.latency_ms());
    Ok(())
}

fn cmd_simulate(cfg: &PipelineConfig, out: &Path, n: usize, sources: Option<&Path>, clip_s: Option<f64>) -> CliResult {
    let sources = match sources {
        Some(s) => s.to_path_buf(),
        None => {
            let dir = out.join("sources");
            log::info!("no --sources given; writing a synthetic speech corpus to {}", dir.display());
            write_synthetic_corpus(&dir, 24, 8.0, cfg.sim.seed)?;
            dir
        }
    };
    let rows = make_dataset(&cfg.sim, n, clip_s.unwrap_or(cfg.train.segment_s), &sources, out)?;
    let far_only = rows.iter().filter(|r| r.scenario == echofree::sim::Scenario::FarendOnly).count();
    println!("wrote {} samples ({far_only} far-end only) to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &PipelineConfig, manifest: &Path, stage: StageArg, resume: Option<&Path>, out: &Path) -> CliResult {
    let fe = cfg.front_end::<f64>()?;
    let data = load_manifest_examples(manifest, &fe, cfg.train.segment_s).map_err(|e| {
        let code = match e {
            TrainError::Data(_) => code::DATA,
            _ => 1,
        };
        Failure { code, err: e.into() }
    })?;
    log::info!("{} training segments from {}", data.len(), manifest.display());
    let init = match resume {
        Some(p) => load_weights(cfg, p)?,
        None => {
            if matches!(stage, StageArg::Two) {
                log::warn!("stage 2 without --resume starts from a fresh initialization");
            }
            init_params(&cfg.model, cfg.train.seed)?
        }
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let provider = ProxyEmbedding::new(fe.bark.clone(), cfg.train.ssl_context);
    let outcome = match train(&cfg.train, init, &data, &stage.plan(), &provider, &fe.bark) {
        Ok(o) => o,
        Err(abort) => {
            write_history_csv(out.join("history.csv"), &abort.history)?;
            if let Some(ck) = &abort.checkpoint {
                save_params(ck, out.join("last_finite.efwt"))?;
            }
            return Err(anyhow!("training aborted: {}", abort.error).into());
        }
    };
    for (s, p) in &outcome.stage_params {
        let path = out.join(format!("stage{}.efwt", s.number()));
        save_params(p, &path)?;
        println!("wrote {}", path.display());
    }
    write_history_csv(out.join("history.csv"), &outcome.history)?;
    let mut w = csv::Writer::from_path(out.join("stage_start.csv"))?;
    w.write_record(["stage", "val_loss", "val_L_bark", "val_L_ssl"])?;
    for (s, m) in &outcome.stage_start {
        w.write_record([s.number().to_string(), m.total.to_string(), m.l_bark.to_string(), m.l_ssl.to_string()])?;
        println!("stage {} start: val {:.6} (bark {:.6}, ssl {:.6})", s.number(), m.total, m.l_bark, m.l_ssl);
    }
    w.flush()?;
    println!("wrote {}", out.join("history.csv").display());
    Ok(())
}

fn cmd_summary(cfg: &PipelineConfig) -> CliResult {
    let rows = summary(&cfg.model)?;
    println!("{:<16} {:>12} {:>12} {:>10} {:>14}", "layer", "input", "output", "params", "MACs/frame");
    for r in &rows {
        let shape = |(c, f): (usize, usize)| format!("{c}x{f}");
        println!("{:<16} {:>12} {:>12} {:>10} {:>14}", r.name, shape(r.input), shape(r.output), r.params, r.macs_per_frame);
    }
    let params = count_params(&cfg.model)?;
    let macs = count_macs_per_second(&cfg.model, cfg.frame_rate())?;
    println!("total params: {params}");
    println!("MACs/s: {macs} at {} frames/s", cfg.frame_rate());
    Ok(())
}

fn cmd_eval(manifest: &Path, processed: &Path, embeddings: Option<&Path>, report: Option<&Path>) -> CliResult {
    let r = evaluate(processed, manifest, embeddings).map_err(|e| match e {
        EvalError::Manifest(_) => Failure { code: code::DATA, err: e.into() },
        e => e.into(),
    })?;
    print!("{r}");
    if let Some(path) = report {
        r.write_csv(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        r.write_summary_csv(path.with_file_name(format!("{stem}_summary.csv")))?;
    }
    Ok(())
}

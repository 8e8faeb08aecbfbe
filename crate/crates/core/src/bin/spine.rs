use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};

use spine_core::backend::{FilesBackend, GroundTruth, ModelBackend, OracleBackend};
use spine_core::config::{Config, Mode, PipelineConfig};
use spine_core::dicom::{assemble_volume, load_series};
use spine_core::exec::{init_threads, Execution};
use spine_core::pipeline::{run_detection_pipeline, run_grading, PipelineError};
use spine_core::report::{write_report, ReportFormat};
use spine_core::synth::{scan_for_mode, GROUND_TRUTH_FILE};

const EXIT_FAILURE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_BACKEND: u8 = 3;

#[derive(Parser)]
#[command(name = "spine", version, about = "Vertebra detection and labelling for sagittal spine MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Lumbar,
    Wholespine,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Lumbar => Mode::Lumbar,
            ModeArg::Wholespine => Mode::WholeSpine,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Detect, label and optionally grade a DICOM series.
    Run {
        /// Directory holding one sagittal series.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "lumbar")]
        mode: ModeArg,
        /// `oracle` (needs ground_truth.json, see --truth) or `files:<dir>`.
        #[arg(long, default_value = "oracle")]
        backend: String,
        /// Ground truth for the oracle backend; defaults to
        /// `<input>/ground_truth.json`.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// With a files backend, write inputs lacking a stored output.
        #[arg(long)]
        record_inputs: bool,
        /// Grade the discs between S1 and T12.
        #[arg(long)]
        grade: bool,
        /// Report path; CSV output writes `<stem>_vertebrae.csv` and `<stem>_ivvs.csv` beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
        /// TOML configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Worker threads; 1 runs sequentially.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write a synthetic DICOM series with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "wholespine")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn input_err(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: e.to_string(),
    }
}

fn pipeline_err(e: PipelineError) -> Failure {
    let code = match &e {
        e if e.is_backend_violation() => EXIT_BACKEND,
        PipelineError::EmptyVolume | PipelineError::Patch(_) => EXIT_INPUT,
        _ => EXIT_FAILURE,
    };
    Failure {
        code,
        message: e.to_string(),
    }
}

fn make_backend(spec: &str, input: &Path, truth: Option<&Path>, cfg: &PipelineConfig, record: bool) -> Result<Box<dyn ModelBackend>, Failure> {
    if spec == "oracle" {
        let path = truth.map(Path::to_path_buf).unwrap_or_else(|| input.join(GROUND_TRUTH_FILE));
        let truth = GroundTruth::read(&path).map_err(input_err)?;
        return Ok(Box::new(OracleBackend::new(&truth, cfg.render).map_err(input_err)?));
    }
    if let Some(dir) = spec.strip_prefix("files:") {
        if !Path::new(dir).is_dir() {
            return Err(input_err(format!("backend directory {dir} does not exist")));
        }
        return Ok(Box::new(FilesBackend::new(dir).with_recording(record)));
    }
    Err(input_err(format!("unknown backend {spec:?}; use oracle or files:<dir>")))
}

#[allow(clippy::too_many_arguments)]
fn run(
    input: &Path,
    mode: Mode,
    backend: &str,
    truth: Option<&Path>,
    record_inputs: bool,
    grade: bool,
    out: &Path,
    format: ReportFormat,
    config: Option<&Path>,
    threads: Option<usize>,
) -> Result<(), Failure> {
    let file_cfg = match config {
        Some(p) => Config::load(p).map_err(input_err)?,
        None => Config::default(),
    };
    let mut cfg = file_cfg.resolve(mode).map_err(input_err)?;
    match threads {
        Some(0) => return Err(input_err("--threads must be at least 1")),
        Some(1) => cfg.execution = Execution::Sequential,
        Some(n) => {
            init_threads(n);
            cfg.execution = Execution::Parallel;
        }
        None => {}
    }
    let volume = assemble_volume(load_series(input).map_err(input_err)?).map_err(input_err)?;
    info!("volume {:?}, spacing {:?}", volume.dims(), volume.spacing);
    let backend = make_backend(backend, input, truth, &cfg, record_inputs)?;

    let mut report = run_detection_pipeline(&volume, backend.as_ref(), &cfg).map_err(pipeline_err)?;
    if grade {
        report = run_grading(&volume, &report, backend.as_ref(), &cfg).map_err(pipeline_err)?;
    }
    let written = write_report(&report, format, out).map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: e.to_string(),
    })?;
    for p in written {
        info!("wrote {}", p.display());
    }
    println!(
        "{} vertebrae: {}",
        report.vertebrae.len(),
        report.vertebrae.iter().map(|v| v.level.name()).collect::<Vec<_>>().join(" ")
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            input,
            mode,
            backend,
            truth,
            record_inputs,
            grade,
            out,
            format,
            config,
            threads,
        } => run(
            &input,
            mode.into(),
            &backend,
            truth.as_deref(),
            record_inputs,
            grade,
            &out,
            match format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Json => ReportFormat::Json,
            },
            config.as_deref(),
            threads,
        ),
        Command::Synth { out, mode, seed } => scan_for_mode(mode.into(), seed)
            .write_series(&out)
            .map_err(|e| Failure {
                code: EXIT_FAILURE,
                message: e.to_string(),
            }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!("{}", f.message);
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

//! `pothole` command-line front end.
//!
//! Machine-readable JSON goes to standard output (or `--out`), progress and
//! summaries to standard error. Exit codes: 0 success, 1 usage error,
//! 2 invalid input or failed check, 3 runtime or I/O error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use pothole_core::dataset::{DatasetError, Issue};
use pothole_core::hazard::HazardError;
use pothole_core::metrics::MetricsError;
use pothole_core::output::RealFormat;
use pothole_core::stats::StatsError;

mod commands;
mod config;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "pothole",
    version,
    about = "Evaluate road pothole detectors and replay hazard reports"
)]
pub struct Cli {
    /// Option defaults from a file: `key=value` lines or one JSON object. Keys
    /// are the long flag names; flags given on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Write reals in shortest round-trip form instead of six decimals
    #[arg(long, global = true)]
    pub exact: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check annotation and detection files against the format and bounds rules
    Validate(ValidateArgs),
    /// Box-shape statistics, box plots and anchor / input-size recommendations
    Stats(StatsArgs),
    /// Average precision under the PASCAL or COCO-style protocol
    Eval(EvalArgs),
    /// Export precision-recall curves as CSV
    Curves(CurvesArgs),
    /// Per-image greedy non-maximum suppression of a detection file
    Nms(NmsArgs),
    /// Run the loss reference checks and gradient checks
    LossCheck(LossCheckArgs),
    /// Replay a hazard event log through the map-cell aggregator
    Simulate(SimulateArgs),
    /// Convert boxes between inclusive and half-open pixel bounds
    Convert(ConvertArgs),
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Annotation file (JSON Lines)
    #[arg(long, value_name = "PATH")]
    pub annotations: PathBuf,
    /// Detection file to check against the annotations' images
    #[arg(long, value_name = "PATH")]
    pub detections: Option<PathBuf>,
    /// Write the JSON report here instead of standard output
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Annotation file (JSON Lines)
    #[arg(long, value_name = "PATH")]
    pub annotations: PathBuf,
    /// Candidate network input size for the area projection (repeatable)
    #[arg(
        long,
        value_name = "WxH",
        value_parser = parse_resolution,
        default_values = ["600x600", "1024x800"]
    )]
    pub resolution: Vec<(u32, u32)>,
    /// Per-box CSV (size, aspect ratio, area, area fraction)
    #[arg(long, value_name = "PATH")]
    pub csv_out: Option<PathBuf>,
    /// Box-plot summary CSV, one row per measured quantity
    #[arg(long, value_name = "PATH")]
    pub summary_csv: Option<PathBuf>,
    /// Write the JSON report here instead of standard output
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Pascal,
    Coco,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Annotation file (JSON Lines)
    #[arg(long, value_name = "PATH")]
    pub annotations: PathBuf,
    /// Detection file (JSON Lines)
    #[arg(long, value_name = "PATH")]
    pub detections: PathBuf,
    /// PASCAL: 11-point AP per threshold; COCO: mean over IoU 0.50 to 0.95
    #[arg(long, value_enum, default_value_t = ProtocolArg::Pascal)]
    pub protocol: ProtocolArg,
    /// IoU threshold for the PASCAL protocol (repeatable; default 0.5 and 0.4)
    #[arg(long, value_name = "FLOAT", value_parser = parse_iou)]
    pub iou: Vec<f64>,
    /// Precision-recall curve CSV; with several thresholds the threshold is
    /// appended to the file stem
    #[arg(long, value_name = "PATH")]
    pub curve_out: Option<PathBuf>,
    /// Write the JSON report here instead of standard output
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CurvesArgs {
    /// Annotation file (JSON Lines)
    #[arg(long, value_name = "PATH")]
    pub annotations: PathBuf,
    /// Detection file (JSON Lines)
    #[arg(long, value_name = "PATH")]
    pub detections: PathBuf,
    /// IoU threshold (repeatable; default 0.5)
    #[arg(long, value_name = "FLOAT", value_parser = parse_iou)]
    pub iou: Vec<f64>,
    /// Curve CSV; with several thresholds the threshold is appended to the stem
    #[arg(long, value_name = "PATH")]
    pub csv_out: PathBuf,
    /// Write the JSON report here instead of standard output
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct NmsArgs {
    /// Detection file (JSON Lines)
    #[arg(long, value_name = "PATH")]
    pub detections: PathBuf,
    /// Boxes overlapping a kept box at or above this IoU are dropped
    #[arg(long, value_name = "FLOAT", value_parser = parse_unit, default_value_t = 0.5)]
    pub iou: f64,
    /// Validate and clamp detections against these images first
    #[arg(long, value_name = "PATH")]
    pub annotations: Option<PathBuf>,
    /// Kept detections (JSON Lines); standard output when omitted
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LossCheckArgs {
    /// Seed for the random gradient-check points
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Random points per gradient check
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    /// Write the JSON report here instead of standard output
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Event log (JSON Lines, sorted by timestamp)
    #[arg(long, value_name = "PATH")]
    pub events: PathBuf,
    /// Grid cell edge in meters [default: 10]
    #[arg(long, value_name = "FLOAT")]
    pub cell_size: Option<f64>,
    /// Distinct reports needed to warn [default: 3]
    #[arg(long, value_name = "INT")]
    pub threshold: Option<u32>,
    /// Confidence half-life [default: 24]
    #[arg(long, value_name = "FLOAT")]
    pub half_life_hours: Option<f64>,
    /// Per-device window in which repeat reports count once [default: 5]
    #[arg(long, value_name = "FLOAT")]
    pub debounce_seconds: Option<f64>,
    /// Confidence below which a decayed cell forgets its reports [default: 0.1]
    #[arg(long, value_name = "FLOAT")]
    pub rearm_confidence: Option<f64>,
    /// Write the JSON report here instead of standard output
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Warning messages as JSON Lines
    #[arg(long, value_name = "PATH")]
    pub warnings_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    InclusiveToHalfOpen,
    HalfOpenToInclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Annotations,
    Detections,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Source JSON Lines file
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Destination JSON Lines file
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
    /// Direction of the conversion
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Record type of the input file
    #[arg(long, value_enum, default_value_t = KindArg::Annotations)]
    pub kind: KindArg,
    /// Write the JSON report here instead of standard output
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

fn parse_iou(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if t > 0.0 && t <= 1.0 {
        Ok(t)
    } else {
        Err(format!("IoU threshold must be in (0, 1], got {s}"))
    }
}

fn parse_unit(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(format!("expected a value in [0, 1], got {s}"))
    }
}

fn parse_resolution(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w: u32 = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h: u32 = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    if w == 0 || h == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((w, h))
}

/// A failed invocation, carrying its exit code class.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Invalid(_) => EXIT_INVALID,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Invalid(e) | Failure::Runtime(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let invalid = e.chain().any(|cause| {
            if let Some(d) = cause.downcast_ref::<DatasetError>() {
                matches!(d, DatasetError::Invalid(_) | DatasetError::Conversion(_))
            } else if let Some(m) = cause.downcast_ref::<MetricsError>() {
                !matches!(m, MetricsError::Io(_) | MetricsError::Csv(_))
            } else if let Some(h) = cause.downcast_ref::<HazardError>() {
                !matches!(h, HazardError::Io(_))
            } else {
                cause.is::<StatsError>()
            }
        });
        if invalid {
            Failure::Invalid(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

macro_rules! failure_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                anyhow::Error::from(e).into()
            }
        }
    )*};
}

failure_from!(
    std::io::Error,
    serde_json::Error,
    DatasetError,
    MetricsError,
    HazardError,
    StatsError
);

/// Issues attached to a dataset validation failure anywhere in the chain.
fn issues_of(e: &anyhow::Error) -> &[Issue] {
    e.chain()
        .find_map(|c| c.downcast_ref::<DatasetError>())
        .map_or(&[], |d| d.issues())
}

pub(crate) struct Context<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
    pub reals: RealFormat,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match config::merge_config(args, &Cli::command()) {
        Ok(a) => a,
        Err(f) => return report_failure(f, err),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    let mut ctx = Context {
        out,
        err,
        reals: if cli.exact {
            RealFormat::Shortest
        } else {
            RealFormat::Fixed6
        },
    };
    let result = commands::execute(cli.command, &mut ctx);
    let _ = ctx.out.flush();
    match result {
        Ok(code) => code,
        Err(f) => report_failure(f, ctx.err),
    }
}

fn report_failure(f: Failure, err: &mut dyn Write) -> i32 {
    let e = f.error();
    let _ = writeln!(err, "error: {e:#}");
    let issues = issues_of(e);
    if issues.len() > 1 {
        for issue in issues {
            let _ = writeln!(err, "  {issue}");
        }
    }
    f.code()
}

/// The clap command tree, for help and completion tooling.
pub fn command() -> clap::Command {
    Cli::command()
}

//! `skipscope` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 input or data error,
//! 3 verification failure. Failures also print one JSON object on stderr with
//! `error` (a stable code) and `message`.

mod commands;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use skipscope_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "skipscope",
    version,
    about = "Layer-redundancy analysis and skip planning for multimodal transformer traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Redundancy and visual-attention profiles of one or more traces.
    Analyze(AnalyzeArgs),
    /// Late-entry and early-exit plan from profiles or traces.
    Plan(PlanArgs),
    /// Run the brute-force checks of the bounds and lemmas.
    Verify(VerifyArgs),
    /// Run the hand-wired toy model under a skip mode.
    Simulate(SimulateArgs),
    /// Decompose I(X; Y, Z) into unique, redundant and synergistic parts.
    Pid(PidArgs),
    /// Entropy bounds on adjacent-layer states of a quantized trace.
    InfoBounds(InfoBoundsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Report formats to write.
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["csv", "json"])]
    format: Vec<Format>,
}

impl OutputArgs {
    fn wants(&self, f: Format) -> bool {
        self.format.contains(&f)
    }
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Trace files; profiles pool tokens across all of them.
    #[arg(long, required = true, num_args = 1..)]
    trace: Vec<PathBuf>,
    /// Proximity threshold on cosine distance.
    #[arg(long, default_value_t = 0.05)]
    t: f64,
    /// Query token for the visual attention ratio; defaults to the answer token.
    #[arg(long)]
    query_token: Option<usize>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Profile CSV as written by `analyze`.
    #[arg(long, requires = "var", conflicts_with = "trace")]
    profile: Option<PathBuf>,
    /// VAR CSV as written by `analyze`.
    #[arg(long, requires = "profile")]
    var: Option<PathBuf>,
    /// Trace files to profile directly.
    #[arg(long, num_args = 1.., required_unless_present = "profile")]
    trace: Vec<PathBuf>,
    #[arg(long)]
    query_token: Option<usize>,
    #[arg(long, default_value_t = 0.03)]
    eps_geo: f64,
    #[arg(long, default_value_t = 0.10)]
    eps_prox: f64,
    #[arg(long, default_value_t = 0.05)]
    tau_var: f64,
    /// Proximity threshold; defaults to the profile's own, or 0.05 for traces.
    #[arg(long)]
    t: Option<f64>,
    /// Modality to skip.
    #[arg(long, default_value = "vision")]
    modality: String,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// thm1, thm2, thm5, prop1, lemma-unit-distance, lemma-three-vector, lemma-kl or all.
    #[arg(long, default_value = "all")]
    theorem: String,
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    /// Suite seed; defaults to SKIPSCOPE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Baseline,
    LateEntry,
    EarlyExit,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Number of blocks.
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Inclusive block range of the vision-to-answer transfer, as `a,b`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [5, 8])]
    copy_block: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, value_enum, default_value = "baseline")]
    mode: Mode,
    /// Entry or exit layer for the skip modes.
    #[arg(long, visible_aliases = ["entry", "exit"])]
    layer: Option<usize>,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    /// Model and dataset seed; defaults to SKIPSCOPE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Traces written for the first samples of the run.
    #[arg(long, default_value_t = 16)]
    max_traces: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PidArgs {
    /// JSON file `{"pmf": [[[p(x,y,z)]]]}` indexed `[x][y][z]`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InfoBoundsArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Codebook size of the shared quantizer.
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0.05)]
    t: f64,
    /// Quantizer seed; defaults to SKIPSCOPE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to one modality.
    #[arg(long)]
    modality: Option<String>,
    /// Restrict to one layer.
    #[arg(long)]
    layer: Option<usize>,
    #[command(flatten)]
    output: OutputArgs,
}

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub(crate) enum Failure {
    Usage(String),
    Data(Error),
    /// Carries the summary, which is still printed.
    Verification(String, serde_json::Value),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => Failure::Usage(m),
            other => Failure::Data(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(Error::Io(e))
    }
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Verification(..) => 3,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "USAGE",
            Failure::Data(e) => e.code(),
            Failure::Verification(..) => "VERIFICATION_FAILED",
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Verification(m, _) => m.clone(),
            Failure::Data(e) => e.to_string(),
        }
    }
}

pub(crate) type Outcome = std::result::Result<serde_json::Value, Failure>;

fn report_failure(f: &Failure) {
    eprintln!("{}", json!({ "error": f.code(), "message": f.message() }));
}

/// Seed from the flag, then `SKIPSCOPE_SEED`, then 0.
pub(crate) fn resolve_seed(flag: Option<u64>) -> std::result::Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("SKIPSCOPE_SEED") {
        Ok(v) => {
            v.trim().parse().map_err(|_| Failure::Usage(format!("SKIPSCOPE_SEED={v:?} is not an unsigned integer")))
        }
        Err(_) => Ok(0),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. The command's JSON summary goes to stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            let f = Failure::Usage(e.kind().to_string());
            report_failure(&f);
            return f.exit_code();
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::Plan(a) => commands::plan(a),
        Command::Verify(a) => commands::verify(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Pid(a) => commands::pid(a),
        Command::InfoBounds(a) => commands::info_bounds(a),
    };
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable summary"));
            0
        }
        Err(f) => {
            if let Failure::Verification(_, summary) = &f {
                println!("{}", serde_json::to_string_pretty(summary).expect("serializable summary"));
            }
            report_failure(&f);
            f.exit_code()
        }
    }
}

//! `replica`: generate traces, detect replicas, compute ground truth, report.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 malformed input, 64 usage error.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use replica_core::bounds::{self, DEFAULT_SUSPECT_THRESHOLD};
use replica_core::detector::DetectorConfig;
use replica_core::oracle::{self, GroundTruthReport};
use replica_core::pipeline::{self, DetectConfig, E2eError};
use replica_core::profile::Profile;
use replica_core::report::{self, AlphaSource};
use replica_core::sampling::SamplerConfig;
use replica_core::trace::{self, ReadError, TraceEvent};
use replica_core::watchpoint::Capacity;
use replica_core::workload::{self, GenConfig, ValueModel};

const EXIT_IO: u8 = 1;
const EXIT_MALFORMED: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "replica", version, about = "Sampling-based detection of replicated heap objects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace with known object groups.
    Gen(GenArgs),
    /// Replay a trace through the sampler and watchpoints; write a profile.
    Detect(DetectArgs),
    /// Exhaustive ground truth for a trace.
    Oracle(OracleArgs),
    /// Rank the contexts of a profile.
    Report(ReportArgs),
    /// Evaluate the bounds for given θ, α and object count.
    Bounds(BoundsArgs),
    /// Generate, detect, compute ground truth and compare in one go.
    E2e(E2eArgs),
}

#[derive(Clone, Copy, Debug)]
enum Seed {
    Fixed(u64),
    Random,
}

fn parse_seed(s: &str) -> Result<Seed, String> {
    if s == "random" {
        return Ok(Seed::Random);
    }
    s.parse().map(Seed::Fixed).map_err(|_| format!("expected a number or \"random\", got {s:?}"))
}

impl Seed {
    fn resolve(self) -> u64 {
        match self {
            Seed::Fixed(s) => s,
            Seed::Random => {
                let s = rand::random();
                eprintln!("using seed {s}");
                s
            }
        }
    }
}

/// A positive count, or no limit.
#[derive(Clone, Copy, Debug)]
struct Limit(Option<usize>);

fn parse_limit(s: &str, unlimited: &str) -> Result<Limit, String> {
    if s == unlimited {
        return Ok(Limit(None));
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("expected a positive number or \"{unlimited}\", got {s:?}")),
        Ok(n) => Ok(Limit(Some(n))),
    }
}

fn parse_watchpoints(s: &str) -> Result<Limit, String> {
    parse_limit(s, "unlimited")
}

fn parse_queue(s: &str) -> Result<Limit, String> {
    parse_limit(s, "unbounded")
}

fn parse_jitter(s: &str) -> Result<f64, String> {
    let j: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if (0.0..1.0).contains(&j) {
        Ok(j)
    } else {
        Err(format!("jitter must lie in [0, 1), got {j}"))
    }
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if (0.0..1.0).contains(&a) {
        Ok(a)
    } else {
        Err(format!("alpha must lie in [0, 1), got {a}"))
    }
}

fn parse_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("expected a value in [0, 1], got {v}"))
    }
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    /// Number of allocation contexts.
    #[arg(long, default_value_t = 4)]
    contexts: usize,
    /// Group sizes per context, comma separated; they sum to the object count.
    #[arg(long, value_delimiter = ',', default_value = "60,40")]
    groups: Vec<u64>,
    /// Object size in bytes, a multiple of 8.
    #[arg(long, default_value_t = 32)]
    object_size: u64,
    #[arg(long, default_value_t = 12)]
    reads: usize,
    #[arg(long, default_value_t = 4)]
    writes: usize,
    #[arg(long, default_value_t = 2)]
    threads: u32,
    /// distinct, correlated:P or near:D.
    #[arg(long, default_value = "distinct")]
    values: ValueModel,
}

impl WorkloadArgs {
    fn config(&self, seed: u64) -> GenConfig {
        GenConfig {
            contexts: self.contexts,
            objects_per_context: self.groups.iter().sum(),
            group_sizes: self.groups.clone(),
            object_size: self.object_size,
            reads_per_object: self.reads,
            writes_per_object: self.writes,
            threads: self.threads,
            values: self.values,
            seed,
        }
    }
}

#[derive(Args, Clone)]
struct SamplingArgs {
    /// Loads per sample on average.
    #[arg(long, default_value_t = 101, value_parser = clap::value_parser!(u64).range(1..))]
    period: u64,
    #[arg(long, default_value = "0.25", value_parser = parse_jitter)]
    jitter: f64,
    /// Watchpoint slots, or "unlimited".
    #[arg(long, default_value = "4", value_parser = parse_watchpoints)]
    watchpoints: Limit,
    /// Tuples kept per context queue, or "unbounded".
    #[arg(long, default_value = "64", value_parser = parse_queue)]
    queue_capacity: Limit,
}

impl SamplingArgs {
    fn config(&self, seed: u64) -> DetectConfig {
        DetectConfig {
            sampler: SamplerConfig { period: self.period, jitter: self.jitter, seed },
            watchpoints: match self.watchpoints.0 {
                Some(n) => Capacity::limited(n).expect("parser rejects zero"),
                None => Capacity::Unlimited,
            },
            detector: DetectorConfig { queue_capacity: self.queue_capacity.0 },
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// A number, or "random".
    #[arg(long, default_value = "24301", value_parser = parse_seed)]
    seed: Seed,
    /// Output file; stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    /// Trace file.
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long, default_value = "24301", value_parser = parse_seed)]
    seed: Seed,
    /// Unparseable trace lines tolerated before giving up.
    #[arg(long, default_value_t = 0)]
    skip_budget: usize,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 0)]
    skip_budget: usize,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Folded,
    Text,
}

#[derive(Args)]
struct ReportArgs {
    /// Profile file written by `detect`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[arg(long, default_value_t = DEFAULT_SUSPECT_THRESHOLD, value_parser = parse_unit)]
    threshold: f64,
    /// Ground-truth report written by `oracle`, for per-context α.
    #[arg(long)]
    alpha_from: Option<PathBuf>,
    /// α for contexts without oracle data.
    #[arg(long, default_value_t = 0.0, value_parser = parse_alpha)]
    alpha: f64,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long, value_parser = parse_unit)]
    theta: f64,
    #[arg(long, default_value_t = 0.0, value_parser = parse_alpha)]
    alpha: f64,
    /// Number of objects at the context.
    #[arg(long)]
    x: u64,
    /// Also print the scenario probabilities B and C.
    #[arg(long)]
    debug: bool,
}

#[derive(Args)]
struct E2eArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long, default_value = "24301", value_parser = parse_seed)]
    seed: Seed,
    #[arg(long, default_value_t = DEFAULT_SUSPECT_THRESHOLD, value_parser = parse_unit)]
    threshold: f64,
    /// Directory for trace, profile, oracle and report files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Self { code, message: message.to_string() }
    }
}

type Outcome = Result<(), Failure>;

fn write_output(path: Option<&Path>, text: &str) -> Outcome {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", p.display()))),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(|e| Failure::new(EXIT_IO, e))
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn load_trace(path: &Path, skip_budget: usize) -> Result<Vec<TraceEvent>, Failure> {
    let file = fs::File::open(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))?;
    match trace::read_trace(BufReader::new(file), skip_budget) {
        Ok(t) => {
            if t.skipped > 0 {
                eprintln!("skipped {} malformed records", t.skipped);
            }
            Ok(t.events)
        }
        Err(ReadError::Io(e)) => Err(Failure::new(EXIT_IO, format!("{}: {e}", path.display()))),
        Err(e) => Err(Failure::new(EXIT_MALFORMED, format!("{}: {e}", path.display()))),
    }
}

fn run_gen(args: GenArgs) -> Outcome {
    let cfg = args.workload.config(args.seed.resolve());
    let events = workload::generate(&cfg).map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let text = trace::write_trace(&events).map_err(|e| Failure::new(EXIT_USAGE, e))?;
    write_output(args.out.as_deref(), &text)
}

fn run_detect(args: DetectArgs) -> Outcome {
    let cfg = args.sampling.config(args.seed.resolve());
    let events = load_trace(&args.trace, args.skip_budget)?;
    let profile = pipeline::detect(&events, &cfg).map_err(|e| Failure::new(EXIT_MALFORMED, e))?;
    write_output(args.out.as_deref(), &profile.to_json())
}

fn run_oracle(args: OracleArgs) -> Outcome {
    let events = load_trace(&args.trace, args.skip_budget)?;
    let truth = oracle::exact_groups(&events).map_err(|e| Failure::new(EXIT_MALFORMED, e))?;
    write_output(args.out.as_deref(), &(truth.to_json() + "\n"))
}

fn run_report(args: ReportArgs) -> Outcome {
    let profile = Profile::from_json(&read_text(&args.input)?)
        .map_err(|e| Failure::new(EXIT_MALFORMED, format!("{}: {e}", args.input.display())))?;
    let alpha = match &args.alpha_from {
        Some(path) => {
            let truth = GroundTruthReport::from_json(&read_text(path)?)
                .map_err(|e| Failure::new(EXIT_MALFORMED, format!("{}: {e}", path.display())))?;
            AlphaSource::from_oracle(&truth, args.alpha)
        }
        None => AlphaSource::constant(args.alpha),
    };
    let ranked = report::rank(&profile, args.threshold, &alpha);
    if ranked.contexts.is_empty() {
        eprintln!("no comparisons recorded; nothing to rank");
    }
    let text = match args.format {
        Format::Json => report::emit_json(&ranked) + "\n",
        Format::Folded => report::emit_folded(&ranked),
        Format::Text => report::emit_text(&ranked),
    };
    write_output(args.out.as_deref(), &text)
}

fn run_bounds(args: BoundsArgs) -> Outcome {
    let b = bounds::bound_interval(args.theta, args.alpha, args.x).map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let flag = |clamped: bool| if clamped { " (clamped)" } else { "" };
    let mut text = format!(
        "A\t{}{}\nomega\t{}{}\ngamma\t{}{}\n",
        report::round_sig(b.a.value),
        flag(b.a.clamped),
        report::round_sig(b.omega.value),
        flag(b.omega.clamped),
        report::round_sig(b.gamma.value),
        flag(b.gamma.clamped),
    );
    if args.debug {
        let (_, pb, pc) = b.scenarios(args.alpha);
        text.push_str(&format!("B\t{}\nC\t{}\n", report::round_sig(pb), report::round_sig(pc)));
    }
    write_output(None, &text)
}

fn run_e2e(args: E2eArgs) -> Outcome {
    let seed = args.seed.resolve();
    let spec = args.workload.config(seed).to_spec().map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let cfg = args.sampling.config(seed);
    let out = pipeline::end_to_end(&spec, &cfg, args.threshold).map_err(|e| match e {
        E2eError::Gen(e) => Failure::new(EXIT_USAGE, e),
        other => Failure::new(EXIT_MALFORMED, other),
    })?;
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", dir.display())))?;
        let files = [
            ("trace.jsonl", out.trace.clone()),
            ("profile.json", out.profile.to_json()),
            ("oracle.json", out.truth.to_json() + "\n"),
            ("report.json", report::emit_json(&out.report) + "\n"),
        ];
        for (name, text) in files {
            write_output(Some(&dir.join(name)), &text)?;
        }
    }
    write_output(None, &pipeline::summary_text(&out.summary))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Detect(a) => run_detect(a),
        Command::Oracle(a) => run_oracle(a),
        Command::Report(a) => run_report(a),
        Command::Bounds(a) => run_bounds(a),
        Command::E2e(a) => run_e2e(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("replica: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dpmg::io::{self as dio, SerializedSketch, StreamFormat, TokenDictionary};
use dpmg::merge::{merge_all, privatize_merged_threshold, privatize_merged_universe};
use dpmg::oracle::{
    self, AuditConfig, AuditReport, BinnedCountEvents, ExhaustiveReport, KeySetEvents, NeighborPair,
};
use dpmg::pure::DEFAULT_UNIVERSE_CAP;
use dpmg::{
    postprocess, privatize_mg, privatize_pure, privatize_standard_mg, threshold_pmg, NoiseBackend,
    NoiseSampler, PrivacyParams, PrivateSummary, Sketch,
};

/// Differentially private Misra-Gries sketches.
#[derive(Parser)]
#[command(name = "dpmg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a sketch from a stream (one item per line).
    Build(BuildArgs),
    /// Release a sketch once under differential privacy.
    Release(ReleaseArgs),
    /// Merge two or more sketch files (left fold in argument order).
    Merge(MergeArgs),
    /// Compare a released summary with the exact counts of a stream.
    Eval(EvalArgs),
    /// Monte Carlo privacy audit on neighbouring streams.
    Audit(AuditArgs),
    /// Exhaustive property checks over all short streams.
    Enumerate(EnumerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Int,
    Token,
}

impl From<Format> for StreamFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Int => StreamFormat::Integers,
            Format::Token => StreamFormat::Tokens,
        }
    }
}

#[derive(clap::Args)]
struct BuildArgs {
    /// Number of counters.
    #[arg(short)]
    k: usize,
    /// Universe size; items are 1..=d.
    #[arg(short, long = "universe-size", visible_alias = "d")]
    d: u64,
    /// Input stream (stdin when omitted or "-").
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// Sketch file to write.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "int")]
    format: Format,
    /// Token dictionary (token<TAB>id); extended and rewritten in token
    /// mode. Defaults to <output>.tokens.tsv.
    #[arg(long)]
    dict: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Approx,
    Standard,
    Pure,
    MergedUniverse,
    MergedThreshold,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Laplace,
    Geometric,
}

#[derive(clap::Args)]
struct ReleaseArgs {
    /// Sketch file produced by build or merge.
    sketch: PathBuf,
    #[arg(long)]
    epsilon: f64,
    /// Required for every mechanism except pure and merged-universe.
    #[arg(long)]
    delta: Option<f64>,
    /// Failure probability of the reported error interval.
    #[arg(long, default_value_t = PrivacyParams::DEFAULT_BETA)]
    beta: f64,
    /// Noise seed; OS randomness when neither this nor MGDP_SEED is set.
    #[arg(long, env = "MGDP_SEED")]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "approx")]
    mechanism: MechanismArg,
    #[arg(long, value_enum, default_value = "laplace")]
    noise: NoiseArg,
    /// Largest universe the whole-universe mechanisms will scan.
    #[arg(long, default_value_t = DEFAULT_UNIVERSE_CAP)]
    max_universe: u64,
    /// Write the summary here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(clap::Args)]
struct MergeArgs {
    #[arg(required = true, num_args = 2..)]
    inputs: Vec<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Summary JSON produced by release.
    #[arg(long)]
    summary: PathBuf,
    /// Raw stream (stdin when omitted or "-").
    #[arg(short, long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "int")]
    format: Format,
    /// Token dictionary used when the sketch was built.
    #[arg(long)]
    dict: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AuditMechanism {
    Approx,
    Standard,
    /// Per-counter noise only, no shared noise, no threshold. Not private.
    Broken,
}

#[derive(Clone, Copy, ValueEnum)]
enum Events {
    /// The set of released keys.
    Keyset,
    /// Released keys with their count's quartile bin.
    Binned,
}

#[derive(clap::Args)]
struct AuditArgs {
    #[arg(short)]
    k: usize,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    delta: f64,
    #[arg(long, default_value_t = 200_000)]
    trials: u64,
    #[arg(long, env = "MGDP_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "approx")]
    mechanism: AuditMechanism,
    #[arg(long, value_enum, default_value = "keyset")]
    events: Events,
    /// Custom longer stream, comma separated. Without it a built-in set of
    /// worst-case neighbour pairs is audited.
    #[arg(long, value_delimiter = ',', requires_all = ["remove_index", "d"])]
    stream: Option<Vec<u64>>,
    /// Position deleted from --stream to form the neighbour.
    #[arg(long)]
    remove_index: Option<usize>,
    /// Universe size for --stream.
    #[arg(short)]
    d: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Check {
    Accuracy,
    Equivalence,
    NeighborStructure,
    Sensitivity,
    Merge,
    MergeStep,
    MergeOrders,
    All,
}

#[derive(clap::Args)]
struct EnumerateArgs {
    #[arg(long, value_enum, default_value = "all")]
    check: Check,
    #[arg(short)]
    d: u64,
    #[arg(long)]
    n_max: usize,
    #[arg(short)]
    k: usize,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("dpmg: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Build(a) => build(a),
        Command::Release(a) => release(a),
        Command::Merge(a) => merge(a),
        Command::Eval(a) => eval(a),
        Command::Audit(a) => audit(a),
        Command::Enumerate(a) => enumerate(a),
    }
}

fn default_dict(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".tokens.tsv");
    PathBuf::from(name)
}

fn build(a: BuildArgs) -> Result<ExitCode> {
    let format = StreamFormat::from(a.format);
    let dict_path = a.dict.clone().unwrap_or_else(|| default_dict(&a.output));
    let mut dict = match format {
        StreamFormat::Tokens => TokenDictionary::load_or_default(&dict_path)?,
        StreamFormat::Integers => TokenDictionary::new(),
    };
    let input = dio::open_input(a.input.as_deref())?;
    let sketch = dio::build_sketch(input, a.k, a.d, format, &mut dict).with_context(|| {
        format!(
            "reading {}",
            a.input
                .as_deref()
                .map_or("stdin".into(), |p| p.display().to_string())
        )
    })?;
    SerializedSketch::Mg(sketch).write(&a.output)?;
    if format == StreamFormat::Tokens {
        dict.save(&dict_path)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn release(a: ReleaseArgs) -> Result<ExitCode> {
    let needs_delta = !matches!(
        a.mechanism,
        MechanismArg::Pure | MechanismArg::MergedUniverse
    );
    let params = match (needs_delta, a.delta) {
        (true, None) => bail!("--delta is required for this mechanism"),
        // the delta is unused by the pure mechanisms; any valid placeholder
        // keeps the parameter checks uniform
        (false, _) => PrivacyParams::new(a.epsilon, 0.5, a.beta)?,
        (true, Some(delta)) => PrivacyParams::new(a.epsilon, delta, a.beta)?,
    };
    let stored = SerializedSketch::read(&a.sketch)
        .with_context(|| format!("loading {}", a.sketch.display()))?;
    let backend = match a.noise {
        NoiseArg::Laplace => NoiseBackend::Laplace,
        NoiseArg::Geometric => NoiseBackend::Geometric,
    };
    let seed = a.seed.unwrap_or_else(rand::random);
    let mut noise = NoiseSampler::new(seed, backend);

    let mechanism_name = a
        .mechanism
        .to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .to_owned();
    if matches!(
        a.mechanism,
        MechanismArg::Pure | MechanismArg::MergedUniverse
    ) && stored.d() > a.max_universe
    {
        bail!(dpmg::Error::UniverseTooLarge {
            d: stored.d(),
            cap: a.max_universe
        });
    }
    let kind_ok = match a.mechanism {
        MechanismArg::Approx | MechanismArg::Standard | MechanismArg::Pure => {
            matches!(stored, SerializedSketch::Mg(_))
        }
        MechanismArg::MergedUniverse | MechanismArg::MergedThreshold => true,
    };
    if !kind_ok {
        bail!("mechanism {mechanism_name} needs a single-stream sketch, not a merged one");
    }

    let note = format!(
        "{{\"mechanism\":\"{mechanism_name}\",\"epsilon\":{}}}\n",
        a.epsilon
    );
    dio::claim_release(&a.sketch, &note).with_context(|| {
        format!(
            "{} was already released (stamp {})",
            a.sketch.display(),
            dio::stamp_path(&a.sketch).display()
        )
    })?;

    let summary: PrivateSummary = match (a.mechanism, stored) {
        (MechanismArg::Approx, SerializedSketch::Mg(mut s)) => {
            privatize_mg(&mut s, &params, &mut noise)?
        }
        (MechanismArg::Standard, SerializedSketch::Mg(s)) => {
            privatize_standard_mg(&mut s.to_standard(), &params, &mut noise)?
        }
        (MechanismArg::Pure, SerializedSketch::Mg(s)) => {
            privatize_pure(&mut postprocess(&s), a.epsilon, a.max_universe, &mut noise)?
        }
        (MechanismArg::MergedUniverse, stored) => privatize_merged_universe(
            &mut stored.to_merged(),
            a.epsilon,
            a.max_universe,
            &mut noise,
        )?,
        (MechanismArg::MergedThreshold, stored) => {
            privatize_merged_threshold(&mut stored.to_merged(), &params, &mut noise)?
        }
        _ => unreachable!("sketch kind checked above"),
    };
    let text = summary.to_json()?;
    match &a.output {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn merge(a: MergeArgs) -> Result<ExitCode> {
    let sketches = a
        .inputs
        .iter()
        .map(|p| {
            SerializedSketch::read(p)
                .map(|s| s.to_merged())
                .with_context(|| format!("loading {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_all(&sketches)?.expect("at least two inputs");
    SerializedSketch::Merged(merged).write(&a.output)?;
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let summary = PrivateSummary::from_json(&dio::read_text(&a.summary)?)
        .with_context(|| format!("loading {}", a.summary.display()))?;
    let format = StreamFormat::from(a.format);
    let mut dict = match (&a.dict, format) {
        (Some(path), StreamFormat::Tokens) => TokenDictionary::load_or_default(path)?,
        _ => TokenDictionary::new(),
    };
    let hist = dio::read_histogram(
        dio::open_input(a.input.as_deref())?,
        summary.d,
        format,
        &mut dict,
    )?;
    let report = dio::evaluate(&summary, &hist)?;
    io::stdout().write_all(report.to_json()?.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn audit(a: AuditArgs) -> Result<ExitCode> {
    let params = PrivacyParams::new(a.epsilon, a.delta, PrivacyParams::DEFAULT_BETA)?;
    let pairs: Vec<(String, u64, NeighborPair)> = match (&a.stream, a.remove_index, a.d) {
        (Some(s), Some(i), Some(d)) => vec![("custom".into(), d, NeighborPair::new(s.clone(), i)?)],
        _ => oracle::worst_case_pairs(a.k, threshold_pmg(&params).ceil() as u64),
    };
    let config = AuditConfig::new(a.epsilon, a.delta, a.trials, a.seed);
    let mut stdout = io::stdout().lock();
    let mut any_flagged = false;
    for (name, d, pair) in pairs {
        let (k, mech) = (a.k, a.mechanism);
        let mut mechanism =
            move |s: &[u64], noise: &mut NoiseSampler| -> dpmg::Result<PrivateSummary> {
                let mut sketch = Sketch::from_stream(k, d, s)?;
                match mech {
                    AuditMechanism::Approx => privatize_mg(&mut sketch, &params, noise),
                    AuditMechanism::Standard => {
                        privatize_standard_mg(&mut sketch.to_standard(), &params, noise)
                    }
                    AuditMechanism::Broken => {
                        Ok(oracle::broken_release(&sketch, params.epsilon(), noise))
                    }
                }
            };
        let report: AuditReport = match a.events {
            Events::Keyset => oracle::dp_audit(&mut mechanism, &pair, &config, &KeySetEvents)?,
            Events::Binned => {
                let bins: BinnedCountEvents =
                    oracle::calibrate_bins(&mut mechanism, &pair, 2_000, a.seed)?;
                oracle::dp_audit(&mut mechanism, &pair, &config, &bins)?
            }
        };
        any_flagged |= !report.passed();
        let line = serde_json::json!({
            "pair": name,
            "longer": pair.longer,
            "shorter": pair.shorter,
            "passed": report.passed(),
            "report": report,
        });
        writeln!(stdout, "{line}")?;
    }
    Ok(if any_flagged {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn enumerate(a: EnumerateArgs) -> Result<ExitCode> {
    type Checker = fn(u64, usize, usize) -> dpmg::Result<ExhaustiveReport>;
    let all: [(Check, Checker); 7] = [
        (Check::Accuracy, oracle::check_sketch_accuracy),
        (Check::Equivalence, oracle::check_canonical_equivalence),
        (
            Check::NeighborStructure,
            oracle::check_neighbor_structure_exhaustive,
        ),
        (Check::Sensitivity, oracle::check_offset_sensitivity),
        (Check::Merge, oracle::check_merge_sensitivity),
        (Check::MergeStep, oracle::check_merge_step),
        (Check::MergeOrders, oracle::check_merge_orders),
    ];
    let mut stdout = io::stdout().lock();
    let mut failed = false;
    for (check, run) in all {
        if a.check != Check::All && a.check != check {
            continue;
        }
        let report = run(a.d, a.n_max, a.k)?;
        failed |= !report.passed();
        writeln!(stdout, "{}", serde_json::to_string(&report)?)?;
    }
    Ok(if failed {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

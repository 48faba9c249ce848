use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};

use rca_core::corpus::{ground_truth_corpus, MAP_TOML};
use rca_core::event_log::FormatError;
use rca_core::microvm::{MemoryMap, Vm};
use rca_core::pipeline::{analyze_full, AnalysisConfig, AnalyzeError, Depth, OutputFormat};
use rca_core::ranker::{RankParams, Strategies};
use rca_core::reverse_exec::Mode;
use rca_core::{assemble, Footprint, Image, Outcome, Parallelism};

#[derive(Parser)]
#[command(
    name = "trace-rca",
    version,
    about = "Reproduce a crash, then rank the instructions that led to it"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a program on a stimulus and record its footprint.
    Collect(CollectArgs),
    /// Rank root-cause candidates for a recorded crash.
    Analyze(AnalyzeArgs),
    /// Write the built-in ground-truth programs and their analyses to a directory.
    Corpus(CorpusArgs),
}

#[derive(Args)]
struct CollectArgs {
    /// Assembly source of the program.
    image: PathBuf,
    /// Memory map (TOML).
    #[arg(long)]
    map: PathBuf,
    /// Bytes served by the input port.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 1_000_000)]
    max_steps: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Recovery {
    Events,
    Noevents,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Assembly source the footprint was recorded from.
    image: PathBuf,
    footprint: PathBuf,
    /// Trailing actions to analyze: `full`, a count, or a percentage like `50%`.
    #[arg(long, default_value = "full", value_parser = parse_depth)]
    depth: Depth,
    #[arg(long, default_value = "both", value_parser = parse_strategies)]
    strategies: Strategies,
    #[arg(long, value_enum, default_value_t = Recovery::Events)]
    recovery: Recovery,
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Score multiplier for instructions seen only inside repeated loop iterations.
    #[arg(long, default_value_t = RankParams::default().sigma)]
    sigma: f64,
    /// Weight of the history-write boost.
    #[arg(long, default_value_t = RankParams::default().beta)]
    beta: f64,
    /// Repetitions needed before a run counts as a loop.
    #[arg(long, default_value_t = RankParams::default().min_reps)]
    min_reps: usize,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include phase timings in JSON output (makes it nondeterministic).
    #[arg(long)]
    timings: bool,
    /// Also write the recovered use-define chain as JSON lines.
    #[arg(long)]
    dump_chain: Option<PathBuf>,
}

#[derive(Args)]
struct CorpusArgs {
    dir: PathBuf,
    /// Analyze cases one after another instead of in parallel.
    #[arg(long)]
    sequential: bool,
}

fn parse_depth(s: &str) -> Result<Depth, String> {
    Depth::parse(s).ok_or_else(|| format!("expected `full`, a positive count or `1%`..`100%`, got `{s}`"))
}

fn parse_strategies(s: &str) -> Result<Strategies, String> {
    Strategies::parse(s).ok_or_else(|| format!("expected none, rl, hw or both, got `{s}`"))
}

/// A failure with a stable code printed as `error[CODE]: ...`.
struct Failure {
    code: &'static str,
    err: anyhow::Error,
}

impl Failure {
    fn new(code: &'static str, err: impl Into<anyhow::Error>) -> Failure {
        Failure { code, err: err.into() }
    }
}

impl From<AnalyzeError> for Failure {
    fn from(e: AnalyzeError) -> Failure {
        Failure::new(e.code(), e)
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|e| Failure::new("E_IO", e))
}

fn load_image(path: &Path) -> Result<Image, Failure> {
    assemble(&read(path)?).map_err(|e| Failure::new("E_ASSEMBLY", anyhow::anyhow!("{}: {e}", path.display())))
}

fn write_out(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(|e| Failure::new("E_IO", e))
}

fn collect(a: &CollectArgs) -> Result<u8, Failure> {
    let image = load_image(&a.image)?;
    let map = MemoryMap::from_toml(&read(&a.map)?)
        .map_err(|e| Failure::new("E_BAD_CONFIG", anyhow::anyhow!("{}: {e}", a.map.display())))?;
    let stimulus = match &a.input {
        Some(p) => fs::read(p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(|e| Failure::new("E_IO", e))?,
        None => Vec::new(),
    };
    let r = Vm::new(&image, &map)
        .and_then(|vm| vm.run(&stimulus, a.max_steps))
        .map_err(|e| Failure::new("E_BAD_CONFIG", e))?;
    let file = fs::File::create(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .map_err(|e| Failure::new("E_IO", e))?;
    let mut w = std::io::BufWriter::new(file);
    let bytes = r
        .footprint
        .write_to(&mut w)
        .and_then(|n| w.flush().map(|_| n).map_err(FormatError::Io))
        .map_err(|e| Failure::new("E_IO", e))?;
    let actions = r.footprint.actions.len();
    let (what, code) = match &r.outcome {
        Outcome::Crashed(c) => {
            let culprit = c.culprit.map(|k| format!(" culprit {k}")).unwrap_or_default();
            (
                format!(
                    "crashed: {} at 0x{:x}, fault 0x{:x}{culprit}",
                    c.reason.code(),
                    c.pc,
                    c.fault
                ),
                0,
            )
        }
        Outcome::Exited => ("exited".to_string(), 2),
        Outcome::StepLimit => (format!("step limit {} reached", a.max_steps), 3),
    };
    println!(
        "{what}; {actions} actions, {} data events, {bytes} bytes -> {}",
        r.footprint.data.len(),
        a.out.display()
    );
    Ok(code)
}

fn config(a: &AnalyzeArgs) -> AnalysisConfig {
    AnalysisConfig {
        depth: a.depth,
        strategies: a.strategies,
        mode: match a.recovery {
            Recovery::Events => Mode::WithEvents,
            Recovery::Noevents => Mode::NoEvents,
        },
        top_k: a.top,
        params: RankParams {
            sigma: a.sigma,
            beta: a.beta,
            min_reps: a.min_reps,
        },
        format: match a.format {
            Format::Text => OutputFormat::Text,
            Format::Json => OutputFormat::Json,
        },
        timings: a.timings,
    }
}

fn analyze(a: &AnalyzeArgs) -> Result<u8, Failure> {
    let image = load_image(&a.image)?;
    let fp = Footprint::parse(&read(&a.footprint)?).map_err(|e| match e {
        FormatError::Io(e) => Failure::new("E_IO", e),
        e => Failure::new("E_FOOTPRINT_FORMAT", anyhow::anyhow!("{}: {e}", a.footprint.display())),
    })?;
    let cfg = config(a);
    let analysis = analyze_full(&image, &fp, &cfg)?;
    if let Some(p) = &a.dump_chain {
        write_out(p, &analysis.chain.dump_jsonl())?;
    }
    let text = match cfg.format {
        OutputFormat::Json => analysis.report.to_json(),
        OutputFormat::Text => analysis.report.to_text(Some(&analysis.timings)),
    };
    match &a.out {
        Some(p) => write_out(p, &text)?,
        None => print!("{text}"),
    }
    Ok(0)
}

fn corpus(a: &CorpusArgs) -> Result<u8, Failure> {
    let cases = ground_truth_corpus();
    let mode = if a.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    let lines = rca_core::par::map(&cases, mode, |case| -> Result<String, Failure> {
        let dir = a.dir.join(&case.name);
        fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(|e| Failure::new("E_IO", e))?;
        let c = case.collect();
        write_out(&dir.join("program.s"), &case.source)?;
        write_out(&dir.join("map.toml"), MAP_TOML)?;
        fs::write(dir.join("stimulus.bin"), &case.stimulus).map_err(|e| Failure::new("E_IO", e))?;
        let fp = c.run.footprint.to_jsonl().map_err(|e| Failure::new("E_IO", e))?;
        write_out(&dir.join("footprint.jsonl"), &fp)?;
        let a = analyze_full(&c.image, &c.run.footprint, &AnalysisConfig::default())?;
        write_out(&dir.join("report.json"), &a.report.to_json())?;
        let root = case.root_pc(&c.image);
        let rank = a.scored.iter().find(|s| s.pc == root).map(|s| s.rank);
        Ok(format!(
            "{:<22} {:<12} {:>6} actions  root 0x{root:08x} rank {}",
            case.name,
            case.family.name(),
            c.run.footprint.actions.len(),
            rank.map_or("-".to_string(), |r| r.to_string())
        ))
    });
    let mut hits = 0;
    for l in lines {
        let l = l?;
        if l.split_whitespace()
            .last()
            .and_then(|r| r.parse::<usize>().ok())
            .is_some_and(|r| r <= 10)
        {
            hits += 1;
        }
        println!("{l}");
    }
    println!("{hits}/{} roots in the top 10", cases.len());
    Ok(0)
}

fn main() -> ExitCode {
    // Usage errors exit 1 so that 2 and 3 stay reserved for collect outcomes.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!(
                "error[E_BAD_CONFIG]: {}",
                e.render().to_string().trim_start_matches("error: ").trim_end()
            );
            return ExitCode::from(1);
        }
    };
    let res = match &cli.cmd {
        Cmd::Collect(a) => collect(a),
        Cmd::Analyze(a) => analyze(a),
        Cmd::Corpus(a) => corpus(a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error[{}]: {:#}", f.code, f.err);
            ExitCode::from(1)
        }
    }
}

//! `bayguard`: runs process bus attack scenarios and reports on them.
//!
//! Exit status: 0 when every expectation holds, 1 when any fails, 2 on a
//! configuration or I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bayguard::scenario::{
    self, ExportFormats, Mode, RunReport, ScenarioConfig, ScenarioError, SuiteReport,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bayguard", version, about = "Process bus attack scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write all artifacts.
    Run(RunArgs),
    /// Run every config in a directory, or the bundled suite.
    Suite(SuiteArgs),
    /// Run one scenario and write only the selected artifacts.
    Export(ExportArgs),
    /// Check a config without running it.
    Validate(Source),
    /// Print the JSON schema for scenario configs.
    Schema,
    /// List the bundled scenarios.
    List,
}

#[derive(Args)]
struct Source {
    /// Scenario config file.
    #[arg(long, required_unless_present = "bundled", conflicts_with = "bundled")]
    config: Option<PathBuf>,
    /// Name of a bundled scenario instead of a file.
    #[arg(long)]
    bundled: Option<String>,
}

#[derive(Args)]
struct Overrides {
    /// Replaces the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the config's relay mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    /// Directory of scenario configs (*.json).
    #[arg(long, required_unless_present = "bundled", conflicts_with = "bundled")]
    dir: Option<PathBuf>,
    /// Run the bundled scenarios.
    #[arg(long)]
    bundled: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Artifact families to write.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "pcap,csv,jsonl")]
    format: Vec<FormatArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Resilience,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Resilience => Mode::Resilience,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Pcap,
    Csv,
    Jsonl,
}

impl Overrides {
    fn apply(&self, mut cfg: ScenarioConfig) -> ScenarioConfig {
        if let Some(m) = self.mode {
            cfg = cfg.with_mode(m.into());
        }
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        cfg
    }
}

fn load(source: &Source) -> Result<ScenarioConfig, ScenarioError> {
    match (&source.config, &source.bundled) {
        (Some(path), _) => ScenarioConfig::load(path),
        (None, Some(name)) => scenario::bundled(name),
        (None, None) => unreachable!("clap requires one source"),
    }
}

fn print_report(report: &RunReport, out_dir: &Path) {
    for e in &report.expectations {
        println!("  [{}] {}", if e.passed { "PASS" } else { "FAIL" }, e.message);
    }
    let t = &report.timing;
    if let Some(trip) = t.first_trip {
        println!("  trip at {trip:.6} s via {:?}", t.trip_path.expect("trip has a path"));
    }
    if let Some(block) = t.first_block {
        println!("  first block at {block:.6} s");
    }
    if let Some(none) = t.sync_none_at {
        println!("  smpSynch left GLOBAL at {none:.6} s");
    }
    println!(
        "{} {} ({}, seed {}) -> {}",
        if report.passed { "PASS" } else { "FAIL" },
        report.scenario,
        report.mode,
        report.seed,
        out_dir.display()
    );
}

fn print_suite(suite: &SuiteReport, out_dir: &Path) {
    for s in &suite.scenarios {
        let r = &s.report;
        println!(
            "{} {:<28} {:<10} trip={}",
            if r.passed { "PASS" } else { "FAIL" },
            s.name,
            r.mode.to_string(),
            r.timing
                .first_trip
                .map_or_else(|| "-".to_owned(), |t| format!("{t:.6}s")),
        );
        for e in r.expectations.iter().filter(|e| !e.passed) {
            println!("    {}", e.message);
        }
    }
    println!(
        "{}/{} scenarios passed -> {}",
        suite.passed,
        suite.total,
        out_dir.join("suite.json").display()
    );
}

fn execute(cli: Cli) -> Result<bool, ScenarioError> {
    let started = Instant::now();
    let passed = match cli.command {
        Command::Run(args) => {
            let cfg = args.overrides.apply(load(&args.source)?);
            let report = scenario::run_to_dir(&cfg, &args.out_dir)?;
            print_report(&report, &args.out_dir);
            report.passed
        }
        Command::Export(args) => {
            let cfg = args.overrides.apply(load(&args.source)?);
            let formats = ExportFormats {
                pcap: args.format.contains(&FormatArg::Pcap),
                csv: args.format.contains(&FormatArg::Csv),
                jsonl: args.format.contains(&FormatArg::Jsonl),
            };
            let result = scenario::run(&cfg)?;
            let report = scenario::export_formats(&result, &args.out_dir, formats)?;
            print_report(&report, &args.out_dir);
            report.passed
        }
        Command::Suite(args) => {
            let mode = args.overrides.mode.map(Mode::from);
            let suite = match &args.dir {
                Some(dir) => scenario::run_suite(dir, &args.out_dir, mode, args.overrides.seed)?,
                None => scenario::run_suite_configs(
                    scenario::bundled_suite(),
                    &args.out_dir,
                    mode,
                    args.overrides.seed,
                )?,
            };
            print_suite(&suite, &args.out_dir);
            suite.all_passed
        }
        Command::Validate(source) => {
            let cfg = load(&source)?;
            cfg.validate()?;
            println!("{}: valid", cfg.name);
            true
        }
        Command::Schema => {
            print!("{}", scenario::schema_json());
            true
        }
        Command::List => {
            for (name, _) in scenario::BUNDLED.iter().chain(scenario::REFERENCE) {
                let cfg = scenario::bundled(name)?;
                println!("{name:<24} {}", cfg.description);
            }
            true
        }
    };
    eprintln!("finished in {:.2} s", started.elapsed().as_secs_f64());
    Ok(passed)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

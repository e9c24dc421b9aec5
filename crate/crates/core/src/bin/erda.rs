//! Command-line driver: workload runs, crash enumeration, cleaning stress
//! tests and report merging.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use erda::codec::Scheme;
use erda::harness::{
    self, audit_trace, comparison_table, merge_csv, CleanTestSpec, CrashScenario, CrashTestSpec,
    HarnessConfig, HarnessError, RunOptions, CONFIG_KEYS, CSV_HEADER,
};

#[derive(Parser)]
#[command(
    name = "erda",
    version,
    about = "Simulated remote-NVM key-value store experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load keys and replay workloads for every configured scheme, mix, value
    /// size and client count.
    Run(RunArgs),
    /// Enumerate crash points of scripted histories and check every read
    /// afterwards.
    Crashtest(CrashArgs),
    /// Clean a log head while clients keep reading and writing.
    Cleantest(CleanArgs),
    /// Merge run CSVs and print schemes side by side.
    Report(ReportArgs),
    /// List the configuration keys `--config` files and `--set` accept.
    Keys,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set clients=1,8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write CSV rows here instead of standard output.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the run phase's event trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Dump the final NVM image of each run.
    #[arg(long)]
    nvm_dump: Option<PathBuf>,
    /// Recount every counter from the event trace and fail on a mismatch.
    #[arg(long)]
    audit: bool,
    /// Print full reports as JSON lines instead of summaries.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CrashArgs {
    #[arg(long, default_value = "erda")]
    scheme: Scheme,
    #[arg(long, default_value = "client-crash-mid-put")]
    scenario: CrashScenario,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Persistence unit in bytes.
    #[arg(long, default_value_t = 64)]
    unit: usize,
    /// Seeded schedules for `server-crash-restart`.
    #[arg(long, default_value_t = 200)]
    schedules: usize,
    /// Only run the seeded schedules of `server-crash-restart`.
    #[arg(long)]
    seeded_only: bool,
    /// Directory for crashed images.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[arg(long, hide = true)]
    skip_verify: bool,
}

#[derive(Args)]
struct CleanArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of seeds to run, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    runs: u64,
    #[arg(long, default_value_t = 4)]
    clients: usize,
    #[arg(long, default_value_t = 24)]
    keys: usize,
    #[arg(long, default_value_t = 60)]
    ops: usize,
    /// Fraction of gets among the concurrent operations.
    #[arg(long, default_value_t = 0.5)]
    read_fraction: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// CSV files written by `run`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Write the merged CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Run(a) => run(a),
        Command::Crashtest(a) => crashtest(a),
        Command::Cleantest(a) => cleantest(a),
        Command::Report(a) => report(a),
        Command::Keys => {
            for (k, d) in CONFIG_KEYS {
                println!("{k:<26} {d}");
            }
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// `base` itself for a single run, otherwise `base` with a per-run suffix.
fn per_run_path(base: &Path, single: bool, tag: &str) -> PathBuf {
    if single {
        return base.to_path_buf();
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let name = match base.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}-{tag}.{ext}"),
        None => format!("{stem}-{tag}"),
    };
    base.with_file_name(name)
}

fn run(a: RunArgs) -> Result<bool, HarnessError> {
    let mut cfg = match &a.config {
        Some(p) => HarnessConfig::from_file(p)?,
        None => HarnessConfig::default(),
    };
    for pair in &a.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = a.seed {
        cfg.workload.seed = seed;
    }
    let single =
        cfg.schemes.len() * cfg.mixes.len() * cfg.value_sizes.len() * cfg.clients.len() == 1;
    let opts = RunOptions {
        trace: a.trace.is_some() || a.audit,
        nvm_dump: None,
    };
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut trace_out = String::new();
    let mut audit_ok = true;
    for &scheme in &cfg.schemes {
        for &mix in &cfg.mixes {
            for &value_size in &cfg.value_sizes {
                let spec = erda::workload::WorkloadSpec {
                    mix,
                    value_size,
                    ..cfg.workload.clone()
                };
                let run_cfg = cfg.for_run(&spec);
                for &clients in &cfg.clients {
                    let tag = format!(
                        "{}-{}-{}-{}",
                        scheme.name(),
                        mix.name(),
                        value_size,
                        clients
                    );
                    let opts = RunOptions {
                        nvm_dump: a.nvm_dump.as_deref().map(|p| per_run_path(p, single, &tag)),
                        ..opts.clone()
                    };
                    let r = harness::run(scheme, &run_cfg, clients, &opts)?;
                    if a.json {
                        println!("{}", serde_json::to_string(&r).expect("report serializes"));
                    } else {
                        println!("{}", r.summary());
                    }
                    csv.push_str(&r.csv_rows());
                    let trace = r.trace.as_deref().unwrap_or_default();
                    if a.audit {
                        match audit_trace(trace, &r.counters) {
                            Ok(()) => eprintln!("audit {tag}: counters match the trace"),
                            Err(bad) => {
                                audit_ok = false;
                                for b in bad {
                                    eprintln!("audit {tag}: {b}");
                                }
                            }
                        }
                    }
                    if a.trace.is_some() {
                        for t in trace {
                            trace_out
                                .push_str(&serde_json::to_string(t).expect("trace serializes"));
                            trace_out.push('\n');
                        }
                    }
                    if r.failed_ops > 0 {
                        eprintln!("{tag}: {} operations failed", r.failed_ops);
                        audit_ok = false;
                    }
                }
            }
        }
    }
    match &a.csv {
        Some(p) => fs::write(p, &csv)?,
        None if !a.json => print!("{csv}"),
        None => {}
    }
    if let Some(p) = &a.trace {
        fs::write(p, trace_out)?;
    }
    Ok(audit_ok)
}

fn crashtest(a: CrashArgs) -> Result<bool, HarnessError> {
    let spec = CrashTestSpec {
        scheme: a.scheme,
        scenario: a.scenario,
        unit: a.unit,
        seed: a.seed,
        schedules: a.schedules,
        seeded_only: a.seeded_only,
        skip_verify: a.skip_verify,
        dump_dir: a.dump_dir,
    };
    let r = harness::crashtest(&spec)?;
    if a.json {
        println!("{}", serde_json::to_string(&r).expect("report serializes"));
    } else {
        println!(
            "{} {}: {} cases, {} failures, {} exact repairs ({} entries)",
            r.scheme, r.scenario, r.cases, r.failures, r.exact_repairs, r.repaired_entries
        );
        if !r.phases_cut.is_empty() {
            let phases: Vec<&str> = r.phases_cut.iter().map(String::as_str).collect();
            println!("cleaning phases cut: {}", phases.join(", "));
        }
        if let Some(c) = &r.counterexample {
            println!("first failure: {c}");
        }
    }
    Ok(r.passed())
}

fn cleantest(a: CleanArgs) -> Result<bool, HarnessError> {
    let mut ok = true;
    for seed in a.seed..a.seed + a.runs.max(1) {
        let spec = CleanTestSpec {
            seed,
            clients: a.clients,
            keys: a.keys,
            ops_per_client: a.ops,
            read_fraction: a.read_fraction,
            ..CleanTestSpec::default()
        };
        let r = harness::cleantest(&spec)?;
        if a.json {
            println!("{}", serde_json::to_string(&r).expect("report serializes"));
        } else {
            println!(
                "seed {seed}: {} ops, {} violations, reclaimed {} (expected {}), latency during \
                 cleaning {:.1}ns vs {:.1}ns outside, post-clean get {:.1} reads and {} cpu events, \
                 restart {}",
                r.ops,
                r.violations,
                r.reclaimed_bytes,
                r.expected_reclaimed_bytes,
                r.mean_latency_during_ns,
                r.mean_latency_outside_ns,
                r.post_reads_per_get,
                r.post_cpu_events,
                if r.survives_restart { "ok" } else { "FAILED" }
            );
            if let Some(c) = &r.counterexample {
                println!("first violation: {c}");
            }
        }
        ok &= r.passed();
    }
    Ok(ok)
}

fn report(a: ReportArgs) -> Result<bool, HarnessError> {
    let texts = a
        .inputs
        .iter()
        .map(fs::read_to_string)
        .collect::<Result<Vec<_>, _>>()?;
    let merged = merge_csv(&texts)?;
    if let Some(p) = &a.out {
        fs::write(p, &merged)?;
    }
    print!("{}", comparison_table(&merged)?);
    Ok(true)
}

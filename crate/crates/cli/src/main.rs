use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tlpf::config::{apply_override, parse_config, parse_intensity_list};
use tlpf::harness::{
    collect_packets, parse_filter_list, run_experiment_with, ExperimentOptions, Scenario,
    ScenarioConfig,
};
use tlpf::output::{fmt_sig6, write_bundle};
use tlpf::transfer::{read_packets, write_packets};
use tlpf::FilterError;

#[derive(Parser)]
#[command(name = "tlpf", version, about = "Transfer-learning particle filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo experiment and write CSV tables
    Run(RunArgs),
    /// Write the source-filter transfer packets of every run
    DumpPackets {
        #[command(flatten)]
        common: Common,
        /// Output packet file
        file: PathBuf,
    },
    /// Run the primary filters on packets read from a file
    ReplayPackets {
        #[command(flatten)]
        common: Common,
        /// Packet file written by `dump-packets`
        file: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Write zeros in the timing column
        #[arg(long)]
        no_timing: bool,
    },
    /// Run the built-in oracle checks
    Selftest,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario defaults to use without a config file
    #[arg(long)]
    scenario: Option<String>,
    /// Monte-Carlo run count
    #[arg(long)]
    mc: Option<usize>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Filter roster, e.g. pf:3000,tl-pf:3000,ukf,tl-ukf,ckf3,tl-ckf3
    #[arg(long)]
    filters: Option<String>,
    /// Primary intensity sweep (default 1..8)
    #[arg(long, num_args = 0..=1, default_missing_value = "1..8", value_name = "LIST")]
    iw_sweep: Option<String>,
    /// Extra `key=value` config overrides
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Also write the source packets to FILE
    #[arg(long, value_name = "FILE")]
    dump_packets: Option<PathBuf>,
    /// Use source packets from FILE instead of running the source filters
    #[arg(long, value_name = "FILE")]
    replay_packets: Option<PathBuf>,
    /// Write zeros in the timing column
    #[arg(long)]
    no_timing: bool,
}

fn load_config(c: &Common) -> Result<ScenarioConfig, FilterError> {
    let mut cfg = match &c.config {
        Some(path) => parse_config(path)?,
        None => {
            let s: Scenario = c.scenario.as_deref().unwrap_or("S1").parse()?;
            ScenarioConfig::defaults(s)
        }
    };
    if let (Some(_), Some(s)) = (&c.config, &c.scenario) {
        apply_override(&mut cfg, "scenario", s)?;
    }
    if let Some(mc) = c.mc {
        cfg.mc = mc;
    }
    if let Some(seed) = c.seed {
        cfg.master_seed = Some(seed);
    }
    if let Some(f) = &c.filters {
        cfg.filters = parse_filter_list(f)?;
    }
    if let Some(sweep) = &c.iw_sweep {
        cfg.i_primary = parse_intensity_list(sweep)?;
    }
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            FilterError::InvalidConfig(format!("--set expects KEY=VALUE, got '{kv}'"))
        })?;
        apply_override(&mut cfg, k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_packet_file(path: &Path) -> Result<tlpf::transfer::PacketLog, FilterError> {
    let f = File::open(path).map_err(|e| FilterError::Io(format!("{}: {e}", path.display())))?;
    read_packets(BufReader::new(f))
}

fn write_packet_file(path: &Path, log: &tlpf::transfer::PacketLog) -> Result<(), FilterError> {
    let f = File::create(path).map_err(|e| FilterError::Io(format!("{}: {e}", path.display())))?;
    write_packets(BufWriter::new(f), log)
}

fn experiment(
    common: &Common,
    out_dir: &Path,
    dump: Option<&Path>,
    replay: Option<&Path>,
    timing: bool,
) -> Result<(), FilterError> {
    let cfg = load_config(common)?;
    let opts = ExperimentOptions {
        threads: common.threads,
        replay: replay.map(read_packet_file).transpose()?,
        record_packets: dump.is_some(),
    };
    let result = run_experiment_with(&cfg, &opts)?;
    if let (Some(path), Some(log)) = (dump, &result.packets) {
        write_packet_file(path, log)?;
    }
    let mut extra = vec![("timing", timing.to_string())];
    if let Some(p) = replay {
        extra.push(("replay_packets", p.display().to_string()));
    }
    let paths = write_bundle(out_dir, &cfg, &result, timing, &extra)?;
    println!("{:<14} {:>6} {:>14} {:>14}", "filter", "I_w", "overall_rmse", "ms_per_step");
    for c in &result.cells {
        println!(
            "{:<14} {:>6} {:>14} {:>14}",
            c.filter.id(),
            fmt_sig6(c.i_w),
            fmt_sig6(c.metrics.overall_rmse),
            fmt_sig6(c.metrics.time_per_step_ms)
        );
        if c.metrics.degenerate_weight_events > 0 {
            eprintln!(
                "warning: {} had {} degenerate weight resets",
                c.filter.id(),
                c.metrics.degenerate_weight_events
            );
        }
    }
    println!("wrote {}", paths.overall.parent().unwrap_or(out_dir).display());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<ExitCode, FilterError> {
    match cmd {
        Command::Run(a) => {
            experiment(
                &a.common,
                &a.out_dir,
                a.dump_packets.as_deref(),
                a.replay_packets.as_deref(),
                !a.no_timing,
            )?;
        }
        Command::DumpPackets { common, file } => {
            let cfg = load_config(&common)?;
            let log = collect_packets(&cfg, common.threads)?;
            write_packet_file(&file, &log)?;
            println!("wrote {} packet series to {}", log.len(), file.display());
        }
        Command::ReplayPackets {
            common,
            file,
            out_dir,
            no_timing,
        } => experiment(&common, &out_dir, None, Some(&file), !no_timing)?,
        Command::Selftest => {
            let checks = tlpf::selftest::run_all();
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{} {:<40} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            println!("{} checks, {} failed", checks.len(), failed);
            if failed > 0 {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

//! Runs a scenario file (or a seed sweep of it) and writes the trace,
//! observation records and summary.
//!
//! Exit codes: 0 all properties held, 1 a property was violated or the stop
//! condition was not met, 2 bad input or I/O failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use ibft_core::parallel::Execution;
use ibft_core::proposer::ProposerMode;
use ibft_core::scenario::{summary_json, trace_jsonl, Overrides, Scenario};

#[derive(Parser, Debug)]
#[command(name = "ibft-sim", version, about = "IBFT 2.0 scenario runner")]
struct Args {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for summary.json, trace.jsonl and records.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Runs seeds LO..HI (exclusive) and writes an aggregate report instead.
    #[arg(long, value_parser = parse_range)]
    sweep: Option<(u64, u64)>,
    /// Accepts more Byzantine validators than tolerated.
    #[arg(long)]
    allow_overload: bool,
    #[arg(long)]
    fast_forward: bool,
    /// sticky, round-robin, sticky-fair or round-robin-fair.
    #[arg(long)]
    proposer_mode: Option<ProposerMode>,
    /// Runs sweep seeds one after another.
    #[arg(long)]
    sequential: bool,
}

fn parse_range(s: &str) -> Result<(u64, u64), String> {
    let (lo, hi) = s.split_once("..").ok_or("expected LO..HI")?;
    let lo: u64 = lo.trim().parse().map_err(|e| format!("bad LO: {e}"))?;
    let hi: u64 = hi.trim().parse().map_err(|e| format!("bad HI: {e}"))?;
    if lo > hi {
        return Err("LO must not exceed HI".into());
    }
    Ok((lo, hi))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), String> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn run(args: &Args) -> Result<i32, String> {
    let text = fs::read_to_string(&args.scenario)
        .map_err(|e| format!("cannot read {}: {e}", args.scenario.display()))?;
    let overrides = Overrides {
        seed: args.seed,
        allow_overload: args.allow_overload,
        fast_forward: args.fast_forward,
        proposer_mode: args.proposer_mode,
    };
    let scenario = Scenario::parse(&text)
        .map_err(|e| e.to_string())?
        .with_overrides(&overrides);
    scenario.validate().map_err(|e| e.to_string())?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    }

    if let Some((lo, hi)) = args.sweep {
        let exec = if args.sequential { Execution::Sequential } else { Execution::Parallel };
        let report = scenario.sweep(lo..hi, exec).map_err(|e| e.to_string())?;
        let json = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
        if let Some(dir) = &args.out {
            write(dir, "sweep.json", &json)?;
        }
        print!("{json}");
        return Ok(report.exit_code());
    }

    let trace = args.out.is_some();
    let out = scenario.run(trace).map_err(|e| e.to_string())?;
    let summary = summary_json(&out.summary);
    if let Some(dir) = &args.out {
        write(dir, "summary.json", &summary)?;
        write(dir, "trace.jsonl", &trace_jsonl(out.world.trace().unwrap_or_default()))?;
        let records: Vec<String> = out
            .world
            .records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialises"))
            .collect();
        write(dir, "records.jsonl", &trace_jsonl(&records))?;
    }
    for v in &out.violations {
        eprintln!("safety violation at height {}: {} distinct blocks", v.height, v.blocks.len());
    }
    print!("{summary}");
    Ok(out.summary.exit_code())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use fade10g::acceptance::{self, emission_schedule, fig4_scenario};
use fade10g::netsim::{render_trace, run_scenario, DataPattern, Scenario, SimError, SourceModel};
use fade10g::scenario::{ScenarioFile, ScenarioFileError};
use fade10g::sender::EarlyRetransmit;
use fade10g::stats::ScenarioStats;

#[derive(Debug, Parser)]
#[command(name = "fade10g", version, about = "Simulate a reliable raw-Ethernet word-stream transport over a lossy link")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the channel seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the event trace to PATH.
    #[arg(long, global = true, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Print nothing on success.
    #[arg(long, global = true)]
    quiet: bool,
    /// Write stats JSON to PATH.
    #[arg(long, global = true, value_name = "PATH")]
    json: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario file.
    Run { file: PathBuf },
    /// Replay the scripted early-retransmission example.
    Fig4,
    /// Goodput and retransmissions across a range of loss rates.
    Sweep {
        /// Loss range as start:end:step, applied to both directions.
        #[arg(long)]
        loss: LossRange,
        #[arg(long, default_value_t = 1000)]
        packets: u64,
    },
    /// Run the built-in acceptance checks.
    Selftest,
}

#[derive(Debug, Clone, PartialEq)]
struct LossRange(Vec<f64>);

impl FromStr for LossRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        let [start, end, step] = parts[..] else {
            return Err("expected start:end:step".into());
        };
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start > end {
            return Err("loss bounds must satisfy 0 <= start <= end <= 1".into());
        }
        if !(step > 0.0) {
            return Err("step must be positive".into());
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        Ok(LossRange((0..=n).map(|i| start + i as f64 * step).collect()))
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
}

impl From<ScenarioFileError> for CliError {
    fn from(e: ScenarioFileError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::BadScenario(_) => CliError::Usage(e.to_string()),
            SimError::ScenarioDeadlock { .. } => CliError::Failure(e.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

/// Scenario failure reasons visible in the stats.
fn judge(stats: &ScenarioStats) -> Result<(), CliError> {
    if stats.protocol_errors > 0 {
        return Err(CliError::Failure(format!("{} protocol errors", stats.protocol_errors)));
    }
    if stats.integrity_errors > 0 {
        return Err(CliError::Failure(format!("{} words failed the integrity check", stats.integrity_errors)));
    }
    if !stats.completed {
        return Err(CliError::Failure(format!("stream incomplete at the time limit (t={})", stats.simulated_duration)));
    }
    Ok(())
}

fn cmd_run(cli: &Cli, file: &Path) -> Result<(), CliError> {
    let file_cfg = ScenarioFile::load(file)?;
    let mut scenario = file_cfg.to_scenario(cli.seed)?;
    let trace_path = cli.trace.clone().or_else(|| file_cfg.run.trace_path.clone());
    scenario.trace |= trace_path.is_some();
    let report = run_scenario(scenario)?;
    if let Some(path) = cli.json.clone().or_else(|| file_cfg.run.json_path.clone()) {
        write_file(&path, &report.stats.to_json())?;
    }
    match trace_path {
        Some(path) => write_file(&path, &render_trace(&report.trace))?,
        None if file_cfg.run.trace && !cli.quiet => print!("{}", render_trace(&report.trace)),
        None => {}
    }
    if !cli.quiet {
        print!("{}", report.stats.to_text());
    }
    judge(&report.stats)
}

fn cmd_fig4(cli: &Cli) -> Result<(), CliError> {
    let mut stats = Vec::new();
    let mut full_trace = String::new();
    for (label, mode) in [("with sequence numbers", EarlyRetransmit::SequenceNumbers), ("packet numbers only", EarlyRetransmit::PacketNumbers)] {
        let mut scenario = fig4_scenario(mode);
        if let Some(seed) = cli.seed {
            scenario.channel.seed = seed;
        }
        let report = run_scenario(scenario)?;
        if !cli.quiet {
            println!("# {label}");
            for r in emission_schedule(&report.trace) {
                println!("{r}");
            }
            let retx = |pkt: u32| {
                report
                    .trace
                    .iter()
                    .filter(|r| r.frame.packet == Some(pkt) && matches!(r.action, "retransmit" | "early_retransmit"))
                    .count()
            };
            println!(
                "# packet 2 retransmitted {}x, packet 4 retransmitted {}x, spurious {}\n",
                retx(2),
                retx(4),
                report.stats.spurious_retransmissions
            );
        }
        full_trace.push_str(&format!("# {label}\n{}", render_trace(&report.trace)));
        judge(&report.stats)?;
        stats.push(report.stats);
    }
    if let Some(path) = &cli.trace {
        write_file(path, &full_trace)?;
    }
    if let Some(path) = &cli.json {
        write_file(path, &to_json(&stats))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    loss: f64,
    stats: ScenarioStats,
}

fn cmd_sweep(cli: &Cli, losses: &[f64], packets: u64) -> Result<(), CliError> {
    let results: Vec<Result<SweepRow, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = losses
            .iter()
            .map(|&loss| {
                s.spawn(move || {
                    let mut scenario = Scenario::default();
                    scenario.source = SourceModel::packets(packets, DataPattern::Counter);
                    scenario.channel = scenario.channel.with_loss(loss);
                    if let Some(seed) = cli.seed {
                        scenario.channel.seed = seed;
                    }
                    run_scenario(scenario).map(|r| SweepRow { loss, stats: r.stats })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let rows: Vec<SweepRow> = results.into_iter().collect::<Result<_, _>>()?;
    if !cli.quiet {
        println!("{:>6}  {:>8}  {:>8}  {:>10}  {:>12}  intact", "loss", "retx", "early", "goodput", "duration");
        for r in &rows {
            let s = &r.stats;
            let intact = s.completed && s.integrity_errors == 0;
            println!(
                "{:>6.3}  {:>8}  {:>8}  {:>10.5}  {:>12}  {}",
                r.loss, s.retransmissions, s.early_retransmissions, s.goodput_fraction, s.simulated_duration, intact
            );
        }
    }
    if let Some(path) = &cli.json {
        write_file(path, &to_json(&rows))?;
    }
    rows.iter().try_for_each(|r| judge(&r.stats))
}

#[derive(Debug, Serialize)]
struct SelftestLine {
    criterion: u8,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn cmd_selftest(cli: &Cli) -> Result<(), CliError> {
    let outcomes = acceptance::run_all();
    if !cli.quiet {
        for o in &outcomes {
            println!("{}", o.line());
        }
    }
    if let Some(path) = &cli.json {
        let lines: Vec<_> = outcomes
            .iter()
            .map(|o| SelftestLine { criterion: o.number, title: o.title, passed: o.passed, detail: o.detail.clone() })
            .collect();
        write_file(path, &to_json(&lines))?;
    }
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.passed).map(|o| o.number).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failure(format!("failed criteria: {failed:?}")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match &cli.command {
        Command::Run { file } => cmd_run(&cli, file),
        Command::Fig4 => cmd_fig4(&cli),
        Command::Sweep { loss, packets } => cmd_sweep(&cli, &loss.0, *packets),
        Command::Selftest => cmd_selftest(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fade10g: {e}");
            ExitCode::from(match e {
                CliError::Failure(_) => 1,
                CliError::Usage(_) => 2,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_range_is_inclusive() {
        let r: LossRange = "0:0.1:0.05".parse().unwrap();
        assert_eq!(r.0.len(), 3);
        assert!((r.0[2] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn bad_loss_ranges() {
        assert!("0:0.1".parse::<LossRange>().is_err());
        assert!("0.2:0.1:0.05".parse::<LossRange>().is_err());
        assert!("0:1:0".parse::<LossRange>().is_err());
        assert!("0:x:0.1".parse::<LossRange>().is_err());
    }
}

//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{
    Checkpoint, GridConfig, GridOptions, PreparedData, RECORD_FILE, ResultsStore, RunConfig,
    RunRecord, RunStatus, assemble_pairs, build_pair, comparison_tables, correlation_series,
    run_grid, train,
};
use crate::stats::{
    ComparisonTable, CorrelationRow, Target, correlation_report, write_correlation_csv,
};

/// Exit status for a run that diverged.
pub const EXIT_DIVERGED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "sparseflow", version, about = "Capacity-matched sparse vs dense MLP experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration into a results store.
    Run(RunArgs),
    /// Train every configuration of a grid into a results store.
    Grid(GridArgs),
    /// Paired Wilcoxon tables (optimizer × regularizer) from a store.
    Compare(CompareArgs),
    /// Averaged |Kendall tau| between flow measures and test metrics.
    Correlate(StoreArgs),
    /// Comparison tables and correlation report in one HTML page plus CSVs.
    Report(CompareArgs),
    /// Check a config's capacity matching, or a store's stored runs.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config field, e.g. `--set optimizer.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Dataset root; dataset directories live below it.
    #[arg(long, env = "SPARSEFLOW_DATA", default_value = "data")]
    pub data_dir: PathBuf,
    /// Results store directory.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
    /// Shorthand for `--set seed=N` (grids: the seed axis becomes `[N]`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for `--set epochs=N` (grids: the base epochs).
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Skip runs already finished in the store.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    /// Results store to read.
    #[arg(long)]
    pub store: PathBuf,
    /// Output directory; defaults to `<store>/reports`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl StoreArgs {
    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.store.join("reports"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Accuracy,
    Loss,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Target {
        match t {
            TargetArg::Accuracy => Target::Accuracy,
            TargetArg::Loss => Target::Loss,
        }
    }
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// Final test metric compared; the alternative is always sparse > dense.
    #[arg(long, value_enum, default_value = "accuracy")]
    pub target: TargetArg,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Config whose matched pair is built and checked.
    #[arg(long, conflicts_with = "store")]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE", requires = "config")]
    pub overrides: Vec<String>,
    /// Store whose runs are checked.
    #[arg(long)]
    pub store: Option<PathBuf>,
}

/// Parses `std::env::args` and runs the command; 0 on success, 2 when a run
/// diverged, 1 on any error.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Grid(a) => cmd_grid(&a),
        Command::Compare(a) => {
            let written = cmd_compare(&a.store.store, &a.store.out_dir(), a.target.into())?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Correlate(a) => {
            let path = cmd_correlate(&a.store, &a.out_dir())?;
            print!("{}", fs::read_to_string(&path).map_err(|e| Error::io("reading report", e))?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Report(a) => {
            let path = cmd_report(&a.store.store, &a.store.out_dir(), a.target.into())?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify(a) => cmd_verify(&a),
    }
}

fn run_overrides(c: &ConfigArgs) -> Vec<String> {
    let mut o = c.overrides.clone();
    if let Some(s) = c.seed {
        o.push(format!("seed={s}"));
    }
    if let Some(e) = c.epochs {
        o.push(format!("epochs={e}"));
    }
    o
}

fn cmd_run(a: &RunArgs) -> Result<ExitCode> {
    let c = &a.common;
    let config = RunConfig::load(&c.config, &run_overrides(c))?;
    let data = PreparedData::load(&config.dataset, &c.data_dir)?;
    let store = ResultsStore::open(&c.out)?;
    let (record, state) = train(&config, &data)?;
    let dir = store.save_run(&record, &state)?;
    println!("{}", dir.display());
    eprintln!(
        "{}: test accuracy {:.4}, test loss {:.4}, {:.1}s",
        config.run_name(),
        record.final_test_accuracy,
        record.final_test_loss,
        record.wall_clock_secs
    );
    if let Some(e) = record.diverged_at {
        eprintln!("diverged at epoch {e}");
        return Ok(ExitCode::from(EXIT_DIVERGED));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_grid(a: &GridArgs) -> Result<ExitCode> {
    let c = &a.common;
    let mut overrides: Vec<String> = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("axes.seeds=[{s}]"));
        overrides.push(format!("base.seed={s}"));
    }
    if let Some(e) = c.epochs {
        overrides.push(format!("base.epochs={e}"));
    }
    let grid = GridConfig::load(&c.config, &overrides)?;
    let runs = grid.expand()?;
    let store = ResultsStore::open(&c.out)?;
    eprintln!("{} runs into {}", runs.len(), c.out.display());
    let summary = run_grid(
        &runs,
        &c.data_dir,
        &store,
        GridOptions {
            jobs: a.jobs,
            resume: a.resume,
        },
    )?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if !summary.failed.is_empty() {
        return Err(Error::invalid(format!("{} runs failed", summary.failed.len())));
    }
    Ok(ExitCode::SUCCESS)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn comparison(store: &Path, target: Target) -> Result<(Vec<ComparisonTable>, Vec<String>)> {
    let records = ResultsStore::open(store)?.records()?;
    let assembly = assemble_pairs(&records, target)?;
    Ok((comparison_tables(&assembly)?, assembly.diverged))
}

#[derive(Serialize)]
struct ComparisonIndex<'a> {
    target: &'a str,
    tables: Vec<(&'a str, String, String)>,
    diverged: &'a [String],
}

/// Writes `comparison-<i>.csv` and `.html` per table plus `comparison.json`
/// (titles, file names, diverged runs). Returns the written paths.
pub fn cmd_compare(store: &Path, out: &Path, target: Target) -> Result<Vec<PathBuf>> {
    let (tables, diverged) = comparison(store, target)?;
    create_dir(out)?;
    let mut written = Vec::new();
    let mut index = ComparisonIndex {
        target: target.as_str(),
        tables: Vec::new(),
        diverged: &diverged,
    };
    for (i, t) in tables.iter().enumerate() {
        let csv_name = format!("comparison-{i}.csv");
        let html_name = format!("comparison-{i}.html");
        let mut buf = Vec::new();
        t.write_csv(&mut buf)?;
        write_file(&out.join(&csv_name), &buf)?;
        write_file(&out.join(&html_name), t.to_html().as_bytes())?;
        written.push(out.join(&csv_name));
        written.push(out.join(&html_name));
        index.tables.push((&t.title, csv_name, html_name));
    }
    let idx = out.join("comparison.json");
    write_file(&idx, serde_json::to_string_pretty(&index)?.as_bytes())?;
    written.push(idx);
    Ok(written)
}

fn correlation(store: &Path) -> Result<Vec<CorrelationRow>> {
    let records = ResultsStore::open(store)?.records()?;
    correlation_report(&correlation_series(&records))
}

/// Writes `correlation.csv`: every measure × architecture × target row.
pub fn cmd_correlate(store: &Path, out: &Path) -> Result<PathBuf> {
    let rows = correlation(store)?;
    create_dir(out)?;
    let path = out.join("correlation.csv");
    let mut buf = Vec::new();
    write_correlation_csv(&rows, &mut buf)?;
    write_file(&path, &buf)?;
    Ok(path)
}

/// Comparison and correlation outputs plus `report.html` combining them.
pub fn cmd_report(store: &Path, out: &Path, target: Target) -> Result<PathBuf> {
    cmd_compare(store, out, target)?;
    cmd_correlate(store, out)?;
    let (tables, diverged) = comparison(store, target)?;
    let rows = correlation(store)?;
    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>sparseflow report</title></head><body>\n");
    html.push_str(&format!(
        "<h1>Sparse vs dense: final test {}</h1>\n",
        target.as_str()
    ));
    for t in &tables {
        html.push_str(&t.to_html());
    }
    if !diverged.is_empty() {
        html.push_str("<h2>Diverged runs (excluded)</h2>\n<ul>\n");
        for d in &diverged {
            html.push_str(&format!("<li>{d}</li>\n"));
        }
        html.push_str("</ul>\n");
    }
    html.push_str("<h2>Average |Kendall tau| with test metrics</h2>\n<table class=\"sparseflow-correlation\">\n<tr><th>measure</th><th>architecture</th><th>target</th><th>avg |tau|</th><th>runs</th></tr>\n");
    for r in &rows {
        html.push_str(&format!(
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}/{}</td></tr>\n",
            r.measure.label(),
            r.architecture,
            r.target.as_str(),
            r.avg_abs_tau.map_or("&ndash;".to_string(), |v| format!("{v:.3}")),
            r.runs_used,
            r.runs_total
        ));
    }
    html.push_str("</table>\n</body></html>\n");
    let path = out.join("report.html");
    write_file(&path, html.as_bytes())?;
    Ok(path)
}

fn cmd_verify(a: &VerifyArgs) -> Result<ExitCode> {
    let mut stdout = std::io::stdout().lock();
    let emit = |out: &mut dyn Write, line: String| {
        let _ = writeln!(out, "{line}");
    };
    if let Some(path) = &a.config {
        let config = RunConfig::load(path, &a.overrides)?;
        let pair = build_pair(&config)?;
        for l in &pair.report.layers {
            emit(&mut stdout, format!("{l:?}"));
        }
        emit(&mut stdout, "capacity: exact".into());
        return Ok(ExitCode::SUCCESS);
    }
    let Some(store_dir) = &a.store else {
        return Err(Error::invalid("verify needs --config or --store"));
    };
    let problems = verify_store(store_dir)?;
    for p in &problems {
        emit(&mut stdout, format!("FAIL {p}"));
    }
    if problems.is_empty() {
        emit(&mut stdout, "store: ok".into());
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}

/// Checks every finished run: config hash, schedule coverage, and for
/// checkpointed sparse runs that masked weights and optimizer moments are zero.
pub fn verify_store(dir: &Path) -> Result<Vec<String>> {
    let store = ResultsStore::open(dir)?;
    let mut problems = Vec::new();
    for entry in store.manifest().runs.values() {
        if entry.status == RunStatus::Failed {
            continue;
        }
        let run_dir = dir.join(&entry.dir);
        let record: RunRecord = serde_json::from_str(
            &fs::read_to_string(run_dir.join(RECORD_FILE))
                .map_err(|e| Error::io(format!("reading {}", run_dir.display()), e))?,
        )?;
        let name = &entry.name;
        if record.config.hash() != entry.hash || record.config_hash != entry.hash {
            problems.push(format!("{name}: config hash mismatch"));
        }
        if !record.diverged() && record.flow.len() != record.measurement_epochs.len() {
            problems.push(format!("{name}: flow readings do not cover the schedule"));
        }
        if record.checkpoint.is_some() {
            let (_, state) = Checkpoint::load(&run_dir)?;
            if let Some(mask) = &state.mask {
                let groups = state.network.weights.iter().chain(
                    state
                        .optimizer
                        .first
                        .iter()
                        .take(mask.num_layers())
                        .chain(state.optimizer.second.iter().take(mask.num_layers())),
                );
                for (i, w) in groups.enumerate() {
                    let m = &mask.layers()[i % mask.num_layers()];
                    let leaked = w
                        .as_slice()
                        .iter()
                        .zip(m.as_slice())
                        .any(|(&v, &b)| b == 0.0 && v != 0.0);
                    if leaked {
                        problems.push(format!("{name}: nonzero value at a masked position"));
                        break;
                    }
                }
            }
        }
    }
    Ok(problems)
}

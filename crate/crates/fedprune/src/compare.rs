//! `fedprune compare`: run every (strategy, seed) cell of a comparison
//! matrix on an otherwise identical config, in parallel, and emit per-cell
//! results plus a mean ± stdev table per strategy. Cell failures are
//! recorded in place of aborting the matrix.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use fedprune_core::fed::{run_experiment, Strategy};

use crate::config::load_config;
use crate::run::map_fed;
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct CompareArgs {
    /// JSON experiment config shared by every cell.
    pub config: PathBuf,
    /// Comma-separated strategies; at least two.
    #[arg(long, value_delimiter = ',', required = true)]
    pub strategies: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    /// Directory the comparison artifacts are written into.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Cell {
    strategy: String,
    seed: u64,
    final_eval_loss: Option<f64>,
    final_perplexity: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct StrategyRow {
    strategy: String,
    n: usize,
    mean_loss: Option<f64>,
    stdev_loss: Option<f64>,
    mean_perplexity: Option<f64>,
    stdev_perplexity: Option<f64>,
    failures: usize,
}

#[derive(Debug, Serialize)]
struct Comparison {
    seeds: Vec<u64>,
    cells: Vec<Cell>,
    table: Vec<StrategyRow>,
}

fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() < 2 {
        0.0
    } else {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    (mean, var.sqrt())
}

fn render_table(comparison: &Comparison) -> String {
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:<16} {:>3}  {:>22}  {:>22}",
        "strategy", "n", "final eval loss", "final perplexity"
    );
    for row in &comparison.table {
        let fmt_pair = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.6} +/- {s:.6}"),
            _ => "-".into(),
        };
        let _ = writeln!(
            text,
            "{:<16} {:>3}  {:>22}  {:>22}",
            row.strategy,
            row.n,
            fmt_pair(row.mean_loss, row.stdev_loss),
            fmt_pair(row.mean_perplexity, row.stdev_perplexity),
        );
    }
    let failed: Vec<&Cell> = comparison.cells.iter().filter(|c| c.error.is_some()).collect();
    if !failed.is_empty() {
        let _ = writeln!(text, "failed cells:");
        for cell in failed {
            let _ = writeln!(
                text,
                "  {} seed {}: {}",
                cell.strategy,
                cell.seed,
                cell.error.as_deref().unwrap_or("")
            );
        }
    }
    text
}

pub fn cmd_compare(args: CompareArgs) -> CliResult {
    let strategies: Vec<Strategy> = args
        .strategies
        .iter()
        .map(|s| s.parse::<Strategy>().map_err(CliError::Usage))
        .collect::<Result<_, _>>()?;
    if strategies.len() < 2 {
        return Err(CliError::Usage("compare needs at least two strategies".into()));
    }
    for (i, s) in strategies.iter().enumerate() {
        if strategies[..i].contains(s) {
            return Err(CliError::Usage(format!("strategy {s} listed twice")));
        }
    }
    let mut seeds = args.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() != args.seeds.len() {
        return Err(CliError::Usage("seeds must be distinct".into()));
    }

    let cfg = load_config(&args.config)?;
    let jobs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let cells: Vec<Cell> = jobs
        .par_iter()
        .map(|&(strategy, seed)| {
            let mut exp = cfg.experiment.clone();
            exp.strategy = strategy;
            exp.seed = seed;
            let outcome = exp
                .validate()
                .map_err(map_fed)
                .and_then(|()| run_experiment(&exp).map_err(map_fed));
            match outcome {
                Ok(out) => Cell {
                    strategy: strategy.to_string(),
                    seed,
                    final_eval_loss: Some(out.summary.final_eval_loss),
                    final_perplexity: Some(out.summary.final_perplexity),
                    error: None,
                },
                Err(e) => Cell {
                    strategy: strategy.to_string(),
                    seed,
                    final_eval_loss: None,
                    final_perplexity: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let table = strategies
        .iter()
        .map(|s| {
            let name = s.to_string();
            let ok: Vec<&Cell> =
                cells.iter().filter(|c| c.strategy == name && c.error.is_none()).collect();
            let losses: Vec<f64> = ok.iter().filter_map(|c| c.final_eval_loss).collect();
            let ppls: Vec<f64> = ok.iter().filter_map(|c| c.final_perplexity).collect();
            let failures = seeds.len() - ok.len();
            if losses.is_empty() {
                StrategyRow {
                    strategy: name,
                    n: 0,
                    mean_loss: None,
                    stdev_loss: None,
                    mean_perplexity: None,
                    stdev_perplexity: None,
                    failures,
                }
            } else {
                let (ml, sl) = mean_stdev(&losses);
                let (mp, sp) = mean_stdev(&ppls);
                StrategyRow {
                    strategy: name,
                    n: losses.len(),
                    mean_loss: Some(ml),
                    stdev_loss: Some(sl),
                    mean_perplexity: Some(mp),
                    stdev_perplexity: Some(sp),
                    failures,
                }
            }
        })
        .collect();

    let comparison = Comparison { seeds, cells, table };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let json = serde_json::to_string_pretty(&comparison)
        .map_err(|e| CliError::Runtime(format!("comparison serialization: {e}")))?;
    std::fs::write(args.out.join("comparison.json"), json)
        .map_err(|e| CliError::Runtime(format!("comparison write: {e}")))?;
    let text = render_table(&comparison);
    std::fs::write(args.out.join("comparison.txt"), &text)
        .map_err(|e| CliError::Runtime(format!("comparison write: {e}")))?;
    print!("{text}");
    Ok(())
}

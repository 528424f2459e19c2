//! Seeded multi-run execution, per-run CSV logs and cross-seed aggregation.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::plot::{plot_curves, Series};
use super::write_atomic;
use crate::agent::{run, EpisodeRow, RunRecord};
use crate::context::{quantile, snapshot};
use crate::error::{Error, Result};

/// Episodes at the end of a run summarized by [`FinalWindow`].
pub const FINAL_WINDOW: usize = 50;

pub const RUN_COLUMNS: [&str; 8] = [
    "episode",
    "shaped_return",
    "raw_return",
    "epsilon",
    "buffer_size",
    "gated",
    "refit_count",
    "refit_seconds",
];

pub const AGGREGATE_COLUMNS: [&str; 6] = ["episode", "n_seeds", "mean", "median", "q25", "q75"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub episode: u64,
    pub n_seeds: usize,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Statistics of the shaped returns pooled over the last episodes of every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalWindow {
    pub first_episode: u64,
    pub last_episode: u64,
    pub samples: usize,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub rows: Vec<AggregateRow>,
    pub final_window: Option<FinalWindow>,
}

#[derive(Debug)]
pub struct SuiteOutput {
    pub records: Vec<RunRecord>,
    pub aggregate: AggregateSummary,
    /// Every file written, in creation order.
    pub artifacts: Vec<PathBuf>,
}

impl SuiteOutput {
    pub fn failures(&self) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(|r| !r.complete)
    }
}

/// Per-episode statistics of shaped return across runs. Runs that stopped
/// early contribute only the episodes they completed.
pub fn aggregate(records: &[RunRecord]) -> AggregateSummary {
    let episodes = records.iter().map(|r| r.rows.len()).max().unwrap_or(0);
    let rows = (0..episodes)
        .map(|i| {
            let values: Vec<f64> = records
                .iter()
                .filter_map(|r| r.rows.get(i).map(|row| row.shaped_return))
                .collect();
            let (mean, median, q25, q75) = stats(&values);
            AggregateRow {
                episode: i as u64 + 1,
                n_seeds: values.len(),
                mean,
                median,
                q25,
                q75,
            }
        })
        .collect();
    let first = episodes.saturating_sub(FINAL_WINDOW) + 1;
    AggregateSummary {
        rows,
        final_window: window(records, first as u64, episodes as u64),
    }
}

/// Pooled statistics of shaped returns over episodes `first..=last`.
pub fn window(records: &[RunRecord], first: u64, last: u64) -> Option<FinalWindow> {
    let values: Vec<f64> = records
        .iter()
        .flat_map(|r| r.rows.iter())
        .filter(|row| (first..=last).contains(&row.episode))
        .map(|row| row.shaped_return)
        .collect();
    if values.is_empty() {
        return None;
    }
    let (mean, median, q25, q75) = stats(&values);
    Some(FinalWindow {
        first_episode: first,
        last_episode: last,
        samples: values.len(),
        mean,
        median,
        q25,
        q75,
    })
}

fn stats(values: &[f64]) -> (f64, f64, f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let q = |p| quantile(values, p).expect("non-empty sample");
    (mean, q(0.5), q(0.25), q(0.75))
}

pub fn run_csv_name(seed: u64) -> String {
    format!("run_seed{seed}.csv")
}

pub fn write_run_csv<W: Write>(out: W, rows: &[EpisodeRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(RUN_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_run_csv(path: &Path) -> Result<Vec<EpisodeRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(RUN_COLUMNS) {
        return Err(Error::InvalidInput(format!(
            "{}: expected columns {}",
            path.display(),
            RUN_COLUMNS.join(",")
        )));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_aggregate_csv<W: Write>(out: W, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(AGGREGATE_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(AGGREGATE_COLUMNS) {
        return Err(Error::InvalidInput(format!(
            "{}: expected columns {}",
            path.display(),
            AGGREGATE_COLUMNS.join(",")
        )));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Runs one agent per seed on a pool of `config.workers` threads, then writes
/// `run_seed{seed}.csv`, `aggregate.csv`, `summary.json`, `curve.svg` and,
/// when enabled, `buffer_seed{seed}.tsv` into `config.out_dir`. A failing run
/// is kept as an incomplete record and listed in `failures.txt`.
pub fn run_suite(config: &ExperimentConfig) -> Result<SuiteOutput> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;

    let out = &config.out_dir;
    let results: Vec<Result<(RunRecord, Vec<PathBuf>)>> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| {
                let record = run(&config.agent_config(seed))?;
                let mut written = Vec::new();
                let csv_path = out.join(run_csv_name(seed));
                write_atomic(&csv_path, |w| write_run_csv(w, &record.rows))?;
                written.push(csv_path);
                if config.snapshots {
                    let tsv = out.join(format!("buffer_seed{seed}.tsv"));
                    write_atomic(&tsv, |w| snapshot::write(w, &record.buffer))?;
                    written.push(tsv);
                }
                Ok((record, written))
            })
            .collect()
    });

    let mut records = Vec::with_capacity(results.len());
    let mut artifacts = Vec::new();
    for result in results {
        let (record, written) = result?;
        log::info!(
            "seed {}: {} episodes, {} refits{}",
            record.seed,
            record.rows.len(),
            record.refit_count,
            if record.complete { "" } else { " (incomplete)" }
        );
        records.push(record);
        artifacts.extend(written);
    }

    let summary = aggregate(&records);
    let agg_path = out.join("aggregate.csv");
    write_atomic(&agg_path, |w| write_aggregate_csv(w, &summary.rows))?;
    artifacts.push(agg_path);

    let json_path = out.join("summary.json");
    write_atomic(&json_path, |w| {
        serde_json::to_writer_pretty(&mut *w, &summary.final_window).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(w.write_all(b"\n")?)
    })?;
    artifacts.push(json_path);

    if !summary.rows.is_empty() {
        let label = format!("{} / {}", config.env, config.operator);
        let svg = plot_curves(&[Series::from_aggregate(label, &summary.rows)], &[])?;
        let svg_path = out.join("curve.svg");
        write_atomic(&svg_path, |w| Ok(w.write_all(svg.as_bytes())?))?;
        artifacts.push(svg_path);
    }

    let failed: Vec<&RunRecord> = records.iter().filter(|r| !r.complete).collect();
    if !failed.is_empty() {
        let path = out.join("failures.txt");
        write_atomic(&path, |w| {
            for r in &failed {
                writeln!(w, "seed {}: {}", r.seed, r.error.as_deref().unwrap_or("unknown error"))?;
            }
            Ok(())
        })?;
        artifacts.push(path);
    }

    Ok(SuiteOutput {
        records,
        aggregate: summary,
        artifacts,
    })
}

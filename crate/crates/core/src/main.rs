use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use icrl::context::snapshot;
use icrl::harness::{load_config, load_series, plot_curves, run_suite, write_atomic};

#[derive(Parser)]
#[command(name = "icrl", version, about = "In-context fitted Q iteration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one agent per configured seed and write logs, aggregates and a plot.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Concurrent runs; overrides run.workers.
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory; overrides output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot learning curves from aggregate CSVs, run CSVs or suite directories.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        baseline: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a buffer snapshot by episode tag.
    InspectBuffer {
        path: PathBuf,
        /// Also print every transition.
        #[arg(long)]
        rows: bool,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, workers, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if let Some(dir) = out {
                cfg.out_dir = dir;
            }
            let suite = run_suite(&cfg)?;
            for path in &suite.artifacts {
                println!("{}", path.display());
            }
            if let Some(fw) = &suite.aggregate.final_window {
                println!(
                    "episodes {}-{}: median shaped return {:.3} (IQR {:.3} to {:.3})",
                    fw.first_episode, fw.last_episode, fw.median, fw.q25, fw.q75
                );
            }
            let failed = suite.failures().count();
            if failed > 0 {
                bail!("{failed} of {} runs failed; see failures.txt", suite.records.len());
            }
        }
        Command::Plot { inputs, baseline, out } => {
            let series = inputs.iter().map(|p| load_series(p)).collect::<Result<Vec<_>, _>>()?;
            let baselines = baseline.iter().map(|p| load_series(p)).collect::<Result<Vec<_>, _>>()?;
            let svg = plot_curves(&series, &baselines)?;
            write_atomic(&out, |w| Ok(w.write_all(svg.as_bytes())?))?;
            println!("{}", out.display());
        }
        Command::InspectBuffer { path, rows } => {
            let file = std::fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let transitions = snapshot::read(file)?;
            let mut by_tag: BTreeMap<u64, (usize, f64, f64)> = BTreeMap::new();
            for t in &transitions {
                let e = by_tag.entry(t.tag.0).or_default();
                e.0 += 1;
                e.1 += t.shaped_reward;
                e.2 += t.raw_reward;
            }
            println!("{} transitions in {} episodes", transitions.len(), by_tag.len());
            println!("{:>8} {:>12} {:>14} {:>12}", "tag", "transitions", "shaped_sum", "raw_sum");
            for (tag, (n, shaped, raw)) in &by_tag {
                let name = if *tag == 0 { "initial".to_string() } else { tag.to_string() };
                println!("{name:>8} {n:>12} {shaped:>14.4} {raw:>12.4}");
            }
            if rows {
                let mut out = std::io::stdout().lock();
                snapshot::write(&mut out, &transitions)?;
            }
        }
    }
    Ok(())
}

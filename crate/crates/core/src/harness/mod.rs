//! Experiment orchestration: config files, seeded suites, CSV logs and plots.

pub mod config;
pub mod plot;
pub mod suite;

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use plot::{load_series, plot_curves, Series};
pub use suite::{aggregate, run_suite, AggregateRow, AggregateSummary, FinalWindow, SuiteOutput};

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never observe a half-written file.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

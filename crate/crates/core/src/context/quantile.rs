use crate::error::{Error, Result};

/// Default gate quantile.
pub const GATE_QUANTILE: f64 = 0.95;

/// Linear-interpolation quantile at position `q·(n−1)` of the sorted sample.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidInput(format!("quantile level {q} is outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, q))
}

/// As [`quantile`] on an already ascending, non-empty slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    match sorted.get(lo + 1) {
        Some(&hi) if frac > 0.0 => sorted[lo] + frac * (hi - sorted[lo]),
        _ => sorted[lo],
    }
}

pub fn median(values: &[f64]) -> Result<f64> {
    quantile(values, 0.5)
}

/// Episode acceptance: an empty history admits everything, otherwise the
/// return must strictly exceed the `q`-quantile of the history.
pub fn passes_gate(episode_return: f64, history: &[f64], q: f64) -> bool {
    match quantile(history, q) {
        Ok(bar) => episode_return > bar,
        Err(_) => true,
    }
}

//! Nearest-pair de-duplication used by the ND and ED operators.

use rayon::prelude::*;

/// Rows above which the nearest-prior search runs on the rayon pool.
const PAR_ROWS: usize = 512;

/// Chooses `m` rows to drop from `rows` by nearest-pair de-duplication.
///
/// Every row `i ≥ 1` is paired with its nearest earlier row `ĵ(i)` (Euclidean
/// distance, lowest index on ties). Pairs are walked in ascending distance
/// (then ascending `i`) and the earlier row `ĵ(i)` of each pair is dropped,
/// skipping pairs that already lost a member. When one pass yields fewer than
/// `m` drops the pass is repeated on the surviving rows.
///
/// Returns original row indices in eviction order. `m` is capped at
/// `rows.len() - 1`, so at least one row always survives.
pub fn dedup_evictions(rows: &[Vec<f64>], m: usize) -> Vec<usize> {
    let m = m.min(rows.len().saturating_sub(1));
    let mut alive: Vec<usize> = (0..rows.len()).collect();
    let mut evicted = Vec::with_capacity(m);
    while evicted.len() < m {
        let pairs = ranked_pairs(rows, &alive);
        let mut dropped = vec![false; alive.len()];
        for (_, later, earlier) in pairs {
            if evicted.len() == m {
                break;
            }
            if dropped[later] || dropped[earlier] {
                continue;
            }
            dropped[earlier] = true;
            evicted.push(alive[earlier]);
        }
        alive = alive
            .iter()
            .zip(&dropped)
            .filter(|(_, &d)| !d)
            .map(|(&i, _)| i)
            .collect();
    }
    evicted
}

/// `(distance, i, ĵ(i))` over positions in `alive`, sorted ascending.
fn ranked_pairs(rows: &[Vec<f64>], alive: &[usize]) -> Vec<(f64, usize, usize)> {
    let nearest = |p: usize| {
        let xi = &rows[alive[p]];
        let mut best = (f64::INFINITY, 0usize);
        for (q, &j) in alive[..p].iter().enumerate() {
            let d2: f64 = xi.iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 {
                best = (d2, q);
            }
        }
        (best.0.sqrt(), p, best.1)
    };
    let mut pairs: Vec<(f64, usize, usize)> = if alive.len() > PAR_ROWS {
        (1..alive.len()).into_par_iter().map(nearest).collect()
    } else {
        (1..alive.len()).map(nearest).collect()
    };
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    pairs
}

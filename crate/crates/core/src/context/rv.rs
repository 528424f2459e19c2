//! Reward-variance operator: a good partition of high-return episodes and a
//! bad partition of low-return episodes, each capped at half the budget.
//! Episodes enter and leave a partition whole.

use super::{median, quantile, ContextBuffer, MutationReport, Partition};
use crate::error::Result;
use crate::transition::{Episode, EpisodeTag};

const GOOD_QUANTILE: f64 = 0.95;
const BAD_QUANTILE: f64 = 0.05;

/// Routes an episode into a partition.
///
/// * above the 95th percentile of the good returns (or good is empty): join
///   good, evicting its smallest-return episodes while it would overflow;
/// * below the 5th percentile of the bad returns (or bad is empty): join bad,
///   evicting its largest-return episodes while it would overflow;
/// * otherwise join the side whose median is closer, but only if that side
///   still has room.
pub(super) fn insert(buf: &mut ContextBuffer, episode: Episode) -> Result<MutationReport> {
    let target = buf.budget / 2;
    let len = episode.len();
    if len > target {
        return Ok(MutationReport::default());
    }
    let r = episode.shaped_return();
    let good = returns(buf, Partition::Good);
    let bad = returns(buf, Partition::Bad);

    let side = if good.is_empty() || r > quantile(&good, GOOD_QUANTILE)? {
        Some((Partition::Good, true))
    } else if bad.is_empty() || r < quantile(&bad, BAD_QUANTILE)? {
        Some((Partition::Bad, true))
    } else {
        let midpoint = 0.5 * (median(&good)? + median(&bad)?);
        let side = if r >= midpoint { Partition::Good } else { Partition::Bad };
        (buf.partition_len(side) + len <= target).then_some((side, false))
    };
    let Some((side, may_evict)) = side else {
        return Ok(MutationReport::default());
    };

    let mut report = MutationReport::default();
    while buf.partition_len(side) + len > target {
        if !may_evict {
            return Ok(MutationReport::default());
        }
        let victim = extreme_member(buf, side);
        report.evicted_transitions += buf.remove_tag(victim);
        report.evicted_tags.push(victim);
    }

    // The initial random batch belongs to neither partition; it yields
    // space oldest-first when the whole buffer would overflow.
    let overflow = (buf.transitions.len() + len).saturating_sub(buf.budget);
    if overflow > 0 {
        let initial: Vec<usize> = buf
            .transitions
            .iter()
            .enumerate()
            .filter(|(_, t)| t.tag.is_initial())
            .map(|(i, _)| i)
            .take(overflow)
            .collect();
        let removed = buf.remove_indices(&initial);
        report.evicted_transitions += removed.evicted_transitions;
        report.evicted_tags.extend(removed.evicted_tags);
    }
    report.evicted_tags.sort_unstable();
    report.evicted_tags.dedup();

    let tag = episode.tag;
    buf.append(episode);
    match side {
        Partition::Good => buf.good.insert(tag),
        Partition::Bad => buf.bad.insert(tag),
    };
    report.inserted = true;
    report.refit_required = true;
    Ok(report)
}

fn returns(buf: &ContextBuffer, side: Partition) -> Vec<f64> {
    buf.partition_tags(side)
        .iter()
        .filter_map(|t| buf.history.get(t).copied())
        .collect()
}

/// Smallest-return good episode or largest-return bad episode; ties go to
/// the lowest tag.
fn extreme_member(buf: &ContextBuffer, side: Partition) -> EpisodeTag {
    let members = buf.partition_tags(side).iter().map(|t| (*t, buf.history[t]));
    let pick = match side {
        Partition::Good => members.min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))),
        Partition::Bad => members.max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0))),
    };
    pick.expect("an overflowing partition has members").0
}

//! The budgeted context buffer: episode-tagged storage, the return-history
//! gate and the truncation operators that keep learning going once the
//! budget is exhausted.

mod quantile;
mod rv;
pub mod snapshot;
mod truncate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regressor::FittedRegressor;
use crate::transition::{Episode, EpisodeTag, Transition};

pub use quantile::{median, passes_gate, quantile, quantile_sorted, GATE_QUANTILE};
pub use truncate::dedup_evictions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TruncationOperator {
    /// Stop updating once full.
    Stale,
    /// First-in, first-out.
    Latest,
    /// Nearest-pair de-duplication on raw `state ⊕ onehot(action)` features.
    NaiveDedup,
    /// Nearest-pair de-duplication on the regressor's row embeddings.
    EmbedDedup,
    /// Good/bad episode partitions by return.
    RewardVariance,
}

impl TruncationOperator {
    pub const ALL: [TruncationOperator; 5] = [
        TruncationOperator::Stale,
        TruncationOperator::Latest,
        TruncationOperator::NaiveDedup,
        TruncationOperator::EmbedDedup,
        TruncationOperator::RewardVariance,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            TruncationOperator::Stale => "stale",
            TruncationOperator::Latest => "latest",
            TruncationOperator::NaiveDedup => "nd",
            TruncationOperator::EmbedDedup => "ed",
            TruncationOperator::RewardVariance => "rv",
        }
    }
}

impl fmt::Display for TruncationOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for TruncationOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "stale" | "s" => Ok(Self::Stale),
            "latest" | "l" | "fifo" => Ok(Self::Latest),
            "nd" | "naivededup" | "naivededuplication" => Ok(Self::NaiveDedup),
            "ed" | "embeddededup" | "embeddingdedup" | "embeddingsdeduplication" | "embeddedup" => {
                Ok(Self::EmbedDedup)
            }
            "rv" | "rewardvariance" => Ok(Self::RewardVariance),
            _ => Err(Error::InvalidInput(format!("unknown truncation operator `{s}`"))),
        }
    }
}

/// Outcome of [`ContextBuffer::insert_episode`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MutationReport {
    pub inserted: bool,
    /// Tags that lost at least one transition, ascending.
    pub evicted_tags: Vec<EpisodeTag>,
    pub evicted_transitions: usize,
    pub refit_required: bool,
}

impl MutationReport {
    fn rejected() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Good,
    Bad,
}

#[derive(Debug, Clone)]
pub struct ContextBuffer {
    budget: usize,
    operator: TruncationOperator,
    action_count: usize,
    /// Arrival order.
    transitions: Vec<Transition>,
    /// One shaped return per in-buffer episode tag (initial tag excluded).
    history: BTreeMap<EpisodeTag, f64>,
    good: BTreeSet<EpisodeTag>,
    bad: BTreeSet<EpisodeTag>,
    /// Set when evictions shrink the history below two entries; the gate
    /// then admits everything until the history refills.
    gate_open: bool,
}

impl ContextBuffer {
    pub fn new(budget: usize, operator: TruncationOperator, action_count: usize) -> Result<Self> {
        if budget == 0 {
            return Err(Error::Field {
                field: "context.budget",
                message: "must be at least 1".into(),
            });
        }
        if operator == TruncationOperator::RewardVariance && budget < 2 {
            return Err(Error::Field {
                field: "context.budget",
                message: "reward-variance partitions need a budget of at least 2".into(),
            });
        }
        Ok(Self {
            budget,
            operator,
            action_count,
            transitions: Vec::new(),
            history: BTreeMap::new(),
            good: BTreeSet::new(),
            bad: BTreeSet::new(),
            gate_open: false,
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn operator(&self) -> TruncationOperator {
        self.operator
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.transitions.len() >= self.budget
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// Returns of the in-buffer episodes, ordered by tag.
    pub fn history(&self) -> Vec<f64> {
        self.history.values().copied().collect()
    }

    pub fn episode_return(&self, tag: EpisodeTag) -> Option<f64> {
        self.history.get(&tag).copied()
    }

    pub fn partition_of(&self, tag: EpisodeTag) -> Option<Partition> {
        if self.good.contains(&tag) {
            Some(Partition::Good)
        } else if self.bad.contains(&tag) {
            Some(Partition::Bad)
        } else {
            None
        }
    }

    pub fn partition_tags(&self, partition: Partition) -> &BTreeSet<EpisodeTag> {
        match partition {
            Partition::Good => &self.good,
            Partition::Bad => &self.bad,
        }
    }

    /// Number of in-buffer transitions belonging to `partition`.
    pub fn partition_len(&self, partition: Partition) -> usize {
        let tags = self.partition_tags(partition);
        self.transitions.iter().filter(|t| tags.contains(&t.tag)).count()
    }

    /// Distinct tags in arrival order of their first transition.
    pub fn tags(&self) -> Vec<EpisodeTag> {
        let mut seen = BTreeSet::new();
        self.transitions
            .iter()
            .filter(|t| seen.insert(t.tag))
            .map(|t| t.tag)
            .collect()
    }

    /// Raw regression features of every stored transition.
    pub fn features(&self) -> Vec<Vec<f64>> {
        self.transitions.iter().map(|t| t.features(self.action_count)).collect()
    }

    /// Loads the random initial batch. Every transition must carry the
    /// reserved initial tag; nothing is added to the return history.
    pub fn seed_initial(&mut self, transitions: Vec<Transition>) -> Result<()> {
        if transitions.iter().any(|t| !t.tag.is_initial()) {
            return Err(Error::InvalidInput("initial transitions must use the reserved tag".into()));
        }
        if self.transitions.len() + transitions.len() > self.budget {
            return Err(Error::InvalidInput(format!(
                "{} initial transitions exceed the budget of {}",
                transitions.len(),
                self.budget
            )));
        }
        self.transitions.extend(transitions);
        Ok(())
    }

    /// Acceptance predicate on an episode return.
    pub fn gate(&self, episode_return: f64, q: f64) -> bool {
        if self.gate_open && self.history.len() < 2 {
            return true;
        }
        passes_gate(episode_return, &self.history(), q)
    }

    /// Inserts an episode that already passed the gate, truncating per the
    /// buffer's operator when the budget would be exceeded. `model` is the
    /// current fitted regressor; only the embedding operator uses it.
    pub fn insert_episode(&mut self, episode: Episode, model: Option<&dyn FittedRegressor>) -> Result<MutationReport> {
        self.check_episode(&episode)?;
        if episode.len() > self.budget {
            return Ok(MutationReport::rejected());
        }
        if self.operator == TruncationOperator::RewardVariance {
            return rv::insert(self, episode);
        }
        let overflow = (self.transitions.len() + episode.len()).saturating_sub(self.budget);
        let evict = if overflow == 0 {
            Vec::new()
        } else {
            match self.operator {
                TruncationOperator::Stale => return Ok(MutationReport::rejected()),
                TruncationOperator::Latest => self.truncate_latest(episode.len()),
                TruncationOperator::NaiveDedup => self.truncate_nd(overflow)?,
                TruncationOperator::EmbedDedup => {
                    let model = model.ok_or(Error::Capability("embeddings (no fitted regressor)"))?;
                    self.truncate_ed(overflow, model)?
                }
                TruncationOperator::RewardVariance => unreachable!(),
            }
        };
        let mut report = self.remove_indices(&evict);
        self.append(episode);
        report.inserted = true;
        report.refit_required = true;
        Ok(report)
    }

    /// FIFO eviction: the oldest transitions that must go for
    /// `incoming_len` new ones to fit.
    pub fn truncate_latest(&self, incoming_len: usize) -> Vec<usize> {
        let overflow = (self.transitions.len() + incoming_len).saturating_sub(self.budget);
        (0..overflow.min(self.transitions.len())).collect()
    }

    /// Nearest-pair de-duplication on raw features.
    pub fn truncate_nd(&self, m: usize) -> Result<Vec<usize>> {
        self.check_dedup_request(m)?;
        Ok(dedup_evictions(&self.features(), m))
    }

    /// Nearest-pair de-duplication on the regressor's embeddings.
    pub fn truncate_ed(&self, m: usize, model: &dyn FittedRegressor) -> Result<Vec<usize>> {
        self.check_dedup_request(m)?;
        if m == 0 {
            return Ok(Vec::new());
        }
        let embedded = model.embed(&self.features())?;
        Ok(dedup_evictions(&embedded.rows, m))
    }

    fn check_dedup_request(&self, m: usize) -> Result<()> {
        if m > 0 && m >= self.transitions.len() {
            return Err(Error::InvalidInput(format!(
                "cannot de-duplicate {m} of {} transitions",
                self.transitions.len()
            )));
        }
        Ok(())
    }

    fn check_episode(&self, episode: &Episode) -> Result<()> {
        if episode.is_empty() {
            return Err(Error::InvalidInput("episode has no transitions".into()));
        }
        if episode.tag.is_initial() {
            return Err(Error::InvalidInput("episodes may not use the reserved initial tag".into()));
        }
        if episode.transitions.iter().any(|t| t.tag != episode.tag) {
            return Err(Error::InvalidInput("episode transitions carry mixed tags".into()));
        }
        if self.history.contains_key(&episode.tag) || self.transitions.iter().any(|t| t.tag == episode.tag) {
            return Err(Error::InvalidInput(format!("episode tag {} is already in the buffer", episode.tag)));
        }
        Ok(())
    }

    fn append(&mut self, episode: Episode) {
        self.history.insert(episode.tag, episode.shaped_return());
        self.transitions.extend(episode.transitions);
        if self.history.len() >= 2 {
            self.gate_open = false;
        }
    }

    /// Removes the given transition indices and repairs the history and partitions.
    fn remove_indices(&mut self, indices: &[usize]) -> MutationReport {
        if indices.is_empty() {
            return MutationReport::default();
        }
        let mut drop = vec![false; self.transitions.len()];
        let mut touched = BTreeSet::new();
        for &i in indices {
            drop[i] = true;
            touched.insert(self.transitions[i].tag);
        }
        let mut keep = drop.iter();
        self.transitions.retain(|_| !*keep.next().unwrap());
        self.forget_missing_tags();
        MutationReport {
            evicted_tags: touched.into_iter().collect(),
            evicted_transitions: indices.len(),
            ..MutationReport::default()
        }
    }

    fn remove_tag(&mut self, tag: EpisodeTag) -> usize {
        let before = self.transitions.len();
        self.transitions.retain(|t| t.tag != tag);
        self.forget_missing_tags();
        before - self.transitions.len()
    }

    fn forget_missing_tags(&mut self) {
        let present: BTreeSet<EpisodeTag> = self.transitions.iter().map(|t| t.tag).collect();
        let before = self.history.len();
        self.history.retain(|tag, _| present.contains(tag));
        self.good.retain(|tag| present.contains(tag));
        self.bad.retain(|tag| present.contains(tag));
        if before >= 2 && self.history.len() < 2 {
            self.gate_open = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ActionId, State};

    pub(crate) fn episode(tag: u64, len: usize, reward: f64) -> Episode {
        let transitions = (0..len)
            .map(|i| Transition {
                tag: EpisodeTag(tag),
                state: State(vec![tag as f64, i as f64]),
                action: ActionId(i % 2),
                raw_reward: -1.0,
                shaped_reward: reward,
                next_state: State(vec![tag as f64, i as f64 + 1.0]),
                done: i + 1 == len,
            })
            .collect();
        Episode {
            tag: EpisodeTag(tag),
            transitions,
        }
    }

    fn tags(buf: &ContextBuffer) -> Vec<u64> {
        buf.transitions().iter().map(|t| t.tag.0).collect()
    }

    #[test]
    fn under_budget_appends() {
        let mut buf = ContextBuffer::new(10, TruncationOperator::Stale, 2).unwrap();
        buf.insert_episode(episode(1, 4, 1.0), None).unwrap();
        let r = buf.insert_episode(episode(2, 5, 1.0), None).unwrap();
        assert!(r.inserted && r.refit_required && r.evicted_tags.is_empty());
        assert_eq!(buf.len(), 9);
        assert_eq!(buf.history(), vec![4.0, 5.0]);
    }

    #[test]
    fn stale_rejects_when_full() {
        let mut buf = ContextBuffer::new(6, TruncationOperator::Stale, 2).unwrap();
        buf.insert_episode(episode(1, 6, 1.0), None).unwrap();
        let before = buf.transitions().to_vec();
        let r = buf.insert_episode(episode(2, 1, 9.0), None).unwrap();
        assert!(!r.inserted && !r.refit_required);
        assert_eq!(buf.transitions(), &before[..]);
    }

    #[test]
    fn latest_is_fifo() {
        let mut buf = ContextBuffer::new(6, TruncationOperator::Latest, 2).unwrap();
        buf.insert_episode(episode(1, 3, 1.0), None).unwrap();
        buf.insert_episode(episode(2, 3, 1.0), None).unwrap();
        let r = buf.insert_episode(episode(3, 3, 1.0), None).unwrap();
        assert_eq!(tags(&buf), vec![2, 2, 2, 3, 3, 3]);
        assert_eq!(r.evicted_tags, vec![EpisodeTag(1)]);
        assert_eq!(buf.history(), vec![3.0, 3.0]);
    }

    #[test]
    fn truncate_latest_edges() {
        let mut buf = ContextBuffer::new(5, TruncationOperator::Latest, 2).unwrap();
        buf.insert_episode(episode(1, 5, 1.0), None).unwrap();
        assert!(buf.truncate_latest(0).is_empty());
        assert_eq!(buf.truncate_latest(2), vec![0, 1]);
        assert_eq!(buf.truncate_latest(5), (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn nd_evicts_duplicates_and_keeps_incoming() {
        let mut buf = ContextBuffer::new(4, TruncationOperator::NaiveDedup, 2).unwrap();
        let mut ep = episode(1, 4, 1.0);
        ep.transitions[2].state = ep.transitions[0].state.clone();
        ep.transitions[2].action = ep.transitions[0].action;
        buf.insert_episode(ep, None).unwrap();
        assert_eq!(buf.truncate_nd(1).unwrap(), vec![0]);
        assert!(buf.truncate_nd(0).unwrap().is_empty());
        assert!(buf.truncate_nd(4).is_err());
        let r = buf.insert_episode(episode(2, 1, 1.0), None).unwrap();
        assert!(r.inserted);
        assert_eq!(buf.len(), 4);
        assert_eq!(buf.transitions().last().unwrap().tag, EpisodeTag(2));
    }

    #[test]
    fn ed_requires_a_model() {
        let mut buf = ContextBuffer::new(3, TruncationOperator::EmbedDedup, 2).unwrap();
        buf.insert_episode(episode(1, 3, 1.0), None).unwrap();
        assert!(matches!(buf.insert_episode(episode(2, 1, 1.0), None), Err(Error::Capability(_))));
    }

    #[test]
    fn initial_batch_is_not_in_history_but_evictable() {
        let mut buf = ContextBuffer::new(5, TruncationOperator::Latest, 2).unwrap();
        let mut init = episode(9, 3, 0.0).transitions;
        init.iter_mut().for_each(|t| t.tag = EpisodeTag::INITIAL);
        buf.seed_initial(init).unwrap();
        assert!(buf.history().is_empty());
        buf.insert_episode(episode(1, 4, 1.0), None).unwrap();
        assert_eq!(tags(&buf), vec![0, 1, 1, 1, 1]);
        assert_eq!(buf.history(), vec![4.0]);
    }

    #[test]
    fn gate_reopens_after_history_collapse() {
        let mut buf = ContextBuffer::new(4, TruncationOperator::Latest, 2).unwrap();
        assert!(buf.gate(-100.0, 0.95));
        buf.insert_episode(episode(1, 2, 5.0), None).unwrap();
        buf.insert_episode(episode(2, 2, 1.0), None).unwrap();
        assert!(!buf.gate(9.0, 0.95));
        assert!(buf.gate(10.0, 0.95));
        // a 4-step episode flushes both earlier episodes
        buf.insert_episode(episode(3, 4, 3.0), None).unwrap();
        assert_eq!(buf.history(), vec![12.0]);
        assert!(buf.gate(-50.0, 0.95));
    }

    #[test]
    fn bad_episodes_rejected() {
        let mut buf = ContextBuffer::new(4, TruncationOperator::Latest, 2).unwrap();
        assert!(buf.insert_episode(episode(0, 2, 1.0), None).is_err());
        assert!(buf.insert_episode(Episode { tag: EpisodeTag(4), transitions: vec![] }, None).is_err());
        buf.insert_episode(episode(1, 1, 1.0), None).unwrap();
        assert!(buf.insert_episode(episode(1, 1, 1.0), None).is_err());
        assert!(!buf.insert_episode(episode(2, 5, 1.0), None).unwrap().inserted);
    }

    #[test]
    fn operator_names_parse() {
        for op in TruncationOperator::ALL {
            assert_eq!(op.short_name().parse::<TruncationOperator>().unwrap(), op);
        }
        assert_eq!("Naive-Dedup".parse::<TruncationOperator>().unwrap(), TruncationOperator::NaiveDedup);
        assert!("lru".parse::<TruncationOperator>().is_err());
    }
}

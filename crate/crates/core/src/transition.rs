use std::fmt;

use crate::envs::{ActionId, State};

/// Episode identifier carried by every stored transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EpisodeTag(pub u64);

impl EpisodeTag {
    /// Reserved for the random transitions collected before the online phase.
    /// They contribute no return to the gate history.
    pub const INITIAL: EpisodeTag = EpisodeTag(0);

    pub fn is_initial(self) -> bool {
        self == Self::INITIAL
    }
}

impl fmt::Display for EpisodeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub tag: EpisodeTag,
    pub state: State,
    pub action: ActionId,
    pub raw_reward: f64,
    pub shaped_reward: f64,
    pub next_state: State,
    pub done: bool,
}

impl Transition {
    /// Regression features `state ⊕ onehot(action)`.
    pub fn features(&self, action_count: usize) -> Vec<f64> {
        encode_features(&self.state, self.action, action_count)
    }
}

pub fn encode_features(state: &State, action: ActionId, action_count: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(state.len() + action_count);
    x.extend_from_slice(state.values());
    x.extend((0..action_count).map(|a| if a == action.0 { 1.0 } else { 0.0 }));
    x
}

/// One finished episode: its tag and ordered transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub tag: EpisodeTag,
    pub transitions: Vec<Transition>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Sum of shaped rewards.
    pub fn shaped_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.shaped_reward).sum()
    }

    pub fn raw_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.raw_reward).sum()
    }

    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary {
            tag: self.tag,
            shaped_return: self.shaped_return(),
            length: self.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub tag: EpisodeTag,
    pub shaped_return: f64,
    pub length: usize,
}

//! Fitted Q iteration where every "fit" is an in-context regressor handle.

use std::sync::Arc;

use rand::Rng;

use crate::envs::{ActionId, State};
use crate::error::{Error, Result};
use crate::regressor::{perturb_rewards, FittedRegressor, QDataset, Regressor};
use crate::transition::{encode_features, Transition};

pub const DEFAULT_ITERATIONS: usize = 60;
pub const DEFAULT_GAMMA: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FqiConfig {
    pub iterations: usize,
    pub gamma: f64,
    pub action_count: usize,
}

impl FqiConfig {
    pub fn new(iterations: usize, gamma: f64, action_count: usize) -> Result<Self> {
        let cfg = Self {
            iterations,
            gamma,
            action_count,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_defaults(action_count: usize) -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            gamma: DEFAULT_GAMMA,
            action_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Field {
                field: "fqi.iterations",
                message: "must be at least 1".into(),
            });
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Field {
                field: "fqi.gamma",
                message: format!("{} is outside [0, 1)", self.gamma),
            });
        }
        if self.action_count == 0 {
            return Err(Error::Field {
                field: "action_count",
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// A greedy-evaluable Q-function backed by a fitted regressor.
#[derive(Debug, Clone)]
pub struct QFunction {
    model: Arc<dyn FittedRegressor>,
    state_dim: usize,
    action_count: usize,
}

impl QFunction {
    pub fn new(model: Arc<dyn FittedRegressor>, state_dim: usize, action_count: usize) -> Result<Self> {
        if model.width() != state_dim + action_count {
            return Err(Error::WidthMismatch {
                expected: state_dim + action_count,
                actual: model.width(),
            });
        }
        Ok(Self {
            model,
            state_dim,
            action_count,
        })
    }

    pub fn model(&self) -> &Arc<dyn FittedRegressor> {
        &self.model
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// `Q(s, a)` for every action, evaluated in one batch.
    pub fn q_values(&self, state: &State) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(Error::WidthMismatch {
                expected: self.state_dim,
                actual: state.len(),
            });
        }
        let rows: Vec<Vec<f64>> = (0..self.action_count)
            .map(|a| encode_features(state, ActionId(a), self.action_count))
            .collect();
        self.model.predict(&rows)
    }

    /// Argmax action, lowest index on ties.
    pub fn greedy(&self, state: &State) -> Result<ActionId> {
        Ok(ActionId(argmax(&self.q_values(state)?)))
    }
}

pub fn q_values(q: &QFunction, state: &State) -> Result<Vec<f64>> {
    q.q_values(state)
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Bellman regression targets for one FQI round.
///
/// `q_prev = None` stands for `Q_0 ≡ 0`. Terminal transitions never bootstrap.
pub fn build_targets(
    transitions: &[Transition],
    q_prev: Option<&QFunction>,
    gamma: f64,
    action_count: usize,
) -> Result<QDataset> {
    if transitions.is_empty() {
        return Err(Error::EmptyContext);
    }
    let x = features(transitions, action_count);
    let rewards: Vec<f64> = transitions.iter().map(|t| t.shaped_reward).collect();
    let y = match q_prev {
        None => rewards,
        Some(q) => {
            if q.action_count != action_count {
                return Err(Error::InvalidInput(format!(
                    "Q-function has {} actions, expected {action_count}",
                    q.action_count
                )));
            }
            let plan = BootstrapPlan::new(transitions, action_count);
            let next = q.model.predict(&plan.queries)?;
            plan.targets(&rewards, &next, gamma)
        }
    };
    QDataset::new(x, y)
}

pub fn features(transitions: &[Transition], action_count: usize) -> Vec<Vec<f64>> {
    transitions.iter().map(|t| t.features(action_count)).collect()
}

/// Next-state queries for the non-terminal transitions, `action_count` rows each.
struct BootstrapPlan {
    /// Transition index for each block of queries.
    owners: Vec<usize>,
    queries: Vec<Vec<f64>>,
    action_count: usize,
}

impl BootstrapPlan {
    fn new(transitions: &[Transition], action_count: usize) -> Self {
        let mut owners = Vec::new();
        let mut queries = Vec::new();
        for (i, t) in transitions.iter().enumerate() {
            if t.done {
                continue;
            }
            owners.push(i);
            for a in 0..action_count {
                queries.push(encode_features(&t.next_state, ActionId(a), action_count));
            }
        }
        Self {
            owners,
            queries,
            action_count,
        }
    }

    fn targets(&self, rewards: &[f64], next_values: &[f64], gamma: f64) -> Vec<f64> {
        let mut y = rewards.to_vec();
        for (block, &i) in next_values.chunks_exact(self.action_count).zip(&self.owners) {
            let best = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            y[i] = rewards[i] + gamma * best;
        }
        y
    }
}

/// Runs FQI: perturbs the rewards once, then performs `cfg.iterations` rounds
/// of target construction and refit starting from `Q_0 ≡ 0`.
pub fn run_fqi<R: Rng + ?Sized>(
    transitions: &[Transition],
    backend: &dyn Regressor,
    cfg: &FqiConfig,
    rng: &mut R,
) -> Result<QFunction> {
    run_fqi_traced(transitions, backend, cfg, rng, |_, _| {})
}

/// As [`run_fqi`], calling `on_round(k, targets)` with the targets of every
/// round `k = 1..=K` before they are fitted.
pub fn run_fqi_traced<R: Rng + ?Sized>(
    transitions: &[Transition],
    backend: &dyn Regressor,
    cfg: &FqiConfig,
    rng: &mut R,
    mut on_round: impl FnMut(usize, &[f64]),
) -> Result<QFunction> {
    cfg.validate()?;
    if transitions.is_empty() {
        return Err(Error::EmptyContext);
    }
    let state_dim = transitions[0].state.len();
    if let Some(t) = transitions
        .iter()
        .find(|t| t.state.len() != state_dim || t.next_state.len() != state_dim)
    {
        return Err(Error::WidthMismatch {
            expected: state_dim,
            actual: t.state.len().max(t.next_state.len()),
        });
    }
    if let Some(t) = transitions.iter().find(|t| t.action.0 >= cfg.action_count) {
        return Err(Error::InvalidInput(format!(
            "action {} out of range for {} actions",
            t.action.0, cfg.action_count
        )));
    }

    let base = build_targets(transitions, None, cfg.gamma, cfg.action_count)?;
    let rewards = perturb_rewards(&base, rng)?.targets().to_vec();
    let plan = BootstrapPlan::new(transitions, cfg.action_count);
    let x = base.features();

    let mut y = rewards.clone();
    on_round(1, &y);
    match backend.smoother(x, &plan.queries) {
        Some(smoother) => {
            let smoother = smoother?;
            for k in 2..=cfg.iterations {
                let next = smoother.apply(&y);
                y = plan.targets(&rewards, &next, cfg.gamma);
                on_round(k, &y);
            }
            let model = backend.fit(&base.with_targets(y)?)?;
            QFunction::new(model, state_dim, cfg.action_count)
        }
        None => {
            let mut model = backend.fit(&base.with_targets(y)?)?;
            for k in 2..=cfg.iterations {
                let next = model.predict(&plan.queries)?;
                let y = plan.targets(&rewards, &next, cfg.gamma);
                on_round(k, &y);
                model = backend.fit(&base.with_targets(y)?)?;
            }
            QFunction::new(model, state_dim, cfg.action_count)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressor::Knn;
    use crate::transition::EpisodeTag;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(s: f64, a: usize, r: f64, s2: f64, done: bool) -> Transition {
        Transition {
            tag: EpisodeTag(1),
            state: State(vec![s]),
            action: ActionId(a),
            raw_reward: r,
            shaped_reward: r,
            next_state: State(vec![s2]),
            done,
        }
    }

    /// Forces the generic fit/predict path.
    struct NoSmoother(Knn);

    impl Regressor for NoSmoother {
        fn name(&self) -> &'static str {
            "knn-generic"
        }

        fn fit(&self, context: &QDataset) -> Result<Arc<dyn FittedRegressor>> {
            self.0.fit(context)
        }
    }

    fn q_for(transitions: &[Transition]) -> QFunction {
        let ds = build_targets(transitions, None, 0.9, 2).unwrap();
        QFunction::new(Knn::new(1).unwrap().fit(&ds).unwrap(), 1, 2).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(FqiConfig::new(0, 0.9, 2).is_err());
        assert!(FqiConfig::new(5, 1.0, 2).is_err());
        assert!(FqiConfig::new(5, -0.1, 2).is_err());
        assert!(FqiConfig::new(5, 0.0, 2).is_ok());
    }

    #[test]
    fn first_round_targets_are_rewards() {
        let ts = vec![tr(0.0, 0, 1.5, 1.0, false), tr(1.0, 1, -2.0, 0.0, true)];
        let ds = build_targets(&ts, None, 0.99, 2).unwrap();
        assert_eq!(ds.targets(), &[1.5, -2.0]);
        assert_eq!(ds.features()[1], vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn bootstrap_takes_max_over_actions() {
        // context gives Q(s'=1, a0) = 2, Q(s'=1, a1) = 5
        let q = q_for(&[tr(1.0, 0, 2.0, 1.0, false), tr(1.0, 1, 5.0, 1.0, false)]);
        let ds = build_targets(&[tr(0.0, 0, 0.0, 1.0, false)], Some(&q), 0.99, 2).unwrap();
        assert_abs_diff_eq!(ds.targets()[0], 4.95, epsilon = 1e-12);
    }

    #[test]
    fn terminal_transitions_ignore_previous_q() {
        let ts = vec![tr(0.0, 0, 1.0, 1.0, true)];
        let q_small = q_for(&[tr(1.0, 0, 0.0, 1.0, false), tr(1.0, 1, 0.0, 1.0, false)]);
        let q_big = q_for(&[tr(1.0, 0, 100.0, 1.0, false), tr(1.0, 1, -7.0, 1.0, false)]);
        for q in [&q_small, &q_big] {
            assert_eq!(build_targets(&ts, Some(q), 0.99, 2).unwrap().targets(), &[1.0]);
        }
    }

    #[test]
    fn q_values_shape_and_exact_match() {
        let q = q_for(&[tr(0.5, 0, 3.0, 0.0, true)]);
        let v = q.q_values(&State(vec![0.5])).unwrap();
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|x| x.is_finite()));
        assert_eq!(v[0], 3.0);
        assert!(q.q_values(&State(vec![0.5, 1.0])).is_err());
    }

    #[test]
    fn action_symmetric_context_gives_symmetric_values() {
        let ts = vec![
            tr(0.0, 0, 1.0, 0.0, true),
            tr(0.0, 1, 2.0, 0.0, true),
            tr(1.0, 0, 2.0, 0.0, true),
            tr(1.0, 1, 1.0, 0.0, true),
        ];
        let ds = build_targets(&ts, None, 0.9, 2).unwrap();
        let q = QFunction::new(Knn::new(2).unwrap().fit(&ds).unwrap(), 1, 2).unwrap();
        let a = q.q_values(&State(vec![0.3])).unwrap();
        let b = q.q_values(&State(vec![0.7])).unwrap();
        assert_abs_diff_eq!(a[0], b[1], epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], b[0], epsilon = 1e-12);
    }

    #[test]
    fn zero_discount_fits_immediate_rewards() {
        let ts = vec![tr(0.0, 0, 1.0, 1.0, false), tr(1.0, 1, -1.0, 0.0, false)];
        for k in [1, 7] {
            let cfg = FqiConfig::new(k, 0.0, 2).unwrap();
            let q = run_fqi(&ts, &Knn::default(), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_abs_diff_eq!(q.q_values(&State(vec![0.0])).unwrap()[0], 1.0, epsilon = 1e-4);
            assert_abs_diff_eq!(q.q_values(&State(vec![1.0])).unwrap()[1], -1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn constant_reward_geometric_convergence() {
        // self-loop on both actions, reward c everywhere
        let c = 0.5;
        let gamma = 0.9;
        let ts: Vec<_> = (0..2).map(|a| tr(0.0, a, c, 0.0, false)).collect();
        for k in [1usize, 5, 20, 60] {
            let cfg = FqiConfig::new(k, gamma, 2).unwrap();
            let q = run_fqi(&ts, &Knn::new(1).unwrap(), &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let limit = c / (1.0 - gamma);
            let bound = c * gamma.powi(k as i32) / (1.0 - gamma);
            let noise = 1e-4 / (1.0 - gamma);
            for v in q.q_values(&State(vec![0.0])).unwrap() {
                assert!(v <= limit + noise);
                assert!(limit - v <= bound + 1e-12, "k={k}: {v} vs {limit}");
            }
        }
    }

    /// Chain: s0 -a1-> s1 (r=0), s0 -a0-> s0 (r=0.1), s1 -a1-> s1 (r=1), s1 -a0-> s0 (r=0).
    #[test]
    fn two_state_chain_matches_value_iteration() {
        let gamma = 0.5;
        let next = [[0usize, 1], [0, 1]];
        let reward = [[0.1, 0.0], [0.0, 1.0]];
        let ts: Vec<_> = (0..2)
            .flat_map(|s| (0..2).map(move |a| (s, a)))
            .map(|(s, a)| tr(s as f64, a, reward[s][a], next[s][a] as f64, false))
            .collect();

        // value iteration to convergence
        let mut qstar = [[0.0f64; 2]; 2];
        for _ in 0..10_000 {
            let v: Vec<f64> = qstar.iter().map(|r| r[0].max(r[1])).collect();
            for s in 0..2 {
                for a in 0..2 {
                    qstar[s][a] = reward[s][a] + gamma * v[next[s][a]];
                }
            }
        }

        let cfg = FqiConfig::new(60, gamma, 2).unwrap();
        let q = run_fqi(&ts, &Knn::new(1).unwrap(), &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (s, want) in qstar.iter().enumerate() {
            let v = q.q_values(&State(vec![s as f64])).unwrap();
            for a in 0..2 {
                assert_abs_diff_eq!(v[a], want[a], epsilon = 1e-3);
            }
            let best = if want[1] > want[0] { 1 } else { 0 };
            assert_eq!(q.greedy(&State(vec![s as f64])).unwrap(), ActionId(best));
        }
    }

    #[test]
    fn smoother_path_matches_generic_path() {
        let ts: Vec<_> = (0..30)
            .map(|i| {
                let s = (i as f64 * 0.7).sin();
                tr(s, i % 2, s.cos(), (s * 1.3).sin(), i % 7 == 0)
            })
            .collect();
        let cfg = FqiConfig::new(12, 0.95, 2).unwrap();
        let fast = run_fqi(&ts, &Knn::default(), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let slow = run_fqi(&ts, &NoSmoother(Knn::default()), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for i in 0..20 {
            let s = State(vec![i as f64 / 10.0 - 1.0]);
            assert_eq!(fast.q_values(&s).unwrap(), slow.q_values(&s).unwrap());
        }
    }

    #[test]
    fn knn_targets_stay_within_propagated_bounds() {
        let ts: Vec<_> = (0..40)
            .map(|i| {
                let s = (i as f64 * 0.37).cos();
                tr(s, i % 2, (i as f64 * 1.1).sin(), (s + 0.2).sin(), i % 9 == 0)
            })
            .collect();
        let r_max = ts.iter().map(|t| t.shaped_reward).fold(f64::MIN, f64::max) + 1e-4;
        let gamma = 0.9;
        let mut prev_max: Option<f64> = None;
        let cfg = FqiConfig::new(25, gamma, 2).unwrap();
        run_fqi_traced(&ts, &Knn::default(), &cfg, &mut ChaCha8Rng::seed_from_u64(8), |_, y| {
            let y_max = y.iter().cloned().fold(f64::MIN, f64::max);
            if let Some(p) = prev_max {
                assert!(y_max <= r_max + gamma * p + 1e-12);
            }
            prev_max = Some(y_max);
        })
        .unwrap();
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let ts: Vec<_> = (0..10).map(|i| tr(i as f64, i % 2, 1.0, (i + 1) as f64, i == 9)).collect();
        let cfg = FqiConfig::new(10, 0.9, 2).unwrap();
        let a = run_fqi(&ts, &Knn::default(), &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = run_fqi(&ts, &Knn::default(), &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        for i in 0..10 {
            let s = State(vec![i as f64 + 0.5]);
            assert_eq!(a.q_values(&s).unwrap(), b.q_values(&s).unwrap());
        }
    }

    #[test]
    fn empty_transitions_rejected() {
        let cfg = FqiConfig::with_defaults(2);
        assert!(matches!(
            run_fqi(&[], &Knn::default(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::EmptyContext)
        ));
    }
}

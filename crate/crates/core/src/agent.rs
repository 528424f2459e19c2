//! The online loop: random initial batch, first fit, then ε-greedy episodes
//! that are gated, inserted into the context and followed by a full refit.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{ContextBuffer, TruncationOperator, GATE_QUANTILE};
use crate::envs::{ActionId, Env, EnvKind, State};
use crate::error::{Error, Result};
use crate::fqi::{run_fqi, FqiConfig, QFunction};
use crate::regressor::BackendConfig;
use crate::transition::{Episode, EpisodeTag, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub initial: f64,
    pub decay: f64,
    pub min: f64,
}

impl EpsilonSchedule {
    pub fn new(initial: f64, decay: f64, min: f64) -> Result<Self> {
        let s = Self { initial, decay, min };
        s.validate()?;
        Ok(s)
    }

    /// Per-environment defaults used for the reported runs.
    pub fn for_env(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Acrobot => Self {
                initial: 0.95,
                decay: 0.9955,
                min: 0.1,
            },
            EnvKind::MountainCar | EnvKind::CartPole => Self {
                initial: 0.7,
                decay: 0.99,
                min: 0.1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.initial) {
            return Err(Error::Field {
                field: "epsilon.initial",
                message: format!("{} is outside [0, 1]", self.initial),
            });
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Field {
                field: "epsilon.decay",
                message: format!("{} is outside (0, 1]", self.decay),
            });
        }
        if !(0.0..=1.0).contains(&self.min) || self.min > self.initial {
            return Err(Error::Field {
                field: "epsilon.min",
                message: format!("{} must lie in [0, epsilon.initial]", self.min),
            });
        }
        Ok(())
    }

    /// `max(ε_min, ε0·λ^e)`.
    pub fn at(&self, episode: u64) -> f64 {
        let decayed = self.initial * self.decay.powf(episode as f64);
        decayed.max(self.min)
    }
}

pub fn epsilon_at(schedule: &EpsilonSchedule, episode: u64) -> f64 {
    schedule.at(episode)
}

/// ε-greedy action: uniform with probability `epsilon`, otherwise the
/// greedy action (lowest index on ties).
pub fn select_action<R: Rng + ?Sized>(q: &QFunction, state: &State, epsilon: f64, rng: &mut R) -> Result<ActionId> {
    if rng.gen::<f64>() < epsilon {
        Ok(ActionId(rng.gen_range(0..q.action_count())))
    } else {
        q.greedy(state)
    }
}

/// Default size of the random initial batch.
pub fn default_initial_transitions(kind: EnvKind) -> usize {
    match kind {
        EnvKind::CartPole => 128,
        EnvKind::MountainCar | EnvKind::Acrobot => 200,
    }
}

/// Exactly `n` transitions under uniformly random actions, spanning as many
/// episodes as needed. All carry the reserved initial tag.
pub fn collect_initial<R: Rng + ?Sized>(env: &Env, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
    let actions = env.kind.action_count();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut state = env.reset(rng.gen());
        for step_index in 0..env.cap {
            if out.len() == n {
                break;
            }
            let action = ActionId(rng.gen_range(0..actions));
            let step = env.step(&state, action, step_index)?;
            out.push(Transition {
                tag: EpisodeTag::INITIAL,
                state,
                action,
                raw_reward: step.raw_reward,
                shaped_reward: step.shaped_reward,
                next_state: step.next_state.clone(),
                done: step.done,
            });
            if step.done {
                break;
            }
            state = step.next_state;
        }
    }
    Ok(out)
}

/// Everything one seeded run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub env: EnvKind,
    pub cap: usize,
    pub episodes: usize,
    pub budget: usize,
    pub operator: TruncationOperator,
    pub backend: BackendConfig,
    pub epsilon: EpsilonSchedule,
    pub fqi: FqiConfig,
    pub gate_quantile: f64,
    pub initial_transitions: usize,
    pub seed: u64,
    /// Record wall-clock refit durations. Off keeps run logs byte-reproducible.
    pub record_timing: bool,
}

impl AgentConfig {
    pub fn defaults(env: EnvKind, seed: u64) -> Self {
        Self {
            env,
            cap: env.default_cap(),
            episodes: 250,
            budget: 2048,
            operator: TruncationOperator::Latest,
            backend: BackendConfig::default(),
            epsilon: EpsilonSchedule::for_env(env),
            fqi: FqiConfig::with_defaults(env.action_count()),
            gate_quantile: GATE_QUANTILE,
            initial_transitions: default_initial_transitions(env),
            seed,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.epsilon.validate()?;
        self.fqi.validate()?;
        if self.fqi.action_count != self.env.action_count() {
            return Err(Error::Field {
                field: "fqi.action_count",
                message: format!("{} has {} actions", self.env, self.env.action_count()),
            });
        }
        if self.cap == 0 {
            return Err(Error::Field {
                field: "env.cap",
                message: "must be at least 1".into(),
            });
        }
        if self.initial_transitions == 0 || self.initial_transitions > self.budget {
            return Err(Error::Field {
                field: "env.initial",
                message: format!("must lie in [1, budget = {}]", self.budget),
            });
        }
        if !(0.0..=1.0).contains(&self.gate_quantile) {
            return Err(Error::Field {
                field: "gate.quantile",
                message: format!("{} is outside [0, 1]", self.gate_quantile),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: u64,
    pub shaped_return: f64,
    pub raw_return: f64,
    pub epsilon: f64,
    pub buffer_size: usize,
    pub gated: bool,
    pub refit_count: usize,
    pub refit_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub rows: Vec<EpisodeRow>,
    /// Episodes whose insertion changed the context.
    pub insertions: usize,
    pub refit_count: usize,
    /// False when the run aborted; `error` then says why.
    pub complete: bool,
    pub error: Option<String>,
    /// Final contents of the context buffer.
    pub buffer: Vec<Transition>,
}

/// Executes one seeded run. Configuration errors are returned; failures
/// during the run yield a partial record with `complete == false`.
pub fn run(config: &AgentConfig) -> Result<RunRecord> {
    config.validate()?;
    let backend = config.backend.build()?;
    let env = Env::new(config.env, config.cap)?;

    let stream = |id: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(id);
        rng
    };
    let mut init_rng = stream(0);
    let mut env_rng = stream(1);
    let mut policy_rng = stream(2);
    let mut fqi_rng = stream(3);

    let mut record = RunRecord {
        seed: config.seed,
        rows: Vec::with_capacity(config.episodes),
        insertions: 0,
        refit_count: 0,
        complete: false,
        error: None,
        buffer: Vec::new(),
    };
    let mut buffer = ContextBuffer::new(config.budget, config.operator, config.env.action_count())?;

    let outcome = (|| -> Result<()> {
        buffer.seed_initial(collect_initial(&env, config.initial_transitions, &mut init_rng)?)?;
        let mut q = run_fqi(buffer.transitions(), backend.as_ref(), &config.fqi, &mut fqi_rng)?;
        record.refit_count = 1;

        for e in 1..=config.episodes as u64 {
            let epsilon = config.epsilon.at(e);
            let episode = rollout(&env, &q, EpisodeTag(e), epsilon, &mut env_rng, &mut policy_rng)?;
            let shaped_return = episode.shaped_return();
            let raw_return = episode.raw_return();
            let gated = buffer.gate(shaped_return, config.gate_quantile);

            let mut refit_seconds = 0.0;
            if gated {
                let report = buffer.insert_episode(episode, Some(q.model().as_ref()))?;
                if report.inserted {
                    record.insertions += 1;
                }
                if report.refit_required {
                    let started = Instant::now();
                    q = run_fqi(buffer.transitions(), backend.as_ref(), &config.fqi, &mut fqi_rng)?;
                    record.refit_count += 1;
                    if config.record_timing {
                        refit_seconds = started.elapsed().as_secs_f64();
                    }
                }
            }
            record.rows.push(EpisodeRow {
                episode: e,
                shaped_return,
                raw_return,
                epsilon,
                buffer_size: buffer.len(),
                gated,
                refit_count: record.refit_count,
                refit_seconds,
            });
        }
        Ok(())
    })();

    match outcome {
        Ok(()) => record.complete = true,
        Err(err) => {
            log::warn!("run with seed {} aborted: {err}", config.seed);
            record.error = Some(err.to_string());
        }
    }
    record.buffer = buffer.transitions().to_vec();
    Ok(record)
}

fn rollout<R: Rng + ?Sized>(
    env: &Env,
    q: &QFunction,
    tag: EpisodeTag,
    epsilon: f64,
    env_rng: &mut R,
    policy_rng: &mut R,
) -> Result<Episode> {
    let mut state = env.reset(env_rng.gen());
    let mut transitions = Vec::new();
    for step_index in 0..env.cap {
        let action = select_action(q, &state, epsilon, policy_rng)?;
        let step = env.step(&state, action, step_index)?;
        let done = step.done;
        transitions.push(Transition {
            tag,
            state,
            action,
            raw_reward: step.raw_reward,
            shaped_reward: step.shaped_reward,
            next_state: step.next_state.clone(),
            done,
        });
        if done {
            break;
        }
        state = step.next_state;
    }
    Ok(Episode { tag, transitions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressor::{Knn, QDataset, Regressor};
    use approx::assert_abs_diff_eq;

    fn flat_q(values: &[f64]) -> QFunction {
        // one context row per action at the same state
        let a = values.len();
        let x: Vec<Vec<f64>> = (0..a)
            .map(|i| crate::transition::encode_features(&State(vec![0.0]), ActionId(i), a))
            .collect();
        let fit = Knn::new(1).unwrap().fit(&QDataset::new(x, values.to_vec()).unwrap()).unwrap();
        QFunction::new(fit, 1, a).unwrap()
    }

    #[test]
    fn epsilon_schedule_values() {
        let s = EpsilonSchedule::new(0.7, 0.99, 0.1).unwrap();
        assert_eq!(s.at(0), 0.7);
        assert_abs_diff_eq!(s.at(100), 0.7 * 0.99f64.powi(100), epsilon = 1e-15);
        assert_abs_diff_eq!(s.at(100), 0.2562, epsilon = 1e-4);
        assert_eq!(s.at(100_000), 0.1);
        let mut prev = f64::INFINITY;
        for e in 0..1000 {
            let v = s.at(e);
            assert!(v <= prev && v >= 0.1);
            prev = v;
        }
    }

    #[test]
    fn epsilon_schedule_validation() {
        assert!(EpsilonSchedule::new(0.5, 0.99, 0.6).is_err());
        assert!(EpsilonSchedule::new(1.2, 0.99, 0.1).is_err());
        assert!(EpsilonSchedule::new(0.5, 0.0, 0.1).is_err());
        assert!(EpsilonSchedule::new(0.5, 1.0, 0.1).is_ok());
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let q = flat_q(&[0.2, 0.9, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(select_action(&q, &State(vec![0.0]), 0.0, &mut rng).unwrap(), ActionId(1));
        }
    }

    #[test]
    fn full_exploration_is_uniform() {
        let q = flat_q(&[0.0, 1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[select_action(&q, &State(vec![0.0]), 1.0, &mut rng).unwrap().0] += 1;
        }
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn action_sequence_is_seeded() {
        let q = flat_q(&[0.0, 1.0, 2.0]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| select_action(&q, &State(vec![0.0]), 0.5, &mut rng).unwrap().0)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
    }

    #[test]
    fn initial_batch_sizes() {
        let env = Env::with_default_cap(EnvKind::CartPole);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = collect_initial(&env, 128, &mut rng).unwrap();
        assert_eq!(batch.len(), 128);
        assert!(batch.iter().all(|t| t.tag.is_initial()));
        assert!(batch.iter().filter(|t| t.done).count() >= 1, "random CartPole episodes end quickly");

        let one = collect_initial(&Env::with_default_cap(EnvKind::MountainCar), 1, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert!((-0.6..=-0.4).contains(&one[0].state.0[0]));
    }

    #[test]
    fn initial_batch_respects_cap() {
        let env = Env::new(EnvKind::MountainCar, 10).unwrap();
        let batch = collect_initial(&env, 35, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dones: Vec<usize> = batch.iter().enumerate().filter(|(_, t)| t.done).map(|(i, _)| i).collect();
        assert_eq!(dones, vec![9, 19, 29]);
    }

    fn small(env: EnvKind, seed: u64) -> AgentConfig {
        let mut cfg = AgentConfig::defaults(env, seed);
        cfg.episodes = 6;
        cfg.cap = 40;
        cfg.initial_transitions = 30;
        cfg.budget = 200;
        cfg.fqi.iterations = 5;
        cfg
    }

    #[test]
    fn zero_episodes_means_one_fit() {
        let mut cfg = small(EnvKind::CartPole, 0);
        cfg.episodes = 0;
        let rec = run(&cfg).unwrap();
        assert!(rec.complete);
        assert!(rec.rows.is_empty());
        assert_eq!(rec.refit_count, 1);
    }

    #[test]
    fn stale_full_buffer_never_refits() {
        let mut cfg = small(EnvKind::MountainCar, 3);
        cfg.operator = TruncationOperator::Stale;
        cfg.budget = 30;
        let rec = run(&cfg).unwrap();
        assert!(rec.complete);
        assert!(rec.rows.iter().all(|r| r.refit_count == 1 && r.buffer_size == 30));
        assert!(rec.rows[0].gated, "the first episode always passes the gate");
    }

    #[test]
    fn refits_track_insertions() {
        for env in EnvKind::ALL {
            let rec = run(&small(env, 5)).unwrap();
            assert!(rec.complete);
            assert_eq!(rec.refit_count, 1 + rec.insertions);
            assert_eq!(rec.rows.len(), 6);
            assert!(rec.rows.windows(2).all(|w| w[0].refit_count <= w[1].refit_count));
            assert!(rec.rows.iter().all(|r| r.buffer_size <= 200));
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let a = run(&small(EnvKind::Acrobot, 11)).unwrap();
        let b = run(&small(EnvKind::Acrobot, 11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bridge_failure_yields_error_or_partial_record() {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut cfg = small(EnvKind::CartPole, 0);
        cfg.backend = BackendConfig::Remote {
            endpoint: format!("127.0.0.1:{port}"),
            embed_layer: None,
        };
        let rec = run(&cfg).unwrap();
        assert!(!rec.complete);
        assert!(rec.error.unwrap().contains("connect"));
        assert!(rec.rows.is_empty());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small(EnvKind::CartPole, 0);
        cfg.initial_transitions = 500;
        assert!(run(&cfg).is_err());
        let mut cfg = small(EnvKind::CartPole, 0);
        cfg.fqi.action_count = 3;
        assert!(run(&cfg).is_err());
    }
}

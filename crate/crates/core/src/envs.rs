//! Classic-control environments with Gymnasium v1 dynamics.
//!
//! Stepping is a pure function of `(state, action, step_index)`, so an
//! environment instance is only the pair `(kind, cap)`. Observations follow
//! the Gymnasium layout; Acrobot angles are recovered from their
//! `(cos, sin)` pairs on every step.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    CartPole,
    MountainCar,
    Acrobot,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::CartPole, EnvKind::MountainCar, EnvKind::Acrobot];

    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::CartPole => 4,
            EnvKind::MountainCar => 2,
            EnvKind::Acrobot => 6,
        }
    }

    pub fn action_count(self) -> usize {
        match self {
            EnvKind::CartPole => 2,
            EnvKind::MountainCar => 3,
            EnvKind::Acrobot => 3,
        }
    }

    /// Native episode step cap of the v0/v1 registrations.
    pub fn default_cap(self) -> usize {
        match self {
            EnvKind::CartPole => 500,
            EnvKind::MountainCar => 200,
            EnvKind::Acrobot => 500,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::CartPole => "CartPole",
            EnvKind::MountainCar => "MountainCar",
            EnvKind::Acrobot => "Acrobot",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "cartpole" | "cartpolev1" => Ok(EnvKind::CartPole),
            "mountaincar" | "mountaincarv0" => Ok(EnvKind::MountainCar),
            "acrobot" | "acrobotv1" => Ok(EnvKind::Acrobot),
            _ => Err(Error::InvalidInput(format!("unknown environment `{s}`"))),
        }
    }
}

/// An observation vector; its length is the state dimension of the owning kind.
#[derive(Debug, Clone, PartialEq)]
pub struct State(pub Vec<f64>);

impl State {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActionId(pub usize);

impl ActionId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: State,
    pub raw_reward: f64,
    pub shaped_reward: f64,
    /// True on termination or when the step cap is reached.
    pub done: bool,
    /// True only for a termination of the underlying task.
    pub terminated: bool,
}

/// An environment instance: a kind plus its episode step cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Env {
    pub kind: EnvKind,
    pub cap: usize,
}

impl Env {
    pub fn new(kind: EnvKind, cap: usize) -> Result<Self> {
        if cap == 0 {
            return Err(Error::InvalidInput("step cap must be at least 1".into()));
        }
        Ok(Self { kind, cap })
    }

    pub fn with_default_cap(kind: EnvKind) -> Self {
        Self {
            kind,
            cap: kind.default_cap(),
        }
    }

    pub fn reset(&self, seed: u64) -> State {
        reset(self.kind, seed)
    }

    pub fn step(&self, state: &State, action: ActionId, step_index: usize) -> Result<StepOutcome> {
        if step_index >= self.cap {
            return Err(Error::InvalidInput(format!(
                "step index {step_index} is past the cap {}",
                self.cap
            )));
        }
        let kind = self.kind;
        if state.len() != kind.state_dim() {
            return Err(Error::WidthMismatch {
                expected: kind.state_dim(),
                actual: state.len(),
            });
        }
        if action.0 >= kind.action_count() {
            return Err(Error::InvalidAction {
                env: kind.name(),
                action: action.0,
                count: kind.action_count(),
            });
        }
        let (next_state, raw_reward, terminated) = match kind {
            EnvKind::CartPole => cartpole::step(state.values(), action.0),
            EnvKind::MountainCar => mountain_car::step(state.values(), action.0),
            EnvKind::Acrobot => acrobot::step(state.values(), action.0),
        };
        let shaped_reward = shaped_reward(kind, &next_state);
        Ok(StepOutcome {
            next_state,
            raw_reward,
            shaped_reward,
            done: terminated || step_index + 1 >= self.cap,
            terminated,
        })
    }
}

/// Samples an initial state from the kind's standard initial distribution.
pub fn reset(kind: EnvKind, seed: u64) -> State {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        EnvKind::CartPole => State((0..4).map(|_| rng.gen_range(-0.05..0.05)).collect()),
        EnvKind::MountainCar => State(vec![rng.gen_range(-0.6..-0.4), 0.0]),
        EnvKind::Acrobot => {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.1..0.1)).collect();
            acrobot::observe(&raw)
        }
    }
}

/// Steps with the kind's native cap.
pub fn step(kind: EnvKind, state: &State, action: ActionId, step_index: usize) -> Result<StepOutcome> {
    Env::with_default_cap(kind).step(state, action, step_index)
}

/// Dense surrogate reward evaluated on a (next) state.
pub fn shaped_reward(kind: EnvKind, state: &State) -> f64 {
    let s = state.values();
    match kind {
        EnvKind::CartPole => {
            2.0 - s[0].abs() / cartpole::X_THRESHOLD - s[2].abs() / cartpole::THETA_THRESHOLD
        }
        EnvKind::MountainCar => {
            const VELOCITY_BONUS: f64 = 10.0;
            let span = mountain_car::MAX_POSITION - mountain_car::MIN_POSITION;
            (s[0] - mountain_car::MIN_POSITION) / span + VELOCITY_BONUS * s[1].abs() - 1.0
        }
        EnvKind::Acrobot => {
            let theta1 = s[1].atan2(s[0]);
            let theta2 = s[3].atan2(s[2]);
            -theta1.cos() - (theta1 + theta2).cos()
        }
    }
}

pub mod cartpole {
    pub const GRAVITY: f64 = 9.8;
    pub const MASS_CART: f64 = 1.0;
    pub const MASS_POLE: f64 = 0.1;
    pub const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
    /// Half the pole length.
    pub const LENGTH: f64 = 0.5;
    pub const POLE_MASS_LENGTH: f64 = MASS_POLE * LENGTH;
    pub const FORCE_MAG: f64 = 10.0;
    /// Seconds between updates (explicit Euler).
    pub const TAU: f64 = 0.02;
    /// 12 degrees.
    pub const THETA_THRESHOLD: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
    pub const X_THRESHOLD: f64 = 2.4;

    pub(super) fn step(s: &[f64], action: usize) -> (super::State, f64, bool) {
        let (x, x_dot, theta, theta_dot) = (s[0], s[1], s[2], s[3]);
        let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
        let costheta = theta.cos();
        let sintheta = theta.sin();

        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sintheta) / TOTAL_MASS;
        let thetaacc = (GRAVITY * sintheta - costheta * temp)
            / (LENGTH * (4.0 / 3.0 - MASS_POLE * costheta * costheta / TOTAL_MASS));
        let xacc = temp - POLE_MASS_LENGTH * thetaacc * costheta / TOTAL_MASS;

        let x = x + TAU * x_dot;
        let x_dot = x_dot + TAU * xacc;
        let theta = theta + TAU * theta_dot;
        let theta_dot = theta_dot + TAU * thetaacc;

        let terminated =
            !(-X_THRESHOLD..=X_THRESHOLD).contains(&x) || !(-THETA_THRESHOLD..=THETA_THRESHOLD).contains(&theta);
        (super::State(vec![x, x_dot, theta, theta_dot]), 1.0, terminated)
    }
}

pub mod mountain_car {
    pub const MIN_POSITION: f64 = -1.2;
    pub const MAX_POSITION: f64 = 0.6;
    pub const MAX_SPEED: f64 = 0.07;
    pub const GOAL_POSITION: f64 = 0.5;
    pub const GOAL_VELOCITY: f64 = 0.0;
    pub const FORCE: f64 = 0.001;
    pub const GRAVITY: f64 = 0.0025;

    pub(super) fn step(s: &[f64], action: usize) -> (super::State, f64, bool) {
        let (mut position, mut velocity) = (s[0], s[1]);
        velocity += (action as f64 - 1.0) * FORCE + (3.0 * position).cos() * (-GRAVITY);
        velocity = velocity.clamp(-MAX_SPEED, MAX_SPEED);
        position += velocity;
        position = position.clamp(MIN_POSITION, MAX_POSITION);
        if position == MIN_POSITION && velocity < 0.0 {
            velocity = 0.0;
        }
        let terminated = position >= GOAL_POSITION && velocity >= GOAL_VELOCITY;
        (super::State(vec![position, velocity]), -1.0, terminated)
    }
}

pub mod acrobot {
    use super::PI;

    /// Seconds per RK4 step.
    pub const DT: f64 = 0.2;
    pub const LINK_LENGTH_1: f64 = 1.0;
    pub const LINK_MASS_1: f64 = 1.0;
    pub const LINK_MASS_2: f64 = 1.0;
    /// Position of the centre of mass of each link.
    pub const LINK_COM_POS_1: f64 = 0.5;
    pub const LINK_COM_POS_2: f64 = 0.5;
    pub const LINK_MOI: f64 = 1.0;
    pub const MAX_VEL_1: f64 = 4.0 * PI;
    pub const MAX_VEL_2: f64 = 9.0 * PI;
    pub const AVAIL_TORQUE: [f64; 3] = [-1.0, 0.0, 1.0];
    const GRAVITY: f64 = 9.8;

    /// Maps the internal `(θ1, θ2, θ̇1, θ̇2)` state to the 6-vector observation.
    pub fn observe(raw: &[f64]) -> super::State {
        super::State(vec![
            raw[0].cos(),
            raw[0].sin(),
            raw[1].cos(),
            raw[1].sin(),
            raw[2],
            raw[3],
        ])
    }

    pub(super) fn step(obs: &[f64], action: usize) -> (super::State, f64, bool) {
        let theta1 = obs[1].atan2(obs[0]);
        let theta2 = obs[3].atan2(obs[2]);
        let start = [theta1, theta2, obs[4], obs[5]];
        let torque = AVAIL_TORQUE[action];

        let mut ns = rk4(start, torque);
        ns[0] = wrap(ns[0], -PI, PI);
        ns[1] = wrap(ns[1], -PI, PI);
        ns[2] = ns[2].clamp(-MAX_VEL_1, MAX_VEL_1);
        ns[3] = ns[3].clamp(-MAX_VEL_2, MAX_VEL_2);

        let terminated = -ns[0].cos() - (ns[1] + ns[0]).cos() > 1.0;
        let reward = if terminated { 0.0 } else { -1.0 };
        (observe(&ns), reward, terminated)
    }

    fn wrap(mut x: f64, lo: f64, hi: f64) -> f64 {
        let diff = hi - lo;
        while x > hi {
            x -= diff;
        }
        while x < lo {
            x += diff;
        }
        x
    }

    /// One classical Runge-Kutta step over `DT` with the torque held fixed.
    fn rk4(y0: [f64; 4], torque: f64) -> [f64; 4] {
        let add = |y: &[f64; 4], k: &[f64; 4], h: f64| {
            [y[0] + h * k[0], y[1] + h * k[1], y[2] + h * k[2], y[3] + h * k[3]]
        };
        let k1 = dsdt(&y0, torque);
        let k2 = dsdt(&add(&y0, &k1, DT / 2.0), torque);
        let k3 = dsdt(&add(&y0, &k2, DT / 2.0), torque);
        let k4 = dsdt(&add(&y0, &k3, DT), torque);
        let mut out = [0.0; 4];
        for i in 0..4 {
            out[i] = y0[i] + DT / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out
    }

    /// Equations of motion, "book" variant.
    fn dsdt(s: &[f64; 4], a: f64) -> [f64; 4] {
        let m1 = LINK_MASS_1;
        let m2 = LINK_MASS_2;
        let l1 = LINK_LENGTH_1;
        let lc1 = LINK_COM_POS_1;
        let lc2 = LINK_COM_POS_2;
        let i1 = LINK_MOI;
        let i2 = LINK_MOI;
        let g = GRAVITY;
        let [theta1, theta2, dtheta1, dtheta2] = *s;

        let d1 = m1 * lc1 * lc1
            + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * theta2.cos())
            + i1
            + i2;
        let d2 = m2 * (lc2 * lc2 + l1 * lc2 * theta2.cos()) + i2;
        let phi2 = m2 * lc2 * g * (theta1 + theta2 - PI / 2.0).cos();
        let phi1 = -m2 * l1 * lc2 * dtheta2 * dtheta2 * theta2.sin()
            - 2.0 * m2 * l1 * lc2 * dtheta2 * dtheta1 * theta2.sin()
            + (m1 * lc1 + m2 * l1) * g * (theta1 - PI / 2.0).cos()
            + phi2;
        let ddtheta2 = (a + d1 / d2 * phi1 - m2 * l1 * lc2 * dtheta1 * dtheta1 * theta2.sin() - phi2)
            / (m2 * lc2 * lc2 + i2 - d1 * d1 / d2);
        let ddtheta1 = -(d2 * ddtheta2 + phi1) / d1;
        [dtheta1, dtheta2, ddtheta1, ddtheta2]
    }
}

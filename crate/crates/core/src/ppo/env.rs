//! A 2-D point-mass reacher: a small continuous-control task with dense
//! reward, standing in for a physics-engine locomotion benchmark.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Observation width: position, velocity and the offset to the target.
pub const OBS_DIM: usize = 6;
/// Action width: a force on each axis.
pub const ACT_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Weight of the quadratic action penalty.
    #[serde(default = "default_action_cost")]
    pub action_cost: f64,
}

fn default_dt() -> f64 {
    0.1
}
fn default_horizon() -> usize {
    200
}
fn default_action_cost() -> f64 {
    0.01
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            horizon: default_horizon(),
            action_cost: default_action_cost(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyEnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub target: [f64; 2],
    pub step_count: usize,
}

impl ToyEnvState {
    /// Random start and target in `[-1, 1]²`, at rest.
    pub fn reset(rng: &mut impl Rng) -> Self {
        let mut draw = || [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        let position = draw();
        let target = draw();
        Self {
            position,
            velocity: [0.0; 2],
            target,
            step_count: 0,
        }
    }

    pub fn observation(&self) -> [f64; OBS_DIM] {
        [
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
            self.target[0] - self.position[0],
            self.target[1] - self.position[1],
        ]
    }

    pub fn distance_to_target(&self) -> f64 {
        let dx = self.position[0] - self.target[0];
        let dy = self.position[1] - self.target[1];
        dx.hypot(dy)
    }
}

/// One transition. The action is clamped to `[-1, 1]²`; the position is
/// clamped to `[-1, 1]²` after integration. `done` is set when the step count
/// reaches the horizon.
pub fn env_step(cfg: &EnvConfig, state: &ToyEnvState, action: [f64; ACT_DIM]) -> (ToyEnvState, f64, bool) {
    let a = action.map(|x| if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) });
    let mut next = *state;
    for k in 0..2 {
        next.velocity[k] += a[k] * cfg.dt;
        next.position[k] = (next.position[k] + next.velocity[k] * cfg.dt).clamp(-1.0, 1.0);
    }
    next.step_count += 1;
    let reward = -next.distance_to_target() - cfg.action_cost * (a[0] * a[0] + a[1] * a[1]);
    let done = next.step_count >= cfg.horizon;
    (next, reward, done)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn at_rest_on_target_gives_zero_reward() {
        let cfg = EnvConfig::default();
        let mut s = ToyEnvState {
            position: [0.3, -0.2],
            velocity: [0.0; 2],
            target: [0.3, -0.2],
            step_count: 0,
        };
        for _ in 0..5 {
            let (n, r, done) = env_step(&cfg, &s, [0.0, 0.0]);
            assert_eq!(r, 0.0);
            assert!(!done);
            s = n;
        }
    }

    #[test]
    fn transitions_are_deterministic() {
        let cfg = EnvConfig::default();
        let s = ToyEnvState::reset(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(env_step(&cfg, &s, [0.4, -0.9]), env_step(&cfg, &s, [0.4, -0.9]));
    }

    #[test]
    fn reward_increases_towards_target() {
        // Fixed zero action, start positions on a line towards the target.
        let cfg = EnvConfig::default();
        let mut last = f64::NEG_INFINITY;
        for i in 0..=20 {
            let x = -1.0 + 0.05 * i as f64;
            let s = ToyEnvState {
                position: [x, 0.5 * x],
                velocity: [0.0; 2],
                target: [0.0, 0.0],
                step_count: 0,
            };
            let (_, r, _) = env_step(&cfg, &s, [0.0, 0.0]);
            assert!(r > last, "reward {r} at x={x} not above {last}");
            last = r;
        }
    }

    #[test]
    fn actions_and_positions_are_clamped() {
        let cfg = EnvConfig::default();
        let s = ToyEnvState {
            position: [0.99, 0.0],
            velocity: [5.0, 0.0],
            target: [0.0, 0.0],
            step_count: 0,
        };
        let (n, r, _) = env_step(&cfg, &s, [100.0, -100.0]);
        assert_eq!(n.position[0], 1.0);
        assert!((n.velocity[1] + 0.1).abs() < 1e-15);
        // Penalty uses the clamped action.
        assert!((r - (-n.distance_to_target() - 0.02)).abs() < 1e-15);
    }

    #[test]
    fn episode_ends_at_horizon() {
        let cfg = EnvConfig {
            horizon: 3,
            ..EnvConfig::default()
        };
        let mut s = ToyEnvState::reset(&mut ChaCha8Rng::seed_from_u64(0));
        let mut dones = Vec::new();
        for _ in 0..3 {
            let (n, _, d) = env_step(&cfg, &s, [0.1, 0.1]);
            dones.push(d);
            s = n;
        }
        assert_eq!(dones, [false, false, true]);
    }
}

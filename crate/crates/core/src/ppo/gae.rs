//! Generalized advantage estimation.

use crate::error::{Error, Result};

/// Backward GAE recursion over one rollout.
///
/// `dones[t]` marks that the episode ended with the transition at `t`, so
/// neither the next value nor later advantages flow back across it.
/// `bootstrap` is the value estimate of the state after the final step.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Shape(format!(
            "gae: {} rewards, {} values, {} dones",
            n,
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_inputs_give_zero_advantages() {
        let (a, r) = compute_gae(&[0.0; 4], &[0.0; 4], &[false; 4], 0.0, 0.99, 0.95).unwrap();
        assert_eq!(a, vec![0.0; 4]);
        assert_eq!(r, vec![0.0; 4]);
    }

    #[test]
    fn hand_recursion() {
        let (a, r) = compute_gae(&[1.0, 1.0], &[0.0, 0.0], &[false, false], 0.0, 0.99, 0.95).unwrap();
        assert_eq!(a, vec![1.0 + 0.99 * 0.95, 1.0]);
        // The decimal 1.9405 itself is one ulp away from 1 + fl(0.99 * 0.95).
        assert!((a[0] - 1.9405).abs() <= f64::EPSILON * 2.0);
        assert_eq!(r, a);
    }

    #[test]
    fn lambda_zero_is_td_error() {
        let rewards = [0.5, -1.0, 2.0];
        let values = [0.1, 0.7, -0.3];
        let (a, _) = compute_gae(&rewards, &values, &[false; 3], 0.9, 0.9, 0.0).unwrap();
        let next = [0.7, -0.3, 0.9];
        for t in 0..3 {
            assert_eq!(a[t], rewards[t] + 0.9 * next[t] - values[t]);
        }
    }

    #[test]
    fn done_stops_bootstrapping() {
        let (a, _) = compute_gae(&[1.0, 1.0], &[0.0, 5.0], &[true, false], 0.0, 0.99, 0.95).unwrap();
        assert_eq!(a[0], 1.0);
        assert_eq!(a[1], 1.0 - 5.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(compute_gae(&[1.0], &[0.0, 0.0], &[false], 0.0, 0.99, 0.95).is_err());
        assert!(compute_gae(&[1.0], &[0.0], &[], 0.0, 0.99, 0.95).is_err());
    }
}

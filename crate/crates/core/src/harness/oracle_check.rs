use crate::envs::oracle::{planned_return, random_policy_expected_return, value_iteration, ValueIteration};
use crate::envs::{make_spec, rollout, EnvParams, EnvSpec, RandomPolicy, TabularEnv, ENV_NAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleLine {
    pub name: String,
    pub expected: f64,
    pub observed: f64,
    pub tolerance: f64,
}

impl OracleLine {
    pub fn pass(&self) -> bool {
        (self.expected - self.observed).abs() <= self.tolerance
    }
}

/// Planner and random-policy consistency checks on every environment with
/// default parameters: the greedy plan's discounted return must equal the
/// value-iteration start value, and the Monte Carlo mean of `rollouts`
/// random episodes must lie within three standard errors of the exact
/// expectation.
pub fn oracle_checks(rollouts: usize, seed: u64) -> Vec<OracleLine> {
    let mut lines = Vec::new();
    for name in ENV_NAMES {
        let spec = make_spec(name, &EnvParams::default()).expect("default params are valid");
        let vi = value_iteration(&spec, 0.99, 1e-13);
        let (discounted, undiscounted) = planned_return(&spec, &vi);
        lines.push(OracleLine {
            name: format!("{name}: planned discounted return plus cut-off tail = value-iteration start value"),
            expected: vi.start_value(&spec),
            observed: discounted + truncated_tail(&spec, &vi),
            tolerance: 1e-9,
        });
        lines.push(OracleLine {
            name: format!("{name}: planned undiscounted return (informational)"),
            expected: undiscounted,
            observed: undiscounted,
            tolerance: 0.0,
        });

        let exact = random_policy_expected_return(&spec);
        let mut env = TabularEnv::new(spec.clone(), seed);
        let mut policy = RandomPolicy {
            num_actions: spec.num_actions,
        };
        let returns: Vec<f64> = (0..rollouts)
            .map(|i| rollout(&mut env, &mut policy, spec.max_steps, seed.wrapping_add(i as u64)).total_reward())
            .collect();
        let k = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / k;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1.0);
        lines.push(OracleLine {
            name: format!("{name}: random-policy Monte Carlo mean vs exact expectation (3 SE)"),
            expected: exact,
            observed: mean,
            tolerance: 3.0 * (var / k).sqrt(),
        });
    }
    lines
}

/// Discounted optimal value beyond the step limit, `gamma^T V(s_T)`, summed
/// over start states for greedy plans that have not terminated by then.
fn truncated_tail(spec: &EnvSpec, vi: &ValueIteration) -> f64 {
    let mut tail = 0.0;
    for (start, &p) in spec.initial.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let mut s = start;
        let mut steps = 0;
        while steps < spec.max_steps && !spec.terminal[s] {
            s = spec.outcomes(s, vi.greedy(spec, s))[0].0;
            steps += 1;
        }
        if !spec.terminal[s] {
            tail += p * vi.gamma.powi(steps as i32) * vi.v[s];
        }
    }
    tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_oracles_agree() {
        for line in oracle_checks(1000, 11) {
            assert!(line.pass(), "{line:?}");
        }
    }
}

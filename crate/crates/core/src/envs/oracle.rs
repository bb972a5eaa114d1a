//! Exact planners over an [`EnvSpec`]; used as ceilings and as test oracles.

use super::{Action, EnvSpec, State};

/// Optimal action values of the discounted, step-unlimited MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueIteration {
    pub gamma: f64,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub sweeps: usize,
}

impl ValueIteration {
    pub fn greedy(&self, spec: &EnvSpec, s: State) -> Action {
        let row = &self.q[s * spec.num_actions..(s + 1) * spec.num_actions];
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }

    /// Expected optimal value under the start distribution.
    pub fn start_value(&self, spec: &EnvSpec) -> f64 {
        spec.initial.iter().zip(&self.v).map(|(p, v)| p * v).sum()
    }
}

pub fn value_iteration(spec: &EnvSpec, gamma: f64, tol: f64) -> ValueIteration {
    let (ns, na) = (spec.num_states, spec.num_actions);
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            if spec.terminal[s] {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let i = spec.idx(s, a);
                let future: f64 = spec.transitions[i]
                    .iter()
                    .map(|&(n, p)| if spec.terminal[n] { 0.0 } else { p * v[n] })
                    .sum();
                q[i] = spec.rewards[i] + gamma * future;
                best = best.max(q[i]);
            }
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta < tol || sweeps > 100_000 {
            break;
        }
    }
    ValueIteration { gamma, q, v, sweeps }
}

/// Follows the value-iteration greedy policy from each start state and
/// returns `(expected discounted return, expected undiscounted return)`.
/// Only valid for deterministic transitions.
pub fn planned_return(spec: &EnvSpec, vi: &ValueIteration) -> (f64, f64) {
    let mut discounted = 0.0;
    let mut undiscounted = 0.0;
    for (start, &p) in spec.initial.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let (mut s, mut disc, mut d_ret, mut u_ret) = (start, 1.0, 0.0, 0.0);
        for _ in 0..spec.max_steps {
            let a = vi.greedy(spec, s);
            let r = spec.reward(s, a);
            d_ret += disc * r;
            u_ret += r;
            disc *= vi.gamma;
            s = spec.outcomes(s, a)[0].0;
            if spec.terminal[s] {
                break;
            }
        }
        discounted += p * d_ret;
        undiscounted += p * u_ret;
    }
    (discounted, undiscounted)
}

/// Expected undiscounted episode return of the uniform-random policy,
/// computed by propagating the state distribution over the step limit.
pub fn random_policy_expected_return(spec: &EnvSpec) -> f64 {
    let (ns, na) = (spec.num_states, spec.num_actions);
    let mut dist = spec.initial.clone();
    let mut expected = 0.0;
    for _ in 0..spec.max_steps {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if dist[s] == 0.0 || spec.terminal[s] {
                continue;
            }
            for a in 0..na {
                let mass = dist[s] / na as f64;
                expected += mass * spec.reward(s, a);
                for &(n, p) in spec.outcomes(s, a) {
                    next[n] += mass * p;
                }
            }
        }
        for s in 0..ns {
            if spec.terminal[s] {
                next[s] = 0.0;
            }
        }
        dist = next;
    }
    expected
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_spec, EnvParams};

    #[test]
    fn cliff_optimum_follows_the_edge() {
        let spec = make_spec("cliff_grid", &EnvParams::default()).unwrap();
        let vi = value_iteration(&spec, 0.99, 1e-13);
        let (disc, undisc) = planned_return(&spec, &vi);
        assert!((disc - vi.start_value(&spec)).abs() < 1e-9);
        // 12 penalised steps along the row above the cliff plus +1 on entering the goal.
        assert!((undisc - 0.88).abs() < 1e-12, "{undisc}");
    }

    #[test]
    fn random_chain_expectation_is_small_positive() {
        let spec = make_spec("chain_walk", &EnvParams::default()).unwrap();
        let e = random_policy_expected_return(&spec);
        assert!(e > 0.0 && e < 1.0, "{e}");
    }
}

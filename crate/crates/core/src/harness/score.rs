use thiserror::Error;

use crate::composite::CompositeSpec;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("normalized score undefined: {0}")]
pub struct ScoreError(pub String);

/// Sum of observed composite rewards over an episode divided by its largest
/// achievable value for episodes of `horizon` steps with per-step reward at
/// most `r_max`. Max uses `horizon · r_max` as the ceiling.
pub fn normalized_score(
    spec: &CompositeSpec,
    delay: usize,
    horizon: usize,
    r_max: f64,
    sum_observed: f64,
) -> Result<f64, ScoreError> {
    if delay == 0 {
        return Err(ScoreError("delay must be >= 1".into()));
    }
    if horizon == 0 {
        return Err(ScoreError("horizon must be >= 1".into()));
    }
    if !(r_max > 0.0) || !r_max.is_finite() {
        return Err(ScoreError(format!("r_max must be positive and finite, got {r_max}")));
    }
    let t = horizon as f64;
    let n = delay as f64;
    let denom = match spec {
        CompositeSpec::Sum | CompositeSpec::Max { .. } => t * r_max,
        CompositeSpec::SumSquare => t * r_max * r_max,
        CompositeSpec::SquareSum => (t / n) * (r_max * n).powi(2),
    };
    if denom == 0.0 || !denom.is_finite() {
        return Err(ScoreError(format!("denominator is {denom}")));
    }
    Ok(sum_observed / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composite::composite;

    #[test]
    fn ceilings_score_one() {
        let (t, r) = (20usize, 0.7);
        let steps = vec![r; t];
        for n in [1usize, 2, 4, 5, 10, 20] {
            for spec in [CompositeSpec::Sum, CompositeSpec::SumSquare, CompositeSpec::SquareSum] {
                let total: f64 = steps.chunks(n).map(|c| composite(&spec, c).unwrap()).sum();
                let s = normalized_score(&spec, n, t, r, total).unwrap();
                assert!((s - 1.0).abs() < 1e-12, "{spec} n={n}: {s}");
            }
        }
    }

    #[test]
    fn max_hand_evaluated() {
        // Ten steps, delay 5, rewards peaking once per segment.
        let r = [0.0, 0.1, 1.0, 0.1, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0];
        let spec = CompositeSpec::max(3.0).unwrap();
        let seg = |xs: &[f64]| {
            let z: f64 = xs.iter().map(|x| (3.0 * x).exp()).sum();
            5.0 * xs.iter().map(|x| (3.0 * x).exp() / z * x).sum::<f64>()
        };
        let numer = seg(&r[..5]) + seg(&r[5..]);
        let got = normalized_score(&spec, 5, 10, 1.0, numer).unwrap();
        assert!((got - numer / 10.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        assert!(normalized_score(&CompositeSpec::Sum, 0, 10, 1.0, 1.0).is_err());
        assert!(normalized_score(&CompositeSpec::Sum, 1, 0, 1.0, 1.0).is_err());
        assert!(normalized_score(&CompositeSpec::Sum, 1, 10, 0.0, 1.0).is_err());
    }
}

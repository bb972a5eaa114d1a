//! Importance-weight diagnostics: flatness under Sum, peak alignment under Max.

use crate::model::{composite_predict, ModelError, RewardModel, Window};

/// Outcome of comparing a segment's weight argmax with its true reward argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeakMatch {
    Hit,
    Miss,
    /// All weights equal: there is no peak to compare.
    Degenerate,
}

/// Compares `argmax(weights)` against the true rewards. A hit means the step
/// with the largest weight carries the segment's largest true reward, so
/// ties in the true rewards count for every tied step.
pub fn peak_match(weights: &[f64], true_rewards: &[f64]) -> PeakMatch {
    assert_eq!(weights.len(), true_rewards.len());
    assert!(!weights.is_empty());
    if weights.iter().all(|&w| w == weights[0]) {
        return PeakMatch::Degenerate;
    }
    let top = argmax(weights);
    let best = true_rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if true_rewards[top] == best {
        PeakMatch::Hit
    } else {
        PeakMatch::Miss
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WeightReport {
    pub segments: usize,
    pub steps: usize,
    /// Mean over all steps of `|w_t − 1|`.
    pub mean_abs_dev: f64,
    pub hits: usize,
    pub degenerate: usize,
}

impl WeightReport {
    /// Fraction of segments whose weight peak hits a true-reward peak;
    /// degenerate segments count as misses.
    pub fn hit_rate(&self) -> f64 {
        if self.segments == 0 {
            0.0
        } else {
            self.hits as f64 / self.segments as f64
        }
    }

    /// True when every segment had all-equal weights.
    pub fn all_degenerate(&self) -> bool {
        self.segments > 0 && self.degenerate == self.segments
    }
}

/// Weight statistics of `model` over segments paired with their hidden rewards.
pub fn weight_report<'a, I>(model: &RewardModel, segments: I) -> Result<WeightReport, ModelError>
where
    I: IntoIterator<Item = (&'a Window, &'a [f64])>,
{
    let mut report = WeightReport::default();
    let mut dev = 0.0;
    for (window, hidden) in segments {
        let out = model.encode(window)?;
        let pred = composite_predict(&out, 0, out.len())?;
        dev += pred.weights.iter().map(|w| (w - 1.0).abs()).sum::<f64>();
        report.steps += pred.weights.len();
        report.segments += 1;
        match peak_match(&pred.weights, hidden) {
            PeakMatch::Hit => report.hits += 1,
            PeakMatch::Degenerate => report.degenerate += 1,
            PeakMatch::Miss => {}
        }
    }
    if report.steps > 0 {
        report.mean_abs_dev = dev / report.steps as f64;
    }
    Ok(report)
}

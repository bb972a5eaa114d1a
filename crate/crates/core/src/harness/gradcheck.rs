use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{ModelError, RewardModel, RewardModelConfig, Window};
use crate::trainer::{dataset_loss, loss_and_grads, LabeledWindow, TrainError};

/// Denominator floor for relative errors, per unit of loss magnitude.
/// Central differences carry rounding noise of order `eps * |loss| / h`, so
/// gradients that are zero up to rounding are compared against this floor.
pub const REL_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub draws: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    /// Analytic and numeric values at the worst entry.
    pub worst_values: (f64, f64),
}

/// Configuration used by the check: d = 8, two causal layers.
pub fn check_config() -> RewardModelConfig {
    RewardModelConfig {
        embed_dim: 8,
        num_causal_layers: 2,
        num_heads: 2,
        max_window: 4,
        ..RewardModelConfig::desk(3, 2)
    }
}

/// Central-difference check of the MSE loss gradient over `draws` random
/// models, each on a random 3-step segment with a random target.
pub fn grad_check(draws: usize, h: f64, seed: u64) -> Result<GradCheckReport, TrainError> {
    let cfg = check_config();
    let names: Vec<String> = cfg.param_shapes().into_iter().map(|(n, _)| n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        draws,
        entries: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        worst_values: (0.0, 0.0),
    };
    for _ in 0..draws {
        let mut model = RewardModel::new(cfg.clone(), rng.gen())?;
        for p in model.params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
        let pairs: Vec<(usize, usize)> = (0..3).map(|_| (rng.gen_range(0..3), rng.gen_range(0..2))).collect();
        let item = LabeledWindow {
            window: Window::one_hot(&pairs, 3, 2).map_err(ModelError::from)?,
            target: rng.gen_range(-2.0..2.0),
        };
        let data = std::slice::from_ref(&item);
        let (loss, grads) = loss_and_grads(&model, &[&item], None)?;
        let floor = REL_FLOOR * loss.abs().max(1.0);
        for (pi, grad) in grads.iter().enumerate() {
            for (j, &analytic) in grad.iter().enumerate() {
                let orig = model.params()[pi].data()[j];
                model.params_mut()[pi].data_mut()[j] = orig + h;
                let up = dataset_loss(&model, data)?;
                model.params_mut()[pi].data_mut()[j] = orig - h;
                let down = dataset_loss(&model, data)?;
                model.params_mut()[pi].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = relative_error(analytic, numeric, floor);
                report.entries += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = (names[pi].clone(), j);
                    report.worst_values = (analytic, numeric);
                }
            }
        }
    }
    Ok(report)
}

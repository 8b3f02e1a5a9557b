//! Central finite-difference verification of tape gradients.
//!
//! The checker never touches the backward pass of the computation it
//! verifies: numeric derivatives come from forward evaluations only, so
//! it stays an independent oracle for the reverse sweep.

use crate::error::{FgnnError, Result};

use super::{Tape, Tensor, TensorId};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed guarded relative error.
    pub tolerance: f64,
    /// Below this magnitude both gradients count as zero; avoids
    /// amplifying finite-difference noise around true zeros.
    pub zero_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            zero_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (parameter name, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// |a - n| / max(|a|, |n|), zero when both magnitudes sit under the floor.
pub fn relative_error(analytic: f64, numeric: f64, zero_floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < zero_floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compare tape gradients of a scalar loss against central finite
/// differences for every element of every parameter.
///
/// `build` records the computation on a fresh tape from the given
/// parameter leaves and returns the loss id; it must be deterministic.
#[allow(clippy::needless_range_loop)]
pub fn check_gradients<F>(
    params: &[(String, Tensor)],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut working: Vec<(String, Tensor)> = params
        .iter()
        .map(|(name, t)| (name.clone(), t.clone().with_grad()))
        .collect();

    // Analytic gradients from one forward + backward.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = working.iter().map(|(_, t)| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| FgnnError::Contract("parameter missing gradient".into()))
        })
        .collect::<Result<_>>()?;
    drop(tape);

    let eval = |working: &[(String, Tensor)]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = working.iter().map(|(_, t)| tape.leaf(t)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value_scalar(loss))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for p in 0..working.len() {
        for i in 0..working[p].1.numel() {
            let original = working[p].1.values()[i];
            working[p].1.values_mut()[i] = original + cfg.step;
            let up = eval(&working)?;
            working[p].1.values_mut()[i] = original - cfg.step;
            let down = eval(&working)?;
            working[p].1.values_mut()[i] = original;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[p][i];
            let err = relative_error(a, numeric, cfg.zero_floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((working[p].0.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}

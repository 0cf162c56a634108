//! Central finite-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use super::params::Grads;
use super::transformer::Network;
use crate::error::{ApeError, Result};

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub const MAX_CHECKED_PARAMS: usize = 50_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn failing(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_error < self.tolerance))
            .map(|p| p.name.as_str())
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradients produced by `loss` against central differences of
/// the loss value, for every scalar of every registered parameter.
///
/// `loss` must return the loss and, when given a buffer, accumulate its
/// gradient into it.
pub fn grad_check<F>(net: &mut Network, tolerance: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&Network, Option<&mut Grads>) -> Result<f64>,
{
    let total = net.params.numel();
    if total > MAX_CHECKED_PARAMS {
        return Err(ApeError::InvalidArgument(format!(
            "{total} parameters is too many to check by finite differences"
        )));
    }
    let mut analytic = net.params.zero_grads();
    loss(net, Some(&mut analytic))?;

    let mut params = Vec::with_capacity(net.params.len());
    for index in 0..net.params.len() {
        let len = analytic.by_index(index).len();
        let mut worst: f64 = 0.0;
        for k in 0..len {
            let original = net.params.by_index(index).value[k];
            net.params.by_index_mut(index).value[k] = original + FD_STEP;
            let up = loss(net, None);
            net.params.by_index_mut(index).value[k] = original - FD_STEP;
            let down = loss(net, None);
            net.params.by_index_mut(index).value[k] = original;
            let numeric = (up? - down?) / (2.0 * FD_STEP);
            let err = relative_error(analytic.by_index(index)[k], numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        params.push(ParamCheck {
            name: net.params.by_index(index).name.clone(),
            max_rel_error: worst,
        });
    }
    let passed = params.iter().all(|p| p.max_rel_error < tolerance);
    Ok(GradCheckReport {
        params,
        tolerance,
        passed,
    })
}

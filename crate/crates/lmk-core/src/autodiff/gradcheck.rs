//! Central finite-difference gradient verification.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::ParamTensor;
use super::graph::{Graph, Mode, NodeId};
use crate::error::{Error, Result};

/// Settings for [`finite_diff_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckSettings {
    /// Central-difference step; must lie in [1e-7, 1e-3].
    pub eps: f64,
    /// Cap on coordinates probed per parameter tensor (sampled with a fixed
    /// seed when a tensor is larger). Zero means probe everything.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            eps: 1e-5,
            max_coords_per_tensor: 24,
            seed: 0,
        }
    }
}

/// Worst coordinate found by a check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic gradients of a scalar-valued graph against central
/// finite differences, coordinate by coordinate.
///
/// `build` must construct the loss from the given parameter leaves and be
/// deterministic for a fixed graph seed (the forward pass is re-run under
/// perturbation). Returns the max over sampled coordinates of
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
pub fn finite_diff_check<F>(
    params: &[ParamTensor],
    settings: GradCheckSettings,
    mode: Mode,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&settings.eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            settings.eps
        )));
    }

    let eval = |values: &[ParamTensor]| -> Result<f64> {
        let mut g = Graph::with_seed(mode, settings.seed);
        let ids: Vec<NodeId> = values
            .iter()
            .map(|p| g.param(p.shape.clone(), p.values.clone()))
            .collect();
        let loss = build(&mut g, &ids)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("finite_diff_check objective".into()));
        }
        Ok(value)
    };

    // Analytic pass.
    let mut g = Graph::with_seed(mode, settings.seed);
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| g.param(p.shape.clone(), p.values.clone()))
        .collect();
    let loss = build(&mut g, &ids)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::NonFinite("finite_diff_check objective".into()));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_default())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x9e3779b97f4a7c15);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if settings.max_coords_per_tensor == 0
            || n <= settings.max_coords_per_tensor
        {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(settings.max_coords_per_tensor);
            all
        };
        for c in coords {
            let orig = work[pi].values[c];
            work[pi].values[c] = orig + settings.eps;
            let f_plus = eval(&work)?;
            work[pi].values[c] = orig - settings.eps;
            let f_minus = eval(&work)?;
            work[pi].values[c] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * settings.eps);
            let a = if analytic[pi].is_empty() {
                0.0
            } else {
                analytic[pi][c]
            };
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = p.name.clone();
                report.worst_coord = c;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_checks_tightly() {
        let params = vec![ParamTensor::new(
            "p",
            vec![4],
            vec![0.3, -1.2, 2.0, 0.07],
        )];
        let report = finite_diff_check(
            &params,
            GradCheckSettings {
                eps: 1e-6,
                ..Default::default()
            },
            Mode::Eval,
            |g, ids| {
                let sq = g.sum_squares(ids[0]);
                Ok(g.scale(sq, 0.5))
            },
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-9, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn rejects_eps_outside_contract() {
        let params = vec![ParamTensor::new("p", vec![1], vec![1.0])];
        let bad = finite_diff_check(
            &params,
            GradCheckSettings {
                eps: 1e-2,
                ..Default::default()
            },
            Mode::Eval,
            |g, ids| Ok(g.sum(ids[0])),
        );
        assert!(bad.is_err());
    }
}

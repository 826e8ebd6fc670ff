//! Misfit and Tikhonov terms of the identification cost.
//!
//! All integrals use the trapezoidal rule on the model grid. The gradient
//! regularizer is `alpha * sum_i (E_{i+1} - E_i)^2 / dx`, i.e. the exact
//! `int E_x^2` of the piecewise-linear interpolant.

use serde::{Deserialize, Serialize};

use crate::data_gen::{Combine, MeasurementSet};
use crate::error::{check_len, Error, Result};
use crate::model::{self, Grid1D, ModelParams, RawParams, TimeScheme};

/// Which members of `{a, k, E}` are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Controls {
    pub a: bool,
    pub k: bool,
    pub e: bool,
}

impl Controls {
    pub const ALL: Controls = Controls {
        a: true,
        k: true,
        e: true,
    };
    pub const AK: Controls = Controls {
        a: true,
        k: true,
        e: false,
    };
    pub const E: Controls = Controls {
        a: false,
        k: false,
        e: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.a || self.k || self.e)
    }

    /// Length of the packed control vector for a grid of `n` nodes.
    pub fn dim(&self, n: usize) -> usize {
        self.a as usize + self.k as usize + if self.e { n } else { 0 }
    }
}

/// Tikhonov term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regularizer {
    /// `alpha * ||u - u_b||^2` over the active controls; the `E` part is a
    /// trapezoidal integral, `a` and `k` enter with unit weight.
    Background { background: ModelParams },
    /// `alpha * ||E_x||^2`.
    GradE,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub regularizer: Regularizer,
    pub alpha: f64,
    pub active: Controls,
}

impl CostSpec {
    pub fn background(background: ModelParams, alpha: f64, active: Controls) -> Self {
        CostSpec {
            regularizer: Regularizer::Background { background },
            alpha,
            active,
        }
    }

    pub fn grad_e(alpha: f64, active: Controls) -> Self {
        CostSpec {
            regularizer: Regularizer::GradE,
            alpha,
            active,
        }
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        CostSpec {
            alpha,
            ..self.clone()
        }
    }

    pub(crate) fn validate(&self, grid: &Grid1D) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Inconsistent(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if let Regularizer::Background { background } = &self.regularizer {
            if background.e().len() != grid.n() {
                return Err(Error::Inconsistent(format!(
                    "background etch rate has {} nodes, grid has {}",
                    background.e().len(),
                    grid.n()
                )));
            }
        }
        Ok(())
    }
}

/// Parts of one cost evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub misfit: f64,
    pub regularization: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub fn new(misfit: f64, regularization: f64) -> Self {
        CostBreakdown {
            misfit,
            regularization,
            total: misfit + regularization,
        }
    }
}

/// Gradient with the shape of [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGradient {
    pub a: f64,
    pub k: f64,
    pub e: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros(n: usize) -> Self {
        ParamGradient {
            a: 0.0,
            k: 0.0,
            e: vec![0.0; n],
        }
    }

    /// Zeroes the entries of inactive controls.
    pub fn mask(&mut self, active: Controls) {
        if !active.a {
            self.a = 0.0;
        }
        if !active.k {
            self.k = 0.0;
        }
        if !active.e {
            self.e.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn pack(&self, active: Controls) -> Vec<f64> {
        let mut out = Vec::with_capacity(active.dim(self.e.len()));
        if active.a {
            out.push(self.a);
        }
        if active.k {
            out.push(self.k);
        }
        if active.e {
            out.extend_from_slice(&self.e);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        (self.a * self.a + self.k * self.k + self.e.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }
}

/// `int (z - z_exp)^2 dx` by the trapezoidal rule.
pub fn misfit_l2(z: &[f64], z_exp: &[f64], grid: &Grid1D) -> Result<f64> {
    check_len("profile", grid.n(), z.len())?;
    check_len("measured profile", grid.n(), z_exp.len())?;
    Ok(weighted_sq(z, z_exp, &grid.trapezoid_weights()))
}

fn weighted_sq(z: &[f64], d: &[f64], w: &[f64]) -> f64 {
    z.iter()
        .zip(d)
        .zip(w)
        .map(|((a, b), w)| w * (a - b) * (a - b))
        .sum()
}

/// Misfit of a final profile against the measurement set, together with its
/// derivative with respect to that profile.
pub(crate) fn misfit_and_seed(z: &[f64], meas: &MeasurementSet) -> (f64, Vec<f64>) {
    let grid = meas.grid();
    let w = grid.trapezoid_weights();
    let n = grid.n();
    match meas.combine() {
        Combine::Single | Combine::Superposed => {
            let target = if meas.combine() == Combine::Single {
                meas.profiles()[0].clone()
            } else {
                meas.mean_profile()
            };
            let value = weighted_sq(z, &target, &w);
            let seed = (0..n).map(|i| 2.0 * w[i] * (z[i] - target[i])).collect();
            (value, seed)
        }
        Combine::Independent => {
            let inv = 1.0 / meas.len() as f64;
            let mut value = 0.0;
            let mut seed = vec![0.0; n];
            for d in meas.profiles() {
                value += inv * weighted_sq(z, d, &w);
                for i in 0..n {
                    seed[i] += inv * 2.0 * w[i] * (z[i] - d[i]);
                }
            }
            (value, seed)
        }
    }
}

/// Regularization value and its gradient (entries of inactive controls are
/// zero).
pub(crate) fn regularization(
    p: RawParams<'_>,
    spec: &CostSpec,
    grid: &Grid1D,
) -> (f64, ParamGradient) {
    let n = grid.n();
    let alpha = spec.alpha;
    let mut grad = ParamGradient::zeros(n);
    let value = match &spec.regularizer {
        Regularizer::Background { background } => {
            let mut value = 0.0;
            if spec.active.a {
                let d = p.a - background.a();
                value += d * d;
                grad.a = 2.0 * alpha * d;
            }
            if spec.active.k {
                let d = p.k - background.k();
                value += d * d;
                grad.k = 2.0 * alpha * d;
            }
            if spec.active.e {
                let w = grid.trapezoid_weights();
                let eb = background.e().as_slice();
                for i in 0..n {
                    let d = p.e[i] - eb[i];
                    value += w[i] * d * d;
                    grad.e[i] = 2.0 * alpha * w[i] * d;
                }
            }
            alpha * value
        }
        Regularizer::GradE => {
            let inv_dx = 1.0 / grid.dx();
            let mut value = 0.0;
            for i in 0..n - 1 {
                let d = p.e[i + 1] - p.e[i];
                value += d * d * inv_dx;
                if spec.active.e {
                    let g = 2.0 * alpha * d * inv_dx;
                    grad.e[i + 1] += g;
                    grad.e[i] -= g;
                }
            }
            alpha * value
        }
    };
    (value, grad)
}

/// Misfit at `zp` minus misfit at `zm`, summed as products of differences
/// so that nearly equal costs do not cancel.
pub(crate) fn misfit_difference(zp: &[f64], zm: &[f64], meas: &MeasurementSet) -> f64 {
    let w = meas.grid().trapezoid_weights();
    let term = |d: &[f64]| -> f64 {
        (0..zp.len())
            .map(|i| w[i] * (zp[i] - zm[i]) * (zp[i] + zm[i] - 2.0 * d[i]))
            .sum()
    };
    match meas.combine() {
        Combine::Single => term(&meas.profiles()[0]),
        Combine::Superposed => term(&meas.mean_profile()),
        Combine::Independent => {
            meas.profiles().iter().map(|d| term(d)).sum::<f64>() / meas.len() as f64
        }
    }
}

/// Regularization at `pp` minus regularization at `pm`, in the same
/// product form as [`misfit_difference`].
pub(crate) fn regularization_difference(
    pp: RawParams<'_>,
    pm: RawParams<'_>,
    spec: &CostSpec,
    grid: &Grid1D,
) -> f64 {
    let sq_diff = |x: f64, y: f64, c: f64| (x - y) * (x + y - 2.0 * c);
    let value = match &spec.regularizer {
        Regularizer::Background { background } => {
            let mut v = 0.0;
            if spec.active.a {
                v += sq_diff(pp.a, pm.a, background.a());
            }
            if spec.active.k {
                v += sq_diff(pp.k, pm.k, background.k());
            }
            if spec.active.e {
                let w = grid.trapezoid_weights();
                let eb = background.e().as_slice();
                for i in 0..grid.n() {
                    v += w[i] * sq_diff(pp.e[i], pm.e[i], eb[i]);
                }
            }
            v
        }
        Regularizer::GradE => {
            let mut v = 0.0;
            for i in 0..grid.n() - 1 {
                v += sq_diff(pp.e[i + 1] - pp.e[i], pm.e[i + 1] - pm.e[i], 0.0);
            }
            v / grid.dx()
        }
    };
    spec.alpha * value
}

pub(crate) fn check_inputs(
    params_e_len: usize,
    meas: &MeasurementSet,
    spec: &CostSpec,
    grid: &Grid1D,
) -> Result<()> {
    if meas.grid() != grid {
        return Err(Error::Inconsistent(
            "measurements live on a different grid".into(),
        ));
    }
    check_len("etch rate", grid.n(), params_e_len)?;
    spec.validate(grid)
}

pub(crate) fn evaluate_raw(
    p: RawParams<'_>,
    meas: &MeasurementSet,
    spec: &CostSpec,
    grid: &Grid1D,
    scheme: &TimeScheme,
) -> Result<CostBreakdown> {
    let z = model::final_profile_raw(p, grid, scheme, &vec![0.0; grid.n()], |_, _| {})?;
    let (misfit, _) = misfit_and_seed(&z, meas);
    let (reg, _) = regularization(p, spec, grid);
    Ok(CostBreakdown::new(misfit, reg))
}

/// Cost of `params`: forward run from a flat surface, misfit per the
/// measurement set's combine mode, plus the Tikhonov term.
pub fn evaluate(
    params: &ModelParams,
    meas: &MeasurementSet,
    spec: &CostSpec,
    grid: &Grid1D,
    scheme: &TimeScheme,
) -> Result<CostBreakdown> {
    check_inputs(params.e().len(), meas, spec, grid)?;
    evaluate_raw(params.raw(), meas, spec, grid, scheme)
}

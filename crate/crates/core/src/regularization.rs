//! Choice of the Tikhonov weight by the L-curve corner.
//!
//! Each sweep point is a full minimization at one `alpha`. The corner is
//! the point of largest signed curvature of the polyline
//! `(log |misfit|, log |reg|)`, with curvature taken from the circle through
//! each point and its two neighbours.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{self, CostSpec};
use crate::data_gen::MeasurementSet;
use crate::error::{Error, Result};
use crate::model::{Grid1D, ModelParams, TimeScheme};
use crate::optimizer::{self, OptConfig, StopReason};

/// Fewest points the corner search accepts.
pub const MIN_POINTS: usize = 5;

/// Turning below this (sine of the angle between consecutive segments)
/// counts as a straight line.
const STRAIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LCurvePoint {
    pub alpha: f64,
    /// `sqrt` of the misfit at the optimum.
    pub misfit_norm: f64,
    /// Regularization seminorm at the optimum (the penalty without `alpha`,
    /// square-rooted).
    pub reg_norm: f64,
    pub solution: ModelParams,
    pub iterations: usize,
    pub stop: StopReason,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepFailure {
    pub alpha: f64,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LCurveSweep {
    /// Successful points, ascending in `alpha`.
    pub points: Vec<LCurvePoint>,
    pub failures: Vec<SweepFailure>,
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::invalid("sweep weights must be positive and finite"));
    }
    if alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("sweep weights must be strictly increasing"));
    }
    Ok(())
}

/// `count` weights spaced evenly in `log10` between `lo` and `hi`.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && count >= 2) {
        return Err(Error::invalid(format!(
            "log spacing needs 0 < lo < hi and at least two points, got [{lo}, {hi}] x {count}"
        )));
    }
    let (l0, l1) = (lo.log10(), hi.log10());
    Ok((0..count)
        .map(|i| {
            if i + 1 == count {
                hi
            } else {
                10f64.powf(l0 + (l1 - l0) * i as f64 / (count - 1) as f64)
            }
        })
        .collect())
}

fn solve_point(
    alpha: f64,
    start: &ModelParams,
    meas: &MeasurementSet,
    template: &CostSpec,
    grid: &Grid1D,
    scheme: &TimeScheme,
    cfg: &OptConfig,
) -> Result<LCurvePoint> {
    let spec = template.with_alpha(alpha);
    let (solution, trace) = optimizer::minimize(start, meas, &spec, grid, scheme, cfg)?;
    let misfit = trace.final_cost().misfit;
    let (seminorm_sq, _) = cost::regularization(solution.raw(), &template.with_alpha(1.0), grid);
    Ok(LCurvePoint {
        alpha,
        misfit_norm: misfit.max(0.0).sqrt(),
        reg_norm: seminorm_sq.max(0.0).sqrt(),
        solution,
        iterations: trace.iterations(),
        stop: trace.stop,
    })
}

/// Runs one minimization per weight in `alphas` (strictly increasing).
///
/// With `warm_start` the runs go from the largest weight down, each
/// starting at the previous optimum; otherwise every run starts at `start`
/// and the runs execute in parallel. A failed run is recorded and skipped.
#[allow(clippy::too_many_arguments)]
pub fn lcurve_sweep(
    alphas: &[f64],
    start: &ModelParams,
    meas: &MeasurementSet,
    template: &CostSpec,
    grid: &Grid1D,
    scheme: &TimeScheme,
    cfg: &OptConfig,
    warm_start: bool,
) -> Result<LCurveSweep> {
    check_alphas(alphas)?;
    let outcomes: Vec<(f64, Result<LCurvePoint>)> = if warm_start {
        let mut current = start.clone();
        let mut out = Vec::with_capacity(alphas.len());
        for &alpha in alphas.iter().rev() {
            let r = solve_point(alpha, &current, meas, template, grid, scheme, cfg);
            if let Ok(p) = &r {
                current = p.solution.clone();
            }
            out.push((alpha, r));
        }
        out.reverse();
        out
    } else {
        alphas
            .par_iter()
            .map(|&alpha| {
                (
                    alpha,
                    solve_point(alpha, start, meas, template, grid, scheme, cfg),
                )
            })
            .collect()
    };
    let mut sweep = LCurveSweep {
        points: Vec::new(),
        failures: Vec::new(),
    };
    for (alpha, r) in outcomes {
        match r {
            Ok(p) => sweep.points.push(p),
            // bad inputs fail every point the same way; report them directly
            Err(e @ (Error::Inconsistent(_) | Error::DimensionMismatch { .. })) => return Err(e),
            Err(e) => sweep.failures.push(SweepFailure {
                alpha,
                message: e.to_string(),
            }),
        }
    }
    Ok(sweep)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corner {
    pub index: usize,
    pub alpha: f64,
    /// Signed curvature per point; the two end points have none.
    pub curvature: Vec<Option<f64>>,
    /// Set when the curve has no corner and the median weight was returned.
    pub degenerate: bool,
}

/// Corner of the curve through `(log misfit_norm, log reg_norm)`, points in
/// ascending `alpha`.
pub fn corner_from_norms(alphas: &[f64], misfit_norm: &[f64], reg_norm: &[f64]) -> Result<Corner> {
    let n = alphas.len();
    if n < MIN_POINTS {
        return Err(Error::TooFewPoints(n));
    }
    if misfit_norm.len() != n || reg_norm.len() != n {
        return Err(Error::DimensionMismatch {
            what: "L-curve norms",
            expected: n,
            got: misfit_norm.len().min(reg_norm.len()),
        });
    }
    check_alphas(alphas)?;
    if misfit_norm
        .iter()
        .chain(reg_norm)
        .any(|v| !(v.is_finite() && *v > 0.0))
    {
        return Err(Error::invalid(
            "L-curve norms must be positive to take logarithms",
        ));
    }
    let pts: Vec<(f64, f64)> = misfit_norm
        .iter()
        .zip(reg_norm)
        .map(|(m, r)| (m.ln(), r.ln()))
        .collect();

    let mut curvature = vec![None; n];
    let mut best: Option<(usize, f64)> = None;
    let mut max_turn = 0.0f64;
    for i in 1..n - 1 {
        let (p0, p1, p2) = (pts[i - 1], pts[i], pts[i + 1]);
        let d1 = (p1.0 - p0.0, p1.1 - p0.1);
        let d2 = (p2.0 - p1.0, p2.1 - p1.1);
        let d3 = (p2.0 - p0.0, p2.1 - p0.1);
        let (l1, l2, l3) = (d1.0.hypot(d1.1), d2.0.hypot(d2.1), d3.0.hypot(d3.1));
        let cross = d1.0 * d2.1 - d1.1 * d2.0;
        if l1 * l2 * l3 == 0.0 {
            continue;
        }
        max_turn = max_turn.max(cross / (l1 * l2));
        let kappa = 2.0 * cross / (l1 * l2 * l3);
        curvature[i] = Some(kappa);
        // later points win ties, which favours the larger weight
        if best.is_none_or(|(_, b)| kappa >= b - 1e-12 * b.abs()) {
            best = Some((i, kappa));
        }
    }
    match best {
        Some((index, _)) if max_turn > STRAIGHT_TOL => Ok(Corner {
            index,
            alpha: alphas[index],
            curvature,
            degenerate: false,
        }),
        _ => Ok(Corner {
            index: n / 2,
            alpha: alphas[n / 2],
            curvature,
            degenerate: true,
        }),
    }
}

/// Corner of a sweep's L-curve.
pub fn lcurve_corner(points: &[LCurvePoint]) -> Result<Corner> {
    let alphas: Vec<f64> = points.iter().map(|p| p.alpha).collect();
    let m: Vec<f64> = points.iter().map(|p| p.misfit_norm).collect();
    let r: Vec<f64> = points.iter().map(|p| p.reg_norm).collect();
    corner_from_norms(&alphas, &m, &r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_constructed_corner() {
        // steep drop in the reg norm, then a flat run in misfit
        let alphas = log_spaced(1e-6, 1.0, 7).unwrap();
        let m = [1e-3, 1.1e-3, 1.2e-3, 1.3e-3, 1e-2, 1e-1, 1.0];
        let r = [1e3, 1e2, 1e1, 1.0, 0.95, 0.9, 0.85];
        let c = corner_from_norms(&alphas, &m, &r).unwrap();
        assert_eq!(c.index, 3);
        assert!(!c.degenerate);
        assert_eq!(c.alpha, alphas[3]);
    }

    #[test]
    fn collinear_points_return_median_with_flag() {
        let alphas = log_spaced(1e-4, 1.0, 5).unwrap();
        let m: Vec<f64> = (0..5).map(|i| 10f64.powi(i)).collect();
        let r: Vec<f64> = (0..5).map(|i| 10f64.powi(-2 * i)).collect();
        let c = corner_from_norms(&alphas, &m, &r).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.index, 2);
        assert_eq!(c.alpha, alphas[2]);
    }

    #[test]
    fn ties_go_to_larger_alpha() {
        // two identical 45 degree turns at indices 1 and 3
        let alphas = log_spaced(1e-4, 1.0, 5).unwrap();
        let xy = [(0.0, 3.0), (0.0, 2.0), (1.0, 1.0), (2.0, 0.0), (3.0, 0.0)];
        let m: Vec<f64> = xy.iter().map(|p| f64::exp(p.0)).collect();
        let r: Vec<f64> = xy.iter().map(|p| f64::exp(p.1)).collect();
        let c = corner_from_norms(&alphas, &m, &r).unwrap();
        let (k1, k3) = (c.curvature[1].unwrap(), c.curvature[3].unwrap());
        assert!((k1 - k3).abs() <= 1e-12 * k1);
        assert_eq!(c.index, 3);
    }

    #[test]
    fn rejects_short_or_unsorted_input() {
        let a = [1e-3, 1e-2, 1e-1, 1.0];
        assert!(matches!(
            corner_from_norms(&a, &[1.0; 4], &[1.0; 4]),
            Err(Error::TooFewPoints(4))
        ));
        let a = [1e-3, 1e-2, 1e-1, 1.0, 0.5];
        assert!(corner_from_norms(&a, &[1.0; 5], &[1.0; 5]).is_err());
        let a = [1e-3, 1e-2, 1e-1, 1.0, 10.0];
        assert!(corner_from_norms(&a, &[1.0, 0.0, 1.0, 1.0, 1.0], &[1.0; 5]).is_err());
    }

    #[test]
    fn log_spacing_hits_both_ends() {
        let a = log_spaced(1e-8, 1e-2, 7).unwrap();
        assert_eq!(a[0], 1e-8);
        assert_eq!(a[6], 1e-2);
        assert!((a[3] / 1e-5 - 1.0).abs() < 1e-12);
        assert!(log_spaced(1.0, 1.0, 3).is_err());
    }
}

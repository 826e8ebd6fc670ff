//! Limited-memory BFGS with simple lower bounds.
//!
//! Directions come from the usual two-loop recursion over the last `m`
//! curvature pairs. Iterates are projected onto the bounds; components held
//! at an active bound are removed from the direction and from the stored
//! pairs. Pairs with `<s, y> <= 1e-10 |s| |y|` are skipped so the implicit
//! inverse Hessian stays positive definite.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::adjoint;
use crate::cost::{self, Controls, CostBreakdown, CostSpec};
use crate::data_gen::MeasurementSet;
use crate::error::{Error, Result};
use crate::model::{EtchRate, Grid1D, ModelParams, RawParams, TimeScheme};

/// Sufficient-decrease constant.
pub const ARMIJO_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const CURVATURE_SKIP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    ArmijoBacktrack,
    StrongWolfe,
}

/// Lower bounds per kind of control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub a: f64,
    pub k: f64,
    pub e: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            a: 0.0,
            k: 0.0,
            e: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    pub memory_m: usize,
    pub max_iters: usize,
    /// Stop when the projected gradient norm drops below
    /// `grad_tol * (1 + |g_0|)`.
    pub grad_tol: f64,
    /// Optional stop on `|g| <= grad_rel_tol * |g_0|`.
    pub grad_rel_tol: Option<f64>,
    /// Stop when `|J_j - J_{j+1}| <= cost_tol * |J_j|`.
    pub cost_tol: f64,
    pub lower_bounds: Bounds,
    pub line_search: LineSearch,
    /// Backtracking halvings before a line search is declared failed.
    pub max_halvings: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            memory_m: 10,
            max_iters: 200,
            grad_tol: 1e-8,
            grad_rel_tol: None,
            cost_tol: 1e-12,
            lower_bounds: Bounds::default(),
            line_search: LineSearch::ArmijoBacktrack,
            max_halvings: 40,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory_m < 1 {
            return Err(Error::invalid("L-BFGS memory must be at least 1"));
        }
        if !(self.grad_tol > 0.0 && self.cost_tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if let Some(r) = self.grad_rel_tol {
            if r <= 0.0 {
                return Err(Error::invalid(
                    "relative gradient tolerance must be positive",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradTol,
    CostTol,
    MaxIters,
    LineSearchFail,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub cost: CostBreakdown,
    pub grad_norm: f64,
    /// Line-search step length; zero for the starting point.
    pub step: f64,
    /// Packed control vector after this iteration.
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptTrace {
    pub records: Vec<IterRecord>,
    pub stop: StopReason,
    /// Number of objective evaluations, including rejected trials.
    pub evaluations: usize,
}

impl OptTrace {
    /// Accepted iterations (the starting point is not counted).
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn final_cost(&self) -> CostBreakdown {
        self.records
            .last()
            .expect("trace has a starting record")
            .cost
    }
}

pub struct Evaluation {
    pub cost: CostBreakdown,
    pub grad: Vec<f64>,
}

/// Differentiable objective over a flat vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn evaluate(&mut self, x: &[f64]) -> Result<Evaluation>;
}

/// Curvature pairs, oldest first.
#[derive(Debug, Clone, Default)]
pub struct History {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl History {
    pub fn new(capacity: usize) -> Self {
        History {
            pairs: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// Stores `(s, y)` unless the curvature test fails. Returns whether the
    /// pair was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        // written negated so that NaN is rejected as well
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(sy > CURVATURE_SKIP * norm(&s) * norm(&y)) {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Inverse-Hessian approximation applied to `q` by the two-loop recursion,
/// with initial scaling `<s, y> / <y, y>` from the newest pair.
pub fn two_loop(history: &History, q: &[f64]) -> Vec<f64> {
    let mut r = q.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.pairs.iter().rev() {
        let a = rho * dot(s, &r);
        for (ri, yi) in r.iter_mut().zip(y) {
            *ri -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        r.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &r);
        for (ri, si) in r.iter_mut().zip(s) {
            *ri += (a - b) * si;
        }
    }
    r
}

fn project(x: &mut [f64], lower: &[f64]) {
    for (v, lb) in x.iter_mut().zip(lower) {
        if *v < *lb {
            *v = *lb;
        }
    }
}

/// Gradient with components pushing into an active bound removed.
fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lower)
        .map(|((xi, gi), lb)| if *xi <= *lb && *gi > 0.0 { 0.0 } else { *gi })
        .collect()
}

struct Trial {
    x: Vec<f64>,
    eval: Evaluation,
    step: f64,
}

fn trial_point(x: &[f64], d: &[f64], t: f64, lower: &[f64]) -> Vec<f64> {
    let mut xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
    project(&mut xt, lower);
    xt
}

/// Evaluates, mapping a non-finite or blown-up trial to `None`.
fn try_eval<O: Objective>(obj: &mut O, x: &[f64], evals: &mut usize) -> Result<Option<Evaluation>> {
    *evals += 1;
    match obj.evaluate(x) {
        Ok(ev) if ev.cost.total.is_finite() && ev.grad.iter().all(|v| v.is_finite()) => {
            Ok(Some(ev))
        }
        Ok(_) | Err(Error::BlowUp { .. }) | Err(Error::NonFinite(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn armijo_ok(f0: f64, g0: &[f64], x0: &[f64], xt: &[f64], ft: f64) -> bool {
    let decrease: f64 = g0
        .iter()
        .zip(xt.iter().zip(x0))
        .map(|(g, (a, b))| g * (a - b))
        .sum();
    ft <= f0 + ARMIJO_C1 * decrease && ft < f0
}

#[allow(clippy::too_many_arguments)]
fn backtrack<O: Objective>(
    obj: &mut O,
    x: &[f64],
    f: f64,
    g: &[f64],
    d: &[f64],
    t0: f64,
    lower: &[f64],
    cfg: &OptConfig,
    evals: &mut usize,
) -> Result<Option<Trial>> {
    let mut t = t0;
    for _ in 0..=cfg.max_halvings {
        let xt = trial_point(x, d, t, lower);
        if let Some(ev) = try_eval(obj, &xt, evals)? {
            if armijo_ok(f, g, x, &xt, ev.cost.total) {
                return Ok(Some(Trial {
                    x: xt,
                    eval: ev,
                    step: t,
                }));
            }
        }
        t *= 0.5;
    }
    Ok(None)
}

/// Directional derivative along the projected path at `xt`.
fn path_slope(g: &[f64], d: &[f64], xt: &[f64], lower: &[f64]) -> f64 {
    g.iter()
        .zip(d)
        .zip(xt.iter().zip(lower))
        .map(|((gi, di), (xi, lb))| {
            if *xi <= *lb && *di < 0.0 {
                0.0
            } else {
                gi * di
            }
        })
        .sum()
}

/// Bracketing and zoom with safeguarded cubic interpolation. Falls back to
/// the best sufficient-decrease point seen if the curvature condition
/// cannot be met within the evaluation budget.
#[allow(clippy::too_many_arguments)]
fn strong_wolfe<O: Objective>(
    obj: &mut O,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    t0: f64,
    lower: &[f64],
    cfg: &OptConfig,
    evals: &mut usize,
) -> Result<Option<Trial>> {
    let slope0 = dot(g0, d);
    let budget = cfg.max_halvings.max(10);
    let mut used = 0usize;
    let mut best: Option<Trial> = None;

    let eval_at = |t: f64,
                   used: &mut usize,
                   evals: &mut usize,
                   obj: &mut O|
     -> Result<Option<(Trial, f64)>> {
        *used += 1;
        let xt = trial_point(x, d, t, lower);
        Ok(try_eval(obj, &xt, evals)?.map(|ev| {
            let s = path_slope(&ev.grad, d, &xt, lower);
            (
                Trial {
                    x: xt,
                    eval: ev,
                    step: t,
                },
                s,
            )
        }))
    };
    let keep_best = |best: &mut Option<Trial>, tr: &Trial| {
        if armijo_ok(f0, g0, x, &tr.x, tr.eval.cost.total)
            && best
                .as_ref()
                .is_none_or(|b| tr.eval.cost.total < b.eval.cost.total)
        {
            *best = Some(Trial {
                x: tr.x.clone(),
                eval: Evaluation {
                    cost: tr.eval.cost,
                    grad: tr.eval.grad.clone(),
                },
                step: tr.step,
            });
        }
    };

    // (t, f, slope) of the bracket ends
    let mut prev = (0.0, f0, slope0);
    let mut t = t0;
    let (mut lo, mut hi);
    loop {
        if used >= budget {
            return Ok(best);
        }
        match eval_at(t, &mut used, evals, obj)? {
            None => {
                // blow-up: treat as a too-long step
                lo = prev;
                hi = (t, f64::INFINITY, f64::NAN);
                break;
            }
            Some((tr, s)) => {
                let ft = tr.eval.cost.total;
                keep_best(&mut best, &tr);
                let sufficient = armijo_ok(f0, g0, x, &tr.x, ft);
                if !sufficient || (prev.0 > 0.0 && ft >= prev.1) {
                    lo = prev;
                    hi = (t, ft, s);
                    break;
                }
                if s.abs() <= -WOLFE_C2 * slope0 {
                    return Ok(Some(tr));
                }
                if s >= 0.0 {
                    lo = (t, ft, s);
                    hi = prev;
                    break;
                }
                prev = (t, ft, s);
                t *= 2.0;
            }
        }
    }

    // zoom
    while used < budget {
        let (a, b) = (lo.0, hi.0);
        let (tmin, tmax) = if a < b { (a, b) } else { (b, a) };
        let mut tn = f64::NAN;
        if hi.1.is_finite() && hi.2.is_finite() {
            // cubic through (lo, hi) values and slopes
            let d1 = lo.2 + hi.2 - 3.0 * (lo.1 - hi.1) / (lo.0 - hi.0);
            let rad = d1 * d1 - lo.2 * hi.2;
            if rad >= 0.0 {
                let d2 = rad.sqrt() * (hi.0 - lo.0).signum();
                tn = hi.0 - (hi.0 - lo.0) * (hi.2 + d2 - d1) / (hi.2 - lo.2 + 2.0 * d2);
            }
        }
        let width = tmax - tmin;
        if !(tn.is_finite() && tn > tmin + 0.1 * width && tn < tmax - 0.1 * width) {
            tn = 0.5 * (a + b);
        }
        if width <= 1e-16 * tmax.max(1.0) {
            break;
        }
        match eval_at(tn, &mut used, evals, obj)? {
            None => hi = (tn, f64::INFINITY, f64::NAN),
            Some((tr, s)) => {
                let ft = tr.eval.cost.total;
                keep_best(&mut best, &tr);
                if !armijo_ok(f0, g0, x, &tr.x, ft) || ft >= lo.1 {
                    hi = (tn, ft, s);
                } else {
                    if s.abs() <= -WOLFE_C2 * slope0 {
                        return Ok(Some(tr));
                    }
                    if s * (hi.0 - lo.0) >= 0.0 {
                        hi = lo;
                    }
                    lo = (tn, ft, s);
                }
            }
        }
    }
    Ok(best)
}

/// Projected L-BFGS from `x0` with componentwise lower bounds.
pub fn lbfgs<O: Objective>(
    obj: &mut O,
    x0: &[f64],
    lower: &[f64],
    cfg: &OptConfig,
) -> Result<(Vec<f64>, OptTrace)> {
    cfg.validate()?;
    let dim = obj.dim();
    if x0.len() != dim || lower.len() != dim {
        return Err(Error::DimensionMismatch {
            what: "optimizer start",
            expected: dim,
            got: x0.len().min(lower.len()),
        });
    }
    let mut x = x0.to_vec();
    project(&mut x, lower);
    let mut evals = 1;
    let mut ev = obj.evaluate(&x)?;
    if !ev.cost.total.is_finite() || !ev.grad.iter().all(|v| v.is_finite()) {
        return Err(Error::Optimizer(
            "non-finite cost at the starting point".into(),
        ));
    }
    let mut pg = projected_gradient(&x, &ev.grad, lower);
    let g0 = norm(&pg);
    let mut tol = cfg.grad_tol * (1.0 + g0);
    if let Some(r) = cfg.grad_rel_tol {
        tol = tol.max(r * g0);
    }
    let mut records = vec![IterRecord {
        iter: 0,
        cost: ev.cost,
        grad_norm: g0,
        step: 0.0,
        x: x.clone(),
    }];
    let mut history = History::new(cfg.memory_m);
    let mut stop = StopReason::MaxIters;

    let mut iter = 0;
    loop {
        if norm(&pg) <= tol {
            stop = StopReason::GradTol;
            break;
        }
        if iter >= cfg.max_iters {
            break;
        }
        iter += 1;

        let mut accepted = None;
        for attempt in 0..2 {
            let mut d: Vec<f64> = two_loop(&history, &pg).iter().map(|v| -v).collect();
            for (i, di) in d.iter_mut().enumerate() {
                if pg[i] == 0.0 && x[i] <= lower[i] {
                    *di = 0.0;
                }
            }
            if dot(&ev.grad, &d) >= 0.0 {
                history.clear();
                d = pg.iter().map(|v| -v).collect();
            }
            let t0 = if history.is_empty() {
                1.0 / norm(&d).max(1e-300)
            } else {
                1.0
            };
            let t0 = t0.min(1e10);
            let trial = match cfg.line_search {
                LineSearch::ArmijoBacktrack => backtrack(
                    obj,
                    &x,
                    ev.cost.total,
                    &ev.grad,
                    &d,
                    t0,
                    lower,
                    cfg,
                    &mut evals,
                )?,
                LineSearch::StrongWolfe => strong_wolfe(
                    obj,
                    &x,
                    ev.cost.total,
                    &ev.grad,
                    &d,
                    t0,
                    lower,
                    cfg,
                    &mut evals,
                )?,
            };
            if trial.is_some() || history.is_empty() || attempt == 1 {
                accepted = trial;
                break;
            }
            // retry once along steepest descent with fresh memory
            history.clear();
        }
        let Some(trial) = accepted else {
            stop = StopReason::LineSearchFail;
            break;
        };

        let mut s: Vec<f64> = trial.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let mut y: Vec<f64> = trial
            .eval
            .grad
            .iter()
            .zip(&ev.grad)
            .map(|(a, b)| a - b)
            .collect();
        for i in 0..dim {
            if trial.x[i] <= lower[i] {
                s[i] = 0.0;
                y[i] = 0.0;
            }
        }
        history.push(s, y);

        let f_old = ev.cost.total;
        x = trial.x;
        ev = trial.eval;
        pg = projected_gradient(&x, &ev.grad, lower);
        records.push(IterRecord {
            iter,
            cost: ev.cost,
            grad_norm: norm(&pg),
            step: trial.step,
            x: x.clone(),
        });
        if (f_old - ev.cost.total).abs() <= cfg.cost_tol * f_old.abs() {
            stop = StopReason::CostTol;
            break;
        }
    }
    Ok((
        x,
        OptTrace {
            records,
            stop,
            evaluations: evals,
        },
    ))
}

/// Identification objective: packed active controls, other parameters held
/// at their starting values.
pub struct ModelObjective<'a> {
    base: ModelParams,
    meas: &'a MeasurementSet,
    spec: &'a CostSpec,
    grid: &'a Grid1D,
    scheme: &'a TimeScheme,
    e_buf: Vec<f64>,
}

impl<'a> ModelObjective<'a> {
    pub fn new(
        base: &ModelParams,
        meas: &'a MeasurementSet,
        spec: &'a CostSpec,
        grid: &'a Grid1D,
        scheme: &'a TimeScheme,
    ) -> Result<Self> {
        cost::check_inputs(base.e().len(), meas, spec, grid)?;
        if spec.active.is_empty() {
            return Err(Error::invalid("no active controls to optimize"));
        }
        Ok(ModelObjective {
            base: base.clone(),
            meas,
            spec,
            grid,
            scheme,
            e_buf: base.e().as_slice().to_vec(),
        })
    }

    pub fn pack(&self, p: &ModelParams) -> Vec<f64> {
        pack(p, self.spec.active)
    }

    pub fn unpack(&self, x: &[f64]) -> Result<ModelParams> {
        let active = self.spec.active;
        let mut i = 0;
        let mut a = self.base.a();
        let mut k = self.base.k();
        if active.a {
            a = x[i];
            i += 1;
        }
        if active.k {
            k = x[i];
            i += 1;
        }
        let e = if active.e {
            EtchRate::new(x[i..].to_vec())?
        } else {
            self.base.e().clone()
        };
        ModelParams::new(a, k, e)
    }

    pub fn lower_bounds(&self, b: &Bounds) -> Vec<f64> {
        let active = self.spec.active;
        let mut lb = Vec::with_capacity(active.dim(self.grid.n()));
        if active.a {
            lb.push(b.a);
        }
        if active.k {
            lb.push(b.k);
        }
        if active.e {
            lb.extend(std::iter::repeat_n(b.e, self.grid.n()));
        }
        lb
    }
}

fn pack(p: &ModelParams, active: Controls) -> Vec<f64> {
    let mut x = Vec::with_capacity(active.dim(p.e().len()));
    if active.a {
        x.push(p.a());
    }
    if active.k {
        x.push(p.k());
    }
    if active.e {
        x.extend_from_slice(p.e().as_slice());
    }
    x
}

impl Objective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.spec.active.dim(self.grid.n())
    }

    fn evaluate(&mut self, x: &[f64]) -> Result<Evaluation> {
        let active = self.spec.active;
        let mut i = 0;
        let mut a = self.base.a();
        let mut k = self.base.k();
        if active.a {
            a = x[i];
            i += 1;
        }
        if active.k {
            k = x[i];
            i += 1;
        }
        if active.e {
            self.e_buf.copy_from_slice(&x[i..]);
        }
        let raw = RawParams {
            a,
            k,
            e: &self.e_buf,
        };
        let (cost, grad) =
            adjoint::gradient_raw(raw, self.meas, self.spec, self.grid, self.scheme)?;
        Ok(Evaluation {
            cost,
            grad: grad.pack(active),
        })
    }
}

/// Minimizes the identification cost over the active controls of `spec`,
/// starting from `start`.
pub fn minimize(
    start: &ModelParams,
    meas: &MeasurementSet,
    spec: &CostSpec,
    grid: &Grid1D,
    scheme: &TimeScheme,
    cfg: &OptConfig,
) -> Result<(ModelParams, OptTrace)> {
    let mut obj = ModelObjective::new(start, meas, spec, grid, scheme)?;
    let x0 = obj.pack(start);
    let lower = obj.lower_bounds(&cfg.lower_bounds);
    if x0.iter().zip(&lower).any(|(x, lb)| x < lb) {
        return Err(Error::invalid("starting point violates the lower bounds"));
    }
    let (x, trace) = lbfgs(&mut obj, &x0, &lower, cfg)?;
    Ok((obj.unpack(&x)?, trace))
}

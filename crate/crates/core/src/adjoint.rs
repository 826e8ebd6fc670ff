//! Discrete adjoint of the explicit scheme.
//!
//! The forward map is `Z^{m+1} = S(Z^m) = Z^m + dt F(Z^m)` on interior nodes,
//! with boundary values pinned to zero. Reverse accumulation runs
//! `P^m = P^{m+1} + dt (dF/dZ|_{Z^m})^T P^{m+1}` from the terminal seed
//! `P^N = dJ/dZ^N` and collects
//!
//! ```text
//! dJ/da   = sum_m dt <P^{m+1}, Z^m F^m>
//! dJ/dk   = sum_m dt <P^{m+1}, -1/2 ln(1 + (Z_x^m)^2) F^m>
//! dJ/dE_i = sum_m dt P^{m+1}_i exp(a Z^m_i) / (1 + (Z_x^m)_i^2)^(k/2)
//! ```
//!
//! This is the exact gradient of the discrete cost, so it agrees with finite
//! differences up to their truncation and rounding error.

use rayon::prelude::*;
use serde::Serialize;

use crate::cost::{self, Controls, CostBreakdown, CostSpec, ParamGradient};
use crate::data_gen::MeasurementSet;
use crate::error::{check_len, Error, Result};
use crate::model::{self, Attenuation, Grid1D, ModelParams, RawParams, TimeScheme, Trajectory};

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct AdjointState {
    /// Terminal multiplier `P^N`.
    pub p_final: Vec<f64>,
    /// Multiplier at the initial level, `P^0`.
    pub p_initial: Vec<f64>,
    /// All levels `P^0 .. P^N`, row-major, when requested.
    pub levels: Option<Vec<f64>>,
    /// Model part of the gradient (no regularization).
    pub grad: ParamGradient,
}

#[derive(Default)]
struct Accum {
    a: f64,
    k: f64,
}

/// One transposed step: `lam_out = lam + dt (dF/dZ)^T lam` at state `z`,
/// accumulating parameter sensitivities into `acc` and `grad_e`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn transpose_step<A: Fn(f64) -> f64>(
    z: &[f64],
    lam: &[f64],
    lam_out: &mut [f64],
    q: &mut [f64],
    p: RawParams<'_>,
    att: A,
    inv_2dx: f64,
    dt: f64,
    want: Controls,
    acc: &mut Accum,
    grad_e: &mut [f64],
) {
    let n = z.len();
    let mut ga = 0.0;
    let mut gk = 0.0;
    q[0] = 0.0;
    q[n - 1] = 0.0;
    // lam_out temporarily holds the diagonal part
    lam_out[0] = 0.0;
    lam_out[n - 1] = 0.0;
    for i in 1..n - 1 {
        let l = lam[i];
        let zi = z[i];
        let slope = (z[i + 1] - z[i - 1]) * inv_2dx;
        let s = 1.0 + slope * slope;
        let g = (p.a * zi).exp() * att(s);
        let f = p.e[i] * g;
        let lf = l * f;
        if want.e {
            grad_e[i] += dt * l * g;
        }
        ga += lf * zi;
        if want.k && lf != 0.0 {
            gk -= 0.5 * s.ln() * lf;
        }
        q[i] = -p.k * lf * slope / s * inv_2dx;
        lam_out[i] = l + dt * p.a * lf;
    }
    for j in 1..n - 1 {
        lam_out[j] += dt * (q[j - 1] - q[j + 1]);
    }
    acc.a += dt * ga;
    acc.k += dt * gk;
}

macro_rules! with_attenuation {
    ($k:expr, |$att:ident| $body:expr) => {
        match Attenuation::new($k) {
            Attenuation::Whole(m) => {
                let $att = move |s: f64| s.powi(-m);
                $body
            }
            Attenuation::Half(m) => {
                let $att = move |s: f64| 1.0 / (s.powi(m) * s.sqrt());
                $body
            }
            Attenuation::General(half_k) => {
                let $att = move |s: f64| (-half_k * s.ln()).exp();
                $body
            }
        }
    };
}

pub(crate) fn sweep_raw(
    traj: &Trajectory,
    p: RawParams<'_>,
    seed: &[f64],
    want: Controls,
    keep_levels: bool,
) -> AdjointState {
    let grid = traj.grid();
    let n = grid.n();
    let scheme = traj.scheme();
    let dt = scheme.dt();
    let inv_2dx = 0.5 / grid.dx();
    let steps = scheme.n_steps();

    let mut lam = seed.to_vec();
    lam[0] = 0.0;
    lam[n - 1] = 0.0;
    let p_final = lam.clone();
    let mut next = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut acc = Accum::default();
    let mut grad_e = vec![0.0; n];
    let mut levels = keep_levels.then(|| {
        let mut v = vec![0.0; n * (steps + 1)];
        v[steps * n..].copy_from_slice(&lam);
        v
    });

    with_attenuation!(p.k, |att| {
        for m in (0..steps).rev() {
            transpose_step(
                traj.state(m),
                &lam,
                &mut next,
                &mut q,
                p,
                att,
                inv_2dx,
                dt,
                want,
                &mut acc,
                &mut grad_e,
            );
            std::mem::swap(&mut lam, &mut next);
            if let Some(levels) = levels.as_mut() {
                levels[m * n..(m + 1) * n].copy_from_slice(&lam);
            }
        }
    });

    AdjointState {
        p_final,
        p_initial: lam,
        levels,
        grad: ParamGradient {
            a: acc.a,
            k: acc.k,
            e: grad_e,
        },
    }
}

/// Reverse sweep over a stored trajectory from the terminal seed `dJ/dZ^N`.
pub fn adjoint_sweep(
    traj: &Trajectory,
    params: &ModelParams,
    seed: &[f64],
    keep_levels: bool,
) -> Result<AdjointState> {
    check_len("adjoint seed", traj.grid().n(), seed.len())?;
    check_len("etch rate", traj.grid().n(), params.e().len())?;
    Ok(sweep_raw(
        traj,
        params.raw(),
        seed,
        Controls::ALL,
        keep_levels,
    ))
}

pub(crate) fn gradient_raw(
    p: RawParams<'_>,
    meas: &MeasurementSet,
    spec: &CostSpec,
    grid: &Grid1D,
    scheme: &TimeScheme,
) -> Result<(CostBreakdown, ParamGradient)> {
    let traj = model::forward_raw(p, grid, scheme, &vec![0.0; grid.n()])?;
    let (misfit, seed) = cost::misfit_and_seed(traj.final_state(), meas);
    let state = sweep_raw(&traj, p, &seed, spec.active, false);
    drop(traj);
    let (reg, reg_grad) = cost::regularization(p, spec, grid);
    let mut grad = state.grad;
    grad.a += reg_grad.a;
    grad.k += reg_grad.k;
    for (g, r) in grad.e.iter_mut().zip(&reg_grad.e) {
        *g += r;
    }
    grad.mask(spec.active);
    Ok((CostBreakdown::new(misfit, reg), grad))
}

/// Cost and its exact gradient with respect to `{a, k, E}`. Entries of
/// inactive controls are zero.
pub fn gradient(
    params: &ModelParams,
    meas: &MeasurementSet,
    spec: &CostSpec,
    grid: &Grid1D,
    scheme: &TimeScheme,
) -> Result<(CostBreakdown, ParamGradient)> {
    cost::check_inputs(params.e().len(), meas, spec, grid)?;
    gradient_raw(params.raw(), meas, spec, grid, scheme)
}

/// Tangent of one Euler step: `d + dt (dF/dZ) d`, boundary entries of `d`
/// ignored and of the result zero.
pub fn step_jvp(
    z: &[f64],
    dir: &[f64],
    params: &ModelParams,
    grid: &Grid1D,
    dt: f64,
) -> Result<Vec<f64>> {
    let n = grid.n();
    check_len("state", n, z.len())?;
    check_len("direction", n, dir.len())?;
    check_len("etch rate", n, params.e().len())?;
    let (a, k, e) = (params.a(), params.k(), params.e().as_slice());
    let inv_2dx = 0.5 / grid.dx();
    let d = |i: usize| if i == 0 || i == n - 1 { 0.0 } else { dir[i] };
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        let slope = (z[i + 1] - z[i - 1]) * inv_2dx;
        let s = 1.0 + slope * slope;
        let f = e[i] * (a * z[i]).exp() * s.powf(-0.5 * k);
        let dslope = (d(i + 1) - d(i - 1)) * inv_2dx;
        let df = a * f * d(i) - k * f * slope / s * dslope;
        out[i] = d(i) + dt * df;
    }
    Ok(out)
}

/// Transpose of [`step_jvp`], computed by the same routine as the reverse
/// sweep.
pub fn step_vjp(
    z: &[f64],
    w: &[f64],
    params: &ModelParams,
    grid: &Grid1D,
    dt: f64,
) -> Result<Vec<f64>> {
    let n = grid.n();
    check_len("state", n, z.len())?;
    check_len("cotangent", n, w.len())?;
    check_len("etch rate", n, params.e().len())?;
    let mut lam = w.to_vec();
    lam[0] = 0.0;
    lam[n - 1] = 0.0;
    let mut out = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut acc = Accum::default();
    let mut ge = vec![0.0; n];
    let p = params.raw();
    with_attenuation!(p.k, |att| transpose_step(
        z,
        &lam,
        &mut out,
        &mut q,
        p,
        att,
        0.5 / grid.dx(),
        dt,
        Controls::ALL,
        &mut acc,
        &mut ge,
    ));
    Ok(out)
}

/// A single scalar control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Component {
    A,
    K,
    E(usize),
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Component::A => write!(f, "a"),
            Component::K => write!(f, "k"),
            Component::E(i) => write!(f, "e[{i}]"),
        }
    }
}

impl Component {
    /// `a`, `k` and every `E` node of an `n`-node grid.
    pub fn all(n: usize) -> Vec<Component> {
        let mut v = vec![Component::A, Component::K];
        v.extend((0..n).map(Component::E));
        v
    }

    fn is_active(&self, active: Controls) -> bool {
        match self {
            Component::A => active.a,
            Component::K => active.k,
            Component::E(_) => active.e,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FdEntry {
    pub component: Component,
    pub adjoint: f64,
    pub fd: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub h: f64,
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// `|x - y| / max(|x|, |y|)`, zero when both vanish.
pub fn relative_error(x: f64, y: f64) -> f64 {
    let scale = x.abs().max(y.abs());
    if scale == 0.0 {
        0.0
    } else {
        (x - y).abs() / scale
    }
}

/// Compares adjoint gradient entries with central differences of the cost.
/// The step for control `u` is `h * max(|u|, 1)`. Inactive controls are not
/// variables of the problem and report zero on both sides.
pub fn fd_check(
    params: &ModelParams,
    meas: &MeasurementSet,
    spec: &CostSpec,
    grid: &Grid1D,
    scheme: &TimeScheme,
    h: f64,
    components: &[Component],
) -> Result<FdReport> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    for c in components {
        if let Component::E(i) = c {
            if *i >= grid.n() {
                return Err(Error::invalid(format!("component e[{i}] outside the grid")));
            }
        }
    }
    let (_, grad) = gradient(params, meas, spec, grid, scheme)?;
    let entries = components
        .par_iter()
        .map(|&c| -> Result<FdEntry> {
            let adjoint = match c {
                Component::A => grad.a,
                Component::K => grad.k,
                Component::E(i) => grad.e[i],
            };
            if !c.is_active(spec.active) {
                return Ok(FdEntry {
                    component: c,
                    adjoint,
                    fd: 0.0,
                    rel_error: relative_error(adjoint, 0.0),
                });
            }
            let base = match c {
                Component::A => params.a(),
                Component::K => params.k(),
                Component::E(i) => params.e().as_slice()[i],
            };
            let with = |u: f64| {
                let (mut a, mut k) = (params.a(), params.k());
                let mut e = params.e().as_slice().to_vec();
                match c {
                    Component::A => a = u,
                    Component::K => k = u,
                    Component::E(i) => e[i] = u,
                }
                (a, k, e)
            };
            let step = h * base.abs().max(1.0);
            let (up, down) = (base + step, base - step);
            let (ap, kp, ep) = with(up);
            let (am, km, em) = with(down);
            let pp = RawParams {
                a: ap,
                k: kp,
                e: &ep,
            };
            let pm = RawParams {
                a: am,
                k: km,
                e: &em,
            };
            let z0 = vec![0.0; grid.n()];
            let zp = model::final_profile_raw(pp, grid, scheme, &z0, |_, _| {})?;
            let zm = model::final_profile_raw(pm, grid, scheme, &z0, |_, _| {})?;
            // cost differences formed from profile differences: the cost
            // values themselves can agree to nearly all of their digits
            let delta = cost::misfit_difference(&zp, &zm, meas)
                + cost::regularization_difference(pp, pm, spec, grid);
            let fd = delta / (up - down);
            Ok(FdEntry {
                component: c,
                adjoint,
                fd,
                rel_error: relative_error(adjoint, fd),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FdReport { h, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_gen::{etch_preset, generate_clean};
    use crate::model::EtchRate;

    fn small() -> (Grid1D, TimeScheme, ModelParams) {
        let g = Grid1D::symmetric(1.0, 20).unwrap();
        let s = TimeScheme::new(0.5, 150).unwrap();
        let e = etch_preset("gaussian-bump", &g).unwrap();
        let e = EtchRate::new(e.as_slice().iter().map(|v| v * 2.0 + 0.01).collect()).unwrap();
        (g, s, ModelParams::new(2.0, 3.0, e).unwrap())
    }

    #[test]
    fn exact_data_gives_zero_gradient() {
        let (g, s, p) = small();
        let z = generate_clean(&p, &g, &s).unwrap();
        let meas = MeasurementSet::single(g, z).unwrap();
        let (c, grad) = gradient(&p, &meas, &CostSpec::grad_e(0.0, Controls::ALL), &g, &s).unwrap();
        assert_eq!(c.total, 0.0);
        assert!(grad.norm() <= 1e-12);
    }

    #[test]
    fn matches_finite_differences_on_small_problem() {
        let (g, s, p) = small();
        let d: Vec<f64> = generate_clean(&p, &g, &s)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if i == 0 || i == 19 {
                    0.0
                } else {
                    1.3 * v + 0.01 * (i as f64).cos()
                }
            })
            .collect();
        let meas = MeasurementSet::single(g, d).unwrap();
        let spec = CostSpec::grad_e(1e-4, Controls::ALL);
        let rep = fd_check(&p, &meas, &spec, &g, &s, 1e-6, &Component::all(20)).unwrap();
        assert!(rep.max_rel_error() < 1e-5, "{:#?}", rep.entries);
    }

    #[test]
    fn inactive_controls_report_zero() {
        let (g, s, p) = small();
        let meas = MeasurementSet::single(g, vec![0.0; 20]).unwrap();
        let bg = ModelParams::new(1.0, 1.0, EtchRate::zeros(20)).unwrap();
        let spec = CostSpec::background(bg, 0.1, Controls::AK);
        let rep = fd_check(
            &p,
            &meas,
            &spec,
            &g,
            &s,
            1e-6,
            &[Component::E(5), Component::A],
        )
        .unwrap();
        assert_eq!(rep.entries[0].adjoint, 0.0);
        assert_eq!(rep.entries[0].fd, 0.0);
        assert!(rep.entries[1].adjoint != 0.0);
    }

    #[test]
    fn boundary_multipliers_vanish() {
        let (g, s, p) = small();
        let traj = model::forward(&p, &g, &s, &[0.0; 20]).unwrap();
        let seed: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let st = adjoint_sweep(&traj, &p, &seed, true).unwrap();
        let levels = st.levels.unwrap();
        for row in levels.chunks(20) {
            assert_eq!(row[0], 0.0);
            assert_eq!(row[19], 0.0);
        }
        assert_eq!(&levels[levels.len() - 20..], &st.p_final[..]);
        assert_eq!(&levels[..20], &st.p_initial[..]);
    }

    #[test]
    fn attenuation_fast_paths_agree_with_power() {
        for k in [0.0, 1.0, 2.0, 3.0, 4.0, 7.0, 2.5, 0.3] {
            let att = Attenuation::new(k);
            for s in [1.0, 1.01, 2.0, 17.5] {
                let expect: f64 = f64::powf(s, -0.5 * k);
                assert!(
                    (att.eval(s) - expect).abs() <= 1e-15 * expect.max(1.0),
                    "k={k} s={s}"
                );
            }
        }
    }

    #[test]
    fn fd_check_rejects_bad_step() {
        let (g, s, p) = small();
        let meas = MeasurementSet::single(g, vec![0.0; 20]).unwrap();
        assert!(fd_check(
            &p,
            &meas,
            &CostSpec::grad_e(0.0, Controls::E),
            &g,
            &s,
            0.0,
            &[Component::A]
        )
        .is_err());
    }
}

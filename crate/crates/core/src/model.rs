//! Surface evolution model and its explicit discretization.
//!
//! The depth `Z >= 0` of the milled surface obeys
//!
//! ```text
//! dZ/dt = E(x) exp(a Z) / (1 + Z_x^2)^(k/2),    Z = 0 on the boundary,
//! ```
//!
//! which is integrated with forward Euler in time and central differences in
//! space. The right-hand side is forced to zero at the two boundary nodes, so
//! every state keeps an exactly-zero Dirichlet boundary.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

/// Uniform one-dimensional mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct Grid1D {
    x_min: f64,
    x_max: f64,
    n: usize,
    dx: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRepr {
    x_min: f64,
    x_max: f64,
    n: usize,
}

impl TryFrom<GridRepr> for Grid1D {
    type Error = Error;
    fn try_from(r: GridRepr) -> Result<Self> {
        Grid1D::new(r.x_min, r.x_max, r.n)
    }
}

impl From<Grid1D> for GridRepr {
    fn from(g: Grid1D) -> Self {
        GridRepr {
            x_min: g.x_min,
            x_max: g.x_max,
            n: g.n,
        }
    }
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, n: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
            return Err(Error::invalid(format!(
                "grid bounds must be finite with x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if n < 3 {
            return Err(Error::invalid(format!(
                "grid needs at least 3 nodes, got {n}"
            )));
        }
        Ok(Grid1D {
            x_min,
            x_max,
            n,
            dx: (x_max - x_min) / (n - 1) as f64,
        })
    }

    /// Grid on `[-half_width, half_width]`.
    pub fn symmetric(half_width: f64, n: usize) -> Result<Self> {
        Grid1D::new(-half_width, half_width, n)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn length(&self) -> f64 {
        self.x_max - self.x_min
    }

    /// Node coordinate. Symmetric grids give exactly mirrored coordinates.
    pub fn x(&self, i: usize) -> f64 {
        debug_assert!(i < self.n);
        let from_left = self.x_min + i as f64 * self.dx;
        let from_right = self.x_max - (self.n - 1 - i) as f64 * self.dx;
        if 2 * i < self.n - 1 {
            from_left
        } else if 2 * i > self.n - 1 {
            from_right
        } else {
            0.5 * (self.x_min + self.x_max)
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }

    /// Trapezoidal quadrature weights.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let mut w = vec![self.dx; self.n];
        w[0] *= 0.5;
        w[self.n - 1] *= 0.5;
        w
    }

    /// Trapezoidal integral of nodal values.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), self.n);
        let inner: f64 = f[1..self.n - 1].iter().sum();
        self.dx * (inner + 0.5 * (f[0] + f[self.n - 1]))
    }

    pub fn is_symmetric(&self) -> bool {
        self.x_min == -self.x_max
    }
}

/// Nonnegative etching rate sampled at grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EtchRate(Vec<f64>);

impl EtchRate {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite("etch rate", &values)?;
        if let Some(i) = values.iter().position(|&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "etch rate must be nonnegative, node {i} has {}",
                values[i]
            )));
        }
        Ok(EtchRate(values))
    }

    pub fn zeros(n: usize) -> Self {
        EtchRate(vec![0.0; n])
    }

    /// Samples `f` at the grid nodes, clamping negative values to zero.
    pub fn from_fn(grid: &Grid1D, f: impl Fn(f64) -> f64) -> Result<Self> {
        EtchRate::new((0..grid.n()).map(|i| f(grid.x(i)).max(0.0)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for EtchRate {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        EtchRate::new(v)
    }
}

impl From<EtchRate> for Vec<f64> {
    fn from(e: EtchRate) -> Self {
        e.0
    }
}

/// The control vector `{a, k, E}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct ModelParams {
    a: f64,
    k: f64,
    e: EtchRate,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsRepr {
    a: f64,
    k: f64,
    e: EtchRate,
}

impl TryFrom<ParamsRepr> for ModelParams {
    type Error = Error;
    fn try_from(r: ParamsRepr) -> Result<Self> {
        ModelParams::new(r.a, r.k, r.e)
    }
}

impl From<ModelParams> for ParamsRepr {
    fn from(p: ModelParams) -> Self {
        ParamsRepr {
            a: p.a,
            k: p.k,
            e: p.e,
        }
    }
}

impl ModelParams {
    pub fn new(a: f64, k: f64, e: EtchRate) -> Result<Self> {
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::invalid(format!(
                "a must be finite and >= 0, got {a}"
            )));
        }
        if !(k.is_finite() && k >= 0.0) {
            return Err(Error::invalid(format!(
                "k must be finite and >= 0, got {k}"
            )));
        }
        Ok(ModelParams { a, k, e })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn e(&self) -> &EtchRate {
        &self.e
    }

    pub fn with_e(&self, e: EtchRate) -> Self {
        ModelParams { e, ..self.clone() }
    }

    pub(crate) fn raw(&self) -> RawParams<'_> {
        RawParams {
            a: self.a,
            k: self.k,
            e: self.e.as_slice(),
        }
    }

    fn check_grid(&self, grid: &Grid1D) -> Result<()> {
        check_len("etch rate", grid.n(), self.e.len())
    }
}

/// Unvalidated parameter view used inside the numerics (finite differences
/// may probe slightly negative values).
#[derive(Debug, Clone, Copy)]
pub(crate) struct RawParams<'a> {
    pub a: f64,
    pub k: f64,
    pub e: &'a [f64],
}

/// Uniform explicit time stepping on `[0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemeRepr", into = "SchemeRepr")]
pub struct TimeScheme {
    t_end: f64,
    dt: f64,
    n_steps: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemeRepr {
    t_end: f64,
    n_steps: usize,
}

impl TryFrom<SchemeRepr> for TimeScheme {
    type Error = Error;
    fn try_from(r: SchemeRepr) -> Result<Self> {
        TimeScheme::new(r.t_end, r.n_steps)
    }
}

impl From<TimeScheme> for SchemeRepr {
    fn from(s: TimeScheme) -> Self {
        SchemeRepr {
            t_end: s.t_end,
            n_steps: s.n_steps,
        }
    }
}

impl TimeScheme {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::invalid(format!(
                "t_end must be positive, got {t_end}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::invalid("time scheme needs at least one step"));
        }
        Ok(TimeScheme {
            t_end,
            dt: t_end / n_steps as f64,
            n_steps,
        })
    }

    /// Smallest step count whose uniform step does not exceed `dt_max`.
    pub fn with_max_dt(t_end: f64, dt_max: f64) -> Result<Self> {
        if !(dt_max.is_finite() && dt_max > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {dt_max}")));
        }
        let ratio = t_end / dt_max;
        let n_steps = (ratio * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        TimeScheme::new(t_end, n_steps)
    }

    /// `dt <= dx^2 / 4`, the default step for central differences.
    pub fn default_for(grid: &Grid1D, t_end: f64) -> Result<Self> {
        TimeScheme::with_max_dt(t_end, grid.dx() * grid.dx() / 4.0)
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
}

/// Full time history `Z^0 .. Z^N` of a forward run, stored row-major.
#[derive(Debug, Clone)]
pub struct Trajectory {
    states: Vec<f64>,
    grid: Grid1D,
    scheme: TimeScheme,
}

impl Trajectory {
    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn scheme(&self) -> &TimeScheme {
        &self.scheme
    }

    /// Number of stored levels, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.states.len() / self.grid.n()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, m: usize) -> &[f64] {
        let n = self.grid.n();
        &self.states[m * n..(m + 1) * n]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.grid.n())
    }
}

/// `(1 + p^2)^(-k/2)`, evaluated without a logarithm when `k` is a small
/// integer (every preset uses k = 3).
#[derive(Debug, Clone, Copy)]
pub(crate) enum Attenuation {
    Whole(i32),
    Half(i32),
    General(f64),
}

impl Attenuation {
    pub(crate) fn new(k: f64) -> Self {
        if k == k.round() && (0.0..=64.0).contains(&k) {
            let m = (k / 2.0).floor() as i32;
            if (k as i32) % 2 == 0 {
                Attenuation::Whole(m)
            } else {
                Attenuation::Half(m)
            }
        } else {
            Attenuation::General(0.5 * k)
        }
    }

    /// Attenuation for `s = 1 + p^2`.
    #[inline(always)]
    pub(crate) fn eval(self, s: f64) -> f64 {
        match self {
            Attenuation::Whole(m) => s.powi(-m),
            Attenuation::Half(m) => 1.0 / (s.powi(m) * s.sqrt()),
            Attenuation::General(half_k) => (-half_k * s.ln()).exp(),
        }
    }
}

/// Generates a forward-step loop specialised on the attenuation law.
macro_rules! step_loop {
    ($z:ident, $p:ident, $inv_2dx:ident, $dt:ident, $out:ident, $att:expr) => {{
        let n = $z.len();
        let mut sum = 0.0;
        $out[0] = 0.0;
        $out[n - 1] = 0.0;
        for i in 1..n - 1 {
            let e = $p.e[i];
            let zi = $z[i];
            let next = if e == 0.0 {
                zi
            } else {
                let slope = ($z[i + 1] - $z[i - 1]) * $inv_2dx;
                let s = 1.0 + slope * slope;
                zi + $dt * e * ($p.a * zi).exp() * $att(s)
            };
            $out[i] = next;
            sum += next;
        }
        sum
    }};
}

/// One explicit Euler step into `out`. Returns the sum of the new state,
/// which is non-finite exactly when some entry is.
#[inline]
pub(crate) fn euler_step(
    z: &[f64],
    p: RawParams<'_>,
    inv_2dx: f64,
    dt: f64,
    out: &mut [f64],
) -> f64 {
    match Attenuation::new(p.k) {
        Attenuation::Whole(m) => step_loop!(z, p, inv_2dx, dt, out, |s: f64| s.powi(-m)),
        Attenuation::Half(m) => {
            step_loop!(z, p, inv_2dx, dt, out, |s: f64| 1.0
                / (s.powi(m) * s.sqrt()))
        }
        Attenuation::General(half_k) => {
            step_loop!(z, p, inv_2dx, dt, out, |s: f64| (-half_k * s.ln()).exp())
        }
    }
}

pub(crate) fn rhs_raw(z: &[f64], p: RawParams<'_>, dx: f64) -> Vec<f64> {
    let n = z.len();
    let inv_2dx = 0.5 / dx;
    let att = Attenuation::new(p.k);
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        let slope = (z[i + 1] - z[i - 1]) * inv_2dx;
        out[i] = p.e[i] * (p.a * z[i]).exp() * att.eval(1.0 + slope * slope);
    }
    out
}

/// Slope `Z_x` at every node: central differences inside, one-sided first
/// order at the two ends.
pub fn slopes(z: &[f64], grid: &Grid1D) -> Vec<f64> {
    let n = z.len();
    let dx = grid.dx();
    let mut s = vec![0.0; n];
    s[0] = (z[1] - z[0]) / dx;
    s[n - 1] = (z[n - 1] - z[n - 2]) / dx;
    for i in 1..n - 1 {
        s[i] = (z[i + 1] - z[i - 1]) / (2.0 * dx);
    }
    s
}

/// Right-hand side `F(Z)` of the semi-discrete model, with zero boundary rows.
pub fn rhs(z: &[f64], params: &ModelParams, grid: &Grid1D) -> Result<Vec<f64>> {
    check_len("profile", grid.n(), z.len())?;
    params.check_grid(grid)?;
    check_finite("profile", z)?;
    Ok(rhs_raw(z, params.raw(), grid.dx()))
}

fn check_initial(z0: &[f64], grid: &Grid1D) -> Result<()> {
    check_len("initial profile", grid.n(), z0.len())?;
    check_finite("initial profile", z0)?;
    if z0[0] != 0.0 || z0[grid.n() - 1] != 0.0 {
        return Err(Error::invalid(
            "initial profile must vanish on the boundary",
        ));
    }
    Ok(())
}

pub(crate) fn forward_raw(
    p: RawParams<'_>,
    grid: &Grid1D,
    scheme: &TimeScheme,
    z0: &[f64],
) -> Result<Trajectory> {
    let n = grid.n();
    let steps = scheme.n_steps();
    let inv_2dx = 0.5 / grid.dx();
    let dt = scheme.dt();
    let mut states = vec![0.0; n * (steps + 1)];
    states[..n].copy_from_slice(z0);
    for m in 0..steps {
        let (done, rest) = states.split_at_mut((m + 1) * n);
        let sum = euler_step(&done[m * n..], p, inv_2dx, dt, &mut rest[..n]);
        if !sum.is_finite() {
            return Err(Error::BlowUp {
                step: m + 1,
                time: (m + 1) as f64 * dt,
            });
        }
    }
    Ok(Trajectory {
        states,
        grid: *grid,
        scheme: *scheme,
    })
}

/// Final state only, without storing the history.
pub(crate) fn final_profile_raw(
    p: RawParams<'_>,
    grid: &Grid1D,
    scheme: &TimeScheme,
    z0: &[f64],
    mut on_step: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>> {
    let inv_2dx = 0.5 / grid.dx();
    let dt = scheme.dt();
    let mut cur = z0.to_vec();
    let mut next = vec![0.0; z0.len()];
    on_step(0, &cur);
    for m in 0..scheme.n_steps() {
        let sum = euler_step(&cur, p, inv_2dx, dt, &mut next);
        if !sum.is_finite() {
            return Err(Error::BlowUp {
                step: m + 1,
                time: (m + 1) as f64 * dt,
            });
        }
        std::mem::swap(&mut cur, &mut next);
        on_step(m + 1, &cur);
    }
    Ok(cur)
}

/// Integrates the model from `z0`, keeping every intermediate state.
pub fn forward(
    params: &ModelParams,
    grid: &Grid1D,
    scheme: &TimeScheme,
    z0: &[f64],
) -> Result<Trajectory> {
    params.check_grid(grid)?;
    check_initial(z0, grid)?;
    forward_raw(params.raw(), grid, scheme, z0)
}

/// Integrates the model and returns only `Z(., T)`.
pub fn final_profile(
    params: &ModelParams,
    grid: &Grid1D,
    scheme: &TimeScheme,
    z0: &[f64],
) -> Result<Vec<f64>> {
    params.check_grid(grid)?;
    check_initial(z0, grid)?;
    final_profile_raw(params.raw(), grid, scheme, z0, |_, _| {})
}

/// Like [`final_profile`], calling `observe(step, state)` after every step
/// (and once for the initial state).
pub fn forward_observed(
    params: &ModelParams,
    grid: &Grid1D,
    scheme: &TimeScheme,
    z0: &[f64],
    observe: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>> {
    params.check_grid(grid)?;
    check_initial(z0, grid)?;
    final_profile_raw(params.raw(), grid, scheme, z0, observe)
}

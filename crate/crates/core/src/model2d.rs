//! Forward-only two-dimensional version of the surface model on a
//! tensor-product grid:
//!
//! ```text
//! dZ/dt = E(x, y) exp(a Z) / (1 + Z_x^2 + Z_y^2)^(k/2)
//! ```
//!
//! Same explicit Euler / central difference scheme as the 1D model, with the
//! right-hand side forced to zero on the whole boundary ring.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::model::{Attenuation, Grid1D, TimeScheme};

/// Tensor product of two uniform meshes. Values are stored row-major with
/// `x` varying fastest: index `j * nx + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub x: Grid1D,
    pub y: Grid1D,
}

impl Grid2D {
    pub fn new(x: Grid1D, y: Grid1D) -> Self {
        Grid2D { x, y }
    }

    pub fn len(&self) -> usize {
        self.x.n() * self.y.n()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.x.n() + i
    }

    fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.x.n() || j + 1 == self.y.n()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams2D {
    a: f64,
    k: f64,
    e: Vec<f64>,
}

impl ModelParams2D {
    pub fn new(a: f64, k: f64, e: Vec<f64>) -> Result<Self> {
        if !(a.is_finite() && a >= 0.0 && k.is_finite() && k >= 0.0) {
            return Err(Error::invalid(format!(
                "a and k must be finite and >= 0, got a={a}, k={k}"
            )));
        }
        check_finite("etch rate", &e)?;
        if e.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("etch rate must be nonnegative"));
        }
        Ok(ModelParams2D { a, k, e })
    }

    /// Etch rate sampled from `f(x, y)`; negative samples are clamped to 0.
    pub fn from_fn(a: f64, k: f64, grid: &Grid2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut e = Vec::with_capacity(grid.len());
        for j in 0..grid.y.n() {
            for i in 0..grid.x.n() {
                e.push(f(grid.x.x(i), grid.y.x(j)).max(0.0));
            }
        }
        ModelParams2D::new(a, k, e)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn e(&self) -> &[f64] {
        &self.e
    }
}

/// Stored history of a 2D run.
#[derive(Debug, Clone)]
pub struct Trajectory2D {
    states: Vec<f64>,
    grid: Grid2D,
    scheme: TimeScheme,
}

impl Trajectory2D {
    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn scheme(&self) -> &TimeScheme {
        &self.scheme
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, m: usize) -> &[f64] {
        let n = self.grid.len();
        &self.states[m * n..(m + 1) * n]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

/// `dt <= min(dx, dy)^2 / 4`.
pub fn default_scheme(grid: &Grid2D, t_end: f64) -> Result<TimeScheme> {
    let h = grid.x.dx().min(grid.y.dx());
    TimeScheme::with_max_dt(t_end, h * h / 4.0)
}

/// Right-hand side on the whole grid, zero on the boundary ring.
pub fn rhs2d(z: &[f64], params: &ModelParams2D, grid: &Grid2D) -> Result<Vec<f64>> {
    check_len("2D profile", grid.len(), z.len())?;
    check_len("2D etch rate", grid.len(), params.e.len())?;
    check_finite("2D profile", z)?;
    let mut out = vec![0.0; grid.len()];
    step(z, params, grid, 1.0, &mut out);
    for (o, zi) in out.iter_mut().zip(z) {
        *o -= zi;
    }
    Ok(out)
}

/// `out = z + dt F(z)`; returns the sum of `out`.
fn step(z: &[f64], p: &ModelParams2D, grid: &Grid2D, dt: f64, out: &mut [f64]) -> f64 {
    let (nx, ny) = (grid.x.n(), grid.y.n());
    let (cx, cy) = (0.5 / grid.x.dx(), 0.5 / grid.y.dx());
    let att = Attenuation::new(p.k);
    let mut sum = 0.0;
    for j in 0..ny {
        for i in 0..nx {
            let c = j * nx + i;
            let next = if grid.is_boundary(i, j) {
                0.0
            } else if p.e[c] == 0.0 {
                z[c]
            } else {
                let zx = (z[c + 1] - z[c - 1]) * cx;
                let zy = (z[c + nx] - z[c - nx]) * cy;
                z[c] + dt * p.e[c] * (p.a * z[c]).exp() * att.eval(1.0 + zx * zx + zy * zy)
            };
            out[c] = next;
            sum += next;
        }
    }
    sum
}

fn check_initial(z0: &[f64], grid: &Grid2D) -> Result<()> {
    check_len("2D initial profile", grid.len(), z0.len())?;
    check_finite("2D initial profile", z0)?;
    for j in 0..grid.y.n() {
        for i in 0..grid.x.n() {
            if grid.is_boundary(i, j) && z0[grid.index(i, j)] != 0.0 {
                return Err(Error::invalid(
                    "initial profile must vanish on the boundary",
                ));
            }
        }
    }
    Ok(())
}

/// Explicit Euler run keeping every state.
pub fn forward2d(
    params: &ModelParams2D,
    grid: &Grid2D,
    scheme: &TimeScheme,
    z0: &[f64],
) -> Result<Trajectory2D> {
    check_len("2D etch rate", grid.len(), params.e.len())?;
    check_initial(z0, grid)?;
    let n = grid.len();
    let steps = scheme.n_steps();
    let mut states = vec![0.0; n * (steps + 1)];
    states[..n].copy_from_slice(z0);
    for m in 0..steps {
        let (done, rest) = states.split_at_mut((m + 1) * n);
        let sum = step(&done[m * n..], params, grid, scheme.dt(), &mut rest[..n]);
        if !sum.is_finite() {
            return Err(Error::BlowUp {
                step: m + 1,
                time: (m + 1) as f64 * scheme.dt(),
            });
        }
    }
    Ok(Trajectory2D {
        states,
        grid: *grid,
        scheme: *scheme,
    })
}

/// Final state only.
pub fn final_profile2d(
    params: &ModelParams2D,
    grid: &Grid2D,
    scheme: &TimeScheme,
    z0: &[f64],
) -> Result<Vec<f64>> {
    check_len("2D etch rate", grid.len(), params.e.len())?;
    check_initial(z0, grid)?;
    let mut cur = z0.to_vec();
    let mut next = vec![0.0; cur.len()];
    for m in 0..scheme.n_steps() {
        let sum = step(&cur, params, grid, scheme.dt(), &mut next);
        if !sum.is_finite() {
            return Err(Error::BlowUp {
                step: m + 1,
                time: (m + 1) as f64 * scheme.dt(),
            });
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize) -> Grid2D {
        let g = Grid1D::symmetric(1.0, n).unwrap();
        Grid2D::new(g, g)
    }

    fn radial(grid: &Grid2D) -> ModelParams2D {
        ModelParams2D::from_fn(2.0, 3.0, grid, |x, y| 0.2 * (-(x * x + y * y) / 0.09).exp())
            .unwrap()
    }

    #[test]
    fn zero_etch_is_stationary() {
        let g = square(9);
        let p = ModelParams2D::new(2.0, 3.0, vec![0.0; 81]).unwrap();
        let mut z0 = vec![0.0; 81];
        z0[g.index(4, 4)] = 0.3;
        let s = TimeScheme::new(0.1, 20).unwrap();
        let tr = forward2d(&p, &g, &s, &z0).unwrap();
        assert_eq!(tr.final_state(), &z0[..]);
    }

    #[test]
    fn one_step_from_flat() {
        let g = square(11);
        let p = radial(&g);
        let s = TimeScheme::new(1e-3, 1).unwrap();
        let tr = forward2d(&p, &g, &s, &vec![0.0; g.len()]).unwrap();
        for j in 0..11 {
            for i in 0..11 {
                let c = g.index(i, j);
                let want = if g.is_boundary(i, j) {
                    0.0
                } else {
                    1e-3 * p.e()[c]
                };
                assert_eq!(tr.state(1)[c], want);
            }
        }
    }

    #[test]
    fn swap_symmetry_on_square_grid() {
        let g = square(21);
        let p = radial(&g);
        let s = default_scheme(&g, 0.5).unwrap();
        let z = final_profile2d(&p, &g, &s, &vec![0.0; g.len()]).unwrap();
        assert!(z[g.index(10, 10)] > 0.05);
        for j in 0..21 {
            for i in 0..21 {
                assert!((z[g.index(i, j)] - z[g.index(j, i)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ridge_etch_reduces_to_one_dimension() {
        // with E independent of y the rows either side of the middle row stay
        // equal, so Z_y vanishes there and the middle row follows the 1D model
        let gx = Grid1D::symmetric(1.0, 15).unwrap();
        let gy = Grid1D::symmetric(1.0, 5).unwrap();
        let g = Grid2D::new(gx, gy);
        let p = ModelParams2D::from_fn(1.0, 2.0, &g, |x, _| 0.3 * (-x * x / 0.1).exp()).unwrap();
        let s = TimeScheme::new(0.05, 50).unwrap();
        let z2 = final_profile2d(&p, &g, &s, &vec![0.0; g.len()]).unwrap();
        let e1 = crate::model::EtchRate::from_fn(&gx, |x| 0.3 * (-x * x / 0.1).exp()).unwrap();
        let p1 = crate::model::ModelParams::new(1.0, 2.0, e1).unwrap();
        let z1 = crate::model::final_profile(&p1, &gx, &s, &[0.0; 15]).unwrap();
        for i in 0..15 {
            assert_eq!(z2[g.index(i, 2)], z1[i]);
        }
    }

    #[test]
    fn rhs_matches_single_step() {
        let g = square(7);
        let p = radial(&g);
        let f = rhs2d(&vec![0.0; 49], &p, &g).unwrap();
        assert_eq!(f[g.index(3, 3)], p.e()[g.index(3, 3)]);
        assert_eq!(f[g.index(0, 3)], 0.0);
    }

    #[test]
    fn rejects_nonzero_boundary_and_negative_rate() {
        let g = square(5);
        let p = ModelParams2D::new(1.0, 1.0, vec![0.1; 25]).unwrap();
        let mut z0 = vec![0.0; 25];
        z0[0] = 1.0;
        let s = TimeScheme::new(0.1, 2).unwrap();
        assert!(forward2d(&p, &g, &s, &z0).is_err());
        assert!(ModelParams2D::new(1.0, 1.0, vec![-0.1; 25]).is_err());
    }
}

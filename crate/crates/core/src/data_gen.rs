//! Synthetic trench measurements: etch-rate shapes, clean profiles and
//! calibrated Gaussian measurement noise.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{self, EtchRate, Grid1D, ModelParams, TimeScheme};

/// Parametric etch-rate shapes. Widths are absolute (same units as `x`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum EtchShape {
    /// `c exp(-x^2 / sigma^2)`.
    GaussianBump {
        c: f64,
        sigma: f64,
    },
    /// Gaussian bump times `1 - depth (g(x - x_g) + g(x + x_g))` with
    /// `g(u) = exp(-u^2 / w^2)`: two symmetric notches at `+-x_g`.
    GappedBump {
        c: f64,
        sigma: f64,
        notch_depth: f64,
        notch_pos: f64,
        notch_width: f64,
    },
    Constant {
        c: f64,
    },
    Zero,
}

impl EtchShape {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            EtchShape::GaussianBump { c, sigma } => c * (-(x * x) / (sigma * sigma)).exp(),
            EtchShape::GappedBump {
                c,
                sigma,
                notch_depth,
                notch_pos,
                notch_width,
            } => {
                let g = |u: f64| (-(u * u) / (notch_width * notch_width)).exp();
                let mask = 1.0 - notch_depth * (g(x - notch_pos) + g(x + notch_pos));
                c * (-(x * x) / (sigma * sigma)).exp() * mask.max(0.0)
            }
            EtchShape::Constant { c } => c,
            EtchShape::Zero => 0.0,
        }
    }

    pub fn sample(&self, grid: &Grid1D) -> Result<EtchRate> {
        EtchRate::from_fn(grid, |x| self.value(x))
    }

    /// Same shape with the amplitude multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            EtchShape::GaussianBump { c, sigma } => EtchShape::GaussianBump {
                c: c * factor,
                sigma,
            },
            EtchShape::GappedBump {
                c,
                sigma,
                notch_depth,
                notch_pos,
                notch_width,
            } => EtchShape::GappedBump {
                c: c * factor,
                sigma,
                notch_depth,
                notch_pos,
                notch_width,
            },
            EtchShape::Constant { c } => EtchShape::Constant { c: c * factor },
            EtchShape::Zero => EtchShape::Zero,
        }
    }
}

/// Named etch-rate presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtchPreset {
    GaussianBump,
    GappedBump,
    Zero,
}

impl FromStr for EtchPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-bump" | "gaussian" => Ok(EtchPreset::GaussianBump),
            "gapped-bump" | "gapped" => Ok(EtchPreset::GappedBump),
            "zero" => Ok(EtchPreset::Zero),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

impl fmt::Display for EtchPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EtchPreset::GaussianBump => "gaussian-bump",
            EtchPreset::GappedBump => "gapped-bump",
            EtchPreset::Zero => "zero",
        })
    }
}

/// Default amplitude of the preset shapes. With `a = 2` the center node of
/// a bump of height `c` reaches infinite depth at `t = 1 / (a c)`, so the
/// amplitude must stay well below `1 / (2 T)`.
pub const DEFAULT_AMPLITUDE: f64 = 0.2;

impl EtchPreset {
    /// Shape scaled to the grid: `sigma = 0.25 * half_width`, notches just
    /// outside one `sigma`.
    pub fn shape(&self, grid: &Grid1D) -> EtchShape {
        let half = 0.5 * grid.length();
        let sigma = 0.25 * half;
        match self {
            EtchPreset::GaussianBump => EtchShape::GaussianBump {
                c: DEFAULT_AMPLITUDE,
                sigma,
            },
            EtchPreset::GappedBump => EtchShape::GappedBump {
                c: DEFAULT_AMPLITUDE,
                sigma,
                notch_depth: 0.9,
                notch_pos: sigma,
                notch_width: 0.2 * sigma,
            },
            EtchPreset::Zero => EtchShape::Zero,
        }
    }
}

/// Etch rate for a named preset on `grid`.
pub fn etch_preset(name: &str, grid: &Grid1D) -> Result<EtchRate> {
    name.parse::<EtchPreset>()?.shape(grid).sample(grid)
}

/// Where the calibrated noise enters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Added to the final profile, scaled by the maximum trench depth.
    #[default]
    PostHoc,
    /// Added to the right-hand side at every step, scaled by `max(E)`.
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub level_percent: f64,
    #[serde(default)]
    pub mode: NoiseMode,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn post_hoc(level_percent: f64, seed: u64) -> Self {
        NoiseSpec {
            level_percent,
            mode: NoiseMode::PostHoc,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.level_percent.is_finite() && self.level_percent >= 0.0) {
            return Err(Error::invalid(format!(
                "noise level must be >= 0 percent, got {}",
                self.level_percent
            )));
        }
        Ok(())
    }

    /// Spec for realization `index` of a multi-measurement set.
    pub fn realization(&self, index: usize) -> Self {
        NoiseSpec {
            seed: realization_seed(self.seed, index),
            ..*self
        }
    }
}

/// Seed of realization `index`, so streams do not depend on scheduling.
pub fn realization_seed(seed: u64, index: usize) -> u64 {
    if index == 0 {
        return seed;
    }
    // splitmix64 finalizer
    let mut z = seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Noise-free profile `Z(., T)` from a flat initial surface.
pub fn generate_clean(
    params: &ModelParams,
    grid: &Grid1D,
    scheme: &TimeScheme,
) -> Result<Vec<f64>> {
    model::final_profile(params, grid, scheme, &vec![0.0; grid.n()])
}

/// Noisy version of `z_clean` according to `spec`.
pub fn add_noise(
    z_clean: &[f64],
    spec: &NoiseSpec,
    params: &ModelParams,
    grid: &Grid1D,
    scheme: &TimeScheme,
) -> Result<Vec<f64>> {
    spec.validate()?;
    check_len("clean profile", grid.n(), z_clean.len())?;
    let n = grid.n();
    if spec.level_percent == 0.0 {
        return Ok(z_clean.to_vec());
    }
    let lambda = spec.level_percent / 100.0;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.mode {
        NoiseMode::PostHoc => {
            let scale = lambda * z_clean.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let mut out = z_clean.to_vec();
            for v in &mut out[1..n - 1] {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *v += scale * eps;
            }
            Ok(out)
        }
        NoiseMode::Dynamic => {
            let scale = lambda * params.e().max();
            let dt = scheme.dt();
            let mut z = vec![0.0; n];
            for step in 0..scheme.n_steps() {
                let f = model::rhs(&z, params, grid)?;
                for i in 1..n - 1 {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    z[i] += dt * (f[i] + scale * eps);
                }
                if !z.iter().all(|v| v.is_finite()) {
                    return Err(Error::BlowUp {
                        step: step + 1,
                        time: (step + 1) as f64 * dt,
                    });
                }
            }
            Ok(z)
        }
    }
}

/// How several measured profiles enter the misfit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Single,
    /// Average of per-profile misfits, weight `1/N` each.
    Independent,
    /// Misfit against the averaged profile.
    Superposed,
}

impl FromStr for Combine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Combine::Single),
            "independent" => Ok(Combine::Independent),
            "superposed" => Ok(Combine::Superposed),
            other => Err(Error::invalid(format!("unknown combine mode `{other}`"))),
        }
    }
}

/// One or more measured profiles of the same trench on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    grid: Grid1D,
    profiles: Vec<Vec<f64>>,
    combine: Combine,
}

impl MeasurementSet {
    pub fn new(grid: Grid1D, profiles: Vec<Vec<f64>>, combine: Combine) -> Result<Self> {
        match (combine, profiles.len()) {
            (_, 0) => return Err(Error::invalid("measurement set is empty")),
            (Combine::Single, 1) => {}
            (Combine::Single, c) => {
                return Err(Error::invalid(format!(
                    "single combine needs one profile, got {c}"
                )))
            }
            (_, 1) => {
                return Err(Error::invalid(format!(
                    "{combine:?} combine needs at least two profiles"
                )))
            }
            _ => {}
        }
        for p in &profiles {
            check_len("measured profile", grid.n(), p.len())?;
            crate::error::check_finite("measured profile", p)?;
        }
        Ok(MeasurementSet {
            grid,
            profiles,
            combine,
        })
    }

    pub fn single(grid: Grid1D, profile: Vec<f64>) -> Result<Self> {
        MeasurementSet::new(grid, vec![profile], Combine::Single)
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn profiles(&self) -> &[Vec<f64>] {
        &self.profiles
    }

    pub fn combine(&self) -> Combine {
        self.combine
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    /// Pointwise mean of the profiles.
    pub fn mean_profile(&self) -> Vec<f64> {
        let inv = 1.0 / self.profiles.len() as f64;
        (0..self.grid.n())
            .map(|i| self.profiles.iter().map(|p| p[i]).sum::<f64>() * inv)
            .collect()
    }

    /// Same profiles under a different combine mode.
    pub fn with_combine(&self, combine: Combine) -> Result<Self> {
        MeasurementSet::new(self.grid, self.profiles.clone(), combine)
    }
}

/// `count` independent noisy realizations of the same trench.
pub fn make_measurement_set(
    params: &ModelParams,
    grid: &Grid1D,
    scheme: &TimeScheme,
    spec: &NoiseSpec,
    count: usize,
    combine: Combine,
) -> Result<MeasurementSet> {
    if count == 0 {
        return Err(Error::invalid("measurement count must be at least 1"));
    }
    spec.validate()?;
    let clean = generate_clean(params, grid, scheme)?;
    let profiles = (0..count)
        .map(|r| add_noise(&clean, &spec.realization(r), params, grid, scheme))
        .collect::<Result<Vec<_>>>()?;
    MeasurementSet::new(*grid, profiles, combine)
}

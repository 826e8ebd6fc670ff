//! Named experiment setups. Each preset fixes the grid, time horizon, true
//! parameters, noise levels, cost variants and solver settings of one study
//! so it can be rerun with a single command. Bump `version` whenever a
//! preset's numbers change; it is written into every run manifest.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{Controls, CostSpec};
use crate::data_gen::{Combine, EtchPreset, EtchShape, NoiseMode, DEFAULT_AMPLITUDE};
use crate::error::{Error, Result};
use crate::model::{Grid1D, ModelParams, TimeScheme};
use crate::optimizer::OptConfig;

/// Measurement-count / combination pairs of the sensitivity study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CostVariant {
    #[serde(rename = "single")]
    Single,
    #[serde(rename = "2-independent")]
    Independent2,
    #[serde(rename = "2-superposed")]
    Superposed2,
    #[serde(rename = "3-independent")]
    Independent3,
    #[serde(rename = "3-superposed")]
    Superposed3,
}

impl CostVariant {
    pub const ALL: [CostVariant; 5] = [
        CostVariant::Single,
        CostVariant::Independent2,
        CostVariant::Superposed2,
        CostVariant::Independent3,
        CostVariant::Superposed3,
    ];

    pub fn count(self) -> usize {
        match self {
            CostVariant::Single => 1,
            CostVariant::Independent2 | CostVariant::Superposed2 => 2,
            CostVariant::Independent3 | CostVariant::Superposed3 => 3,
        }
    }

    pub fn combine(self) -> Combine {
        match self {
            CostVariant::Single => Combine::Single,
            CostVariant::Independent2 | CostVariant::Independent3 => Combine::Independent,
            CostVariant::Superposed2 | CostVariant::Superposed3 => Combine::Superposed,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CostVariant::Single => "single",
            CostVariant::Independent2 => "2-independent",
            CostVariant::Superposed2 => "2-superposed",
            CostVariant::Independent3 => "3-independent",
            CostVariant::Superposed3 => "3-superposed",
        }
    }
}

impl fmt::Display for CostVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CostVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown cost variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    /// Distance to the background values of the active controls.
    Background,
    /// Squared norm of the etch-rate gradient.
    GradE,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaPolicy {
    Fixed {
        alpha: f64,
    },
    /// Pick the corner of an L-curve over `count` log-spaced weights.
    LCurve {
        lo: f64,
        hi: f64,
        count: usize,
    },
}

/// Starting estimate of an identification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartSpec {
    pub name: String,
    pub a: f64,
    pub k: f64,
    pub e: EtchShape,
}

impl StartSpec {
    pub fn params(&self, grid: &Grid1D) -> Result<ModelParams> {
        ModelParams::new(self.a, self.k, self.e.sample(grid)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPreset {
    pub name: String,
    pub version: u32,
    pub description: String,
    pub grid: Grid1D,
    pub t_end: f64,
    pub truth_a: f64,
    pub truth_k: f64,
    pub truth_e: EtchShape,
    pub noise_levels: Vec<f64>,
    pub noise_mode: NoiseMode,
    pub variants: Vec<CostVariant>,
    pub regularizer: RegularizerKind,
    pub active: Controls,
    pub alpha: AlphaPolicy,
    /// Extra weights compared side by side (the a/k study).
    pub alpha_grid: Vec<f64>,
    /// Background `(a, k)`; the background etch rate is the start's.
    pub background: Option<(f64, f64)>,
    pub starts: Vec<StartSpec>,
    pub seed: u64,
    pub replications: usize,
    pub opt: OptConfig,
}

impl ExperimentPreset {
    pub fn scheme(&self) -> Result<TimeScheme> {
        TimeScheme::default_for(&self.grid, self.t_end)
    }

    pub fn truth(&self) -> Result<ModelParams> {
        ModelParams::new(self.truth_a, self.truth_k, self.truth_e.sample(&self.grid)?)
    }

    pub fn start(&self, index: usize) -> Result<ModelParams> {
        self.starts
            .get(index)
            .ok_or_else(|| Error::invalid(format!("preset `{}` has no start #{index}", self.name)))?
            .params(&self.grid)
    }

    /// Weight used for single runs: the fixed value, or the geometric
    /// middle of the L-curve range.
    pub fn default_alpha(&self) -> f64 {
        match self.alpha {
            AlphaPolicy::Fixed { alpha } => alpha,
            AlphaPolicy::LCurve { lo, hi, .. } => (lo * hi).sqrt(),
        }
    }

    /// Cost for a run from `start` with weight `alpha`.
    pub fn cost_spec(&self, start: &ModelParams, alpha: f64) -> Result<CostSpec> {
        Ok(match self.regularizer {
            RegularizerKind::GradE => CostSpec::grad_e(alpha, self.active),
            RegularizerKind::Background => {
                let (a, k) = self.background.ok_or_else(|| {
                    Error::Config(format!("preset `{}` has no background values", self.name))
                })?;
                let bg = ModelParams::new(a, k, start.e().clone())?;
                CostSpec::background(bg, alpha, self.active)
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.starts.is_empty() {
            return Err(Error::Config("preset needs at least one start".into()));
        }
        if self
            .noise_levels
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::Config("noise levels must be finite and >= 0".into()));
        }
        if self.regularizer == RegularizerKind::Background && self.background.is_none() {
            return Err(Error::Config(
                "background regularizer needs background values".into(),
            ));
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(Error::Config("t_end must be positive".into()));
        }
        Ok(())
    }
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 7] = [
    "tiny",
    "paper-3.2",
    "paper-3.2-ak",
    "paper-3.2-e",
    "paper-3.3",
    "paper-table1",
    "table1-reduced",
];

/// Gaussian bump with two shallow-sided gaps near the trench edges, the
/// etch rate behind the measured-trench and sensitivity studies.
pub fn trench_shape(grid: &Grid1D) -> EtchShape {
    let sigma = 0.35 * 0.5 * grid.length();
    EtchShape::GappedBump {
        c: DEFAULT_AMPLITUDE,
        sigma,
        notch_depth: 0.9,
        notch_pos: sigma,
        notch_width: 0.5 * sigma,
    }
}

fn base(
    name: &str,
    description: &str,
    grid: Grid1D,
    t_end: f64,
    a: f64,
    k: f64,
    e: EtchShape,
) -> ExperimentPreset {
    ExperimentPreset {
        name: name.into(),
        version: 1,
        description: description.into(),
        grid,
        t_end,
        truth_a: a,
        truth_k: k,
        truth_e: e,
        noise_levels: vec![0.0],
        noise_mode: NoiseMode::PostHoc,
        variants: vec![CostVariant::Single],
        regularizer: RegularizerKind::GradE,
        active: Controls::E,
        alpha: AlphaPolicy::Fixed { alpha: 1e-6 },
        alpha_grid: Vec::new(),
        background: None,
        starts: vec![StartSpec {
            name: "truth".into(),
            a,
            k,
            e,
        }],
        seed: 20_170_601,
        replications: 1,
        opt: OptConfig::default(),
    }
}

fn unit_grid() -> Grid1D {
    Grid1D::symmetric(1.0, 200).expect("valid grid")
}

fn trench_grid(n: usize) -> Grid1D {
    Grid1D::symmetric(0.55, n).expect("valid grid")
}

/// Looks up a named preset.
pub fn preset(name: &str) -> Result<ExperimentPreset> {
    let p = match name {
        "tiny" => {
            let g = Grid1D::symmetric(1.0, 20)?;
            let e = EtchShape::GaussianBump { c: 0.4, sigma: 0.4 };
            let mut p = base(
                "tiny",
                "20-node smoke problem for gradient checks",
                g,
                0.5,
                2.0,
                3.0,
                e,
            );
            p.active = Controls::ALL;
            p.alpha = AlphaPolicy::Fixed { alpha: 1e-4 };
            p.noise_levels = vec![1.0];
            p.starts = vec![StartSpec {
                name: "perturbed".into(),
                a: 1.8,
                k: 2.7,
                e: EtchShape::GaussianBump {
                    c: 0.35,
                    sigma: 0.45,
                },
            }];
            p
        }
        "paper-3.2" => {
            let g = unit_grid();
            let e = EtchPreset::GaussianBump.shape(&g);
            base(
                "paper-3.2",
                "200 nodes on [-1, 1], a = 2, k = 3, Gaussian etch rate",
                g,
                1.0,
                2.0,
                3.0,
                e,
            )
        }
        "paper-3.2-ak" => {
            let g = unit_grid();
            let e = EtchPreset::GaussianBump.shape(&g);
            let mut p = base(
                "paper-3.2-ak",
                "identify a and k with E fixed",
                g,
                1.0,
                2.0,
                3.0,
                e,
            );
            p.regularizer = RegularizerKind::Background;
            p.active = Controls::AK;
            p.alpha = AlphaPolicy::Fixed { alpha: 0.1 };
            p.alpha_grid = vec![0.01, 0.1, 1.0];
            p.background = Some((1.5, 2.5));
            p.noise_levels = vec![10.0, 30.0];
            p.replications = 5;
            p.starts = vec![StartSpec {
                name: "background".into(),
                a: 1.5,
                k: 2.5,
                e,
            }];
            p.opt.max_iters = 100;
            p
        }
        "paper-3.2-e" => {
            let g = unit_grid();
            let e = EtchPreset::GaussianBump.shape(&g);
            let mut p = base(
                "paper-3.2-e",
                "identify the 200-node etch rate with a, k fixed",
                g,
                1.0,
                2.0,
                3.0,
                e,
            );
            p.starts = vec![
                StartSpec {
                    name: "good".into(),
                    a: 2.0,
                    k: 3.0,
                    e: EtchShape::GaussianBump {
                        c: 0.15,
                        sigma: 0.3,
                    },
                },
                StartSpec {
                    name: "poor".into(),
                    a: 2.0,
                    k: 3.0,
                    e: EtchShape::Constant { c: 0.05 },
                },
            ];
            p.opt.grad_rel_tol = Some(1e-4);
            p.opt.max_iters = 500;
            p
        }
        "paper-3.3" => {
            let g = trench_grid(228);
            let mut p = base(
                "paper-3.3",
                "228 nodes on [-0.55, 0.55], etch rate from a zero start on one noisy trench",
                g,
                1.0,
                0.5,
                3.0,
                trench_shape(&g),
            );
            p.alpha = AlphaPolicy::Fixed { alpha: 1e-5 };
            p.noise_levels = vec![1.0];
            p.starts = vec![StartSpec {
                name: "zero".into(),
                a: 0.5,
                k: 3.0,
                e: EtchShape::Zero,
            }];
            p.opt.grad_rel_tol = Some(1e-4);
            p.opt.max_iters = 500;
            p
        }
        "paper-table1" | "table1-reduced" => {
            let n = if name == "paper-table1" { 228 } else { 100 };
            let g = trench_grid(n);
            let mut p = base(
                name,
                "reconstruction error over cost variants and noise levels",
                g,
                1.0,
                0.5,
                3.0,
                trench_shape(&g),
            );
            p.alpha = AlphaPolicy::Fixed { alpha: 1e-4 };
            p.noise_levels = vec![1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 30.0, 40.0];
            p.variants = CostVariant::ALL.to_vec();
            p.replications = 5;
            p.starts = vec![StartSpec {
                name: "zero".into(),
                a: 0.5,
                k: 3.0,
                e: EtchShape::Zero,
            }];
            p.opt.grad_rel_tol = Some(1e-3);
            p.opt.max_iters = 300;
            p
        }
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_named_preset_resolves() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            assert_eq!(p.name, name);
            p.truth().unwrap();
            p.scheme().unwrap();
            for i in 0..p.starts.len() {
                p.start(i).unwrap();
            }
        }
        assert!(matches!(preset("nope"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn grids_match_the_studies() {
        let p = preset("paper-3.2").unwrap();
        assert_eq!(p.grid.n(), 200);
        let s = p.scheme().unwrap();
        assert!(s.dt() <= p.grid.dx().powi(2) / 4.0);
        let p = preset("paper-3.3").unwrap();
        assert_eq!(p.grid.n(), 228);
        assert!((p.grid.dx() - 0.0048).abs() < 1e-4);
        assert_eq!(p.start(0).unwrap().e().max(), 0.0);
    }

    #[test]
    fn variants_round_trip_names() {
        for v in CostVariant::ALL {
            assert_eq!(v.name().parse::<CostVariant>().unwrap(), v);
        }
        assert_eq!(CostVariant::Superposed3.count(), 3);
        assert_eq!(CostVariant::Independent2.combine(), Combine::Independent);
    }

    #[test]
    fn background_spec_uses_preset_values() {
        let p = preset("paper-3.2-ak").unwrap();
        let s = p.start(0).unwrap();
        let spec = p.cost_spec(&s, 0.1).unwrap();
        match spec.regularizer {
            crate::cost::Regularizer::Background { background } => {
                assert_eq!((background.a(), background.k()), (1.5, 2.5));
            }
            _ => panic!("expected background regularizer"),
        }
    }
}

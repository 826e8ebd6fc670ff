//! Scripted studies over a preset: a/k identification, etch-rate
//! identification, L-curve selection and the noise sensitivity matrix.
//!
//! Independent runs go through a bounded rayon pool. Results are collected
//! by cell index, so reports do not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_gen::{self, realization_seed, Combine, MeasurementSet, NoiseSpec};
use crate::error::{Error, Result};
use crate::model::{self, Grid1D, ModelParams, TimeScheme};
use crate::optimizer::{self, OptTrace};
use crate::presets::{AlphaPolicy, CostVariant, ExperimentPreset};
use crate::regularization::{self, Corner, LCurveSweep};

/// `||x - reference|| / ||reference||` in the trapezoidal L2 norm.
pub fn relative_l2(x: &[f64], reference: &[f64], grid: &Grid1D) -> f64 {
    let w = grid.trapezoid_weights();
    let mut num = 0.0;
    let mut den = 0.0;
    for ((xi, ri), wi) in x.iter().zip(reference).zip(&w) {
        num += wi * (xi - ri) * (xi - ri);
        den += wi * ri * ri;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Spearman rank correlation, ties given their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(
            "rank correlation needs two equal-length samples of size >= 2",
        ));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = 0.5 * (i + j) as f64 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Grid, scheme, true parameters and clean target of a preset.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: Grid1D,
    pub scheme: TimeScheme,
    pub truth: ModelParams,
    pub clean: Vec<f64>,
}

impl Problem {
    pub fn new(preset: &ExperimentPreset) -> Result<Self> {
        preset.validate()?;
        let grid = preset.grid;
        let scheme = preset.scheme()?;
        let truth = preset.truth()?;
        let clean = data_gen::generate_clean(&truth, &grid, &scheme)?;
        Ok(Problem {
            grid,
            scheme,
            truth,
            clean,
        })
    }

    /// Noisy measurements for one cell. Realization `r` of a given
    /// `(level, replicate)` is shared by every variant, so multi-measurement
    /// variants extend the single-measurement data.
    pub fn measurements(
        &self,
        preset: &ExperimentPreset,
        level: f64,
        replicate: usize,
        variant: CostVariant,
    ) -> Result<MeasurementSet> {
        self.measurement_set(preset, level, replicate, variant.count(), variant.combine())
    }

    /// `count` noisy copies of the clean target from the `(level, replicate)`
    /// noise stream.
    pub fn measurement_set(
        &self,
        preset: &ExperimentPreset,
        level: f64,
        replicate: usize,
        count: usize,
        combine: Combine,
    ) -> Result<MeasurementSet> {
        let spec = self.noise_spec(preset, level, replicate);
        let profiles = (0..count)
            .map(|r| {
                data_gen::add_noise(
                    &self.clean,
                    &spec.realization(r),
                    &self.truth,
                    &self.grid,
                    &self.scheme,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        MeasurementSet::new(self.grid, profiles, combine)
    }

    pub fn noise_spec(&self, preset: &ExperimentPreset, level: f64, replicate: usize) -> NoiseSpec {
        NoiseSpec {
            level_percent: level,
            mode: preset.noise_mode,
            seed: cell_seed(preset.seed, level, replicate),
        }
    }
}

/// Seed of the noise stream for `(level, replicate)`.
pub fn cell_seed(base: u64, level: f64, replicate: usize) -> u64 {
    realization_seed(
        realization_seed(base, (level * 1000.0).round() as usize + 1),
        replicate + 1,
    )
}

/// Result of one identification run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub params: ModelParams,
    pub trace: OptTrace,
    /// Relative L2 distance between the trench produced by `params` and the
    /// clean target.
    pub trench_error: f64,
    /// Relative L2 distance between identified and true etch rates.
    pub etch_error: f64,
    pub a_error: f64,
    pub k_error: f64,
}

/// Runs one identification from start `start` with weight `alpha`.
pub fn identify(
    preset: &ExperimentPreset,
    problem: &Problem,
    meas: &MeasurementSet,
    start: usize,
    alpha: f64,
) -> Result<RunOutcome> {
    let start = preset.start(start)?;
    let spec = preset.cost_spec(&start, alpha)?;
    let (params, trace) = optimizer::minimize(
        &start,
        meas,
        &spec,
        &problem.grid,
        &problem.scheme,
        &preset.opt,
    )?;
    assess(problem, params, trace)
}

fn assess(problem: &Problem, params: ModelParams, trace: OptTrace) -> Result<RunOutcome> {
    let trench = data_gen::generate_clean(&params, &problem.grid, &problem.scheme)?;
    let t = &problem.truth;
    Ok(RunOutcome {
        trench_error: relative_l2(&trench, &problem.clean, &problem.grid),
        etch_error: relative_l2(params.e().as_slice(), t.e().as_slice(), &problem.grid),
        a_error: (params.a() - t.a()).abs() / t.a().abs().max(f64::MIN_POSITIVE),
        k_error: (params.k() - t.k()).abs() / t.k().abs().max(f64::MIN_POSITIVE),
        params,
        trace,
    })
}

/// One cell of a study; failures are kept with their message.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cell {
    pub variant: CostVariant,
    pub noise: f64,
    pub alpha: f64,
    pub start: String,
    pub replicate: usize,
    pub outcome: std::result::Result<RunOutcome, String>,
}

impl Cell {
    pub fn ok(&self) -> Option<&RunOutcome> {
        self.outcome.as_ref().ok()
    }
}

#[derive(Debug, Clone, Copy)]
struct Job {
    variant: CostVariant,
    noise: f64,
    alpha: f64,
    start: usize,
    replicate: usize,
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        b = b.num_threads(t.max(1));
    }
    b.build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn run_jobs(
    preset: &ExperimentPreset,
    problem: &Problem,
    jobs: &[Job],
    threads: Option<usize>,
) -> Result<Vec<Cell>> {
    let pool = pool(threads)?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|j| {
                let outcome = problem
                    .measurements(preset, j.noise, j.replicate, j.variant)
                    .and_then(|m| identify(preset, problem, &m, j.start, j.alpha))
                    .map_err(|e| e.to_string());
                Cell {
                    variant: j.variant,
                    noise: j.noise,
                    alpha: j.alpha,
                    start: preset.starts[j.start].name.clone(),
                    replicate: j.replicate,
                    outcome,
                }
            })
            .collect()
    }))
}

/// a/k identification for every noise level, weight of the preset's alpha
/// grid (or its default weight) and replicate.
pub fn run_ak_study(preset: &ExperimentPreset, threads: Option<usize>) -> Result<Vec<Cell>> {
    let problem = Problem::new(preset)?;
    let alphas = if preset.alpha_grid.is_empty() {
        vec![preset.default_alpha()]
    } else {
        preset.alpha_grid.clone()
    };
    let mut jobs = Vec::new();
    for &noise in &preset.noise_levels {
        for &alpha in &alphas {
            for replicate in 0..preset.replications {
                jobs.push(Job {
                    variant: CostVariant::Single,
                    noise,
                    alpha,
                    start: 0,
                    replicate,
                });
            }
        }
    }
    run_jobs(preset, &problem, &jobs, threads)
}

/// Etch-rate identification from every start of the preset at each noise
/// level, with the default weight.
pub fn run_e_study(preset: &ExperimentPreset, threads: Option<usize>) -> Result<Vec<Cell>> {
    let problem = Problem::new(preset)?;
    let mut jobs = Vec::new();
    for start in 0..preset.starts.len() {
        for &noise in &preset.noise_levels {
            for replicate in 0..preset.replications {
                jobs.push(Job {
                    variant: CostVariant::Single,
                    noise,
                    alpha: preset.default_alpha(),
                    start,
                    replicate,
                });
            }
        }
    }
    run_jobs(preset, &problem, &jobs, threads)
}

/// Reconstruction-error matrix over cost variants and noise levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub preset: String,
    pub preset_version: u32,
    pub alpha: f64,
    pub variants: Vec<CostVariant>,
    pub noise_levels: Vec<f64>,
    pub replications: usize,
    /// Variant-major, then noise level, then replicate.
    pub cells: Vec<SensitivityCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityCell {
    pub variant: CostVariant,
    pub noise: f64,
    pub replicate: usize,
    pub seed: u64,
    pub trench_error: Option<f64>,
    pub iterations: Option<usize>,
    pub failure: Option<String>,
}

/// Mean and sample standard deviation of the successful replicates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub spread: f64,
    pub successes: usize,
}

impl SensitivityReport {
    pub fn errors(&self, variant: CostVariant, noise: f64) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.variant == variant && c.noise == noise)
            .filter_map(|c| c.trench_error)
            .collect()
    }

    pub fn summary(&self, variant: CostVariant, noise: f64) -> Summary {
        let e = self.errors(variant, noise);
        let n = e.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                spread: f64::NAN,
                successes: 0,
            };
        }
        let mean = e.iter().sum::<f64>() / n as f64;
        let spread = if n > 1 {
            (e.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary {
            mean,
            spread,
            successes: n,
        }
    }

    /// Rank correlation between noise level and mean error for `variant`.
    pub fn trend(&self, variant: CostVariant) -> Result<f64> {
        let means: Vec<f64> = self
            .noise_levels
            .iter()
            .map(|&l| self.summary(variant, l).mean)
            .collect();
        spearman(&self.noise_levels, &means)
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.failure.is_some()).count()
    }
}

/// Fills the sensitivity matrix. `replications` overrides the preset's.
pub fn run_sensitivity(
    preset: &ExperimentPreset,
    replications: Option<usize>,
    threads: Option<usize>,
) -> Result<SensitivityReport> {
    let problem = Problem::new(preset)?;
    let reps = replications.unwrap_or(preset.replications);
    if reps == 0 {
        return Err(Error::Config("replications must be at least 1".into()));
    }
    let alpha = preset.default_alpha();
    let mut jobs = Vec::new();
    for &variant in &preset.variants {
        for &noise in &preset.noise_levels {
            for replicate in 0..reps {
                jobs.push(Job {
                    variant,
                    noise,
                    alpha,
                    start: 0,
                    replicate,
                });
            }
        }
    }
    let cells = run_jobs(preset, &problem, &jobs, threads)?
        .into_iter()
        .map(|c| {
            let seed = cell_seed(preset.seed, c.noise, c.replicate);
            match c.outcome {
                Ok(o) => SensitivityCell {
                    variant: c.variant,
                    noise: c.noise,
                    replicate: c.replicate,
                    seed,
                    trench_error: Some(o.trench_error),
                    iterations: Some(o.trace.iterations()),
                    failure: None,
                },
                Err(msg) => SensitivityCell {
                    variant: c.variant,
                    noise: c.noise,
                    replicate: c.replicate,
                    seed,
                    trench_error: None,
                    iterations: None,
                    failure: Some(msg),
                },
            }
        })
        .collect();
    Ok(SensitivityReport {
        preset: preset.name.clone(),
        preset_version: preset.version,
        alpha,
        variants: preset.variants.clone(),
        noise_levels: preset.noise_levels.clone(),
        replications: reps,
        cells,
    })
}

/// L-curve over a preset's first noise level and first start.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LCurveStudy {
    pub sweep: LCurveSweep,
    pub corner: Option<Corner>,
    /// Trench error of each successful point, aligned with `sweep.points`.
    pub trench_errors: Vec<f64>,
}

impl LCurveStudy {
    /// Weight with the smallest trench error among the sweep points.
    pub fn best_alpha(&self) -> Option<f64> {
        self.sweep
            .points
            .iter()
            .zip(&self.trench_errors)
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(p, _)| p.alpha)
    }
}

/// Sweeps `alphas` (or the preset's L-curve range) and locates the corner.
pub fn run_lcurve(
    preset: &ExperimentPreset,
    alphas: Option<Vec<f64>>,
    warm_start: bool,
) -> Result<LCurveStudy> {
    let alphas = match alphas {
        Some(a) => a,
        None => match preset.alpha {
            AlphaPolicy::LCurve { lo, hi, count } => regularization::log_spaced(lo, hi, count)?,
            AlphaPolicy::Fixed { alpha } => {
                regularization::log_spaced(alpha * 1e-3, alpha * 1e3, 7)?
            }
        },
    };
    let problem = Problem::new(preset)?;
    let noise = preset.noise_levels.first().copied().unwrap_or(0.0);
    let meas = problem.measurements(preset, noise, 0, CostVariant::Single)?;
    let start = preset.start(0)?;
    let template = preset.cost_spec(&start, alphas[0])?;
    let sweep = regularization::lcurve_sweep(
        &alphas,
        &start,
        &meas,
        &template,
        &problem.grid,
        &problem.scheme,
        &preset.opt,
        warm_start,
    )?;
    let trench_errors = sweep
        .points
        .iter()
        .map(|p| {
            let z = model::final_profile(
                &p.solution,
                &problem.grid,
                &problem.scheme,
                &vec![0.0; problem.grid.n()],
            )?;
            Ok(relative_l2(&z, &problem.clean, &problem.grid))
        })
        .collect::<Result<Vec<_>>>()?;
    let corner = if sweep.points.len() >= regularization::MIN_POINTS {
        Some(regularization::lcurve_corner(&sweep.points)?)
    } else {
        None
    };
    Ok(LCurveStudy {
        sweep,
        corner,
        trench_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_of_monotone_data_is_one() {
        let x = [1.0, 2.0, 5.0, 10.0];
        assert_eq!(spearman(&x, &[0.1, 0.2, 0.3, 0.9]).unwrap(), 1.0);
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn spearman_handles_ties() {
        // ranks of y: 1.5, 1.5, 3, 4
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]).unwrap();
        let expect = 4.5 / (5.0f64 * 4.5).sqrt();
        assert!((r - expect).abs() < 1e-15);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn relative_l2_basics() {
        let g = Grid1D::new(0.0, 1.0, 3).unwrap();
        assert_eq!(relative_l2(&[0.0, 2.0, 0.0], &[0.0, 2.0, 0.0], &g), 0.0);
        assert!((relative_l2(&[0.0, 3.0, 0.0], &[0.0, 2.0, 0.0], &g) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cell_seeds_differ_by_level_and_replicate() {
        let s = [
            cell_seed(1, 1.0, 0),
            cell_seed(1, 2.0, 0),
            cell_seed(1, 1.0, 1),
        ];
        assert!(s[0] != s[1] && s[0] != s[2] && s[1] != s[2]);
        assert_eq!(cell_seed(1, 1.0, 0), cell_seed(1, 1.0, 0));
    }
}

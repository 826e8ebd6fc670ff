//! The `awjm` command-line tool.
//!
//! Every run resolves a named preset (or an inline model built from
//! `--a/--k/--nodes/...`), applies run-level overrides such as `--noise`
//! and `--alpha`, writes its outputs into one directory and finishes with
//! `manifest.json`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure, 4 file-system error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adjoint::{self, Component};
use crate::data_gen::{Combine, EtchPreset, EtchShape};
use crate::error::{Error, Result};
use crate::experiments::{self, Cell, Problem};
use crate::io::{self, fmt_f64, RunManifest};
use crate::model;
use crate::presets::{self, AlphaPolicy, ExperimentPreset, StartSpec};
use crate::regularization;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "AWJM_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "awjm",
    version,
    about = "Forward model, adjoint identification and studies for waterjet-milled trenches"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the forward model and write the final profile.
    Forward(Opts),
    /// Write a clean target and noisy measurements.
    Generate(Opts),
    /// Identify parameters from measurements (`--all` runs the preset's study).
    Identify(Opts),
    /// Sweep the regularization weight and locate the L-curve corner.
    Lcurve(Opts),
    /// Fill the error matrix over cost variants and noise levels.
    Sensitivity(Opts),
    /// Compare adjoint gradients with finite differences.
    Fdcheck(Opts),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Forward(_) => "forward",
            Command::Generate(_) => "generate",
            Command::Identify(_) => "identify",
            Command::Lcurve(_) => "lcurve",
            Command::Sensitivity(_) => "sensitivity",
            Command::Fdcheck(_) => "fdcheck",
        }
    }

    fn opts(&self) -> &Opts {
        match self {
            Command::Forward(o)
            | Command::Generate(o)
            | Command::Identify(o)
            | Command::Lcurve(o)
            | Command::Sensitivity(o)
            | Command::Fdcheck(o) => o,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// JSON file with any of the options below; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, help = format!("Named preset: {}", presets::PRESET_NAMES.join(", ")))]
    pub preset: Option<String>,

    /// Inline model: erosion exponent `a`.
    #[arg(long)]
    pub a: Option<f64>,
    /// Inline model: slope attenuation exponent `k`.
    #[arg(long)]
    pub k: Option<f64>,
    /// Inline model: grid nodes.
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Inline model: domain is [-half_width, half_width].
    #[arg(long)]
    pub half_width: Option<f64>,
    /// Inline model: final time.
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Inline model: etch-rate shape (gaussian, gapped, zero).
    #[arg(long)]
    pub etch: Option<String>,

    /// Noise level(s) in percent of the maximum clean depth.
    #[arg(long, value_delimiter = ',')]
    pub noise: Option<Vec<f64>>,
    /// Regularization weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Base seed of the noise streams.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replications per study cell.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Number of measured trenches.
    #[arg(long)]
    pub count: Option<usize>,
    /// How several trenches enter the misfit (single, independent, superposed).
    #[arg(long)]
    pub combine: Option<String>,
    /// Starting estimate, by name or index.
    #[arg(long)]
    pub start: Option<String>,
    /// Measurement manifest written by `generate`.
    #[arg(long)]
    pub measurements: Option<PathBuf>,
    /// Run every cell of the preset's identification study.
    #[arg(long)]
    pub all: bool,

    /// Smallest weight of the L-curve sweep
    #[arg(long)]
    pub alpha_lo: Option<f64>,
    /// Largest weight of the L-curve sweep
    #[arg(long)]
    pub alpha_hi: Option<f64>,
    /// Number of log-spaced sweep points
    #[arg(long)]
    pub alpha_count: Option<usize>,
    /// Solve L-curve points independently instead of warm-starting.
    #[arg(long)]
    pub cold_start: bool,

    /// Relative finite-difference step (default 1e-5).
    #[arg(long)]
    pub h: Option<f64>,
    /// Optimizer iteration cap
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Also write every K-th time level of the forward run.
    #[arg(long)]
    pub snapshot_every: Option<usize>,

    /// Output directory (default: $AWJM_OUT/<command>-<preset>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Worker threads for parallel studies.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Fully merged options of one run; also the schema of `--config` files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub a: Option<f64>,
    pub k: Option<f64>,
    pub nodes: Option<usize>,
    pub half_width: Option<f64>,
    pub t_end: Option<f64>,
    pub etch: Option<String>,
    pub noise: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    pub count: Option<usize>,
    pub combine: Option<String>,
    pub start: Option<String>,
    pub measurements: Option<PathBuf>,
    pub all: Option<bool>,
    pub alpha_lo: Option<f64>,
    pub alpha_hi: Option<f64>,
    pub alpha_count: Option<usize>,
    pub cold_start: Option<bool>,
    pub h: Option<f64>,
    pub max_iters: Option<usize>,
    pub snapshot_every: Option<usize>,
    pub out: Option<PathBuf>,
    pub force: Option<bool>,
    pub threads: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    /// Config file (if any) overlaid with the command-line flags.
    pub fn from_opts(opts: &Opts) -> Result<Self> {
        let mut cfg = match &opts.config {
            Some(path) => io::read_json::<RunConfig>(path).map_err(|e| match e {
                Error::Io(_) => e,
                other => Error::Config(format!("{}: {other}", path.display())),
            })?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            preset: opts.preset.clone(),
            a: opts.a,
            k: opts.k,
            nodes: opts.nodes,
            half_width: opts.half_width,
            t_end: opts.t_end,
            etch: opts.etch.clone(),
            noise: opts.noise.clone(),
            alpha: opts.alpha,
            seed: opts.seed,
            seeds: opts.seeds,
            count: opts.count,
            combine: opts.combine.clone(),
            start: opts.start.clone(),
            measurements: opts.measurements.clone(),
            all: opts.all.then_some(true),
            alpha_lo: opts.alpha_lo,
            alpha_hi: opts.alpha_hi,
            alpha_count: opts.alpha_count,
            cold_start: opts.cold_start.then_some(true),
            h: opts.h,
            max_iters: opts.max_iters,
            snapshot_every: opts.snapshot_every,
            out: opts.out.clone(),
            force: opts.force.then_some(true),
            threads: opts.threads,
        };
        overlay!(cfg, flags; preset, a, k, nodes, half_width, t_end, etch, noise, alpha, seed, seeds,
            count, combine, start, measurements, all, alpha_lo, alpha_hi, alpha_count, cold_start, h,
            max_iters, snapshot_every, out, force, threads);
        Ok(cfg)
    }

    fn model_overrides(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.a.is_some() {
            v.push("a");
        }
        if self.k.is_some() {
            v.push("k");
        }
        if self.nodes.is_some() {
            v.push("nodes");
        }
        if self.half_width.is_some() {
            v.push("half_width");
        }
        if self.t_end.is_some() {
            v.push("t_end");
        }
        if self.etch.is_some() {
            v.push("etch");
        }
        v
    }

    fn flag(v: Option<bool>) -> bool {
        v.unwrap_or(false)
    }
}

fn default_preset(command: &str) -> &'static str {
    match command {
        "fdcheck" => "tiny",
        "sensitivity" => "table1-reduced",
        "lcurve" => "paper-3.3",
        _ => "paper-3.2",
    }
}

fn inline_preset(cfg: &RunConfig) -> Result<ExperimentPreset> {
    let mut p = presets::preset("paper-3.2")?;
    let half = cfg.half_width.unwrap_or(1.0);
    let grid = model::Grid1D::symmetric(half, cfg.nodes.unwrap_or(p.grid.n()))?;
    let etch: EtchPreset = cfg.etch.as_deref().unwrap_or("gaussian").parse()?;
    p.name = "inline".into();
    p.description = "model given on the command line".into();
    p.grid = grid;
    p.t_end = cfg.t_end.unwrap_or(p.t_end);
    p.truth_a = cfg.a.unwrap_or(p.truth_a);
    p.truth_k = cfg.k.unwrap_or(p.truth_k);
    p.truth_e = etch.shape(&grid);
    p.starts = vec![StartSpec {
        name: "zero".into(),
        a: p.truth_a,
        k: p.truth_k,
        e: EtchShape::Zero,
    }];
    Ok(p)
}

/// Preset named (or implied) by `cfg` with its run-level overrides applied.
pub fn resolve_preset(command: &str, cfg: &RunConfig) -> Result<ExperimentPreset> {
    let overrides = cfg.model_overrides();
    let mut p = match (&cfg.preset, overrides.is_empty()) {
        (Some(name), false) => {
            return Err(Error::Config(format!(
                "preset `{name}` fixes the model; drop it or drop the overrides: {}",
                overrides.join(", ")
            )))
        }
        (Some(name), true) => presets::preset(name)?,
        (None, true) => presets::preset(default_preset(command))?,
        (None, false) => inline_preset(cfg)?,
    };
    if let Some(levels) = &cfg.noise {
        if levels.is_empty() {
            return Err(Error::Config("--noise needs at least one level".into()));
        }
        p.noise_levels = levels.clone();
    }
    if let Some(alpha) = cfg.alpha {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {alpha}"
            )));
        }
        p.alpha = AlphaPolicy::Fixed { alpha };
        if !p.alpha_grid.is_empty() {
            p.alpha_grid = vec![alpha];
        }
    }
    if let Some(seed) = cfg.seed {
        p.seed = seed;
    }
    if let Some(reps) = cfg.seeds {
        p.replications = reps;
    }
    if let Some(m) = cfg.max_iters {
        p.opt.max_iters = m;
    }
    p.validate()?;
    p.opt.validate()?;
    Ok(p)
}

fn start_index(preset: &ExperimentPreset, start: Option<&str>) -> Result<usize> {
    let Some(s) = start else { return Ok(0) };
    if let Some(i) = preset.starts.iter().position(|st| st.name == s) {
        return Ok(i);
    }
    match s.parse::<usize>() {
        Ok(i) if i < preset.starts.len() => Ok(i),
        _ => Err(Error::Config(format!(
            "preset `{}` has no start `{s}`; available: {}",
            preset.name,
            preset
                .starts
                .iter()
                .map(|st| st.name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

fn single_level(preset: &ExperimentPreset) -> Result<f64> {
    match preset.noise_levels.as_slice() {
        [l] => Ok(*l),
        [first, ..] => {
            eprintln!(
                "note: using the first noise level ({first}%) of {}",
                preset.name
            );
            Ok(*first)
        }
        [] => Ok(0.0),
    }
}

fn combine_for(cfg: &RunConfig, count: usize) -> Result<Combine> {
    let combine = match &cfg.combine {
        Some(c) => c.parse()?,
        None if count == 1 => Combine::Single,
        None => Combine::Independent,
    };
    if (combine == Combine::Single) != (count == 1) {
        return Err(Error::Config(format!(
            "combine `{combine:?}` does not fit {count} measurement(s)"
        )));
    }
    Ok(combine)
}

/// Output directory for a run: `--out`, else `$AWJM_OUT/<command>-<preset>`,
/// else `awjm-out/<command>-<preset>`.
pub fn out_dir(command: &str, preset: &str, cfg: &RunConfig) -> PathBuf {
    if let Some(o) = &cfg.out {
        return o.clone();
    }
    let root = std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("awjm-out"));
    root.join(format!("{command}-{preset}"))
}

/// Collects output file names for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }
}

/// Runs one parsed command; returns the output directory.
pub fn run(command: &Command) -> Result<PathBuf> {
    let name = command.name();
    let cfg = RunConfig::from_opts(command.opts())?;
    let preset = resolve_preset(name, &cfg)?;
    let dir = out_dir(name, &preset.name, &cfg);
    io::prepare_out_dir(&dir, RunConfig::flag(cfg.force))?;
    let mut out = Outputs {
        dir: dir.clone(),
        files: Vec::new(),
    };

    let mut body = || -> Result<()> {
        match command {
            Command::Forward(_) => forward(&preset, &cfg, &mut out),
            Command::Generate(_) => generate(&preset, &cfg, &mut out),
            Command::Identify(_) => identify(&preset, &cfg, &mut out),
            Command::Lcurve(_) => lcurve(&preset, &cfg, &mut out),
            Command::Sensitivity(_) => sensitivity(&preset, &cfg, &mut out),
            Command::Fdcheck(_) => fdcheck(&preset, &cfg, &mut out),
        }
    };
    match cfg.threads {
        Some(0) => return Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))?
            .install(body)?,
        None => body()?,
    }

    let manifest = RunManifest {
        tool: "awjm".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: name.into(),
        preset: Some(preset.name.clone()),
        preset_version: Some(preset.version),
        seed: Some(preset.seed),
        config: serde_json::json!({ "run": cfg, "preset": preset }),
        outputs: out.files.clone(),
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(dir)
}

fn forward(preset: &ExperimentPreset, cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let problem = Problem::new(preset)?;
    io::write_profile(&out.path("profile.csv"), &problem.grid, &problem.clean)?;
    io::write_etch(
        &out.path("etch.csv"),
        &problem.grid,
        problem.truth.e().as_slice(),
    )?;
    if let Some(every) = cfg.snapshot_every {
        if every == 0 {
            return Err(Error::Config("--snapshot-every must be at least 1".into()));
        }
        let path = out.path("snapshots.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["step", "t", "x", "z"])?;
        let nodes = problem.grid.nodes();
        let dt = problem.scheme.dt();
        let last = problem.scheme.n_steps();
        let mut failure = None;
        model::forward_observed(
            &problem.truth,
            &problem.grid,
            &problem.scheme,
            &vec![0.0; problem.grid.n()],
            |m, z| {
                if failure.is_some() || (m % every != 0 && m != last) {
                    return;
                }
                for (x, zi) in nodes.iter().zip(z) {
                    let rec = [
                        m.to_string(),
                        fmt_f64(m as f64 * dt),
                        fmt_f64(*x),
                        fmt_f64(*zi),
                    ];
                    if let Err(e) = w.write_record(rec) {
                        failure = Some(e);
                        return;
                    }
                }
            },
        )?;
        if let Some(e) = failure {
            return Err(e.into());
        }
        w.flush()?;
    }
    let depth = problem.clean.iter().copied().fold(0.0, f64::max);
    println!(
        "{}: {} nodes, {} steps of {:.3e}, max depth {depth:.6e}",
        preset.name,
        problem.grid.n(),
        problem.scheme.n_steps(),
        problem.scheme.dt()
    );
    Ok(())
}

fn generate(preset: &ExperimentPreset, cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let problem = Problem::new(preset)?;
    let level = single_level(preset)?;
    let count = cfg.count.unwrap_or(1);
    if count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    let combine = combine_for(cfg, count)?;
    let meas = problem.measurement_set(preset, level, 0, count, combine)?;
    io::write_profile(&out.path("clean.csv"), &problem.grid, &problem.clean)?;
    io::write_etch(
        &out.path("etch.csv"),
        &problem.grid,
        problem.truth.e().as_slice(),
    )?;
    io::write_measurement_set(&out.dir, &meas, Some(problem.noise_spec(preset, level, 0)))?;
    for i in 0..count {
        out.files.push(format!("measurement_{i}.csv"));
    }
    out.files.push("measurements.json".into());
    println!("{}: {count} measurement(s) at {level}% noise", preset.name);
    Ok(())
}

#[derive(Serialize)]
struct IdentifySummary<'a> {
    alpha: f64,
    start: &'a str,
    noise: Option<f64>,
    measurements: Option<&'a Path>,
    iterations: usize,
    evaluations: usize,
    stop: crate::optimizer::StopReason,
    misfit: f64,
    regularization: f64,
    a: f64,
    k: f64,
    trench_error: f64,
    etch_error: f64,
    a_error: f64,
    k_error: f64,
}

fn identify(preset: &ExperimentPreset, cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    if RunConfig::flag(cfg.all) {
        return identify_study(preset, cfg, out);
    }
    let problem = Problem::new(preset)?;
    let start = start_index(preset, cfg.start.as_deref())?;
    let (meas, noise) = match &cfg.measurements {
        Some(path) => {
            let m = io::read_measurement_set(path)?;
            if m.grid().n() != problem.grid.n()
                || (m.grid().dx() - problem.grid.dx()).abs() > 1e-9 * problem.grid.dx()
            {
                return Err(Error::Inconsistent(format!(
                    "{} lives on a different grid than preset `{}`",
                    path.display(),
                    preset.name
                )));
            }
            let m = match &cfg.combine {
                Some(c) => m.with_combine(c.parse()?)?,
                None => m,
            };
            (m, None)
        }
        None => {
            let level = single_level(preset)?;
            let count = cfg.count.unwrap_or(1);
            if count == 0 {
                return Err(Error::Config("--count must be at least 1".into()));
            }
            let combine = combine_for(cfg, count)?;
            (
                problem.measurement_set(preset, level, 0, count, combine)?,
                Some(level),
            )
        }
    };
    let alpha = preset.default_alpha();
    let o = experiments::identify(preset, &problem, &meas, start, alpha)?;
    let recon = model::final_profile(
        &o.params,
        &problem.grid,
        &problem.scheme,
        &vec![0.0; problem.grid.n()],
    )?;
    io::write_json(&out.path("params.json"), &o.params)?;
    io::write_etch(
        &out.path("etch.csv"),
        &problem.grid,
        o.params.e().as_slice(),
    )?;
    io::write_profile(&out.path("profile.csv"), &problem.grid, &recon)?;
    io::write_trace(&out.path("trace.csv"), &o.trace)?;
    let fin = o.trace.final_cost();
    let summary = IdentifySummary {
        alpha,
        start: &preset.starts[start].name,
        noise,
        measurements: cfg.measurements.as_deref(),
        iterations: o.trace.iterations(),
        evaluations: o.trace.evaluations,
        stop: o.trace.stop,
        misfit: fin.misfit,
        regularization: fin.regularization,
        a: o.params.a(),
        k: o.params.k(),
        trench_error: o.trench_error,
        etch_error: o.etch_error,
        a_error: o.a_error,
        k_error: o.k_error,
    };
    io::write_json(&out.path("result.json"), &summary)?;
    println!(
        "{}: {:?} after {} iterations; a = {:.6}, k = {:.6}, trench error {:.3e}, etch-rate error {:.3e}",
        preset.name,
        o.trace.stop,
        o.trace.iterations(),
        o.params.a(),
        o.params.k(),
        o.trench_error,
        o.etch_error
    );
    Ok(())
}

fn identify_study(preset: &ExperimentPreset, cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let cells = if preset.active.a || preset.active.k {
        experiments::run_ak_study(preset, cfg.threads)?
    } else {
        experiments::run_e_study(preset, cfg.threads)?
    };
    write_cells(&out.path("study.csv"), &cells)?;
    io::write_json(&out.path("cells.json"), &cells)?;
    let failed = cells.iter().filter(|c| c.ok().is_none()).count();
    println!("{}: {} cells, {failed} failed", preset.name, cells.len());
    Ok(())
}

fn write_cells(path: &Path, cells: &[Cell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "variant",
        "noise",
        "alpha",
        "start",
        "replicate",
        "a",
        "k",
        "trench_error",
        "etch_error",
        "a_error",
        "k_error",
        "iterations",
        "stop",
        "failure",
    ])?;
    for c in cells {
        let head = [
            c.variant.name().to_string(),
            fmt_f64(c.noise),
            fmt_f64(c.alpha),
            c.start.clone(),
            c.replicate.to_string(),
        ];
        let tail: Vec<String> = match &c.outcome {
            Ok(o) => vec![
                fmt_f64(o.params.a()),
                fmt_f64(o.params.k()),
                fmt_f64(o.trench_error),
                fmt_f64(o.etch_error),
                fmt_f64(o.a_error),
                fmt_f64(o.k_error),
                o.trace.iterations().to_string(),
                format!("{:?}", o.trace.stop),
                String::new(),
            ],
            Err(msg) => {
                let mut v = vec![String::new(); 8];
                v.push(msg.clone());
                v
            }
        };
        w.write_record(head.iter().chain(&tail))?;
    }
    w.flush()?;
    Ok(())
}

fn lcurve(preset: &ExperimentPreset, cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let mut preset = preset.clone();
    preset.noise_levels = vec![single_level(&preset)?];
    let alphas = match (cfg.alpha_lo, cfg.alpha_hi) {
        (Some(lo), Some(hi)) => Some(regularization::log_spaced(
            lo,
            hi,
            cfg.alpha_count.unwrap_or(9),
        )?),
        (None, None) if cfg.alpha_count.is_none() => None,
        _ => {
            return Err(Error::Config(
                "--alpha-lo, --alpha-hi (and optionally --alpha-count) go together".into(),
            ))
        }
    };
    let warm = !RunConfig::flag(cfg.cold_start);
    let study = experiments::run_lcurve(&preset, alphas, warm)?;
    io::write_lcurve(&out.path("lcurve.csv"), &study)?;
    io::write_json(&out.path("lcurve.json"), &study)?;
    for f in &study.sweep.failures {
        eprintln!("alpha {:.3e} failed: {}", f.alpha, f.message);
    }
    match &study.corner {
        Some(c) => println!(
            "{}: corner at alpha = {:.3e}{}; smallest trench error at alpha = {:.3e}",
            preset.name,
            c.alpha,
            if c.degenerate {
                " (no clear corner, median weight)"
            } else {
                ""
            },
            study.best_alpha().unwrap_or(f64::NAN)
        ),
        None => {
            return Err(Error::TooFewPoints(study.sweep.points.len()));
        }
    }
    Ok(())
}

fn sensitivity(preset: &ExperimentPreset, cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let report = experiments::run_sensitivity(preset, None, cfg.threads)?;
    io::write_table1(&out.path("table1.csv"), &report)?;
    io::write_sensitivity_summary(&out.path("summary.csv"), &report)?;
    io::write_sensitivity_long(&out.path("sensitivity_long.csv"), &report)?;
    io::write_json(&out.path("report.json"), &report)?;
    print!("{:<14}", "trenches");
    for l in &report.noise_levels {
        print!("{:>11}", format!("{l}%"));
    }
    println!();
    for &v in &report.variants {
        print!("{:<14}", v.name());
        for &l in &report.noise_levels {
            print!("{:>11.3e}", report.summary(v, l).mean);
        }
        println!();
    }
    if report.failures() > 0 {
        eprintln!(
            "{} of {} runs failed; see sensitivity_long.csv",
            report.failures(),
            report.cells.len()
        );
    }
    Ok(())
}

fn fdcheck(preset: &ExperimentPreset, cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let problem = Problem::new(preset)?;
    let level = single_level(preset)?;
    let count = cfg.count.unwrap_or(1);
    let combine = combine_for(cfg, count.max(1))?;
    let meas = problem.measurement_set(preset, level, 0, count.max(1), combine)?;
    let start = preset.start(start_index(preset, cfg.start.as_deref())?)?;
    let spec = preset.cost_spec(&start, preset.default_alpha())?;
    let h = cfg.h.unwrap_or(1e-5);
    let components = Component::all(problem.grid.n());
    let report = adjoint::fd_check(
        &start,
        &meas,
        &spec,
        &problem.grid,
        &problem.scheme,
        h,
        &components,
    )?;
    io::write_fd_report(&out.path("fd.csv"), &report)?;
    println!(
        "{}: {} components, max relative error {:.3e}",
        preset.name,
        report.entries.len(),
        report.max_rel_error()
    );
    Ok(())
}

/// Exit code for a failed run.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => EXIT_IO,
        Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => EXIT_IO,
        Error::Json(e) if e.is_io() => EXIT_IO,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to standard error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli.command) {
        Ok(dir) => {
            eprintln!("wrote {}", dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> (String, RunConfig) {
        let cli = Cli::try_parse_from(std::iter::once("awjm").chain(args.iter().copied())).unwrap();
        let cfg = RunConfig::from_opts(cli.command.opts()).unwrap();
        (cli.command.name().to_string(), cfg)
    }

    #[test]
    fn ak_preset_with_run_overrides() {
        let (cmd, cfg) = parse(&[
            "identify",
            "--preset",
            "paper-3.2-ak",
            "--noise",
            "10",
            "--alpha",
            "0.1",
        ]);
        let p = resolve_preset(&cmd, &cfg).unwrap();
        assert_eq!(p.grid.n(), 200);
        assert!((p.grid.dx() - 0.01).abs() < 1e-4);
        assert!(p.scheme().unwrap().dt() <= p.grid.dx().powi(2) / 4.0);
        assert_eq!(p.noise_levels, vec![10.0]);
        assert_eq!(p.default_alpha(), 0.1);
    }

    #[test]
    fn trench_preset_starts_from_zero() {
        let (cmd, cfg) = parse(&["identify", "--preset", "paper-3.3", "--alpha", "1e-5"]);
        let p = resolve_preset(&cmd, &cfg).unwrap();
        assert_eq!(p.grid.n(), 228);
        assert_eq!(p.grid.x_min(), -0.55);
        assert!((p.grid.dx() - 0.0048).abs() < 1e-4);
        assert_eq!(p.start(0).unwrap().e().max(), 0.0);
        assert_eq!(p.default_alpha(), 1e-5);
    }

    #[test]
    fn preset_and_model_override_conflict() {
        let (cmd, cfg) = parse(&["forward", "--preset", "tiny", "--a", "1.0"]);
        assert!(matches!(resolve_preset(&cmd, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn inline_model_without_preset() {
        let (cmd, cfg) = parse(&["forward", "--a", "1.0", "--nodes", "41", "--etch", "gapped"]);
        let p = resolve_preset(&cmd, &cfg).unwrap();
        assert_eq!(p.name, "inline");
        assert_eq!(p.grid.n(), 41);
        assert_eq!(p.truth_a, 1.0);
    }

    #[test]
    fn unknown_flag_and_empty_argv_fail() {
        assert!(Cli::try_parse_from(["awjm", "forward", "--bogus"]).is_err());
        let e = Cli::try_parse_from(["awjm"]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn config_file_rejects_unknown_keys_and_yields_to_flags() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"preset": "tiny", "colour": 3}"#).unwrap();
        let opts = Opts {
            config: Some(bad),
            ..Opts::default()
        };
        assert!(matches!(RunConfig::from_opts(&opts), Err(Error::Config(_))));

        let good = dir.path().join("good.json");
        std::fs::write(&good, r#"{"preset": "tiny", "alpha": 0.5, "seed": 9}"#).unwrap();
        let opts = Opts {
            config: Some(good),
            seed: Some(11),
            ..Opts::default()
        };
        let cfg = RunConfig::from_opts(&opts).unwrap();
        assert_eq!(cfg.preset.as_deref(), Some("tiny"));
        assert_eq!(cfg.alpha, Some(0.5));
        assert_eq!(cfg.seed, Some(11));
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::UnknownPreset("x".into())), EXIT_CONFIG);
        assert_eq!(
            exit_code(&Error::BlowUp { step: 1, time: 0.1 }),
            EXIT_NUMERICAL
        );
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), EXIT_IO);
    }

    #[test]
    fn start_lookup_by_name_or_index() {
        let p = presets::preset("paper-3.2-e").unwrap();
        assert_eq!(start_index(&p, Some("poor")).unwrap(), 1);
        assert_eq!(start_index(&p, Some("0")).unwrap(), 0);
        assert!(start_index(&p, Some("bad")).is_err());
    }
}

//! Command-line front end: JSON experiment configs, bundled presets and the
//! artifact writers behind each subcommand.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cusp_metric::{build_cusp, curvature_profile, load_profile, save_profile, CuspOptions, CuspProfile};
use crate::dynamics::{
    build_calibrated_cusp, connect, parabolic_orbit_stats, unit_translation, unstable_jacobian, normalized_u,
    GeodesicState, GluedSurface, OrbitStats, WarpedMetric, Warping, DEFAULT_WARMUP,
};
use crate::error::Error;
use crate::groups::{
    enumerate_ball_parallel, power_subgroup, read_orbit_cache, standard_base_point, standard_example,
    write_orbit_cache, Ball, GeneratorSet, OrbitElement, Word,
};
use crate::hyperbolic::{dist, BoundaryPoint, Isometry, Point};
use crate::potentials::{build_slow_potential, check_fs_membership, PotentialSpec, DEFAULT_DEPTH};
use crate::pressure::{
    analyze, derivative_diagnostics, t_grid, slow_potential_sweep, geometric_experiment, PressureCurve,
    PressureProblem,
};
use crate::series::{attach_weights, count_samples, critical_exponent, write_counts_csv, ExponentEstimate, WindowOptions};

pub const SCHEMA_VERSION: u32 = 1;

/// Bundled presets, addressable by name wherever a config path is expected.
pub const PRESETS: &[(&str, &str)] = &[
    ("parabolic-unit", include_str!("../presets/parabolic-unit.json")),
    ("cyclic-hyperbolic", include_str!("../presets/cyclic-hyperbolic.json")),
    ("schottky", include_str!("../presets/schottky.json")),
    ("thrice-punctured-sphere", include_str!("../presets/thrice-punctured-sphere.json")),
    ("warped-cusp", include_str!("../presets/warped-cusp.json")),
    ("glued-geometric", include_str!("../presets/glued-geometric.json")),
];

#[derive(Debug, Parser)]
#[command(name = "cusp-pressure", version, about = "Critical exponents and pressure curves for cusped surfaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Config file, or the name of a bundled preset.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<String>,
    /// Output directory (overrides the config).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads (overrides the config).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// Radius budget R (overrides the config).
    #[arg(long, global = true, value_name = "R")]
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Counting data and critical exponent of the orbit.
    Critexp,
    /// Pressure curve t ↦ P(tF) with transition analysis.
    PressureCurve,
    /// Build the modified cusp profile.
    BuildCusp,
    /// Check the pinching properties of a profile.
    VerifyPinching,
    /// Distances and heights along the parabolic orbit of the warped cusp.
    OrbitStats,
    /// Construct the slowly decaying potential.
    SlowPotential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GroupSpec {
    /// `p: z ↦ z + 6` and `h = [[2, −3], [−1, 2]]`.
    #[default]
    Standard,
    /// The cyclic parabolic group `z ↦ z + translation`.
    Parabolic { translation: f64 },
    /// Generator matrices `[a, b, c, d]`, the parabolic first.
    Schottky { parabolic: [f64; 4], hyperbolics: Vec<[f64; 4]> },
    /// A cyclic hyperbolic group; its orbit is enumerated in closed form.
    Cyclic { hyperbolic: [f64; 4] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TGrid {
    Range { start: f64, stop: f64, step: f64 },
    List(Vec<f64>),
}

impl Default for TGrid {
    fn default() -> Self {
        TGrid::Range { start: -1.5, stop: 0.5, step: 0.05 }
    }
}

impl TGrid {
    pub fn values(&self) -> Vec<f64> {
        match self {
            TGrid::Range { start, stop, step } => t_grid(*start, *stop, *step),
            TGrid::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Absolute tolerance of line integrals of potentials.
    pub quadrature: f64,
    /// Pressure fitting window: maximal RMS residual, minimal width, radii sampled.
    pub window_rms: f64,
    pub window_min_width: f64,
    pub window_samples: usize,
    /// Number of radii in the counting data.
    pub count_samples: usize,
    /// Refinement factor of the profile property checks.
    pub refine: usize,
    /// Grid size of the curvature scan.
    pub curvature_samples: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        let w = WindowOptions::default();
        Tolerances {
            quadrature: 1e-8,
            window_rms: w.max_rms,
            window_min_width: w.min_width,
            window_samples: w.samples,
            count_samples: 100,
            refine: 4,
            curvature_samples: 100_000,
        }
    }
}

impl Tolerances {
    fn window(&self) -> WindowOptions {
        WindowOptions {
            window: None,
            max_rms: self.window_rms,
            min_width: self.window_min_width,
            samples: self.window_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MetricSpec {
    #[default]
    Hyperbolic,
    /// The modified cusp, loaded from `profile` or built from `cusp`.
    Warped {
        #[serde(default)]
        profile: Option<PathBuf>,
        #[serde(default)]
        cusp: CuspOptions,
        /// Calibrate the comparison constants from the parabolic orbit first.
        #[serde(default)]
        calibrate: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PotentialChoice {
    #[default]
    Zero,
    /// The slowly decaying cusp potential.
    Slow {
        #[serde(default)]
        delta_p: Option<f64>,
        #[serde(default = "default_depth")]
        depth: usize,
        /// Covers Γ_n to sweep; the configured powers are used when absent.
        #[serde(default)]
        sweep: Option<Vec<u32>>,
    },
    /// A PotentialSpec JSON document.
    Profile { path: PathBuf },
    /// The geometric potential of the warped metric.
    Geometric,
}

fn default_depth() -> usize {
    DEFAULT_DEPTH
}

fn default_powers() -> [u32; 2] {
    [1, 1]
}

fn default_radius() -> f64 {
    14.0
}

fn default_n_max() -> u64 {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub group: GroupSpec,
    #[serde(default)]
    pub base_point: Option<[f64; 2]>,
    /// Exponents (n, m) of the finite-index subgroup Γ_{n,m}.
    #[serde(default = "default_powers")]
    pub powers: [u32; 2],
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default)]
    pub t_grid: TGrid,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub potential: PotentialChoice,
    /// Largest n in the parabolic orbit statistics.
    #[serde(default = "default_n_max")]
    pub orbit_stats_n_max: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Orbit cache to reuse (and to write when missing).
    #[serde(default)]
    pub orbit_cache: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    /// The artifacts were written but some invariant check failed.
    #[error("check failed: {0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Failed(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(m: impl Into<String>) -> CliError {
    CliError::Config(m.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    /// Resolve relative file references against `dir` and check invariants.
    pub fn resolve(mut self, dir: &Path) -> CliResult<Self> {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let MetricSpec::Warped { profile: Some(p), .. } = &mut self.metric {
            fix(p);
        }
        if let PotentialChoice::Profile { path } = &mut self.potential {
            fix(path);
        }
        if let Some(p) = &mut self.orbit_cache {
            fix(p);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(config_err(format!("radius must be positive, got {}", self.radius)));
        }
        if self.powers.contains(&0) {
            return Err(config_err("powers must be positive"));
        }
        if self.workers == Some(0) {
            return Err(config_err("workers must be positive"));
        }
        if let TGrid::Range { start, stop, step } = self.t_grid {
            if !(step > 0.0 && start <= stop && start.is_finite() && stop.is_finite()) {
                return Err(config_err("t_grid range needs start <= stop and step > 0"));
            }
        }
        let ts = self.t_grid.values();
        if ts.is_empty() || ts.iter().any(|t| !t.is_finite()) || ts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err("t_grid must be non-empty, finite and strictly increasing"));
        }
        if let Some([x, y]) = self.base_point {
            if !(y > 0.0 && x.is_finite() && y.is_finite()) {
                return Err(config_err("base_point must lie in the upper half-plane"));
            }
        }
        let must_exist = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(config_err(format!("{what} {} does not exist", p.display())))
            }
        };
        if let MetricSpec::Warped { profile: Some(p), .. } = &self.metric {
            must_exist(p, "profile")?;
        }
        if let PotentialChoice::Profile { path } = &self.potential {
            must_exist(path, "potential")?;
        }
        if let PotentialChoice::Slow { sweep: Some(ns), .. } = &self.potential {
            if ns.is_empty() || ns.contains(&0) {
                return Err(config_err("sweep must list positive powers"));
            }
        }
        Ok(())
    }

    fn window(&self) -> WindowOptions {
        self.tolerances.window()
    }
}

/// Load `arg` as a file path, falling back to a bundled preset name.
pub fn load_config(arg: &str) -> CliResult<ExperimentConfig> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = ExperimentConfig::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => config_err(format!("{}: {m}", path.display())),
            e => e,
        })?;
        return cfg.resolve(&dir);
    }
    match preset(arg) {
        Some(text) => ExperimentConfig::from_json(text)?.resolve(Path::new(".")),
        None => Err(config_err(format!("{arg}: no such file or preset"))),
    }
}

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// One line per written artifact, plus the command's headline.
#[derive(Debug, Clone, Default)]
pub struct Summary {
    pub headline: String,
    pub files: Vec<PathBuf>,
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    workers: usize,
    files: Vec<PathBuf>,
}

impl Context {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.files.push(p.clone());
        p
    }

    fn create(&mut self, name: &str) -> CliResult<BufWriter<fs::File>> {
        let p = self.path(name);
        Ok(BufWriter::new(fs::File::create(&p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut f = self.create(name)?;
        serde_json::to_writer_pretty(&mut f, value).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }

    fn generators(&self) -> CliResult<GeneratorSet> {
        let m = |v: &[f64; 4]| Isometry::new(v[0], v[1], v[2], v[3]).map_err(CliError::from);
        match &self.cfg.group {
            GroupSpec::Standard => Ok(standard_example()),
            GroupSpec::Parabolic { translation } => Ok(GeneratorSet::new(Isometry::translation(*translation), vec![])?),
            GroupSpec::Schottky { parabolic, hyperbolics } => {
                let hs = hyperbolics.iter().map(m).collect::<CliResult<Vec<_>>>()?;
                let gens = GeneratorSet::new(m(parabolic)?, hs)?;
                if !gens.verified {
                    return Err(config_err("generators fail the ping-pong check"));
                }
                Ok(gens)
            }
            GroupSpec::Cyclic { .. } => Err(config_err("a cyclic hyperbolic group has no cusp; use critexp")),
        }
    }

    fn base_point(&self) -> CliResult<Point> {
        if let Some([x, y]) = self.cfg.base_point {
            return Ok(Point::new(x, y)?);
        }
        Ok(match &self.cfg.group {
            GroupSpec::Standard => standard_base_point(),
            GroupSpec::Cyclic { hyperbolic } => {
                let h = Isometry::new(hyperbolic[0], hyperbolic[1], hyperbolic[2], hyperbolic[3])?;
                axis_point(&h)?
            }
            _ => Point::i(),
        })
    }

    fn group_id(&self) -> String {
        match &self.cfg.group {
            GroupSpec::Standard => "standard".into(),
            GroupSpec::Parabolic { translation } => format!("parabolic-{translation}"),
            GroupSpec::Schottky { .. } => "schottky".into(),
            GroupSpec::Cyclic { .. } => "cyclic".into(),
        }
    }

    fn profile(&self) -> CliResult<CuspProfile> {
        match &self.cfg.metric {
            MetricSpec::Warped { profile: Some(p), .. } => Ok(load_profile(p)?),
            MetricSpec::Warped { cusp, calibrate: true, .. } => {
                Ok(build_calibrated_cusp(cusp, self.cfg.orbit_stats_n_max)?.0.profile)
            }
            MetricSpec::Warped { cusp, .. } => Ok(build_cusp(cusp)?),
            MetricSpec::Hyperbolic => Ok(build_cusp(&CuspOptions::default())?),
        }
    }

    fn warped(&self) -> CliResult<Option<WarpedMetric>> {
        match self.cfg.metric {
            MetricSpec::Hyperbolic => Ok(None),
            MetricSpec::Warped { .. } => Ok(Some(WarpedMetric::new(self.profile()?))),
        }
    }

    /// The orbit ball of `gens` at the configured radius, via the cache when
    /// one is configured and covers the radius.
    fn ball(&mut self, gens: &GeneratorSet, o: Point) -> CliResult<Ball> {
        let radius = self.cfg.radius;
        if let Some(cache) = self.cfg.orbit_cache.clone() {
            if cache.is_file() {
                let f = fs::File::open(&cache)?;
                let ball = read_orbit_cache(BufReader::new(f), gens)?;
                if ball.radius >= radius && ball.base == o {
                    return Ok(ball.restrict(radius));
                }
            }
        }
        let ball = enumerate_ball_parallel(gens, o, radius, self.workers)?;
        if ball.truncated {
            return Err(CliError::Runtime("orbit enumeration exceeded the node budget".into()));
        }
        let target = match self.cfg.orbit_cache.clone() {
            Some(p) => p,
            None => self.out.join("orbit.cache"),
        };
        let mut f = BufWriter::new(fs::File::create(&target)?);
        write_orbit_cache(&mut f, gens, &ball)?;
        f.flush()?;
        self.files.push(target);
        Ok(ball)
    }
}

/// The top of the axis of a hyperbolic `h`.
fn axis_point(h: &Isometry) -> CliResult<Point> {
    let ends: Vec<BoundaryPoint> = h.fixed_points();
    let finite: Vec<f64> = ends
        .iter()
        .filter_map(|p| match p {
            BoundaryPoint::Finite(x) => Some(*x),
            BoundaryPoint::Infinity => None,
        })
        .collect();
    match (ends.len(), finite.as_slice()) {
        (2, [a, b]) => Ok(Point::new(0.5 * (a + b), 0.5 * (a - b).abs())?),
        (2, [a]) => Ok(Point::new(*a, 1.0)?),
        _ => Err(config_err("cyclic group generator is not hyperbolic")),
    }
}

/// The orbit of a cyclic hyperbolic group up to `radius`.
pub fn cyclic_orbit(h: &Isometry, o: Point, radius: f64) -> CliResult<Vec<OrbitElement>> {
    let ell = h.translation_length();
    if !(ell > 1e-9) {
        return Err(config_err("cyclic group generator is not hyperbolic"));
    }
    // d(o, hᵏo) ≥ |k|ℓ − 2 d(o, axis)
    let slack = 2.0 * dist(o, axis_point(h)?);
    let k_max = ((radius + slack) / ell).ceil() as i64 + 1;
    let mut out = Vec::new();
    for k in -k_max..=k_max {
        let g = h.pow(k);
        let d = if k == 0 { 0.0 } else { dist(o, g.apply(o)?) };
        if d <= radius {
            let word = if k == 0 { Word::identity() } else { Word::single(0, k) };
            out.push(OrbitElement { word, matrix: g, displacement: d, weight_cache: None });
        }
    }
    out.sort_by(|a, b| a.displacement.total_cmp(&b.displacement).then_with(|| a.word.cmp(&b.word)));
    Ok(out)
}

/// Parse `args`, run the command and map failures to exit codes.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(s) => {
            println!("{}", s.headline);
            for f in &s.files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<Summary> {
    let arg = cli.config.as_deref().ok_or_else(|| config_err("--config is required"))?;
    let mut cfg = load_config(arg)?;
    if let Some(r) = cli.radius {
        cfg.radius = r;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    cfg.validate()?;
    let out = cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let workers = cfg.workers.unwrap_or(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut ctx = Context { cfg, out, workers, files: Vec::new() };
    let headline = pool.install(|| match cli.command {
        Command::Critexp => cmd_critexp(&mut ctx),
        Command::PressureCurve => cmd_pressure_curve(&mut ctx),
        Command::BuildCusp => cmd_build_cusp(&mut ctx),
        Command::VerifyPinching => cmd_verify_pinching(&mut ctx),
        Command::OrbitStats => cmd_orbit_stats(&mut ctx),
        Command::SlowPotential => cmd_slow_potential(&mut ctx),
    })?;
    Ok(Summary { headline, files: ctx.files })
}

#[derive(Debug, Serialize)]
struct CritexpReport {
    group: String,
    metric: &'static str,
    radius: f64,
    orbit_size: usize,
    estimate: ExponentEstimate,
    /// Exponent of the parabolic sub-orbit, when the group has hyperbolics.
    parabolic: Option<ExponentEstimate>,
    /// (δ_Γ − δ_P) in combined standard errors.
    gap_sigmas: Option<f64>,
}

fn write_counts(ctx: &mut Context, counts: &[(f64, usize)]) -> CliResult<()> {
    let mut f = ctx.create("counts.csv")?;
    writeln!(f, "R,N")?;
    for (r, n) in counts {
        writeln!(f, "{r:.12},{n}")?;
    }
    f.flush()?;
    Ok(())
}

fn cmd_critexp(ctx: &mut Context) -> CliResult<String> {
    let radius = ctx.cfg.radius;
    let samples = ctx.cfg.tolerances.count_samples;
    let radii: Vec<f64> = (1..=samples).map(|i| radius * i as f64 / samples as f64).collect();
    let metric_name = match ctx.cfg.metric {
        MetricSpec::Hyperbolic => "hyperbolic",
        MetricSpec::Warped { .. } => "warped",
    };
    let (estimate, parabolic, orbit_size) = if let GroupSpec::Cyclic { hyperbolic } = &ctx.cfg.group {
        let h = Isometry::new(hyperbolic[0], hyperbolic[1], hyperbolic[2], hyperbolic[3])?;
        let orbit = cyclic_orbit(&h, ctx.base_point()?, radius)?;
        let mut f = ctx.create("counts.csv")?;
        write_counts_csv(&mut f, &orbit, &radii, &[0.5, 1.0])?;
        f.flush()?;
        (critical_exponent(&count_samples(&orbit, 0.0, radius, samples))?, None, orbit.len())
    } else {
        let gens = ctx.generators()?;
        let o = ctx.base_point()?;
        match ctx.warped()? {
            None => {
                let ball = ctx.ball(&gens, o)?;
                let mut f = ctx.create("counts.csv")?;
                write_counts_csv(&mut f, &ball.elements, &radii, &[0.5, 1.0])?;
                f.flush()?;
                let est = critical_exponent(&count_samples(&ball.elements, 0.0, radius, samples))?;
                let par = if gens.hyperbolics.is_empty() {
                    None
                } else {
                    let sub = ball.parabolic_suborbit();
                    Some(critical_exponent(&count_samples(&sub, 0.0, radius, samples))?)
                };
                (est, par, ball.elements.len())
            }
            Some(metric) if gens.hyperbolics.is_empty() => {
                let stats = parabolic_orbit_stats(&metric, ctx.cfg.orbit_stats_n_max)?;
                let counts = stats.counts(samples);
                write_counts(ctx, &counts)?;
                (critical_exponent(&counts)?, None, 2 * stats.rows.len() + 1)
            }
            Some(metric) => {
                let surface = GluedSurface::new(metric, gens, o, radius)?;
                let glued = surface.orbit(radius)?;
                let orbit: Vec<OrbitElement> = glued.iter().map(|g| g.element.clone()).collect();
                let sub: Vec<OrbitElement> = orbit.iter().filter(|e| e.word.uses_only(0)).cloned().collect();
                let mut f = ctx.create("counts.csv")?;
                write_counts_csv(&mut f, &orbit, &radii, &[0.5, 1.0])?;
                f.flush()?;
                let est = critical_exponent(&count_samples(&orbit, 0.0, radius, samples))?;
                let par = critical_exponent(&count_samples(&sub, 0.0, radius, samples))?;
                (est, Some(par), orbit.len())
            }
        }
    };
    let gap_sigmas = parabolic.map(|p| (estimate.value - p.value) / estimate.stderr.hypot(p.stderr).max(1e-300));
    let report = CritexpReport {
        group: ctx.group_id(),
        metric: metric_name,
        radius,
        orbit_size,
        estimate,
        parabolic,
        gap_sigmas,
    };
    ctx.write_json("critexp.json", &report)?;
    let mut line = format!("critical exponent {:.4} ± {:.4} ({} orbit points)", estimate.value, estimate.stderr, orbit_size);
    if let (Some(p), Some(g)) = (parabolic, gap_sigmas) {
        line += &format!("; parabolic {:.4} ± {:.4}; gap {:.1}σ", p.value, p.stderr, g);
    }
    Ok(line)
}

fn write_curve(ctx: &mut Context, stem: &str, curve: &PressureCurve, title: &str) -> CliResult<()> {
    let mut f = ctx.create(&format!("{stem}.csv"))?;
    curve.write_csv(&mut f)?;
    f.flush()?;
    let mut f = ctx.create(&format!("{stem}.svg"))?;
    curve.write_svg(&mut f, title)?;
    f.flush()?;
    Ok(())
}

fn slow_spec(ctx: &Context, gens: &GeneratorSet, o: Point) -> CliResult<(PotentialSpec, crate::potentials::ConstructionLog)> {
    let (delta_p, depth) = match &ctx.cfg.potential {
        PotentialChoice::Slow { delta_p, depth, .. } => (delta_p.unwrap_or(0.5), *depth),
        _ => (0.5, DEFAULT_DEPTH),
    };
    Ok(build_slow_potential(gens, o, delta_p, depth)?)
}

fn cmd_pressure_curve(ctx: &mut Context) -> CliResult<String> {
    let gens = ctx.generators()?;
    let o = ctx.base_point()?;
    let grid = ctx.cfg.t_grid.values();
    let radius = ctx.cfg.radius;
    let window = ctx.cfg.window();
    let [n, m] = ctx.cfg.powers;
    if let PotentialChoice::Geometric = ctx.cfg.potential {
        let metric = ctx.warped()?.ok_or_else(|| config_err("the geometric potential needs a warped metric"))?;
        let surface = GluedSurface::new(metric, gens, o, radius)?;
        let rep = geometric_experiment(&surface, n, m, &grid, radius, window)?;
        write_curve(ctx, "pressure", &rep.normalized, &format!("P(tF), F = -U, glued cover ({n}, {m})"))?;
        write_curve(ctx, "geometric", &rep.geometric, &format!("P(tF^su), glued cover ({n}, {m})"))?;
        write_normalized_u(ctx, &surface.metric)?;
        ctx.write_json("transition.json", &rep)?;
        let bad_sandwich = rep.sandwich.iter().filter(|r| !r.passed).count();
        return Ok(format!(
            "{}; sandwich {}/{} rows pass; positivity {}",
            describe(&rep.report),
            rep.sandwich.len() - bad_sandwich,
            rep.sandwich.len(),
            if rep.positivity_holds { "holds" } else { "fails" }
        ));
    }
    if ctx.warped()?.is_some() {
        return Err(config_err("this potential is only supported on the hyperbolic metric"));
    }
    let (spec, id) = match &ctx.cfg.potential {
        PotentialChoice::Zero => (PotentialSpec::constant(0.0), "zero".to_string()),
        PotentialChoice::Profile { path } => {
            let text = fs::read_to_string(path)?;
            let spec = PotentialSpec::from_json(&text)?;
            spec.validate().map_err(|e| config_err(e.to_string()))?;
            (spec, path.file_stem().map_or("profile".into(), |s| s.to_string_lossy().into_owned()))
        }
        PotentialChoice::Slow { sweep: Some(ns), .. } => {
            let ns = ns.clone();
            let (spec, _) = slow_spec(ctx, &gens, o)?;
            let sweep = slow_potential_sweep(&gens, o, &spec, &ns, &grid, radius, window)?;
            for e in &sweep {
                write_curve(ctx, &format!("pressure_n{}", e.n), &e.curve, &format!("P(tF), slow potential, cover n = {}", e.n))?;
            }
            ctx.write_json("transition.json", &sweep)?;
            let lines: Vec<String> = sweep.iter().map(|e| format!("n = {}: {}", e.n, describe(&e.report))).collect();
            return Ok(lines.join("\n"));
        }
        PotentialChoice::Slow { .. } => (slow_spec(ctx, &gens, o)?.0, "slow".to_string()),
        PotentialChoice::Geometric => unreachable!(),
    };
    let cover = power_subgroup(&gens, n, m)?;
    let mut orbit = ctx.ball(&cover, o)?.elements;
    attach_weights(&mut orbit, &spec, o, ctx.cfg.tolerances.quadrature)?;
    let parabolic: Vec<OrbitElement> = orbit.iter().filter(|e| e.word.uses_only(0)).cloned().collect();
    let problem = PressureProblem { orbit: &orbit, parabolic: &parabolic, radius, window };
    let group_id = format!("{}-{n}-{m}", ctx.group_id());
    let curve = problem.curve(&grid, &id, &group_id)?;
    let report = analyze(&problem, &curve)?;
    let sup = spec.profile.sup_abs().max(spec.extension_value.abs());
    let derivatives = derivative_diagnostics(&curve, report.t_f.map(|e| e.value), Some(sup));
    write_curve(ctx, "pressure", &curve, &format!("P(tF), {id} potential, {group_id}"))?;
    #[derive(Serialize)]
    struct Out<'a> {
        orbit_size: usize,
        report: &'a crate::pressure::TransitionReport,
        derivatives: crate::pressure::DerivativeReport,
    }
    ctx.write_json("transition.json", &Out { orbit_size: orbit.len(), report: &report, derivatives })?;
    Ok(describe(&report))
}

fn describe(r: &crate::pressure::TransitionReport) -> String {
    let mut s = format!("transition {:?}", r.kind);
    if let Some(t) = &r.t_f {
        s += &format!(", t_F = {:.4} ± {:.4}", t.value, t.half_width);
    }
    for n in &r.notes {
        s += &format!("; {n}");
    }
    s
}

/// U = F^su + 1 along the geodesic from o to p^k o with k = 10.
fn write_normalized_u(ctx: &mut Context, metric: &WarpedMetric) -> CliResult<()> {
    let tau = unit_translation(metric)?;
    let s0 = metric.seam();
    let c = connect(metric, (0.0, s0), (10.0 * tau, s0))?;
    let st = GeodesicState::with_direction(metric, 0.0, s0, c.direction)?;
    let samples = unstable_jacobian(metric, &st, DEFAULT_WARMUP, c.distance, None)?;
    let mut f = ctx.create("normalized_u.csv")?;
    writeln!(f, "tau,height,U")?;
    for (s, (tau, u)) in samples.iter().zip(normalized_u(&samples)) {
        writeln!(f, "{tau:.12},{:.12},{u:.12}", s.height)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ProfileReport {
    options: CuspOptions,
    sequence_checks: Vec<crate::cusp_metric::PropertyCheck>,
    properties: Vec<crate::cusp_metric::PropertyCheck>,
    curvature: crate::cusp_metric::CurvatureReport,
    band: (f64, f64),
    in_band: bool,
    tail_within: f64,
    tail_ok: bool,
    passed: bool,
}

fn profile_report(profile: &CuspProfile, tol: &Tolerances) -> ProfileReport {
    const BAND: (f64, f64) = (-2.0 - 1e-9, -1.0 / 3.0 + 1e-9);
    const TAIL: f64 = 0.05;
    let sequence_checks = profile.pack.check();
    let properties = profile.verify_properties(tol.refine);
    let curvature = curvature_profile(profile, tol.curvature_samples);
    let in_band = curvature.in_band(BAND.0, BAND.1);
    let tail_ok = (curvature.k_tail + 1.0).abs() <= TAIL;
    let passed = in_band
        && tail_ok
        && sequence_checks.iter().all(|c| c.passed)
        && properties.iter().all(|c| c.passed);
    ProfileReport {
        options: profile.options.clone(),
        sequence_checks,
        properties,
        curvature,
        band: BAND,
        in_band,
        tail_within: TAIL,
        tail_ok,
        passed,
    }
}

fn cmd_build_cusp(ctx: &mut Context) -> CliResult<String> {
    let profile = match &ctx.cfg.metric {
        MetricSpec::Warped { profile: Some(_), .. } => {
            return Err(config_err("build-cusp builds a profile; drop metric.profile"));
        }
        MetricSpec::Warped { cusp, calibrate: true, .. } => {
            let (metric, stats) = build_calibrated_cusp(cusp, ctx.cfg.orbit_stats_n_max)?;
            write_stats(ctx, &stats)?;
            metric.profile
        }
        _ => ctx.profile()?,
    };
    let path = ctx.path("profile.csv");
    save_profile(&profile, &path)?;
    let report = profile_report(&profile, &ctx.cfg.tolerances);
    ctx.write_json("build_report.json", &report)?;
    if !report.passed {
        return Err(CliError::Failed("built profile fails its checks (see build_report.json)".into()));
    }
    Ok(format!(
        "profile with nodes {}..={} built; K in [{:.4}, {:.4}], K(t_max) = {:.4}",
        profile.pack.first_node,
        profile.pack.last_node(),
        report.curvature.k_min,
        report.curvature.k_max,
        report.curvature.k_tail
    ))
}

fn cmd_verify_pinching(ctx: &mut Context) -> CliResult<String> {
    let path = match &ctx.cfg.metric {
        MetricSpec::Warped { profile: Some(p), .. } => p.clone(),
        _ => ctx.out.join("profile.csv"),
    };
    if !path.is_file() {
        return Err(config_err(format!("profile {} does not exist; run build-cusp first", path.display())));
    }
    let profile = load_profile(&path)?;
    let report = profile_report(&profile, &ctx.cfg.tolerances);
    ctx.write_json("pinching.json", &report)?;
    let failed: Vec<&str> = report
        .sequence_checks
        .iter()
        .chain(&report.properties)
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .chain((!report.in_band).then_some("curvature band"))
        .chain((!report.tail_ok).then_some("curvature tail"))
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Failed(format!("pinching checks failed: {}", failed.join(", "))));
    }
    Ok(format!(
        "all pinching checks pass; K in [{:.4}, {:.4}], K(t_max) = {:.4}",
        report.curvature.k_min, report.curvature.k_max, report.curvature.k_tail
    ))
}

/// Residuals are considered bounded when their fitted slope against ln n
/// past this index stays within `TREND_TOLERANCE`.
pub const TREND_N_MIN: u64 = 5;
pub const TREND_TOLERANCE: f64 = 0.01;

#[derive(Debug, Serialize)]
struct StatsReport<'a> {
    translation: f64,
    n_max: u64,
    c_hat: f64,
    d_hat: f64,
    trend_n_min: u64,
    slope_residual_d: f64,
    slope_residual_t: f64,
    max_residual_d: f64,
    max_residual_t: f64,
    no_trend: bool,
    within_constants: bool,
    rows: &'a [crate::dynamics::OrbitRow],
}

fn write_stats(ctx: &mut Context, stats: &OrbitStats) -> CliResult<bool> {
    let mut f = ctx.create("orbit_stats.csv")?;
    stats.write_csv(&mut f)?;
    f.flush()?;
    let (sd, st) = stats.residual_trends(TREND_N_MIN);
    let max_d = stats.rows.iter().map(|r| r.residual_d.abs()).fold(0.0, f64::max);
    let max_t = stats.rows.iter().map(|r| r.residual_t.abs()).fold(0.0, f64::max);
    let no_trend = sd.abs() <= TREND_TOLERANCE && st.abs() <= TREND_TOLERANCE;
    let within_constants = max_d <= stats.c_hat && max_t <= stats.d_hat;
    ctx.write_json(
        "orbit_stats.json",
        &StatsReport {
            translation: stats.translation,
            n_max: stats.rows.len() as u64,
            c_hat: stats.c_hat,
            d_hat: stats.d_hat,
            trend_n_min: TREND_N_MIN,
            slope_residual_d: sd,
            slope_residual_t: st,
            max_residual_d: max_d,
            max_residual_t: max_t,
            no_trend,
            within_constants,
            rows: &stats.rows,
        },
    )?;
    Ok(no_trend && within_constants)
}

fn cmd_orbit_stats(ctx: &mut Context) -> CliResult<String> {
    let metric = match ctx.warped()? {
        Some(m) => m,
        None => WarpedMetric::new(ctx.profile()?),
    };
    let stats = parabolic_orbit_stats(&metric, ctx.cfg.orbit_stats_n_max)?;
    let ok = write_stats(ctx, &stats)?;
    let (sd, st) = stats.residual_trends(TREND_N_MIN);
    if !ok {
        return Err(CliError::Failed(format!("residuals not bounded (slopes {sd:.4}, {st:.4})")));
    }
    Ok(format!(
        "{} parabolic orbit points; Ĉ = {:.4}, D̂ = {:.4}; residual slopes {sd:.4}, {st:.4}",
        stats.rows.len(),
        stats.c_hat,
        stats.d_hat
    ))
}

#[derive(Debug, Serialize)]
struct SlowReport<'a> {
    log: &'a crate::potentials::ConstructionLog,
    /// (n, tail, 1/n², passed)
    tails: Vec<(usize, f64, f64, bool)>,
    membership: crate::potentials::MembershipReport,
    passed: bool,
}

fn cmd_slow_potential(ctx: &mut Context) -> CliResult<String> {
    let gens = ctx.generators()?;
    let o = ctx.base_point()?;
    let (spec, log) = slow_spec(ctx, &gens, o)?;
    let mut f = ctx.create("potential.json")?;
    writeln!(f, "{}", spec.to_json()?)?;
    f.flush()?;
    let tails: Vec<(usize, f64, f64, bool)> = log
        .steps
        .iter()
        .map(|s| {
            let bound = 1.0 / (s.n * s.n) as f64;
            (s.n, s.tail, bound, s.tail < bound)
        })
        .collect();
    let membership = check_fs_membership(&spec, &gens, o, log.delta_p, ctx.cfg.radius)?;
    let passed = tails.iter().all(|t| t.3) && membership.all_pass();
    ctx.write_json("slow_potential_report.json", &SlowReport { log: &log, tails, membership, passed })?;
    if !passed {
        return Err(CliError::Failed("slow potential certificates fail (see slow_potential_report.json)".into()));
    }
    Ok(format!("slow potential with {} plateaus; all tails below 1/n²", log.achieved_depth))
}

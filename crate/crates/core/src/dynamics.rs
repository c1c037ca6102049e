//! Geodesics and unstable Jacobians for warped metrics T(s)² dx² + ds².
//!
//! Heights are parametrized through λ = −ln T, which for the modified cusp
//! is the profile coordinate ln t. Distances come from the Clairaut first
//! integral by quadrature in λ; trajectories and Riccati data come from an
//! explicit integrator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cusp_metric::{build_cusp, CuspOptions, CuspProfile};
use crate::error::{Error, Result};
use crate::groups::{enumerate_ball, GeneratorSet, OrbitElement};
use crate::hyperbolic::{geodesic, Isometry, Point};
use crate::numerics::{adaptive_simpson, dormand_prince, fit_line, illinois, StepControl};

pub const DEFAULT_WARMUP: f64 = 20.0;
pub const MIN_WARMUP: f64 = 5.0;
/// Safety factor applied to observed comparison residuals.
pub const CALIBRATION_FACTOR: f64 = 1.5;

/// A rotationally symmetric warping in the λ parametrization.
pub trait Warping: Sync {
    fn lambda_of_height(&self, s: f64) -> Result<f64>;
    fn height_of_lambda(&self, lambda: f64) -> f64;
    /// ds/dλ, which equals 1/√g₂ for the modified cusp.
    fn ds_dlambda(&self, lambda: f64) -> f64;
    fn curvature_at_lambda(&self, lambda: f64) -> f64;
    /// Reference height where T = 1.
    fn seam(&self) -> f64;

    fn curvature(&self, s: f64) -> Result<f64> {
        Ok(self.curvature_at_lambda(self.lambda_of_height(s)?))
    }
    fn warp(&self, s: f64) -> Result<f64> {
        Ok((-self.lambda_of_height(s)?).exp())
    }
}

/// T(s) = e^{−a s}, curvature −a².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantCurvature {
    pub a: f64,
}

impl ConstantCurvature {
    pub fn hyperbolic() -> Self {
        Self { a: 1.0 }
    }
}

impl Warping for ConstantCurvature {
    fn lambda_of_height(&self, s: f64) -> Result<f64> {
        Ok(self.a * s)
    }
    fn height_of_lambda(&self, lambda: f64) -> f64 {
        lambda / self.a
    }
    fn ds_dlambda(&self, _lambda: f64) -> f64 {
        1.0 / self.a
    }
    fn curvature_at_lambda(&self, _lambda: f64) -> f64 {
        -self.a * self.a
    }
    fn seam(&self) -> f64 {
        0.0
    }
}

/// The metric of the modified cusp.
#[derive(Debug, Clone)]
pub struct WarpedMetric {
    pub profile: CuspProfile,
}

impl WarpedMetric {
    pub fn new(profile: CuspProfile) -> Self {
        Self { profile }
    }

    /// Height below which the metric is hyperbolic.
    pub fn hyperbolic_below(&self) -> f64 {
        self.profile.seam()
    }
}

impl Warping for WarpedMetric {
    fn lambda_of_height(&self, s: f64) -> Result<f64> {
        self.profile.lambda_of_u(s)
    }
    fn height_of_lambda(&self, lambda: f64) -> f64 {
        self.profile.u(lambda)
    }
    fn ds_dlambda(&self, lambda: f64) -> f64 {
        self.profile.u_slope(lambda)
    }
    fn curvature_at_lambda(&self, lambda: f64) -> f64 {
        self.profile.curvature(lambda)
    }
    fn seam(&self) -> f64 {
        self.profile.seam()
    }
}

/// Unit tangent vector at (x, t), with angle θ from the upward vertical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodesicState {
    pub x: f64,
    pub t: f64,
    /// dx/dτ
    pub dx: f64,
    /// dt/dτ
    pub dt: f64,
    /// T(t)² dx/dτ
    pub clairaut: f64,
    pub theta: f64,
    /// (sin θ, cos θ), kept separately so that reversal is exact.
    pub direction: (f64, f64),
}

impl GeodesicState {
    pub fn new<W: Warping + ?Sized>(metric: &W, x: f64, t: f64, theta: f64) -> Result<Self> {
        Self::with_direction(metric, x, t, theta.sin_cos())
    }

    pub fn with_direction<W: Warping + ?Sized>(metric: &W, x: f64, t: f64, (st, ct): (f64, f64)) -> Result<Self> {
        let warp = metric.warp(t)?;
        Ok(Self { x, t, dx: st / warp, dt: ct, clairaut: warp * st, theta: st.atan2(ct), direction: (st, ct) })
    }

    pub fn reversed<W: Warping + ?Sized>(&self, metric: &W) -> Result<Self> {
        let (st, ct) = self.direction;
        Self::with_direction(metric, self.x, self.t, (-st, -ct))
    }

    /// T² dx² + dt² − 1
    pub fn speed_defect<W: Warping + ?Sized>(&self, metric: &W) -> Result<f64> {
        let warp = metric.warp(self.t)?;
        Ok(warp * warp * self.dx * self.dx + self.dt * self.dt - 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// (τ, state) after every accepted step, starting with τ = 0.
    pub samples: Vec<(f64, GeodesicState)>,
    /// Largest |clairaut − clairaut₀| seen.
    pub clairaut_drift: f64,
}

impl Trajectory {
    pub fn end(&self) -> GeodesicState {
        self.samples.last().unwrap().1
    }
}

fn geodesic_ctl() -> StepControl {
    StepControl { rtol: 1e-11, atol: 1e-12, h_init: 1e-3, h_max: 0.05, h_min: 1e-12 }
}

/// Right-hand side of the geodesic flow with the Riccati and Jacobi
/// equations appended: [x, s, sin θ, cos θ, u, J, J', ∫(1 − u)].
fn flow<W: Warping + ?Sized>(metric: &W, y: &[f64; 8]) -> [f64; 8] {
    let Ok(lam) = metric.lambda_of_height(y[1]) else {
        return [f64::NAN; 8];
    };
    let (st, ct) = (y[2], y[3]);
    let turn = st / metric.ds_dlambda(lam);
    let k = metric.curvature_at_lambda(lam);
    [st * lam.exp(), ct, ct * turn, -st * turn, -k - y[4] * y[4], y[6], -k * y[5], 1.0 - y[4]]
}

const U: usize = 4;
const J: usize = 5;
const INT_U: usize = 7;

fn initial(state: &GeodesicState, seed: f64) -> [f64; 8] {
    let (st, ct) = state.direction;
    [state.x, state.t, st, ct, seed, 1.0, seed, 0.0]
}

fn state_from<W: Warping + ?Sized>(metric: &W, y: &[f64; 8]) -> Result<GeodesicState> {
    let norm = y[2].hypot(y[3]);
    GeodesicState::with_direction(metric, y[0], y[1], (y[2] / norm, y[3] / norm))
}

/// Integrate the geodesic through `state` for `duration`.
pub fn integrate_geodesic<W: Warping + ?Sized>(
    metric: &W,
    state: &GeodesicState,
    duration: f64,
    ctl: &StepControl,
) -> Result<Trajectory> {
    let y0 = initial(state, 1.0);
    let mut samples = vec![(0.0, *state)];
    let c0 = state.clairaut;
    let mut drift = 0.0f64;
    let mut failure = None;
    dormand_prince(|_, y| flow(metric, y), 0.0, y0, duration, ctl, |tau, y| {
        match state_from(metric, y) {
            Ok(s) => {
                drift = drift.max((s.clairaut - c0).abs());
                samples.push((tau, s));
                true
            }
            Err(e) => {
                failure = Some(e);
                false
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(Trajectory { samples, clairaut_drift: drift })
}

/// Minimizing geodesic between two points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Connection {
    pub distance: f64,
    /// Maximal height along the segment.
    pub max_height: f64,
    pub clairaut: f64,
    /// Initial angle at the first point, from the upward vertical.
    pub theta0: f64,
    /// (sin θ₀, cos θ₀) at full precision.
    pub direction: (f64, f64),
    pub turning: bool,
}

/// 2v/√(1 − e^{−2v²}), continuous at 0.
fn apex_weight(v: f64) -> f64 {
    if v < 1e-8 {
        std::f64::consts::SQRT_2 * (1.0 + 0.5 * v * v)
    } else {
        2.0 * v / (-(-2.0 * v * v).exp_m1()).sqrt()
    }
}

/// Horizontal displacement scaled by e^{−λ*}, and length, of the branch
/// from λ_a up to λ_b (λ_a ≤ λ_b ≤ λ*) with Clairaut constant e^{−λ*}.
fn branch<W: Warping + ?Sized>(metric: &W, la: f64, lb: f64, lstar: f64, with_len: bool) -> Result<(f64, f64)> {
    let (v0, v1) = ((lstar - lb).max(0.0).sqrt(), (lstar - la).max(0.0).sqrt());
    if v1 <= v0 {
        return Ok((0.0, 0.0));
    }
    let dx = adaptive_simpson(
        |v| {
            let lam = lstar - v * v;
            Ok((-2.0 * v * v).exp() * metric.ds_dlambda(lam) * apex_weight(v))
        },
        v0,
        v1,
        QUAD_TOL,
    )?;
    let len = if with_len {
        adaptive_simpson(|v| Ok(metric.ds_dlambda(lstar - v * v) * apex_weight(v)), v0, v1, QUAD_TOL)?
    } else {
        0.0
    };
    Ok((dx, len))
}

const QUAD_TOL: f64 = 1e-11;

/// Boundary value problem between (x1, t1) and (x2, t2), solved by
/// shooting on the Clairaut constant.
pub fn connect<W: Warping + ?Sized>(metric: &W, p1: (f64, f64), p2: (f64, f64)) -> Result<Connection> {
    let dx = (p2.0 - p1.0).abs();
    let (l1, l2) = (metric.lambda_of_height(p1.1)?, metric.lambda_of_height(p2.1)?);
    let (llo, lhi) = (l1.min(l2), l1.max(l2));
    let ascending = l2 >= l1;
    if dx == 0.0 {
        let direction: (f64, f64) = if ascending { (0.0, 1.0) } else { (0.0, -1.0) };
        return Ok(Connection {
            distance: (p2.1 - p1.1).abs(),
            max_height: p1.1.max(p2.1),
            clairaut: 0.0,
            theta0: direction.0.atan2(direction.1),
            direction,
            turning: false,
        });
    }
    let symmetric = llo == lhi;
    // ln of the horizontal displacement for apex parameter λ*
    let log_dx = |lstar: f64, turning: bool, with_len: bool| -> Result<(f64, f64)> {
        let (s, len) = if turning {
            let (a, la) = branch(metric, llo, lstar, lstar, with_len)?;
            if symmetric {
                (2.0 * a, 2.0 * la)
            } else {
                let (b, lb) = branch(metric, lhi, lstar, lstar, with_len)?;
                (a + b, la + lb)
            }
        } else {
            branch(metric, llo, lhi, lstar, with_len)?
        };
        Ok((lstar + s.ln(), len))
    };
    let target = dx.ln();
    let turning = log_dx(lhi, false, false)?.0 < target;
    let f = |ls: f64| -> Result<f64> { Ok(log_dx(ls, turning, false)?.0 - target) };
    // decreasing in λ* on the monotone branch, increasing when turning
    let f_lo = f(lhi)?;
    let mut hi = lhi + 1.0;
    let mut guard = 0;
    while f(hi)? * f_lo > 0.0 {
        hi = lhi + 2.0 * (hi - lhi);
        guard += 1;
        if guard > 60 {
            return Err(Error::Shooting(format!("no bracket for horizontal gap {dx}")));
        }
    }
    let lstar = illinois(f, lhi, hi, 1e-15 * hi.abs().max(1.0), 1e-13, 200)?;
    let distance = log_dx(lstar, turning, true)?.1;
    let max_height = if turning { metric.height_of_lambda(lstar) } else { p1.1.max(p2.1) };
    let clairaut = (-lstar).exp();
    let sin0 = (l1 - lstar).exp().min(1.0);
    // the first point starts upward unless it is the upper end of a monotone branch
    let upward = turning || ascending;
    let cos0 = ((1.0 - sin0) * (1.0 + sin0)).max(0.0).sqrt();
    let direction = (
        if p2.0 >= p1.0 { sin0 } else { -sin0 },
        if upward { cos0 } else { -cos0 },
    );
    let theta0 = direction.0.atan2(direction.1);
    Ok(Connection { distance, max_height, clairaut, theta0, direction, turning })
}

/// Horizontal translation τ with d((0, s₀), (τ, s₀)) = 1 at the seam.
pub fn unit_translation<W: Warping + ?Sized>(metric: &W) -> Result<f64> {
    let s0 = metric.seam();
    let mut lo = 0.0;
    let mut hi = 4.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if connect(metric, (0.0, s0), (mid, s0))?.distance < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitRow {
    pub n: u64,
    pub d: f64,
    pub two_u: f64,
    pub residual_d: f64,
    pub t_n: f64,
    pub u: f64,
    pub residual_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitStats {
    pub translation: f64,
    pub rows: Vec<OrbitRow>,
    pub c_hat: f64,
    pub d_hat: f64,
}

impl OrbitStats {
    /// Slopes of |residual| against ln n over n ≥ n_min.
    pub fn residual_trends(&self, n_min: u64) -> (f64, f64) {
        let rows: Vec<&OrbitRow> = self.rows.iter().filter(|r| r.n >= n_min).collect();
        let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
        let fd = fit_line(&xs, &rows.iter().map(|r| r.residual_d.abs()).collect::<Vec<_>>());
        let ft = fit_line(&xs, &rows.iter().map(|r| r.residual_t.abs()).collect::<Vec<_>>());
        (fd.map_or(f64::NAN, |f| f.slope), ft.map_or(f64::NAN, |f| f.slope))
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,d_T,2u,residual_d,t_n,u,residual_t")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12}",
                r.n, r.d, r.two_u, r.residual_d, r.t_n, r.u, r.residual_t
            )?;
        }
        Ok(())
    }

    /// Counting data N(r) = #{k ∈ ℤ : d(o, pᵏo) ≤ r} on `samples` radii.
    pub fn counts(&self, samples: usize) -> Vec<(f64, usize)> {
        let d_max = self.rows.last().map_or(0.0, |r| r.d);
        let mut ds: Vec<f64> = self.rows.iter().map(|r| r.d).collect();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (1..=samples)
            .map(|i| {
                let r = d_max * i as f64 / samples as f64;
                (r, 1 + 2 * ds.partition_point(|&d| d <= r))
            })
            .collect()
    }
}

/// Distances and maximal heights of [o, pⁿo] for n = 1..=n_max, with
/// o = (0, seam) and p normalized by d(o, po) = 1.
pub fn parabolic_orbit_stats<W: Warping + ?Sized>(metric: &W, n_max: u64) -> Result<OrbitStats> {
    let tau = unit_translation(metric)?;
    let s0 = metric.seam();
    let rows: Vec<OrbitRow> = (1..=n_max)
        .into_par_iter()
        .map(|n| -> Result<OrbitRow> {
            let c = connect(metric, (0.0, s0), (n as f64 * tau, s0))?;
            let u = metric.height_of_lambda((n as f64).ln());
            Ok(OrbitRow {
                n,
                d: c.distance,
                two_u: 2.0 * u,
                residual_d: c.distance - 2.0 * u,
                t_n: c.max_height,
                u,
                residual_t: c.max_height - u,
            })
        })
        .collect::<Result<_>>()?;
    let max_d = rows.iter().map(|r| r.residual_d.abs()).fold(0.0, f64::max);
    let max_t = rows.iter().map(|r| r.residual_t.abs()).fold(0.0, f64::max);
    Ok(OrbitStats {
        translation: tau,
        rows,
        c_hat: CALIBRATION_FACTOR * max_d,
        d_hat: CALIBRATION_FACTOR * max_t,
    })
}

/// Build the cusp, calibrate D̂ and Ĉ from the parabolic orbit, and rebuild
/// once with the calibrated D̂.
pub fn build_calibrated_cusp(opts: &CuspOptions, n_max: u64) -> Result<(WarpedMetric, OrbitStats)> {
    let first = WarpedMetric::new(build_cusp(opts)?);
    let stats = parabolic_orbit_stats(&first, n_max)?;
    let mut again = opts.clone();
    again.d_hat = stats.d_hat.max(1e-3);
    again.c_hat = stats.c_hat;
    let metric = WarpedMetric::new(build_cusp(&again)?);
    let stats = parabolic_orbit_stats(&metric, n_max)?;
    Ok((metric, stats))
}

/// A sample of the unstable Jacobian along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianSample {
    pub tau: f64,
    pub height: f64,
    /// Riccati solution u = −F^su.
    pub u_ric: f64,
    pub f_su: f64,
}

/// Start state after a backward extension of length `warmup`.
fn backward_start<W: Warping + ?Sized>(metric: &W, state: &GeodesicState, warmup: f64) -> Result<GeodesicState> {
    let back = integrate_geodesic(metric, &state.reversed(metric)?, warmup, &geodesic_ctl())?;
    back.end().reversed(metric)
}

/// F^su = −u along the geodesic through `state` for τ ∈ [0, window], from
/// the Riccati equation u' = −K − u² started `warmup` earlier.
pub fn unstable_jacobian<W: Warping + ?Sized>(
    metric: &W,
    state: &GeodesicState,
    warmup: f64,
    window: f64,
    seed: Option<f64>,
) -> Result<Vec<JacobianSample>> {
    if warmup < MIN_WARMUP {
        return Err(Error::InsufficientWarmup(warmup));
    }
    let start = backward_start(metric, state, warmup)?;
    let seed = match seed {
        Some(s) => s,
        None => (-metric.curvature(start.t)?).sqrt(),
    };
    let y0 = initial(&start, seed);
    let mut out = Vec::new();
    dormand_prince(|_, y| flow(metric, y), 0.0, y0, warmup + window, &geodesic_ctl(), |tau, y| {
        if tau >= warmup - 1e-12 {
            out.push(JacobianSample { tau: tau - warmup, height: y[1], u_ric: y[U], f_su: -y[U] });
        }
        true
    })?;
    Ok(out)
}

/// U = F^su + (N − 1) with N = 2.
pub fn normalized_u(samples: &[JacobianSample]) -> Vec<(f64, f64)> {
    samples.iter().map(|s| (s.tau, s.f_su + 1.0)).collect()
}

/// Largest |u_ric − d/dτ log J| over sample points spaced `spacing` apart in
/// [0, window], with J solving J'' = −K J and Richardson-extrapolated central
/// differences of steps h and h/2.
pub fn jacobi_crosscheck<W: Warping + ?Sized>(
    metric: &W,
    state: &GeodesicState,
    warmup: f64,
    window: f64,
    spacing: f64,
) -> Result<f64> {
    if warmup < MIN_WARMUP {
        return Err(Error::InsufficientWarmup(warmup));
    }
    let h = 1e-3;
    let start = backward_start(metric, state, warmup)?;
    let seed = (-metric.curvature(start.t)?).sqrt();
    let mut y = initial(&start, seed);
    let mut tau = 0.0;
    let ctl = geodesic_ctl();
    let advance = |to: f64, y: &mut [f64; 8], tau: &mut f64| -> Result<()> {
        let (_, yn) = dormand_prince(|_, z| flow(metric, z), *tau, *y, to, &ctl, |_, _| true)?;
        *y = yn;
        *tau = to;
        // renormalize J to keep it in range
        let j = y[J];
        y[J] = 1.0;
        y[J + 1] /= j;
        Ok(())
    };
    let mut worst = 0.0f64;
    let mut c = warmup + h;
    while c <= warmup + window - h {
        advance(c - h, &mut y, &mut tau)?;
        let before = y;
        let log_j = |to: f64| -> Result<f64> {
            Ok(dormand_prince(|_, z| flow(metric, z), tau, before, to, &ctl, |_, _| true)?.1[J].ln())
        };
        let (_, mid) = dormand_prince(|_, z| flow(metric, z), tau, before, c, &ctl, |_, _| true)?;
        let lj0 = before[J].ln();
        let wide = (log_j(c + h)? - lj0) / (2.0 * h);
        let narrow = (log_j(c + 0.5 * h)? - log_j(c - 0.5 * h)?) / h;
        // Richardson step removes the O(h²) term, which dominates where K varies quickly
        let fd = (4.0 * narrow - wide) / 3.0;
        worst = worst.max((fd - mid[U]).abs());
        c += spacing;
    }
    Ok(worst)
}

/// One row of the normalized-potential bound check: max U along [o, pᵏo] compared with −1/n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UBoundRow {
    pub n: usize,
    pub k: f64,
    pub segment_height: f64,
    /// max U over the whole segment
    pub max_u: f64,
    /// max U over the part of the segment at least `relax` above u(p_first)
    pub max_u_cusp: f64,
    pub bound: f64,
    pub passed: bool,
}

/// For n in `ns` and |k| ∈ {k(n), √(k(n)k(n+1)), k(n+1) − 1}, compute U
/// along [o, pᵏo].
pub fn u_bound_report(metric: &WarpedMetric, ns: &[usize], relax: f64, tol: f64) -> Result<Vec<UBoundRow>> {
    let tau = unit_translation(metric)?;
    let pack = &metric.profile.pack;
    let s0 = metric.seam();
    let floor = metric.profile.u(pack.log_p_at(pack.first_node)) + relax;
    let mut jobs = Vec::new();
    for &n in ns {
        if n < pack.first_node || n >= pack.last_node() {
            continue;
        }
        let (k0, k1) = (pack.k_at(n), pack.k_at(n + 1));
        for k in [k0, (k0 * k1).sqrt(), k1 - 1.0] {
            jobs.push((n, k));
        }
    }
    jobs.par_iter()
        .map(|&(n, k)| {
            let c = connect(metric, (0.0, s0), (k * tau, s0))?;
            let st = GeodesicState::with_direction(metric, 0.0, s0, c.direction)?;
            let samples = unstable_jacobian(metric, &st, DEFAULT_WARMUP, c.distance, None)?;
            let max_u = samples.iter().map(|s| s.f_su + 1.0).fold(f64::NEG_INFINITY, f64::max);
            let max_u_cusp = samples
                .iter()
                .filter(|s| s.height >= floor)
                .map(|s| s.f_su + 1.0)
                .fold(f64::NEG_INFINITY, f64::max);
            let bound = -1.0 / n as f64;
            Ok(UBoundRow {
                n,
                k,
                segment_height: c.max_height,
                max_u,
                max_u_cusp,
                bound,
                passed: max_u_cusp <= bound + tol,
            })
        })
        .collect()
}

/// Corrections for a geodesic chord through the modified horoball, by
/// horocyclic width w at the seam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChordTable {
    pub widths: Vec<f64>,
    /// d_T − d_hyp between the chord endpoints.
    pub extra_length: Vec<f64>,
    /// ∫U along the chord plus the relaxation tail after exit.
    pub u_integral: Vec<f64>,
}

impl ChordTable {
    pub fn build(metric: &WarpedMetric, w_max: f64, per_efold: usize) -> Result<Self> {
        let w_min: f64 = 1e-3;
        let n = ((w_max / w_min).ln() * per_efold as f64).ceil() as usize + 1;
        let widths: Vec<f64> = (0..=n)
            .map(|i| w_min * ((w_max / w_min).ln() * i as f64 / n as f64).exp())
            .collect();
        let rows: Vec<(f64, f64)> = widths
            .par_iter()
            .map(|&w| chord_corrections(metric, w))
            .collect::<Result<_>>()?;
        Ok(Self {
            widths,
            extra_length: rows.iter().map(|r| r.0).collect(),
            u_integral: rows.iter().map(|r| r.1).collect(),
        })
    }

    /// Interpolated (extra length, ∫U); zero below the smallest width.
    pub fn eval(&self, w: f64) -> (f64, f64) {
        let n = self.widths.len();
        if w <= self.widths[0] {
            let s = (w / self.widths[0]).powi(2);
            return (s * self.extra_length[0], s * self.u_integral[0]);
        }
        if w >= self.widths[n - 1] {
            // both corrections grow linearly in ln w once the chord is deep
            let (a, b) = (n - 2, n - 1);
            let q = (w.ln() - self.widths[b].ln()) / (self.widths[b].ln() - self.widths[a].ln());
            return (
                self.extra_length[b] + q * (self.extra_length[b] - self.extra_length[a]),
                self.u_integral[b] + q * (self.u_integral[b] - self.u_integral[a]),
            );
        }
        let i = self.widths.partition_point(|&x| x <= w) - 1;
        let q = (w.ln() - self.widths[i].ln()) / (self.widths[i + 1].ln() - self.widths[i].ln());
        (
            self.extra_length[i] + q * (self.extra_length[i + 1] - self.extra_length[i]),
            self.u_integral[i] + q * (self.u_integral[i + 1] - self.u_integral[i]),
        )
    }

    /// Largest ratio of length deficit to hyperbolic chord length.
    pub fn max_deficit_ratio(&self) -> f64 {
        self.widths
            .iter()
            .zip(&self.extra_length)
            .map(|(w, e)| (-e / (2.0 * (0.5 * w).asinh())).max(0.0))
            .fold(0.0, f64::max)
    }
}

fn chord_corrections(metric: &WarpedMetric, w: f64) -> Result<(f64, f64)> {
    let s0 = metric.seam();
    let c = connect(metric, (0.0, s0), (w, s0))?;
    let extra = c.distance - 2.0 * (0.5 * w).asinh();
    // the metric is hyperbolic before entry, so u = 1 there exactly
    let y0 = initial(&GeodesicState::with_direction(metric, 0.0, s0, c.direction)?, 1.0);
    let (_, y) = dormand_prince(|_, y| flow(metric, y), 0.0, y0, c.distance, &geodesic_ctl(), |_, _| true)?;
    if (y[1] - s0).abs() > 1e-5 * (1.0 + c.distance) {
        return Err(Error::Shooting(format!(
            "chord of width {w} ends at height {} instead of {s0}",
            y[1]
        )));
    }
    // after exit K = −1, so ∫(1 − u) = ln 2 − ln(1 + u_exit)
    let tail = std::f64::consts::LN_2 - (1.0 + y[U]).ln();
    Ok((extra, y[INT_U] + tail))
}

/// A hyperbolic Schottky surface whose cusp above a horocycle carries the
/// modified metric.
#[derive(Debug, Clone)]
pub struct GluedSurface {
    pub metric: WarpedMetric,
    pub gens: GeneratorSet,
    pub base: Point,
    /// Height of the modified horoball in the upper half-plane.
    pub cusp_height: f64,
    /// Translation of the original parabolic in chart units.
    pub chart_translation: f64,
    pub chords: ChordTable,
}

/// An orbit point of the glued surface.
#[derive(Debug, Clone, PartialEq)]
pub struct GluedElement {
    /// Orbit element carrying the glued displacement.
    pub element: OrbitElement,
    pub hyperbolic_displacement: f64,
    /// ∫U along [o, γo].
    pub u_integral: f64,
    pub chords: usize,
}

impl GluedSurface {
    /// Glue the cusp so that the parabolic of `gens` acts on the seam with
    /// unit displacement.
    pub fn new(metric: WarpedMetric, gens: GeneratorSet, base: Point, radius: f64) -> Result<Self> {
        let tau_w = unit_translation(&metric)?;
        let tau = gens.parabolic_translation().abs();
        let cusp_height = tau / tau_w;
        if base.y >= cusp_height {
            return Err(Error::InvalidArgument(format!(
                "base point height {} is inside the modified horoball (height {cusp_height})",
                base.y
            )));
        }
        for h in &gens.hyperbolics {
            for g in [*h, h.inverse()] {
                if g.c != 0.0 && 1.0 / (g.c * g.c * cusp_height) >= cusp_height {
                    return Err(Error::InvalidArgument("horoball images overlap the cusp".into()));
                }
            }
            let apex = h
                .fixed_points()
                .iter()
                .filter_map(|p| match p {
                    crate::hyperbolic::BoundaryPoint::Finite(x) => Some(*x),
                    crate::hyperbolic::BoundaryPoint::Infinity => None,
                })
                .collect::<Vec<f64>>();
            if apex.len() == 2 && 0.5 * (apex[0] - apex[1]).abs() >= 0.5 * cusp_height {
                return Err(Error::InvalidArgument("axis of a hyperbolic generator is too high".into()));
            }
        }
        let w_max = 2.0 * (0.5 * (radius + 4.0)).sinh();
        let chords = ChordTable::build(&metric, w_max, 8)?;
        Ok(Self { metric, gens, base, cusp_height, chart_translation: tau_w, chords })
    }

    /// Same surface, orbit of a finite-index subgroup.
    pub fn with_generators(&self, gens: GeneratorSet) -> Self {
        Self { gens, ..self.clone() }
    }

    /// Horocyclic width of the chord cut by the hyperbolic geodesic [a, b]
    /// from the modified horoball at ∞.
    pub fn chord_width(&self, a: Point, b: Point) -> Option<f64> {
        let (center, r) = geodesic(a, b).ok()?.circle()?;
        if r <= self.cusp_height {
            return None;
        }
        let (lo, hi) = if a.x < b.x { (a.x, b.x) } else { (b.x, a.x) };
        if !(center > lo && center < hi) {
            return None;
        }
        Some(2.0 * (r * r - self.cusp_height * self.cusp_height).sqrt() / self.cusp_height)
    }

    /// Glued displacement and ∫U for an orbit element.
    pub fn glue(&self, el: &OrbitElement) -> Result<GluedElement> {
        let o = self.base;
        let target = el.matrix.apply(o)?;
        let mut prefix = Isometry::identity();
        let mut extra = 0.0;
        let mut u_int = 0.0;
        let mut chords = 0;
        for b in &el.word.blocks {
            if b.generator == 0 {
                let inv = prefix.inverse();
                if let Some(w) = self.chord_width(inv.apply(o)?, inv.apply(target)?) {
                    let (e, ui) = self.chords.eval(w);
                    extra += e;
                    u_int += ui;
                    chords += 1;
                }
            }
            prefix = prefix * self.gens.generator(b.generator).pow(b.exponent);
        }
        let mut element = el.clone();
        element.displacement = el.displacement + extra;
        element.weight_cache = None;
        Ok(GluedElement { element, hyperbolic_displacement: el.displacement, u_integral: u_int, chords })
    }

    /// All orbit points with glued displacement at most `radius`.
    pub fn orbit(&self, radius: f64) -> Result<Vec<GluedElement>> {
        let ratio = self.chords.max_deficit_ratio();
        if ratio >= 0.5 {
            return Err(Error::InvalidArgument(format!("chord deficit ratio {ratio} too large")));
        }
        let ball = enumerate_ball(&self.gens, self.base, radius / (1.0 - ratio) + 1e-9)?;
        let mut out: Vec<GluedElement> = ball
            .elements
            .par_iter()
            .map(|e| self.glue(e))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|g| g.element.displacement <= radius)
            .collect();
        out.sort_by(|a, b| {
            a.element
                .displacement
                .partial_cmp(&b.element.displacement)
                .unwrap()
                .then_with(|| a.element.word.blocks.len().cmp(&b.element.word.blocks.len()))
        });
        Ok(out)
    }
}

/// Orbit elements weighted by `weight(∫U, d)`.
pub fn weighted_orbit<F: Fn(f64, f64) -> f64>(glued: &[GluedElement], weight: F) -> Vec<OrbitElement> {
    glued
        .iter()
        .map(|g| {
            let mut e = g.element.clone();
            e.weight_cache = Some(weight(g.u_integral, e.displacement));
            e
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperbolic::dist;

    fn small_metric() -> WarpedMetric {
        WarpedMetric::new(build_cusp(&CuspOptions { last_node: 24, ..CuspOptions::default() }).unwrap())
    }

    #[test]
    fn vertical_geodesic_stays_vertical() {
        let m = small_metric();
        let st = GeodesicState::new(&m, 0.3, 0.0, 0.0).unwrap();
        let tr = integrate_geodesic(&m, &st, 10.0, &geodesic_ctl()).unwrap();
        assert!(tr.samples.iter().all(|(_, s)| (s.x - 0.3).abs() < 1e-14));
        assert!((tr.end().t - 10.0).abs() < 1e-9);
    }

    #[test]
    fn hyperbolic_arc_matches_semicircle() {
        let h = ConstantCurvature::hyperbolic();
        // chart (x, s) ↔ upper half-plane (x, e^s)
        let st = GeodesicState::new(&h, 0.0, 0.0, 0.7).unwrap();
        let tr = integrate_geodesic(&h, &st, 3.0, &geodesic_ctl()).unwrap();
        let (center, radius) = {
            // tangent direction in the half-plane is (sin θ, cos θ) at (0, 1)
            let c = 1.0 / 0.7f64.tan();
            (c, (1.0 + c * c).sqrt())
        };
        for (_, s) in &tr.samples {
            let y = s.t.exp();
            assert!((((s.x - center).powi(2) + y * y).sqrt() - radius).abs() < 1e-7);
        }
        assert!(tr.clairaut_drift < 1e-9);
    }

    #[test]
    fn clairaut_drift_small_in_warped_metric() {
        let m = small_metric();
        let st = GeodesicState::new(&m, 0.0, m.seam(), 0.05).unwrap();
        let tr = integrate_geodesic(&m, &st, 20.0, &geodesic_ctl()).unwrap();
        let top = tr.samples.iter().map(|(_, s)| s.t).fold(f64::MIN, f64::max);
        assert!(top > m.seam() + 1.0, "{top}");
        assert!(tr.clairaut_drift < 1e-7, "{}", tr.clairaut_drift);
        assert!(tr.end().speed_defect(&m).unwrap().abs() < 1e-9);
    }

    #[test]
    fn connect_matches_hyperbolic_distance() {
        let h = ConstantCurvature::hyperbolic();
        for &(p, q) in &[((0.0, 0.0), (1.0, 0.0)), ((0.0, -0.5), (3.0, 1.2)), ((0.2, 1.0), (-4.0, -1.0)), ((0.0, 2.0), (0.01, 0.0))] {
            let c = connect(&h, p, q).unwrap();
            let z = Point::new(p.0, f64::exp(p.1)).unwrap();
            let w = Point::new(q.0, f64::exp(q.1)).unwrap();
            assert!((c.distance - dist(z, w)).abs() < 1e-6, "{p:?} {q:?}: {} vs {}", c.distance, dist(z, w));
        }
        let c = connect(&h, (0.0, 0.5), (0.0, 2.0)).unwrap();
        assert_eq!(c.distance, 1.5);
        assert_eq!(connect(&h, (1.0, 1.0), (1.0, 1.0)).unwrap().distance, 0.0);
    }

    #[test]
    fn connect_below_seam_is_hyperbolic_and_symmetric() {
        let m = small_metric();
        let s0 = m.seam();
        // both points and the whole segment stay below the seam
        let (p, q) = ((0.0, s0 - 3.0), (0.05, s0 - 3.2));
        let c = connect(&m, p, q).unwrap();
        let off = m.profile.phi_below_seam();
        let z = Point::new(0.0, (p.1 - off).exp()).unwrap();
        let w = Point::new(0.05, (q.1 - off).exp()).unwrap();
        assert!(c.max_height < s0);
        assert!((c.distance - dist(z, w)).abs() < 1e-6);
        let r = connect(&m, (3.0, s0 + 1.0), (0.0, s0)).unwrap();
        let r2 = connect(&m, (0.0, s0), (3.0, s0 + 1.0)).unwrap();
        assert!((r.distance - r2.distance).abs() < 1e-6);
    }

    #[test]
    fn shooting_angle_reaches_endpoint() {
        let m = small_metric();
        let s0 = m.seam();
        let c = connect(&m, (0.0, s0), (40.0, s0 + 0.5)).unwrap();
        let st = GeodesicState::with_direction(&m, 0.0, s0, c.direction).unwrap();
        let tr = integrate_geodesic(&m, &st, c.distance, &geodesic_ctl()).unwrap();
        let end = tr.end();
        assert!((end.x - 40.0).abs() < 1e-5 && (end.t - (s0 + 0.5)).abs() < 1e-6, "{end:?}");
    }

    #[test]
    fn deep_segment_turns_after_backward_extension() {
        let m = small_metric();
        let s0 = m.seam();
        let c = connect(&m, (0.0, s0), (1e20, s0)).unwrap();
        assert!(c.turning && c.direction.0 < 1e-15);
        let st = GeodesicState::with_direction(&m, 0.0, s0, c.direction).unwrap();
        let js = unstable_jacobian(&m, &st, DEFAULT_WARMUP, c.distance, None).unwrap();
        let top = js.iter().map(|j| j.height).fold(f64::MIN, f64::max);
        assert!((top - c.max_height).abs() < 1e-3, "{top} vs {}", c.max_height);
        assert!((js.last().unwrap().height - s0).abs() < 1e-3);
    }

    #[test]
    fn riccati_fixed_points() {
        for (a, expect) in [(1.0, -1.0), (2.0, -2.0)] {
            let k = ConstantCurvature { a };
            let st = GeodesicState::new(&k, 0.0, 0.0, 0.4).unwrap();
            let s = unstable_jacobian(&k, &st, DEFAULT_WARMUP, 5.0, Some(0.3)).unwrap();
            for j in &s {
                assert!((j.f_su - expect).abs() < 1e-6, "{j:?}");
            }
        }
        let k = ConstantCurvature::hyperbolic();
        let st = GeodesicState::new(&k, 0.0, 0.0, 0.4).unwrap();
        assert!(matches!(unstable_jacobian(&k, &st, 4.0, 1.0, None), Err(Error::InsufficientWarmup(_))));
    }

    #[test]
    fn riccati_band_and_seed_independence() {
        let m = small_metric();
        let st = GeodesicState::new(&m, 0.0, m.seam() + 2.0, 0.2).unwrap();
        let a = unstable_jacobian(&m, &st, 15.0, 8.0, Some(0.6)).unwrap();
        let b = unstable_jacobian(&m, &st, 15.0, 8.0, Some(1.4)).unwrap();
        assert!((a.last().unwrap().u_ric - b.last().unwrap().u_ric).abs() < 1e-6);
        for s in &a {
            assert!(s.u_ric >= (1.0f64 / 3.0).sqrt() - 1e-9 && s.u_ric <= 2f64.sqrt() + 1e-9);
        }
    }

    #[test]
    fn jacobi_agrees_with_riccati() {
        let m = small_metric();
        let st = GeodesicState::new(&m, 0.0, m.seam() + 1.0, 0.9).unwrap();
        let worst = jacobi_crosscheck(&m, &st, DEFAULT_WARMUP, 6.0, 0.5).unwrap();
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn orbit_stats_normalized_and_monotone() {
        let m = small_metric();
        let stats = parabolic_orbit_stats(&m, 40).unwrap();
        assert!((stats.rows[0].d - 1.0).abs() < 1e-9);
        assert!(stats.rows.windows(2).all(|w| w[1].d > w[0].d));
        let h = ConstantCurvature::hyperbolic();
        let hs = parabolic_orbit_stats(&h, 20).unwrap();
        assert!((hs.translation - 2.0 * 0.5f64.sinh()).abs() < 1e-9);
    }
}

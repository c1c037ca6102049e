//! Pressure curves t ↦ P(tF), location of t_F and classification of the
//! phase transition.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{weighted_orbit, GluedSurface};
use crate::error::{Error, Result};
use crate::groups::{enumerate_ball, power_subgroup, GeneratorSet, OrbitElement};
use crate::hyperbolic::Point;
use crate::potentials::PotentialSpec;
use crate::series::{attach_weights, weighted_critical_exponent, ExponentEstimate, WindowOptions};

/// Absolute floor of the flatness tolerance.
pub const MIN_EPSILON: f64 = 0.01;
/// Bisection resolution for t_F.
pub const T_RESOLUTION: f64 = 0.02;
/// Required excess of the right tail over δ_P, in standard errors.
pub const EXISTENCE_SIGMAS: f64 = 5.0;

/// Evaluation grid `lo, lo + step, …, hi`.
pub fn t_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    // snap to 1e-12 so that decimal grids hit 0 and other round values exactly
    (0..=n).map(|i| ((lo + step * i as f64) * 1e12).round() / 1e12).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub t: f64,
    pub estimate: ExponentEstimate,
    /// Same estimator on the weighted parabolic sub-orbit.
    pub reference: ExponentEstimate,
}

impl CurvePoint {
    /// P(tF) minus the weighted parabolic exponent.
    pub fn gap(&self) -> f64 {
        self.estimate.value - self.reference.value
    }

    pub fn combined_stderr(&self) -> f64 {
        self.estimate.stderr.hypot(self.reference.stderr)
    }

    pub fn epsilon(&self) -> f64 {
        MIN_EPSILON.max(3.0 * self.combined_stderr())
    }

    pub fn is_flat(&self) -> bool {
        self.gap() <= self.epsilon()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PressureCurve {
    pub grid: Vec<CurvePoint>,
    /// Unweighted exponent of the parabolic sub-orbit.
    pub delta_p: ExponentEstimate,
    /// Estimate at t = 0.
    pub delta_gamma: ExponentEstimate,
    pub radius: f64,
    pub potential_id: String,
    pub group_id: String,
}

impl PressureCurve {
    pub fn ts(&self) -> Vec<f64> {
        self.grid.iter().map(|p| p.t).collect()
    }

    /// Rows (t, P, stderr, R, flag).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,P_estimate,stderr,R_used,flag")?;
        for p in &self.grid {
            let flag = if p.estimate.low_confidence {
                "low_confidence"
            } else if p.is_flat() {
                "flat"
            } else {
                "above"
            };
            writeln!(out, "{:.6},{:.10},{:.10},{:.6},{flag}", p.t, p.estimate.value, p.estimate.stderr, self.radius)?;
        }
        Ok(())
    }

    /// Static plot of the curve, the parabolic reference and the δ_P, δ_Γ levels.
    pub fn write_svg<W: Write>(&self, mut out: W, title: &str) -> Result<()> {
        let (w, h, m) = (640.0, 420.0, 50.0);
        let ts = self.ts();
        let (t0, t1) = (ts.first().copied().unwrap_or(0.0), ts.last().copied().unwrap_or(1.0));
        let ys = self
            .grid
            .iter()
            .flat_map(|p| [p.estimate.value, p.reference.value])
            .chain([self.delta_p.value, self.delta_gamma.value]);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in ys.filter(|y| y.is_finite()) {
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !(y1 > y0) {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.05 * (y1 - y0);
        let (y0, y1) = (y0 - pad, y1 + pad);
        let sx = |t: f64| m + (t - t0) / (t1 - t0).max(1e-12) * (w - 2.0 * m);
        let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
        let poly = |vals: Vec<(f64, f64)>| {
            vals.iter().map(|(t, y)| format!("{:.2},{:.2}", sx(*t), sy(*y))).collect::<Vec<_>>().join(" ")
        };
        writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#)?;
        writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
        writeln!(out, r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, escape(title))?;
        writeln!(
            out,
            r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
            b = h - m,
            r = w - m
        )?;
        for (label, v, color) in [("δ_P", self.delta_p.value, "#1f77b4"), ("δ_Γ", self.delta_gamma.value, "#2ca02c")] {
            writeln!(
                out,
                r#"<line x1="{m}" y1="{y:.2}" x2="{r}" y2="{y:.2}" stroke="{color}" stroke-dasharray="6 4"/><text x="{tx}" y="{y:.2}" font-family="sans-serif" font-size="12" fill="{color}">{label}</text>"#,
                y = sy(v),
                r = w - m,
                tx = w - m + 4.0
            )?;
        }
        if t0 <= 0.0 && t1 >= 0.0 {
            writeln!(out, r##"<line x1="{x:.2}" y1="{m}" x2="{x:.2}" y2="{b}" stroke="#999" stroke-width="0.5"/>"##, x = sx(0.0), b = h - m)?;
        }
        let reference = poly(self.grid.iter().map(|p| (p.t, p.reference.value)).collect());
        let curve = poly(self.grid.iter().map(|p| (p.t, p.estimate.value)).collect());
        writeln!(out, r##"<polyline points="{reference}" fill="none" stroke="#1f77b4" stroke-width="1"/>"##)?;
        writeln!(out, r##"<polyline points="{curve}" fill="none" stroke="#d62728" stroke-width="2"/>"##)?;
        for (v, anchor, x, y) in [
            (t0, "start", sx(t0), h - m + 16.0),
            (t1, "end", sx(t1), h - m + 16.0),
        ] {
            writeln!(out, r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{v:.2}</text>"#)?;
        }
        for v in [y0 + pad, y1 - pad] {
            writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.3}</text>"#, m - 4.0, sy(v))?;
        }
        writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">t</text>"#, w / 2.0, h - 12.0)?;
        writeln!(out, "</svg>")?;
        Ok(())
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Orbit data for pressure evaluations: weights must be attached and both
/// slices sorted by displacement.
#[derive(Debug, Clone, Copy)]
pub struct PressureProblem<'a> {
    pub orbit: &'a [OrbitElement],
    pub parabolic: &'a [OrbitElement],
    pub radius: f64,
    pub window: WindowOptions,
}

impl<'a> PressureProblem<'a> {
    pub fn point(&self, t: f64) -> Result<CurvePoint> {
        Ok(CurvePoint {
            t,
            estimate: weighted_critical_exponent(self.orbit, t, self.radius, &self.window)?,
            reference: weighted_critical_exponent(self.parabolic, t, self.radius, &self.window)?,
        })
    }

    pub fn curve(&self, grid: &[f64], potential_id: &str, group_id: &str) -> Result<PressureCurve> {
        if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("t-grid must be finite and strictly increasing".into()));
        }
        let points: Vec<CurvePoint> = grid.par_iter().map(|&t| self.point(t)).collect::<Result<_>>()?;
        let delta_p = weighted_critical_exponent(self.parabolic, 0.0, self.radius, &self.window)?;
        let delta_gamma = match points.iter().find(|p| p.t == 0.0) {
            Some(p) => p.estimate,
            None => weighted_critical_exponent(self.orbit, 0.0, self.radius, &self.window)?,
        };
        Ok(PressureCurve {
            grid: points,
            delta_p,
            delta_gamma,
            radius: self.radius,
            potential_id: potential_id.to_string(),
            group_id: group_id.to_string(),
        })
    }

    /// Refine the last flat-to-rising bracket of `curve` by bisection on
    /// P(tF) > reference + ε.
    pub fn find_t_f(&self, curve: &PressureCurve, epsilon: Option<f64>) -> Result<TfEstimate> {
        let g = &curve.grid;
        let i = (0..g.len().saturating_sub(1))
            .rev()
            .find(|&i| g[i].is_flat() && !g[i + 1].is_flat() && g[i + 1..].iter().all(|p| !p.is_flat()))
            .ok_or(Error::NoTransition)?;
        let eps = epsilon.unwrap_or_else(|| g[i + 1].epsilon());
        let (mut lo, mut hi) = (g[i].t, g[i + 1].t);
        let mut evaluations = 0;
        while hi - lo > 2.0 * T_RESOLUTION {
            let mid = 0.5 * (lo + hi);
            let p = self.point(mid)?;
            evaluations += 1;
            if p.gap() > eps {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(TfEstimate { value: 0.5 * (lo + hi), half_width: 0.5 * (hi - lo), epsilon: eps, evaluations })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TfEstimate {
    pub value: f64,
    pub half_width: f64,
    pub epsilon: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TransitionType {
    A,
    B,
    None,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionReport {
    pub kind: TransitionType,
    pub t_f: Option<TfEstimate>,
    /// Flat sub-grid interval.
    pub j_interval: Option<(f64, f64)>,
    /// Largest |gap|/combined stderr over the flat interval.
    pub flat_worst_sigma: Option<f64>,
    /// Median of |gap|/combined stderr over the flat interval.
    pub flat_median_sigma: Option<f64>,
    /// Right-tail excess over the reference in standard errors.
    pub right_tail_sigma: f64,
    pub notes: Vec<String>,
}

impl TransitionReport {
    /// Type A with t_F in [−1 − tol, 0).
    pub fn t_f_in_unit_interval(&self, tol: f64) -> bool {
        self.kind == TransitionType::A && self.t_f.is_some_and(|t| t.value >= -1.0 - tol && t.value < 0.0)
    }

    /// Flat-segment level within `k` standard errors of the reference.
    pub fn flat_level_within(&self, k: f64) -> bool {
        self.flat_median_sigma.is_some_and(|m| m <= k)
    }
}

/// Classify the curve from its maximal flat sub-grid interval.
pub fn classify_transition(curve: &PressureCurve) -> TransitionReport {
    let g = &curve.grid;
    let mut notes = Vec::new();
    let right_tail_sigma = g.last().map_or(0.0, |p| p.gap() / p.combined_stderr().max(1e-300));
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (i, p) in g.iter().enumerate() {
        match (p.is_flat(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, g.len() - 1));
    }
    let Some(&(a, b)) = runs.iter().max_by_key(|(a, b)| (b - a, std::cmp::Reverse(*a))) else {
        return TransitionReport {
            kind: TransitionType::None,
            t_f: None,
            j_interval: None,
            flat_worst_sigma: None,
            flat_median_sigma: None,
            right_tail_sigma,
            notes: vec!["no flat region".into()],
        };
    };
    if runs.len() > 1 {
        notes.push(format!("{} separate flat runs; using the longest", runs.len()));
    }
    let flat = &g[a..=b];
    let mut sigmas: Vec<f64> = flat.iter().map(|p| p.gap().abs() / p.combined_stderr().max(1e-300)).collect();
    sigmas.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let worst = *sigmas.last().unwrap();
    let median = if sigmas.len() % 2 == 1 {
        sigmas[sigmas.len() / 2]
    } else {
        0.5 * (sigmas[sigmas.len() / 2 - 1] + sigmas[sigmas.len() / 2])
    };
    let touches_left = a == 0;
    let touches_right = b == g.len() - 1;
    let kind = if touches_right {
        notes.push("inconclusive: extend grid/radius (flat region reaches the right end of the grid)".into());
        TransitionType::Inconclusive
    } else if touches_left {
        if right_tail_sigma >= EXISTENCE_SIGMAS {
            TransitionType::A
        } else {
            notes.push(format!(
                "inconclusive: extend grid/radius (right tail only {right_tail_sigma:.1} standard errors above the reference)"
            ));
            TransitionType::Inconclusive
        }
    } else {
        let rises_left = g[0].gap() / g[0].combined_stderr().max(1e-300) >= EXISTENCE_SIGMAS;
        if rises_left && right_tail_sigma >= EXISTENCE_SIGMAS {
            TransitionType::B
        } else {
            notes.push("inconclusive: extend grid/radius (bounded flat region without certified rise)".into());
            TransitionType::Inconclusive
        }
    };
    TransitionReport {
        kind,
        t_f: None,
        j_interval: Some((g[a].t, g[b].t)),
        flat_worst_sigma: Some(worst),
        flat_median_sigma: Some(median),
        right_tail_sigma,
        notes,
    }
}

/// Classification with the t_F bisection for type-A curves.
pub fn analyze(problem: &PressureProblem, curve: &PressureCurve) -> Result<TransitionReport> {
    let mut report = classify_transition(curve);
    if report.kind == TransitionType::A {
        report.t_f = Some(problem.find_t_f(curve, None)?);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeReport {
    /// Central differences (t, slope) at interior grid points.
    pub slopes: Vec<(f64, f64)>,
    /// Smallest second difference divided by the local standard error.
    pub min_second_difference_sigma: f64,
    pub convex: bool,
    /// One-sided slope just right of t_F, when supplied.
    pub slope_right_of_t_f: Option<f64>,
    pub slope_bound: Option<f64>,
    pub within_slope_bound: bool,
}

/// Finite-difference slopes and convexity of the curve. Slopes are capped
/// by `sup_f` when it is known.
pub fn derivative_diagnostics(curve: &PressureCurve, t_f: Option<f64>, sup_f: Option<f64>) -> DerivativeReport {
    let g = &curve.grid;
    let slopes: Vec<(f64, f64)> = g
        .windows(3)
        .map(|w| (w[1].t, (w[2].estimate.value - w[0].estimate.value) / (w[2].t - w[0].t)))
        .collect();
    let mut min_sigma = f64::INFINITY;
    for w in g.windows(3) {
        let (h1, h2) = (w[1].t - w[0].t, w[2].t - w[1].t);
        // second difference scaled to the unit-step form
        let d2 = ((w[2].estimate.value - w[1].estimate.value) / h2 - (w[1].estimate.value - w[0].estimate.value) / h1)
            * 0.5
            * (h1 + h2);
        let se = (w[0].estimate.stderr.powi(2) + 4.0 * w[1].estimate.stderr.powi(2) + w[2].estimate.stderr.powi(2)).sqrt();
        min_sigma = min_sigma.min(d2 / se.max(1e-300));
    }
    let slope_right_of_t_f = t_f.and_then(|tf| slopes.iter().find(|(t, _)| *t > tf).map(|s| s.1));
    let within = sup_f.is_none_or(|s| slopes.iter().all(|(_, d)| *d <= s + 1e-9 + 0.05 * s.abs()));
    DerivativeReport {
        slopes,
        min_second_difference_sigma: min_sigma,
        convex: min_sigma >= -2.0,
        slope_right_of_t_f,
        slope_bound: sup_f,
        within_slope_bound: within,
    }
}

/// Orbit of the n-th power cover with `spec` attached, plus its parabolic part.
pub fn weighted_cover_orbit(
    gens: &GeneratorSet,
    o: Point,
    spec: &PotentialSpec,
    n: u32,
    radius: f64,
) -> Result<(Vec<OrbitElement>, Vec<OrbitElement>)> {
    let cover = power_subgroup(gens, n, 1)?;
    let mut orbit = enumerate_ball(&cover, o, radius)?.elements;
    attach_weights(&mut orbit, spec, o, 1e-8)?;
    let parabolic = orbit.iter().filter(|e| e.word.uses_only(0)).cloned().collect();
    Ok((orbit, parabolic))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub n: u32,
    pub orbit_size: usize,
    pub curve: PressureCurve,
    pub report: TransitionReport,
    /// Exponent of −F on the cover is within 2 standard errors of the
    /// parabolic reference.
    pub collapsed: bool,
}

/// Pressure curves of `spec` on the covers Γ_n for each n.
pub fn slow_potential_sweep(
    gens: &GeneratorSet,
    o: Point,
    spec: &PotentialSpec,
    ns: &[u32],
    grid: &[f64],
    radius: f64,
    window: WindowOptions,
) -> Result<Vec<SweepEntry>> {
    ns.iter()
        .map(|&n| {
            let (orbit, parabolic) = weighted_cover_orbit(gens, o, spec, n, radius)?;
            let problem = PressureProblem { orbit: &orbit, parabolic: &parabolic, radius, window };
            let curve = problem.curve(grid, "slow", &format!("power-{n}"))?;
            let report = analyze(&problem, &curve)?;
            let at = problem.point(-1.0)?;
            Ok(SweepEntry {
                n,
                orbit_size: orbit.len(),
                collapsed: at.gap().abs() <= 2.0 * at.combined_stderr(),
                curve,
                report,
            })
        })
        .collect()
}

/// Effective pinching of the modified cusp.
pub const PINCH_A: f64 = 2.0;
pub const PINCH_B: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SandwichRow {
    pub t: f64,
    pub pressure: f64,
    pub stderr: f64,
    pub lower: f64,
    pub upper: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometricReport {
    pub n: u32,
    pub m: u32,
    pub orbit_size: usize,
    /// t ↦ P(tF) with F = −U.
    pub normalized: PressureCurve,
    /// t ↦ P(tF^su).
    pub geometric: PressureCurve,
    pub report: TransitionReport,
    pub sandwich: Vec<SandwichRow>,
    /// Every element of the Γ_{1,m} ball with a cusp excursion has ∫F > 0.
    pub positivity_holds: bool,
    pub notes: Vec<String>,
}

/// h_top − a t − 2σ ≤ P(tF^su) ≤ h_top − b t + 2σ for t ≥ 0 on the grid.
pub fn sandwich(curve: &PressureCurve) -> Vec<SandwichRow> {
    let h = curve.delta_gamma.value;
    curve
        .grid
        .iter()
        .filter(|p| p.t >= 0.0)
        .map(|p| {
            let se = p.estimate.stderr.hypot(curve.delta_gamma.stderr);
            let (lower, upper) = (h - PINCH_A * p.t, h - PINCH_B * p.t);
            SandwichRow {
                t: p.t,
                pressure: p.estimate.value,
                stderr: se,
                lower,
                upper,
                passed: p.estimate.value >= lower - 2.0 * se && p.estimate.value <= upper + 2.0 * se,
            }
        })
        .collect()
}

/// Split glued orbit data into (F = −U, F^su) weighted orbits.
fn glued_weights(glued: &[crate::dynamics::GluedElement]) -> (Vec<OrbitElement>, Vec<OrbitElement>) {
    (weighted_orbit(glued, |u, _| -u), weighted_orbit(glued, |u, d| u - d))
}

/// Pressure of F = −U and of F^su on the glued surface for Γ_{n,m}.
pub fn geometric_experiment(
    surface: &GluedSurface,
    n: u32,
    m: u32,
    grid: &[f64],
    radius: f64,
    window: WindowOptions,
) -> Result<GeometricReport> {
    let mut notes = Vec::new();
    let base = surface.gens.clone();
    // positivity of ∫F over Γ_{1,m}
    let check = surface.with_generators(power_subgroup(&base, 1, m)?).orbit(radius.min(10.0))?;
    let positivity_holds = check.iter().all(|g| g.chords == 0 || g.u_integral < 0.0);
    if !positivity_holds {
        notes.push(format!("increase m: ∫F ≤ 0 on some element of the Γ(1, {m}) ball"));
    }
    let glued = surface.with_generators(power_subgroup(&base, n, m)?).orbit(radius)?;
    let (f_orbit, su_orbit) = glued_weights(&glued);
    let par = |o: &[OrbitElement]| -> Vec<OrbitElement> { o.iter().filter(|e| e.word.uses_only(0)).cloned().collect() };
    let (f_par, su_par) = (par(&f_orbit), par(&su_orbit));
    let group_id = format!("glued-{n}-{m}");
    let f_problem = PressureProblem { orbit: &f_orbit, parabolic: &f_par, radius, window };
    let normalized = f_problem.curve(grid, "normalized-U", &group_id)?;
    let report = analyze(&f_problem, &normalized)?;
    let su_problem = PressureProblem { orbit: &su_orbit, parabolic: &su_par, radius, window };
    let geometric = su_problem.curve(grid, "geometric", &group_id)?;
    let sandwich = sandwich(&geometric);
    if report.kind == TransitionType::A && !report.t_f_in_unit_interval(0.05) {
        notes.push("type A but t_F outside [−1, 0)".into());
    }
    Ok(GeometricReport {
        n,
        m,
        orbit_size: glued.len(),
        normalized,
        geometric,
        report,
        sandwich,
        positivity_holds,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::Word;
    use crate::hyperbolic::Isometry;

    /// Synthetic orbit: N(R) ≈ e^{δR} points with weight w(d).
    fn synthetic(delta: f64, radius: f64, weight: impl Fn(f64) -> f64) -> Vec<OrbitElement> {
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            // the k-th point sits at d = ln(k + 1)/δ
            let d = ((k + 1) as f64).ln() / delta;
            if d > radius {
                break;
            }
            out.push(OrbitElement {
                word: Word::single(0, k as i64 + 1),
                matrix: Isometry::identity(),
                displacement: d,
                weight_cache: Some(weight(d)),
            });
            k += 1;
        }
        out
    }

    fn point(t: f64, p: f64, r: f64, se: f64) -> CurvePoint {
        let est = |v| ExponentEstimate {
            value: v,
            stderr: se,
            window: (0.0, 1.0),
            method: crate::series::Method::CountingSlope,
            low_confidence: false,
            cross_check: None,
        };
        CurvePoint { t, estimate: est(p), reference: est(r) }
    }

    fn curve_of(points: Vec<CurvePoint>) -> PressureCurve {
        PressureCurve {
            delta_p: points[0].reference,
            delta_gamma: points[0].estimate,
            grid: points,
            radius: 1.0,
            potential_id: "synthetic".into(),
            group_id: "synthetic".into(),
        }
    }

    #[test]
    fn zero_potential_gives_flat_curve_and_no_transition() {
        let orbit = synthetic(0.8, 12.0, |_| 0.0);
        let par = synthetic(0.5, 12.0, |_| 0.0);
        let prob = PressureProblem { orbit: &orbit, parabolic: &par, radius: 12.0, window: WindowOptions::default() };
        let c = prob.curve(&t_grid(-1.0, 1.0, 0.25), "zero", "synthetic").unwrap();
        for p in &c.grid {
            assert!((p.estimate.value - c.delta_gamma.value).abs() < 1e-9);
        }
        assert!((c.delta_gamma.value - 0.8).abs() < 0.02);
        assert_eq!(classify_transition(&c).kind, TransitionType::None);
        assert!(matches!(prob.find_t_f(&c, None), Err(Error::NoTransition)));
    }

    #[test]
    fn synthetic_knee_is_located() {
        // P(t) = max(0.5, 0.5 + 0.3 (t + 0.4)) and a flat reference at 0.5
        let knee = -0.4;
        let pts: Vec<CurvePoint> = t_grid(-1.5, 0.5, 0.05)
            .into_iter()
            .map(|t| point(t, 0.5 + (0.3 * (t - knee)).max(0.0), 0.5, 1e-4))
            .collect();
        let c = curve_of(pts);
        let r = classify_transition(&c);
        assert_eq!(r.kind, TransitionType::A);
        // predicate gap > ε with ε = 0.01 puts the edge 1/30 right of the knee
        let edge = knee + 0.01 / 0.3;
        let g = &c.grid;
        let i = g.iter().rposition(|p| p.is_flat()).unwrap();
        assert!(g[i].t <= edge && g[i + 1].t > edge);
        assert!(r.flat_level_within(2.0));
    }

    #[test]
    fn bisection_on_synthetic_orbit() {
        let par = synthetic(0.5, 14.0, |_| 0.0);
        let mut orbit = par.clone();
        let heavy = synthetic(0.3, 14.0, |d| d);
        orbit.extend(heavy.into_iter().map(|mut e| {
            e.weight_cache = Some(e.displacement);
            e
        }));
        orbit.sort_by(|a, b| a.displacement.partial_cmp(&b.displacement).unwrap());
        // heavy part has exponent 0.3 + t, which exceeds 0.5 for t > 0.2
        let prob = PressureProblem { orbit: &orbit, parabolic: &par, radius: 14.0, window: WindowOptions::default() };
        let c = prob.curve(&t_grid(-1.0, 1.0, 0.1), "heavy", "synthetic").unwrap();
        let r = analyze(&prob, &c).unwrap();
        assert_eq!(r.kind, TransitionType::A, "{r:?}");
        let tf = r.t_f.unwrap();
        assert!(tf.half_width <= T_RESOLUTION + 1e-12);
        assert!(tf.value > 0.1 && tf.value < 0.35, "{tf:?}");
    }

    #[test]
    fn synthetic_orbit_knee_at_minus_point_four() {
        let radius = 12.0;
        let par = synthetic(0.5, radius, |_| 0.0);
        let mut orbit = par.clone();
        orbit.extend(synthetic(0.9, radius, |d| d));
        orbit.sort_by(|a, b| a.displacement.partial_cmp(&b.displacement).unwrap());
        let prob = PressureProblem { orbit: &orbit, parabolic: &par, radius, window: WindowOptions::default() };
        let c = prob.curve(&t_grid(-1.5, 0.5, 0.1), "knee", "synthetic").unwrap();
        let r = analyze(&prob, &c).unwrap();
        assert_eq!(r.kind, TransitionType::A, "{r:?}");
        let tf = r.t_f.unwrap();
        assert!((tf.value + 0.4).abs() <= 0.02 + 1e-9, "{tf:?}");
    }

    #[test]
    fn bounded_flat_region_is_type_b() {
        let pts: Vec<CurvePoint> = t_grid(-2.0, 1.0, 0.1)
            .into_iter()
            .map(|t| point(t, 0.5 + (0.4 * (-1.2 - t)).max(0.0) + (0.5 * (t + 0.3)).max(0.0), 0.5, 1e-4))
            .collect();
        let r = classify_transition(&curve_of(pts));
        assert_eq!(r.kind, TransitionType::B);
        let (a, b) = r.j_interval.unwrap();
        assert!(a <= -1.1 && b >= -0.4);
    }

    #[test]
    fn flat_to_the_right_end_is_inconclusive() {
        let pts: Vec<CurvePoint> = t_grid(-1.0, 0.5, 0.1)
            .into_iter()
            .map(|t| point(t, 0.5 + (0.4 * (-0.8 - t)).max(0.0), 0.5, 1e-4))
            .collect();
        let r = classify_transition(&curve_of(pts));
        assert_eq!(r.kind, TransitionType::Inconclusive);
        assert!(r.notes[0].starts_with("inconclusive: extend grid/radius"));
    }

    #[test]
    fn convexity_and_slopes() {
        let pts: Vec<CurvePoint> = t_grid(-1.0, 1.0, 0.05)
            .into_iter()
            .map(|t| point(t, 0.5 + 0.2 * t * t + 0.1 * t, 0.5, 1e-5))
            .collect();
        let c = curve_of(pts);
        let d = derivative_diagnostics(&c, None, Some(0.6));
        assert!(d.convex && d.within_slope_bound);
        for (t, s) in &d.slopes {
            assert!((s - (0.4 * t + 0.1)).abs() < 1e-9);
        }
        let concave = curve_of(t_grid(-1.0, 1.0, 0.05).into_iter().map(|t| point(t, -t * t, 0.0, 1e-5)).collect());
        assert!(!derivative_diagnostics(&concave, None, None).convex);
    }

    #[test]
    fn csv_and_svg_outputs() {
        let c = curve_of(t_grid(-1.0, 0.0, 0.5).into_iter().map(|t| point(t, 0.6 + t, 0.5, 1e-3)).collect());
        let mut csv = Vec::new();
        c.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv.lines().next(), Some("t,P_estimate,stderr,R_used,flag"));
        assert_eq!(csv.lines().count(), 4);
        let mut svg = Vec::new();
        c.write_svg(&mut svg, "a < b").unwrap();
        let svg = String::from_utf8(svg).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>") && svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}

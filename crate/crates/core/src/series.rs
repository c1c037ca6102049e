//! Poincaré series, growth-rate estimators for (weighted) critical
//! exponents, convergence-type diagnostics and the Gibbs cocycle.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::groups::OrbitElement;
use crate::hyperbolic::{integrate_along, Point, Potential};
use crate::numerics::{bisect, fit_line, CompensatedSum, LineFit};

/// Largest exponent accepted before a term is considered an overflow.
const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesEstimate {
    pub value: f64,
    pub radius: f64,
    pub terms: usize,
    /// Bound on the omitted tail, when a growth rate below `s` is known.
    pub tail_bound: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    CountingSlope,
    Bisection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentEstimate {
    pub value: f64,
    pub stderr: f64,
    pub window: (f64, f64),
    pub method: Method,
    pub low_confidence: bool,
    /// Stabilization abscissa from the bisection cross-check.
    pub cross_check: Option<f64>,
}

fn terms_up_to(orbit: &[OrbitElement], radius: f64) -> &[OrbitElement] {
    let n = orbit.partition_point(|e| e.displacement <= radius);
    &orbit[..n]
}

fn checked_exp(x: f64) -> Result<f64> {
    if x > MAX_EXPONENT || x.is_nan() {
        return Err(Error::SeriesOverflow);
    }
    Ok(x.exp())
}

/// `Σ_{d(o,γo) ≤ R} e^{−s d(o,γo)}`; `orbit` must be sorted by displacement.
pub fn poincare_sum(orbit: &[OrbitElement], s: f64, radius: f64) -> Result<SeriesEstimate> {
    let terms = terms_up_to(orbit, radius);
    let mut sum = CompensatedSum::new();
    for e in terms {
        sum.add(checked_exp(-s * e.displacement)?);
    }
    let tail_bound = growth_tail_bound(terms, s, radius);
    Ok(SeriesEstimate { value: sum.value(), radius, terms: terms.len(), tail_bound })
}

/// Tail `∫_R^∞ e^{−sr} dN(r)` under the fitted model `N(r) ≈ C e^{δr}`.
fn growth_tail_bound(terms: &[OrbitElement], s: f64, radius: f64) -> Option<f64> {
    if terms.len() < 20 || radius < 4.0 {
        return None;
    }
    let counts = count_samples(terms, 0.0, radius, 64);
    let est = critical_exponent(&counts).ok()?;
    let delta = est.value + 2.0 * est.stderr;
    if s <= delta {
        return None;
    }
    let c = terms.len() as f64 * (-delta * radius).exp();
    Some(c * delta / (s - delta) * ((delta - s) * radius).exp())
}

/// `Σ_{d ≤ R} e^{∫_o^{γo}F − s d}` with the weights taken from `weight_cache`.
pub fn weighted_poincare_sum(orbit: &[OrbitElement], s: f64, radius: f64) -> Result<SeriesEstimate> {
    let terms = terms_up_to(orbit, radius);
    let mut sum = CompensatedSum::new();
    for e in terms {
        let w = e
            .weight_cache
            .ok_or_else(|| Error::MissingWeight(format!("{}", e.word)))?;
        sum.add(checked_exp(w - s * e.displacement)?);
    }
    Ok(SeriesEstimate { value: sum.value(), radius, terms: terms.len(), tail_bound: None })
}

/// Fills `weight_cache` with `∫_o^{γo} F` for every element.
pub fn attach_weights<P: Potential + Sync>(orbit: &mut [OrbitElement], f: &P, o: Point, tol: f64) -> Result<()> {
    use rayon::prelude::*;
    orbit.par_iter_mut().try_for_each(|e| {
        let target = e.matrix.apply(o)?;
        e.weight_cache = Some(integrate_along(f, o, target, tol)?);
        Ok(())
    })
}

/// `(R_i, N(R_i))` on an even grid of `samples` radii in `(r_min, r_max]`.
pub fn count_samples(orbit: &[OrbitElement], r_min: f64, r_max: f64, samples: usize) -> Vec<(f64, usize)> {
    (1..=samples)
        .map(|i| {
            let r = r_min + (r_max - r_min) * i as f64 / samples as f64;
            (r, orbit.partition_point(|e| e.displacement <= r))
        })
        .collect()
}

/// Growth rate of the counting function from `(R, N(R))` samples: the
/// least-squares slope of `log N` against `R` over the upper half of the
/// window, cross-checked by bisection on the stabilization of partial sums.
pub fn critical_exponent(counts: &[(f64, usize)]) -> Result<ExponentEstimate> {
    if counts.len() < 10 {
        return Err(Error::InvalidCountingData(format!("{} sample radii, need 10", counts.len())));
    }
    let (r0, r1) = (counts[0].0, counts[counts.len() - 1].0);
    if r1 - r0 < 4.0 {
        return Err(Error::InvalidCountingData(format!("window width {} < 4", r1 - r0)));
    }
    for w in counts.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::InvalidCountingData("radii not increasing".into()));
        }
        if w[1].1 < w[0].1 {
            return Err(Error::InvalidCountingData(format!("N decreases at R = {}", w[1].0)));
        }
    }
    let mid = 0.5 * (r0 + r1);
    let upper: Vec<&(f64, usize)> = counts.iter().filter(|(r, _)| *r >= mid).collect();
    if upper.iter().any(|(_, n)| *n == 0) {
        return Err(Error::InvalidCountingData("empty ball in the fitting window".into()));
    }
    let xs: Vec<f64> = upper.iter().map(|(r, _)| *r).collect();
    let ys: Vec<f64> = upper.iter().map(|(_, n)| (*n as f64).ln()).collect();
    let fit = fit_line(&xs, &ys)
        .ok_or_else(|| Error::InvalidCountingData("degenerate fitting window".into()))?;
    Ok(ExponentEstimate {
        value: fit.slope,
        stderr: fit.slope_stderr,
        window: (xs[0], xs[xs.len() - 1]),
        method: Method::CountingSlope,
        low_confidence: xs.len() < 5,
        cross_check: stabilization_abscissa(counts),
    })
}

/// Smallest `s` whose partial sums, built from the counting increments,
/// grow by less than `1e−4` (relative) over the last tenth of the radii.
fn stabilization_abscissa(counts: &[(f64, usize)]) -> Option<f64> {
    let r_max = counts.last()?.0;
    let partial = |s: f64, upto: f64| -> f64 {
        let mut sum = CompensatedSum::new();
        let mut prev = 0usize;
        for &(r, n) in counts.iter().take_while(|(r, _)| *r <= upto) {
            sum.add((n - prev) as f64 * (-s * r).exp());
            prev = n;
        }
        sum.value()
    };
    let incr = |s: f64| -> Result<f64> {
        let full = partial(s, r_max);
        let early = partial(s, 0.9 * r_max);
        Ok((full - early) / full - 1e-4)
    };
    bisect(incr, 0.0, 10.0, 1e-6, 200).ok()
}

/// Cumulative `log Σ_{d ≤ R_i} e^{t·w}` on the radius grid.
pub fn log_weighted_counts(orbit: &[OrbitElement], t: f64, radii: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(radii.len());
    let shift = orbit
        .iter()
        .take_while(|e| e.displacement <= radii.last().copied().unwrap_or(0.0))
        .map(|e| e.weight_cache.map(|w| t * w))
        .try_fold(f64::NEG_INFINITY, |m, w| w.map(|w| m.max(w)))
        .ok_or_else(|| Error::MissingWeight("weighted count".into()))?;
    let mut sum = CompensatedSum::new();
    let mut idx = 0;
    for &r in radii {
        while idx < orbit.len() && orbit[idx].displacement <= r {
            let w = orbit[idx].weight_cache.ok_or_else(|| Error::MissingWeight(format!("{}", orbit[idx].word)))?;
            sum.add(checked_exp(t * w - shift)?);
            idx += 1;
        }
        out.push(sum.value().ln() + shift);
    }
    Ok(out)
}

/// Options for [`weighted_critical_exponent`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowOptions {
    /// Fixed fitting window; chosen automatically when `None`.
    pub window: Option<(f64, f64)>,
    /// Automatic selection: largest suffix window with RMS residual below this.
    pub max_rms: f64,
    pub min_width: f64,
    pub samples: usize,
}

impl Default for WindowOptions {
    fn default() -> Self {
        WindowOptions { window: None, max_rms: 0.02, min_width: 4.0, samples: 200 }
    }
}

/// Growth rate of `R ↦ log Σ_{d ≤ R} e^{t∫F}`, the estimate of `P(tF)`.
pub fn weighted_critical_exponent(
    orbit: &[OrbitElement],
    t: f64,
    radius: f64,
    opts: &WindowOptions,
) -> Result<ExponentEstimate> {
    let samples = opts.samples.max(20);
    let radii: Vec<f64> = (1..=samples).map(|i| radius * i as f64 / samples as f64).collect();
    let logs = log_weighted_counts(orbit, t, &radii)?;
    let fit_window = |lo: f64, hi: f64| -> Option<(LineFit, (f64, f64))> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = radii
            .iter()
            .zip(&logs)
            .filter(|(r, l)| **r >= lo && **r <= hi && l.is_finite())
            .map(|(r, l)| (*r, *l))
            .unzip();
        let w = (*xs.first()?, *xs.last()?);
        fit_line(&xs, &ys).map(|f| (f, w))
    };
    let (fit, window, low) = match opts.window {
        Some((lo, hi)) => {
            let (f, w) = fit_window(lo, hi).ok_or_else(|| Error::InvalidCountingData("empty window".into()))?;
            (f, w, hi - lo < opts.min_width)
        }
        None => {
            // grow the suffix window from the minimal width while the fit stays good
            let mut best = None;
            let mut lo = radius - opts.min_width;
            while lo >= 0.5 * radius - 1e-9 {
                match fit_window(lo, radius) {
                    Some((f, w)) if f.rms_residual < opts.max_rms => best = Some((f, w)),
                    Some(_) => break,
                    None => {}
                }
                lo -= radius / samples as f64;
            }
            match best {
                Some((f, w)) => (f, w, false),
                None => {
                    let (f, w) = fit_window(radius - opts.min_width, radius)
                        .ok_or_else(|| Error::InvalidCountingData("empty window".into()))?;
                    (f, w, true)
                }
            }
        }
    };
    Ok(ExponentEstimate {
        value: fit.slope,
        stderr: fit.slope_stderr,
        window,
        method: Method::CountingSlope,
        low_confidence: low,
        cross_check: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Converges,
    Diverges,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    pub verdict: Verdict,
    /// Exponential model `log m_j = c − α j`.
    pub alpha: f64,
    pub alpha_stderr: f64,
    pub rms_exponential: f64,
    /// Power model `log m_j = c − β log j`.
    pub beta: f64,
    pub rms_power: f64,
    /// Annulus masses `Σ_{j ≤ d < j+1} e^{t w − δ d}`.
    pub annuli: Vec<(f64, f64)>,
}

/// Convergence type of `Σ e^{t∫F − δ d}` from the shape of its annulus masses.
pub fn convergence_diagnostic(orbit: &[OrbitElement], t: f64, delta: f64, radius: f64) -> Result<TailReport> {
    let n_annuli = radius.floor() as usize;
    let mut masses = vec![CompensatedSum::new(); n_annuli];
    for e in terms_up_to(orbit, radius) {
        let j = e.displacement.floor() as usize;
        if j >= n_annuli {
            continue;
        }
        let w = match e.weight_cache {
            Some(w) => t * w,
            None if t == 0.0 => 0.0,
            None => return Err(Error::MissingWeight(format!("{}", e.word))),
        };
        masses[j].add(checked_exp(w - delta * e.displacement)?);
    }
    // skip the transient first quarter
    let start = (n_annuli / 4).max(1);
    let annuli: Vec<(f64, f64)> = masses
        .iter()
        .enumerate()
        .skip(start)
        .filter(|(_, m)| m.value() > 0.0)
        .map(|(j, m)| (j as f64, m.value()))
        .collect();
    let empty = TailReport {
        verdict: Verdict::Inconclusive,
        alpha: f64::NAN,
        alpha_stderr: f64::NAN,
        rms_exponential: f64::NAN,
        beta: f64::NAN,
        rms_power: f64::NAN,
        annuli: annuli.clone(),
    };
    if annuli.len() < 6 {
        return Ok(empty);
    }
    let js: Vec<f64> = annuli.iter().map(|(j, _)| *j + 0.5).collect();
    let logs: Vec<f64> = annuli.iter().map(|(_, m)| m.ln()).collect();
    let log_js: Vec<f64> = js.iter().map(|j| j.ln()).collect();
    let (Some(exp_fit), Some(pow_fit)) = (fit_line(&js, &logs), fit_line(&log_js, &logs)) else {
        return Ok(empty);
    };
    let alpha = -exp_fit.slope;
    let beta = -pow_fit.slope;
    let exp_verdict = if alpha > 3.0 * exp_fit.slope_stderr && alpha > 0.0 {
        Verdict::Converges
    } else {
        Verdict::Diverges
    };
    let pow_verdict = if beta > 1.0 { Verdict::Converges } else { Verdict::Diverges };
    let (re, rp) = (exp_fit.rms_residual, pow_fit.rms_residual);
    let verdict = if exp_verdict == pow_verdict {
        exp_verdict
    } else if re.max(rp) <= 2.0 * re.min(rp) {
        Verdict::Inconclusive
    } else if re < rp {
        exp_verdict
    } else {
        pow_verdict
    };
    Ok(TailReport {
        verdict,
        alpha,
        alpha_stderr: exp_fit.slope_stderr,
        rms_exponential: re,
        beta,
        rms_power: rp,
        annuli,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CocycleEstimate {
    pub value: f64,
    /// `|C(2T) − C(T)|`.
    pub increment: f64,
    /// False when the increment did not shrink from `[T/2, T]` to `[T, 2T]`.
    pub converging: bool,
}

/// Truncated Gibbs cocycle `∫_y^{ξ} F − ∫_x^{ξ} F` with ξ at height `T` on
/// the vertical rays through `x` and `y`.
pub fn gibbs_cocycle<P: Potential + ?Sized>(f: &P, x: Point, y: Point, truncation: f64, tol: f64) -> Result<CocycleEstimate> {
    if truncation < 1.0 {
        return Err(Error::InvalidArgument("truncation height must be at least 1".into()));
    }
    let at = |t: f64| -> Result<f64> {
        let top = t.max(x.height()).max(y.height());
        let from_y = integrate_along(f, y, Point::at_height(y.x, top), tol)?;
        let from_x = integrate_along(f, x, Point::at_height(x.x, top), tol)?;
        Ok(from_y - from_x)
    };
    let half = at(0.5 * truncation)?;
    let full = at(truncation)?;
    let double = at(2.0 * truncation)?;
    let increment = (double - full).abs();
    let converging = increment <= (full - half).abs() + 4.0 * tol * (1.0 + truncation);
    Ok(CocycleEstimate { value: double, increment, converging })
}

/// CSV of `(R, N(R), partial sums at each s)`.
pub fn write_counts_csv<W: Write>(out: &mut W, orbit: &[OrbitElement], radii: &[f64], exponents: &[f64]) -> Result<()> {
    write!(out, "R,N")?;
    for s in exponents {
        write!(out, ",partial_sum_s{s}")?;
    }
    writeln!(out)?;
    for &r in radii {
        let n = orbit.partition_point(|e| e.displacement <= r);
        write!(out, "{r},{n}")?;
        for &s in exponents {
            write!(out, ",{:.12e}", poincare_sum(orbit, s, r)?.value)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

//! Small numerical kernels shared across the crate: compensated summation,
//! adaptive Simpson quadrature, least-squares lines, an embedded
//! Runge–Kutta integrator and bracketing root finders.

use crate::error::{Error, Result};

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

/// Node cap for one adaptive quadrature call.
pub const QUADRATURE_NODE_BUDGET: usize = 1 << 16;

/// Adaptive Simpson quadrature with Richardson correction.
///
/// The returned value satisfies `|error| <= tol` for integrands that are
/// piecewise smooth; the function evaluation count is capped by
/// [`QUADRATURE_NODE_BUDGET`].
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    if a == b {
        return Ok(0.0);
    }
    let fa = checked(f(a)?)?;
    let fm = checked(f(0.5 * (a + b))?)?;
    let fb = checked(f(b)?)?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut nodes = 3usize;
    let mut acc = CompensatedSum::new();
    // explicit stack: (a, b, fa, fm, fb, whole, tol, depth)
    let mut stack = vec![(a, b, fa, fm, fb, whole, tol, 0u32)];
    while let Some((a, b, fa, fm, fb, whole, tol, depth)) = stack.pop() {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = checked(f(lm)?)?;
        let frm = checked(f(rm)?)?;
        nodes += 2;
        if nodes > QUADRATURE_NODE_BUDGET {
            return Err(Error::QuadratureBudget(nodes));
        }
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth >= 48 || delta.abs() <= 15.0 * tol {
            acc.add(left + right + delta / 15.0);
        } else {
            stack.push((a, m, fa, flm, fm, left, 0.5 * tol, depth + 1));
            stack.push((m, b, fm, frm, fb, right, 0.5 * tol, depth + 1));
        }
    }
    Ok(acc.value())
}

/// Adaptive Simpson over consecutive breakpoints, splitting the tolerance
/// proportionally to sub-interval length.
pub fn adaptive_simpson_pieces<F>(f: F, cuts: &[f64], tol: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let total = cuts.last().copied().unwrap_or(0.0) - cuts.first().copied().unwrap_or(0.0);
    let mut acc = CompensatedSum::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let share = if total > 0.0 { tol * (b - a) / total } else { tol };
        acc.add(adaptive_simpson(&f, a, b, share.max(1e-15))?);
    }
    Ok(acc.value())
}

fn checked(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::PotentialEvaluation(format!("non-finite sample {v}")))
    }
}

/// Ordinary least-squares line fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    /// Root-mean-square residual.
    pub rms_residual: f64,
    pub n: usize,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let slope_stderr = if n > 2 {
        (ss / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some(LineFit {
        slope,
        intercept,
        slope_stderr,
        rms_residual: (ss / nf).sqrt(),
        n,
    })
}

/// Bisection on a sign change; `f(lo)` and `f(hi)` must differ in sign.
pub fn bisect<F>(mut f: F, mut lo: f64, mut hi: f64, xtol: f64, max_iter: usize) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut flo = f(lo)?;
    let fhi = f(hi)?;
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::InvalidArgument(format!(
            "bisection bracket [{lo}, {hi}] has no sign change ({flo}, {fhi})"
        )));
    }
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        if (hi - lo).abs() <= xtol {
            return Ok(mid);
        }
        let fm = f(mid)?;
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Illinois regula falsi on a sign change, stopping when |f| ≤ ftol or the
/// bracket is narrower than xtol.
pub fn illinois<F>(mut f: F, mut lo: f64, mut hi: f64, xtol: f64, ftol: f64, max_iter: usize) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut flo = f(lo)?;
    let mut fhi = f(hi)?;
    if flo.abs() <= ftol {
        return Ok(lo);
    }
    if fhi.abs() <= ftol {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::InvalidArgument(format!(
            "bracket [{lo}, {hi}] has no sign change ({flo}, {fhi})"
        )));
    }
    let mut side = 0i8;
    for _ in 0..max_iter {
        let x = (lo * fhi - hi * flo) / (fhi - flo);
        let x = if x > lo.min(hi) && x < lo.max(hi) { x } else { 0.5 * (lo + hi) };
        let fx = f(x)?;
        if fx.abs() <= ftol || (hi - lo).abs() <= xtol {
            return Ok(x);
        }
        if fx.signum() == fhi.signum() {
            hi = x;
            fhi = fx;
            if side == -1 {
                flo *= 0.5;
            }
            side = -1;
        } else {
            lo = x;
            flo = fx;
            if side == 1 {
                fhi *= 0.5;
            }
            side = 1;
        }
    }
    Ok((lo * fhi - hi * flo) / (fhi - flo))
}

/// Step control for [`dormand_prince`].
#[derive(Debug, Clone, Copy)]
pub struct StepControl {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_max: f64,
    pub h_min: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            rtol: 1e-11,
            atol: 1e-12,
            h_init: 1e-2,
            h_max: 0.1,
            h_min: 1e-13,
        }
    }
}

/// One accepted step of an embedded Dormand–Prince 5(4) pair.
///
/// Returns `(new_state, error_norm)` for a trial step of size `h`.
pub fn dp_step<const N: usize, F>(f: &F, t: f64, y: &[f64; N], h: f64, ctl: &StepControl) -> ([f64; N], f64)
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    const C2: f64 = 1.0 / 5.0;
    const C3: f64 = 3.0 / 10.0;
    const C4: f64 = 4.0 / 5.0;
    const C5: f64 = 8.0 / 9.0;
    let axpy = |base: &[f64; N], terms: &[(f64, &[f64; N])]| {
        let mut out = *base;
        for (c, k) in terms {
            for i in 0..N {
                out[i] += h * c * k[i];
            }
        }
        out
    };
    let k1 = f(t, y);
    let k2 = f(t + C2 * h, &axpy(y, &[(1.0 / 5.0, &k1)]));
    let k3 = f(t + C3 * h, &axpy(y, &[(3.0 / 40.0, &k1), (9.0 / 40.0, &k2)]));
    let k4 = f(
        t + C4 * h,
        &axpy(y, &[(44.0 / 45.0, &k1), (-56.0 / 15.0, &k2), (32.0 / 9.0, &k3)]),
    );
    let k5 = f(
        t + C5 * h,
        &axpy(
            y,
            &[
                (19372.0 / 6561.0, &k1),
                (-25360.0 / 2187.0, &k2),
                (64448.0 / 6561.0, &k3),
                (-212.0 / 729.0, &k4),
            ],
        ),
    );
    let k6 = f(
        t + h,
        &axpy(
            y,
            &[
                (9017.0 / 3168.0, &k1),
                (-355.0 / 33.0, &k2),
                (46732.0 / 5247.0, &k3),
                (49.0 / 176.0, &k4),
                (-5103.0 / 18656.0, &k5),
            ],
        ),
    );
    let y5 = axpy(
        y,
        &[
            (35.0 / 384.0, &k1),
            (500.0 / 1113.0, &k3),
            (125.0 / 192.0, &k4),
            (-2187.0 / 6784.0, &k5),
            (11.0 / 84.0, &k6),
        ],
    );
    let k7 = f(t + h, &y5);
    let e = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let mut err = 0.0f64;
    for i in 0..N {
        let ei = h
            * (e[0] * k1[i] + e[2] * k3[i] + e[3] * k4[i] + e[4] * k5[i] + e[5] * k6[i] + e[6] * k7[i]);
        let sc = ctl.atol + ctl.rtol * y[i].abs().max(y5[i].abs());
        err = err.max((ei / sc).abs());
    }
    (y5, err)
}

/// Integrate `y' = f(t, y)` from `t0` to `t1` (forward), calling `observe`
/// after every accepted step. `observe` may return `false` to stop early.
pub fn dormand_prince<const N: usize, F, O>(
    f: F,
    t0: f64,
    y0: [f64; N],
    t1: f64,
    ctl: &StepControl,
    mut observe: O,
) -> Result<(f64, [f64; N])>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
    O: FnMut(f64, &[f64; N]) -> bool,
{
    let mut t = t0;
    let mut y = y0;
    let mut h = ctl.h_init.min(ctl.h_max).min(t1 - t0);
    if t1 <= t0 {
        return Ok((t, y));
    }
    while t < t1 {
        if t + h > t1 {
            h = t1 - t;
        }
        let (yn, err) = dp_step(&f, t, &y, h, ctl);
        if err <= 1.0 || h <= ctl.h_min {
            if !yn.iter().all(|v| v.is_finite()) {
                return Err(Error::StepUnderflow(t));
            }
            t += h;
            y = yn;
            if !observe(t, &y) {
                break;
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * fac).min(ctl.h_max);
        } else {
            h *= (0.9 * err.powf(-0.25)).clamp(0.1, 0.9);
            if h < ctl.h_min {
                return Err(Error::StepUnderflow(t));
            }
        }
    }
    Ok((t, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_beats_naive() {
        let mut xs = vec![1.0];
        xs.extend(std::iter::repeat_n(1e-16, 10_000));
        let naive: f64 = xs.iter().sum();
        let comp = compensated_sum(xs.iter().copied());
        assert_eq!(naive, 1.0);
        assert!((comp - (1.0 + 1e-12)).abs() < 1e-15);
    }

    #[test]
    fn simpson_integrates_kinked_function() {
        let v = adaptive_simpson(|x| Ok((x - 0.3).abs()), 0.0, 1.0, 1e-10).unwrap();
        let exact = 0.5 * 0.3 * 0.3 + 0.5 * 0.7 * 0.7;
        assert!((v - exact).abs() < 1e-9);
    }

    #[test]
    fn simpson_rejects_nan() {
        let r = adaptive_simpson(|_| Ok(f64::NAN), 0.0, 1.0, 1e-8);
        assert!(matches!(r, Err(Error::PotentialEvaluation(_))));
    }

    #[test]
    fn line_fit_exact() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let fit = fit_line(&xs, &ys).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept + 1.0).abs() < 1e-12);
        assert!(fit.slope_stderr < 1e-10);
    }

    #[test]
    fn dormand_prince_harmonic_oscillator() {
        let f = |_t: f64, y: &[f64; 2]| [y[1], -y[0]];
        let (_, y) = dormand_prince(f, 0.0, [1.0, 0.0], 10.0, &StepControl::default(), |_, _| true).unwrap();
        assert!((y[0] - 10f64.cos()).abs() < 1e-8);
        assert!((y[1] + 10f64.sin()).abs() < 1e-8);
    }

    #[test]
    fn bisect_finds_sqrt2() {
        let r = bisect(|x| Ok(x * x - 2.0), 0.0, 2.0, 1e-14, 200).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
    }
}

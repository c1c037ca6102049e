//! Height-profile potentials near the cusp, the slowly decaying potential
//! built from parabolic tail estimates, and membership checks for the class
//! of potentials going slowly to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{GeneratorSet, OrbitElement, Word};
use crate::hyperbolic::{integrate_along, Isometry, Point, Potential};
use crate::series::{convergence_diagnostic, TailReport, Verdict};

/// Piecewise-linear profile in the height above the cusp threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightProfile {
    /// Sorted `(height, value)` nodes.
    pub breakpoints: Vec<(f64, f64)>,
    /// Value below the first node.
    pub left_value: f64,
    /// Beyond the last node `(h_L, v_L)` the profile is `c / (h − h_L + c/v_L)`
    /// when `Some(c)`, and constant `v_L` otherwise.
    #[serde(default)]
    pub tail_coefficient: Option<f64>,
}

impl HeightProfile {
    pub fn value(&self, h: f64) -> f64 {
        let bp = &self.breakpoints;
        if bp.is_empty() || h < bp[0].0 {
            return self.left_value;
        }
        let (hl, vl) = bp[bp.len() - 1];
        if h >= hl {
            return match self.tail_coefficient {
                Some(c) if vl != 0.0 => c / (h - hl + c / vl),
                _ => vl,
            };
        }
        let i = bp.partition_point(|(x, _)| *x <= h);
        let (h0, v0) = bp[i - 1];
        let (h1, v1) = bp[i];
        if h1 == h0 {
            return v1;
        }
        v0 + (v1 - v0) * (h - h0) / (h1 - h0)
    }

    /// Value as the height tends to infinity.
    pub fn limit(&self) -> f64 {
        match (self.breakpoints.last(), self.tail_coefficient) {
            (Some(_), Some(_)) => 0.0,
            (Some(&(_, v)), None) => v,
            (None, _) => self.left_value,
        }
    }

    /// Largest slope magnitude in height.
    pub fn lipschitz(&self) -> f64 {
        let mut l: f64 = 0.0;
        let bp = &self.breakpoints;
        if bp.first().is_some_and(|&(_, v0)| (v0 - self.left_value).abs() > 1e-15) {
            return f64::INFINITY;
        }
        for w in bp.windows(2) {
            let dh = w[1].0 - w[0].0;
            if dh > 0.0 {
                l = l.max((w[1].1 - w[0].1).abs() / dh);
            } else if (w[1].1 - w[0].1).abs() > 1e-15 {
                return f64::INFINITY;
            }
        }
        if let (Some(&(_, vl)), Some(c)) = (bp.last(), self.tail_coefficient) {
            l = l.max(vl * vl / c.abs());
        }
        l
    }

    pub fn sup_abs(&self) -> f64 {
        self.breakpoints
            .iter()
            .map(|(_, v)| v.abs())
            .fold(self.left_value.abs(), f64::max)
    }
}

/// A potential depending only on the height `log y`: `extension_value` below
/// the cusp threshold `s0`, `profile(log y − s0)` above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub s0: f64,
    pub extension_value: f64,
    #[serde(flatten)]
    pub profile: HeightProfile,
}

impl PotentialSpec {
    pub fn constant(c: f64) -> Self {
        PotentialSpec {
            s0: 0.0,
            extension_value: c,
            profile: HeightProfile { breakpoints: vec![], left_value: c, tail_coefficient: None },
        }
    }

    pub fn eval(&self, z: Point) -> f64 {
        let h = z.height();
        if h >= self.s0 {
            self.profile.value(h - self.s0)
        } else {
            self.extension_value
        }
    }

    /// Boundedness and continuity of the extension at the threshold.
    pub fn validate(&self) -> Result<()> {
        let bp = &self.profile.breakpoints;
        if bp.iter().any(|(h, v)| !h.is_finite() || !v.is_finite()) {
            return Err(Error::Config("non-finite breakpoint".into()));
        }
        if bp.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(Error::Config("breakpoints not sorted by height".into()));
        }
        if bp.first().is_some_and(|(h, _)| *h < 0.0) {
            return Err(Error::Config("breakpoint below the cusp threshold".into()));
        }
        if let (Some(c), Some(&(_, v))) = (self.profile.tail_coefficient, bp.last()) {
            if c * v <= 0.0 {
                return Err(Error::Config("tail coefficient must share the sign of the last value".into()));
            }
        }
        if (self.profile.value(0.0) - self.extension_value).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "profile value {} at the threshold differs from the extension {}",
                self.profile.value(0.0),
                self.extension_value
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: PotentialSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    /// `t·F`, as a spec.
    pub fn scaled(&self, t: f64) -> Self {
        let mut out = self.clone();
        out.extension_value *= t;
        out.profile.left_value *= t;
        for bp in &mut out.profile.breakpoints {
            bp.1 *= t;
        }
        out.profile.tail_coefficient = self.profile.tail_coefficient.map(|c| t * c).filter(|c| *c != 0.0);
        out
    }
}

impl Potential for PotentialSpec {
    fn value(&self, z: Point) -> f64 {
        self.eval(z)
    }

    fn height_breakpoints(&self) -> Vec<f64> {
        let mut v = vec![self.s0];
        v.extend(self.profile.breakpoints.iter().map(|(h, _)| self.s0 + h));
        v.dedup();
        v
    }
}

/// One step of the slow-potential construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstructionStep {
    pub n: usize,
    /// `A_n`; the annulus `S(A_n, A_{n+1})` has exponents `k_range`.
    pub a: f64,
    pub c_threshold: f64,
    /// Certified upper bound of `Σ_{S(A_n,∞)} e^{−(δ_P+1/n)d}`.
    pub tail: f64,
    pub h: f64,
    pub b: f64,
    pub k_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstructionLog {
    pub delta_p: f64,
    pub steps: Vec<ConstructionStep>,
    pub achieved_depth: usize,
    pub requested_depth: usize,
    pub notes: Vec<String>,
}

/// Displacements and segment heights of the parabolic translates `p^k x` of
/// a reference point `x` in constant curvature.
#[derive(Debug, Clone, Copy)]
pub struct ParabolicAnnuli {
    pub tau: f64,
    pub y: f64,
}

impl ParabolicAnnuli {
    pub fn new(gens: &GeneratorSet, x: Point) -> Self {
        ParabolicAnnuli { tau: gens.parabolic_translation().abs(), y: x.y }
    }

    /// `d(x, p^k x)` for real `k ≥ 0`.
    pub fn displacement(&self, k: f64) -> f64 {
        2.0 * (k * self.tau / (2.0 * self.y)).asinh()
    }

    /// Real `k` with displacement `d`.
    pub fn inverse_displacement(&self, d: f64) -> f64 {
        2.0 * self.y * (0.5 * d).sinh() / self.tau
    }

    /// Smallest integer `k ≥ 1` with displacement strictly above `d`.
    pub fn first_beyond(&self, d: f64) -> f64 {
        if d < 0.0 {
            return 1.0;
        }
        let mut k = self.inverse_displacement(d).floor().max(0.0);
        if !k.is_finite() || k > 1e15 {
            // beyond integer resolution of f64
            return k.max(1.0);
        }
        while self.displacement(k) <= d {
            k += 1.0;
        }
        while k > 1.0 && self.displacement(k - 1.0) > d {
            k -= 1.0;
        }
        k.max(1.0)
    }

    /// Largest integer `k` with displacement at most `d` (0 if none).
    pub fn last_within(&self, d: f64) -> f64 {
        self.first_beyond(d) - 1.0
    }

    /// Apex height of `[x, p^k x]` above the height of `x`.
    pub fn relative_apex(&self, k: f64) -> f64 {
        (0.5 * k * self.tau / self.y).hypot(1.0).ln()
    }

    /// Upper bound of `Σ_{|k| ≥ k0} e^{−s d(x, p^k x)}`, `2s > 1`: direct
    /// terms up to `k0 + DIRECT_TERMS`, then `e^{−s d_k} ≤ (kτ/y)^{−2s}` and
    /// the integral test.
    pub fn tail_bound(&self, k0: f64, s: f64) -> f64 {
        const DIRECT_TERMS: usize = 20_000;
        assert!(2.0 * s > 1.0);
        let mut sum = 0.0;
        for i in 0..DIRECT_TERMS {
            sum += (-s * self.displacement(k0 + i as f64)).exp();
        }
        // Σ_{k ≥ K} k^{−2s} ≤ (K − 1)^{1−2s}/(2s − 1) with K = k0 + DIRECT_TERMS
        let last = k0 + DIRECT_TERMS as f64 - 1.0;
        let scale = (self.tau / self.y).powf(-2.0 * s);
        let integral = scale * last.powf(1.0 - 2.0 * s) / (2.0 * s - 1.0);
        2.0 * (sum + integral)
    }

    /// Smallest natural `C ≥ start` with `Σ_{d > C} e^{−(δ+ε)d} < ε²`.
    pub fn threshold(&self, delta: f64, eps: f64, start: f64) -> Option<f64> {
        let s = delta + eps;
        if 2.0 * s <= 1.0 {
            return None;
        }
        let target = eps * eps;
        let mut c = start.max(0.0).ceil();
        // coarse doubling, then linear refinement
        let mut step = 1.0;
        while self.tail_bound(self.first_beyond(c), s) >= target {
            c += step;
            step *= 2.0;
            if c > 5_000.0 {
                return None;
            }
        }
        let mut lo = (c - step / 2.0).max(start.max(0.0).ceil());
        let mut hi = c;
        while hi - lo > 1.0 {
            let mid = (0.5 * (lo + hi)).floor();
            if self.tail_bound(self.first_beyond(mid), s) < target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        if self.tail_bound(self.first_beyond(lo), s) < target {
            Some(lo)
        } else {
            Some(hi)
        }
    }
}

pub const DEFAULT_DEPTH: usize = 12;

/// Builds the slowly decaying potential for the cusp of `gens` with
/// reference point `x` (the cusp threshold is the height of `x`). The
/// profile is 1 up to `B_1`, ramps down with slope −1 to `1/(n+1)` after
/// `B_n`, stays there until `B_{n+1}`, and decays like `1/h` past the
/// last constructed plateau.
pub fn build_slow_potential(
    gens: &GeneratorSet,
    x: Point,
    delta_p: f64,
    depth: usize,
) -> Result<(PotentialSpec, ConstructionLog)> {
    let geo = ParabolicAnnuli::new(gens, x);
    let mut notes = Vec::new();
    let mut a_seq: Vec<f64> = Vec::new();
    let mut c_seq: Vec<f64> = Vec::new();
    // A_1 = C(1), A_{n+1} = max(A_n + 1, C(1/(n+1)))
    for n in 1..=depth + 1 {
        let eps = 1.0 / n as f64;
        let start = a_seq.last().map_or(0.0, |a| a + 1.0);
        let Some(c) = geo.threshold(delta_p, eps, c_seq.last().copied().unwrap_or(0.0)) else {
            notes.push(format!("tail for n = {n} not certifiable"));
            break;
        };
        c_seq.push(c);
        a_seq.push(if n == 1 { c } else { c.max(start) });
    }
    let depth_reached = a_seq.len().saturating_sub(1);
    if depth_reached == 0 {
        return Err(Error::InvalidArgument("slow potential: no certifiable annulus".into()));
    }
    let mut steps = Vec::new();
    let mut b_prev: Option<f64> = None;
    for n in 1..=depth_reached {
        let (a, a_next) = (a_seq[n - 1], a_seq[n]);
        let k_lo = geo.first_beyond(a);
        let k_hi = geo.last_within(a_next);
        let h = if k_hi >= k_lo { geo.relative_apex(k_hi) } else { 0.0 };
        let b = match b_prev {
            None => h,
            Some(bp) => (bp + 1.0).max(h),
        };
        b_prev = Some(b);
        let s = delta_p + 1.0 / n as f64;
        steps.push(ConstructionStep {
            n,
            a,
            c_threshold: c_seq[n - 1],
            tail: geo.tail_bound(geo.first_beyond(a), s),
            h,
            b,
            k_range: (k_lo, k_hi),
        });
    }
    // f(B_n) = 1/n, ramp of slope −1 to 1/(n+1), plateau until B_{n+1}
    let mut bp = Vec::new();
    // past the last knee the plateau gives way to the 1/h tail
    for st in &steps {
        let n = st.n as f64;
        bp.push((st.b, 1.0 / n));
        bp.push((st.b + 1.0 / n - 1.0 / (n + 1.0), 1.0 / (n + 1.0)));
    }
    let profile = HeightProfile { breakpoints: bp, left_value: 1.0, tail_coefficient: Some(1.0) };
    let spec = PotentialSpec { s0: x.height(), extension_value: 1.0, profile };
    spec.validate()?;
    if depth_reached < depth {
        notes.push(format!("construction truncated at depth {depth_reached}"));
    }
    Ok((
        spec,
        ConstructionLog {
            delta_p,
            steps,
            achieved_depth: depth_reached,
            requested_depth: depth,
            notes,
        },
    ))
}

/// The same profile, but vanishing below the cusp threshold: it rises with
/// slope 1 from 0 at the threshold and is capped by the slow profile.
pub fn vanishing_below_threshold(spec: &PotentialSpec) -> PotentialSpec {
    let bp = &spec.profile.breakpoints;
    let b1 = bp.first().map_or(1.0, |p| p.0);
    let top = spec.profile.left_value;
    let mut out = Vec::new();
    out.push((0.0, 0.0));
    if b1 >= top {
        out.push((top, top));
        out.extend(bp.iter().copied());
    } else {
        // meet the descending ramps where min(h, f(h)) switches branch
        let mut h = 0.0;
        let step = 1e-4;
        while h < spec.profile.breakpoints.last().map_or(top, |p| p.0) && h < spec.profile.value(h) {
            h += step;
        }
        out.push((h, spec.profile.value(h)));
        out.extend(bp.iter().copied().filter(|(x, _)| *x > h));
    }
    PotentialSpec {
        s0: spec.s0,
        extension_value: 0.0,
        profile: HeightProfile {
            breakpoints: out,
            left_value: 0.0,
            tail_coefficient: spec.profile.tail_coefficient,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MembershipReport {
    pub bounded: bool,
    pub sup_abs: f64,
    pub lipschitz: f64,
    pub positive_near_cusp: bool,
    pub limit: f64,
    pub convergence: TailReport,
    pub convergence_type: bool,
}

impl MembershipReport {
    pub fn all_pass(&self) -> bool {
        self.bounded && self.positive_near_cusp && self.convergence_type
    }
}

/// Checks boundedness/Lipschitz regularity, positivity near the cusp with
/// limit 0, and convergence type of `(P, −G)` at `δ_P` on the parabolic
/// orbit up to `radius`.
pub fn check_fs_membership(spec: &PotentialSpec, gens: &GeneratorSet, o: Point, delta_p: f64, radius: f64) -> Result<MembershipReport> {
    let sup_abs = spec.profile.sup_abs().max(spec.extension_value.abs());
    let lipschitz = spec.profile.lipschitz();
    let bounded = sup_abs.is_finite() && lipschitz.is_finite();
    let limit = spec.profile.limit();
    // positive on a neighborhood of the cusp: from the last node on
    let tail_positive = match spec.profile.breakpoints.last() {
        Some(&(_, v)) => v > 0.0,
        None => spec.profile.left_value > 0.0,
    };
    let positive_near_cusp = tail_positive && limit.abs() < 1e-12 && spec.profile.value(1e6) > 0.0;
    let mut orbit = parabolic_orbit(gens, o, radius);
    let neg = spec.scaled(-1.0);
    for e in &mut orbit {
        let target = e.matrix.apply(o)?;
        e.weight_cache = Some(integrate_along(&neg, o, target, 1e-9)?);
    }
    let convergence = convergence_diagnostic(&orbit, 1.0, delta_p, radius)?;
    let convergence_type = convergence.verdict == Verdict::Converges;
    Ok(MembershipReport { bounded, sup_abs, lipschitz, positive_near_cusp, limit, convergence, convergence_type })
}

/// Identity plus `p^k`, `0 < d(o, p^k o) ≤ radius`, sorted.
pub fn parabolic_orbit(gens: &GeneratorSet, o: Point, radius: f64) -> Vec<OrbitElement> {
    let mut orbit = vec![OrbitElement {
        word: Word::identity(),
        matrix: Isometry::identity(),
        displacement: 0.0,
        weight_cache: None,
    }];
    orbit.extend(crate::groups::coset_annulus(gens, o, 0.0, radius));
    orbit
}

/// Whether `∫ F` over one period of the axis of `h` vanishes (`< 1e−9`).
pub fn vanishing_on_axis<P: Potential + ?Sized>(f: &P, h: &Isometry) -> Result<bool> {
    Ok(axis_integral(f, h)?.abs() < 1e-9)
}

/// `∫ F` from the apex of the axis of `h` to its image.
pub fn axis_integral<P: Potential + ?Sized>(f: &P, h: &Isometry) -> Result<f64> {
    let fixed = h.fixed_points();
    let (a, b) = match fixed.as_slice() {
        [crate::hyperbolic::BoundaryPoint::Finite(a), crate::hyperbolic::BoundaryPoint::Finite(b)] => (*a, *b),
        _ => return Err(Error::InvalidArgument("axis must have two finite endpoints".into())),
    };
    let apex = Point { x: 0.5 * (a + b), y: 0.5 * (a - b).abs() };
    integrate_along(f, apex, h.apply(apex)?, 1e-12)
}

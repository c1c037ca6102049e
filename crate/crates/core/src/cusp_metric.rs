//! The modified cusp: node sequences, the convex profile g₂, and the derived
//! functions φ, u, K and T.
//!
//! Every function of t is evaluated in the logarithmic coordinate λ = ln t.
//! Node positions grow super-exponentially, so p_n is only ever stored as
//! ln p_n and all line pieces are written in relative form.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension of the warped product. Only surfaces are supported.
pub const DIMS: usize = 2;
pub const DEFAULT_FIRST_NODE: usize = 16;
pub const DEFAULT_LAST_NODE: usize = 60;
pub const DEFAULT_SMOOTHING: f64 = 0.01;
pub const DEFAULT_D_HAT: f64 = 1.0;
pub const DEFAULT_GRID_STEP: f64 = 1.0 / 32.0;
/// Position of the first node.
pub const FIRST_NODE_POSITION: f64 = 2.0;
const MAX_DOUBLINGS: usize = 1 << 14;
const PROFILE_FORMAT: &str = "cusp-profile";
const PROFILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CuspOptions {
    /// Index of the first node (p_first = 2).
    pub first_node: usize,
    pub last_node: usize,
    /// Height comparison constant used by `choose_k`.
    pub d_hat: f64,
    /// Distance comparison constant, carried for reporting.
    pub c_hat: f64,
    /// Smoothing half-width as a fraction of the local node gap.
    pub smoothing: f64,
    /// Use a_n' = a_{2n}.
    pub fast_a: bool,
    /// Construction grid spacing in ln t.
    pub grid_step: f64,
}

impl Default for CuspOptions {
    fn default() -> Self {
        Self {
            first_node: DEFAULT_FIRST_NODE,
            last_node: DEFAULT_LAST_NODE,
            d_hat: DEFAULT_D_HAT,
            c_hat: 0.0,
            smoothing: DEFAULT_SMOOTHING,
            fast_a: false,
            grid_step: DEFAULT_GRID_STEP,
        }
    }
}

impl CuspOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.first_node < 4 {
            return bad("first_node must be at least 4 (a_n < 2 is required)");
        }
        if self.last_node < self.first_node + 2 {
            return bad("last_node must exceed first_node by at least 2");
        }
        if !(self.d_hat > 0.0 && self.d_hat.is_finite()) {
            return bad("d_hat must be positive");
        }
        if !(self.smoothing > 0.0 && self.smoothing < 0.25) {
            return bad("smoothing must lie in (0, 0.25)");
        }
        if !(self.grid_step > 0.0 && self.grid_step <= 0.5) {
            return bad("grid_step must lie in (0, 0.5]");
        }
        Ok(())
    }
}

/// Closed-form sequences a_n, b_n, c_n.
#[derive(Debug, Clone, Copy)]
pub struct NodeFormulas {
    pub fast_a: bool,
}

impl NodeFormulas {
    pub fn a(&self, n: usize) -> f64 {
        let m = if self.fast_a { 2 * n } else { n };
        let q = 1.0 + 1.0 / (((DIMS - 1) * (m - 1)) as f64);
        q * q
    }

    pub fn b(&self, n: usize) -> f64 {
        1.0 - (2.0 * self.a(n) - 1.0).powf(-0.5)
    }

    pub fn c(&self, n: usize) -> f64 {
        self.a(n - 1) - self.a(n)
    }
}

/// Certified bound e^{(1/n+1/2)D} · Σ_{|k|≥K} |k|^{-(1+2/n)} via the
/// integral test Σ_{k≥K} k^{-α} ≤ (K−1)^{1−α}/(α−1).
pub fn k_tail_bound(n: usize, d_hat: f64, k: f64) -> f64 {
    let nf = n as f64;
    ((1.0 / nf + 0.5) * d_hat + nf.ln() - (2.0 / nf) * (k - 1.0).ln()).exp()
}

/// Smallest K ≥ 2 whose certified tail bound is at most 1/n².
pub fn choose_k(n: usize, d_hat: f64) -> f64 {
    assert!(n >= 2, "choose_k needs n >= 2");
    let nf = n as f64;
    let log_needed = 0.5 * nf * (3.0 * nf.ln() + (1.0 / nf + 0.5) * d_hat);
    let mut k = if log_needed < 40.0 {
        log_needed.exp().ceil() + 1.0
    } else {
        log_needed.exp() * (1.0 + 1e-12)
    };
    // float rounding can leave the certificate marginally unsatisfied
    while k_tail_bound(n, d_hat, k) > 1.0 / (nf * nf) {
        k = if k < 1e15 { k + 1.0 } else { k * (1.0 + 1e-12) };
    }
    if k < 2.0 {
        2.0
    } else {
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePack {
    pub dims: usize,
    pub first_node: usize,
    pub fast_a: bool,
    /// Values for n = first_node ..= last_node.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub k: Vec<f64>,
    pub log_p: Vec<f64>,
    /// ln Δ_n for n = first_node + 1 ..= last_node.
    pub log_delta: Vec<f64>,
    pub d_hat: f64,
    pub c_hat: f64,
}

impl SequencePack {
    pub fn last_node(&self) -> usize {
        self.first_node + self.a.len() - 1
    }

    fn idx(&self, n: usize) -> usize {
        assert!(n >= self.first_node && n <= self.last_node(), "node {n} outside pack");
        n - self.first_node
    }

    pub fn a_at(&self, n: usize) -> f64 {
        self.a[self.idx(n)]
    }
    pub fn b_at(&self, n: usize) -> f64 {
        self.b[self.idx(n)]
    }
    pub fn c_at(&self, n: usize) -> f64 {
        self.c[self.idx(n)]
    }
    pub fn k_at(&self, n: usize) -> f64 {
        self.k[self.idx(n)]
    }
    pub fn log_p_at(&self, n: usize) -> f64 {
        self.log_p[self.idx(n)]
    }
    pub fn log_delta_at(&self, n: usize) -> f64 {
        assert!(n > self.first_node, "Δ undefined at the first node");
        self.log_delta[self.idx(n) - 1]
    }

    /// |slope| of J_n times p_n, i.e. p_n c_{n+1}/Δ_{n+1}.
    pub fn relative_slope(&self, n: usize) -> f64 {
        let r = self.log_p_at(n + 1) - self.log_p_at(n);
        self.c_at(n + 1) / r.exp_m1()
    }

    /// p_n c_n / Δ_n for n > first.
    pub fn surrogate(&self, n: usize) -> f64 {
        let r = self.log_p_at(n) - self.log_p_at(n - 1);
        self.c_at(n) / (-(-r).exp_m1())
    }

    /// Checks of the sequence conditions over the constructed prefix.
    pub fn check(&self) -> Vec<PropertyCheck> {
        let f = self.first_node;
        let l = self.last_node();
        let mut out = Vec::new();
        let mut push = |name: &str, worst: Option<(usize, f64)>| {
            out.push(PropertyCheck {
                name: name.to_string(),
                passed: worst.is_none_or(|(_, m)| m >= 0.0),
                worst_t: worst.map_or(f64::NAN, |(n, _)| n as f64),
                margin: worst.map_or(f64::INFINITY, |(_, m)| m),
            })
        };
        let worst = |it: &mut dyn Iterator<Item = (usize, f64)>| {
            it.fold(None, |acc: Option<(usize, f64)>, (n, m)| match acc {
                Some((_, best)) if best <= m => acc,
                _ => Some((n, m)),
            })
        };
        // (1) c_n/Δ_n strictly decreasing
        let w = worst(&mut (f + 2..=l).map(|n| {
            let prev = self.c_at(n - 1).ln() - self.log_delta_at(n - 1);
            let cur = self.c_at(n).ln() - self.log_delta_at(n);
            (n, prev - cur)
        }));
        push("c/delta strictly decreasing", w);
        // (2)
        let w = worst(&mut (f + 1..l).map(|n| {
            let s: f64 = (f..n)
                .map(|i| self.b_at(i) * (self.log_p_at(i + 1) - self.log_p_at(i)))
                .sum();
            let lhs = self.b_at(n) * self.log_p_at(n + 1);
            (n, lhs - (-self.b_at(n) * self.log_p_at(n) + s))
        }));
        push("log-sum condition", w);
        // (3)
        let w = worst(&mut (f..l).filter(|&n| 1.0 - 2.0 * self.b_at(n) > 0.0).map(|n| {
            let lhs = (1.0 - 2.0 * self.b_at(n)) * self.log_p_at(n + 1);
            (n, lhs - self.k_at(n + 1).ln())
        }));
        push("node dominates k", w);
        // (4) quantitative surrogate
        let w = worst(&mut (f + 1..=l).map(|n| (n, 1.0 / (n - 1) as f64 - self.surrogate(n))));
        push("p c / delta surrogate", w);
        let w = worst(&mut (f + 1..=l).map(|n| (n, self.k_at(n) - self.k_at(n - 1))));
        push("k strictly increasing", w);
        let w = worst(&mut (f + 1..=l).map(|n| (n, self.log_p_at(n) - self.log_p_at(n - 1))));
        push("p strictly increasing", w);
        let j0 = self.a_at(f) + self.relative_slope(f);
        push("first line at zero at most 2", Some((f, 2.0 - j0)));
        out
    }
}

/// Smallest doubling p_{n+1} = p_n 2^j satisfying the node conditions.
///
/// `log_p` holds ln p_first ..= ln p_n; `k_next` is k(n+1).
pub fn choose_p(formulas: &NodeFormulas, first: usize, log_p: &[f64], k_next: f64) -> f64 {
    let n = first + log_p.len() - 1;
    let ln_n = log_p[log_p.len() - 1];
    let prev_slope = (n > first).then(|| {
        let r = ln_n - log_p[log_p.len() - 2];
        formulas.c(n).ln() - (ln_n + (-(-r).exp_m1()).ln())
    });
    let sum: f64 = (first..n)
        .map(|i| formulas.b(i) * (log_p[i + 1 - first] - log_p[i - first]))
        .sum();
    let bn = formulas.b(n);
    let c_next = formulas.c(n + 1);
    for j in 1..=MAX_DOUBLINGS {
        let r = j as f64 * std::f64::consts::LN_2;
        let l_next = ln_n + r;
        let one_minus = -(-r).exp_m1();
        if let Some(prev) = prev_slope {
            let cur = c_next.ln() - (l_next + one_minus.ln());
            if !(cur < prev) {
                continue;
            }
            if bn * l_next < -bn * ln_n + sum {
                continue;
            }
        }
        let q = 1.0 - 2.0 * bn;
        if q > 0.0 && q * l_next < k_next.ln() {
            continue;
        }
        if c_next / one_minus > 1.0 / n as f64 {
            continue;
        }
        if n == first && formulas.a(n) + c_next / r.exp_m1() > 2.0 {
            continue;
        }
        return l_next;
    }
    ln_n + MAX_DOUBLINGS as f64 * std::f64::consts::LN_2
}

pub fn build_sequence_pack(opts: &CuspOptions) -> Result<SequencePack> {
    opts.validate()?;
    let fm = NodeFormulas { fast_a: opts.fast_a };
    let (f, l) = (opts.first_node, opts.last_node);
    let mut k: Vec<f64> = Vec::with_capacity(l - f + 1);
    for n in f..=l {
        let kn = choose_k(n, opts.d_hat);
        let kn = match k.last() {
            Some(&prev) if kn <= prev => prev + 1.0f64.max(prev * 1e-12),
            _ => kn,
        };
        k.push(kn);
    }
    let mut log_p = vec![FIRST_NODE_POSITION.ln()];
    for n in f..l {
        let next = choose_p(&fm, f, &log_p, k[n + 1 - f]);
        log_p.push(next);
    }
    let log_delta = log_p
        .windows(2)
        .map(|w| w[1] + (-(w[0] - w[1]).exp_m1()).ln())
        .collect();
    Ok(SequencePack {
        dims: DIMS,
        first_node: f,
        fast_a: opts.fast_a,
        a: (f..=l).map(|n| fm.a(n)).collect(),
        b: (f..=l).map(|n| fm.b(n)).collect(),
        c: (f..=l).map(|n| fm.c(n)).collect(),
        k,
        log_p,
        log_delta,
        d_hat: opts.d_hat,
        c_hat: opts.c_hat,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub passed: bool,
    /// Location of the smallest margin (t, or the node index for sequence checks).
    pub worst_t: f64,
    pub margin: f64,
}

/// A rounded corner of the piecewise-linear profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Kink {
    log_center: f64,
    /// Slope jump times the corner position.
    jump: f64,
    /// Half-width relative to the corner position.
    half: f64,
}

impl Kink {
    fn log_range(&self) -> (f64, f64) {
        (self.log_center + (-self.half).ln_1p(), self.log_center + self.half.ln_1p())
    }
}

/// Smoothing bump ρ(y) = 15/16 (1 − y²)² and its first two antiderivatives.
fn bump(y: f64, right: bool) -> (f64, f64, f64) {
    let y2 = y * y;
    let rho = 15.0 / 16.0 * (1.0 - y2) * (1.0 - y2);
    let cdf = 0.5 + 15.0 / 16.0 * y * (1.0 - 2.0 * y2 / 3.0 + y2 * y2 / 5.0);
    let s = 5.0 / 32.0 + 0.5 * y + 15.0 / 16.0 * y2 * (0.5 - y2 / 6.0 + y2 * y2 / 30.0);
    let (r, dr) = if right { (s - y, cdf - 1.0) } else { (s, cdf) };
    (r, dr, rho)
}

/// g₂ and its λ-derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct G2Sample {
    pub g: f64,
    /// t g₂'(t)
    pub t_dg: f64,
    /// t² g₂''(t)
    pub t2_ddg: f64,
}

impl G2Sample {
    /// g₂ − (t/2) g₂'
    pub fn curvature_form(&self) -> f64 {
        self.g - 0.5 * self.t_dg
    }
    pub fn curvature(&self) -> f64 {
        -self.curvature_form()
    }
    /// d/dλ of g₂ − (t/2)g₂'
    pub fn curvature_form_slope(&self) -> f64 {
        0.5 * (self.t_dg - self.t2_ddg)
    }
}

/// The smoothed profile g₂ in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct G2 {
    /// Segment starts in ln t; segment i holds for λ in [breaks[i], breaks[i+1]).
    breaks: Vec<f64>,
    lines: Vec<Line>,
    kinks: Vec<Kink>,
    log_t_max: f64,
}

/// g = level − rel·(t/t0 − 1), in relative form.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Line {
    log_t0: f64,
    level: f64,
    rel: f64,
}

impl Line {
    fn eval(&self, lambda: f64) -> (f64, f64) {
        let q = (lambda - self.log_t0).exp();
        (self.level - self.rel * (q - 1.0), -self.rel * q)
    }
}

impl G2 {
    pub fn log_t_max(&self) -> f64 {
        self.log_t_max
    }

    pub fn eval(&self, lambda: f64) -> G2Sample {
        if lambda <= 0.0 {
            return G2Sample { g: 1.0, t_dg: 0.0, t2_ddg: 0.0 };
        }
        let (mut g, mut t_dg) = if lambda < self.breaks[0] {
            (1.0, 0.0)
        } else {
            let seg = self.breaks.partition_point(|&b| b <= lambda) - 1;
            self.lines[seg.min(self.lines.len() - 1)].eval(lambda)
        };
        let mut t2_ddg = 0.0;
        let pos = self
            .kinks
            .partition_point(|k| k.log_range().1 <= lambda);
        for k in self.kinks.iter().skip(pos).take(1) {
            let (lo, hi) = k.log_range();
            if lambda > lo && lambda < hi {
                let q = (lambda - k.log_center).exp();
                let y = (q - 1.0) / k.half;
                let (r, dr, rho) = bump(y, lambda >= k.log_center);
                g += k.jump * k.half * r;
                t_dg += k.jump * q * dr;
                t2_ddg += k.jump * q * q * rho / k.half;
            }
        }
        G2Sample { g, t_dg, t2_ddg }
    }

    /// ln t of every smoothing window edge and segment break.
    fn features(&self) -> Vec<(f64, f64)> {
        self.kinks.iter().map(|k| k.log_range()).collect()
    }
}

/// Build the smoothed g₂ for a sequence pack.
pub fn build_g2(pack: &SequencePack, smoothing: f64) -> Result<G2> {
    let f = pack.first_node;
    let l = pack.last_node();
    let a_f = pack.a_at(f);
    let lp_f = pack.log_p_at(f);
    let p_f = lp_f.exp();
    let sigma_f = pack.relative_slope(f);
    let w0 = smoothing * (a_f - 1.0);
    let t_star = (a_f + sigma_f + w0) / (1.0 + sigma_f / p_f);
    let w_star = smoothing * (t_star - 1.0);
    if t_star + w_star >= 2.0 || t_star - w_star <= 1.0 + 2.0 * w0 {
        return Err(Error::ProfileProperty {
            property: "corner windows fit below t = 2".into(),
            t: t_star,
            margin: 2.0 - t_star - w_star,
        });
    }
    let c1 = 1.0 + w0;
    let mut breaks = vec![c1.ln(), t_star.ln()];
    let mut lines = vec![
        Line { log_t0: c1.ln(), level: 1.0, rel: -c1 },
        Line { log_t0: lp_f, level: a_f, rel: sigma_f },
    ];
    let mut kinks = vec![
        Kink { log_center: c1.ln(), jump: c1, half: w0 / c1 },
        Kink {
            log_center: t_star.ln(),
            jump: t_star * (-sigma_f / p_f - 1.0),
            half: w_star / t_star,
        },
    ];
    for n in f + 1..l {
        let lp = pack.log_p_at(n);
        breaks.push(lp);
        let sigma = pack.relative_slope(n);
        lines.push(Line { log_t0: lp, level: pack.a_at(n), rel: sigma });
        let jump = pack.surrogate(n) - sigma;
        let r_left = lp - pack.log_p_at(n - 1);
        let r_right = pack.log_p_at(n + 1) - lp;
        let half = smoothing * (-(-r_left).exp_m1()).min(r_right.exp_m1());
        kinks.push(Kink { log_center: lp, jump, half });
    }
    for w in kinks.windows(2) {
        if w[0].log_range().1 >= w[1].log_range().0 {
            return Err(Error::ProfileProperty {
                property: "smoothing windows overlap".into(),
                t: w[1].log_center.exp(),
                margin: w[1].log_range().0 - w[0].log_range().1,
            });
        }
    }
    Ok(G2 { breaks, lines, kinks, log_t_max: pack.log_p_at(l) })
}

const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

fn gauss5<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let (m, h) = (0.5 * (a + b), 0.5 * (b - a));
    h * GL5.iter().map(|&(x, w)| w * f(m + h * x)).sum::<f64>()
}

/// The finished cusp profile.
#[derive(Debug, Clone)]
pub struct CuspProfile {
    pub options: CuspOptions,
    pub pack: SequencePack,
    pub g2: G2,
    /// Construction grid in ln t, starting at 0.
    pub grid: Vec<f64>,
    /// φ at the grid nodes, normalized by φ(p_first) = 0.
    pub phi_nodes: Vec<f64>,
    /// u at the grid nodes.
    pub u_nodes: Vec<f64>,
    pub verification: Vec<PropertyCheck>,
}

impl CuspProfile {
    pub fn g2_at(&self, lambda: f64) -> G2Sample {
        self.g2.eval(lambda)
    }

    /// dφ/dλ = g₂^{-1/2} − 1
    pub fn phi_slope(&self, lambda: f64) -> f64 {
        self.g2.eval(lambda).g.powf(-0.5) - 1.0
    }

    pub fn phi(&self, lambda: f64) -> f64 {
        if lambda <= 0.0 {
            return self.phi_nodes[0];
        }
        let i = self.grid.partition_point(|&x| x <= lambda).saturating_sub(1);
        let i = i.min(self.grid.len() - 1);
        let a = self.grid[i];
        self.phi_nodes[i] + gauss5(|x| self.phi_slope(x), a, lambda)
    }

    /// φ(t) for t ≤ 1.
    pub fn phi_below_seam(&self) -> f64 {
        self.phi_nodes[0]
    }

    pub fn u(&self, lambda: f64) -> f64 {
        lambda + self.phi(lambda)
    }

    /// du/dλ = g₂^{-1/2}
    pub fn u_slope(&self, lambda: f64) -> f64 {
        self.g2.eval(lambda).g.powf(-0.5)
    }

    /// Seam height u(1).
    pub fn seam(&self) -> f64 {
        self.phi_nodes[0]
    }

    pub fn u_max(&self) -> f64 {
        self.u(self.g2.log_t_max)
    }

    pub fn curvature(&self, lambda: f64) -> f64 {
        self.g2.eval(lambda).curvature()
    }

    /// λ = ln u⁻¹(s).
    pub fn lambda_of_u(&self, s: f64) -> Result<f64> {
        let seam = self.seam();
        if s <= seam {
            return Ok(s - seam);
        }
        let u_max = self.u_max();
        if !(s <= u_max) {
            return Err(Error::OutOfRange { value: s, lo: f64::NEG_INFINITY, hi: u_max });
        }
        let i = self.u_nodes.partition_point(|&v| v <= s).saturating_sub(1);
        let (mut lo, mut hi) = (self.grid[i], *self.grid.get(i + 1).unwrap_or(&self.g2.log_t_max));
        let mut x = lo + (s - self.u(lo)) * self.g2.eval(lo).g.sqrt();
        for _ in 0..60 {
            if !(x > lo && x < hi) {
                x = 0.5 * (lo + hi);
            }
            let r = self.u(x) - s;
            if r.abs() < 1e-14 * s.abs().max(1.0) {
                return Ok(x);
            }
            if r > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            x -= r / self.u_slope(x);
            if hi - lo < 1e-15 * hi.abs().max(1.0) {
                return Ok(0.5 * (lo + hi));
            }
        }
        Ok(x)
    }

    /// T(s) = 1/u⁻¹(s).
    pub fn t_of_u(&self, s: f64) -> Result<f64> {
        Ok((-self.lambda_of_u(s)?).exp())
    }

    /// Lower chain φ(t) ≥ −2 b_n ln t for t ≥ p_{n+1}.
    fn phi_chain_check(&self) -> PropertyCheck {
        let f = self.pack.first_node;
        let l = self.pack.last_node();
        let mut worst = (f64::NAN, f64::INFINITY);
        for (&x, &ph) in self.grid.iter().zip(&self.phi_nodes) {
            for n in f + 1..l {
                if x >= self.pack.log_p_at(n + 1) {
                    let m = ph + 2.0 * self.pack.b_at(n) * x;
                    if m < worst.1 {
                        worst = (x.exp(), m);
                    }
                }
            }
        }
        PropertyCheck {
            name: "phi lower bound chain".into(),
            passed: worst.1 >= -1e-9,
            worst_t: worst.0,
            margin: worst.1,
        }
    }

    /// Check the five profile properties on a grid `refine` times finer
    /// than the construction grid.
    pub fn verify_properties(&self, refine: usize) -> Vec<PropertyCheck> {
        let pack = &self.pack;
        let f = pack.first_node;
        let l = pack.last_node();
        let tol = 1e-12;
        let mut acc: Vec<(&str, f64, f64)> = vec![
            ("(1) bracket on I_n", f64::NAN, f64::INFINITY),
            ("(2) convex nonincreasing for t >= 2", f64::NAN, f64::INFINITY),
            ("(3) 1/3 <= g2 - t g2'/2 <= 2", f64::NAN, f64::INFINITY),
            ("(4) g2 - t g2'/2 >= a_n on I_n", f64::NAN, f64::INFINITY),
            ("(5) g2 = 1 for t < 1", f64::NAN, f64::INFINITY),
            ("curvature form nonincreasing for t >= 2", f64::NAN, f64::INFINITY),
        ];
        let mut note = |i: usize, x: f64, m: f64| {
            if m < acc[i].2 {
                acc[i].1 = x.exp();
                acc[i].2 = m;
            }
        };
        let mut samples: Vec<f64> = (1..=200).map(|i| -3.0 + 3.0 * (i as f64 - 0.5) / 200.0).collect();
        for w in self.grid.windows(2) {
            for j in 0..refine {
                samples.push(w[0] + (w[1] - w[0]) * j as f64 / refine as f64);
            }
        }
        samples.push(*self.grid.last().unwrap());
        let ln2 = std::f64::consts::LN_2;
        let mut node = f + 1;
        for &x in &samples {
            let s = self.g2.eval(x);
            let cf = s.curvature_form();
            if x < 0.0 {
                note(4, x, if s.g == 1.0 && s.t_dg == 0.0 { 0.0 } else { -(s.g - 1.0).abs().max(1e-300) });
            }
            note(2, x, (cf - 1.0 / 3.0).min(2.0 - cf));
            if x >= ln2 {
                note(1, x, (-s.t_dg).min(s.t2_ddg) + tol);
                note(5, x, -s.curvature_form_slope() + tol);
            }
            while node <= l && x > pack.log_p_at(node) {
                node += 1;
            }
            if node <= l && x >= pack.log_p_at(node - 1) {
                let an = pack.a_at(node);
                let upper = 2.0 * pack.a_at(node - 1) - 1.0;
                note(0, x, (s.g - an).min(upper - s.g) + tol);
                note(3, x, cf - an + tol);
            }
        }
        acc.into_iter()
            .map(|(name, t, m)| PropertyCheck {
                name: name.to_string(),
                passed: m >= 0.0,
                worst_t: t,
                margin: m,
            })
            .collect()
    }
}

/// Grid in λ: uniform spacing plus dense sampling of every smoothing window.
fn construction_grid(g2: &G2, step: f64) -> Vec<f64> {
    let end = g2.log_t_max;
    let n = (end / step).ceil() as usize;
    let mut pts: Vec<f64> = (0..=n).map(|i| (i as f64 * step).min(end)).collect();
    for (lo, hi) in g2.features() {
        for j in 0..=32 {
            pts.push(lo + (hi - lo) * j as f64 / 32.0);
        }
    }
    pts.extend(g2.breaks.iter().copied());
    pts.retain(|&x| (0.0..=end).contains(&x));
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    pts
}

/// Integrate φ on the construction grid and anchor φ(p_first) = 0.
pub fn build_phi_u(pack: &SequencePack, g2: &G2, step: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = construction_grid(g2, step);
    let slope = |x: f64| g2.eval(x).g.powf(-0.5) - 1.0;
    let mut phi = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    phi.push(0.0);
    for w in grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        // two Gauss panels per cell; the integrand is smooth between nodes
        let m = 0.5 * (a + b);
        acc += gauss5(slope, a, m) + gauss5(slope, m, b);
        if !acc.is_finite() {
            return Err(Error::QuadratureBudget(phi.len()));
        }
        phi.push(acc);
    }
    let anchor_lambda = pack.log_p_at(pack.first_node);
    let i = grid.partition_point(|&x| x <= anchor_lambda) - 1;
    let anchor = phi[i] + gauss5(slope, grid[i], anchor_lambda);
    for v in &mut phi {
        *v -= anchor;
    }
    Ok((grid, phi))
}

/// Summary of the curvature K(u(t)) = −(g₂ − (t/2)g₂').
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub k_min: f64,
    pub k_max: f64,
    pub t_at_min: f64,
    pub t_at_max: f64,
    pub samples: usize,
    /// K at the last node.
    pub k_tail: f64,
    /// Predicted tail value −(a_last + p c/(2Δ)) from the last line piece.
    pub k_tail_predicted: f64,
    /// For each n: max K over [p_first, p_{n+1}] and the bound −a_{n+1}.
    pub interval_checks: Vec<(usize, f64, f64)>,
}

impl CurvatureReport {
    pub fn in_band(&self, lo: f64, hi: f64) -> bool {
        self.k_min >= lo && self.k_max <= hi
    }
}

/// Curvature on `samples` log-uniform points of [e^{-3}, t_max] plus the
/// node-interval bounds.
pub fn curvature_profile(profile: &CuspProfile, samples: usize) -> CurvatureReport {
    let lo = -3.0;
    let hi = profile.g2.log_t_max;
    let mut k_min = (f64::INFINITY, 0.0);
    let mut k_max = (f64::NEG_INFINITY, 0.0);
    let pack = &profile.pack;
    let f = pack.first_node;
    let l = pack.last_node();
    let mut per_node = vec![f64::NEG_INFINITY; l - f + 1];
    let mut visit = |x: f64| {
        let k = profile.curvature(x);
        if k < k_min.0 {
            k_min = (k, x);
        }
        if k > k_max.0 {
            k_max = (k, x);
        }
        if x >= pack.log_p_at(f) {
            let j = (f..=l).position(|n| x <= pack.log_p_at(n)).unwrap_or(l - f);
            per_node[j] = per_node[j].max(k);
        }
    };
    let m = samples.max(2);
    for i in 0..m {
        visit(lo + (hi - lo) * i as f64 / (m - 1) as f64);
    }
    for kink in &profile.g2.kinks {
        let (a, b) = kink.log_range();
        for j in 0..=64 {
            visit(a + (b - a) * j as f64 / 64.0);
        }
    }
    let mut interval_checks = Vec::new();
    let mut running = f64::NEG_INFINITY;
    for n in f..l {
        running = running.max(per_node[n + 1 - f]).max(per_node[0]);
        interval_checks.push((n, running, -pack.a_at(n + 1)));
    }
    let k_tail = profile.curvature(hi);
    let k_tail_predicted = -(pack.a_at(l) + 0.5 * pack.surrogate(l));
    CurvatureReport {
        k_min: k_min.0,
        k_max: k_max.0,
        t_at_min: k_min.1.exp(),
        t_at_max: k_max.1.exp(),
        samples: m,
        k_tail,
        k_tail_predicted,
        interval_checks,
    }
}

/// Build the full profile, halving the smoothing width until every
/// property holds.
pub fn build_cusp(opts: &CuspOptions) -> Result<CuspProfile> {
    let pack = build_sequence_pack(opts)?;
    let mut smoothing = opts.smoothing;
    let mut last_err = None;
    for _ in 0..6 {
        match try_build(opts, &pack, smoothing) {
            Ok(p) => return Ok(p),
            Err(e @ Error::ProfileProperty { .. }) => {
                last_err = Some(e);
                smoothing *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap())
}

fn try_build(opts: &CuspOptions, pack: &SequencePack, smoothing: f64) -> Result<CuspProfile> {
    let g2 = build_g2(pack, smoothing)?;
    let (grid, phi_nodes) = build_phi_u(pack, &g2, opts.grid_step)?;
    let mut options = opts.clone();
    options.smoothing = smoothing;
    let mut profile = CuspProfile {
        options,
        pack: pack.clone(),
        g2,
        u_nodes: grid.iter().zip(&phi_nodes).map(|(x, p)| x + p).collect(),
        grid,
        phi_nodes,
        verification: Vec::new(),
    };
    let mut checks = profile.verify_properties(10);
    if let Some(bad) = checks.iter().find(|c| !c.passed) {
        return Err(Error::ProfileProperty {
            property: bad.name.clone(),
            t: bad.worst_t,
            margin: bad.margin,
        });
    }
    checks.push(profile.phi_chain_check());
    checks.extend(pack.check());
    profile.verification = checks;
    Ok(profile)
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileHeader {
    format: String,
    version: u32,
    options: CuspOptions,
    pack: SequencePack,
}

/// Write the profile as CSV (t, g2, g2_prime, phi, u, K) under a one-line
/// JSON header.
pub fn write_profile<W: std::io::Write>(profile: &CuspProfile, mut out: W) -> Result<()> {
    let header = ProfileHeader {
        format: PROFILE_FORMAT.into(),
        version: PROFILE_VERSION,
        options: profile.options.clone(),
        pack: profile.pack.clone(),
    };
    let mut buf = String::new();
    writeln!(buf, "# {}", serde_json::to_string(&header)?).unwrap();
    buf.push_str("t,g2,g2_prime,phi,u,K\n");
    for (&x, &ph) in profile.grid.iter().zip(&profile.phi_nodes) {
        let s = profile.g2.eval(x);
        let t = x.exp();
        writeln!(
            buf,
            "{:.12e},{:.15e},{:.15e},{:.15e},{:.15e},{:.15e}",
            t,
            s.g,
            s.t_dg / t,
            ph,
            x + ph,
            s.curvature()
        )
        .unwrap();
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

pub fn save_profile(profile: &CuspProfile, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_profile(profile, std::io::BufWriter::new(file))
}

/// Read a profile file: the header is authoritative and the profile is
/// rebuilt from it; the CSV body is checked against the rebuild.
pub fn read_profile(text: &str) -> Result<CuspProfile> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| Error::Config("empty profile file".into()))?;
    let json = first
        .strip_prefix("# ")
        .ok_or_else(|| Error::Config("profile header line missing".into()))?;
    let header: ProfileHeader = serde_json::from_str(json)?;
    if header.format != PROFILE_FORMAT || header.version != PROFILE_VERSION {
        return Err(Error::Config(format!(
            "unsupported profile format {} v{}",
            header.format, header.version
        )));
    }
    let profile = build_cusp(&header.options)?;
    if profile.pack != header.pack {
        return Err(Error::Config("profile header sequences do not match a rebuild".into()));
    }
    if lines.next() != Some("t,g2,g2_prime,phi,u,K") {
        return Err(Error::Config("profile column header mismatch".into()));
    }
    for (row, line) in lines.enumerate().step_by(97) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("profile row {row}: {e}")))?;
        if vals.len() != 6 {
            return Err(Error::Config(format!("profile row {row}: expected 6 columns")));
        }
        let s = profile.g2.eval(vals[0].ln());
        if (s.g - vals[1]).abs() > 1e-9 || (s.curvature() - vals[5]).abs() > 1e-9 {
            return Err(Error::Config(format!("profile row {row} disagrees with rebuild")));
        }
    }
    Ok(profile)
}

pub fn load_profile(path: &Path) -> Result<CuspProfile> {
    read_profile(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_profile() -> CuspProfile {
        build_cusp(&CuspOptions::default()).unwrap()
    }

    #[test]
    fn sequence_formulas() {
        let f = NodeFormulas { fast_a: false };
        assert!((f.a(3) - 2.25).abs() < 1e-15);
        assert!((f.a(2) - 4.0).abs() < 1e-15);
        assert!((f.b(3) - (1.0 - 3.5f64.powf(-0.5))).abs() < 1e-15);
        assert!((f.c(4) - (2.25 - 16.0 / 9.0)).abs() < 1e-15);
        // b_n < 1/2 holds exactly when a_n < 2.5
        for n in 2..40 {
            assert_eq!(f.b(n) < 0.5, f.a(n) < 2.5, "n = {n}");
        }
        assert!(f.b(2) > 0.5 && f.b(3) < 0.5);
        let fast = NodeFormulas { fast_a: true };
        assert_eq!(fast.a(5), f.a(10));
    }

    #[test]
    fn choose_k_certificate_and_monotonicity() {
        for n in 2..30 {
            let d = 1.3;
            let k = choose_k(n, d);
            let nf = n as f64;
            assert!(k_tail_bound(n, d, k) <= 1.0 / (nf * nf));
            assert!(choose_k(n, 2.0 * d) >= k);
        }
        // direct summation agrees with the integral certificate for small n
        let (n, d) = (2usize, 0.5);
        let k = choose_k(n, d);
        let direct: f64 = (k as u64..4_000_000).map(|j| (j as f64).powi(-2)).sum::<f64>() + 1.0 / 4_000_000.0;
        let full = (0.5 + 1.0 / n as f64) * d;
        assert!(full.exp() * 2.0 * direct <= 0.25);
        // K − 1 is the smallest integer meeting the certificate
        assert!(k_tail_bound(n, d, k - 1.0) > 0.25);
    }

    #[test]
    fn pack_conditions_hold() {
        let pack = build_sequence_pack(&CuspOptions::default()).unwrap();
        for c in pack.check() {
            assert!(c.passed, "{c:?}");
        }
        let l = pack.last_node();
        for n in pack.first_node + 1..=l {
            assert!(pack.surrogate(n) <= 1.0 / (n - 1) as f64);
        }
    }

    #[test]
    fn g2_exact_facts() {
        let p = default_profile();
        assert_eq!(p.g2_at((0.5f64).ln()).g, 1.0);
        assert_eq!(p.g2_at(-5.0).g, 1.0);
        // at t = 1 both g2 and the curvature are those of the hyperbolic plane
        assert!((p.curvature(-1e-9) + 1.0).abs() < 1e-12);
        let f = p.pack.first_node;
        for n in f + 1..p.pack.last_node() {
            let lo = p.pack.log_p_at(n - 1);
            let hi = p.pack.log_p_at(n);
            for j in 0..=20 {
                let x = lo + (hi - lo) * j as f64 / 20.0;
                let g = p.g2_at(x).g;
                assert!(g >= p.pack.a_at(n) - 1e-12 && g <= 2.0 * p.pack.a_at(n - 1) - 1.0);
            }
        }
    }

    #[test]
    fn all_properties_verified() {
        let p = default_profile();
        for c in &p.verification {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn phi_and_u_identities() {
        let p = default_profile();
        // φ normalized at the first node, nonincreasing, constant below t = 1
        assert!(p.phi(p.pack.log_p_at(p.pack.first_node)).abs() < 1e-13);
        let mut prev = p.phi(-1.0);
        assert_eq!(prev, p.phi_below_seam());
        for i in 0..2000 {
            let x = i as f64 * 0.05;
            let v = p.phi(x);
            assert!(v <= prev + 1e-14);
            prev = v;
        }
        // u' t √g2 = 1 by central differences with Richardson extrapolation
        for &x in &[0.3, 1.7, 4.0, 9.5, 25.0] {
            let d = |h: f64| (p.u(x + h) - p.u(x - h)) / (2.0 * h);
            let rich = (4.0 * d(1e-3) - d(2e-3)) / 3.0;
            let ident = rich * p.g2_at(x).g.sqrt();
            assert!((ident - 1.0).abs() < 1e-8, "x = {x}: {ident}");
        }
    }

    #[test]
    fn flat_profile_gives_hyperbolic_u() {
        let p = default_profile();
        // in the region t < 1, u = ln t + φ(1) and T(s) = e^{φ(1) − s}
        for &x in &[-2.0, -0.5, -1e-6] {
            assert!((p.u(x) - (x + p.phi_below_seam())).abs() < 1e-15);
            let s = p.u(x);
            assert!((p.t_of_u(s).unwrap() - (p.phi_below_seam() - s).exp()).abs() < 1e-12);
        }
        assert!((p.t_of_u(p.seam()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn t_of_u_inverts_and_decreases() {
        let p = default_profile();
        let mut prev = f64::INFINITY;
        for i in 0..400 {
            let x = -1.0 + i as f64 * 0.37;
            let s = p.u(x);
            let back = p.lambda_of_u(s).unwrap();
            assert!((back - x).abs() < 1e-10 * x.abs().max(1.0), "{x} vs {back}");
            let t = p.t_of_u(s).unwrap();
            assert!(t < prev);
            prev = t;
        }
        assert!(p.t_of_u(p.u_max() + 1.0).is_err());
    }

    #[test]
    fn curvature_band_and_tail() {
        let p = default_profile();
        let rep = curvature_profile(&p, 100_000);
        assert!(rep.in_band(-2.0 - 1e-9, -1.0 / 3.0 + 1e-9), "{rep:?}");
        assert!((rep.k_tail - rep.k_tail_predicted).abs() < 1e-12);
        assert!((rep.k_tail + 1.0).abs() <= 0.05);
        for &(n, kmax, bound) in &rep.interval_checks {
            assert!(kmax <= bound + 1e-12, "n = {n}: {kmax} > {bound}");
        }
    }

    #[test]
    fn profile_roundtrip() {
        let p = build_cusp(&CuspOptions { last_node: 24, ..CuspOptions::default() }).unwrap();
        let mut buf = Vec::new();
        write_profile(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let q = read_profile(&text).unwrap();
        assert_eq!(q.pack, p.pack);
        assert!(read_profile("garbage").is_err());
    }

    #[test]
    fn option_validation() {
        assert!(build_cusp(&CuspOptions { first_node: 3, ..CuspOptions::default() }).is_err());
        assert!(build_cusp(&CuspOptions { smoothing: 0.0, ..CuspOptions::default() }).is_err());
    }
}

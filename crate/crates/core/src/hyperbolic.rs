//! Geometry of the upper half-plane: points, Möbius isometries, distances,
//! geodesic arcs, Busemann functions and line integrals of height-dependent
//! potentials.
//!
//! The cusp point is fixed at ∞ and the height coordinate of a point is
//! `log y`.

use std::fmt;
use std::ops::Mul;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::adaptive_simpson_pieces;

/// A point of the upper half-plane, `y > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(y > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidArgument(format!("not a half-plane point: ({x}, {y})")));
        }
        Ok(Point { x, y })
    }

    /// The point `x + i e^h`.
    pub fn at_height(x: f64, h: f64) -> Self {
        Point { x, y: h.exp() }
    }

    pub fn i() -> Self {
        Point { x: 0.0, y: 1.0 }
    }

    pub fn height(&self) -> f64 {
        self.y.ln()
    }

    pub fn translate(&self, dx: f64) -> Self {
        Point { x: self.x + dx, y: self.y }
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}i", self.x, self.y)
    }
}

/// A point of the real boundary line, possibly ∞.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryPoint {
    Finite(f64),
    Infinity,
}

/// A real Möbius transformation `z ↦ (az + b)/(cz + d)` with `ad − bc = 1`.
///
/// The sign is canonical: the first nonzero coefficient is positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Isometry {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

pub const DET_TOLERANCE: f64 = 1e-12;

impl Isometry {
    /// Builds a normalized isometry from any matrix with positive determinant.
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let det = a * d - b * c;
        if !(det > 0.0) || !det.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "Möbius matrix must have positive determinant, got {det}"
            )));
        }
        let s = det.sqrt();
        Ok(Self::raw(a / s, b / s, c / s, d / s).canonical())
    }

    fn raw(a: f64, b: f64, c: f64, d: f64) -> Self {
        Isometry { a, b, c, d }
    }

    pub fn identity() -> Self {
        Self::raw(1.0, 0.0, 0.0, 1.0)
    }

    /// `z ↦ z + t`.
    pub fn translation(t: f64) -> Self {
        Self::raw(1.0, t, 0.0, 1.0)
    }

    /// `z ↦ λ z` with `λ > 0`.
    pub fn dilation(lambda: f64) -> Self {
        let s = lambda.sqrt();
        Self::raw(s, 0.0, 0.0, 1.0 / s)
    }

    /// Rotation about `i` by angle `theta` (elliptic).
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = (theta / 2.0).sin_cos();
        Self::raw(c, s, -s, c).canonical()
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn trace(&self) -> f64 {
        self.a + self.d
    }

    pub fn inverse(&self) -> Self {
        Self::raw(self.d, -self.b, -self.c, self.a).canonical()
    }

    fn canonical(self) -> Self {
        let first = [self.a, self.b, self.c, self.d]
            .into_iter()
            .find(|v| *v != 0.0)
            .unwrap_or(1.0);
        if first < 0.0 {
            Self::raw(-self.a, -self.b, -self.c, -self.d)
        } else {
            self
        }
    }

    /// Rescales to unit determinant.
    pub fn renormalized(self) -> Self {
        let det = self.det();
        if (det - 1.0).abs() <= DET_TOLERANCE || !(det > 0.0) {
            return self.canonical();
        }
        let s = det.sqrt();
        Self::raw(self.a / s, self.b / s, self.c / s, self.d / s).canonical()
    }

    pub fn compose(&self, other: &Isometry) -> Isometry {
        Self::raw(
            self.a * other.a + self.b * other.c,
            self.a * other.b + self.b * other.d,
            self.c * other.a + self.d * other.c,
            self.c * other.b + self.d * other.d,
        )
        .renormalized()
    }

    pub fn pow(&self, k: i64) -> Isometry {
        let mut base = if k < 0 { self.inverse() } else { *self };
        let mut e = k.unsigned_abs();
        let mut acc = Isometry::identity();
        while e > 0 {
            if e & 1 == 1 {
                acc = acc.compose(&base);
            }
            base = base.compose(&base);
            e >>= 1;
        }
        acc
    }

    pub fn apply(&self, z: Point) -> Result<Point> {
        // (az+b)/(cz+d) with z = x + iy
        let den_re = self.c * z.x + self.d;
        let den_im = self.c * z.y;
        let den2 = den_re * den_re + den_im * den_im;
        if den2.sqrt() < 1e-300 {
            return Err(Error::PointMapsToBoundary);
        }
        let num_re = self.a * z.x + self.b;
        let num_im = self.a * z.y;
        let x = (num_re * den_re + num_im * den_im) / den2;
        // Im = det * y / |cz+d|^2
        let y = z.y / den2;
        Point::new(x, y).map_err(|_| Error::PointMapsToBoundary)
    }

    /// Complex derivative `1/(cz+d)^2` as `(re, im)`.
    pub fn derivative(&self, z: Point) -> (f64, f64) {
        let re = self.c * z.x + self.d;
        let im = self.c * z.y;
        let n2 = re * re + im * im;
        // 1/(re + i im)^2 = (re - i im)^2 / n2^2
        ((re * re - im * im) / (n2 * n2), (-2.0 * re * im) / (n2 * n2))
    }

    pub fn apply_boundary(&self, p: BoundaryPoint) -> BoundaryPoint {
        match p {
            BoundaryPoint::Infinity => {
                if self.c == 0.0 {
                    BoundaryPoint::Infinity
                } else {
                    BoundaryPoint::Finite(self.a / self.c)
                }
            }
            BoundaryPoint::Finite(x) => {
                let den = self.c * x + self.d;
                if den == 0.0 {
                    BoundaryPoint::Infinity
                } else {
                    BoundaryPoint::Finite((self.a * x + self.b) / den)
                }
            }
        }
    }

    /// Max-abs coefficient distance between the matrices.
    pub fn matrix_distance(&self, other: &Isometry) -> f64 {
        [
            self.a - other.a,
            self.b - other.b,
            self.c - other.c,
            self.d - other.d,
        ]
        .into_iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Translation length of a hyperbolic element, from `|tr| = 2 cosh(ℓ/2)`.
    pub fn translation_length(&self) -> f64 {
        let t = self.trace().abs();
        if t <= 2.0 {
            0.0
        } else {
            2.0 * (t / 2.0).acosh()
        }
    }

    /// Fixed points on the boundary (attracting first for hyperbolic elements).
    pub fn fixed_points(&self) -> Vec<BoundaryPoint> {
        if self.c.abs() < 1e-300 {
            if (self.a - self.d).abs() < 1e-14 {
                return vec![BoundaryPoint::Infinity];
            }
            let x = self.b / (self.d - self.a);
            // a > d means ∞ is attracting
            return if self.a.abs() > self.d.abs() {
                vec![BoundaryPoint::Infinity, BoundaryPoint::Finite(x)]
            } else {
                vec![BoundaryPoint::Finite(x), BoundaryPoint::Infinity]
            };
        }
        // c x^2 + (d - a) x - b = 0
        let qa = self.c;
        let qb = self.d - self.a;
        let qc = -self.b;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < -1e-12 {
            return vec![];
        }
        let sq = disc.max(0.0).sqrt();
        let r1 = (-qb + sq) / (2.0 * qa);
        let r2 = (-qb - sq) / (2.0 * qa);
        if sq == 0.0 {
            return vec![BoundaryPoint::Finite(r1)];
        }
        // attracting fixed point has |cz+d| > 1
        let attracting = |x: f64| (self.c * x + self.d).abs() > 1.0;
        if attracting(r1) {
            vec![BoundaryPoint::Finite(r1), BoundaryPoint::Finite(r2)]
        } else {
            vec![BoundaryPoint::Finite(r2), BoundaryPoint::Finite(r1)]
        }
    }
}

impl Mul for Isometry {
    type Output = Isometry;
    fn mul(self, rhs: Isometry) -> Isometry {
        self.compose(&rhs)
    }
}

/// Hyperbolic distance in the upper half-plane.
pub fn dist(z: Point, w: Point) -> f64 {
    let dx = z.x - w.x;
    let dy = z.y - w.y;
    let chord = (dx * dx + dy * dy).sqrt();
    2.0 * (chord / (2.0 * (z.y * w.y).sqrt())).asinh()
}

/// Distance from `z` to the complete geodesic with boundary endpoints `e1`, `e2`.
pub fn dist_to_geodesic(z: Point, e1: BoundaryPoint, e2: BoundaryPoint) -> f64 {
    match (e1, e2) {
        (BoundaryPoint::Infinity, BoundaryPoint::Finite(a)) | (BoundaryPoint::Finite(a), BoundaryPoint::Infinity) => {
            ((z.x - a).abs() / z.y).asinh()
        }
        (BoundaryPoint::Finite(a), BoundaryPoint::Finite(b)) => {
            let c = 0.5 * (a + b);
            let r = 0.5 * (a - b).abs();
            let dx = z.x - c;
            let q = dx * dx + z.y * z.y - r * r;
            (q.abs() / (2.0 * r * z.y)).asinh()
        }
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ArcShape {
    /// `x` constant, `y(s) = y0 e^{dir s}`.
    Vertical { x: f64, y0: f64, dir: f64 },
    /// `x = c + r tanh τ`, `y = r sech τ`, `τ(s) = τ0 + dir s`.
    Circle { center: f64, radius: f64, tau0: f64, dir: f64 },
}

/// Unit-speed parametrization of the geodesic segment `[z, w]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodesicArc {
    pub start: Point,
    pub end: Point,
    pub length: f64,
    shape: ArcShape,
}

impl GeodesicArc {
    pub fn is_vertical(&self) -> bool {
        matches!(self.shape, ArcShape::Vertical { .. })
    }

    /// Center and radius of the supporting semicircle, if not vertical.
    pub fn circle(&self) -> Option<(f64, f64)> {
        match self.shape {
            ArcShape::Circle { center, radius, .. } => Some((center, radius)),
            ArcShape::Vertical { .. } => None,
        }
    }

    pub fn point_at(&self, s: f64) -> Point {
        match self.shape {
            ArcShape::Vertical { x, y0, dir } => Point { x, y: y0 * (dir * s).exp() },
            ArcShape::Circle { center, radius, tau0, dir } => {
                let tau = tau0 + dir * s;
                Point {
                    x: center + radius * tau.tanh(),
                    y: radius / tau.cosh(),
                }
            }
        }
    }

    /// Height `log y` at arclength `s`.
    pub fn height_at(&self, s: f64) -> f64 {
        match self.shape {
            ArcShape::Vertical { y0, dir, .. } => y0.ln() + dir * s,
            ArcShape::Circle { radius, tau0, dir, .. } => {
                let tau = (tau0 + dir * s).abs();
                // log sech τ = -τ - log((1 + e^{-2τ})/2)
                radius.ln() - tau - (0.5 * (1.0 + (-2.0 * tau).exp())).ln()
            }
        }
    }

    /// Arclength parameters in `[0, L]` at which the height equals `h`.
    pub fn arclengths_at_height(&self, h: f64) -> Vec<f64> {
        let mut out = Vec::new();
        match self.shape {
            ArcShape::Vertical { y0, dir, .. } => {
                let s = dir * (h - y0.ln());
                if (0.0..=self.length).contains(&s) {
                    out.push(s);
                }
            }
            ArcShape::Circle { radius, tau0, dir, .. } => {
                let ratio = radius * (-h).exp();
                if ratio >= 1.0 {
                    let tau = ratio.acosh();
                    for t in [-tau, tau] {
                        let s = dir * (t - tau0);
                        if (0.0..=self.length).contains(&s) {
                            out.push(s);
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| a.total_cmp(b));
        out
    }

    /// Arclength of the highest point.
    pub fn apex_arclength(&self) -> f64 {
        match self.shape {
            ArcShape::Vertical { dir, .. } => {
                if dir > 0.0 {
                    self.length
                } else {
                    0.0
                }
            }
            ArcShape::Circle { tau0, dir, .. } => (dir * (0.0 - tau0)).clamp(0.0, self.length),
        }
    }

    pub fn apex_height(&self) -> f64 {
        self.height_at(self.apex_arclength())
            .max(self.start.height())
            .max(self.end.height())
    }

    /// Unit tangent (Euclidean components scaled by `1/y`) at arclength `s`.
    pub fn unit_tangent(&self, s: f64) -> (f64, f64) {
        match self.shape {
            ArcShape::Vertical { dir, .. } => (0.0, dir),
            ArcShape::Circle { tau0, dir, .. } => {
                let tau = tau0 + dir * s;
                // dx/dτ = r sech²τ, dy/dτ = -r sech τ tanh τ; divide by y = r sech τ
                (dir / tau.cosh(), -dir * tau.tanh())
            }
        }
    }
}

/// The geodesic segment between two distinct points.
pub fn geodesic(z: Point, w: Point) -> Result<GeodesicArc> {
    let length = dist(z, w);
    if length < 1e-15 {
        return Err(Error::DegenerateArc);
    }
    let scale = z.x.abs().max(w.x.abs()).max(z.y).max(w.y);
    let shape = if (z.x - w.x).abs() <= 1e-13 * scale {
        ArcShape::Vertical {
            x: z.x,
            y0: z.y,
            dir: if w.y > z.y { 1.0 } else { -1.0 },
        }
    } else {
        // center on the real axis equidistant from z and w
        let center = ((z.x * z.x + z.y * z.y) - (w.x * w.x + w.y * w.y)) / (2.0 * (z.x - w.x));
        let radius = ((z.x - center).powi(2) + z.y * z.y).sqrt();
        let tau_z = ((z.x - center) / z.y).asinh();
        let tau_w = ((w.x - center) / w.y).asinh();
        ArcShape::Circle {
            center,
            radius,
            tau0: tau_z,
            dir: if tau_w > tau_z { 1.0 } else { -1.0 },
        }
    };
    Ok(GeodesicArc { start: z, end: w, length, shape })
}

/// Maximum height `log y` along `[z, w]`.
pub fn apex_height(z: Point, w: Point) -> Result<f64> {
    Ok(geodesic(z, w)?.apex_height())
}

/// Closed-form Busemann cocycle at ∞: `log y_y − log y_x`.
pub fn busemann_closed(x: Point, y: Point) -> f64 {
    y.y.ln() - x.y.ln()
}

/// Truncated Busemann function `d(x, ξ_T) − d(y, ξ_T)` with `ξ_T = i e^T`.
pub fn busemann(x: Point, y: Point, truncation: f64) -> f64 {
    let xi = Point { x: 0.0, y: truncation.exp() };
    dist(x, xi) - dist(y, xi)
}

/// A function on the plane depending only on the base point.
pub trait Potential {
    fn value(&self, z: Point) -> f64;

    /// Heights (`log y`) where the potential has kinks; used to split quadrature.
    fn height_breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// A constant potential.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl Potential for Constant {
    fn value(&self, _z: Point) -> f64 {
        self.0
    }
}

/// A potential depending only on height, given by a closure.
pub struct HeightFn<F: Fn(f64) -> f64> {
    pub f: F,
    pub breakpoints: Vec<f64>,
}

impl<F: Fn(f64) -> f64> Potential for HeightFn<F> {
    fn value(&self, z: Point) -> f64 {
        (self.f)(z.height())
    }
    fn height_breakpoints(&self) -> Vec<f64> {
        self.breakpoints.clone()
    }
}

impl<P: Potential + ?Sized> Potential for &P {
    fn value(&self, z: Point) -> f64 {
        (**self).value(z)
    }
    fn height_breakpoints(&self) -> Vec<f64> {
        (**self).height_breakpoints()
    }
}

/// `∫_z^w F` along the unit-speed geodesic, absolute error ≲ `tol (1 + L)`.
pub fn integrate_along<P: Potential + ?Sized>(f: &P, z: Point, w: Point, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    if dist(z, w) < 1e-15 {
        return Ok(0.0);
    }
    let arc = geodesic(z, w)?;
    integrate_arc(f, &arc, tol)
}

pub fn integrate_arc<P: Potential + ?Sized>(f: &P, arc: &GeodesicArc, tol: f64) -> Result<f64> {
    let mut cuts = vec![0.0, arc.length, arc.apex_arclength()];
    for h in f.height_breakpoints() {
        cuts.extend(arc.arclengths_at_height(h));
    }
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    adaptive_simpson_pieces(
        |s| {
            let v = f.value(arc.point_at(s));
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::PotentialEvaluation(format!("non-finite value at s = {s}")))
            }
        },
        &cuts,
        tol * (1.0 + arc.length),
    )
}

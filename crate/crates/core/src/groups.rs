//! Extended Schottky groups `⟨p⟩ ∗ ⟨h₁⟩ ∗ … ∗ ⟨h_N⟩` with the parabolic
//! fixing ∞: generator bookkeeping, ping-pong verification, reduced words
//! and orbit-ball enumeration.
//!
//! Orbit balls are enumerated best-first over the word tree. Every subtree
//! is bounded below by the distance from the base point to a nested
//! ping-pong half-plane, which contains all orbit points of the subtree.

use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::collections::BinaryHeap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperbolic::{dist, dist_to_geodesic, BoundaryPoint, Isometry, Point};

pub const TRACE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Identity,
    Parabolic,
    Hyperbolic,
    Elliptic,
}

pub fn classify(g: &Isometry) -> Kind {
    if g.matrix_distance(&Isometry::identity()) < TRACE_TOLERANCE {
        return Kind::Identity;
    }
    let t = g.trace().abs();
    if (t - 2.0).abs() <= TRACE_TOLERANCE {
        Kind::Parabolic
    } else if t > 2.0 {
        Kind::Hyperbolic
    } else {
        Kind::Elliptic
    }
}

/// One block `g^k` of a reduced word; `generator` indexes the generator set
/// (0 is the parabolic).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Block {
    pub generator: usize,
    pub exponent: i64,
}

/// A reduced word in alternating normal form. Empty means identity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Word {
    pub blocks: Vec<Block>,
}

impl Word {
    pub fn identity() -> Self {
        Word { blocks: Vec::new() }
    }

    pub fn single(generator: usize, exponent: i64) -> Self {
        Word { blocks: vec![Block { generator, exponent }] }
    }

    pub fn is_identity(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn is_reduced(&self) -> bool {
        self.blocks.iter().all(|b| b.exponent != 0)
            && self.blocks.windows(2).all(|w| w[0].generator != w[1].generator)
    }

    pub fn push(&self, block: Block) -> Word {
        let mut blocks = self.blocks.clone();
        blocks.push(block);
        Word { blocks }
    }

    pub fn last_generator(&self) -> Option<usize> {
        self.blocks.last().map(|b| b.generator)
    }

    /// Only parabolic blocks.
    pub fn is_parabolic_power(&self) -> bool {
        self.blocks.len() == 1 && self.blocks[0].generator == 0
    }

    pub fn uses_only(&self, generator: usize) -> bool {
        self.blocks.iter().all(|b| b.generator == generator)
    }

    pub fn format_with(&self, labels: &[String]) -> String {
        if self.blocks.is_empty() {
            return "id".to_string();
        }
        self.blocks
            .iter()
            .map(|b| format!("{}:{}", labels[b.generator], b.exponent))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_with(s: &str, labels: &[String]) -> Result<Word> {
        let s = s.trim();
        if s == "id" || s.is_empty() {
            return Ok(Word::identity());
        }
        let mut blocks = Vec::new();
        for part in s.split(',') {
            let (label, exp) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad word block '{part}'")))?;
            let generator = labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| Error::Config(format!("unknown generator label '{label}'")))?;
            let exponent: i64 = exp
                .parse()
                .map_err(|_| Error::Config(format!("bad exponent '{exp}'")))?;
            blocks.push(Block { generator, exponent });
        }
        let w = Word { blocks };
        if !w.is_reduced() {
            return Err(Error::Config(format!("word '{s}' is not reduced")));
        }
        Ok(w)
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.blocks.is_empty() {
            return write!(f, "id");
        }
        let parts: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("g{}^{}", b.generator, b.exponent))
            .collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// An orbit point `γo` with its word, matrix and displacement `d(o, γo)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitElement {
    pub word: Word,
    pub matrix: Isometry,
    pub displacement: f64,
    /// `∫_o^{γo} F` for whichever potential was last attached.
    pub weight_cache: Option<f64>,
}

/// A ping-pong region: the closure of a hyperbolic half-plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Region {
    /// `|z − center| ≤ radius`.
    Disk { center: f64, radius: f64 },
    /// `|z − center| ≥ radius`.
    Exterior { center: f64, radius: f64 },
    /// `Re z ≥ x0`.
    Right { x0: f64 },
    /// `Re z ≤ x0`.
    Left { x0: f64 },
}

impl Region {
    pub fn contains(&self, z: Point) -> bool {
        match *self {
            Region::Disk { center, radius } => (z.x - center).hypot(z.y) <= radius,
            Region::Exterior { center, radius } => (z.x - center).hypot(z.y) >= radius,
            Region::Right { x0 } => z.x >= x0,
            Region::Left { x0 } => z.x <= x0,
        }
    }

    pub fn contains_boundary_point(&self, x: f64, tol: f64) -> bool {
        match *self {
            Region::Disk { center, radius } => (x - center).abs() <= radius + tol,
            Region::Exterior { center, radius } => (x - center).abs() >= radius - tol,
            Region::Right { x0 } => x >= x0 - tol,
            Region::Left { x0 } => x <= x0 + tol,
        }
    }

    fn endpoints(&self) -> (BoundaryPoint, BoundaryPoint) {
        match *self {
            Region::Disk { center, radius } | Region::Exterior { center, radius } => (
                BoundaryPoint::Finite(center - radius),
                BoundaryPoint::Finite(center + radius),
            ),
            Region::Right { x0 } | Region::Left { x0 } => {
                (BoundaryPoint::Finite(x0), BoundaryPoint::Infinity)
            }
        }
    }

    fn interior_sample(&self) -> Point {
        match *self {
            Region::Disk { center, radius } => Point { x: center, y: 0.5 * radius },
            Region::Exterior { center, radius } => Point { x: center, y: 2.0 * radius },
            Region::Right { x0 } => Point { x: x0 + 1.0, y: 1.0 },
            Region::Left { x0 } => Point { x: x0 - 1.0, y: 1.0 },
        }
    }

    /// Image of the region under an isometry.
    pub fn image(&self, g: &Isometry) -> Region {
        let (e1, e2) = self.endpoints();
        let (f1, f2) = (g.apply_boundary(e1), g.apply_boundary(e2));
        let sample = g.apply(self.interior_sample()).unwrap_or(Point { x: 0.0, y: 1.0 });
        match (f1, f2) {
            (BoundaryPoint::Finite(a), BoundaryPoint::Finite(b)) => {
                let center = 0.5 * (a + b);
                let radius = 0.5 * (a - b).abs();
                if (sample.x - center).hypot(sample.y) <= radius {
                    Region::Disk { center, radius }
                } else {
                    Region::Exterior { center, radius }
                }
            }
            (BoundaryPoint::Finite(x0), BoundaryPoint::Infinity)
            | (BoundaryPoint::Infinity, BoundaryPoint::Finite(x0)) => {
                if sample.x >= x0 {
                    Region::Right { x0 }
                } else {
                    Region::Left { x0 }
                }
            }
            _ => *self,
        }
    }

    /// Hyperbolic distance from `z` to the region (0 inside).
    pub fn distance_from(&self, z: Point) -> f64 {
        if self.contains(z) {
            return 0.0;
        }
        let (e1, e2) = self.endpoints();
        dist_to_geodesic(z, e1, e2)
    }
}

/// Generators of an extended Schottky group with a single parabolic.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSet {
    pub parabolic: Isometry,
    pub hyperbolics: Vec<Isometry>,
    pub labels: Vec<String>,
    pub verified: bool,
}

/// Output of [`schottky_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct SchottkyReport {
    pub ok: bool,
    /// `(label, sign, region)`; the region attracts positive (resp. negative) powers.
    pub witnesses: Vec<(String, i8, Region)>,
    pub offending_pair: Option<(String, String)>,
    pub failures: Vec<String>,
}

impl GeneratorSet {
    /// Builds and verifies a generator set.
    pub fn new(parabolic: Isometry, hyperbolics: Vec<Isometry>) -> Result<Self> {
        let mut labels = vec!["p".to_string()];
        if hyperbolics.len() == 1 {
            labels.push("h".to_string());
        } else {
            labels.extend((1..=hyperbolics.len()).map(|i| format!("h{i}")));
        }
        let mut gens = GeneratorSet { parabolic, hyperbolics, labels, verified: false };
        let report = schottky_check(&gens)?;
        gens.verified = report.ok;
        Ok(gens)
    }

    pub fn len(&self) -> usize {
        1 + self.hyperbolics.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn generator(&self, i: usize) -> Isometry {
        if i == 0 {
            self.parabolic
        } else {
            self.hyperbolics[i - 1]
        }
    }

    /// Translation length of the parabolic `z ↦ z + τ`.
    pub fn parabolic_translation(&self) -> f64 {
        self.parabolic.b / self.parabolic.d
    }

    pub fn word_matrix(&self, w: &Word) -> Isometry {
        w.blocks
            .iter()
            .fold(Isometry::identity(), |acc, b| acc * self.generator(b.generator).pow(b.exponent))
    }

    /// Ping-pong region attracting `g_i^{sign·k}`, `k ≥ 1`.
    pub fn region(&self, i: usize, sign: i8) -> Region {
        if i == 0 {
            let tau = self.parabolic_translation();
            let half = 0.5 * tau.abs();
            if (sign > 0) == (tau > 0.0) {
                Region::Right { x0: half }
            } else {
                Region::Left { x0: -half }
            }
        } else {
            let h = self.generator(i);
            let radius = 1.0 / h.c.abs();
            if sign > 0 {
                Region::Disk { center: h.a / h.c, radius }
            } else {
                Region::Disk { center: -h.d / h.c, radius }
            }
        }
    }

    /// Stable hash of the generator matrices, for cache keys.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for i in 0..self.len() {
            let g = self.generator(i);
            for v in [g.a, g.b, g.c, g.d] {
                v.to_bits().hash(&mut hasher);
            }
        }
        hasher.finish()
    }
}

/// Verifies the ping-pong conditions with half-plane strips for the
/// parabolic and isometric circles for the hyperbolics.
pub fn schottky_check(gens: &GeneratorSet) -> Result<SchottkyReport> {
    let p = gens.parabolic;
    match classify(&p) {
        Kind::Elliptic => return Err(Error::EllipticGenerator(p.trace().abs())),
        Kind::Parabolic => {}
        _ => return Err(Error::MissingParabolic),
    }
    if p.c.abs() > 1e-12 {
        return Err(Error::InvalidGenerators("parabolic must fix ∞".into()));
    }
    for h in &gens.hyperbolics {
        match classify(h) {
            Kind::Elliptic => return Err(Error::EllipticGenerator(h.trace().abs())),
            Kind::Hyperbolic => {}
            k => return Err(Error::InvalidGenerators(format!("expected hyperbolic, got {k:?}"))),
        }
        if h.c.abs() < 1e-12 {
            return Err(Error::InvalidGenerators("hyperbolic generator fixes ∞".into()));
        }
    }
    let mut witnesses = Vec::new();
    for i in 0..gens.len() {
        for sign in [1i8, -1] {
            witnesses.push((gens.labels[i].clone(), sign, gens.region(i, sign)));
        }
    }
    let tol = 1e-9;
    let mut failures = Vec::new();
    let mut offending_pair = None;
    for a in 0..witnesses.len() {
        for b in (a + 1)..witnesses.len() {
            if regions_overlap(&witnesses[a].2, &witnesses[b].2, tol) {
                let name = |w: &(String, i8, Region)| format!("{}{}", w.0, if w.1 > 0 { "+" } else { "-" });
                failures.push(format!("regions {} and {} overlap", name(&witnesses[a]), name(&witnesses[b])));
                if offending_pair.is_none() {
                    offending_pair = Some((name(&witnesses[a]), name(&witnesses[b])));
                }
            }
        }
    }
    // inclusion g^{±1}(∂ \ R(g, ∓)) ⊂ R(g, ±) on a boundary sample grid
    const SAMPLES: usize = 1024;
    for i in 0..gens.len() {
        let g = gens.generator(i);
        let powers: &[i64] = if i == 0 { &[1, -1, 2, -2] } else { &[1, -1] };
        for &k in powers {
            let sign: i8 = if k > 0 { 1 } else { -1 };
            let source_excluded = if i == 0 {
                // complement of the whole strip pair
                None
            } else {
                Some(gens.region(i, -sign))
            };
            let target = gens.region(i, sign);
            let gk = g.pow(k);
            for s in 0..SAMPLES {
                let theta = -std::f64::consts::FRAC_PI_2
                    + std::f64::consts::PI * (s as f64 + 0.5) / SAMPLES as f64;
                let x = theta.tan();
                let in_source = match source_excluded {
                    Some(r) => !r.contains_boundary_point(x, -tol),
                    None => !gens.region(0, 1).contains_boundary_point(x, -tol)
                        && !gens.region(0, -1).contains_boundary_point(x, -tol),
                };
                if !in_source {
                    continue;
                }
                match gk.apply_boundary(BoundaryPoint::Finite(x)) {
                    BoundaryPoint::Finite(y) => {
                        if !target.contains_boundary_point(y, 1e-7 * (1.0 + y.abs())) {
                            failures.push(format!(
                                "{}^{} maps boundary point {x} to {y} outside its region",
                                gens.labels[i], k
                            ));
                            break;
                        }
                    }
                    BoundaryPoint::Infinity => {
                        if !matches!(target, Region::Right { .. } | Region::Left { .. }) {
                            failures.push(format!("{}^{} maps {x} to ∞", gens.labels[i], k));
                            break;
                        }
                    }
                }
            }
        }
    }
    Ok(SchottkyReport { ok: failures.is_empty(), witnesses, offending_pair, failures })
}

fn regions_overlap(a: &Region, b: &Region, tol: f64) -> bool {
    use Region::*;
    match (*a, *b) {
        (Disk { center: c1, radius: r1 }, Disk { center: c2, radius: r2 }) => (c1 - c2).abs() < r1 + r2 - tol,
        (Disk { center, radius }, Right { x0 }) | (Right { x0 }, Disk { center, radius }) => center + radius > x0 + tol,
        (Disk { center, radius }, Left { x0 }) | (Left { x0 }, Disk { center, radius }) => center - radius < x0 - tol,
        (Right { x0: r }, Left { x0: l }) | (Left { x0: l }, Right { x0: r }) => l > r - tol,
        _ => true,
    }
}

/// `Γ_{n,m}`: hyperbolics replaced by their n-th powers and the parabolic by its m-th power.
pub fn power_subgroup(gens: &GeneratorSet, n: u32, m: u32) -> Result<GeneratorSet> {
    if n == 0 || m == 0 {
        return Err(Error::ZeroPower);
    }
    let hyps = gens.hyperbolics.iter().map(|h| h.pow(n as i64)).collect();
    let mut out = GeneratorSet::new(gens.parabolic.pow(m as i64), hyps)?;
    out.labels = gens.labels.clone();
    Ok(out)
}

/// All `p^k`, `k ≠ 0`, with `l < d(o, p^k o) ≤ L`, sorted by (displacement, k).
pub fn coset_annulus(gens: &GeneratorSet, o: Point, l: f64, big_l: f64) -> Vec<OrbitElement> {
    let mut out = Vec::new();
    let p = gens.parabolic;
    for sign in [1i64, -1] {
        let mut k = 1i64;
        loop {
            let g = p.pow(sign * k);
            let d = dist(o, g.apply(o).expect("parabolic maps points to points"));
            if d > big_l {
                break;
            }
            if d > l {
                out.push(OrbitElement {
                    word: Word::single(0, sign * k),
                    matrix: g,
                    displacement: d,
                    weight_cache: None,
                });
            }
            k += 1;
        }
    }
    out.sort_by(|a, b| a.displacement.total_cmp(&b.displacement).then_with(|| a.word.cmp(&b.word)));
    out
}

/// Result of [`enumerate_ball`].
#[derive(Debug, Clone)]
pub struct Ball {
    pub elements: Vec<OrbitElement>,
    pub radius: f64,
    pub base: Point,
    pub truncated: bool,
    pub nodes_expanded: usize,
    /// Largest `bound − displacement` observed; must be ≤ 0 up to rounding.
    pub max_bound_excess: f64,
}

impl Ball {
    /// Counting function samples `(R_i, N(R_i))`.
    pub fn counts(&self, radii: &[f64]) -> Vec<(f64, usize)> {
        radii
            .iter()
            .map(|&r| (r, self.elements.partition_point(|e| e.displacement <= r)))
            .collect()
    }

    pub fn restrict(&self, radius: f64) -> Ball {
        let n = self.elements.partition_point(|e| e.displacement <= radius);
        Ball {
            elements: self.elements[..n].to_vec(),
            radius,
            base: self.base,
            truncated: self.truncated,
            nodes_expanded: self.nodes_expanded,
            max_bound_excess: self.max_bound_excess,
        }
    }

    /// The sub-orbit of the parabolic subgroup (identity included).
    pub fn parabolic_suborbit(&self) -> Vec<OrbitElement> {
        self.elements
            .iter()
            .filter(|e| e.word.uses_only(0))
            .cloned()
            .collect()
    }
}

#[derive(Debug)]
struct Node {
    bound: f64,
    seq: u64,
    /// Arena index of the prefix word (`usize::MAX` for the identity).
    prefix: usize,
    /// Matrix of `prefix · g^{sign·k}`.
    matrix: Isometry,
    generator: usize,
    sign: i8,
    k: i64,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // min-heap on (bound, insertion order)
    fn cmp(&self, other: &Self) -> Ordering {
        other.bound.total_cmp(&self.bound).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Words stored as parent pointers; materialized only when emitted.
#[derive(Default)]
struct WordArena {
    nodes: Vec<(usize, Block)>,
}

impl WordArena {
    const ROOT: usize = usize::MAX;

    fn push(&mut self, parent: usize, block: Block) -> usize {
        self.nodes.push((parent, block));
        self.nodes.len() - 1
    }

    fn last_generator(&self, idx: usize) -> Option<usize> {
        (idx != Self::ROOT).then(|| self.nodes[idx].1.generator)
    }

    fn word(&self, mut idx: usize) -> Word {
        let mut blocks = Vec::new();
        while idx != Self::ROOT {
            let (parent, block) = self.nodes[idx];
            blocks.push(block);
            idx = parent;
        }
        blocks.reverse();
        Word { blocks }
    }
}

/// Piece of a set containing orbit points.
#[derive(Debug, Clone, Copy)]
enum Shape {
    Point(Point),
    Disk(Region),
    /// `{side·(Re z − x0) ≥ 0, Im z ≤ y_max}`, side = ±1.
    Strip { x0: f64, side: f64, y_max: f64 },
}

impl Shape {
    fn distance_from(&self, q: Point) -> f64 {
        match *self {
            Shape::Point(z) => dist(q, z),
            Shape::Disk(r) => r.distance_from(q),
            Shape::Strip { x0, side, y_max } => {
                let inside_x = side * (q.x - x0) >= 0.0;
                if inside_x && q.y <= y_max {
                    return 0.0;
                }
                let mut best = dist(q, Point { x: x0, y: y_max });
                // vertical edge: foot of the perpendicular from q
                let foot = (q.x - x0).hypot(q.y);
                if foot <= y_max {
                    best = best.min(dist(q, Point { x: x0, y: foot }));
                }
                if inside_x {
                    best = best.min(dist(q, Point { x: q.x, y: y_max }));
                }
                best
            }
        }
    }
}

/// For each (generator g, sign σ) a set `E` with `g^σ E ⊂ E` containing
/// every `g^{σj} x o`, `j ≥ 0`, where `x` does not start with `g`. The
/// subtree of a word `W` ending in a `g^σ`-block lies in `W·E`, so
/// `dist(W⁻¹o, E)` bounds its displacements from below.
fn subtree_sets(gens: &GeneratorSet, o: Point) -> Vec<[Vec<Shape>; 2]> {
    let mut x_extent = o.x.abs();
    let mut y_max = o.y;
    for i in 1..gens.len() {
        for s in [1i8, -1] {
            if let Region::Disk { center, radius } = gens.region(i, s) {
                x_extent = x_extent.max(center.abs() + radius);
                y_max = y_max.max(radius);
            }
        }
    }
    let tau = gens.parabolic_translation();
    let strip = |sign: i8| {
        let side = sign as f64 * tau.signum();
        Shape::Strip { x0: side * (tau.abs() - x_extent), side, y_max }
    };
    let piece = |i: usize, sign: i8| if i == 0 { strip(sign) } else { Shape::Disk(gens.region(i, sign)) };
    (0..gens.len())
        .map(|g| {
            [1i8, -1].map(|sigma| {
                let mut set = vec![Shape::Point(o), piece(g, sigma)];
                for other in (0..gens.len()).filter(|&j| j != g) {
                    set.push(piece(other, 1));
                    set.push(piece(other, -1));
                }
                set
            })
        })
        .collect()
}

fn set_distance(set: &[Shape], q: Point) -> f64 {
    set.iter().map(|s| s.distance_from(q)).fold(f64::INFINITY, f64::min)
}

fn pull_back(m: &Isometry, o: Point) -> Point {
    m.inverse().apply(o).expect("isometries preserve the upper half-plane")
}

pub const DEFAULT_NODE_BUDGET: usize = 20_000_000;

/// Every reduced word `γ` with `d(o, γo) ≤ R`, identity included, sorted by
/// displacement then word.
pub fn enumerate_ball(gens: &GeneratorSet, o: Point, radius: f64) -> Result<Ball> {
    enumerate_ball_with_budget(gens, o, radius, DEFAULT_NODE_BUDGET)
}

pub fn enumerate_ball_with_budget(gens: &GeneratorSet, o: Point, radius: f64, budget: usize) -> Result<Ball> {
    enumerate_partition(gens, o, radius, budget, None)
}

/// Best-first search restricted to words whose first block is `first`
/// (generator, sign) when given.
fn enumerate_partition(
    gens: &GeneratorSet,
    o: Point,
    radius: f64,
    budget: usize,
    first: Option<(usize, i8)>,
) -> Result<Ball> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("radius must be positive".into()));
    }
    for i in 0..gens.len() {
        for s in [1i8, -1] {
            if gens.region(i, s).contains(o) {
                return Err(Error::InvalidArgument(format!(
                    "base point {o} lies in the ping-pong region of {}",
                    gens.labels[i]
                )));
            }
        }
    }
    let mut elements = vec![OrbitElement {
        word: Word::identity(),
        matrix: Isometry::identity(),
        displacement: 0.0,
        weight_cache: None,
    }];
    let mut heap = BinaryHeap::new();
    let mut arena = WordArena::default();
    let mut seq = 0u64;
    let sets = subtree_sets(gens, o);
    let powers: Vec<[Isometry; 2]> = (0..gens.len())
        .map(|i| [gens.generator(i), gens.generator(i).inverse()])
        .collect();
    let push_children = |heap: &mut BinaryHeap<Node>, seq: &mut u64, last: Option<usize>, word: usize, m: &Isometry| {
        for i in 0..gens.len() {
            if last == Some(i) {
                continue;
            }
            for (si, sign) in [1i8, -1].into_iter().enumerate() {
                if word == WordArena::ROOT && first.is_some_and(|f| f != (i, sign)) {
                    continue;
                }
                let child = *m * powers[i][si];
                let bound = set_distance(&sets[i][si], pull_back(&child, o));
                if bound <= radius {
                    *seq += 1;
                    heap.push(Node { bound, seq: *seq, prefix: word, matrix: child, generator: i, sign, k: 1 });
                }
            }
        }
    };
    push_children(&mut heap, &mut seq, None, WordArena::ROOT, &Isometry::identity());
    let mut expanded = 0usize;
    let mut truncated = false;
    let mut max_excess = f64::NEG_INFINITY;
    while let Some(node) = heap.pop() {
        if node.bound > radius {
            break;
        }
        expanded += 1;
        if expanded > budget {
            truncated = true;
            break;
        }
        let si = if node.sign > 0 { 0 } else { 1 };
        let m = node.matrix;
        let block = Block { generator: node.generator, exponent: node.sign as i64 * node.k };
        let word = arena.push(node.prefix, block);
        let d = dist(o, m.apply(o)?);
        max_excess = max_excess.max(node.bound - d);
        if d <= radius {
            elements.push(OrbitElement { word: arena.word(word), matrix: m, displacement: d, weight_cache: None });
        }
        // next exponent: nested set, bound nondecreasing
        let sibling = (m * powers[node.generator][si]).renormalized();
        let sib_bound = set_distance(&sets[node.generator][si], pull_back(&sibling, o)).max(node.bound);
        if sib_bound <= radius {
            seq += 1;
            heap.push(Node {
                bound: sib_bound,
                seq,
                prefix: node.prefix,
                matrix: sibling,
                generator: node.generator,
                sign: node.sign,
                k: node.k + 1,
            });
        }
        debug_assert_eq!(arena.last_generator(word), Some(node.generator));
        push_children(&mut heap, &mut seq, Some(node.generator), word, &m);
    }
    elements.sort_by(|a, b| a.displacement.total_cmp(&b.displacement).then_with(|| a.word.cmp(&b.word)));
    Ok(Ball {
        elements,
        radius,
        base: o,
        truncated,
        nodes_expanded: expanded,
        max_bound_excess: max_excess,
    })
}

/// Enumerates the ball in parallel, one partition per first block
/// generator/sign, and merges in the canonical order.
pub fn enumerate_ball_parallel(gens: &GeneratorSet, o: Point, radius: f64, workers: usize) -> Result<Ball> {
    if workers <= 1 {
        return enumerate_ball(gens, o, radius);
    }
    use rayon::prelude::*;
    let firsts: Vec<(usize, i8)> = (0..gens.len()).flat_map(|i| [(i, 1i8), (i, -1i8)]).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let parts: Vec<Result<Ball>> = pool.install(|| {
        firsts
            .par_iter()
            .map(|&f| enumerate_partition(gens, o, radius, DEFAULT_NODE_BUDGET, Some(f)))
            .collect()
    });
    let mut elements = vec![OrbitElement {
        word: Word::identity(),
        matrix: Isometry::identity(),
        displacement: 0.0,
        weight_cache: None,
    }];
    let (mut truncated, mut expanded, mut excess) = (false, 0, f64::NEG_INFINITY);
    for p in parts {
        let p = p?;
        truncated |= p.truncated;
        expanded += p.nodes_expanded;
        excess = excess.max(p.max_bound_excess);
        elements.extend(p.elements.into_iter().filter(|e| !e.word.is_identity()));
    }
    elements.sort_by(|a, b| a.displacement.total_cmp(&b.displacement).then_with(|| a.word.cmp(&b.word)));
    Ok(Ball { elements, radius, base: o, truncated, nodes_expanded: expanded, max_bound_excess: excess })
}

/// Empirical triangle constant: max of `d(o,y) + d(o,z) − d(y,z)` over lattice
/// samples `y` in the hyperbolic regions and `z` in the parabolic regions,
/// times the safety factor 1.1.
pub fn calibrate_triangle_constant(gens: &GeneratorSet, o: Point, samples_per_side: usize) -> f64 {
    let sample_region = |r: &Region| -> Vec<Point> {
        let n = samples_per_side.max(2);
        let mut pts = Vec::with_capacity(n);
        let side = (n as f64).sqrt().ceil() as usize;
        for a in 0..side {
            for b in 0..side {
                let u = (a as f64 + 0.5) / side as f64;
                let v = (b as f64 + 0.5) / side as f64;
                let z = match *r {
                    Region::Disk { center, radius } | Region::Exterior { center, radius } => {
                        let rho = radius * u;
                        let th = std::f64::consts::PI * v;
                        Point { x: center + rho * th.cos(), y: (rho * th.sin()).max(1e-9 * radius) }
                    }
                    Region::Right { x0 } => Point { x: x0 + 10.0 * u, y: (10.0 * (v - 0.5)).exp() },
                    Region::Left { x0 } => Point { x: x0 - 10.0 * u, y: (10.0 * (v - 0.5)).exp() },
                };
                pts.push(z);
            }
        }
        pts
    };
    let mut hyp_pts = Vec::new();
    for i in 1..gens.len() {
        for s in [1i8, -1] {
            hyp_pts.extend(sample_region(&gens.region(i, s)));
        }
    }
    let mut par_pts = Vec::new();
    for s in [1i8, -1] {
        par_pts.extend(sample_region(&gens.region(0, s)));
    }
    let mut worst = 0.0f64;
    for y in &hyp_pts {
        for z in &par_pts {
            worst = worst.max(dist(o, *y) + dist(o, *z) - dist(*y, *z));
        }
    }
    1.1 * worst
}

/// Writes an orbit cache: one `word displacement` record per line.
pub fn write_orbit_cache<W: Write>(out: &mut W, gens: &GeneratorSet, ball: &Ball) -> Result<()> {
    writeln!(
        out,
        "# orbit-cache v1 key={:016x} base={:.16e},{:.16e} radius={:.16e} count={}",
        gens.fingerprint(),
        ball.base.x,
        ball.base.y,
        ball.radius,
        ball.elements.len()
    )?;
    for e in &ball.elements {
        writeln!(out, "{} {:.16e}", e.word.format_with(&gens.labels), e.displacement)?;
    }
    Ok(())
}

/// Reads an orbit cache written by [`write_orbit_cache`]; the key must match.
pub fn read_orbit_cache<R: BufRead>(input: R, gens: &GeneratorSet) -> Result<Ball> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty orbit cache".into()))??;
    let field = |name: &str| -> Result<String> {
        header
            .split_whitespace()
            .find_map(|tok| tok.strip_prefix(&format!("{name}=")).map(str::to_string))
            .ok_or_else(|| Error::Config(format!("orbit cache header missing {name}")))
    };
    let key = u64::from_str_radix(&field("key")?, 16).map_err(|e| Error::Config(e.to_string()))?;
    if key != gens.fingerprint() {
        return Err(Error::Config("orbit cache key does not match generators".into()));
    }
    let base = field("base")?;
    let (bx, by) = base.split_once(',').ok_or_else(|| Error::Config("bad base".into()))?;
    let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(e.to_string()));
    let base = Point::new(parse(bx)?, parse(by)?)?;
    let radius = parse(&field("radius")?)?;
    let mut elements = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (w, d) = line
            .rsplit_once(' ')
            .ok_or_else(|| Error::Config(format!("bad cache line '{line}'")))?;
        let word = Word::parse_with(w, &gens.labels)?;
        let matrix = gens.word_matrix(&word);
        elements.push(OrbitElement { word, matrix, displacement: parse(d)?, weight_cache: None });
    }
    Ok(Ball { elements, radius, base, truncated: false, nodes_expanded: 0, max_bound_excess: f64::NEG_INFINITY })
}

/// The Schottky example used throughout: `p: z ↦ z + 6` and `h` with
/// isometric circles of radius 1 centered at ±2.
pub fn standard_example() -> GeneratorSet {
    GeneratorSet::new(
        Isometry::translation(6.0),
        vec![Isometry::new(2.0, -3.0, -1.0, 2.0).expect("valid matrix")],
    )
    .expect("valid generators")
}

/// Base point on the axis of `h` for [`standard_example`].
pub fn standard_base_point() -> Point {
    Point { x: 0.0, y: 3f64.sqrt() }
}

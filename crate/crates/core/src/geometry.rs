//! Exact geometric primitives: the paraboloid τ = −½|ξ|², caps on it,
//! spacetime tubes and regions, and the rectangle hyperplanes π(ξ₁, ξ′₂).
//!
//! Spatial vectors are stored as `[f64; 3]` with the unused trailing
//! components set to zero, so dot products and norms are correct for every
//! supported dimension n ∈ {1, 2, 3} without carrying `n` around.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, LabError, Result};

pub const MAX_DIM: usize = 3;

pub type Vector = [f64; MAX_DIM];
pub type LatticeIndex = [i64; MAX_DIM];

pub const ZERO: Vector = [0.0; MAX_DIM];

#[inline]
pub fn dot(a: &Vector, b: &Vector) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm_sq(a: &Vector) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &Vector) -> f64 {
    norm_sq(a).sqrt()
}

#[inline]
pub fn add(a: &Vector, b: &Vector) -> Vector {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: &Vector, b: &Vector) -> Vector {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: &Vector, s: f64) -> Vector {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn axpy(a: &Vector, s: f64, b: &Vector) -> Vector {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

/// The standard basis vector e₁.
pub const E1: Vector = [1.0, 0.0, 0.0];

pub(crate) fn check_dimension(n: usize) -> Result<()> {
    if (1..=MAX_DIM).contains(&n) {
        Ok(())
    } else {
        Err(invalid_config(format!("n: dimension {n} not in 1..=3")))
    }
}

/// Truncate a vector to its first `n` components (zeroing the rest).
pub fn project(v: &Vector, n: usize) -> Vector {
    let mut out = ZERO;
    out[..n].copy_from_slice(&v[..n]);
    out
}

/// A point (τ, ξ) of spacetime frequency space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPoint {
    pub xi: Vector,
    pub tau: f64,
}

impl FrequencyPoint {
    /// Distance from the paraboloid in the τ direction.
    pub fn surface_defect(&self) -> f64 {
        (self.tau + 0.5 * norm_sq(&self.xi)).abs()
    }
}

/// Temporal frequency of the paraboloid above `xi`.
#[inline]
pub fn tau_of(xi: &Vector) -> f64 {
    -0.5 * norm_sq(xi)
}

/// Lift a spatial frequency onto the paraboloid τ = −½|ξ|².
pub fn paraboloid_lift(xi: Vector) -> FrequencyPoint {
    FrequencyPoint { xi, tau: tau_of(&xi) }
}

/// Which of the two transverse surface pieces an object belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Side {
    One,
    Two,
}

impl Side {
    /// Centre of the side's frequency patch: +e₁ or −e₁.
    pub fn center(self) -> Vector {
        match self {
            Side::One => E1,
            Side::Two => scale(&E1, -1.0),
        }
    }

    pub fn label(self) -> u8 {
        match self {
            Side::One => 1,
            Side::Two => 2,
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::One => Side::Two,
            Side::Two => Side::One,
        }
    }
}

impl TryFrom<u8> for Side {
    type Error = LabError;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            1 => Ok(Side::One),
            2 => Ok(Side::Two),
            other => Err(invalid_input(format!("side must be 1 or 2, got {other}"))),
        }
    }
}

impl From<Side> for u8 {
    fn from(side: Side) -> u8 {
        side.label()
    }
}

/// Size class of a cap around ±e₁.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchTier {
    /// S₁, S₂: radius 1/(100n).
    Base,
    /// S̃₁, S̃₂: radius 1/(50n).
    Enlarged,
    /// Ω₁, Ω₂: radius 1/(20n).
    Omega,
}

impl PatchTier {
    pub fn radius(self, n: usize) -> f64 {
        let n = n as f64;
        match self {
            PatchTier::Base => 1.0 / (100.0 * n),
            PatchTier::Enlarged => 1.0 / (50.0 * n),
            PatchTier::Omega => 1.0 / (20.0 * n),
        }
    }
}

/// Whether `xi` lies in the closed disk of the given tier around the side's centre.
pub fn in_region(xi: &Vector, side: Side, tier: PatchTier, n: usize, slack: f64) -> bool {
    norm(&sub(xi, &side.center())) <= tier.radius(n) * (1.0 + 1e-12) + slack
}

/// A uniform lattice `origin + spacing·ℤⁿ` of spatial frequencies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyLattice {
    pub n: usize,
    pub origin: Vector,
    pub spacing: f64,
}

impl FrequencyLattice {
    pub fn point(&self, index: &LatticeIndex) -> Vector {
        let mut out = self.origin;
        for d in 0..self.n {
            out[d] += self.spacing * index[d] as f64;
        }
        out
    }

    /// Cell volume spacingⁿ.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.n as i32)
    }

    /// Two lattices index the same point set.
    pub fn same_as(&self, other: &FrequencyLattice) -> bool {
        self.n == other.n
            && (self.spacing - other.spacing).abs() <= 1e-12 * self.spacing
            && norm(&sub(&self.origin, &other.origin)) <= 1e-12
    }
}

/// A cap on the paraboloid sampled on a lattice, with quadrature weights
/// representing Euclidean surface measure dσ.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePatch {
    n: usize,
    center: Vector,
    radius: f64,
    lattice: FrequencyLattice,
    indices: Vec<LatticeIndex>,
    nodes: Vec<FrequencyPoint>,
    weights: Vec<f64>,
}

/// Graph-measure Jacobian √(1 + |ξ|²) of the parametrisation ξ ↦ (−½|ξ|², ξ).
#[inline]
pub fn graph_jacobian(xi: &Vector) -> f64 {
    (1.0 + norm_sq(xi)).sqrt()
}

impl SurfacePatch {
    /// All lattice points within `radius` of `center`.
    pub fn lattice_disk(lattice: FrequencyLattice, center: Vector, radius: f64) -> Result<Self> {
        let n = lattice.n;
        check_dimension(n)?;
        if !(lattice.spacing > 0.0) || !lattice.spacing.is_finite() {
            return Err(invalid_config("lattice spacing must be positive"));
        }
        if !(radius >= 0.0) {
            return Err(invalid_config("patch radius must be non-negative"));
        }
        let h = lattice.spacing;
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [0i64; MAX_DIM];
        for d in 0..n {
            lo[d] = ((center[d] - radius - lattice.origin[d]) / h).floor() as i64 - 1;
            hi[d] = ((center[d] + radius - lattice.origin[d]) / h).ceil() as i64 + 1;
        }
        let cutoff = radius * (1.0 + 1e-12) + 1e-15;
        let mut indices = Vec::new();
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let cell = lattice.cell_volume();
        for_each_index(&lo, &hi, n, |idx| {
            let xi = lattice.point(idx);
            if norm(&sub(&xi, &center)) <= cutoff {
                indices.push(*idx);
                nodes.push(paraboloid_lift(xi));
                weights.push(cell * graph_jacobian(&xi));
            }
        });
        if nodes.is_empty() {
            return Err(invalid_config(format!(
                "patch of radius {radius} contains no lattice node at spacing {h}"
            )));
        }
        Ok(SurfacePatch {
            n,
            center,
            radius,
            lattice,
            indices,
            nodes,
            weights,
        })
    }

    /// A patch of the given tier whose lattice is anchored at the side's
    /// centre with the given node spacing.
    pub fn on_lattice(n: usize, side: Side, tier: PatchTier, spacing: f64) -> Result<Self> {
        check_dimension(n)?;
        let center = side.center();
        let lattice = FrequencyLattice {
            n,
            origin: center,
            spacing,
        };
        Self::lattice_disk(lattice, center, tier.radius(n))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn center(&self) -> Vector {
        self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn lattice(&self) -> &FrequencyLattice {
        &self.lattice
    }

    pub fn indices(&self) -> &[LatticeIndex] {
        &self.indices
    }

    pub fn nodes(&self) -> &[FrequencyPoint] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total quadrature weight (approximate surface measure of the cap).
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Position of a lattice index within this patch, if present.
    pub fn position_of(&self, index: &LatticeIndex) -> Option<usize> {
        // Indices are generated in lexicographic order.
        self.indices.binary_search_by(|probe| probe.cmp(index)).ok()
    }

    /// Same patch with every node frequency multiplied by `factor` (and the
    /// weights recomputed for the dilated lattice).
    pub fn dilated(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(invalid_config("dilation factor must be positive"));
        }
        let lattice = FrequencyLattice {
            n: self.n,
            origin: scale(&self.lattice.origin, factor),
            spacing: self.lattice.spacing * factor,
        };
        let cell = lattice.cell_volume();
        let nodes: Vec<FrequencyPoint> = self
            .nodes
            .iter()
            .map(|p| paraboloid_lift(scale(&p.xi, factor)))
            .collect();
        let weights = nodes.iter().map(|p| cell * graph_jacobian(&p.xi)).collect();
        Ok(SurfacePatch {
            n: self.n,
            center: scale(&self.center, factor),
            radius: self.radius * factor,
            lattice,
            indices: self.indices.clone(),
            nodes,
            weights,
        })
    }

    /// Same node set translated by `shift` in ξ (a Galilean boost).
    pub fn translated(&self, shift: Vector) -> Self {
        let shift = project(&shift, self.n);
        let lattice = FrequencyLattice {
            origin: add(&self.lattice.origin, &shift),
            ..self.lattice
        };
        let cell = lattice.cell_volume();
        let nodes: Vec<FrequencyPoint> = self.nodes.iter().map(|p| paraboloid_lift(add(&p.xi, &shift))).collect();
        let weights = nodes.iter().map(|p| cell * graph_jacobian(&p.xi)).collect();
        SurfacePatch {
            n: self.n,
            center: add(&self.center, &shift),
            radius: self.radius,
            lattice,
            indices: self.indices.clone(),
            nodes,
            weights,
        }
    }
}

/// Build the patch of the given tier with `resolution` lattice cells per radius,
/// nodes at cell centres.
pub fn make_patch(n: usize, side: Side, tier: PatchTier, resolution: usize) -> Result<SurfacePatch> {
    check_dimension(n)?;
    if resolution == 0 {
        return Err(invalid_config("patch resolution must be at least 1"));
    }
    let spacing = tier.radius(n) / resolution as f64;
    // Cell-centred nodes: the boundary then carries no half-cell bias.
    let center = side.center();
    let mut origin = center;
    for o in origin.iter_mut().take(n) {
        *o += 0.5 * spacing;
    }
    let lattice = FrequencyLattice { n, origin, spacing };
    SurfacePatch::lattice_disk(lattice, center, tier.radius(n))
}

/// Visit every index in the box `lo..=hi` over the first `n` axes in
/// lexicographic order.
pub(crate) fn for_each_index(lo: &LatticeIndex, hi: &LatticeIndex, n: usize, mut f: impl FnMut(&LatticeIndex)) {
    let mut idx = *lo;
    for d in n..MAX_DIM {
        idx[d] = 0;
    }
    if (0..n).any(|d| lo[d] > hi[d]) {
        return;
    }
    loop {
        f(&idx);
        let mut d = n;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            if idx[d] < hi[d] {
                idx[d] += 1;
                idx[(d + 1)..n].copy_from_slice(&lo[(d + 1)..n]);
                break;
            }
        }
    }
}

/// A point (t, x) of spacetime.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacetimePoint {
    pub t: f64,
    pub x: Vector,
}

impl SpacetimePoint {
    pub fn new(t: f64, x: Vector) -> Self {
        SpacetimePoint { t, x }
    }

    pub fn distance(&self, other: &SpacetimePoint) -> f64 {
        let dt = self.t - other.t;
        (dt * dt + norm_sq(&sub(&self.x, &other.x))).sqrt()
    }
}

/// Spatial grid spacing R^{1/2} of tube initial positions.
pub fn position_spacing(r: f64) -> f64 {
    r.sqrt()
}

/// Velocity grid spacing R^{-1/2}.
pub fn velocity_spacing(r: f64) -> f64 {
    1.0 / r.sqrt()
}

/// The grid velocity of `side` with the given index: centre + R^{-1/2}·k.
pub fn grid_velocity(side: Side, r: f64, index: &LatticeIndex, n: usize) -> Vector {
    let mut v = side.center();
    let s = velocity_spacing(r);
    for d in 0..n {
        v[d] += s * index[d] as f64;
    }
    v
}

/// Nearest grid velocity index to a frequency (rounding in each axis).
pub fn nearest_velocity_index(side: Side, r: f64, xi: &Vector, n: usize) -> LatticeIndex {
    let c = side.center();
    let inv = r.sqrt();
    let mut k = [0i64; MAX_DIM];
    for d in 0..n {
        k[d] = ((xi[d] - c[d]) * inv).round() as i64;
    }
    k
}

/// Outcome of measuring a point against a tube's time slab.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SlabDistance {
    /// Spatial distance from the tube axis at the point's time.
    Within(f64),
    /// The point's time lies outside [R/2, R].
    OutOfSlab,
}

impl SlabDistance {
    pub fn value(self) -> Option<f64> {
        match self {
            SlabDistance::Within(d) => Some(d),
            SlabDistance::OutOfSlab => None,
        }
    }
}

/// A 1 × R^{1/2} × R spacetime slab
/// {R/2 ≤ t ≤ R, |x − (x(T) + t v(T))| ≤ R^{1/2}} with grid position and velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub n: usize,
    pub side: Side,
    pub scale: f64,
    pub position_index: LatticeIndex,
    pub velocity_index: LatticeIndex,
    pub x0: Vector,
    pub v: Vector,
}

impl Tube {
    /// Construct a tube from its grid indices; the velocity must lie in the
    /// enlarged patch S̃ of its side.
    pub fn new(
        n: usize,
        side: Side,
        scale: f64,
        position_index: LatticeIndex,
        velocity_index: LatticeIndex,
    ) -> Result<Self> {
        check_dimension(n)?;
        if !(scale >= 1.0) {
            return Err(invalid_config(format!("scale R = {scale} must be at least 1")));
        }
        let mut position_index = position_index;
        let mut velocity_index = velocity_index;
        for d in n..MAX_DIM {
            position_index[d] = 0;
            velocity_index[d] = 0;
        }
        let l = position_spacing(scale);
        let mut x0 = ZERO;
        for d in 0..n {
            x0[d] = l * position_index[d] as f64;
        }
        let v = grid_velocity(side, scale, &velocity_index, n);
        if !in_region(&v, side, PatchTier::Enlarged, n, 0.0) {
            return Err(invalid_input(format!(
                "velocity {:?} of side {} lies outside the enlarged patch",
                &v[..n],
                side.label()
            )));
        }
        Ok(Tube {
            n,
            side,
            scale,
            position_index,
            velocity_index,
            x0,
            v,
        })
    }

    pub fn radius(&self) -> f64 {
        position_spacing(self.scale)
    }

    pub fn t_min(&self) -> f64 {
        0.5 * self.scale
    }

    pub fn t_max(&self) -> f64 {
        self.scale
    }

    /// Axis position x(T) + t v(T).
    pub fn axis_at(&self, t: f64) -> Vector {
        axpy(&self.x0, t, &self.v)
    }

    /// Distance of (t, x) from the axis, or the out-of-slab marker.
    pub fn distance(&self, t: f64, x: &Vector) -> SlabDistance {
        if t < self.t_min() || t > self.t_max() {
            SlabDistance::OutOfSlab
        } else {
            SlabDistance::Within(norm(&sub(x, &self.axis_at(t))))
        }
    }

    /// Membership in the fattened tube R^δ T (spatial radius R^{1/2+δ}).
    pub fn fattened_contains(&self, t: f64, x: &Vector, delta: f64) -> bool {
        match self.distance(t, x) {
            SlabDistance::Within(d) => d <= self.scale.powf(0.5 + delta),
            SlabDistance::OutOfSlab => false,
        }
    }

    /// Spacetime distance from a point to the axis segment
    /// {(t, x(T) + t v(T)) : R/2 ≤ t ≤ R}.
    pub fn axis_segment_distance(&self, p: &SpacetimePoint) -> f64 {
        // Minimise (t − p.t)² + |x0 + t v − p.x|² over the slab.
        let w = sub(&self.x0, &p.x);
        let vv = norm_sq(&self.v);
        let t_star = (p.t - dot(&w, &self.v)) / (1.0 + vv);
        let t = t_star.clamp(self.t_min(), self.t_max());
        let axis = SpacetimePoint::new(t, self.axis_at(t));
        axis.distance(p)
    }

    /// Spacetime distance from a point to the slab
    /// {R/2 ≤ t ≤ R, |x − axis(t)| ≤ radius}.
    pub fn slab_distance(&self, p: &SpacetimePoint, radius: f64) -> f64 {
        let g = |t: f64| {
            let dt = t - p.t;
            let dx = (norm(&sub(&self.axis_at(t), &p.x)) - radius).max(0.0);
            dt * dt + dx * dx
        };
        // The objective is convex in t; golden-section search on the slab.
        let (mut a, mut b) = (self.t_min(), self.t_max());
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let (mut gc, mut gd) = (g(c), g(d));
        for _ in 0..80 {
            if gc <= gd {
                b = d;
                d = c;
                gd = gc;
                c = b - inv_phi * (b - a);
                gc = g(c);
            } else {
                a = c;
                c = d;
                gc = gd;
                d = a + inv_phi * (b - a);
                gd = g(d);
            }
            if b - a < 1e-12 * self.scale {
                break;
            }
        }
        let best = g(self.t_min()).min(g(self.t_max())).min(gc).min(gd);
        best.sqrt()
    }
}

/// Free-function form of [`Tube::distance`].
pub fn tube_distance(tube: &Tube, t: f64, x: &Vector) -> SlabDistance {
    tube.distance(t, x)
}

/// Spacetime regions used for norms and covers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SpacetimeRegion {
    /// Q_R = {R/2 ≤ t ≤ R, |x| ≤ R}.
    Cylinder { r: f64 },
    /// Open ball B((t, x), radius).
    Ball { center: SpacetimePoint, radius: f64 },
    /// {t0 ≤ t ≤ t1, |x − center| ≤ half_width}.
    Slab {
        t0: f64,
        t1: f64,
        center: Vector,
        half_width: f64,
    },
}

impl SpacetimeRegion {
    pub fn cylinder(r: f64) -> Self {
        SpacetimeRegion::Cylinder { r }
    }

    pub fn contains(&self, p: &SpacetimePoint) -> bool {
        match *self {
            SpacetimeRegion::Cylinder { r } => p.t >= 0.5 * r && p.t <= r && norm(&p.x) <= r,
            SpacetimeRegion::Ball { center, radius } => center.distance(p) < radius,
            SpacetimeRegion::Slab {
                t0,
                t1,
                center,
                half_width,
            } => p.t >= t0 && p.t <= t1 && norm(&sub(&p.x, &center)) <= half_width,
        }
    }

    /// Lebesgue measure in ℝ^{1+n}.
    pub fn volume(&self, n: usize) -> f64 {
        match *self {
            SpacetimeRegion::Cylinder { r } => 0.5 * r * ball_volume(n, r),
            SpacetimeRegion::Ball { radius, .. } => ball_volume(n + 1, radius),
            SpacetimeRegion::Slab { t0, t1, half_width, .. } => (t1 - t0) * ball_volume(n, half_width),
        }
    }

    /// Axis-aligned bounding box: (t range, per-axis x ranges).
    pub fn bounding_box(&self, n: usize) -> ((f64, f64), [(f64, f64); MAX_DIM]) {
        let mut xr = [(0.0, 0.0); MAX_DIM];
        match *self {
            SpacetimeRegion::Cylinder { r } => {
                for item in xr.iter_mut().take(n) {
                    *item = (-r, r);
                }
                ((0.5 * r, r), xr)
            }
            SpacetimeRegion::Ball { center, radius } => {
                for d in 0..n {
                    xr[d] = (center.x[d] - radius, center.x[d] + radius);
                }
                ((center.t - radius, center.t + radius), xr)
            }
            SpacetimeRegion::Slab {
                t0,
                t1,
                center,
                half_width,
            } => {
                for d in 0..n {
                    xr[d] = (center[d] - half_width, center[d] + half_width);
                }
                ((t0, t1), xr)
            }
        }
    }
}

/// Volume of the Euclidean ball of radius r in ℝ^d.
pub fn ball_volume(d: usize, r: f64) -> f64 {
    let unit = match d {
        0 => 1.0,
        1 => 2.0,
        2 => std::f64::consts::PI,
        3 => 4.0 / 3.0 * std::f64::consts::PI,
        4 => 0.5 * std::f64::consts::PI * std::f64::consts::PI,
        _ => {
            // Recurrence V_d = 2π/d · V_{d−2}.
            let mut v = if d.is_multiple_of(2) { 1.0 } else { 2.0 };
            let mut k = if d.is_multiple_of(2) { 2 } else { 3 };
            while k <= d {
                v *= 2.0 * std::f64::consts::PI / k as f64;
                k += 2;
            }
            v
        }
    };
    unit * r.powi(d as i32)
}

/// The hyperplane through ξ₁ with normal e = ξ′₂ − ξ₁, containing π(ξ₁, ξ′₂).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectanglePlane {
    pub base: Vector,
    pub direction: Vector,
    pub offset: f64,
}

impl RectanglePlane {
    /// Signed distance of ξ from the plane.
    pub fn signed_distance(&self, xi: &Vector) -> f64 {
        (dot(xi, &self.direction) - self.offset) / norm(&self.direction)
    }

    /// Unit normal.
    pub fn unit_normal(&self) -> Vector {
        scale(&self.direction, 1.0 / norm(&self.direction))
    }
}

pub fn rectangle_plane(xi1: Vector, xi2p: Vector) -> Result<RectanglePlane> {
    let direction = sub(&xi2p, &xi1);
    if norm(&direction) <= 1e-14 {
        return Err(LabError::DegenerateGeometry(
            "rectangle plane needs distinct ξ₁ and ξ′₂".into(),
        ));
    }
    Ok(RectanglePlane {
        base: xi1,
        direction,
        offset: dot(&xi1, &direction),
    })
}

/// How the residual of the rectangle relations is compared against zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Membership {
    /// |residual| ≤ 1e−10 with exact region membership.
    Exact,
    /// Distance to the plane ≤ K·R^{−1/2}, regions enlarged by the same amount.
    Scaled { k: f64, r: f64 },
}

impl Membership {
    pub const EXACT_TOLERANCE: f64 = 1e-10;

    /// Distance budget in ξ units (zero for exact membership).
    pub fn slack(&self) -> f64 {
        match *self {
            Membership::Exact => 0.0,
            Membership::Scaled { k, r } => k / r.sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RectangleResidual {
    pub xi2: Vector,
    pub residual: f64,
    pub member: bool,
}

/// Solve the momentum relation ξ₂ = ξ′₁ + ξ′₂ − ξ₁ and measure the failure of
/// the energy relation |ξ₁|² + |ξ₂|² = |ξ′₁|² + |ξ′₂|².
///
/// Membership additionally requires all four frequencies to lie in their Ω
/// regions, which makes it symmetric under exchanging the primed and
/// unprimed pairs.
pub fn rectangle_residual(
    n: usize,
    xi1: Vector,
    xi1p: Vector,
    xi2p: Vector,
    membership: Membership,
) -> RectangleResidual {
    let xi2 = sub(&add(&xi1p, &xi2p), &xi1);
    let residual = norm_sq(&xi1) + norm_sq(&xi2) - norm_sq(&xi1p) - norm_sq(&xi2p);
    let slack = membership.slack();
    let residual_ok = match membership {
        Membership::Exact => residual.abs() <= Membership::EXACT_TOLERANCE,
        Membership::Scaled { .. } => {
            // residual = 2⟨ξ′₁ − ξ₁, e⟩, so the plane distance is |residual| / (2|e|).
            let e = norm(&sub(&xi2p, &xi1));
            e > 0.0 && residual.abs() / (2.0 * e) <= slack
        }
    };
    let regions_ok = in_region(&xi1, Side::One, PatchTier::Omega, n, slack)
        && in_region(&xi1p, Side::One, PatchTier::Omega, n, slack)
        && in_region(&xi2, Side::Two, PatchTier::Omega, n, slack)
        && in_region(&xi2p, Side::Two, PatchTier::Omega, n, slack);
    RectangleResidual {
        xi2,
        residual,
        member: residual_ok && regions_ok,
    }
}

//! Wave packet decomposition of cap data into tube-localised packets.
//!
//! Frequencies live on the lattice c ± h·m with h = 1/P and period
//! P = M·R^{1/2}, so every field is P-periodic in x and the windowing by the
//! translates η((x − x₀)/R^{1/2}), x₀ ∈ R^{1/2}ℤⁿ, becomes a finite
//! partition of unity on one period cell. Because η̂ vanishes outside a
//! ball of radius ρ < 1, the windowed spectra sum back to the original
//! amplitudes exactly, not approximately.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use rustfft::FftDirection;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::extension::{cis_cycles, extend_at, probability, CapFunction};
use crate::fft::{fft_nd, signed_bin};
use crate::geometry::{
    check_dimension, for_each_index, graph_jacobian, grid_velocity, nearest_velocity_index, norm, sub,
    FrequencyLattice, LatticeIndex, PatchTier, Side, SpacetimePoint, SurfacePatch, Tube, Vector, MAX_DIM, ZERO,
};

const ZERO_C: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// C^∞ step: 0 for s ≤ 0, 1 for s ≥ 1, flat to all orders at both ends.
pub fn smooth_step(s: f64, beta: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        let a = (-beta / s).exp();
        let b = (-beta / (1.0 - s)).exp();
        a / (a + b)
    }
}

/// Radial bump with η̂(ξ) = 1 − S(|ξ|/ρ), so η̂(0) = 1 and η̂ = 0 for |ξ| ≥ ρ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpProfile {
    rho: f64,
    beta: f64,
}

impl BumpProfile {
    pub const DEFAULT_RHO: f64 = 0.75;
    pub const DEFAULT_BETA: f64 = 2.0;

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// η̂ at radius s = |ξ|.
    pub fn fourier(&self, s: f64) -> f64 {
        1.0 - smooth_step(s.abs() / self.rho, self.beta)
    }

    /// Tabulated real-space profile η on ℝⁿ.
    pub fn real_space(&self, n: usize) -> Result<RealSpaceBump> {
        RealSpaceBump::build(self, n)
    }
}

impl Default for BumpProfile {
    fn default() -> Self {
        BumpProfile {
            rho: Self::DEFAULT_RHO,
            beta: Self::DEFAULT_BETA,
        }
    }
}

pub fn build_bump(rho: f64) -> Result<BumpProfile> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(invalid_config(format!(
            "bump support radius {rho} must lie in (0, 1) for the partition identity"
        )));
    }
    Ok(BumpProfile {
        rho,
        beta: BumpProfile::DEFAULT_BETA,
    })
}

/// η(r) on a uniform radial table, interpolated with 12-point Lagrange.
#[derive(Clone, Debug, PartialEq)]
pub struct RealSpaceBump {
    n: usize,
    step: f64,
    values: Vec<f64>,
}

const TABLE_STEP: f64 = 1.0 / 64.0;
const TABLE_RADIUS: f64 = 96.0;
const LAGRANGE_POINTS: usize = 12;

impl RealSpaceBump {
    fn build(bump: &BumpProfile, n: usize) -> Result<Self> {
        check_dimension(n)?;
        let rho = bump.rho;
        let na = 2048;
        let da = rho / na as f64;
        // Trapezoid weights; all integrands below are even at 0 and flat at ρ,
        // so the rule converges spectrally.
        let trap = |i: usize, count: usize| if i == 0 || i == count { 0.5 } else { 1.0 };
        let count = (TABLE_RADIUS / TABLE_STEP) as usize + LAGRANGE_POINTS;
        let values: Vec<f64> = match n {
            1 | 2 => {
                // Projection of η̂ onto one axis, then a 1-D cosine transform.
                let projection: Vec<f64> = (0..=na)
                    .map(|i| {
                        let a = i as f64 * da;
                        if n == 1 {
                            bump.fourier(a)
                        } else {
                            let bmax = (rho * rho - a * a).max(0.0).sqrt();
                            let nb = 1024;
                            let db = bmax / nb as f64;
                            2.0 * (0..=nb)
                                .map(|j| {
                                    let b = j as f64 * db;
                                    trap(j, nb) * bump.fourier((a * a + b * b).sqrt())
                                })
                                .sum::<f64>()
                                * db
                        }
                    })
                    .collect();
                (0..count)
                    .into_par_iter()
                    .map(|j| {
                        let r = j as f64 * TABLE_STEP;
                        2.0 * (0..=na)
                            .map(|i| {
                                let a = i as f64 * da;
                                trap(i, na) * projection[i] * (2.0 * PI * r * a).cos()
                            })
                            .sum::<f64>()
                            * da
                    })
                    .collect()
            }
            _ => (0..count)
                .into_par_iter()
                .map(|j| {
                    // η(r) = 4π ∫ s² η̂(s) sinc(2πrs) ds.
                    let r = j as f64 * TABLE_STEP;
                    4.0 * PI
                        * (0..=na)
                            .map(|i| {
                                let s = i as f64 * da;
                                let x = 2.0 * PI * r * s;
                                let sinc = if x == 0.0 { 1.0 } else { x.sin() / x };
                                trap(i, na) * s * s * bump.fourier(s) * sinc
                            })
                            .sum::<f64>()
                        * da
                })
                .collect(),
        };
        Ok(RealSpaceBump {
            n,
            step: TABLE_STEP,
            values,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Largest radius covered by the table; η is taken as 0 beyond it.
    pub fn max_radius(&self) -> f64 {
        TABLE_RADIUS
    }

    /// η at radius r.
    pub fn eval(&self, r: f64) -> f64 {
        let r = r.abs();
        if r > TABLE_RADIUS {
            return 0.0;
        }
        let pos = r / self.step;
        let half = (LAGRANGE_POINTS / 2) as i64;
        let start = pos.floor() as i64 - half + 1;
        let mut acc = 0.0;
        for a in 0..LAGRANGE_POINTS as i64 {
            let ja = start + a;
            let mut basis = 1.0;
            for b in 0..LAGRANGE_POINTS as i64 {
                if a != b {
                    basis *= (pos - (start + b) as f64) / (a - b) as f64;
                }
            }
            // η is even, so negative nodes mirror positive ones.
            acc += basis * self.values[ja.unsigned_abs() as usize];
        }
        acc
    }

    pub fn eval_at(&self, x: &Vector) -> f64 {
        self.eval(norm(x))
    }

    /// Σ_{k ∈ ℤⁿ, |x − k| ≤ radius} η(x − k).
    pub fn partition_sum(&self, x: &Vector, radius: f64) -> f64 {
        let n = self.n;
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [0i64; MAX_DIM];
        for d in 0..n {
            lo[d] = (x[d] - radius).floor() as i64;
            hi[d] = (x[d] + radius).ceil() as i64;
        }
        let mut terms = Vec::new();
        for_each_index(&lo, &hi, n, |k| {
            let mut y = ZERO;
            for d in 0..n {
                y[d] = x[d] - k[d] as f64;
            }
            let r = norm(&y);
            if r <= radius {
                terms.push(self.eval(r));
            }
        });
        // Sum small terms first.
        terms.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
        terms.iter().sum()
    }
}

/// Geometry shared by all packets at one scale: the frequency lattice with
/// spacing 1/P, P = M·R^{1/2}, anchored at the centre of one side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketLattice {
    pub n: usize,
    pub side: Side,
    pub r: f64,
    pub m: usize,
}

impl PacketLattice {
    pub const DEFAULT_PERIOD_FACTOR: f64 = 4.0;

    /// M = ⌈period_factor·R^{1/2}⌉, so the period is at least period_factor·R.
    pub fn new(n: usize, side: Side, r: f64, period_factor: f64) -> Result<Self> {
        check_dimension(n)?;
        if !(r >= 4.0) || !r.is_finite() {
            return Err(invalid_config(format!("scale R = {r} must be at least 4")));
        }
        if !(period_factor >= 1.0) {
            return Err(invalid_config("period factor must be at least 1"));
        }
        let m = (period_factor * r.sqrt() - 1e-9).ceil() as usize;
        Ok(PacketLattice { n, side, r, m })
    }

    pub fn l(&self) -> f64 {
        self.r.sqrt()
    }

    pub fn period(&self) -> f64 {
        self.m as f64 * self.l()
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.period()
    }

    pub fn frequency_lattice(&self) -> FrequencyLattice {
        FrequencyLattice {
            n: self.n,
            origin: self.side.center(),
            spacing: self.spacing(),
        }
    }

    /// Lattice points of the patch of the given tier.
    pub fn patch(&self, tier: PatchTier) -> Result<SurfacePatch> {
        self.disk(self.side.center(), tier.radius(self.n))
    }

    pub fn disk(&self, center: Vector, radius: f64) -> Result<SurfacePatch> {
        SurfacePatch::lattice_disk(self.frequency_lattice(), center, radius)
    }

    /// Points per axis of the physical window grid (spacing R^{1/2}/4).
    pub fn window_grid(&self) -> usize {
        4 * self.m
    }

    /// Admissible position indices i (x₀ = R^{1/2} i) per axis: the centred
    /// fundamental domain of the period.
    pub fn position_range(&self) -> (i64, i64) {
        let lo = -((self.m / 2) as i64);
        (lo, lo + self.m as i64 - 1)
    }

    fn check_lattice(&self, patch: &SurfacePatch) -> Result<()> {
        let mine = self.frequency_lattice();
        let theirs = patch.lattice();
        let aligned = (0..self.n).all(|d| {
            let off = (theirs.origin[d] - mine.origin[d]) / mine.spacing;
            (off - off.round()).abs() < 1e-6
        });
        if theirs.n != self.n || (theirs.spacing / mine.spacing - 1.0).abs() > 1e-12 || !aligned {
            return Err(invalid_input(
                "cap function does not live on the packet lattice of this scale",
            ));
        }
        Ok(())
    }

    /// Lattice index of a node of `patch` relative to this lattice's origin.
    fn absolute_index(&self, patch: &SurfacePatch, k: usize) -> LatticeIndex {
        let mine = self.frequency_lattice();
        let mut out = patch.indices()[k];
        for d in 0..self.n {
            let off = ((patch.lattice().origin[d] - mine.origin[d]) / mine.spacing).round() as i64;
            out[d] += off;
        }
        out
    }
}

/// The part of f assigned to one grid velocity v ∈ centre + R^{−1/2}ℤⁿ.
#[derive(Clone, Debug, PartialEq)]
pub struct CapPiece {
    pub velocity_index: LatticeIndex,
    pub velocity: Vector,
    pub function: CapFunction,
}

/// Split f among grid velocities by assigning each node to its nearest
/// velocity. The pieces have disjoint supports, so Σ_v f_v = f exactly and
/// Σ_v ‖f_v‖² = ‖f‖².
pub fn cap_split(f: &CapFunction, side: Side, r: f64) -> Result<Vec<CapPiece>> {
    if !(r >= 1.0) {
        return Err(invalid_config(format!("scale R = {r} must be at least 1")));
    }
    let n = f.n();
    let mut groups: BTreeMap<LatticeIndex, Vec<usize>> = BTreeMap::new();
    for (k, p) in f.patch().nodes().iter().enumerate() {
        groups
            .entry(nearest_velocity_index(side, r, &p.xi, n))
            .or_default()
            .push(k);
    }
    Ok(groups
        .into_iter()
        .map(|(velocity_index, members)| {
            let mut values = vec![ZERO_C; f.patch().len()];
            for k in members {
                values[k] = f.values()[k];
            }
            CapPiece {
                velocity_index,
                velocity: grid_velocity(side, r, &velocity_index, n),
                function: CapFunction::new(f.patch().clone(), values)
                    .expect("piece values are copied from a valid function"),
            }
        })
        .collect())
}

/// Non-negative samples of a function on the periodic grid spacing·{0,…,m−1}ⁿ.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicSamples {
    n: usize,
    m: usize,
    spacing: f64,
    values: Vec<f64>,
}

impl PeriodicSamples {
    pub fn new(n: usize, m: usize, spacing: f64, values: Vec<f64>) -> Result<Self> {
        check_dimension(n)?;
        if values.is_empty() || m == 0 {
            return Err(invalid_input("maximal function of an empty sample set"));
        }
        if values.len() != m.pow(n as u32) {
            return Err(invalid_input("sample count is not mⁿ"));
        }
        if !(spacing > 0.0) {
            return Err(invalid_input("sample spacing must be positive"));
        }
        Ok(PeriodicSamples { n, m, spacing, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn period(&self) -> f64 {
        self.m as f64 * self.spacing
    }

    /// Dyadic radii r₀·2^k up to half the period.
    pub fn radii(&self, min_radius: f64) -> Vec<f64> {
        let mut out = vec![min_radius];
        while out.last().unwrap() * 2.0 <= 0.5 * self.period() + 1e-12 {
            out.push(out.last().unwrap() * 2.0);
        }
        out
    }

    fn signed_offset(&self, j: usize) -> f64 {
        signed_bin(j, self.m) as f64 * self.spacing
    }

    /// Direct evaluation at an arbitrary point (periodic distances).
    pub fn maximal_at(&self, x: &Vector, min_radius: f64) -> f64 {
        let period = self.period();
        let radii = self.radii(min_radius);
        let mut sums = vec![0.0; radii.len()];
        let mut counts = vec![0usize; radii.len()];
        for (flat, v) in self.values.iter().enumerate() {
            let mut rem = flat;
            let mut d2 = 0.0;
            for d in (0..self.n).rev() {
                let pos = (rem % self.m) as f64 * self.spacing;
                rem /= self.m;
                let mut delta = (pos - x[d]) % period;
                if delta > 0.5 * period {
                    delta -= period;
                } else if delta < -0.5 * period {
                    delta += period;
                }
                d2 += delta * delta;
            }
            let dist = d2.sqrt();
            for (k, r) in radii.iter().enumerate() {
                if dist <= *r * (1.0 + 1e-12) {
                    sums[k] += v;
                    counts[k] += 1;
                }
            }
        }
        sums.iter()
            .zip(&counts)
            .filter(|(_, c)| **c > 0)
            .map(|(s, c)| s / *c as f64)
            .fold(0.0, f64::max)
    }

    /// MF at every grid point via FFT circular convolution with disk stencils.
    pub fn maximal_grid(&self, min_radius: f64) -> Vec<f64> {
        let shape = vec![self.m; self.n];
        let mut spectrum: Vec<Complex64> = self.values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        fft_nd(&mut spectrum, &shape, FftDirection::Forward);
        let total = self.values.len();
        let mut best = vec![0.0f64; total];
        for r in self.radii(min_radius) {
            let mut stencil = vec![ZERO_C; total];
            let mut count = 0usize;
            for (flat, s) in stencil.iter_mut().enumerate() {
                let mut rem = flat;
                let mut d2 = 0.0;
                for _ in 0..self.n {
                    let o = self.signed_offset(rem % self.m);
                    rem /= self.m;
                    d2 += o * o;
                }
                if d2.sqrt() <= r * (1.0 + 1e-12) {
                    *s = Complex64::new(1.0, 0.0);
                    count += 1;
                }
            }
            fft_nd(&mut stencil, &shape, FftDirection::Forward);
            for (s, f) in stencil.iter_mut().zip(&spectrum) {
                *s *= f;
            }
            fft_nd(&mut stencil, &shape, FftDirection::Inverse);
            let norm = 1.0 / (total as f64 * count as f64);
            for (b, s) in best.iter_mut().zip(&stencil) {
                *b = b.max(s.re * norm);
            }
        }
        best
    }
}

/// Maximal function of sampled |F| at x over dyadic radii ≥ `min_radius`.
pub fn maximal_function(samples: &PeriodicSamples, x: &Vector, min_radius: f64) -> Result<f64> {
    if samples.values.is_empty() {
        return Err(invalid_input("maximal function of an empty sample set"));
    }
    Ok(samples.maximal_at(x, min_radius))
}

/// Per-velocity data kept by a decomposition to rebuild packets on demand.
#[derive(Clone, Debug, PartialEq)]
struct PieceCache {
    velocity_index: LatticeIndex,
    velocity: Vector,
    /// Radius of the piece's support about its velocity.
    support_radius: f64,
    /// Σ_k a_k e^{2πi j·m_k/G} on the window grid (phase e^{2πi x·c} removed).
    signal: Vec<Complex64>,
    packet_patch: SurfacePatch,
    /// Window-grid bin of every packet node.
    bins: Vec<usize>,
}

/// f = Σ_T c_T φ_T with coefficients c_T = R^{n/4}·MF(x(T)).
#[derive(Clone, Debug, PartialEq)]
pub struct WavePacketDecomposition {
    lattice: PacketLattice,
    delta: f64,
    bump: BumpProfile,
    tubes: Vec<Tube>,
    coefficients: Vec<Complex64>,
    piece_of_tube: Vec<usize>,
    pieces: Vec<PieceCache>,
    window: Vec<Complex64>,
    f_norm_sq: f64,
}

/// Coefficients below R^{−100n}·max|c| are treated as zero.
fn floor_log_gap(n: usize, r: f64) -> f64 {
    100.0 * n as f64 * r.ln()
}

/// Flat row-major index of a per-axis multi-index modulo g.
fn wrap_flat(idx: &LatticeIndex, n: usize, g: usize) -> usize {
    let mut flat = 0usize;
    for d in 0..n {
        flat = flat * g + idx[d].rem_euclid(g as i64) as usize;
    }
    flat
}

pub fn decompose(
    f: &CapFunction,
    lattice: &PacketLattice,
    delta: f64,
    bump: &BumpProfile,
) -> Result<WavePacketDecomposition> {
    lattice.check_lattice(f.patch())?;
    if !(delta > 0.0 && delta < 0.5) {
        return Err(invalid_config(format!("δ = {delta} must lie in (0, 1/2)")));
    }
    let n = lattice.n;
    let r = lattice.r;
    let l = lattice.l();
    let m = lattice.m;
    let g = lattice.window_grid();
    let shape = vec![g; n];
    let total = g.pow(n as u32);
    let inv_m_n = (m as f64).powi(-(n as i32));
    // Base window: Σ_ℓ M^{-n} η̂(|ℓ|/M) e^{2πi ℓ·j/G}.
    let mut window = vec![ZERO_C; total];
    let reach = (bump.rho * m as f64).ceil() as i64;
    for_each_index(&[-reach; MAX_DIM], &[reach; MAX_DIM], n, |ell| {
        let s = (0..n).map(|d| (ell[d] * ell[d]) as f64).sum::<f64>().sqrt() / m as f64;
        let value = bump.fourier(s);
        if value != 0.0 {
            window[wrap_flat(ell, n, g)] += Complex64::new(value * inv_m_n, 0.0);
        }
    });
    fft_nd(&mut window, &shape, FftDirection::Inverse);

    let pieces_raw = cap_split(f, lattice.side, r)?;
    let mut pieces = Vec::new();
    let mut mf_grids = Vec::new();
    for piece in pieces_raw {
        if piece.function.is_zero() {
            continue;
        }
        let amps = piece.function.amplitudes();
        let mut spectrum = vec![ZERO_C; total];
        let mut support_radius = 0.0f64;
        for (k, a) in amps.iter().enumerate() {
            if *a == ZERO_C {
                continue;
            }
            let idx = lattice.absolute_index(f.patch(), k);
            spectrum[wrap_flat(&idx, n, g)] += a;
            let xi = f.patch().nodes()[k].xi;
            support_radius = support_radius.max(norm(&sub(&xi, &piece.velocity)));
        }
        fft_nd(&mut spectrum, &shape, FftDirection::Inverse);
        let modulus: Vec<f64> = spectrum.iter().map(|v| v.norm()).collect();
        let samples = PeriodicSamples::new(n, g, l / 4.0, modulus)?;
        mf_grids.push(samples.maximal_grid(l / 4.0));
        let packet_patch = lattice.disk(piece.velocity, support_radius + bump.rho / l + 1e-12 / l)?;
        let bins = (0..packet_patch.len())
            .map(|k| wrap_flat(&lattice.absolute_index(&packet_patch, k), n, g))
            .collect();
        pieces.push(PieceCache {
            velocity_index: piece.velocity_index,
            velocity: piece.velocity,
            support_radius,
            signal: spectrum,
            packet_patch,
            bins,
        });
    }

    let (lo, hi) = lattice.position_range();
    let scale = r.powf(n as f64 / 4.0);
    let mut tubes = Vec::new();
    let mut raw = Vec::new();
    let mut piece_of_tube = Vec::new();
    for (p, piece) in pieces.iter().enumerate() {
        for_each_index(&[lo; MAX_DIM], &[hi; MAX_DIM], n, |pos| {
            let mut grid_pos = [0i64; MAX_DIM];
            for d in 0..n {
                grid_pos[d] = 4 * pos[d];
            }
            raw.push(scale * mf_grids[p][wrap_flat(&grid_pos, n, g)]);
            piece_of_tube.push(p);
            tubes.push(Tube::new(n, lattice.side, r, *pos, piece.velocity_index));
        });
    }
    let tubes = tubes.into_iter().collect::<Result<Vec<_>>>()?;
    let max_c = raw.iter().cloned().fold(0.0, f64::max);
    let cutoff = if max_c > 0.0 {
        max_c.ln() - floor_log_gap(n, r)
    } else {
        f64::INFINITY
    };
    let coefficients = raw
        .iter()
        .map(|&c| {
            if c > 0.0 && c.ln() >= cutoff {
                Complex64::new(c, 0.0)
            } else {
                ZERO_C
            }
        })
        .collect();
    Ok(WavePacketDecomposition {
        lattice: *lattice,
        delta,
        bump: *bump,
        tubes,
        coefficients,
        piece_of_tube,
        pieces,
        window,
        f_norm_sq: probability(f),
    })
}

impl WavePacketDecomposition {
    pub fn lattice(&self) -> &PacketLattice {
        &self.lattice
    }

    pub fn side(&self) -> Side {
        self.lattice.side
    }

    pub fn r(&self) -> f64 {
        self.lattice.r
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn bump(&self) -> &BumpProfile {
        &self.bump
    }

    pub fn tubes(&self) -> &[Tube] {
        &self.tubes
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.tubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tubes.is_empty()
    }

    /// Number of distinct velocities carrying data.
    pub fn velocity_count(&self) -> usize {
        self.pieces.len()
    }

    /// Indices of tubes with a nonzero coefficient.
    pub fn active(&self) -> Vec<usize> {
        (0..self.tubes.len())
            .filter(|&i| self.coefficients[i] != ZERO_C)
            .collect()
    }

    /// Σ_T |c_T|² / ‖f‖².
    pub fn l2_ratio(&self) -> f64 {
        let sum: f64 = self.coefficients.iter().map(|c| c.norm_sqr()).sum();
        if self.f_norm_sq > 0.0 {
            sum / self.f_norm_sq
        } else {
            0.0
        }
    }

    /// Support constant C: every packet node lies within C·R^{−1/2} of v(T).
    pub fn support_constant(&self) -> f64 {
        let l = self.lattice.l();
        self.pieces
            .iter()
            .map(|p| p.support_radius * l + self.bump.rho)
            .fold(0.0, f64::max)
    }

    /// Windowed spectrum c_T·w_ζ·φ_T(ζ) on the packet patch of tube `i`.
    pub fn packet_amplitudes(&self, i: usize) -> (&SurfacePatch, Vec<Complex64>) {
        let piece = &self.pieces[self.piece_of_tube[i]];
        let n = self.lattice.n;
        let g = self.lattice.window_grid();
        let mut shift = [0i64; MAX_DIM];
        for d in 0..n {
            shift[d] = 4 * self.tubes[i].position_index[d];
        }
        let total = piece.signal.len();
        let mut product = Vec::with_capacity(total);
        let mut idx = [0i64; MAX_DIM];
        for (flat, s) in piece.signal.iter().enumerate() {
            let mut rem = flat;
            for d in (0..n).rev() {
                idx[d] = (rem % g) as i64 - shift[d];
                rem /= g;
            }
            product.push(s * self.window[wrap_flat(&idx, n, g)]);
        }
        fft_nd(&mut product, &vec![g; n], FftDirection::Forward);
        let inv = 1.0 / total as f64;
        let amps = piece.bins.iter().map(|&b| product[b] * inv).collect();
        (&piece.packet_patch, amps)
    }

    /// φ_T as cap data, or `None` when c_T is zero.
    pub fn packet(&self, i: usize) -> Option<CapFunction> {
        let c = self.coefficients[i];
        if c == ZERO_C {
            return None;
        }
        let (patch, amps) = self.packet_amplitudes(i);
        let amps = amps.into_iter().map(|a| a / c).collect();
        Some(CapFunction::from_amplitudes(patch.clone(), amps).expect("packet amplitudes are finite"))
    }

    /// A patch on the packet lattice containing every packet node.
    pub fn reconstruction_patch(&self) -> Result<SurfacePatch> {
        let c = self.lattice.side.center();
        let radius = self
            .pieces
            .iter()
            .map(|p| norm(&sub(&p.velocity, &c)) + p.packet_patch.radius())
            .fold(0.0, f64::max);
        self.lattice.disk(c, radius + 1e-12)
    }

    /// Σ_T c_T φ_T over tubes satisfying `keep`, as cap data on `patch`.
    pub fn partial_sum(&self, patch: &SurfacePatch, keep: impl Fn(usize) -> bool + Sync) -> Result<CapFunction> {
        let active: Vec<usize> = self.active().into_iter().filter(|&i| keep(i)).collect();
        let maps: Vec<Vec<usize>> = self
            .pieces
            .iter()
            .map(|p| {
                (0..p.packet_patch.len())
                    .map(|k| {
                        let idx = self.lattice.absolute_index(&p.packet_patch, k);
                        let local = self.lattice_local(patch, &idx);
                        patch
                            .position_of(&local)
                            .ok_or_else(|| invalid_input("patch does not contain every packet node"))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let sum = ordered_sum(&active, patch.len(), |acc, &i| {
            let (_, amps) = self.packet_amplitudes(i);
            for (k, a) in amps.iter().enumerate() {
                acc[maps[self.piece_of_tube[i]][k]] += a;
            }
        });
        CapFunction::from_amplitudes(patch.clone(), sum)
    }

    fn lattice_local(&self, patch: &SurfacePatch, absolute: &LatticeIndex) -> LatticeIndex {
        let mine = self.lattice.frequency_lattice();
        let mut out = *absolute;
        for d in 0..self.lattice.n {
            let off = ((patch.lattice().origin[d] - mine.origin[d]) / mine.spacing).round() as i64;
            out[d] -= off;
        }
        out
    }

    /// Σ_T c_T φ_T over all tubes.
    pub fn full_sum(&self) -> Result<CapFunction> {
        let patch = self.reconstruction_patch()?;
        self.partial_sum(&patch, |_| true)
    }

    /// Dyadic levels γ = 2^j with γ ≤ |c_T| < 2γ, mapped to their tubes.
    pub fn gamma_levels(&self) -> BTreeMap<i32, Vec<usize>> {
        let mut out: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for i in self.active() {
            let level = self.coefficients[i].norm().log2().floor() as i32;
            out.entry(level).or_default().push(i);
        }
        out
    }

    /// Tubes of one dyadic coefficient level with coefficients c_T/γ ∈ [1, 2).
    pub fn pigeonhole_level(&self, level: i32) -> (Vec<Tube>, Vec<Complex64>) {
        let gamma = 2f64.powi(level);
        self.gamma_levels()
            .remove(&level)
            .unwrap_or_default()
            .into_iter()
            .map(|i| (self.tubes[i].clone(), self.coefficients[i] / gamma))
            .unzip()
    }

    pub fn to_record(&self) -> FamilyRecord {
        FamilyRecord::new(
            self.lattice.n,
            self.lattice.r,
            self.delta,
            self.lattice.side,
            &self.tubes,
            &self.coefficients,
            self.bump.rho,
        )
    }
}

/// Sup-relative and norm-relative reconstruction errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionError {
    /// max |u_f − Σ c_T φ_T| / ‖f‖₂ with every tube.
    pub full: f64,
    /// Same with only the tubes whose axis passes near each sample.
    pub truncated: f64,
    /// The two errors relative to max |u_f| on the samples.
    pub full_sup: f64,
    pub truncated_sup: f64,
    pub f_norm: f64,
    pub sup: f64,
    pub truncation_radius: f64,
}

/// Periodic spatial distance from x to the axis of `tube` at time t.
fn periodic_axis_distance(tube: &Tube, t: f64, x: &Vector, period: f64) -> f64 {
    let axis = tube.axis_at(t);
    let mut d2 = 0.0;
    for d in 0..tube.n {
        let delta = x[d] - axis[d];
        let wrapped = delta - period * (delta / period).round();
        d2 += wrapped * wrapped;
    }
    d2.sqrt()
}

/// Compare u_f with the packet sums at `points`; the truncated sum keeps, for
/// each sample, the tubes whose (periodised) axis lies within
/// `radius_factor`·R^{1/2} of it. An infinite factor keeps every tube, so
/// only the full sum is evaluated.
pub fn reconstruct_error(
    d: &WavePacketDecomposition,
    f: &CapFunction,
    points: &[SpacetimePoint],
    radius_factor: f64,
) -> Result<ReconstructionError> {
    let l = d.lattice.l();
    let truncation_radius = radius_factor * l;
    let f_norm = f.l2_norm();
    if f.is_zero() || points.is_empty() {
        return Ok(ReconstructionError {
            full: 0.0,
            truncated: 0.0,
            full_sup: 0.0,
            truncated_sup: 0.0,
            f_norm,
            sup: 0.0,
            truncation_radius,
        });
    }
    let exact = extend_at(f, points);
    let full = extend_at(&d.full_sum()?, points);
    let period = d.lattice.period();
    let truncated = if radius_factor.is_infinite() {
        full.clone()
    } else {
        ordered_sum(&d.active(), points.len(), |acc, &i| {
            let tube = &d.tubes[i];
            let near: Vec<usize> = (0..points.len())
                .filter(|&s| periodic_axis_distance(tube, points[s].t, &points[s].x, period) <= truncation_radius)
                .collect();
            if near.is_empty() {
                return;
            }
            let (patch, amps) = d.packet_amplitudes(i);
            let packet = CapFunction::from_amplitudes(patch.clone(), amps).expect("finite amplitudes");
            let pts: Vec<SpacetimePoint> = near.iter().map(|&s| points[s]).collect();
            for (s, v) in near.iter().zip(extend_at(&packet, &pts)) {
                acc[*s] += v;
            }
        })
    };
    let sup = exact.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let max_dev = |approx: &[Complex64]| {
        exact
            .iter()
            .zip(approx)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    };
    let (e_full, e_trunc) = (max_dev(&full), max_dev(&truncated));
    Ok(ReconstructionError {
        full: e_full / f_norm,
        truncated: e_trunc / f_norm,
        full_sup: e_full / sup,
        truncated_sup: e_trunc / sup,
        f_norm,
        sup,
        truncation_radius,
    })
}

/// Sampling effort for [`verify_packet_bounds`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayBudget {
    pub tubes: usize,
    pub times: usize,
    pub directions: usize,
    pub distances: usize,
    pub families: usize,
}

impl Default for DecayBudget {
    fn default() -> Self {
        DecayBudget {
            tubes: 4,
            times: 5,
            directions: 8,
            distances: 24,
            families: 20,
        }
    }
}

/// Measured constants of the packet bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub orders: Vec<u32>,
    /// C_N = max |φ_T|·R^{n/4}·(1 + dist/R^{1/2})^N.
    pub envelope_constants: Vec<f64>,
    /// max over sampled tubes of R^{n/4}·|φ_T| on the axis.
    pub on_axis_constant: f64,
    /// max R^{n/4}|φ_T| at distance R^{1/2+δ} from the axis.
    pub off_tube_max: f64,
    /// Smallest ratio (on-axis max)/(max at distance 8R^{1/2}) over sampled tubes.
    pub suppression_at_8: f64,
    /// Smallest fitted decay order of the envelope over [R^{1/2}, 16R^{1/2}].
    pub decay_order: f64,
    /// Largest |ζ − v(T)|·R^{1/2} over nonzero packet nodes.
    pub support_radius: f64,
    pub support_bound: f64,
    /// P(Σ_{T∈𝐓} φ_T)/#𝐓 for random families 𝐓.
    pub probability_constants: Vec<f64>,
    pub tubes_sampled: usize,
    pub distances: Vec<f64>,
    /// Envelope of the first sampled tube normalised by its on-axis max.
    pub profile: Vec<f64>,
}

/// Unit directions in the first n coordinates (±e for n = 1).
fn directions<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<Vector> {
    if n == 1 {
        return vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
    }
    (0..count.max(1))
        .map(|k| {
            if n == 2 {
                let a = 2.0 * PI * (k as f64 + rng.gen::<f64>() * 0.5) / count.max(1) as f64;
                [a.cos(), a.sin(), 0.0]
            } else {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let a: f64 = rng.gen_range(0.0..2.0 * PI);
                let s = (1.0 - z * z).sqrt();
                [s * a.cos(), s * a.sin(), z]
            }
        })
        .collect()
}

/// Least-squares slope of y against x.
pub(crate) fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn verify_packet_bounds<R: Rng + ?Sized>(
    d: &WavePacketDecomposition,
    orders: &[u32],
    budget: &DecayBudget,
    rng: &mut R,
) -> Result<DecayReport> {
    let n = d.lattice.n;
    let r = d.lattice.r;
    let l = d.lattice.l();
    let scale = r.powf(n as f64 / 4.0);
    let mut active = d.active();
    if active.is_empty() {
        return Err(invalid_input("decomposition has no nonzero packets"));
    }
    // Largest coefficient first, then a random selection.
    active.sort_by(|&a, &b| d.coefficients[b].norm().partial_cmp(&d.coefficients[a].norm()).unwrap());
    let mut chosen = vec![active[0]];
    let mut rest: Vec<usize> = active[1..].to_vec();
    rest.shuffle(rng);
    chosen.extend(rest.into_iter().take(budget.tubes.saturating_sub(1)));

    let off_tube = r.powf(0.5 + d.delta);
    let mut dists = vec![0.0];
    let count = budget.distances.max(2);
    for k in 0..count {
        let s = k as f64 / (count - 1) as f64;
        dists.push(l * 0.5 * 32f64.powf(s));
    }
    dists.extend([l, 8.0 * l, 16.0 * l, off_tube]);
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let dirs = directions(n, budget.directions, rng);
    let times: Vec<f64> = (0..budget.times.max(1))
        .map(|k| {
            if budget.times <= 1 {
                0.75 * r
            } else {
                0.5 * r + 0.5 * r * k as f64 / (budget.times - 1) as f64
            }
        })
        .collect();

    let mut envelope_constants = vec![0.0f64; orders.len()];
    let mut on_axis_constant = 0.0f64;
    let mut off_tube_max = 0.0f64;
    let mut suppression_at_8 = f64::INFINITY;
    let mut decay_order = f64::INFINITY;
    let mut support_radius = 0.0f64;
    let mut profile = Vec::new();
    for (slot, &i) in chosen.iter().enumerate() {
        let packet = d.packet(i).expect("active tubes have packets");
        let tube = &d.tubes[i];
        for (p, value) in packet.patch().nodes().iter().zip(packet.values()) {
            if value.norm() > 0.0 {
                support_radius = support_radius.max(norm(&sub(&p.xi, &tube.v)) * l);
            }
        }
        let mut points = Vec::new();
        for &dist in &dists {
            for &t in &times {
                for u in &dirs {
                    let mut x = tube.axis_at(t);
                    for c in 0..n {
                        x[c] += dist * u[c];
                    }
                    points.push(SpacetimePoint::new(t, x));
                }
            }
        }
        let values = extend_at(&packet, &points);
        let per = times.len() * dirs.len();
        let envelope: Vec<f64> = values
            .chunks(per)
            .map(|c| c.iter().map(|v| v.norm()).fold(0.0, f64::max))
            .collect();
        for (k, &dist) in dists.iter().enumerate() {
            let m = envelope[k] * scale;
            for (j, &nn) in orders.iter().enumerate() {
                envelope_constants[j] = envelope_constants[j].max(m * (1.0 + dist / l).powi(nn as i32));
            }
            if (dist - off_tube).abs() < 1e-9 {
                off_tube_max = off_tube_max.max(m);
            }
        }
        let axis_max = envelope[0];
        on_axis_constant = on_axis_constant.max(axis_max * scale);
        let at8 = dists.iter().position(|&x| (x - 8.0 * l).abs() < 1e-9).unwrap();
        suppression_at_8 = suppression_at_8.min(axis_max / envelope[at8].max(f64::MIN_POSITIVE));
        let (xs, ys): (Vec<f64>, Vec<f64>) = dists
            .iter()
            .zip(&envelope)
            .filter(|(x, _)| **x >= l * (1.0 - 1e-9) && **x <= 16.0 * l * (1.0 + 1e-9))
            .map(|(x, e)| (x.ln(), e.max(f64::MIN_POSITIVE).ln()))
            .unzip();
        decay_order = decay_order.min(-ls_slope(&xs, &ys));
        if slot == 0 {
            profile = envelope.iter().map(|e| e / axis_max).collect();
        }
    }

    let patch = d.reconstruction_patch()?;
    let active = d.active();
    let mut probability_constants = Vec::with_capacity(budget.families);
    for _ in 0..budget.families {
        let size = rng.gen_range(1..=active.len().min(64));
        let family: Vec<usize> = active.choose_multiple(rng, size).cloned().collect();
        let mut acc = vec![ZERO_C; patch.len()];
        for &i in &family {
            let (pp, amps) = d.packet_amplitudes(i);
            let c = d.coefficients[i];
            for (k, a) in amps.iter().enumerate() {
                let idx = d.lattice.absolute_index(pp, k);
                let local = d.lattice_local(&patch, &idx);
                let pos = patch.position_of(&local).expect("reconstruction patch covers packets");
                acc[pos] += a / c;
            }
        }
        let sum = CapFunction::from_amplitudes(patch.clone(), acc)?;
        probability_constants.push(probability(&sum) / family.len() as f64);
    }

    Ok(DecayReport {
        orders: orders.to_vec(),
        envelope_constants,
        on_axis_constant,
        off_tube_max,
        suppression_at_8,
        decay_order,
        support_radius,
        support_bound: d.support_constant(),
        probability_constants,
        tubes_sampled: chosen.len(),
        distances: dists,
        profile,
    })
}

/// The unit-coefficient packet of a tube: spectrum
/// R^{−n/4}(hR^{1/2})ⁿ η̂(R^{1/2}(ζ − v)) e^{−2πi x₀·(ζ − v)} / w_ζ.
pub fn canonical_packet(lattice: &PacketLattice, tube: &Tube, bump: &BumpProfile) -> Result<CapFunction> {
    let patch = lattice.disk(tube.v, bump.rho / lattice.l())?;
    let amps = canonical_amplitudes(lattice, &patch, tube, bump);
    CapFunction::from_amplitudes(patch, amps)
}

fn canonical_amplitudes(
    lattice: &PacketLattice,
    patch: &SurfacePatch,
    tube: &Tube,
    bump: &BumpProfile,
) -> Vec<Complex64> {
    patch
        .nodes()
        .iter()
        .map(|p| canonical_amplitude(lattice, &p.xi, tube, bump))
        .collect()
}

fn canonical_amplitude(lattice: &PacketLattice, xi: &Vector, tube: &Tube, bump: &BumpProfile) -> Complex64 {
    let n = lattice.n;
    let dz = sub(xi, &tube.v);
    let eta = bump.fourier(norm(&dz) * lattice.l());
    if eta == 0.0 {
        return ZERO_C;
    }
    let pre = lattice.r.powf(-(n as f64) / 4.0) * (lattice.m as f64).powi(-(n as i32));
    let phase: f64 = (0..n).map(|c| tube.x0[c] * dz[c]).sum();
    cis_cycles(-phase) * (pre * eta)
}

/// Parallel accumulation into a vector with a fixed chunking, so results do
/// not depend on how rayon schedules the work.
fn ordered_sum<T: Sync>(items: &[T], len: usize, add: impl Fn(&mut Vec<Complex64>, &T) + Sync) -> Vec<Complex64> {
    const CHUNK: usize = 32;
    let partials: Vec<Vec<Complex64>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![ZERO_C; len];
            for item in chunk {
                add(&mut acc, item);
            }
            acc
        })
        .collect();
    let mut total = vec![ZERO_C; len];
    for part in partials {
        for (x, y) in total.iter_mut().zip(part) {
            *x += y;
        }
    }
    total
}

/// Σ_T c_T·(canonical packet of T) on one patch covering every tube's cap.
pub fn packet_family_sum(
    lattice: &PacketLattice,
    tubes: &[Tube],
    coefficients: &[Complex64],
    bump: &BumpProfile,
) -> Result<CapFunction> {
    if tubes.is_empty() {
        return Err(invalid_input("empty tube family"));
    }
    if tubes.len() != coefficients.len() {
        return Err(invalid_input("tube and coefficient counts differ"));
    }
    let c = lattice.side.center();
    let l = lattice.l();
    let radius = tubes.iter().map(|t| norm(&sub(&t.v, &c))).fold(0.0, f64::max) + bump.rho / l;
    let patch = lattice.disk(c, radius + 1e-12)?;
    // Node-major so the summation order is independent of the thread count.
    let total: Vec<Complex64> = patch
        .nodes()
        .par_iter()
        .map(|p| {
            tubes
                .iter()
                .zip(coefficients)
                .map(|(t, c)| c * canonical_amplitude(lattice, &p.xi, t, bump))
                .sum()
        })
        .collect();
    CapFunction::from_amplitudes(patch, total)
}

/// Serialised tube: initial position and velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeRecord {
    pub x0: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpRecord {
    pub rho: f64,
}

/// JSON document shared by decompositions and tube configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyRecord {
    pub n: usize,
    #[serde(rename = "R")]
    pub r: f64,
    pub delta: f64,
    pub side: Side,
    pub tubes: Vec<TubeRecord>,
    pub coefficients: Vec<[f64; 2]>,
    pub bump: BumpRecord,
}

impl FamilyRecord {
    pub fn new(n: usize, r: f64, delta: f64, side: Side, tubes: &[Tube], coefficients: &[Complex64], rho: f64) -> Self {
        FamilyRecord {
            n,
            r,
            delta,
            side,
            tubes: tubes
                .iter()
                .map(|t| TubeRecord {
                    x0: t.x0[..n].to_vec(),
                    v: t.v[..n].to_vec(),
                })
                .collect(),
            coefficients: coefficients.iter().map(|c| [c.re, c.im]).collect(),
            bump: BumpRecord { rho },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("records serialise")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid_input(format!("malformed family record: {e}")))
    }

    /// Rebuild the tubes, checking that every position and velocity is on its grid.
    pub fn to_tubes(&self) -> Result<Vec<Tube>> {
        check_dimension(self.n)?;
        let l = self.r.sqrt();
        let c = self.side.center();
        let snap = |value: f64, what: &str| -> Result<i64> {
            let k = value.round();
            if (value - k).abs() > 1e-6 {
                Err(invalid_input(format!("{what} is off its grid")))
            } else {
                Ok(k as i64)
            }
        };
        self.tubes
            .iter()
            .map(|t| {
                if t.x0.len() != self.n || t.v.len() != self.n {
                    return Err(invalid_input("tube record has the wrong dimension"));
                }
                let mut pos = [0i64; MAX_DIM];
                let mut vel = [0i64; MAX_DIM];
                for d in 0..self.n {
                    pos[d] = snap(t.x0[d] / l, "x0")?;
                    vel[d] = snap((t.v[d] - c[d]) * l, "v")?;
                }
                Tube::new(self.n, self.side, self.r, pos, vel)
            })
            .collect()
    }

    pub fn complex_coefficients(&self) -> Vec<Complex64> {
        self.coefficients.iter().map(|[a, b]| Complex64::new(*a, *b)).collect()
    }
}

/// Graph-measure weight at ξ for lattice spacing h (used by oracles).
pub fn lattice_weight(xi: &Vector, h: f64, n: usize) -> f64 {
    h.powi(n as i32) * graph_jacobian(xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::extend_at;
    use crate::geometry::{make_patch, E1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn bump_fourier_profile() {
        let b = build_bump(0.75).unwrap();
        assert_eq!(b.fourier(0.0), 1.0);
        assert_eq!(b.fourier(0.75), 0.0);
        assert_eq!(b.fourier(0.9), 0.0);
        assert!(b.fourier(0.3) > 0.0 && b.fourier(0.3) < 1.0);
        assert!(build_bump(1.0).is_err());
        assert!(build_bump(0.0).is_err());
    }

    #[test]
    fn smooth_step_is_monotone() {
        let mut prev = 0.0;
        for i in 0..=1000 {
            let s = smooth_step(i as f64 / 1000.0, 2.0);
            assert!(s >= prev);
            prev = s;
        }
        assert_eq!(smooth_step(0.5, 2.0), 0.5);
    }

    /// η(0) = ∫η̂ dξ computed independently by a fine radial midpoint rule.
    #[test]
    fn real_space_value_at_origin_matches_integral_of_profile() {
        let b = BumpProfile::default();
        for n in 1..=3 {
            let eta = b.real_space(n).unwrap();
            let steps = 400_000;
            let ds = b.rho() / steps as f64;
            let shell = |s: f64| match n {
                1 => 2.0,
                2 => 2.0 * PI * s,
                _ => 4.0 * PI * s * s,
            };
            let integral: f64 = (0..steps)
                .map(|i| {
                    let s = (i as f64 + 0.5) * ds;
                    b.fourier(s) * shell(s) * ds
                })
                .sum();
            assert!((eta.eval(0.0) - integral).abs() < 1e-9, "n={n}");
        }
    }

    #[test]
    fn partition_of_unity() {
        let b = BumpProfile::default();
        let mut g = rng(11);
        for (n, points, radius) in [(1usize, 1000usize, 90.0), (2, 1000, 40.0), (3, 40, 36.0)] {
            let eta = b.real_space(n).unwrap();
            for _ in 0..points {
                let mut x = ZERO;
                for c in x.iter_mut().take(n) {
                    *c = g.gen_range(-5.0..5.0);
                }
                let s = eta.partition_sum(&x, radius);
                assert!((s - 1.0).abs() < 1e-10, "n={n}: {s}");
            }
        }
    }

    fn lattice(n: usize, r: f64) -> PacketLattice {
        PacketLattice::new(n, Side::One, r, 4.0).unwrap()
    }

    #[test]
    fn packet_lattice_geometry() {
        let pl = lattice(2, 256.0);
        assert_eq!(pl.m, 64);
        assert!((pl.period() - 1024.0).abs() < 1e-12);
        assert_eq!(pl.position_range(), (-32, 31));
        assert!(PacketLattice::new(2, Side::One, 2.0, 4.0).is_err());
    }

    #[test]
    fn cap_split_examples() {
        let r = 4096.0;
        let pl = lattice(1, r);
        let f = CapFunction::random(pl.patch(PatchTier::Base).unwrap(), &mut rng(1));
        let pieces = cap_split(&f, Side::One, r).unwrap();
        assert!(pieces.len() >= 2);
        let mut total = vec![ZERO_C; f.patch().len()];
        let mut norms = 0.0;
        for p in &pieces {
            for (t, v) in total.iter_mut().zip(p.function.values()) {
                *t += v;
            }
            norms += probability(&p.function);
            // Velocity spacing is R^{-1/2} exactly.
            let k = p.velocity_index[0] as f64;
            assert!((p.velocity[0] - 1.0 - k / 64.0).abs() < 1e-15);
            for (node, v) in p.function.patch().nodes().iter().zip(p.function.values()) {
                if v.norm() > 0.0 {
                    assert!((node.xi[0] - p.velocity[0]).abs() <= 0.5 / 64.0 + 1e-15);
                }
            }
        }
        for (a, b) in total.iter().zip(f.values()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!((norms / probability(&f) - 1.0).abs() < 1e-12);

        // Data inside one cap: a single nonzero piece.
        let narrow = CapFunction::from_fn(f.patch().clone(), |p| {
            if (p.xi[0] - 1.0).abs() < 0.004 {
                Complex64::new(1.0, 0.0)
            } else {
                ZERO_C
            }
        });
        let nonzero = cap_split(&narrow, Side::One, r)
            .unwrap()
            .iter()
            .filter(|p| !p.function.is_zero())
            .count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn maximal_function_examples() {
        let samples = PeriodicSamples::new(2, 16, 0.5, vec![3.0; 256]).unwrap();
        for v in samples.maximal_grid(0.5) {
            assert!((v - 3.0).abs() < 1e-12);
        }
        assert!((samples.maximal_at(&[1.3, -2.2, 0.0], 0.5) - 3.0).abs() < 1e-12);
        assert!(PeriodicSamples::new(1, 0, 1.0, vec![]).is_err());
    }

    #[test]
    fn maximal_grid_matches_direct_evaluation() {
        let mut g = rng(2);
        let values: Vec<f64> = (0..24 * 24).map(|_| g.gen_range(0.0..1.0)).collect();
        let samples = PeriodicSamples::new(2, 24, 0.25, values).unwrap();
        let grid = samples.maximal_grid(0.25);
        for flat in [0usize, 5, 77, 300, 575] {
            let x = [(flat / 24) as f64 * 0.25, (flat % 24) as f64 * 0.25, 0.0];
            let direct = maximal_function(&samples, &x, 0.25).unwrap();
            assert!((direct - grid[flat]).abs() < 1e-12, "{direct} vs {}", grid[flat]);
        }
    }

    /// Band-limited |F| on a periodic 2-D grid: frequencies |k| ≤ m/(4·4) so
    /// the band is 1/R^{1/2} for spacing R^{1/2}/4.
    fn band_limited(m: usize, seed: u64) -> Vec<f64> {
        let mut g = rng(seed);
        let band = (m / 16) as i64;
        let mut spec = vec![ZERO_C; m * m];
        for a in -band..=band {
            for b in -band..=band {
                if a * a + b * b <= band * band {
                    let idx = [a, b, 0];
                    spec[wrap_flat(&idx, 2, m)] = Complex64::new(g.gen_range(-1.0..1.0), g.gen_range(-1.0..1.0));
                }
            }
        }
        fft_nd(&mut spec, &[m, m], FftDirection::Inverse);
        spec.iter().map(|v| v.norm()).collect()
    }

    #[test]
    fn maximal_inequality_constant_is_stable() {
        let ratios: Vec<f64> = (0..10)
            .map(|seed| {
                let values = band_limited(64, seed);
                let samples = PeriodicSamples::new(2, 64, 1.0, values.clone()).unwrap();
                let mf = samples.maximal_grid(1.0);
                let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                l2(&mf) / l2(&values)
            })
            .collect();
        let (lo, hi) = ratios
            .iter()
            .fold((f64::MAX, 0.0f64), |(a, b), r| (a.min(*r), b.max(*r)));
        assert!(lo >= 1.0 - 1e-12 && hi <= 4.0, "{ratios:?}");
        assert!(hi / lo <= 2.0, "{ratios:?}");
    }

    #[test]
    fn maximal_function_is_locally_constant_for_band_limited_data() {
        // Spacing 1 stands for R^{1/2}/4, so |x − x'| ≤ R^{1/2} is 4 steps.
        let m = 64;
        let mut worst = 1.0f64;
        for seed in 0..5 {
            let samples = PeriodicSamples::new(2, m, 1.0, band_limited(m, 100 + seed)).unwrap();
            let mf = samples.maximal_grid(1.0);
            for i in 0..m {
                for j in 0..m {
                    for (di, dj) in [(4usize, 0usize), (0, 4), (3, 2), (2, 3)] {
                        let a = mf[i * m + j];
                        let b = mf[((i + di) % m) * m + (j + dj) % m];
                        worst = worst.max(a / b).max(b / a);
                    }
                }
            }
        }
        assert!(worst <= 8.0, "{worst}");
    }

    #[test]
    fn zero_data_gives_empty_decomposition() {
        let pl = lattice(1, 64.0);
        let f = CapFunction::zeros(pl.patch(PatchTier::Base).unwrap());
        let d = decompose(&f, &pl, 0.1, &BumpProfile::default()).unwrap();
        assert!(d.is_empty());
        let pts = [SpacetimePoint::new(40.0, ZERO)];
        let e = reconstruct_error(&d, &f, &pts, 8.0).unwrap();
        assert_eq!((e.full, e.truncated), (0.0, 0.0));
    }

    #[test]
    fn foreign_lattice_is_rejected() {
        let pl = lattice(1, 64.0);
        let f = CapFunction::random(make_patch(1, Side::One, PatchTier::Base, 5).unwrap(), &mut rng(3));
        assert!(decompose(&f, &pl, 0.1, &BumpProfile::default()).is_err());
    }

    #[test]
    fn packet_amplitudes_match_direct_window_formula() {
        // b_T(ζ) = M^{-n} Σ_k a_k η̂(L|ζ − ξ_k|) e^{−2πi(ζ − ξ_k)·x₀}.
        let pl = lattice(2, 64.0);
        let bump = BumpProfile::default();
        let f = CapFunction::random(pl.patch(PatchTier::Base).unwrap(), &mut rng(4));
        let d = decompose(&f, &pl, 0.1, &bump).unwrap();
        let amps_f = f.amplitudes();
        for &i in &[0usize, 17, 40] {
            let tube = &d.tubes()[i];
            let (patch, amps) = d.packet_amplitudes(i);
            let m_n = (pl.m as f64).powi(-2);
            for (k, z) in patch.nodes().iter().enumerate().step_by(7) {
                let mut direct = ZERO_C;
                for (node, a) in f.patch().nodes().iter().zip(&amps_f) {
                    let dz = sub(&z.xi, &node.xi);
                    let eta = bump.fourier(norm(&dz) * pl.l());
                    let phase = dz[0] * tube.x0[0] + dz[1] * tube.x0[1];
                    direct += a * eta * m_n * Complex64::from_polar(1.0, -2.0 * PI * phase);
                }
                assert!((direct - amps[k]).norm() < 1e-13 * amps_f.iter().map(|a| a.norm()).sum::<f64>());
            }
        }
    }

    #[test]
    fn largest_coefficient_sits_at_concentration_point() {
        let pl = lattice(2, 64.0);
        let x0 = [3.0 * 8.0, -2.0 * 8.0, 0.0];
        // Initial data concentrated near x0: a modulated bump centred there.
        let f = CapFunction::from_fn(pl.patch(PatchTier::Base).unwrap(), |p| {
            let dz = sub(&p.xi, &E1);
            Complex64::from_polar(1.0, -2.0 * PI * (dz[0] * x0[0] + dz[1] * x0[1]))
                / lattice_weight(&p.xi, pl.spacing(), 2)
        });
        let d = decompose(&f, &pl, 0.1, &BumpProfile::default()).unwrap();
        let best = (0..d.len())
            .max_by(|&a, &b| {
                d.coefficients()[a]
                    .norm()
                    .partial_cmp(&d.coefficients()[b].norm())
                    .unwrap()
            })
            .unwrap();
        // Brute-force oracle: the tube whose x0 is nearest the concentration point.
        let oracle = (0..d.len())
            .min_by(|&a, &b| {
                norm(&sub(&d.tubes()[a].x0, &x0))
                    .partial_cmp(&norm(&sub(&d.tubes()[b].x0, &x0)))
                    .unwrap()
            })
            .unwrap();
        assert_eq!(best, oracle);
        assert_eq!(d.tubes()[best].position_index, [3, -2, 0]);
    }

    #[test]
    fn exact_reconstruction_small_scale() {
        for n in 1..=2 {
            let pl = lattice(n, 64.0);
            let f = CapFunction::random(pl.patch(PatchTier::Base).unwrap(), &mut rng(5 + n as u64));
            let d = decompose(&f, &pl, 0.1, &BumpProfile::default()).unwrap();
            let mut g = rng(9);
            let pts: Vec<SpacetimePoint> = (0..60)
                .map(|_| {
                    let mut x = ZERO;
                    for c in x.iter_mut().take(n) {
                        *c = g.gen_range(-64.0..64.0);
                    }
                    SpacetimePoint::new(g.gen_range(32.0..64.0), x)
                })
                .collect();
            let e = reconstruct_error(&d, &f, &pts, 40.0).unwrap();
            assert!(e.full_sup < 1e-10, "n={n}: {e:?}");
            assert!(e.truncated_sup < 1e-6, "n={n}: {e:?}");
        }
    }

    #[test]
    fn truncation_error_decreases_with_radius() {
        let pl = lattice(1, 256.0);
        let f = CapFunction::random(pl.patch(PatchTier::Base).unwrap(), &mut rng(12));
        let d = decompose(&f, &pl, 0.1, &BumpProfile::default()).unwrap();
        let mut g = rng(13);
        let pts: Vec<SpacetimePoint> = (0..100)
            .map(|_| SpacetimePoint::new(g.gen_range(128.0..256.0), [g.gen_range(-256.0..256.0), 0.0, 0.0]))
            .collect();
        let radii = [2.0, 4.0, 8.0, 16.0];
        let errs: Vec<f64> = radii
            .iter()
            .map(|&k| reconstruct_error(&d, &f, &pts, k).unwrap().truncated_sup)
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] < w[0], "{errs:?}");
        }
        let big = 8.0 * 256f64.powf(0.1);
        assert!(reconstruct_error(&d, &f, &pts, big).unwrap().truncated_sup <= 1e-3);
    }

    #[test]
    fn separated_packets_are_nearly_orthogonal() {
        let pl = lattice(2, 64.0);
        let f = CapFunction::random(pl.patch(PatchTier::Base).unwrap(), &mut rng(14));
        let d = decompose(&f, &pl, 0.1, &BumpProfile::default()).unwrap();
        let tubes = d.tubes();
        let period = pl.period();
        let packets: Vec<(usize, CapFunction)> = (0..d.len()).step_by(7).map(|i| (i, d.packet(i).unwrap())).collect();
        let mut checked = 0;
        for (i, a) in &packets {
            for (j, b) in &packets {
                let sep = (0..2)
                    .map(|c| {
                        let delta = tubes[*i].x0[c] - tubes[*j].x0[c];
                        (delta - period * (delta / period).round()).powi(2)
                    })
                    .sum::<f64>()
                    .sqrt();
                if sep < 4.0 * pl.l() || tubes[*i].velocity_index != tubes[*j].velocity_index {
                    continue;
                }
                let ip = a.inner(b).unwrap().norm();
                assert!(ip <= 0.1 * a.l2_norm() * b.l2_norm());
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn disjoint_velocity_families_add_probabilities() {
        let r = 4096.0;
        let pl = lattice(1, r);
        let f = CapFunction::random(pl.patch(PatchTier::Base).unwrap(), &mut rng(15));
        let d = decompose(&f, &pl, 0.1, &BumpProfile::default()).unwrap();
        assert!(d.velocity_count() >= 2);
        let patch = d.reconstruction_patch().unwrap();
        let whole = probability(&d.full_sum().unwrap());
        let mut parts = 0.0;
        for v in 0..d.velocity_count() {
            let piece = d.partial_sum(&patch, |i| d.piece_of_tube[i] == v).unwrap();
            parts += probability(&piece);
        }
        assert!((whole / parts - 1.0).abs() < 0.05, "{whole} vs {parts}");
    }

    #[test]
    fn decay_report_on_small_instance() {
        let pl = lattice(1, 256.0);
        let f = CapFunction::random(pl.patch(PatchTier::Base).unwrap(), &mut rng(16));
        let d = decompose(&f, &pl, 0.1, &BumpProfile::default()).unwrap();
        let report = verify_packet_bounds(&d, &[0, 2, 4], &DecayBudget::default(), &mut rng(17)).unwrap();
        assert!(report.on_axis_constant <= 10.0, "{report:?}");
        assert!(report.suppression_at_8 >= 1e3, "{report:?}");
        assert!(report.decay_order >= 4.0, "{report:?}");
        assert!(report.support_radius <= report.support_bound + 1e-9);
        assert!(report.envelope_constants.iter().all(|c| c.is_finite() && *c >= 0.0));
        assert_eq!(report.probability_constants.len(), 20);
    }

    #[test]
    fn canonical_packet_sits_on_its_tube() {
        let pl = PacketLattice::new(1, Side::One, 256.0, 8.0).unwrap();
        let tube = Tube::new(1, Side::One, 256.0, [5, 0, 0], [0; 3]).unwrap();
        let phi = canonical_packet(&pl, &tube, &BumpProfile::default()).unwrap();
        let t = 200.0;
        let on = extend_at(&phi, &[SpacetimePoint::new(t, tube.axis_at(t))])[0].norm();
        let off = extend_at(&phi, &[SpacetimePoint::new(t, [tube.axis_at(t)[0] + 128.0, 0.0, 0.0])])[0].norm();
        assert!(on * 256f64.powf(0.25) > 0.1 && on * 256f64.powf(0.25) < 10.0);
        assert!(off < 1e-3 * on);
        let fam = packet_family_sum(
            &pl,
            std::slice::from_ref(&tube),
            &[Complex64::new(1.0, 0.0)],
            &BumpProfile::default(),
        )
        .unwrap();
        let a = extend_at(&fam, &[SpacetimePoint::new(t, tube.axis_at(t))])[0];
        assert!((a.norm() - on).abs() < 1e-12 * on.max(1e-300) + 1e-15);
    }

    #[test]
    fn record_round_trip() {
        let pl = lattice(2, 64.0);
        let f = CapFunction::random(pl.patch(PatchTier::Base).unwrap(), &mut rng(18));
        let d = decompose(&f, &pl, 0.1, &BumpProfile::default()).unwrap();
        let record = d.to_record();
        let back = FamilyRecord::from_json(&record.to_json()).unwrap();
        assert_eq!(back, record);
        assert_eq!(back.to_tubes().unwrap(), d.tubes());
        assert_eq!(back.complex_coefficients(), d.coefficients());
        assert!(FamilyRecord::from_json("{\"n\": 2}").is_err());
    }

    #[test]
    fn gamma_levels_partition_active_tubes() {
        let pl = lattice(1, 64.0);
        let f = CapFunction::random(pl.patch(PatchTier::Base).unwrap(), &mut rng(19));
        let d = decompose(&f, &pl, 0.1, &BumpProfile::default()).unwrap();
        let levels = d.gamma_levels();
        let total: usize = levels.values().map(Vec::len).sum();
        assert_eq!(total, d.active().len());
        for (&level, members) in &levels {
            let (_, coeffs) = d.pigeonhole_level(level);
            assert_eq!(coeffs.len(), members.len());
            assert!(coeffs.iter().all(|c| c.norm() >= 1.0 && c.norm() < 2.0));
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::{prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn cap_split_is_an_exact_partition(seed in 0u64..1000, log_r in 6u32..13) {
                let r = 2f64.powi(log_r as i32);
                let pl = PacketLattice::new(1, Side::Two, r, 4.0).unwrap();
                let f = CapFunction::random(pl.patch(PatchTier::Base).unwrap(), &mut rng(seed));
                let pieces = cap_split(&f, Side::Two, r).unwrap();
                let mut total = vec![ZERO_C; f.patch().len()];
                let mut mass = 0.0;
                for p in &pieces {
                    for (t, v) in total.iter_mut().zip(p.function.values()) {
                        *t += v;
                    }
                    mass += probability(&p.function);
                }
                prop_assert!(total.iter().zip(f.values()).all(|(a, b)| (a - b).norm() < 1e-12));
                prop_assert!((mass / probability(&f) - 1.0).abs() < 1e-12);
            }

            #[test]
            fn packet_spectra_sum_to_the_data(seed in 0u64..1000) {
                let pl = PacketLattice::new(1, Side::One, 64.0, 4.0).unwrap();
                let f = CapFunction::random(pl.patch(PatchTier::Enlarged).unwrap(), &mut rng(seed));
                let d = decompose(&f, &pl, 0.1, &BumpProfile::default()).unwrap();
                let sum = d.full_sum().unwrap();
                let amps = f.amplitudes();
                let scale: f64 = amps.iter().map(|a| a.norm()).fold(0.0, f64::max);
                for (k, node) in sum.patch().indices().iter().enumerate() {
                    let got = sum.amplitudes()[k];
                    let want = f.patch().position_of(node).map(|p| amps[p]).unwrap_or(ZERO_C);
                    prop_assert!((got - want).norm() <= 1e-12 * scale);
                }
            }
        }
    }
}

//! Bilinear constants and their scaling in R: the plate example, focused
//! random data, single packets, the parabolic rescaling check and a small
//! adversarial search.

use std::fmt;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::combinatorics::plate_tubes;
use crate::error::{invalid_config, invalid_input, Result};
use crate::extension::{
    check_exponent, extend, midpoints, physical_probability, probability, CapFunction, SamplingGrid,
};
use crate::geometry::{
    check_dimension, dot, norm, sub, FrequencyLattice, Side, SpacetimePoint, SpacetimeRegion, SurfacePatch, Tube,
    MAX_DIM, ZERO,
};
use crate::wavepacket::{canonical_packet, ls_slope, packet_family_sum, smooth_step, BumpProfile, PacketLattice};

/// Period factor of the plate lattice: the families span x₀₁ ∈ [−2R, R/2],
/// so periodic images must sit well beyond 4R.
pub const PLATE_PERIOD_FACTOR: f64 = 8.0;

/// |u₁u₂| and quadrature weights over a union of grids.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductSamples {
    pub points: Vec<SpacetimePoint>,
    pub moduli: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ProductSamples {
    pub fn sample(f1: &CapFunction, f2: &CapFunction, grids: &[SamplingGrid]) -> Result<Self> {
        if f1.n() != f2.n() {
            return Err(invalid_input("cap functions of different dimension"));
        }
        if grids.is_empty() {
            return Err(invalid_input("no sampling grid"));
        }
        let mut out = ProductSamples {
            points: Vec::new(),
            moduli: Vec::new(),
            weights: Vec::new(),
        };
        for grid in grids {
            let u1 = extend(f1, grid)?;
            let u2 = extend(f2, grid)?;
            out.points.extend_from_slice(grid.points());
            out.moduli
                .extend(u1.values.iter().zip(&u2.values).map(|(a, b)| (a * b).norm()));
            out.weights.extend_from_slice(grid.weights());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.moduli.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moduli.is_empty()
    }

    /// ‖u₁u₂‖_{L^q} by quadrature; q = ∞ gives the sampled maximum.
    pub fn lq(&self, q: f64) -> Result<f64> {
        check_exponent(q)?;
        if q.is_infinite() {
            return Ok(self.moduli.iter().cloned().fold(0.0, f64::max));
        }
        let sum: f64 = self.moduli.iter().zip(&self.weights).map(|(m, w)| w * m.powf(q)).sum();
        Ok(sum.powf(1.0 / q))
    }

    /// Quadrature volume of {|u₁u₂| ≥ threshold}.
    pub fn volume_above(&self, threshold: f64) -> f64 {
        self.moduli
            .iter()
            .zip(&self.weights)
            .filter(|(m, _)| **m >= threshold)
            .map(|(_, w)| w)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilinearMeasurement {
    pub lhs: f64,
    pub normalizer: f64,
    pub ratio: f64,
}

impl BilinearMeasurement {
    fn new(lhs: f64, normalizer: f64) -> Result<Self> {
        let ratio = lhs / normalizer;
        if !ratio.is_finite() || !(normalizer > 0.0) {
            return Err(invalid_input(format!("non-finite bilinear ratio {lhs}/{normalizer}")));
        }
        Ok(BilinearMeasurement { lhs, normalizer, ratio })
    }
}

/// ‖Ef₁·Ef₂‖_{L^q} over the grids divided by ‖f₁‖₂‖f₂‖₂ (the L²(dσ) norms).
pub fn bilinear_constant(
    f1: &CapFunction,
    f2: &CapFunction,
    grids: &[SamplingGrid],
    q: f64,
) -> Result<BilinearMeasurement> {
    if f1.is_zero() || f2.is_zero() {
        return Err(invalid_input("bilinear constant of zero data"));
    }
    let lhs = ProductSamples::sample(f1, f2, grids)?.lq(q)?;
    BilinearMeasurement::new(lhs, (probability(f1) * probability(f2)).sqrt())
}

/// Same norm for unit-coefficient packet families, normalised by (#𝐓₁·#𝐓₂)^{1/2}.
pub fn family_constant(
    f1: &CapFunction,
    f2: &CapFunction,
    grids: &[SamplingGrid],
    q: f64,
    count1: usize,
    count2: usize,
) -> Result<BilinearMeasurement> {
    if count1 == 0 || count2 == 0 {
        return Err(invalid_input("empty tube family"));
    }
    let lhs = ProductSamples::sample(f1, f2, grids)?.lq(q)?;
    BilinearMeasurement::new(lhs, ((count1 * count2) as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    /// Largest |log ratio − fitted line| over the points.
    pub residual: f64,
}

pub fn scaling_fit(rs: &[f64], ratios: &[f64]) -> Result<ScalingFit> {
    if rs.len() != ratios.len() {
        return Err(invalid_input("R list and ratio list differ in length"));
    }
    if rs.len() < 3 {
        return Err(invalid_input("a scaling fit needs at least three points"));
    }
    if rs.iter().chain(ratios).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid_input("scaling fit needs positive finite R and ratios"));
    }
    let x: Vec<f64> = rs.iter().map(|r| r.ln()).collect();
    let y: Vec<f64> = ratios.iter().map(|r| r.ln()).collect();
    let slope = ls_slope(&x, &y);
    let mx = x.iter().sum::<f64>() / x.len() as f64;
    let my = y.iter().sum::<f64>() / y.len() as f64;
    let intercept = my - slope * mx;
    let residual = x
        .iter()
        .zip(&y)
        .map(|(a, b)| (b - intercept - slope * a).abs())
        .fold(0.0, f64::max);
    Ok(ScalingFit {
        slope,
        intercept,
        residual,
    })
}

/// The plate families with their unit-coefficient packet sums.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateExample {
    pub n: usize,
    pub r: f64,
    pub tubes1: Vec<Tube>,
    pub tubes2: Vec<Tube>,
    pub f1: CapFunction,
    pub f2: CapFunction,
}

pub fn plate_example(n: usize, r: f64) -> Result<PlateExample> {
    let (tubes1, tubes2) = plate_tubes(n, r)?;
    let bump = BumpProfile::default();
    let sum = |side: Side, tubes: &[Tube]| -> Result<CapFunction> {
        let lattice = PacketLattice::new(n, side, r, PLATE_PERIOD_FACTOR)?;
        let ones = vec![Complex64::new(1.0, 0.0); tubes.len()];
        packet_family_sum(&lattice, tubes, &ones, &bump)
    };
    let f1 = sum(Side::One, &tubes1)?;
    let f2 = sum(Side::Two, &tubes2)?;
    Ok(PlateExample {
        n,
        r,
        tubes1,
        tubes2,
        f1,
        f2,
    })
}

fn axis(a: f64, b: f64, h: f64) -> (Vec<f64>, Vec<f64>) {
    midpoints(a, b, ((b - a) / h).ceil().max(1.0) as usize)
}

fn concat(parts: &[(Vec<f64>, Vec<f64>)]) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for (a, w) in parts {
        nodes.extend_from_slice(a);
        weights.extend_from_slice(w);
    }
    (nodes, weights)
}

/// Quadrature of Q_R at spacing `fine` inside the box `inner` (t range
/// first, then one range per spatial axis) and `coarse` elsewhere. The coarse
/// axes break at the box faces, so the two grids tile Q_R without overlap.
pub fn two_level_grids(n: usize, r: f64, inner: &[(f64, f64)], fine: f64, coarse: f64) -> Result<Vec<SamplingGrid>> {
    check_dimension(n)?;
    if !(r >= 4.0) {
        return Err(invalid_config(format!("scale R = {r} must be at least 4")));
    }
    if inner.len() != n + 1 {
        return Err(invalid_input("inner box needs a time range and one range per axis"));
    }
    if !(fine > 0.0 && coarse > 0.0) {
        return Err(invalid_config("grid spacings must be positive"));
    }
    let region = SpacetimeRegion::cylinder(r);
    let outer: Vec<(f64, f64)> = std::iter::once((0.5 * r, r)).chain((0..n).map(|_| (-r, r))).collect();
    let clipped: Vec<(f64, f64)> = inner
        .iter()
        .zip(&outer)
        .map(|(&(a, b), &(lo, hi))| (a.max(lo), b.min(hi)))
        .collect();
    if clipped.iter().any(|(a, b)| !(b > a)) {
        return Err(invalid_input("inner box misses Q_R"));
    }
    let near_axes = clipped[1..].iter().map(|&(a, b)| axis(a, b, fine)).collect();
    let mut grids = vec![SamplingGrid::tensor(
        n,
        Some(region),
        axis(clipped[0].0, clipped[0].1, fine),
        near_axes,
        |p| region.contains(p),
    )?];
    if clipped != outer {
        let pieces = |k: usize| {
            let ((lo, hi), (a, b)) = (outer[k], clipped[k]);
            let mut parts = Vec::new();
            if a > lo {
                parts.push(axis(lo, a, coarse));
            }
            parts.push(axis(a, b, coarse));
            if hi > b {
                parts.push(axis(b, hi, coarse));
            }
            concat(&parts)
        };
        let inside_box = |p: &SpacetimePoint| {
            std::iter::once(&p.t)
                .chain(&p.x[..n])
                .zip(&clipped)
                .all(|(v, (a, b))| v > a && v < b)
        };
        grids.push(SamplingGrid::tensor(
            n,
            Some(region),
            pieces(0),
            (1..=n).map(pieces).collect(),
            |p| region.contains(p) && !inside_box(p),
        )?);
    }
    Ok(grids)
}

/// Deterministic quadrature of Q_R resolving the plate: spacing R^{1/2}/4
/// within 4R^{1/2} of the plane x₂ = … = xₙ = 0, spacing R^{1/2}/2 elsewhere.
pub fn plate_grids(n: usize, r: f64) -> Result<Vec<SamplingGrid>> {
    let l = r.sqrt();
    let band = 4.0 * l;
    let inner: Vec<(f64, f64)> = std::iter::once((0.5 * r, r))
        .chain((0..n).map(|d| if d == 0 { (-r, r) } else { (-band, band) }))
        .collect();
    two_level_grids(n, r, &inner, l / 4.0, l / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateLq {
    pub q: f64,
    pub lhs: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateMeasurement {
    pub n: usize,
    pub r: f64,
    pub tubes1: usize,
    pub tubes2: usize,
    /// (#𝐓₁·#𝐓₂)^{1/2}.
    pub normalizer: f64,
    pub lq: Vec<PlateLq>,
    /// Median |u₁u₂| on the central part of the disk.
    pub disk_modulus: f64,
    /// disk_modulus / R^{−n/2}.
    pub modulus_ratio: f64,
    /// Volume of {|u₁u₂| ≥ disk_modulus/4}.
    pub concentration_volume: f64,
    /// concentration_volume / R^{(n+3)/2}.
    pub volume_ratio: f64,
}

impl PlateMeasurement {
    pub fn ratio_at(&self, q: f64) -> Option<f64> {
        self.lq.iter().find(|m| (m.q - q).abs() < 1e-12).map(|m| m.ratio)
    }
}

pub fn measure_plate(example: &PlateExample, qs: &[f64]) -> Result<PlateMeasurement> {
    let (n, r) = (example.n, example.r);
    let grids = plate_grids(n, r)?;
    let samples = ProductSamples::sample(&example.f1, &example.f2, &grids)?;
    let normalizer = ((example.tubes1.len() * example.tubes2.len()) as f64).sqrt();
    let lq = qs
        .iter()
        .map(|&q| {
            let lhs = samples.lq(q)?;
            let m = BilinearMeasurement::new(lhs, normalizer)?;
            Ok(PlateLq { q, lhs, ratio: m.ratio })
        })
        .collect::<Result<Vec<_>>>()?;
    let l = r.sqrt();
    let mut disk: Vec<f64> = samples
        .points
        .iter()
        .zip(&samples.moduli)
        .filter(|(p, _)| p.x[0].abs() <= 0.5 * r && (1..n).all(|d| p.x[d].abs() <= 0.5 * l))
        .map(|(_, m)| *m)
        .collect();
    if disk.is_empty() {
        return Err(invalid_input("no samples on the plate disk"));
    }
    disk.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let disk_modulus = disk[disk.len() / 2];
    let concentration_volume = samples.volume_above(0.25 * disk_modulus);
    Ok(PlateMeasurement {
        n,
        r,
        tubes1: example.tubes1.len(),
        tubes2: example.tubes2.len(),
        normalizer,
        lq,
        disk_modulus,
        modulus_ratio: disk_modulus / r.powf(-(n as f64) / 2.0),
        concentration_volume,
        volume_ratio: concentration_volume / r.powf((n as f64 + 3.0) / 2.0),
    })
}

/// Smooth random data on a cap that focuses near `focus`: a random
/// combination of `modes` waves focused at focus + y_j, |y_j| ≤ 1/(2·cap_radius),
/// under a C^∞ window.
pub fn focused_random_data<R: Rng + ?Sized>(
    n: usize,
    side: Side,
    cap_radius: f64,
    spacing: f64,
    focus: SpacetimePoint,
    modes: usize,
    rng: &mut R,
) -> Result<CapFunction> {
    if modes == 0 {
        return Err(invalid_config("focused data needs at least one mode"));
    }
    let center = side.center();
    let lattice = FrequencyLattice {
        n,
        origin: center,
        spacing,
    };
    let patch = SurfacePatch::lattice_disk(lattice, center, cap_radius)?;
    let spread = 0.5 / cap_radius;
    let waves: Vec<(Complex64, [f64; MAX_DIM])> = (0..modes)
        .map(|_| {
            let c = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            let mut y = ZERO;
            for v in y.iter_mut().take(n) {
                *v = rng.gen_range(-spread..spread);
            }
            (c, y)
        })
        .collect();
    Ok(CapFunction::from_fn(patch, |p| {
        let window = 1.0 - smooth_step(norm(&sub(&p.xi, &center)) / cap_radius, 2.0);
        if window == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let sum: Complex64 = waves
            .iter()
            .map(|(c, y)| {
                let mut x = focus.x;
                for d in 0..n {
                    x[d] += y[d];
                }
                c * crate::extension::cis_cycles(-(dot(&x, &p.xi) + focus.t * p.tau))
            })
            .sum();
        sum * window
    }))
}

/// Parabolic rescale u(t, x) ↦ u(N²t, Nx): nodes ξ ↦ Nξ with the plane-wave
/// amplitudes kept.
pub fn rescale_cap(f: &CapFunction, factor: f64) -> Result<CapFunction> {
    let patch = f.patch().dilated(factor)?;
    CapFunction::from_amplitudes(patch, f.amplitudes())
}

fn rescale_region(region: &SpacetimeRegion, factor: f64) -> Result<SpacetimeRegion> {
    let (t0, t1, center, half_width) = match *region {
        SpacetimeRegion::Cylinder { r } => (0.5 * r, r, ZERO, r),
        SpacetimeRegion::Slab {
            t0,
            t1,
            center,
            half_width,
        } => (t0, t1, center, half_width),
        SpacetimeRegion::Ball { .. } => return Err(invalid_input("balls are not preserved by parabolic rescaling")),
    };
    let f2 = factor * factor;
    let mut c = center;
    for v in c.iter_mut() {
        *v /= factor;
    }
    Ok(SpacetimeRegion::Slab {
        t0: t0 / f2,
        t1: t1 / f2,
        center: c,
        half_width: half_width / factor,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescaleReport {
    pub q: f64,
    /// n − (n+2)/q.
    pub predicted_exponent: f64,
    pub scales: Vec<f64>,
    /// ‖u₁u₂‖_{L^q} / (P(u₁)P(u₂))^{1/2} at each scale.
    pub ratios: Vec<f64>,
    /// ratio_N / (ratio_{N₀}·(N/N₀)^{exponent}).
    pub normalized: Vec<f64>,
    /// max over N of max(normalized, 1/normalized).
    pub max_deviation: f64,
}

/// Rescale base data to frequency scale N for each N in `scales` and measure
/// ‖u₁u₂‖_{L^q(region_N)}/(P(u₁)P(u₂))^{1/2} with P the slice mass. The
/// region is carried along by the rescaling; each scale gets its own
/// midpoint grid of (nt + k, nx + k) points for the k-th scale.
pub fn rescaled_bilinear(
    f1: &CapFunction,
    f2: &CapFunction,
    region: &SpacetimeRegion,
    resolution: (usize, usize),
    scales: &[f64],
    separation: f64,
    q: f64,
) -> Result<RescaleReport> {
    check_exponent(q)?;
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0)) {
        return Err(invalid_config("frequency scales must be positive"));
    }
    if f1.is_zero() || f2.is_zero() {
        return Err(invalid_input("rescaling check of zero data"));
    }
    let n = f1.n();
    let mut ratios = Vec::with_capacity(scales.len());
    for (k, &big_n) in scales.iter().enumerate() {
        let g1 = rescale_cap(f1, big_n)?;
        let g2 = rescale_cap(f2, big_n)?;
        check_frequency_support(&g1, &g2, big_n, separation)?;
        let scaled = rescale_region(region, big_n)?;
        let grid = SamplingGrid::midpoint(n, scaled, resolution.0 + k, resolution.1 + k)?;
        let lhs = ProductSamples::sample(&g1, &g2, &[grid])?.lq(q)?;
        let m = BilinearMeasurement::new(lhs, (physical_probability(&g1) * physical_probability(&g2)).sqrt())?;
        ratios.push(m.ratio);
    }
    let exponent = n as f64 - (n as f64 + 2.0) / q;
    let normalized: Vec<f64> = scales
        .iter()
        .zip(&ratios)
        .map(|(s, r)| r / (ratios[0] * (s / scales[0]).powf(exponent)))
        .collect();
    let max_deviation = normalized.iter().map(|v| v.max(1.0 / v)).fold(1.0, f64::max);
    Ok(RescaleReport {
        q,
        predicted_exponent: exponent,
        scales: scales.to_vec(),
        ratios,
        normalized,
        max_deviation,
    })
}

/// Supports within |ξ| ≤ N up to the cap radius (the caps are centred on
/// the sphere |ξ| = N) and at least cN apart.
fn check_frequency_support(g1: &CapFunction, g2: &CapFunction, big_n: f64, separation: f64) -> Result<()> {
    let cap = g1.patch().radius().max(g2.patch().radius());
    let limit = (big_n + cap) * (1.0 + 1e-12);
    let reach = |g: &CapFunction| {
        g.patch()
            .nodes()
            .iter()
            .zip(g.values())
            .filter(|(_, v)| v.norm() > 0.0)
            .map(|(p, _)| norm(&p.xi))
            .fold(0.0, f64::max)
    };
    if reach(g1) > limit || reach(g2) > limit {
        return Err(invalid_input(format!("Fourier support leaves |ξ| ≤ {big_n}")));
    }
    let gap = norm(&sub(&g1.patch().center(), &g2.patch().center())) - g1.patch().radius() - g2.patch().radius();
    if gap < separation * big_n {
        return Err(invalid_input(format!(
            "Fourier supports {gap:.4} apart, below the required separation {:.4}",
            separation * big_n
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub seed_ratio: f64,
    pub best_ratio: f64,
    pub best: (CapFunction, CapFunction),
    pub evaluations: usize,
    pub accepted: usize,
}

fn perturb<R: Rng + ?Sized>(f: &CapFunction, step: f64, rng: &mut R) -> CapFunction {
    let rms = (f.values().iter().map(|v| v.norm_sqr()).sum::<f64>() / f.values().len() as f64).sqrt();
    let values = f
        .values()
        .iter()
        .map(|v| {
            let z = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            v + z * (step * rms)
        })
        .collect();
    CapFunction::new(f.patch().clone(), values).expect("same patch")
}

/// Random-restart hill climbing on the bilinear ratio. Each restart starts
/// from the seed datum (perturbed by `step` after the first restart) and
/// proposes `iterations` perturbations of relative size `step`/2.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_search<R: Rng + ?Sized>(
    f1: &CapFunction,
    f2: &CapFunction,
    grids: &[SamplingGrid],
    q: f64,
    iterations: usize,
    restarts: usize,
    step: f64,
    rng: &mut R,
) -> Result<SearchOutcome> {
    if !(step > 0.0) {
        return Err(invalid_config("search step must be positive"));
    }
    let seed_ratio = bilinear_constant(f1, f2, grids, q)?.ratio;
    let mut out = SearchOutcome {
        seed_ratio,
        best_ratio: seed_ratio,
        best: (f1.clone(), f2.clone()),
        evaluations: 1,
        accepted: 0,
    };
    if iterations == 0 {
        return Ok(out);
    }
    for restart in 0..restarts.max(1) {
        let (mut c1, mut c2) = if restart == 0 {
            (f1.clone(), f2.clone())
        } else {
            (perturb(f1, step, rng), perturb(f2, step, rng))
        };
        let mut current = bilinear_constant(&c1, &c2, grids, q)?.ratio;
        out.evaluations += 1;
        for _ in 0..iterations {
            let p1 = perturb(&c1, 0.5 * step, rng);
            let p2 = perturb(&c2, 0.5 * step, rng);
            let ratio = bilinear_constant(&p1, &p2, grids, q)?.ratio;
            out.evaluations += 1;
            if ratio > current {
                current = ratio;
                c1 = p1;
                c2 = p2;
                out.accepted += 1;
            }
        }
        if current > out.best_ratio {
            out.best_ratio = current;
            out.best = (c1, c2);
        }
    }
    Ok(out)
}

/// A Lebesgue exponent as written in a config: a number, "a/b", or "critical"
/// for (n+3)/(n+1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawExponent", into = "RawExponent")]
pub enum Exponent {
    Value(f64),
    Ratio(u32, u32),
    Critical,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawExponent {
    Number(f64),
    Text(String),
}

impl TryFrom<RawExponent> for Exponent {
    type Error = String;

    fn try_from(raw: RawExponent) -> std::result::Result<Self, String> {
        match raw {
            RawExponent::Number(v) => Ok(Exponent::Value(v)),
            RawExponent::Text(s) => s.parse(),
        }
    }
}

impl From<Exponent> for RawExponent {
    fn from(e: Exponent) -> Self {
        match e {
            Exponent::Value(v) => RawExponent::Number(v),
            other => RawExponent::Text(other.to_string()),
        }
    }
}

impl std::str::FromStr for Exponent {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "critical" {
            return Ok(Exponent::Critical);
        }
        if let Some((a, b)) = s.split_once('/') {
            let a: u32 = a
                .trim()
                .parse()
                .map_err(|_| format!("bad exponent numerator in {s:?}"))?;
            let b: u32 = b
                .trim()
                .parse()
                .map_err(|_| format!("bad exponent denominator in {s:?}"))?;
            if b == 0 {
                return Err(format!("zero denominator in exponent {s:?}"));
            }
            return Ok(Exponent::Ratio(a, b));
        }
        s.parse::<f64>()
            .map(Exponent::Value)
            .map_err(|_| format!("exponent {s:?} is not a number, a/b, or \"critical\""))
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exponent::Value(v) => write!(f, "{v}"),
            Exponent::Ratio(a, b) => write!(f, "{a}/{b}"),
            Exponent::Critical => write!(f, "critical"),
        }
    }
}

impl Exponent {
    pub fn value(&self, n: usize) -> f64 {
        match *self {
            Exponent::Value(v) => v,
            Exponent::Ratio(a, b) => a as f64 / b as f64,
            Exponent::Critical => (n as f64 + 3.0) / (n as f64 + 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// The ±e₁ plate families, normalised by (#𝐓₁#𝐓₂)^{1/2}.
    Plate,
    /// Focused random data on caps of radius `FOCUS_CAP_RADIUS`, normalised by ‖f₁‖₂‖f₂‖₂.
    Random,
    /// One canonical packet per side crossing at (3R/4, 0).
    Packets,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Plate => "plate",
            Family::Random => "random",
            Family::Packets => "packets",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub probability_drift: f64,
    pub reconstruction: f64,
    pub l2_variation: f64,
    pub decay_suppression: f64,
    pub decay_order: f64,
    pub spectrum_fraction: f64,
    pub spectrum_radius: f64,
    pub slope: f64,
    pub subcritical_slope: f64,
    pub drift_factor: f64,
    pub bush_k: f64,
    pub bush_growth: f64,
    pub rescale_factor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            probability_drift: 1e-6,
            reconstruction: 1e-6,
            l2_variation: 4.0,
            decay_suppression: 1e3,
            decay_order: 4.0,
            spectrum_fraction: 0.99,
            spectrum_radius: 8.0,
            slope: 0.1,
            subcritical_slope: 0.05,
            drift_factor: 4.0,
            bush_k: 8.0,
            bush_growth: 0.3,
            rescale_factor: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    pub random_functions: usize,
    pub samples: usize,
    pub configurations: usize,
    pub tubes_per_family: usize,
    pub search_iterations: usize,
    pub search_restarts: usize,
    pub focus_modes: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            random_functions: 20,
            samples: 1000,
            configurations: 50,
            tubes_per_family: 100,
            search_iterations: 8,
            search_restarts: 2,
            focus_modes: 3,
        }
    }
}

fn default_delta() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    pub q: Exponent,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub family: Family,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check_dimension(self.n)?;
        if self.r.is_empty() {
            return Err(invalid_config("R: empty scale list"));
        }
        for r in &self.r {
            let ok = *r >= 16.0 && r.fract() == 0.0 && (*r as u64).is_power_of_two();
            if !ok {
                return Err(invalid_config(format!("R: {r} is not a power of two ≥ 16")));
            }
        }
        if self.r.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid_config("R: scales must be strictly increasing"));
        }
        let q = self.q.value(self.n);
        if !(q > 0.0) || q.is_nan() {
            return Err(invalid_config(format!("q: {q} must be positive")));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(invalid_config(format!("delta: {} must lie in (0, 1/2)", self.delta)));
        }
        let t = &self.tolerances;
        let positive = [
            ("probability_drift", t.probability_drift),
            ("reconstruction", t.reconstruction),
            ("l2_variation", t.l2_variation),
            ("decay_suppression", t.decay_suppression),
            ("decay_order", t.decay_order),
            ("spectrum_radius", t.spectrum_radius),
            ("slope", t.slope),
            ("drift_factor", t.drift_factor),
            ("bush_k", t.bush_k),
            ("bush_growth", t.bush_growth),
            ("rescale_factor", t.rescale_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid_config(format!("tolerances.{name}: {v} must be positive")));
            }
        }
        if !(t.spectrum_fraction > 0.0 && t.spectrum_fraction <= 1.0) {
            return Err(invalid_config("tolerances.spectrum_fraction must lie in (0, 1]"));
        }
        let b = &self.budgets;
        for (name, v) in [
            ("random_functions", b.random_functions),
            ("samples", b.samples),
            ("configurations", b.configurations),
            ("tubes_per_family", b.tubes_per_family),
            ("search_restarts", b.search_restarts),
            ("focus_modes", b.focus_modes),
        ] {
            if v == 0 {
                return Err(invalid_config(format!("budgets.{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub n: usize,
    #[serde(rename = "R")]
    pub r: f64,
    pub q: f64,
    pub family: Family,
    pub lhs: f64,
    pub normalizer: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub config: ExperimentConfig,
    pub rows: Vec<EstimateRow>,
    pub slope: f64,
    pub residual: f64,
}

/// Crossing point of the single-packet and focused families.
fn crossing(r: f64) -> SpacetimePoint {
    SpacetimePoint::new(0.75 * r, ZERO)
}

/// Cap radius of the focused random family. Fixed in R, so the data at
/// different scales differ only by where they focus.
pub const FOCUS_CAP_RADIUS: f64 = 0.05;

/// Focused random data on both sides at scale R, focusing at (3R/4, 0).
pub fn focused_pair<R: Rng + ?Sized>(
    n: usize,
    r: f64,
    modes: usize,
    rng: &mut R,
) -> Result<(CapFunction, CapFunction)> {
    let cap = FOCUS_CAP_RADIUS;
    // Period 3R keeps periodic images of the focus outside Q_R.
    let spacing = 1.0 / (3.0 * r);
    let focus = crossing(r);
    Ok((
        focused_random_data(n, Side::One, cap, spacing, focus, modes, rng)?,
        focused_random_data(n, Side::Two, cap, spacing, focus, modes, rng)?,
    ))
}

/// Quadrature of Q_R for the focused family: spacing 1/(8·cap radius)
/// within 4/cap radius of the focus, R^{1/2}/2 elsewhere (where the two
/// waves have separated).
pub fn focused_grids(n: usize, r: f64) -> Result<Vec<SamplingGrid>> {
    let half = 4.0 / FOCUS_CAP_RADIUS;
    let focus = crossing(r);
    let inner: Vec<(f64, f64)> = std::iter::once((focus.t - half, focus.t + half))
        .chain((0..n).map(|_| (-half, half)))
        .collect();
    two_level_grids(n, r, &inner, 1.0 / (8.0 * FOCUS_CAP_RADIUS), 0.5 * r.sqrt())
}

/// Canonical packets of the two tubes through (3R/4, 0).
pub fn packet_pair(n: usize, r: f64) -> Result<(CapFunction, CapFunction)> {
    let l = r.sqrt();
    let j = (0.75 * r / l).round() as i64;
    let bump = BumpProfile::default();
    let t1 = Tube::new(n, Side::One, r, [-j, 0, 0], [0; MAX_DIM])?;
    let t2 = Tube::new(n, Side::Two, r, [j, 0, 0], [0; MAX_DIM])?;
    Ok((
        canonical_packet(&PacketLattice::new(n, Side::One, r, PLATE_PERIOD_FACTOR)?, &t1, &bump)?,
        canonical_packet(&PacketLattice::new(n, Side::Two, r, PLATE_PERIOD_FACTOR)?, &t2, &bump)?,
    ))
}

fn measure_row(config: &ExperimentConfig, index: usize, r: f64) -> Result<EstimateRow> {
    let n = config.n;
    let q = config.q.value(n);
    let m = match config.family {
        Family::Plate => {
            let plate = plate_example(n, r)?;
            family_constant(
                &plate.f1,
                &plate.f2,
                &plate_grids(n, r)?,
                q,
                plate.tubes1.len(),
                plate.tubes2.len(),
            )?
        }
        Family::Packets => {
            let (f1, f2) = packet_pair(n, r)?;
            family_constant(&f1, &f2, &plate_grids(n, r)?, q, 1, 1)?
        }
        Family::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(index as u64));
            let (f1, f2) = focused_pair(n, r, config.budgets.focus_modes, &mut rng)?;
            bilinear_constant(&f1, &f2, &focused_grids(n, r)?, q)?
        }
    };
    Ok(EstimateRow {
        n,
        r,
        q,
        family: config.family,
        lhs: m.lhs,
        normalizer: m.normalizer,
        ratio: m.ratio,
    })
}

/// Measure the configured family at every R and fit the scaling exponent.
/// With fewer than three scales the slope and residual are reported as 0.
pub fn run_experiment(config: &ExperimentConfig) -> Result<EstimateReport> {
    config.validate()?;
    let rows = config
        .r
        .iter()
        .enumerate()
        .map(|(i, &r)| measure_row(config, i, r))
        .collect::<Result<Vec<_>>>()?;
    let (slope, residual) = if rows.len() >= 3 {
        let fit = scaling_fit(&config.r, &rows.iter().map(|r| r.ratio).collect::<Vec<_>>())?;
        (fit.slope, fit.residual)
    } else {
        (0.0, 0.0)
    };
    Ok(EstimateReport {
        config: config.clone(),
        rows,
        slope,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_patch, PatchTier};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_node_plane_waves_match_closed_form() {
        let n = 2;
        let p1 = make_patch(n, Side::One, PatchTier::Base, 1).unwrap();
        let p2 = make_patch(n, Side::Two, PatchTier::Base, 1).unwrap();
        let delta_at = |p: &SurfacePatch| {
            let mut v = vec![Complex64::new(0.0, 0.0); p.len()];
            v[0] = Complex64::new(1.0, 0.0);
            CapFunction::new(p.clone(), v).unwrap()
        };
        let (f1, f2) = (delta_at(&p1), delta_at(&p2));
        let (w1, w2) = (p1.weights()[0], p2.weights()[0]);
        let region = SpacetimeRegion::cylinder(64.0);
        let grid = SamplingGrid::midpoint(n, region, 6, 10).unwrap();
        for q in [1.5, 2.0, 3.0] {
            let m = bilinear_constant(&f1, &f2, std::slice::from_ref(&grid), q).unwrap();
            let expected = w1 * w2 * grid.total_weight().powf(1.0 / q) / (w1.sqrt() * w2.sqrt());
            assert!((m.ratio / expected - 1.0).abs() < 1e-10, "q={q}");
        }
        let zero = CapFunction::zeros(p1.clone());
        assert!(bilinear_constant(&zero, &f2, &[grid], 2.0).is_err());
    }

    #[test]
    fn scaling_fit_examples() {
        let rs = [64.0, 128.0, 256.0, 512.0];
        let exact: Vec<f64> = rs.iter().map(|r: &f64| 3.0 * r.powf(0.7)).collect();
        let fit = scaling_fit(&rs, &exact).unwrap();
        assert!((fit.slope - 0.7).abs() < 1e-12);
        assert!(fit.residual < 1e-12);
        let flat = scaling_fit(&rs, &[2.0; 4]).unwrap();
        assert!(flat.slope.abs() < 1e-15);
        assert!(scaling_fit(&rs, &[1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(scaling_fit(&rs[..2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn enlarging_the_region_never_decreases_the_norm() {
        let mut g = rng(1);
        let (f1, f2) = focused_pair(1, 64.0, 2, &mut g).unwrap();
        let grids = focused_grids(1, 64.0).unwrap();
        for q in [1.2, 5.0 / 3.0, 2.0, 4.0] {
            let a = ProductSamples::sample(&f1, &f2, &grids[..1]).unwrap().lq(q).unwrap();
            let b = ProductSamples::sample(&f1, &f2, &grids).unwrap().lq(q).unwrap();
            assert!(b >= a);
        }
    }

    #[test]
    fn two_level_grids_tile_the_cylinder() {
        for (n, r) in [(1, 64.0), (2, 64.0), (2, 256.0)] {
            let plate: f64 = plate_grids(n, r).unwrap().iter().map(|g| g.total_weight()).sum();
            let focused: f64 = focused_grids(n, r).unwrap().iter().map(|g| g.total_weight()).sum();
            let exact = SpacetimeRegion::cylinder(r).volume(n);
            assert!(
                (focused / exact - 1.0).abs() < 0.03,
                "n={n} R={r}: {focused} vs {exact}"
            );
            let total = plate;
            let exact = SpacetimeRegion::cylinder(r).volume(n);
            assert!((total / exact - 1.0).abs() < 0.03, "n={n} R={r}: {total} vs {exact}");
        }
    }

    #[test]
    fn plate_counts_and_modulus() {
        let plate = plate_example(2, 64.0).unwrap();
        let l = 8.0;
        for count in [plate.tubes1.len(), plate.tubes2.len()] {
            assert!(count as f64 >= l / 4.0 && count as f64 <= 4.0 * l);
        }
        let m = measure_plate(&plate, &[2.0]).unwrap();
        assert!(m.modulus_ratio > 0.25 && m.modulus_ratio < 4.0, "{m:?}");
        assert!(m.volume_ratio > 0.25 && m.volume_ratio < 4.0, "{m:?}");
    }

    #[test]
    fn rescaling_at_unit_scale_is_the_bilinear_constant() {
        let mut g = rng(2);
        let (f1, f2) = focused_pair(2, 64.0, 2, &mut g).unwrap();
        let region = SpacetimeRegion::cylinder(64.0);
        let rep = rescaled_bilinear(&f1, &f2, &region, (8, 20), &[1.0], 1.0, 2.0).unwrap();
        let grid = SamplingGrid::midpoint(2, rescale_region(&region, 1.0).unwrap(), 8, 20).unwrap();
        let m = bilinear_constant(&f1, &f2, &[grid], 2.0).unwrap();
        let physical = (physical_probability(&f1) * physical_probability(&f2)).sqrt();
        assert!((rep.ratios[0] * physical / m.lhs - 1.0).abs() < 1e-12);
        assert_eq!(rep.predicted_exponent, 0.0);
    }

    #[test]
    fn rescaling_tracks_the_predicted_power() {
        let mut g = rng(3);
        let (f1, f2) = focused_pair(1, 64.0, 2, &mut g).unwrap();
        let region = SpacetimeRegion::cylinder(64.0);
        for q in [2.0, 5.0 / 3.0] {
            let rep = rescaled_bilinear(&f1, &f2, &region, (24, 96), &[1.0, 2.0, 4.0], 1.0, q).unwrap();
            assert!(rep.max_deviation < 1.05, "{rep:?}");
        }
        assert!(rescaled_bilinear(&f1, &f2, &region, (8, 8), &[1.0], 2.5, 2.0).is_err());
    }

    #[test]
    fn search_without_steps_returns_the_seed_ratio() {
        let mut g = rng(4);
        let (f1, f2) = focused_pair(1, 16.0, 1, &mut g).unwrap();
        let grids = focused_grids(1, 16.0).unwrap();
        let seed = bilinear_constant(&f1, &f2, &grids, 2.0).unwrap().ratio;
        let out = adversarial_search(&f1, &f2, &grids, 2.0, 0, 3, 0.3, &mut g).unwrap();
        assert_eq!(out.best_ratio, seed);
        let a = adversarial_search(&f1, &f2, &grids, 2.0, 4, 2, 0.3, &mut rng(9)).unwrap();
        let b = adversarial_search(&f1, &f2, &grids, 2.0, 4, 2, 0.3, &mut rng(9)).unwrap();
        assert_eq!(a.best_ratio, b.best_ratio);
        assert!(a.best_ratio >= seed);
    }

    #[test]
    fn exponent_parsing() {
        assert_eq!("5/3".parse::<Exponent>().unwrap().value(2), 5.0 / 3.0);
        assert_eq!("critical".parse::<Exponent>().unwrap().value(2), 5.0 / 3.0);
        assert_eq!("critical".parse::<Exponent>().unwrap().value(1), 2.0);
        assert!("5/0".parse::<Exponent>().is_err());
        assert!("abc".parse::<Exponent>().is_err());
        let e: Exponent = serde_json::from_str("1.5").unwrap();
        assert_eq!(e, Exponent::Value(1.5));
        let e: Exponent = serde_json::from_str("\"5/3\"").unwrap();
        assert_eq!(serde_json::to_string(&e).unwrap(), "\"5/3\"");
    }

    fn config(text: &str) -> std::result::Result<ExperimentConfig, serde_json::Error> {
        serde_json::from_str(text)
    }

    #[test]
    fn config_validation() {
        let ok = config(r#"{"n": 2, "R": [64, 128, 256], "q": "5/3", "family": "plate"}"#).unwrap();
        ok.validate().unwrap();
        assert_eq!(ok.delta, 0.1);
        assert!(config(r#"{"n": 2, "R": [64], "q": 2, "family": "plate", "colour": 1}"#).is_err());
        let bad_r = config(r#"{"n": 2, "R": [64, 100], "q": 2, "family": "plate"}"#).unwrap();
        assert!(bad_r.validate().unwrap_err().to_string().contains("R:"));
        let unsorted = config(r#"{"n": 2, "R": [128, 64], "q": 2, "family": "plate"}"#).unwrap();
        assert!(unsorted.validate().is_err());
        let bad_q = config(r#"{"n": 2, "R": [64], "q": -1, "family": "random"}"#).unwrap();
        assert!(bad_q.validate().unwrap_err().to_string().contains("q:"));
        let bad_tol = config(r#"{"n": 2, "R": [64], "q": 2, "family": "random", "tolerances": {"slope": 0}}"#).unwrap();
        assert!(bad_tol.validate().is_err());
    }

    #[test]
    fn experiments_are_deterministic() {
        let cfg = config(r#"{"n": 1, "R": [16, 32, 64], "q": 2, "family": "random", "seed": 11}"#).unwrap();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.rows.iter().all(|r| r.ratio.is_finite() && r.ratio > 0.0));
    }

    #[test]
    fn focused_l2_ratio_is_uniform_in_r() {
        let cfg = config(r#"{"n": 2, "R": [64, 128, 256, 512], "q": 2, "family": "random", "seed": 5}"#).unwrap();
        let rep = run_experiment(&cfg).unwrap();
        let ratios: Vec<f64> = rep.rows.iter().map(|r| r.ratio).collect();
        let hi = ratios.iter().cloned().fold(0.0, f64::max);
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(hi / lo <= 2.0, "{ratios:?}");
    }
}

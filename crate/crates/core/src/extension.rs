//! Extension operators u = (f dσ)^∨ on the paraboloid, the free Schrödinger
//! flow, probability, discrete L^q norms and product-spectrum localisation.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftDirection;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::fft::{fft_nd, signed_bin};
use crate::geometry::{
    dot, norm, paraboloid_lift, sub, tau_of, FrequencyPoint, SpacetimePoint, SpacetimeRegion, SurfacePatch, Vector,
    MAX_DIM, ZERO,
};

const ZERO_C: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// e^{2πi p}, with `p` reduced to [−½, ½] first so large phases keep full precision.
#[inline]
pub(crate) fn cis_cycles(p: f64) -> Complex64 {
    let r = p - p.round();
    let (s, c) = (2.0 * PI * r).sin_cos();
    Complex64::new(c, s)
}

/// Complex amplitudes f(ξ_k) attached to the nodes of a surface patch.
#[derive(Clone, Debug, PartialEq)]
pub struct CapFunction {
    patch: SurfacePatch,
    values: Vec<Complex64>,
}

impl CapFunction {
    pub fn new(patch: SurfacePatch, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != patch.len() {
            return Err(invalid_input(format!(
                "{} values for a patch with {} nodes",
                values.len(),
                patch.len()
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(invalid_input("cap function values must be finite"));
        }
        Ok(CapFunction { patch, values })
    }

    pub fn zeros(patch: SurfacePatch) -> Self {
        let values = vec![ZERO_C; patch.len()];
        CapFunction { patch, values }
    }

    pub fn constant(patch: SurfacePatch, c: Complex64) -> Self {
        let values = vec![c; patch.len()];
        CapFunction { patch, values }
    }

    pub fn from_fn(patch: SurfacePatch, f: impl Fn(&FrequencyPoint) -> Complex64) -> Self {
        let values = patch.nodes().iter().map(f).collect();
        CapFunction { patch, values }
    }

    /// Independent standard complex Gaussian values.
    pub fn random<R: Rng + ?Sized>(patch: SurfacePatch, rng: &mut R) -> Self {
        let values = (0..patch.len())
            .map(|_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
            })
            .collect();
        CapFunction { patch, values }
    }

    /// Values from quadrature-weighted amplitudes a_k = w_k f_k.
    pub fn from_amplitudes(patch: SurfacePatch, amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() != patch.len() {
            return Err(invalid_input("amplitude count does not match node count"));
        }
        let values = amplitudes.iter().zip(patch.weights()).map(|(a, w)| a / w).collect();
        CapFunction::new(patch, values)
    }

    pub fn patch(&self) -> &SurfacePatch {
        &self.patch
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.patch.n()
    }

    pub fn into_parts(self) -> (SurfacePatch, Vec<Complex64>) {
        (self.patch, self.values)
    }

    /// w_k f_k, the coefficients of the plane waves in the extension.
    pub fn amplitudes(&self) -> Vec<Complex64> {
        self.values
            .iter()
            .zip(self.patch.weights())
            .map(|(v, w)| v * w)
            .collect()
    }

    /// ‖f‖_{L²(dσ)}.
    pub fn l2_norm(&self) -> f64 {
        probability(self).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == ZERO_C)
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        CapFunction {
            patch: self.patch.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    /// a·self + b·other; both must live on the same nodes.
    pub fn linear_combination(&self, a: Complex64, other: &CapFunction, b: Complex64) -> Result<Self> {
        if self.patch.nodes() != other.patch.nodes() {
            return Err(invalid_input(
                "linear combination of cap functions on different node sets",
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(CapFunction {
            patch: self.patch.clone(),
            values,
        })
    }

    /// ⟨f, g⟩_{L²(dσ)} for functions on the same nodes.
    pub fn inner(&self, other: &CapFunction) -> Result<Complex64> {
        if self.patch.nodes() != other.patch.nodes() {
            return Err(invalid_input("inner product of cap functions on different node sets"));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .zip(self.patch.weights())
            .map(|((x, y), w)| x * y.conj() * w)
            .sum())
    }
}

/// Sampled values of a wave, with the quadrature weights of its grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub points: Vec<SpacetimePoint>,
    pub values: Vec<Complex64>,
    pub weights: Vec<f64>,
    pub provenance: String,
}

impl Field {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_modulus(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Pointwise product u₁·u₂ on a shared grid.
    pub fn product(&self, other: &Field) -> Result<Field> {
        if self.points != other.points {
            return Err(invalid_input("pointwise product of fields on different grids"));
        }
        Ok(Field {
            points: self.points.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect(),
            weights: self.weights.clone(),
            provenance: format!("({})·({})", self.provenance, other.provenance),
        })
    }

    /// Σ_s w_s u(s) conj(v(s)).
    pub fn inner(&self, other: &Field) -> Result<Complex64> {
        if self.points != other.points {
            return Err(invalid_input("inner product of fields on different grids"));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .zip(&self.weights)
            .map(|((a, b), w)| a * b.conj() * w)
            .sum())
    }
}

/// Tensor-product structure of a grid: every point is (times[i], axes[0][j₀], …)
/// and `selection` lists the flat tensor index of each kept point.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorLayout {
    pub times: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    pub selection: Vec<usize>,
}

impl TensorLayout {
    fn spatial_len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }
}

/// Sample points with positive quadrature weights, optionally tied to a region.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    n: usize,
    region: Option<SpacetimeRegion>,
    points: Vec<SpacetimePoint>,
    weights: Vec<f64>,
    tensor: Option<TensorLayout>,
}

impl SamplingGrid {
    pub fn new(
        n: usize,
        region: Option<SpacetimeRegion>,
        points: Vec<SpacetimePoint>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        crate::geometry::check_dimension(n)?;
        if points.is_empty() {
            return Err(invalid_input("sampling grid has no points"));
        }
        if points.len() != weights.len() {
            return Err(invalid_input("sample and weight counts differ"));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(invalid_input("sample weights must be positive and finite"));
        }
        Ok(SamplingGrid {
            n,
            region,
            points,
            weights,
            tensor: None,
        })
    }

    /// Tensor grid times × axes[0] × … with product weights, keeping the points
    /// accepted by `keep`.
    pub fn tensor(
        n: usize,
        region: Option<SpacetimeRegion>,
        times: (Vec<f64>, Vec<f64>),
        axes: Vec<(Vec<f64>, Vec<f64>)>,
        keep: impl Fn(&SpacetimePoint) -> bool,
    ) -> Result<Self> {
        crate::geometry::check_dimension(n)?;
        if axes.len() != n {
            return Err(invalid_input(format!("{} spatial axes for dimension {n}", axes.len())));
        }
        let (times, t_weights) = times;
        if times.len() != t_weights.len() || axes.iter().any(|(a, w)| a.len() != w.len()) {
            return Err(invalid_input("axis and weight lengths differ"));
        }
        let shape: Vec<usize> = axes.iter().map(|(a, _)| a.len()).collect();
        let spatial: usize = shape.iter().product();
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut selection = Vec::new();
        let mut idx = [0usize; MAX_DIM];
        for (it, (&t, &wt)) in times.iter().zip(&t_weights).enumerate() {
            for flat in 0..spatial {
                let mut rem = flat;
                for d in (0..n).rev() {
                    idx[d] = rem % shape[d];
                    rem /= shape[d];
                }
                let mut x = ZERO;
                let mut w = wt;
                for d in 0..n {
                    x[d] = axes[d].0[idx[d]];
                    w *= axes[d].1[idx[d]];
                }
                let p = SpacetimePoint::new(t, x);
                if keep(&p) {
                    points.push(p);
                    weights.push(w);
                    selection.push(it * spatial + flat);
                }
            }
        }
        let mut grid = SamplingGrid::new(n, region, points, weights)?;
        grid.tensor = Some(TensorLayout {
            times,
            axes: axes.into_iter().map(|(a, _)| a).collect(),
            selection,
        });
        Ok(grid)
    }

    /// Midpoint rule on the bounding box of `region` with `nt` times and `nx`
    /// points per spatial axis, restricted to the region; weights are scaled
    /// so they sum to the exact region volume.
    pub fn midpoint(n: usize, region: SpacetimeRegion, nt: usize, nx: usize) -> Result<Self> {
        if nt == 0 || nx == 0 {
            return Err(invalid_config("midpoint grid needs at least one point per axis"));
        }
        let ((t0, t1), xr) = region.bounding_box(n);
        let times = midpoints(t0, t1, nt);
        let axes = (0..n).map(|d| midpoints(xr[d].0, xr[d].1, nx)).collect();
        let mut grid = SamplingGrid::tensor(n, Some(region), times, axes, |p| region.contains(p))?;
        let total = grid.total_weight();
        let target = region.volume(n);
        for w in grid.weights.iter_mut() {
            *w *= target / total;
        }
        Ok(grid)
    }

    /// Uniform random samples of `region`, each carrying weight volume/count.
    pub fn uniform_random<R: Rng + ?Sized>(
        n: usize,
        region: SpacetimeRegion,
        count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if count == 0 {
            return Err(invalid_config("random grid needs at least one sample"));
        }
        let ((t0, t1), xr) = region.bounding_box(n);
        let mut points = Vec::with_capacity(count);
        while points.len() < count {
            let t = rng.gen_range(t0..=t1);
            let mut x = ZERO;
            for d in 0..n {
                x[d] = rng.gen_range(xr[d].0..=xr[d].1);
            }
            let p = SpacetimePoint::new(t, x);
            if region.contains(&p) {
                points.push(p);
            }
        }
        let w = region.volume(n) / count as f64;
        SamplingGrid::new(n, Some(region), points, vec![w; count])
    }

    /// One time slice of the periodic cell [c − P/2, c + P/2)ⁿ on `m` points per axis.
    pub fn periodic_slice(n: usize, t: f64, center: Vector, period: f64, m: usize) -> Result<Self> {
        if m == 0 || !(period > 0.0) {
            return Err(invalid_config("periodic slice needs a positive period and points"));
        }
        let step = period / m as f64;
        let axes = (0..n)
            .map(|d| {
                let a: Vec<f64> = (0..m).map(|j| center[d] - 0.5 * period + step * j as f64).collect();
                (a, vec![step; m])
            })
            .collect();
        SamplingGrid::tensor(n, None, (vec![t], vec![1.0]), axes, |_| true)
    }

    /// Concatenate two grids (the tensor structure is dropped).
    pub fn merge(self, other: SamplingGrid) -> Result<Self> {
        if self.n != other.n {
            return Err(invalid_input("merging grids of different dimension"));
        }
        let mut points = self.points;
        points.extend(other.points);
        let mut weights = self.weights;
        weights.extend(other.weights);
        SamplingGrid::new(self.n, self.region.or(other.region), points, weights)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn region(&self) -> Option<&SpacetimeRegion> {
        self.region.as_ref()
    }

    pub fn points(&self) -> &[SpacetimePoint] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn tensor_layout(&self) -> Option<&TensorLayout> {
        self.tensor.as_ref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Midpoint nodes and weights of `count` equal cells on [a, b].
pub fn midpoints(a: f64, b: f64, count: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (b - a) / count as f64;
    ((0..count).map(|i| a + (i as f64 + 0.5) * h).collect(), vec![h; count])
}

/// u(t,x) = Σ_k w_k f_k e^{2πi(x·ξ_k + tτ_k)} at every grid point.
///
/// Uses the separable lattice contraction when the grid has tensor structure
/// and falls back to direct summation otherwise.
pub fn extend(f: &CapFunction, grid: &SamplingGrid) -> Result<Field> {
    if grid.is_empty() {
        return Err(invalid_input("cannot extend onto an empty grid"));
    }
    if grid.tensor.is_some() {
        extend_tensor(f, grid)
    } else {
        Ok(extend_brute(f, grid))
    }
}

/// Direct O(nodes × samples) evaluation; the reference implementation.
pub fn extend_brute(f: &CapFunction, grid: &SamplingGrid) -> Field {
    Field {
        points: grid.points.clone(),
        values: extend_at(f, &grid.points),
        weights: grid.weights.clone(),
        provenance: "extend".into(),
    }
}

/// Direct evaluation of the extension at arbitrary points.
pub fn extend_at(f: &CapFunction, points: &[SpacetimePoint]) -> Vec<Complex64> {
    let active: Vec<(Vector, f64, Complex64)> = f
        .patch()
        .nodes()
        .iter()
        .zip(f.amplitudes())
        .filter(|(_, a)| *a != ZERO_C)
        .map(|(p, a)| (p.xi, p.tau, a))
        .collect();
    points
        .par_iter()
        .map(|p| {
            active
                .iter()
                .map(|(xi, tau, a)| a * cis_cycles(dot(&p.x, xi) + p.t * tau))
                .sum()
        })
        .collect()
}

/// Separable evaluation on a tensor grid: the phase e^{2πi x·ξ} factors
/// across axes because the nodes lie on a lattice.
pub fn extend_tensor(f: &CapFunction, grid: &SamplingGrid) -> Result<Field> {
    let layout = grid
        .tensor
        .as_ref()
        .ok_or_else(|| invalid_input("grid has no tensor structure"))?;
    let n = f.n();
    if n != grid.n {
        return Err(invalid_input("cap function and grid dimensions differ"));
    }
    let patch = f.patch();
    let lattice = *patch.lattice();
    let amps = f.amplitudes();
    let mut lo = [i64::MAX; MAX_DIM];
    let mut hi = [i64::MIN; MAX_DIM];
    for idx in patch.indices() {
        for d in 0..n {
            lo[d] = lo[d].min(idx[d]);
            hi[d] = hi[d].max(idx[d]);
        }
    }
    let box_shape: Vec<usize> = (0..n).map(|d| (hi[d] - lo[d] + 1) as usize).collect();
    let box_len: usize = box_shape.iter().product();
    // E_d[j][m] = e^{2πi x_{d,j} ξ_d(m)}.
    let factors: Vec<Vec<Complex64>> = (0..n)
        .map(|d| {
            let s = box_shape[d];
            let mut e = Vec::with_capacity(layout.axes[d].len() * s);
            for &x in &layout.axes[d] {
                for m in 0..s {
                    let xi = lattice.origin[d] + lattice.spacing * (lo[d] + m as i64) as f64;
                    e.push(cis_cycles(x * xi));
                }
            }
            e
        })
        .collect();
    let flat_box: Vec<usize> = patch
        .indices()
        .iter()
        .map(|idx| {
            let mut flat = 0usize;
            for d in 0..n {
                flat = flat * box_shape[d] + (idx[d] - lo[d]) as usize;
            }
            flat
        })
        .collect();
    let taus: Vec<f64> = patch.nodes().iter().map(|p| p.tau).collect();
    let spatial = layout.spatial_len();
    let out_shape: Vec<usize> = layout.axes.iter().map(Vec::len).collect();
    let slices: Vec<Vec<Complex64>> = layout
        .times
        .par_iter()
        .map(|&t| {
            let mut data = vec![ZERO_C; box_len];
            for ((a, &flat), &tau) in amps.iter().zip(&flat_box).zip(&taus) {
                data[flat] += a * cis_cycles(t * tau);
            }
            let mut shape = box_shape.clone();
            for d in 0..n {
                data = contract_axis(&data, &shape, d, &factors[d], out_shape[d]);
                shape[d] = out_shape[d];
            }
            data
        })
        .collect();
    let values = layout
        .selection
        .iter()
        .map(|&s| slices[s / spatial][s % spatial])
        .collect();
    Ok(Field {
        points: grid.points.clone(),
        values,
        weights: grid.weights.clone(),
        provenance: "extend".into(),
    })
}

/// Replace axis `axis` (length shape[axis]) by `out` entries: out[..j..] = Σ_m M[j][m] in[..m..].
fn contract_axis(data: &[Complex64], shape: &[usize], axis: usize, matrix: &[Complex64], out: usize) -> Vec<Complex64> {
    let s = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut result = vec![ZERO_C; outer * out * inner];
    for o in 0..outer {
        for j in 0..out {
            let row = &matrix[j * s..(j + 1) * s];
            let dst = &mut result[(o * out + j) * inner..(o * out + j + 1) * inner];
            for (m, coeff) in row.iter().enumerate() {
                let src = &data[(o * s + m) * inner..(o * s + m + 1) * inner];
                for (d, x) in dst.iter_mut().zip(src) {
                    *d += coeff * x;
                }
            }
        }
    }
    result
}

/// Multiply each value by e^{2πi t τ(ξ_k)}: the data whose t = 0 slice is u(t, ·).
pub fn propagate(f: &CapFunction, t: f64) -> CapFunction {
    let values = f
        .values()
        .iter()
        .zip(f.patch().nodes())
        .map(|(v, p)| v * cis_cycles(t * p.tau))
        .collect();
    CapFunction {
        patch: f.patch().clone(),
        values,
    }
}

/// Shift every node by v₀ keeping the plane-wave amplitudes w_k f_k, so that
/// |u_boosted(t, x + t v₀)| = |u(t, x)|.
pub fn galilean_boost(f: &CapFunction, v0: Vector) -> CapFunction {
    let patch = f.patch().translated(v0);
    let values = f.amplitudes().iter().zip(patch.weights()).map(|(a, w)| a / w).collect();
    CapFunction { patch, values }
}

/// P(f) = Σ_k w_k |f_k|², the frequency-side total probability.
pub fn probability(f: &CapFunction) -> f64 {
    f.values()
        .iter()
        .zip(f.patch().weights())
        .map(|(v, w)| w * v.norm_sqr())
        .sum()
}

/// Exact L² mass of one time slice over a period cell of the lattice,
/// h^{−n} Σ |w_k f_k|². Its ratio to [`probability`] is the physical-side
/// constant (≈ √(1 + |ξ|²) on the cap).
pub fn physical_probability(f: &CapFunction) -> f64 {
    let h = f.patch().lattice().spacing;
    let sum: f64 = f.amplitudes().iter().map(|a| a.norm_sqr()).sum();
    sum / h.powi(f.n() as i32)
}

/// Smallest number of points per axis at which a periodic slice resolves
/// every lattice frequency difference of the patch without aliasing.
pub fn slice_resolution(patch: &SurfacePatch) -> usize {
    let n = patch.n();
    let mut span = 1;
    for d in 0..n {
        let lo = patch.indices().iter().map(|i| i[d]).min().unwrap_or(0);
        let hi = patch.indices().iter().map(|i| i[d]).max().unwrap_or(0);
        span = span.max((hi - lo + 1) as usize);
    }
    span
}

/// ∫ |u(t, x)|² dx over one period cell, evaluated from samples of u.
pub fn slice_l2(f: &CapFunction, t: f64, points_per_axis: usize) -> Result<f64> {
    let needed = slice_resolution(f.patch());
    if points_per_axis < needed {
        return Err(invalid_config(format!(
            "slice grid of {points_per_axis} points per axis aliases; need at least {needed}"
        )));
    }
    let period = 1.0 / f.patch().lattice().spacing;
    let grid = SamplingGrid::periodic_slice(f.n(), t, ZERO, period, points_per_axis)?;
    let field = extend_tensor(f, &grid)?;
    Ok(field
        .values
        .iter()
        .zip(&field.weights)
        .map(|(v, w)| w * v.norm_sqr())
        .sum())
}

/// A Lebesgue exponent q ∈ (0, ∞].
pub fn check_exponent(q: f64) -> Result<()> {
    if q > 0.0 && !q.is_nan() {
        Ok(())
    } else {
        Err(invalid_config(format!("exponent q = {q} must be positive")))
    }
}

/// (Σ_s w_s |u(s)|^q)^{1/q}; q = ∞ gives the maximum modulus.
pub fn lq_norm(field: &Field, q: f64) -> Result<f64> {
    check_exponent(q)?;
    if q.is_infinite() {
        return Ok(field.max_modulus());
    }
    let sum: f64 = field
        .values
        .iter()
        .zip(&field.weights)
        .map(|(v, w)| w * v.norm().powf(q))
        .sum();
    Ok(sum.powf(1.0 / q))
}

/// A spacetime box on which a product spectrum is sampled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProbe {
    pub center: SpacetimePoint,
    pub side: f64,
    pub spacing: f64,
}

impl SpectrumProbe {
    /// Box of side 8R^{1/2} sampled at R^{1/2}/16 around `center`.
    pub fn around(center: SpacetimePoint, r: f64) -> Self {
        let l = r.sqrt();
        SpectrumProbe {
            center,
            side: 8.0 * l,
            spacing: l / 16.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSupport {
    /// Share of the windowed product's spectral energy inside the ball.
    pub fraction: f64,
    pub radius: f64,
    pub predicted_center: FrequencyPoint,
    /// Spacetime-frequency extent of the summed caps about the centre.
    pub extent: f64,
    pub nyquist: f64,
}

/// Spacetime frequency extent of a cap function's support about the lift of
/// its patch centre.
fn cap_extent(f: &CapFunction) -> f64 {
    let c = paraboloid_lift(f.patch().center());
    f.patch()
        .nodes()
        .iter()
        .zip(f.values())
        .filter(|(_, v)| **v != ZERO_C)
        .map(|(p, _)| {
            let dt = p.tau - c.tau;
            (dt * dt + norm(&sub(&p.xi, &c.xi)).powi(2)).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Fraction of the spacetime spectrum of u₁u₂ lying within
/// radius_factor·R^{−1/2} of (τ(v₁) + τ(v₂), v₁ + v₂), where v_j are the
/// patch centres of f_j.
///
/// The product is sampled on the probe box, tapered by a sin⁴ window,
/// demodulated by the predicted centre and transformed with an FFT.
pub fn product_spectrum_support(
    f1: &CapFunction,
    f2: &CapFunction,
    r: f64,
    radius_factor: f64,
    probe: &SpectrumProbe,
) -> Result<SpectrumSupport> {
    let n = f1.n();
    if f2.n() != n {
        return Err(invalid_input("cap functions of different dimension"));
    }
    if !(probe.spacing > 0.0) || !(probe.side > probe.spacing) {
        return Err(invalid_config("probe box must contain several samples"));
    }
    let v1 = f1.patch().center();
    let v2 = f2.patch().center();
    let mut xi_c = ZERO;
    for d in 0..n {
        xi_c[d] = v1[d] + v2[d];
    }
    let predicted_center = FrequencyPoint {
        xi: xi_c,
        tau: tau_of(&v1) + tau_of(&v2),
    };
    let extent = cap_extent(f1) + cap_extent(f2);
    let nyquist = 0.5 / probe.spacing;
    if nyquist < 2.0 * extent {
        return Err(invalid_config(format!(
            "aliasing guard: Nyquist frequency {nyquist:.4} below twice the cap extent {extent:.4}"
        )));
    }
    let mut m = (probe.side / probe.spacing).round() as usize;
    m += m % 2;
    let m = m.max(8);
    let line = |c: f64| -> (Vec<f64>, Vec<f64>) {
        let a = (0..m)
            .map(|j| c + (j as f64 - 0.5 * m as f64) * probe.spacing)
            .collect();
        (a, vec![probe.spacing; m])
    };
    let axes = (0..n).map(|d| line(probe.center.x[d])).collect();
    let grid = SamplingGrid::tensor(n, None, line(probe.center.t), axes, |_| true)?;
    let u1 = extend_tensor(f1, &grid)?;
    let u2 = extend_tensor(f2, &grid)?;
    let taper: Vec<f64> = (0..m)
        .map(|j| (PI * (j as f64 + 0.5) / m as f64).sin().powi(4))
        .collect();
    let dims = n + 1;
    let shape = vec![m; dims];
    let mut data: Vec<Complex64> = grid
        .points()
        .iter()
        .enumerate()
        .map(|(s, p)| {
            let mut rem = s;
            let mut w = 1.0;
            for _ in 0..dims {
                w *= taper[rem % m];
                rem /= m;
            }
            let demod = cis_cycles(-(p.t * predicted_center.tau + dot(&p.x, &xi_c)));
            u1.values[s] * u2.values[s] * demod * w
        })
        .collect();
    fft_nd(&mut data, &shape, FftDirection::Forward);
    let radius = radius_factor / r.sqrt();
    let df = 1.0 / (m as f64 * probe.spacing);
    let (mut inside, mut total) = (0.0, 0.0);
    for (s, v) in data.iter().enumerate() {
        let e = v.norm_sqr();
        let mut rem = s;
        let mut dist2 = 0.0;
        for _ in 0..dims {
            let k = signed_bin(rem % m, m) as f64 * df;
            dist2 += k * k;
            rem /= m;
        }
        total += e;
        if dist2.sqrt() <= radius {
            inside += e;
        }
    }
    let fraction = if total > 0.0 { inside / total } else { 1.0 };
    Ok(SpectrumSupport {
        fraction,
        radius,
        predicted_center,
        extent,
        nyquist,
    })
}

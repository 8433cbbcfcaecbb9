use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use restriction_core::combinatorics::{
    assign_exclusions, build_covers, check_kakeya_chain, incidences, plate_bush, random_configuration, BushParams,
    BushReport, IncidenceMethod,
};
use restriction_core::estimator::{
    focused_pair, measure_plate, plate_example, rescaled_bilinear, run_experiment, scaling_fit, ExperimentConfig,
    PlateMeasurement,
};
use restriction_core::extension::{
    extend, extend_at, physical_probability, product_spectrum_support, slice_l2, slice_resolution, CapFunction,
    SamplingGrid, SpectrumProbe,
};
use restriction_core::geometry::{
    FrequencyLattice, PatchTier, Side, SpacetimePoint, SpacetimeRegion, SurfacePatch, ZERO,
};
use restriction_core::wavepacket::{
    decompose as build_decomposition, reconstruct_error, verify_packet_bounds, BumpProfile, DecayBudget, DecayReport,
    PacketLattice,
};

use crate::output::{num, OutputDir};

const PLATE_EXPONENTS: [f64; 3] = [2.0, 5.0 / 3.0, 1.5];
const DECAY_ORDERS: [u32; 4] = [0, 2, 4, 8];
/// Exclusion dilation used at laboratory scales (larger dilations swallow Q_R whole).
const EXCLUSION_DILATION: f64 = 1.0;

fn rng(config: &ExperimentConfig, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(stream))
}

fn random_cap(n: usize, r: f64, rng: &mut ChaCha8Rng) -> Result<(PacketLattice, CapFunction)> {
    let lattice = PacketLattice::new(n, Side::One, r, PacketLattice::DEFAULT_PERIOD_FACTOR)?;
    let f = CapFunction::random(lattice.patch(PatchTier::Base)?, rng);
    Ok((lattice, f))
}

/// Largest relative deviation of ‖u(t)‖₂² from the physical probability over `times` slices.
fn slice_drift(f: &CapFunction, r: f64, times: usize) -> Result<f64> {
    let m = slice_resolution(f.patch()) + 2;
    let reference = physical_probability(f);
    let mut worst = 0.0f64;
    for i in 0..times {
        let t = r * i as f64 / (times - 1).max(1) as f64;
        worst = worst.max((slice_l2(f, t, m)? / reference - 1.0).abs());
    }
    Ok(worst)
}

fn ratio_spread(values: &[f64]) -> f64 {
    let hi = values.iter().cloned().fold(f64::MIN, f64::max);
    let lo = values.iter().cloned().fold(f64::MAX, f64::min);
    hi / lo
}

#[derive(Serialize)]
struct ExtendRow {
    #[serde(rename = "R")]
    r: f64,
    nodes: usize,
    points: usize,
    l2_norm: f64,
    physical_probability: f64,
    slice_drift: f64,
    brute_deviation: f64,
}

pub fn extend_fields(config: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let n = config.n;
    let mut header = vec!["R".to_string(), "t".to_string()];
    header.extend((1..=n).map(|d| format!("x{d}")));
    header.extend(["re", "im", "modulus"].map(String::from));
    let mut dump = Vec::new();
    let mut summary = Vec::new();
    for (i, &r) in config.r.iter().enumerate() {
        let (_, f) = random_cap(n, r, &mut rng(config, i as u64))?;
        let grid = SamplingGrid::midpoint(n, SpacetimeRegion::cylinder(r), 8, 16)?;
        let field = extend(&f, &grid)?;
        let check = config.budgets.samples.min(field.len());
        let brute = extend_at(&f, &field.points[..check]);
        let sup = field.max_modulus().max(f64::MIN_POSITIVE);
        let brute_deviation = brute
            .iter()
            .zip(&field.values)
            .map(|(a, b)| (a - b).norm() / sup)
            .fold(0.0, f64::max);
        for (p, v) in field.points.iter().zip(&field.values) {
            let mut rec = vec![num(r), num(p.t)];
            rec.extend(p.x[..n].iter().map(|&x| num(x)));
            rec.extend([num(v.re), num(v.im), num(v.norm())]);
            dump.push(rec);
        }
        summary.push(ExtendRow {
            r,
            nodes: f.patch().len(),
            points: field.len(),
            l2_norm: f.l2_norm(),
            physical_probability: physical_probability(&f),
            slice_drift: slice_drift(&f, r, 5)?,
            brute_deviation,
        });
    }
    out.write_records("extend.csv", &header, &dump)?;
    out.write_csv("extend_summary.csv", &summary)?;
    out.write_json("extend.json", &summary)
}

#[derive(Serialize)]
struct DecomposeRow {
    #[serde(rename = "R")]
    r: f64,
    packets: usize,
    l2_ratio: f64,
    reconstruction_error: f64,
    reconstruction_error_sup: f64,
    suppression_at_8: f64,
    decay_order: f64,
    support_radius: f64,
    support_bound: f64,
}

pub fn decompose(config: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let n = config.n;
    let mut rows = Vec::new();
    let mut decay: Vec<DecayReport> = Vec::new();
    for (i, &r) in config.r.iter().enumerate() {
        let mut g = rng(config, i as u64);
        let (lattice, f) = random_cap(n, r, &mut g)?;
        let d = build_decomposition(&f, &lattice, config.delta, &BumpProfile::default())?;
        let points = SamplingGrid::uniform_random(n, SpacetimeRegion::cylinder(r), config.budgets.samples, &mut g)?;
        let err = reconstruct_error(&d, &f, points.points(), f64::INFINITY)?;
        let bounds = verify_packet_bounds(&d, &DECAY_ORDERS, &DecayBudget::default(), &mut g)?;
        rows.push(DecomposeRow {
            r,
            packets: d.active().len(),
            l2_ratio: d.l2_ratio(),
            reconstruction_error: err.full,
            reconstruction_error_sup: err.full_sup,
            suppression_at_8: bounds.suppression_at_8,
            decay_order: bounds.decay_order,
            support_radius: bounds.support_radius,
            support_bound: bounds.support_bound,
        });
        out.write_json(&format!("decomposition_R{r}.json"), &d.to_record())?;
        decay.push(bounds);
    }
    out.write_csv("decompose.csv", &rows)?;
    out.write_json("decay.json", &decay)
}

#[derive(Serialize)]
struct ChainCsvRow {
    #[serde(rename = "R")]
    r: f64,
    configuration: usize,
    inequality: String,
    lhs: f64,
    rhs: f64,
    ratio: f64,
    holds: bool,
}

#[derive(Serialize)]
struct IncidenceRow {
    #[serde(rename = "R")]
    r: f64,
    configurations: usize,
    coarse_balls: usize,
    fine_balls: usize,
    identities_hold: bool,
    hashed_matches_brute: bool,
    max_tb_ratio: f64,
}

fn incidence_rows(
    config: &ExperimentConfig,
    out: Option<&mut OutputDir>,
) -> Result<(Vec<ChainCsvRow>, Vec<IncidenceRow>)> {
    let (n, tubes) = (config.n, config.budgets.tubes_per_family);
    let mut chain = Vec::new();
    let mut summary = Vec::new();
    let mut out = out;
    for (i, &r) in config.r.iter().enumerate() {
        let (coarse, fine) = build_covers(n, r, config.delta)?;
        let mut g = rng(config, i as u64);
        let mut identities = true;
        let mut oracle = true;
        let mut max_tb = 0.0f64;
        for c in 0..config.budgets.configurations {
            let tc = random_configuration(n, r, config.delta, tubes, tubes, &mut g)?;
            let index = incidences(&tc, &fine, IncidenceMethod::Hashed)?;
            // The brute-force oracle is quadratic; one configuration per scale keeps it cheap.
            if c == 0 {
                oracle &= incidences(&tc, &fine, IncidenceMethod::Brute)? == index;
                if let Some(dir) = out.as_deref_mut() {
                    dir.write_json(&format!("configuration_R{r}.json"), &tc.to_records())?;
                }
            }
            let excl = assign_exclusions(&index, &coarse, EXCLUSION_DILATION)?;
            let report = check_kakeya_chain(&index, &excl, config.tolerances.bush_k)?;
            identities &= report.identities_hold();
            max_tb = max_tb.max(report.row("t-b").map_or(0.0, |row| row.ratio));
            chain.extend(report.rows.iter().map(|row| ChainCsvRow {
                r,
                configuration: c,
                inequality: row.inequality.clone(),
                lhs: row.lhs,
                rhs: row.rhs,
                ratio: row.ratio,
                holds: row.holds,
            }));
        }
        summary.push(IncidenceRow {
            r,
            configurations: config.budgets.configurations,
            coarse_balls: coarse.len(),
            fine_balls: fine.len(),
            identities_hold: identities,
            hashed_matches_brute: oracle,
            max_tb_ratio: max_tb,
        });
    }
    Ok((chain, summary))
}

pub fn incidence(config: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let (chain, summary) = incidence_rows(config, Some(out))?;
    out.write_csv("chain.csv", &chain)?;
    out.write_csv("incidence.csv", &summary)?;
    out.write_json("incidence.json", &summary)
}

#[derive(Serialize)]
struct EstimateCsvRow {
    n: usize,
    #[serde(rename = "R")]
    r: f64,
    q: f64,
    family: restriction_core::estimator::Family,
    lhs: f64,
    normalizer: f64,
    ratio: f64,
    slope: f64,
    residual: f64,
    seed: u64,
}

pub fn estimate(config: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let report = run_experiment(config)?;
    let rows: Vec<EstimateCsvRow> = report
        .rows
        .iter()
        .map(|row| EstimateCsvRow {
            n: row.n,
            r: row.r,
            q: row.q,
            family: row.family,
            lhs: row.lhs,
            normalizer: row.normalizer,
            ratio: row.ratio,
            slope: report.slope,
            residual: report.residual,
            seed: config.seed,
        })
        .collect();
    out.write_csv("estimate.csv", &rows)?;
    out.write_json("estimate.json", &report)
}

#[derive(Serialize)]
struct PlateRow {
    n: usize,
    #[serde(rename = "R")]
    r: f64,
    q: f64,
    tubes1: usize,
    tubes2: usize,
    lhs: f64,
    normalizer: f64,
    ratio: f64,
    modulus_ratio: f64,
    volume_ratio: f64,
}

#[derive(Serialize)]
struct PlateFitRow {
    q: f64,
    slope: f64,
    intercept: f64,
    residual: f64,
}

#[derive(Serialize)]
struct BushRow {
    #[serde(rename = "R")]
    r: f64,
    t2: usize,
    pairs: usize,
    angle: f64,
    max_plane_distance: f64,
    max_axis_distance: f64,
    bound: f64,
    containments_hold: bool,
}

#[derive(Serialize)]
struct PlateSuite {
    measurements: Vec<PlateMeasurement>,
    fits: Vec<PlateFitRow>,
    bush: Vec<BushRow>,
    bush_growth: Option<f64>,
}

fn plate_suite(config: &ExperimentConfig) -> Result<PlateSuite> {
    let n = config.n;
    let mut measurements = Vec::new();
    let mut bush = Vec::new();
    let mut peak_pairs = Vec::new();
    for &r in &config.r {
        measurements.push(measure_plate(&plate_example(n, r)?, &PLATE_EXPONENTS)?);
        let params = BushParams {
            k: config.tolerances.bush_k,
            ..BushParams::defaults(r)
        };
        let (_, _, reports) = plate_bush(n, r, config.delta, &params)?;
        peak_pairs.push(reports.iter().map(|rep| rep.pairs).max().unwrap_or(0).max(1) as f64);
        bush.extend(
            reports
                .iter()
                .enumerate()
                .map(|(t2, rep): (usize, &BushReport)| BushRow {
                    r,
                    t2,
                    pairs: rep.pairs,
                    angle: rep.angle,
                    max_plane_distance: rep.max_plane_distance,
                    max_axis_distance: rep.max_axis_distance,
                    bound: rep.bound,
                    containments_hold: rep.containments_hold,
                }),
        );
    }
    let mut fits = Vec::new();
    let mut bush_growth = None;
    if config.r.len() >= 3 {
        for (k, &q) in PLATE_EXPONENTS.iter().enumerate() {
            let ratios: Vec<f64> = measurements.iter().map(|m| m.lq[k].ratio).collect();
            let fit = scaling_fit(&config.r, &ratios)?;
            fits.push(PlateFitRow {
                q,
                slope: fit.slope,
                intercept: fit.intercept,
                residual: fit.residual,
            });
        }
        bush_growth = Some(scaling_fit(&config.r, &peak_pairs)?.slope);
    }
    Ok(PlateSuite {
        measurements,
        fits,
        bush,
        bush_growth,
    })
}

pub fn plate(config: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let suite = plate_suite(config)?;
    let rows: Vec<PlateRow> = suite
        .measurements
        .iter()
        .flat_map(|m| {
            m.lq.iter().map(move |lq| PlateRow {
                n: m.n,
                r: m.r,
                q: lq.q,
                tubes1: m.tubes1,
                tubes2: m.tubes2,
                lhs: lq.lhs,
                normalizer: m.normalizer,
                ratio: lq.ratio,
                modulus_ratio: m.modulus_ratio,
                volume_ratio: m.volume_ratio,
            })
        })
        .collect();
    out.write_csv("plate.csv", &rows)?;
    out.write_csv("plate_fits.csv", &suite.fits)?;
    out.write_csv("bush.csv", &suite.bush)?;
    out.write_json("plate.json", &suite)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub value: f64,
    pub threshold: f64,
    pub status: &'static str,
}

fn at_most(check: &str, value: f64, threshold: f64) -> CheckRow {
    row(check, value, threshold, value <= threshold)
}

fn at_least(check: &str, value: f64, threshold: f64) -> CheckRow {
    row(check, value, threshold, value >= threshold)
}

fn row(check: &str, value: f64, threshold: f64, pass: bool) -> CheckRow {
    CheckRow {
        check: check.to_string(),
        value,
        threshold,
        status: if pass && value.is_finite() { "pass" } else { "fail" },
    }
}

fn flag(check: &str, ok: bool) -> CheckRow {
    row(check, ok as u8 as f64, 1.0, ok)
}

fn narrow_cap(n: usize, side: Side, r: f64, rng: &mut ChaCha8Rng) -> Result<CapFunction> {
    let l = r.sqrt();
    let center = side.center();
    let lattice = FrequencyLattice {
        n,
        origin: center,
        spacing: 1.0 / (16.0 * l),
    };
    Ok(CapFunction::random(
        SurfacePatch::lattice_disk(lattice, center, 1.0 / l)?,
        rng,
    ))
}

/// Every invariant the laboratory can check, driven by the config's scales,
/// tolerances and budgets. Returns the rows; the caller decides the exit status.
pub fn verify_rows(config: &ExperimentConfig) -> Result<Vec<CheckRow>> {
    let n = config.n;
    let tol = &config.tolerances;
    let budgets = &config.budgets;
    let mut rows = Vec::new();

    let mut drift = 0.0f64;
    let mut recon = 0.0f64;
    let mut l2 = Vec::new();
    for (i, &r) in config.r.iter().enumerate() {
        let mut g = rng(config, i as u64);
        for k in 0..budgets.random_functions {
            let (lattice, f) = random_cap(n, r, &mut g)?;
            drift = drift.max(slice_drift(&f, r, 10)?);
            let d = build_decomposition(&f, &lattice, config.delta, &BumpProfile::default())?;
            l2.push(d.l2_ratio());
            if k == 0 {
                let points = SamplingGrid::uniform_random(n, SpacetimeRegion::cylinder(r), budgets.samples, &mut g)?;
                let e = reconstruct_error(&d, &f, points.points(), f64::INFINITY)?;
                recon = recon.max(e.full).max(e.full_sup);
            }
        }
    }
    rows.push(at_most("probability drift", drift, tol.probability_drift));
    rows.push(at_most("reconstruction error", recon, tol.reconstruction));
    rows.push(at_most("coefficient l2 variation", ratio_spread(&l2), tol.l2_variation));

    let r_top = *config.r.last().expect("validated non-empty");
    let mut g = rng(config, 1000);
    let (lattice, f) = random_cap(n, r_top, &mut g)?;
    let d = build_decomposition(&f, &lattice, config.delta, &BumpProfile::default())?;
    let bounds = verify_packet_bounds(&d, &DECAY_ORDERS, &DecayBudget::default(), &mut g)?;
    rows.push(at_least(
        "decay suppression at 8 tube radii",
        bounds.suppression_at_8,
        tol.decay_suppression,
    ));
    rows.push(at_least("decay order", bounds.decay_order, tol.decay_order));

    let f1 = narrow_cap(n, Side::One, r_top, &mut g)?;
    let f2 = narrow_cap(n, Side::Two, r_top, &mut g)?;
    let probe = SpectrumProbe::around(SpacetimePoint::new(0.75 * r_top, ZERO), r_top);
    let support = product_spectrum_support(&f1, &f2, r_top, tol.spectrum_radius, &probe)?;
    rows.push(at_least(
        "product spectrum concentration",
        support.fraction,
        tol.spectrum_fraction,
    ));

    if config.r.len() >= 3 {
        let suite = plate_suite(config)?;
        let slope = |q: f64| suite.fits.iter().find(|f| f.q == q).map_or(f64::NAN, |f| f.slope);
        rows.push(at_most(
            "plate L2 slope offset from -1/4",
            (slope(2.0) + 0.25).abs(),
            tol.slope,
        ));
        rows.push(at_most(
            "plate critical slope magnitude",
            slope(5.0 / 3.0).abs(),
            tol.slope,
        ));
        rows.push(at_least("plate subcritical slope", slope(1.5), tol.subcritical_slope));
        rows.push(flag(
            "bush containments",
            suite.bush.iter().all(|b| b.containments_hold),
        ));
        rows.push(at_most(
            "bush growth exponent",
            suite.bush_growth.unwrap_or(f64::NAN),
            tol.bush_growth,
        ));
    }

    let (_, summary) = incidence_rows(config, None)?;
    rows.push(flag("chain identities", summary.iter().all(|s| s.identities_hold)));
    rows.push(flag(
        "hashed incidences match brute force",
        summary.iter().all(|s| s.hashed_matches_brute),
    ));
    let tb: Vec<f64> = summary.iter().map(|s| s.max_tb_ratio).collect();
    let tb_drift = tb
        .windows(2)
        .map(|w| (w[1] / w[0]).max(w[0] / w[1]))
        .fold(1.0, f64::max);
    rows.push(at_most("chain (t-b) drift across scales", tb_drift, tol.drift_factor));

    let r0 = config.r[0];
    let (u1, u2) = focused_pair(n, r0, budgets.focus_modes, &mut rng(config, 2000))?;
    let resolution = ((r0 / 5.0).round() as usize, (0.8 * r0).round() as usize);
    for q in [2.0, config.q.value(n)] {
        let rep = rescaled_bilinear(
            &u1,
            &u2,
            &SpacetimeRegion::cylinder(r0),
            resolution,
            &[1.0, 2.0, 4.0],
            1.0,
            q,
        )?;
        rows.push(at_most(
            &format!("rescaling deviation q={}", num(q)),
            rep.max_deviation,
            tol.rescale_factor,
        ));
    }
    Ok(rows)
}

/// Runs the suite, writes verify.csv/json and reports whether every row passed.
pub fn verify(config: &ExperimentConfig, out: &mut OutputDir) -> Result<bool> {
    let rows = verify_rows(config)?;
    out.write_csv("verify.csv", &rows)?;
    out.write_json("verify.json", &rows)?;
    Ok(rows.iter().all(|r| r.status == "pass"))
}

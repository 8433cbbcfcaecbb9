use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

/// Header written by `estimate`; plotdata accepts nothing else.
pub const ESTIMATE_HEADER: [&str; 10] = [
    "n",
    "R",
    "q",
    "family",
    "lhs",
    "normalizer",
    "ratio",
    "slope",
    "residual",
    "seed",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateCsvRow {
    pub n: usize,
    #[serde(rename = "R")]
    pub r: f64,
    pub q: f64,
    pub family: String,
    pub lhs: f64,
    pub normalizer: f64,
    pub ratio: f64,
    pub slope: f64,
    pub residual: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub experiment: String,
    #[serde(rename = "R")]
    pub r: f64,
    pub q: f64,
    pub ratio: f64,
    pub slope: f64,
}

pub fn read_report(path: &Path) -> Result<Vec<EstimateCsvRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("cannot read report {}", path.display()))?;
    let header = reader
        .headers()
        .with_context(|| format!("{}:1: unreadable header", path.display()))?
        .clone();
    if header.iter().ne(ESTIMATE_HEADER.iter().copied()) {
        bail!(
            "{}:1: schema mismatch: expected header {}, found {}",
            path.display(),
            ESTIMATE_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        );
    }
    reader
        .deserialize()
        .map(|row| {
            row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                anyhow!("{}:{line}: malformed row: {e}", path.display())
            })
        })
        .collect()
}

/// Long-format union of estimate reports, stably sorted by (experiment, R).
pub fn merge(reports: &[Vec<EstimateCsvRow>]) -> Vec<PlotRow> {
    let mut rows: Vec<PlotRow> = reports
        .iter()
        .flatten()
        .map(|r| PlotRow {
            experiment: format!("{}-n{}", r.family, r.n),
            r: r.r,
            q: r.q,
            ratio: r.ratio,
            slope: r.slope,
        })
        .collect();
    rows.sort_by(|a, b| a.experiment.cmp(&b.experiment).then(a.r.total_cmp(&b.r)));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(family: &str, r: f64, ratio: f64) -> EstimateCsvRow {
        EstimateCsvRow {
            n: 2,
            r,
            q: 2.0,
            family: family.into(),
            lhs: ratio,
            normalizer: 1.0,
            ratio,
            slope: -0.25,
            residual: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn single_report_keeps_its_rows() {
        let report = vec![row("plate", 64.0, 1.0), row("plate", 128.0, 0.8)];
        let merged = merge(std::slice::from_ref(&report));
        assert_eq!(merged.len(), 2);
        for (m, r) in merged.iter().zip(&report) {
            assert_eq!((m.r, m.ratio, m.slope), (r.r, r.ratio, r.slope));
        }
    }

    #[test]
    fn union_is_sorted_stably() {
        let a = vec![row("plate", 256.0, 1.0), row("random", 64.0, 2.0)];
        let b = vec![row("plate", 64.0, 3.0), row("plate", 256.0, 4.0)];
        let merged = merge(&[a, b]);
        let keys: Vec<_> = merged.iter().map(|m| (m.experiment.as_str(), m.r, m.ratio)).collect();
        assert_eq!(
            keys,
            vec![
                ("plate-n2", 64.0, 3.0),
                ("plate-n2", 256.0, 1.0),
                ("plate-n2", 256.0, 4.0),
                ("random-n2", 64.0, 2.0)
            ]
        );
    }
}

//! The self-consistency suite: the battery must call a fair coin fair.
//! Enumerated baselines are checked against closed forms, then seeded
//! Bernoulli(0.5) windows go through the full report pipeline and every
//! statistic must land within its tolerance of the i.i.d. value.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::baselines::exact_baseline;
use crate::collector::synthetic_records;
use crate::generators::{generate, GeneratorSpec};
use crate::report::{build_report, Report, ReportError, ReportOptions};

pub const ALTERNATION_TOLERANCE: f64 = 0.05;
pub const NGRAM_TOLERANCE: f64 = 0.01;
pub const PHI_LIMIT: f64 = 0.05;
pub const RUN_RATIO_TOLERANCE: f64 = 0.07;
/// Run lengths too rare for the fixed tolerance at the sample size get a band
/// of this many standard errors instead.
pub const RUN_RATIO_SE_BAND: f64 = 4.0;
pub const MSE_RANGE: (f64, f64) = (0.24, 0.26);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.into(), passed, detail }
    }
}

#[derive(Debug, Clone)]
pub struct SelftestOutcome {
    pub checks: Vec<Check>,
    pub report: Report,
}

impl SelftestOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Exact pmfs and n-gram fractions for 8-flip windows, and expected run
/// counts for 7-flip windows, against their closed forms.
pub fn enumeration_checks() -> Vec<Check> {
    let b8 = exact_baseline(8).expect("k = 8 is enumerable");
    let heads_ok = b8.heads_pmf_exact().iter().enumerate().all(|(x, p)| *p == Ratio::new(binomial(8, x as u64), 256));
    let alt_ok = b8.alternation_pmf_exact().iter().enumerate().all(|(a, p)| *p == Ratio::new(binomial(7, a as u64), 128));
    let mean_ok = b8.alternation_mean_exact() == Ratio::new(7, 2);
    let ngram_ok = (1..=b8.max_ngram())
        .all(|n| b8.ngram_expected_exact(n).unwrap().iter().all(|p| *p == Ratio::new(1, 1u64 << n)));

    let b7 = exact_baseline(7).expect("k = 7 is enumerable");
    let k = 7u64;
    let runs_ok = (2..=7u64).all(|l| {
        let closed = if l == k { Ratio::new(2, 1u64 << k) } else { Ratio::new(k - l + 3, 1u64 << (l + 1)) };
        b7.expected_runs_exact(l as usize) == closed
    });
    vec![
        Check::new("heads-count pmf is C(8,x)/256", heads_ok, String::new()),
        Check::new("alternation pmf is C(7,a)/128", alt_ok, String::new()),
        Check::new("alternation mean is 7/2", mean_ok, format!("{}", b8.alternation_mean_exact())),
        Check::new("n-gram fractions are 2^-n", ngram_ok, String::new()),
        Check::new(
            "expected runs per 7-flip window match the closed form",
            runs_ok,
            format!("L=2: {}", b7.expected_runs_exact(2)),
        ),
    ]
}

/// `samples` independent fair windows of the default length through the
/// report pipeline.
pub fn fair_report(seed: u64, samples: usize) -> Result<Report, ReportError> {
    let mut options = ReportOptions::default();
    options.cv.seed = seed;
    let seqs = generate(&GeneratorSpec::bernoulli(0.5, options.window, samples, seed))
        .map_err(|e| ReportError::InvalidOptions(e.to_string()))?;
    build_report(&synthetic_records(&seqs, "1970-01-01T00:00:00Z"), &options)
}

/// The battery checks on a report built from fair data with one cell.
pub fn fair_checks(report: &Report) -> Vec<Check> {
    let mut checks = Vec::new();
    let Some(cell) = report.cells.first() else {
        return vec![Check::new("report has a cell", false, String::new())];
    };

    match cell.alternation_histogram.ok() {
        Some(h) => checks.push(Check::new(
            "alternation mean within 3.5 ± 0.05",
            (h.mean - 3.5).abs() <= ALTERNATION_TOLERANCE,
            format!("{}", h.mean),
        )),
        None => checks.push(Check::new("alternation mean within 3.5 ± 0.05", false, "insufficient data".into())),
    }

    let trigrams = cell.ngrams.ok().and_then(|blocks| blocks.iter().find(|b| b.n == 3));
    match trigrams {
        Some(b) => {
            let worst = b.rows.iter().map(|r| (r.fraction - 0.125).abs()).fold(0.0, f64::max);
            checks.push(Check::new(
                "every 3-gram fraction within 0.125 ± 0.01",
                worst <= NGRAM_TOLERANCE,
                format!("largest deviation {worst}"),
            ));
        }
        None => checks.push(Check::new("every 3-gram fraction within 0.125 ± 0.01", false, "missing".into())),
    }

    match cell.correlation.ok() {
        Some(c) => {
            let phis: Vec<Option<f64>> =
                c.vector.iter().enumerate().filter(|(i, _)| i + 1 != c.target).map(|(_, v)| *v).collect();
            let worst = phis.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
            let defined = phis.iter().all(Option::is_some);
            checks.push(Check::new(
                "every |phi| with the last flip below 0.05",
                defined && worst < PHI_LIMIT,
                format!("largest |phi| {worst}"),
            ));
        }
        None => checks.push(Check::new("every |phi| with the last flip below 0.05", false, "missing".into())),
    }

    match cell.runs.ok() {
        Some(r) => {
            let n = r.window_count as f64;
            let mut details = Vec::new();
            let mut ok = true;
            for row in r.rows.iter().filter(|row| row.length >= 2) {
                let sd = report.baselines.runs.run_sd::<f64>(row.length);
                let mean = report.baselines.runs.expected_runs::<f64>(row.length);
                let band = RUN_RATIO_TOLERANCE.max(RUN_RATIO_SE_BAND * sd / (mean * n.sqrt()));
                ok &= (row.ratio - 1.0).abs() <= band;
                details.push(format!("L={} {:.4}±{:.3}", row.length, row.ratio, band));
            }
            checks.push(Check::new("run ratios within 1.0 ± 0.07", ok, details.join(", ")));
        }
        None => checks.push(Check::new("run ratios within 1.0 ± 0.07", false, "insufficient data".into())),
    }

    let set = cell.flags_set();
    checks.push(Check::new("no humanness flags", set.is_empty(), set.join(",")));

    match cell.predictor.ok() {
        Some(p) => checks.push(Check::new(
            "cross-validated MSE within [0.24, 0.26]",
            (MSE_RANGE.0..=MSE_RANGE.1).contains(&p.mse),
            format!("{} at lambda {}", p.mse, p.lambda),
        )),
        None => checks.push(Check::new("cross-validated MSE within [0.24, 0.26]", false, "insufficient data".into())),
    }
    checks
}

pub fn run_selftest(seed: u64, samples: usize) -> Result<SelftestOutcome, ReportError> {
    let report = fair_report(seed, samples)?;
    let mut checks = enumeration_checks();
    checks.extend(fair_checks(&report));
    Ok(SelftestOutcome { checks, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomials() {
        assert_eq!((0..=8).map(|x| binomial(8, x)).collect::<Vec<_>>(), vec![1, 8, 28, 56, 70, 56, 28, 8, 1]);
    }

    #[test]
    fn enumeration_checks_pass() {
        for c in enumeration_checks() {
            assert!(c.passed, "{}", c.name);
        }
    }
}

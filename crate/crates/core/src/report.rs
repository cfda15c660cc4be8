//! Aggregation of collection records into per-cell statistic blocks and
//! cross-cell tables, and emission as one JSON document or a bundle of CSV
//! files.
//!
//! A report is self-contained: it carries the options and the baseline
//! tables it was built against, so it can be re-rendered without the JSONL
//! it came from.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{
    bit_alternations, bit_runs_of_length, exact_baseline, monte_carlo_baseline, overlap_covariances, BaselineError,
    BaselineTable, HumanBaselineRegistry, FAIR_MSE_FLOOR, MAX_BASELINE_NGRAM, MAX_OVERLAP_WINDOW,
};
use crate::collector::{default_plan, CollectionRecord, PromptOrder, RecordKind};
use crate::predictor::{cross_validated_mse, gap_ratio, CvConfig, FeatureLayout, PathPoint};
use crate::sequence::{pool_windows, FlipSequence, Window};
use crate::stats::{
    alternation_histogram, correlation_matrix, heads_count_histogram, heads_tally, ngram_fractions,
    ngram_fractions_whole, positional_correlation, primacy_table, run_length_stats, CellKey, PrimacyResult,
};

pub const TOOL_VERSION: &str = concat!("flipbench ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no records to analyze")]
    NoRecords,
    #[error("invalid report options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Options
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NGramMode {
    /// Overlapping n-grams inside each analysis window.
    Windows,
    /// Overlapping n-grams over each whole response.
    Whole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BaselineMode {
    Exact,
    MonteCarlo { samples: u64, seed: u64 },
}

/// Flag cutoffs and minimum sample sizes. These are conventions of this tool,
/// and every flag in a report prints the cutoff it was judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Excess alternation: mean above the fair mean by this many null SEs.
    pub alternation_se: f64,
    /// Run aversion: every ratio for `L >= 3` below 1 by this many null SEs.
    pub run_aversion_se: f64,
    /// Over-balance: mass at `ceil(k/2)` heads above the fair mass by this many null SEs.
    pub over_balance_se: f64,
    /// First-flip bias: heads proportion at position 1 above this.
    pub first_flip: f64,
    /// Windows needed before any window statistic is reported.
    pub min_windows: usize,
    /// The predictor needs this many windows per fold.
    pub min_windows_per_fold: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            alternation_se: 2.0,
            run_aversion_se: 2.0,
            over_balance_se: 2.0,
            first_flip: 0.6,
            min_windows: 30,
            min_windows_per_fold: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub window: usize,
    /// Run statistics use this prefix of every analysis window.
    pub run_window: usize,
    pub ngram_orders: Vec<usize>,
    pub ngram_mode: NGramMode,
    /// Count truncated responses alongside complete ones.
    pub include_partial: bool,
    pub baseline: BaselineMode,
    pub cv: CvConfig,
    pub thresholds: Thresholds,
    pub human: HumanBaselineRegistry,
    /// Prompt id → which outcome its instructions mention first.
    pub prompt_orders: BTreeMap<String, PromptOrder>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            window: 8,
            run_window: 7,
            ngram_orders: vec![2, 3],
            ngram_mode: NGramMode::Windows,
            include_partial: false,
            baseline: BaselineMode::Exact,
            cv: CvConfig::default(),
            thresholds: Thresholds::default(),
            human: HumanBaselineRegistry::default(),
            prompt_orders: default_plan().prompts.iter().filter_map(|p| Some((p.id.clone(), p.order?))).collect(),
        }
    }
}

impl ReportOptions {
    pub fn validate(&self) -> Result<(), ReportError> {
        let bad = |m: String| Err(ReportError::InvalidOptions(m));
        if self.window < 2 || self.window > 64 {
            return bad(format!("window {} outside 2..=64", self.window));
        }
        if self.run_window < 2 || self.run_window > self.window {
            return bad(format!("run window {} outside 2..={}", self.run_window, self.window));
        }
        let max_n = self.window.min(MAX_BASELINE_NGRAM);
        if let Some(n) = self.ngram_orders.iter().find(|&&n| n == 0 || n > max_n) {
            return bad(format!("n-gram order {n} outside 1..={max_n}"));
        }
        self.cv.validate().or_else(|e| bad(e.to_string()))?;
        let t = &self.thresholds;
        for (name, v) in [
            ("alternation_se", t.alternation_se),
            ("run_aversion_se", t.run_aversion_se),
            ("over_balance_se", t.over_balance_se),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("threshold {name} must be a non-negative number"));
            }
        }
        if !(0.0..=1.0).contains(&t.first_flip) {
            return bad("threshold first_flip must lie in [0, 1]".into());
        }
        if t.min_windows < 2 {
            return bad("min_windows must be at least 2".into());
        }
        self.human.validate()?;
        Ok(())
    }

    /// Windows a cell needs before the predictor runs.
    pub fn min_predictor_windows(&self) -> usize {
        self.thresholds.min_windows_per_fold * self.cv.folds
    }
}

// ---------------------------------------------------------------------------
// Report types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insufficient {
    pub reason: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub required: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub available: Option<usize>,
}

/// A statistic, or the reason it could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field<T> {
    Ok(T),
    InsufficientData(Insufficient),
}

impl<T> Field<T> {
    pub fn ok(&self) -> Option<&T> {
        match self {
            Field::Ok(v) => Some(v),
            Field::InsufficientData(_) => None,
        }
    }

    fn short(what: &str, required: usize, available: usize) -> Self {
        Field::InsufficientData(Insufficient {
            reason: format!("needs at least {required} {what}"),
            required: Some(required),
            available: Some(available),
        })
    }

    fn failed(reason: impl ToString) -> Self {
        Field::InsufficientData(Insufficient { reason: reason.to_string(), required: None, available: None })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct YieldCounts {
    pub records: usize,
    pub parsed: usize,
    pub partial: usize,
    pub refusal: usize,
    pub unparseable: usize,
    pub error: usize,
    /// Responses that entered the statistics.
    pub sequences: usize,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionBlock {
    pub heads: u64,
    pub total: u64,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBlock {
    pub window_length: usize,
    pub counts: Vec<u64>,
    pub fraction: Vec<f64>,
    pub expected: Vec<f64>,
    pub delta: Vec<f64>,
    pub mean: f64,
    pub expected_mean: f64,
    pub mean_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub length: usize,
    pub count: u64,
    pub expected: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBlock {
    pub window_length: usize,
    pub window_count: u64,
    pub rows: Vec<RunRow>,
}

impl RunBlock {
    pub fn ratio(&self, length: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.length == length).map(|r| r.ratio)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramRow {
    pub ngram: String,
    pub count: u64,
    pub fraction: f64,
    pub expected: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramBlock {
    pub n: usize,
    pub rows: Vec<NGramRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBlock {
    /// 1-based; the last window position.
    pub target: usize,
    pub vector: Vec<Option<f64>>,
    /// Phi between every pair of positions, row and column 0-based.
    pub matrix: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    pub feature: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorBlock {
    pub lambda: f64,
    pub mse: f64,
    pub fold_mses: Vec<f64>,
    pub windows: usize,
    pub groups: usize,
    pub intercept: f64,
    pub weights: Vec<Weight>,
    /// `mse - 0.25`.
    pub mse_delta: f64,
    /// Against the human floor and the fair-coin MSE; absent when undefined.
    pub gap_ratio: Option<f64>,
    pub path: Vec<PathPoint<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagStatus {
    Set,
    Clear,
    NotEvaluated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub name: String,
    pub status: FlagStatus,
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub rule: String,
}

impl Flag {
    pub fn is_set(&self) -> bool {
        self.status == FlagStatus::Set
    }
}

pub const FLAG_EXCESS_ALTERNATION: &str = "excess_alternation";
pub const FLAG_RUN_AVERSION: &str = "run_aversion";
pub const FLAG_FIRST_FLIP_BIAS: &str = "first_flip_bias";
pub const FLAG_OVER_BALANCE: &str = "over_balance";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub cell: CellKey,
    #[serde(rename = "yield")]
    pub yield_counts: YieldCounts,
    pub heads_proportion: Field<ProportionBlock>,
    pub heads_histogram: Field<HistogramBlock>,
    pub alternation_histogram: Field<HistogramBlock>,
    pub runs: Field<RunBlock>,
    pub ngrams: Field<Vec<NGramBlock>>,
    pub correlation: Field<CorrelationBlock>,
    pub predictor: Field<PredictorBlock>,
    pub flags: Vec<Flag>,
}

impl StatReport {
    pub fn flag(&self, name: &str) -> Option<&Flag> {
        self.flags.iter().find(|f| f.name == name)
    }

    pub fn flags_set(&self) -> Vec<&str> {
        self.flags.iter().filter(|f| f.is_set()).map(|f| f.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionCell {
    pub heads: u64,
    pub total: u64,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatrixColumn {
    pub prompt_id: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub temperature: f64,
    pub cells: Vec<Option<ProportionCell>>,
}

/// Heads proportions laid out temperature × (prompt, model).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProportionMatrix {
    pub columns: Vec<MatrixColumn>,
    pub rows: Vec<MatrixRow>,
}

impl ProportionMatrix {
    pub fn get(&self, model: &str, prompt_id: &str, temperature: f64) -> Option<&ProportionCell> {
        let col = self.columns.iter().position(|c| c.model == model && c.prompt_id == prompt_id)?;
        let row = self.rows.iter().find(|r| r.temperature.total_cmp(&temperature).is_eq())?;
        row.cells[col].as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimacyRow {
    pub model: String,
    pub result: Field<PrimacyResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub model: String,
    pub prompt_id: String,
    pub temperature: f64,
    pub windows: usize,
    pub lambda: Option<f64>,
    pub mse: Option<f64>,
    pub gap_ratio: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossCellTables {
    /// Cells whose responses are single flips.
    pub single_flip: ProportionMatrix,
    /// First flip of multi-flip responses.
    pub first_flip: ProportionMatrix,
    pub primacy: Vec<PrimacyRow>,
    pub mse_series: Vec<MseRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBaselines {
    pub window: BaselineTable,
    pub runs: BaselineTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool_version: String,
    pub feature_set: String,
    /// Digest of the options, including thresholds and human constants.
    pub config_digest: String,
    /// Digest of the records the report was built from.
    pub input_digest: String,
    pub baseline_digest: String,
    pub options: ReportOptions,
    pub baselines: ReportBaselines,
    pub cells: Vec<StatReport>,
    pub tables: CrossCellTables,
}

impl Report {
    pub fn cell(&self, model: &str, prompt_id: &str, temperature: f64) -> Option<&StatReport> {
        let key = CellKey::new(model, prompt_id, temperature);
        self.cells.iter().find(|c| c.cell == key)
    }

    /// SHA-256 of the JSON document.
    pub fn digest(&self) -> String {
        sha256_hex(to_json(self).as_bytes())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_of<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("report types serialize"))
}

// ---------------------------------------------------------------------------
// Building
// ---------------------------------------------------------------------------

fn baseline_for(k: usize, mode: &BaselineMode) -> Result<BaselineTable, ReportError> {
    Ok(match mode {
        BaselineMode::Exact => exact_baseline(k)?,
        BaselineMode::MonteCarlo { samples, seed } => monte_carlo_baseline(k, *samples, *seed)?,
    })
}

/// Null covariances of the per-window statistics the flags test, by start
/// offset difference. Beyond the enumeration bound only the variance is
/// known and windows are treated as independent.
struct NullModel {
    alternations: Vec<f64>,
    balance: Vec<f64>,
    /// Runs of length 3 or more in the run window.
    long_runs: Vec<f64>,
}

impl NullModel {
    fn new(options: &ReportOptions, window: &BaselineTable, runs: &BaselineTable) -> Result<Self, ReportError> {
        let k = options.window;
        let kr = options.run_window;
        let half = k.div_ceil(2) as u32;
        let p_half = window.heads_pmf::<f64>()[half as usize];
        let alternations = if k <= MAX_OVERLAP_WINDOW {
            overlap_covariances(k, |b| bit_alternations(b, k) as f64)?
        } else {
            vec![window.alternation_sd::<f64>().powi(2)]
        };
        let balance = if k <= MAX_OVERLAP_WINDOW {
            overlap_covariances(k, |b| f64::from(u8::from(b.count_ones() == half)))?
        } else {
            vec![p_half * (1.0 - p_half)]
        };
        let long_runs = if kr <= MAX_OVERLAP_WINDOW {
            overlap_covariances(kr, |b| (3..=kr).map(|l| bit_runs_of_length(b, kr, l)).sum::<u32>() as f64)?
        } else {
            // the per-length variances ignore the covariance between lengths
            vec![(3..=kr).map(|l| runs.run_sd::<f64>(l).powi(2)).sum()]
        };
        Ok(Self { alternations, balance, long_runs })
    }
}

/// Standard error of a per-window mean under the fair-coin null, summing the
/// covariance of every pair of windows cut from the same response.
fn null_se(cov: &[f64], windows: &[Window]) -> f64 {
    let mut by_parent: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for w in windows {
        by_parent.entry(w.parent).or_default().push(w.offset);
    }
    let mut var = 0.0;
    for offsets in by_parent.values() {
        for &a in offsets {
            for &b in offsets {
                var += cov.get(a.abs_diff(b)).copied().unwrap_or(0.0);
            }
        }
    }
    var.max(0.0).sqrt() / windows.len() as f64
}

struct CellInput<'a> {
    key: CellKey,
    records: Vec<&'a CollectionRecord>,
}

struct Context<'a> {
    options: &'a ReportOptions,
    window: &'a BaselineTable,
    runs: &'a BaselineTable,
    null: &'a NullModel,
}

pub fn build_report(records: &[CollectionRecord], options: &ReportOptions) -> Result<Report, ReportError> {
    if records.is_empty() {
        return Err(ReportError::NoRecords);
    }
    options.validate()?;
    let window = baseline_for(options.window, &options.baseline)?;
    let runs = baseline_for(options.run_window, &options.baseline)?;
    let null = NullModel::new(options, &window, &runs)?;

    let mut grouped: BTreeMap<CellKey, Vec<&CollectionRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.cell_key()).or_default().push(r);
    }
    let inputs: Vec<CellInput> = grouped.into_iter().map(|(key, records)| CellInput { key, records }).collect();
    let ctx = Context { options, window: &window, runs: &runs, null: &null };
    let built: Vec<(StatReport, usize)> = inputs.par_iter().map(|c| build_cell(c, &ctx)).collect();

    let tables = cross_cell_tables(&built, records, options);
    let cells = built.into_iter().map(|(c, _)| c).collect();
    let baselines = ReportBaselines { window, runs };
    Ok(Report {
        tool_version: TOOL_VERSION.to_string(),
        feature_set: FeatureLayout::VERSION.to_string(),
        config_digest: digest_of(options),
        input_digest: digest_of(&records),
        baseline_digest: digest_of(&baselines),
        options: options.clone(),
        baselines,
        cells,
        tables,
    })
}

fn usable(record: &CollectionRecord, include_partial: bool) -> bool {
    match record.parse_kind {
        RecordKind::Parsed => !record.flips.is_empty(),
        RecordKind::Partial => include_partial && !record.flips.is_empty(),
        _ => false,
    }
}

/// Returns the cell's report and the length of its longest response.
fn build_cell(input: &CellInput, ctx: &Context) -> (StatReport, usize) {
    let options = ctx.options;
    let t = &options.thresholds;
    let mut yc = YieldCounts { records: input.records.len(), ..Default::default() };
    for r in &input.records {
        match r.parse_kind {
            RecordKind::Parsed => yc.parsed += 1,
            RecordKind::Partial => yc.partial += 1,
            RecordKind::Refusal => yc.refusal += 1,
            RecordKind::Unparseable => yc.unparseable += 1,
            RecordKind::Error => yc.error += 1,
        }
    }
    let seqs: Vec<FlipSequence> = input
        .records
        .iter()
        .filter(|r| usable(r, options.include_partial))
        .map(|r| FlipSequence::unlabeled(r.flips.clone()))
        .collect();
    let longest = seqs.iter().map(FlipSequence::len).max().unwrap_or(0);
    let k = options.window;
    let windows: Vec<Window> = pool_windows(&seqs, k).unwrap_or_default();
    yc.sequences = seqs.len();
    yc.windows = windows.len();

    let heads_proportion = match heads_tally(&seqs, 0) {
        Ok(p) if p.total > 0 => {
            Field::Ok(ProportionBlock { heads: p.heads, total: p.total, proportion: p.value::<f64>() })
        }
        Ok(_) | Err(_) => Field::short("responses with flips", 1, 0),
    };

    let enough = windows.len() >= t.min_windows;
    let have = windows.len();

    let heads_histogram = if enough {
        match heads_count_histogram::<f64>(&windows) {
            Ok(h) => Field::Ok(histogram_block(
                k,
                h.counts,
                h.mass,
                h.mean,
                ctx.window.heads_pmf(),
                ctx.window.heads_mean(),
            )),
            Err(e) => Field::failed(e),
        }
    } else {
        Field::short("windows", t.min_windows, have)
    };
    let alternation = if enough {
        match alternation_histogram::<f64>(&windows) {
            Ok(h) => Field::Ok(histogram_block(
                k,
                h.counts,
                h.mass,
                h.mean,
                ctx.window.alternation_pmf(),
                ctx.window.alternation_mean(),
            )),
            Err(e) => Field::failed(e),
        }
    } else {
        Field::short("windows", t.min_windows, have)
    };

    let run_windows: Vec<Window> = windows.iter().map(|w| w.prefix(options.run_window)).collect();
    let runs = if enough {
        match run_length_stats(&run_windows) {
            Ok(s) => {
                let n = s.window_count as f64;
                Field::Ok(RunBlock {
                    window_length: s.window_length,
                    window_count: s.window_count,
                    rows: (1..=s.window_length)
                        .map(|l| {
                            let expected = ctx.runs.expected_runs::<f64>(l) * n;
                            let count = s.count(l);
                            RunRow { length: l, count, expected, ratio: count as f64 / expected }
                        })
                        .collect(),
                })
            }
            Err(e) => Field::failed(e),
        }
    } else {
        Field::short("windows", t.min_windows, have)
    };

    let ngrams = if enough {
        options
            .ngram_orders
            .iter()
            .map(|&n| {
                let table = match options.ngram_mode {
                    NGramMode::Windows => ngram_fractions::<f64>(&windows, n),
                    NGramMode::Whole => ngram_fractions_whole::<f64>(&seqs, n),
                }?;
                let expected = ctx.window.ngram_expected::<f64>(n).unwrap_or_default();
                let rows = table
                    .entries()
                    .zip(expected)
                    .map(|((ngram, count, fraction), expected)| NGramRow {
                        ngram,
                        count,
                        fraction,
                        expected,
                        delta: fraction - expected,
                    })
                    .collect();
                Ok(NGramBlock { n, rows })
            })
            .collect::<Result<Vec<_>, crate::stats::StatsError>>()
            .map_or_else(Field::failed, Field::Ok)
    } else {
        Field::short("windows", t.min_windows, have)
    };

    let correlation = if enough {
        match (positional_correlation::<f64>(&windows, k), correlation_matrix::<f64>(&windows)) {
            (Ok(v), Ok(m)) => Field::Ok(CorrelationBlock { target: v.target, vector: v.entries, matrix: m }),
            (Err(e), _) | (_, Err(e)) => Field::failed(e),
        }
    } else {
        Field::short("windows", t.min_windows, have)
    };

    let needed = options.min_predictor_windows();
    let predictor = if windows.len() < needed {
        Field::short("windows for the predictor", needed, windows.len())
    } else {
        match cross_validated_mse::<f64>(&windows, &options.cv) {
            Ok(cv) => Field::Ok(PredictorBlock {
                lambda: cv.best_lambda,
                mse: cv.mse,
                fold_mses: cv.fold_mses,
                windows: cv.window_count,
                groups: cv.group_count,
                intercept: cv.model.intercept,
                weights: cv
                    .feature_names
                    .iter()
                    .zip(&cv.model.weights)
                    .map(|(f, &w)| Weight { feature: f.clone(), weight: w })
                    .collect(),
                mse_delta: cv.mse - FAIR_MSE_FLOOR,
                gap_ratio: gap_ratio(cv.mse, options.human.min_mse.value, FAIR_MSE_FLOOR).ok(),
                path: cv.path,
            }),
            Err(e) => Field::failed(e),
        }
    };

    let flags = vec![
        excess_alternation_flag(&alternation, &windows, ctx),
        run_aversion_flag(&runs, &run_windows, ctx),
        first_flip_flag(&heads_proportion, t.first_flip),
        over_balance_flag(&heads_histogram, &windows, ctx),
    ];

    let report = StatReport {
        cell: input.key.clone(),
        yield_counts: yc,
        heads_proportion,
        heads_histogram,
        alternation_histogram: alternation,
        runs,
        ngrams,
        correlation,
        predictor,
        flags,
    };
    (report, longest)
}

fn histogram_block(
    k: usize,
    counts: Vec<u64>,
    fraction: Vec<f64>,
    mean: f64,
    expected: Vec<f64>,
    expected_mean: f64,
) -> HistogramBlock {
    let delta = fraction.iter().zip(&expected).map(|(f, e)| f - e).collect();
    HistogramBlock { window_length: k, counts, fraction, expected, delta, mean, expected_mean, mean_delta: mean - expected_mean }
}

fn not_evaluated(name: &str, rule: String) -> Flag {
    Flag { name: name.into(), status: FlagStatus::NotEvaluated, value: None, threshold: None, rule }
}

fn judged(name: &str, set: bool, value: f64, threshold: f64, rule: String) -> Flag {
    Flag {
        name: name.into(),
        status: if set { FlagStatus::Set } else { FlagStatus::Clear },
        value: Some(value),
        threshold: Some(threshold),
        rule,
    }
}

fn excess_alternation_flag(h: &Field<HistogramBlock>, windows: &[Window], ctx: &Context) -> Flag {
    let z = ctx.options.thresholds.alternation_se;
    let rule = format!("mean alternations per window > fair mean + {z} null SE");
    let Some(h) = h.ok() else { return not_evaluated(FLAG_EXCESS_ALTERNATION, rule) };
    let threshold = h.expected_mean + z * null_se(&ctx.null.alternations, windows);
    judged(FLAG_EXCESS_ALTERNATION, h.mean > threshold, h.mean, threshold, rule)
}

fn run_aversion_flag(runs: &Field<RunBlock>, run_windows: &[Window], ctx: &Context) -> Flag {
    let z = ctx.options.thresholds.run_aversion_se;
    let rule = format!(
        "run ratio < 1 for every length L >= 3, and runs of length >= 3 pooled below \
         1 - {z} null SE of their expected count; value is the pooled ratio"
    );
    let Some(block) = runs.ok() else { return not_evaluated(FLAG_RUN_AVERSION, rule) };
    let long: Vec<&RunRow> = block.rows.iter().filter(|r| r.length >= 3).collect();
    if long.is_empty() {
        return not_evaluated(FLAG_RUN_AVERSION, rule);
    }
    let count: u64 = long.iter().map(|r| r.count).sum();
    let expected: f64 = long.iter().map(|r| r.expected).sum();
    let pooled = count as f64 / expected;
    let per_window = expected / block.window_count as f64;
    let threshold = 1.0 - z * null_se(&ctx.null.long_runs, run_windows) / per_window;
    let set = long.iter().all(|r| r.ratio < 1.0) && pooled < threshold;
    judged(FLAG_RUN_AVERSION, set, pooled, threshold, rule)
}

fn first_flip_flag(p: &Field<ProportionBlock>, cutoff: f64) -> Flag {
    let rule = format!("heads proportion at the first position > {cutoff}");
    match p.ok() {
        Some(p) => judged(FLAG_FIRST_FLIP_BIAS, p.proportion > cutoff, p.proportion, cutoff, rule),
        None => not_evaluated(FLAG_FIRST_FLIP_BIAS, rule),
    }
}

fn over_balance_flag(h: &Field<HistogramBlock>, windows: &[Window], ctx: &Context) -> Flag {
    let z = ctx.options.thresholds.over_balance_se;
    let half = ctx.options.window.div_ceil(2);
    let rule = format!("fraction of windows with {half} heads > fair mass + {z} null SE");
    let Some(h) = h.ok() else { return not_evaluated(FLAG_OVER_BALANCE, rule) };
    let threshold = h.expected[half] + z * null_se(&ctx.null.balance, windows);
    judged(FLAG_OVER_BALANCE, h.fraction[half] > threshold, h.fraction[half], threshold, rule)
}

fn cross_cell_tables(
    built: &[(StatReport, usize)],
    records: &[CollectionRecord],
    options: &ReportOptions,
) -> CrossCellTables {
    // a cell whose longest response is one flip is a single-flip cell
    let single: Vec<&StatReport> = built.iter().filter(|(_, l)| *l == 1).map(|(c, _)| c).collect();
    let multi: Vec<&StatReport> = built.iter().filter(|(_, l)| *l > 1).map(|(c, _)| c).collect();

    let mut models: Vec<&str> = records.iter().map(|r| r.model.as_str()).collect();
    models.sort_unstable();
    models.dedup();
    let primacy = models
        .into_iter()
        .filter_map(|model| {
            let of = |order: PromptOrder| {
                records.iter().filter(move |r| {
                    r.model == model && options.prompt_orders.get(&r.prompt_id) == Some(&order)
                })
            };
            if of(PromptOrder::HeadsFirst).next().is_none() && of(PromptOrder::TailsFirst).next().is_none() {
                return None;
            }
            let result = primacy_table(of(PromptOrder::HeadsFirst), of(PromptOrder::TailsFirst))
                .map_or_else(Field::failed, Field::Ok);
            Some(PrimacyRow { model: model.to_string(), result })
        })
        .collect();

    let mse_series = built
        .iter()
        .map(|(c, _)| {
            let p = c.predictor.ok();
            MseRow {
                model: c.cell.model.clone(),
                prompt_id: c.cell.prompt_id.clone(),
                temperature: c.cell.temperature,
                windows: c.yield_counts.windows,
                lambda: p.map(|p| p.lambda),
                mse: p.map(|p| p.mse),
                gap_ratio: p.and_then(|p| p.gap_ratio),
            }
        })
        .collect();

    CrossCellTables { single_flip: proportion_matrix(&single), first_flip: proportion_matrix(&multi), primacy, mse_series }
}

fn proportion_matrix(cells: &[&StatReport]) -> ProportionMatrix {
    let mut columns: Vec<MatrixColumn> = cells
        .iter()
        .map(|c| MatrixColumn { prompt_id: c.cell.prompt_id.clone(), model: c.cell.model.clone() })
        .collect();
    columns.sort();
    columns.dedup();
    let mut temperatures: Vec<f64> = cells.iter().map(|c| c.cell.temperature).collect();
    temperatures.sort_by(f64::total_cmp);
    temperatures.dedup_by(|a, b| a.total_cmp(b).is_eq());
    let rows = temperatures
        .into_iter()
        .map(|temperature| MatrixRow {
            temperature,
            cells: columns
                .iter()
                .map(|col| {
                    let key = CellKey::new(&col.model, &col.prompt_id, temperature);
                    let cell = cells.iter().find(|c| c.cell == key)?;
                    let p = cell.heads_proportion.ok()?;
                    Some(ProportionCell { heads: p.heads, total: p.total, proportion: p.proportion })
                })
                .collect(),
        })
        .collect();
    ProportionMatrix { columns, rows }
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Json,
    CsvBundle,
}

/// Pretty-printed with a trailing newline; field order follows the type
/// definitions, so identical reports give identical bytes.
pub fn to_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report types serialize");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> Result<Report, ReportError> {
    Ok(serde_json::from_str(text)?)
}

/// Writes the document to `path`, or the CSV bundle into directory `path`.
/// Returns the files written.
pub fn emit(report: &Report, format: OutputFormat, path: &Path) -> Result<Vec<PathBuf>, ReportError> {
    match format {
        OutputFormat::Json => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, to_json(report))?;
            Ok(vec![path.to_path_buf()])
        }
        OutputFormat::CsvBundle => write_csv_bundle(report, path),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Directory name for a cell: its position plus a filesystem-safe label.
pub fn cell_dir_name(index: usize, key: &CellKey) -> String {
    let label: String = format!("{}_{}_t{}", key.model, key.prompt_id, key.temperature)
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c.to_ascii_lowercase() } else { '_' })
        .collect();
    format!("{index:03}_{label}")
}

struct Bundle {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl Bundle {
    fn table(&mut self, rel: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), ReportError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        self.written.push(path);
        Ok(())
    }
}

fn matrix_rows(m: &ProportionMatrix) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["temperature".to_string()];
    header.extend(m.columns.iter().map(|c| format!("{} | {}", c.prompt_id, c.model)));
    let rows = m
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![format!("{:.1}", r.temperature)];
            row.extend(r.cells.iter().map(|c| c.as_ref().map(|c| format!("{:.2}", c.proportion)).unwrap_or_default()));
            row
        })
        .collect();
    (header, rows)
}

fn histogram_rows(h: &HistogramBlock) -> Vec<Vec<String>> {
    (0..h.counts.len())
        .map(|x| {
            vec![
                x.to_string(),
                h.counts[x].to_string(),
                h.fraction[x].to_string(),
                h.expected[x].to_string(),
                h.delta[x].to_string(),
            ]
        })
        .collect()
}

/// One CSV per table or figure analog. Top-level files hold cross-cell
/// tables; `cells/<nnn>_<label>/` holds each cell's statistic tables.
pub fn write_csv_bundle(report: &Report, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut b = Bundle { root: dir.to_path_buf(), written: Vec::new() };
    let key_cols = |k: &CellKey| vec![k.model.clone(), k.prompt_id.clone(), k.temperature.to_string()];

    b.table(
        "cells.csv",
        &["cell_dir", "model", "prompt_id", "temperature", "records", "parsed", "partial", "refusal", "unparseable", "error", "sequences", "windows"],
        report
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let y = &c.yield_counts;
                let mut row = vec![cell_dir_name(i, &c.cell)];
                row.extend(key_cols(&c.cell));
                row.extend(
                    [y.records, y.parsed, y.partial, y.refusal, y.unparseable, y.error, y.sequences, y.windows]
                        .map(|v| v.to_string()),
                );
                row
            })
            .collect(),
    )?;

    for (name, m) in [("single_flip_matrix.csv", &report.tables.single_flip), ("first_flip_matrix.csv", &report.tables.first_flip)] {
        let (header, rows) = matrix_rows(m);
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        b.table(name, &header, rows)?;
    }

    b.table(
        "proportions.csv",
        &["model", "prompt_id", "temperature", "heads", "total", "proportion"],
        report
            .cells
            .iter()
            .filter_map(|c| {
                let p = c.heads_proportion.ok()?;
                let mut row = key_cols(&c.cell);
                row.extend([p.heads.to_string(), p.total.to_string(), p.proportion.to_string()]);
                Some(row)
            })
            .collect(),
    )?;

    b.table(
        "primacy.csv",
        &["model", "prompt", "heads_first", "tails_first"],
        report
            .tables
            .primacy
            .iter()
            .filter_map(|p| p.result.ok().map(|r| (p, r)))
            .flat_map(|(p, r)| {
                [("heads_first", r.table.heads_first_prompt), ("tails_first", r.table.tails_first_prompt)]
                    .map(|(prompt, row)| vec![p.model.clone(), prompt.into(), row[0].to_string(), row[1].to_string()])
            })
            .collect(),
    )?;
    b.table(
        "primacy_tests.csv",
        &["model", "chi_square", "p_value", "significant", "low_expected_cells", "primacy_effect", "status"],
        report
            .tables
            .primacy
            .iter()
            .map(|p| match &p.result {
                Field::Ok(r) => vec![
                    p.model.clone(),
                    opt(r.chi_square),
                    opt(r.p_value),
                    r.significant.to_string(),
                    r.low_expected_cells.to_string(),
                    r.primacy_effect.to_string(),
                    "ok".into(),
                ],
                Field::InsufficientData(i) => {
                    vec![p.model.clone(), String::new(), String::new(), String::new(), String::new(), String::new(), i.reason.clone()]
                }
            })
            .collect(),
    )?;

    b.table(
        "mse_series.csv",
        &["model", "prompt_id", "temperature", "windows", "lambda", "mse", "gap_ratio"],
        report
            .tables
            .mse_series
            .iter()
            .map(|r| {
                vec![
                    r.model.clone(),
                    r.prompt_id.clone(),
                    r.temperature.to_string(),
                    r.windows.to_string(),
                    opt(r.lambda),
                    opt(r.mse),
                    opt(r.gap_ratio),
                ]
            })
            .collect(),
    )?;

    b.table(
        "flags.csv",
        &["model", "prompt_id", "temperature", "flag", "status", "value", "threshold", "rule"],
        report
            .cells
            .iter()
            .flat_map(|c| {
                c.flags.iter().map(|f| {
                    let mut row = key_cols(&c.cell);
                    let status = match f.status {
                        FlagStatus::Set => "set",
                        FlagStatus::Clear => "clear",
                        FlagStatus::NotEvaluated => "not_evaluated",
                    };
                    row.extend([f.name.clone(), status.into(), opt(f.value), opt(f.threshold), f.rule.clone()]);
                    row
                })
            })
            .collect(),
    )?;

    b.table(
        "insufficient.csv",
        &["model", "prompt_id", "temperature", "statistic", "reason", "required", "available"],
        report
            .cells
            .iter()
            .flat_map(|c| {
                let fields: [(&str, Option<&Insufficient>); 8] = [
                    ("heads_proportion", insufficient(&c.heads_proportion)),
                    ("heads_histogram", insufficient(&c.heads_histogram)),
                    ("alternation_histogram", insufficient(&c.alternation_histogram)),
                    ("runs", insufficient(&c.runs)),
                    ("ngrams", insufficient(&c.ngrams)),
                    ("correlation", insufficient(&c.correlation)),
                    ("predictor", insufficient(&c.predictor)),
                    ("", None),
                ];
                fields
                    .into_iter()
                    .filter_map(|(name, i)| {
                        let i = i?;
                        let mut row = key_cols(&c.cell);
                        row.extend([
                            name.to_string(),
                            i.reason.clone(),
                            i.required.map(|v| v.to_string()).unwrap_or_default(),
                            i.available.map(|v| v.to_string()).unwrap_or_default(),
                        ]);
                        Some(row)
                    })
                    .collect::<Vec<_>>()
            })
            .collect(),
    )?;

    for (i, c) in report.cells.iter().enumerate() {
        let d = format!("cells/{}", cell_dir_name(i, &c.cell));
        if let Some(h) = c.heads_histogram.ok() {
            b.table(&format!("{d}/heads_histogram.csv"), &["heads", "count", "fraction", "expected", "delta"], histogram_rows(h))?;
        }
        if let Some(h) = c.alternation_histogram.ok() {
            b.table(
                &format!("{d}/alternation_histogram.csv"),
                &["alternations", "count", "fraction", "expected", "delta"],
                histogram_rows(h),
            )?;
        }
        if let Some(r) = c.runs.ok() {
            b.table(
                &format!("{d}/run_ratios.csv"),
                &["run_length", "count", "expected", "ratio"],
                r.rows
                    .iter()
                    .map(|r| vec![r.length.to_string(), r.count.to_string(), r.expected.to_string(), r.ratio.to_string()])
                    .collect(),
            )?;
        }
        if let Some(blocks) = c.ngrams.ok() {
            b.table(
                &format!("{d}/ngrams.csv"),
                &["ngram", "count", "fraction", "expected", "delta"],
                blocks
                    .iter()
                    .flat_map(|blk| &blk.rows)
                    .map(|r| {
                        vec![
                            r.ngram.clone(),
                            r.count.to_string(),
                            r.fraction.to_string(),
                            r.expected.to_string(),
                            r.delta.to_string(),
                        ]
                    })
                    .collect(),
            )?;
        }
        if let Some(corr) = c.correlation.ok() {
            b.table(
                &format!("{d}/correlation.csv"),
                &["position", "phi"],
                corr.vector.iter().enumerate().map(|(i, v)| vec![(i + 1).to_string(), opt(*v)]).collect(),
            )?;
            let mut header = vec!["position".to_string()];
            header.extend((1..=corr.matrix.len()).map(|j| j.to_string()));
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            b.table(
                &format!("{d}/correlation_matrix.csv"),
                &header,
                corr.matrix
                    .iter()
                    .enumerate()
                    .map(|(i, row)| {
                        let mut out = vec![(i + 1).to_string()];
                        out.extend(row.iter().map(|v| opt(*v)));
                        out
                    })
                    .collect(),
            )?;
        }
        if let Some(p) = c.predictor.ok() {
            b.table(
                &format!("{d}/predictor_path.csv"),
                &["lambda", "mean_mse"],
                p.path.iter().map(|pt| vec![pt.lambda.to_string(), pt.mean_mse.to_string()]).collect(),
            )?;
            b.table(
                &format!("{d}/predictor_weights.csv"),
                &["feature", "weight"],
                std::iter::once(vec!["intercept".to_string(), p.intercept.to_string()])
                    .chain(p.weights.iter().map(|w| vec![w.feature.clone(), w.weight.to_string()]))
                    .collect(),
            )?;
        }
    }
    Ok(b.written)
}

fn insufficient<T>(f: &Field<T>) -> Option<&Insufficient> {
    match f {
        Field::Ok(_) => None,
        Field::InsufficientData(i) => Some(i),
    }
}

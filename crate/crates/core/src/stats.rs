//! The descriptive battery: heads proportions, heads-count and alternation
//! histograms, maximal runs, n-grams, positional correlation and the
//! instruction-order contingency table.
//!
//! Every statistic is an exact integer tally first; fractions are derived
//! from the tallies at the end, so pooling order never changes a result.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::baselines::BaselineTable;
use crate::collector::{CollectionRecord, PromptOrder, RecordKind};
use crate::scalar::Scalar;
use crate::sequence::{Flip, FlipSequence, Window};

/// Upper 5% point of the chi-square distribution with one degree of freedom.
pub const CHI2_CRITICAL_1DF_05: f64 = 3.841_458_820_694_124;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("no input")]
    Empty,
    #[error("position {position} is out of range for replicates {replicates:?}")]
    OutOfRange { position: usize, replicates: Vec<usize> },
    #[error("windows have mixed lengths ({0} and {1})")]
    MixedLength(usize, usize),
    #[error("window length {got} is below the minimum {min}")]
    WindowTooShort { got: usize, min: usize },
    #[error("n-gram order {n} outside 1..={k}")]
    NGramOrder { n: usize, k: usize },
    #[error("window length mismatch: statistics use {stats}, baseline uses {baseline}")]
    BaselineMismatch { stats: usize, baseline: usize },
    #[error("target position {target} outside 1..={k}")]
    Target { target: usize, k: usize },
    #[error("need at least 2 windows, got {0}")]
    TooFewWindows(usize),
    #[error("no parsed records for the {0} prompt")]
    InsufficientData(PromptOrder),
}

/// One experimental cell: model × prompt × temperature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub prompt_id: String,
    pub temperature: f64,
}

impl CellKey {
    pub fn new(model: &str, prompt_id: &str, temperature: f64) -> Self {
        Self { model: model.into(), prompt_id: prompt_id.into(), temperature }
    }
}

impl PartialEq for CellKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for CellKey {}

impl PartialOrd for CellKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CellKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.model
            .cmp(&other.model)
            .then_with(|| self.prompt_id.cmp(&other.prompt_id))
            .then_with(|| self.temperature.total_cmp(&other.temperature))
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} / {} / t={}", self.model, self.prompt_id, self.temperature)
    }
}

fn common_length(windows: &[Window]) -> Result<usize, StatsError> {
    let first = windows.first().ok_or(StatsError::Empty)?.len();
    match windows.iter().find(|w| w.len() != first) {
        Some(w) => Err(StatsError::MixedLength(first, w.len())),
        None => Ok(first),
    }
}

// ---------------------------------------------------------------------------
// Per-window primitives
// ---------------------------------------------------------------------------

pub fn heads_count(flips: &[Flip]) -> usize {
    flips.iter().filter(|f| f.is_heads()).count()
}

/// Adjacent pairs with different outcomes.
pub fn alternations(flips: &[Flip]) -> usize {
    flips.windows(2).filter(|p| p[0] != p[1]).count()
}

/// Lengths of the maximal same-outcome blocks, in order.
pub fn run_lengths(flips: &[Flip]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut iter = flips.iter();
    let Some(mut prev) = iter.next() else { return out };
    let mut len = 1;
    for f in iter {
        if f == prev {
            len += 1;
        } else {
            out.push(len);
            len = 1;
            prev = f;
        }
    }
    out.push(len);
    out
}

/// Length of the block the sequence ends in.
pub fn terminal_run_length(flips: &[Flip]) -> usize {
    match flips.last() {
        None => 0,
        Some(last) => flips.iter().rev().take_while(|f| *f == last).count(),
    }
}

/// Block length → number of maximal blocks of that length.
pub fn count_maximal_runs(window: &Window) -> BTreeMap<usize, u64> {
    let mut out = BTreeMap::new();
    for l in run_lengths(&window.flips) {
        *out.entry(l).or_insert(0) += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Heads proportion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proportion {
    pub heads: u64,
    pub total: u64,
}

impl Proportion {
    pub fn value<F: Scalar>(&self) -> F {
        F::ratio(self.heads, self.total)
    }
}

/// Fraction of sequences showing heads at 0-based `position`.
pub fn heads_proportion<F: Scalar>(seqs: &[FlipSequence], position: usize) -> Result<F, StatsError> {
    heads_tally(seqs, position).map(|p| p.value())
}

pub fn heads_tally(seqs: &[FlipSequence], position: usize) -> Result<Proportion, StatsError> {
    if seqs.is_empty() {
        return Err(StatsError::Empty);
    }
    let short: Vec<usize> = seqs.iter().filter(|s| s.len() <= position).map(|s| s.meta.replicate).collect();
    if !short.is_empty() {
        return Err(StatsError::OutOfRange { position, replicates: short });
    }
    let heads = seqs.iter().filter(|s| s.flips[position].is_heads()).count() as u64;
    Ok(Proportion { heads, total: seqs.len() as u64 })
}

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsCountHistogram<F> {
    pub window_length: usize,
    /// Index `x`: windows with `x` heads.
    pub counts: Vec<u64>,
    pub mass: Vec<F>,
    pub mean: F,
}

pub fn heads_count_histogram<F: Scalar>(windows: &[Window]) -> Result<HeadsCountHistogram<F>, StatsError> {
    let k = common_length(windows)?;
    let mut counts = vec![0u64; k + 1];
    for w in windows {
        counts[heads_count(&w.flips)] += 1;
    }
    let (mass, mean) = normalize(&counts);
    Ok(HeadsCountHistogram { window_length: k, counts, mass, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlternationHistogram<F> {
    pub window_length: usize,
    /// Index `a`: windows with `a` alternations, `a` in `0..k`.
    pub counts: Vec<u64>,
    pub mass: Vec<F>,
    pub mean: F,
}

pub fn alternation_histogram<F: Scalar>(windows: &[Window]) -> Result<AlternationHistogram<F>, StatsError> {
    let k = common_length(windows)?;
    if k < 2 {
        return Err(StatsError::WindowTooShort { got: k, min: 2 });
    }
    let mut counts = vec![0u64; k];
    for w in windows {
        counts[alternations(&w.flips)] += 1;
    }
    let (mass, mean) = normalize(&counts);
    Ok(AlternationHistogram { window_length: k, counts, mass, mean })
}

fn normalize<F: Scalar>(counts: &[u64]) -> (Vec<F>, F) {
    let total: u64 = counts.iter().sum();
    let weighted: u64 = counts.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    (counts.iter().map(|&c| F::ratio(c, total)).collect(), F::ratio(weighted, total))
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLengthStats {
    /// Run length → maximal runs of exactly that length, over all windows.
    pub counts: BTreeMap<usize, u64>,
    pub window_count: u64,
    pub window_length: usize,
}

impl RunLengthStats {
    pub fn count(&self, len: usize) -> u64 {
        self.counts.get(&len).copied().unwrap_or(0)
    }
}

pub fn run_length_stats(windows: &[Window]) -> Result<RunLengthStats, StatsError> {
    let k = common_length(windows)?;
    let mut counts = BTreeMap::new();
    for w in windows {
        for l in run_lengths(&w.flips) {
            *counts.entry(l).or_insert(0) += 1;
        }
    }
    Ok(RunLengthStats { counts, window_count: windows.len() as u64, window_length: k })
}

/// Realized ÷ expected maximal-run counts for `L` in `2..=k`, where expected is
/// the per-window fair-coin expectation times the number of windows.
pub fn run_ratio<F: Scalar>(stats: &RunLengthStats, baseline: &BaselineTable) -> Result<BTreeMap<usize, F>, StatsError> {
    if stats.window_length != baseline.window_length {
        return Err(StatsError::BaselineMismatch { stats: stats.window_length, baseline: baseline.window_length });
    }
    let windows = F::from_count(stats.window_count);
    Ok((2..=stats.window_length)
        .map(|l| {
            let expected = baseline.expected_runs::<F>(l) * windows;
            (l, F::from_count(stats.count(l)) / expected)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// N-grams
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramTable<F> {
    pub n: usize,
    /// Indexed by tuple, first flip most significant, heads = 1.
    pub counts: Vec<u64>,
    pub fractions: Vec<F>,
}

impl<F: Scalar> NGramTable<F> {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tuple `index` as a bit string, e.g. `"011"`.
    pub fn key(&self, index: usize) -> String {
        ngram_key(index, self.n)
    }

    pub fn fraction_of(&self, key: &str) -> Option<F> {
        if key.len() != self.n {
            return None;
        }
        usize::from_str_radix(key, 2).ok().and_then(|i| self.fractions.get(i).copied())
    }

    pub fn entries(&self) -> impl Iterator<Item = (String, u64, F)> + '_ {
        (0..self.counts.len()).map(move |i| (self.key(i), self.counts[i], self.fractions[i]))
    }
}

pub fn ngram_key(index: usize, n: usize) -> String {
    format!("{index:0n$b}")
}

fn tally_ngrams(flips: &[Flip], n: usize, counts: &mut [u64]) {
    for gram in flips.windows(n) {
        let idx = gram.iter().fold(0usize, |acc, f| (acc << 1) | f.bit() as usize);
        counts[idx] += 1;
    }
}

fn finish_ngrams<F: Scalar>(n: usize, counts: Vec<u64>) -> NGramTable<F> {
    let total: u64 = counts.iter().sum();
    let fractions = counts.iter().map(|&c| F::ratio(c, total)).collect();
    NGramTable { n, counts, fractions }
}

/// Overlapping `n`-grams inside each window (never across window boundaries).
pub fn ngram_fractions<F: Scalar>(windows: &[Window], n: usize) -> Result<NGramTable<F>, StatsError> {
    let k = common_length(windows)?;
    if n == 0 || n > k {
        return Err(StatsError::NGramOrder { n, k });
    }
    let mut counts = vec![0u64; 1 << n];
    for w in windows {
        tally_ngrams(&w.flips, n, &mut counts);
    }
    Ok(finish_ngrams(n, counts))
}

/// Overlapping `n`-grams over whole sequences; sequences shorter than `n`
/// contribute nothing.
pub fn ngram_fractions_whole<F: Scalar>(seqs: &[FlipSequence], n: usize) -> Result<NGramTable<F>, StatsError> {
    if seqs.is_empty() {
        return Err(StatsError::Empty);
    }
    let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    if n == 0 || n > longest {
        return Err(StatsError::NGramOrder { n, k: longest });
    }
    let mut counts = vec![0u64; 1 << n];
    for s in seqs {
        tally_ngrams(&s.flips, n, &mut counts);
    }
    Ok(finish_ngrams(n, counts))
}

// ---------------------------------------------------------------------------
// Correlation
// ---------------------------------------------------------------------------

/// Phi coefficient from a 2×2 table of joint counts
/// (`n11`: both heads, `n10`: first heads only, ...). `None` when either
/// variable is constant.
pub fn phi_from_counts<F: Scalar>(n11: u64, n10: u64, n01: u64, n00: u64) -> Option<F> {
    let a1 = n11 + n10;
    let a0 = n01 + n00;
    let b1 = n11 + n01;
    let b0 = n10 + n00;
    if a1 == 0 || a0 == 0 || b1 == 0 || b0 == 0 {
        return None;
    }
    let num = n11 as i128 * n00 as i128 - n10 as i128 * n01 as i128;
    let den = (F::from_count(a1) * F::from_count(a0)).sqrt() * (F::from_count(b1) * F::from_count(b0)).sqrt();
    let phi = F::from_f64_lossy(num as f64) / den;
    Some(phi.max(-F::one()).min(F::one()))
}

fn column_phi<F: Scalar>(windows: &[Window], i: usize, j: usize) -> Option<F> {
    let (mut n11, mut n10, mut n01, mut n00) = (0u64, 0u64, 0u64, 0u64);
    for w in windows {
        match (w.flips[i].is_heads(), w.flips[j].is_heads()) {
            (true, true) => n11 += 1,
            (true, false) => n10 += 1,
            (false, true) => n01 += 1,
            (false, false) => n00 += 1,
        }
    }
    if i == j {
        // exact 1 rather than a rounded quotient
        return (n11 > 0 && n00 > 0).then(F::one);
    }
    phi_from_counts(n11, n10, n01, n00)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationVector<F> {
    /// 1-based.
    pub target: usize,
    /// Entry `i - 1` is phi between position `i` and the target; `None` is undefined.
    pub entries: Vec<Option<F>>,
}

impl<F: Scalar> CorrelationVector<F> {
    /// Phi at 1-based position `i`.
    pub fn at(&self, i: usize) -> Option<F> {
        self.entries.get(i.checked_sub(1)?).copied().flatten()
    }
}

/// Phi between every position and the 1-based `target` column across windows.
pub fn positional_correlation<F: Scalar>(windows: &[Window], target: usize) -> Result<CorrelationVector<F>, StatsError> {
    if windows.len() < 2 {
        return Err(StatsError::TooFewWindows(windows.len()));
    }
    let k = common_length(windows)?;
    if target == 0 || target > k {
        return Err(StatsError::Target { target, k });
    }
    let entries = (0..k).map(|i| column_phi(windows, i, target - 1)).collect();
    Ok(CorrelationVector { target, entries })
}

/// Phi for every pair of positions; row `i`, column `j` (0-based).
pub fn correlation_matrix<F: Scalar>(windows: &[Window]) -> Result<Vec<Vec<Option<F>>>, StatsError> {
    if windows.len() < 2 {
        return Err(StatsError::TooFewWindows(windows.len()));
    }
    let k = common_length(windows)?;
    let mut m = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i..k {
            let v = column_phi(windows, i, j);
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Instruction order
// ---------------------------------------------------------------------------

/// First response by instruction order. Each row is
/// `[heads-first responses, tails-first responses]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable2x2 {
    pub heads_first_prompt: [u64; 2],
    pub tails_first_prompt: [u64; 2],
}

impl ContingencyTable2x2 {
    pub fn new(heads_first_prompt: [u64; 2], tails_first_prompt: [u64; 2]) -> Self {
        Self { heads_first_prompt, tails_first_prompt }
    }

    fn cells(&self) -> [[u64; 2]; 2] {
        [self.heads_first_prompt, self.tails_first_prompt]
    }

    pub fn total(&self) -> u64 {
        self.cells().iter().flatten().sum()
    }

    /// Expected counts under independence.
    pub fn expected(&self) -> [[f64; 2]; 2] {
        let c = self.cells();
        let n = self.total() as f64;
        let rows = [c[0][0] + c[0][1], c[1][0] + c[1][1]];
        let cols = [c[0][0] + c[1][0], c[0][1] + c[1][1]];
        let mut e = [[0.0; 2]; 2];
        for r in 0..2 {
            for col in 0..2 {
                e[r][col] = rows[r] as f64 * cols[col] as f64 / n;
            }
        }
        e
    }

    /// Pearson statistic without continuity correction; `None` when a row or
    /// column is empty.
    pub fn chi_square(&self) -> Option<f64> {
        let c = self.cells();
        let e = self.expected();
        if e.iter().flatten().any(|&x| x == 0.0 || !x.is_finite()) {
            return None;
        }
        let mut chi = 0.0;
        for r in 0..2 {
            for col in 0..2 {
                let d = c[r][col] as f64 - e[r][col];
                chi += d * d / e[r][col];
            }
        }
        Some(chi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimacyResult {
    pub table: ContingencyTable2x2,
    pub chi_square: Option<f64>,
    pub p_value: Option<f64>,
    /// `chi_square > CHI2_CRITICAL_1DF_05`.
    pub significant: bool,
    /// Some expected cell count is below 5.
    pub low_expected_cells: bool,
    pub heads_first_rate_heads_prompt: f64,
    pub heads_first_rate_tails_prompt: f64,
    /// Significant, and heads-first more common under the heads-first prompt.
    pub primacy_effect: bool,
}

pub fn primacy_from_table(table: ContingencyTable2x2) -> PrimacyResult {
    let chi_square = table.chi_square();
    let p_value = chi_square.map(|x| ChiSquared::new(1.0).expect("1 dof").sf(x));
    let significant = chi_square.is_some_and(|x| x > CHI2_CRITICAL_1DF_05);
    let low_expected_cells = table.expected().iter().flatten().any(|&e| e < 5.0);
    let rate = |row: [u64; 2]| row[0] as f64 / (row[0] + row[1]) as f64;
    let hh = rate(table.heads_first_prompt);
    let th = rate(table.tails_first_prompt);
    PrimacyResult {
        table,
        chi_square,
        p_value,
        significant,
        low_expected_cells,
        heads_first_rate_heads_prompt: hh,
        heads_first_rate_tails_prompt: th,
        primacy_effect: significant && hh > th,
    }
}

/// 2×2 table of first flips for the two instruction orders. Only `Parsed`
/// records count.
pub fn primacy_table<'a>(
    heads_first_prompt: impl IntoIterator<Item = &'a CollectionRecord>,
    tails_first_prompt: impl IntoIterator<Item = &'a CollectionRecord>,
) -> Result<PrimacyResult, StatsError> {
    fn row<'a>(records: impl IntoIterator<Item = &'a CollectionRecord>) -> [u64; 2] {
        let mut r = [0u64; 2];
        for rec in records {
            if rec.parse_kind == RecordKind::Parsed {
                if let Some(first) = rec.flips.first() {
                    r[if first.is_heads() { 0 } else { 1 }] += 1;
                }
            }
        }
        r
    }
    let hf = row(heads_first_prompt);
    let tf = row(tails_first_prompt);
    if hf == [0, 0] {
        return Err(StatsError::InsufficientData(PromptOrder::HeadsFirst));
    }
    if tf == [0, 0] {
        return Err(StatsError::InsufficientData(PromptOrder::TailsFirst));
    }
    Ok(primacy_from_table(ContingencyTable2x2::new(hf, tf)))
}

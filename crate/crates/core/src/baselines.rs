//! Fair-coin reference values for every battery statistic, plus the registry
//! of published human-bias constants.
//!
//! Exact tables enumerate all `2^k` windows with integer counters; a window is
//! the `k` low bits of an integer read most-significant first, so bit `k-1` is
//! the first flip and heads is 1. Monte Carlo tables use the same counters fed
//! from the seeded generator.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::XorShift64Star;
use crate::scalar::Scalar;

/// Largest window length enumerated exactly.
pub const MAX_EXACT_WINDOW: usize = 24;
/// N-gram orders kept in a baseline run from 1 up to `min(k, MAX_BASELINE_NGRAM)`.
pub const MAX_BASELINE_NGRAM: usize = 4;
pub const MIN_MONTE_CARLO_SAMPLES: u64 = 1000;
/// Squared error of the best constant predictor of a fair coin.
pub const FAIR_MSE_FLOOR: f64 = 0.25;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("window length {0} outside exact enumeration bound 1..={MAX_EXACT_WINDOW}; use monte_carlo_baseline")]
    OutOfEnumerationBound(usize),
    #[error("window length {0} outside 1..=64")]
    BadWindow(usize),
    #[error("need at least {MIN_MONTE_CARLO_SAMPLES} samples, got {0}")]
    TooFewSamples(u64),
    #[error("heads probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("reading human baselines: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed human baseline document: {0}")]
    Malformed(String),
    #[error("unknown human baseline constant {0:?}")]
    UnknownConstant(String),
    #[error("human baseline {key} = {value} is out of range {range}")]
    OutOfRange { key: String, value: f64, range: &'static str },
    #[error("human baseline {0} needs a citation")]
    MissingCitation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BaselineSource {
    Exact,
    MonteCarlo { samples: u64, seed: u64, p_heads: f64 },
}

/// Integer tallies over a population of windows. Every derived quantity is a
/// ratio of these counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    pub window_length: usize,
    pub source: BaselineSource,
    /// Windows enumerated or sampled.
    pub total: u64,
    /// Index `x`: windows with `x` heads.
    pub heads_counts: Vec<u64>,
    /// Index `a`: windows with `a` alternations.
    pub alternation_counts: Vec<u64>,
    /// Index `L` (0 unused): maximal runs of length exactly `L`, summed over windows.
    pub run_totals: Vec<u64>,
    /// Index `L`: sum over windows of the squared per-window count.
    pub run_square_totals: Vec<u64>,
    /// Index `n - 1`, then tuple index (first flip most significant).
    pub ngram_counts: Vec<Vec<u64>>,
    pub ngram_square_totals: Vec<Vec<u64>>,
}

#[derive(Debug, Clone)]
struct Tally {
    k: usize,
    total: u64,
    heads: Vec<u64>,
    alternations: Vec<u64>,
    runs: Vec<u64>,
    runs_sq: Vec<u64>,
    ngrams: Vec<Vec<u64>>,
    ngrams_sq: Vec<Vec<u64>>,
    // scratch
    window_runs: Vec<u64>,
    window_ngrams: Vec<u64>,
}

impl Tally {
    fn new(k: usize) -> Self {
        let max_n = k.min(MAX_BASELINE_NGRAM);
        Self {
            k,
            total: 0,
            heads: vec![0; k + 1],
            alternations: vec![0; k],
            runs: vec![0; k + 1],
            runs_sq: vec![0; k + 1],
            ngrams: (1..=max_n).map(|n| vec![0; 1 << n]).collect(),
            ngrams_sq: (1..=max_n).map(|n| vec![0; 1 << n]).collect(),
            window_runs: vec![0; k + 1],
            window_ngrams: vec![0; 1 << max_n],
        }
    }

    fn add(&mut self, bits: u64) {
        let k = self.k;
        let bits = bits & low_mask(k);
        self.total += 1;
        self.heads[bits.count_ones() as usize] += 1;
        let alt = ((bits ^ (bits >> 1)) & low_mask(k - 1)).count_ones() as usize;
        self.alternations[alt] += 1;

        self.window_runs.iter_mut().for_each(|c| *c = 0);
        let mut run = 1usize;
        for i in 1..k {
            if (bits >> i) & 1 == (bits >> (i - 1)) & 1 {
                run += 1;
            } else {
                self.window_runs[run] += 1;
                run = 1;
            }
        }
        self.window_runs[run] += 1;
        for (l, &c) in self.window_runs.iter().enumerate().skip(1) {
            self.runs[l] += c;
            self.runs_sq[l] += c * c;
        }

        for (ni, (counts, sq)) in self.ngrams.iter_mut().zip(self.ngrams_sq.iter_mut()).enumerate() {
            let n = ni + 1;
            let scratch = &mut self.window_ngrams[..1 << n];
            scratch.iter_mut().for_each(|c| *c = 0);
            for start in 0..=k - n {
                let idx = (bits >> (k - n - start)) & low_mask(n);
                scratch[idx as usize] += 1;
            }
            for (t, &c) in scratch.iter().enumerate() {
                counts[t] += c;
                sq[t] += c * c;
            }
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        fn add_into(a: &mut [u64], b: &[u64]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.total += other.total;
        add_into(&mut self.heads, &other.heads);
        add_into(&mut self.alternations, &other.alternations);
        add_into(&mut self.runs, &other.runs);
        add_into(&mut self.runs_sq, &other.runs_sq);
        for (a, b) in self.ngrams.iter_mut().zip(&other.ngrams) {
            add_into(a, b);
        }
        for (a, b) in self.ngrams_sq.iter_mut().zip(&other.ngrams_sq) {
            add_into(a, b);
        }
        self
    }

    fn into_table(self, source: BaselineSource) -> BaselineTable {
        BaselineTable {
            window_length: self.k,
            source,
            total: self.total,
            heads_counts: self.heads,
            alternation_counts: self.alternations,
            run_totals: self.runs,
            run_square_totals: self.runs_sq,
            ngram_counts: self.ngrams,
            ngram_square_totals: self.ngrams_sq,
        }
    }
}

#[inline]
fn low_mask(n: usize) -> u64 {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// Enumerates all `2^k` windows. Partitioned across threads; the integer
/// merge makes the result independent of the partitioning.
pub fn exact_baseline(k: usize) -> Result<BaselineTable, BaselineError> {
    if !(1..=MAX_EXACT_WINDOW).contains(&k) {
        return Err(BaselineError::OutOfEnumerationBound(k));
    }
    let tally = (0..1u64 << k)
        .into_par_iter()
        .fold(
            || Tally::new(k),
            |mut t, bits| {
                t.add(bits);
                t
            },
        )
        .reduce(|| Tally::new(k), Tally::merge);
    Ok(tally.into_table(BaselineSource::Exact))
}

pub fn monte_carlo_baseline(k: usize, samples: u64, seed: u64) -> Result<BaselineTable, BaselineError> {
    monte_carlo_baseline_with(k, samples, seed, 0.5)
}

/// Seeded sampling of `samples` windows with `P(H) = p_heads`. Only the fair
/// case is a baseline; other `p_heads` exist for validating generators.
pub fn monte_carlo_baseline_with(
    k: usize,
    samples: u64,
    seed: u64,
    p_heads: f64,
) -> Result<BaselineTable, BaselineError> {
    if !(1..=64).contains(&k) {
        return Err(BaselineError::BadWindow(k));
    }
    if samples < MIN_MONTE_CARLO_SAMPLES {
        return Err(BaselineError::TooFewSamples(samples));
    }
    if !(0.0..=1.0).contains(&p_heads) {
        return Err(BaselineError::BadProbability(p_heads));
    }
    let mut rng = XorShift64Star::new(seed);
    let mut tally = Tally::new(k);
    for _ in 0..samples {
        let mut bits = 0u64;
        for _ in 0..k {
            bits = (bits << 1) | rng.bernoulli(p_heads) as u64;
        }
        tally.add(bits);
    }
    Ok(tally.into_table(BaselineSource::MonteCarlo { samples, seed, p_heads }))
}

/// Standard errors of the Monte Carlo estimates; zero for exact tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineErrors<F> {
    pub heads_pmf: Vec<F>,
    pub heads_mean: F,
    pub alternation_pmf: Vec<F>,
    pub alternation_mean: F,
    /// Index `L`.
    pub expected_runs: Vec<F>,
    /// Index `n - 1`, then tuple.
    pub ngram_fractions: Vec<Vec<F>>,
}

impl BaselineTable {
    pub fn is_exact(&self) -> bool {
        self.source == BaselineSource::Exact
    }

    pub fn max_ngram(&self) -> usize {
        self.ngram_counts.len()
    }

    pub fn heads_pmf<F: Scalar>(&self) -> Vec<F> {
        self.heads_counts.iter().map(|&c| F::ratio(c, self.total)).collect()
    }

    pub fn heads_pmf_exact(&self) -> Vec<Ratio<u64>> {
        self.heads_counts.iter().map(|&c| Ratio::new(c, self.total)).collect()
    }

    pub fn heads_mean<F: Scalar>(&self) -> F {
        pmf_moment(&self.heads_counts, self.total, 1)
    }

    pub fn alternation_pmf<F: Scalar>(&self) -> Vec<F> {
        self.alternation_counts.iter().map(|&c| F::ratio(c, self.total)).collect()
    }

    pub fn alternation_pmf_exact(&self) -> Vec<Ratio<u64>> {
        self.alternation_counts.iter().map(|&c| Ratio::new(c, self.total)).collect()
    }

    pub fn alternation_mean<F: Scalar>(&self) -> F {
        pmf_moment(&self.alternation_counts, self.total, 1)
    }

    pub fn alternation_mean_exact(&self) -> Ratio<u64> {
        let s: u64 = self.alternation_counts.iter().enumerate().map(|(a, &c)| a as u64 * c).sum();
        Ratio::new(s, self.total)
    }

    /// Per-window standard deviation of the alternation count.
    pub fn alternation_sd<F: Scalar>(&self) -> F {
        let m: F = self.alternation_mean();
        let m2: F = pmf_moment(&self.alternation_counts, self.total, 2);
        (m2 - m * m).max(F::zero()).sqrt()
    }

    /// Expected number of maximal runs of length exactly `len` per window.
    pub fn expected_runs<F: Scalar>(&self, len: usize) -> F {
        self.run_totals.get(len).map_or(F::zero(), |&c| F::ratio(c, self.total))
    }

    pub fn expected_runs_exact(&self, len: usize) -> Ratio<u64> {
        Ratio::new(self.run_totals.get(len).copied().unwrap_or(0), self.total)
    }

    /// Per-window standard deviation of the count of runs of length `len`.
    pub fn run_sd<F: Scalar>(&self, len: usize) -> F {
        let (Some(&s), Some(&sq)) = (self.run_totals.get(len), self.run_square_totals.get(len)) else {
            return F::zero();
        };
        let m = F::ratio(s, self.total);
        (F::ratio(sq, self.total) - m * m).max(F::zero()).sqrt()
    }

    /// Expected fraction of each `n`-gram among all overlapping `n`-grams.
    pub fn ngram_expected<F: Scalar>(&self, n: usize) -> Option<Vec<F>> {
        let counts = self.ngram_counts.get(n.checked_sub(1)?)?;
        let total: u64 = counts.iter().sum();
        Some(counts.iter().map(|&c| F::ratio(c, total)).collect())
    }

    pub fn ngram_expected_exact(&self, n: usize) -> Option<Vec<Ratio<u64>>> {
        let counts = self.ngram_counts.get(n.checked_sub(1)?)?;
        let total: u64 = counts.iter().sum();
        Some(counts.iter().map(|&c| Ratio::new(c, total)).collect())
    }

    /// Bayes risk of next-flip prediction for the source: `p (1 - p)`.
    pub fn mse_floor(&self) -> f64 {
        match self.source {
            BaselineSource::Exact => FAIR_MSE_FLOOR,
            BaselineSource::MonteCarlo { p_heads, .. } => p_heads * (1.0 - p_heads),
        }
    }

    pub fn standard_errors<F: Scalar>(&self) -> BaselineErrors<F> {
        let k = self.window_length;
        if self.is_exact() {
            let max_n = self.max_ngram();
            return BaselineErrors {
                heads_pmf: vec![F::zero(); k + 1],
                heads_mean: F::zero(),
                alternation_pmf: vec![F::zero(); k],
                alternation_mean: F::zero(),
                expected_runs: vec![F::zero(); k + 1],
                ngram_fractions: (1..=max_n).map(|n| vec![F::zero(); 1 << n]).collect(),
            };
        }
        let n = F::from_count(self.total);
        let root_n = n.sqrt();
        let proportion_se = |c: u64| {
            let p = F::ratio(c, self.total);
            (p * (F::one() - p) / n).sqrt()
        };
        let mean_se = |counts: &[u64]| {
            let m: F = pmf_moment(counts, self.total, 1);
            let m2: F = pmf_moment(counts, self.total, 2);
            (m2 - m * m).max(F::zero()).sqrt() / root_n
        };
        BaselineErrors {
            heads_pmf: self.heads_counts.iter().map(|&c| proportion_se(c)).collect(),
            heads_mean: mean_se(&self.heads_counts),
            alternation_pmf: self.alternation_counts.iter().map(|&c| proportion_se(c)).collect(),
            alternation_mean: mean_se(&self.alternation_counts),
            expected_runs: (0..=k).map(|l| self.run_sd::<F>(l) / root_n).collect(),
            ngram_fractions: self
                .ngram_counts
                .iter()
                .zip(&self.ngram_square_totals)
                .enumerate()
                .map(|(ni, (counts, sq))| {
                    let per_window = F::from_count((k - ni) as u64);
                    counts
                        .iter()
                        .zip(sq)
                        .map(|(&c, &s)| {
                            let m = F::ratio(c, self.total);
                            let var = (F::ratio(s, self.total) - m * m).max(F::zero());
                            var.sqrt() / root_n / per_window
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// The table with H and T swapped in every window.
    pub fn complement(&self) -> BaselineTable {
        let mut out = self.clone();
        out.heads_counts.reverse();
        for (counts, sq) in out.ngram_counts.iter_mut().zip(out.ngram_square_totals.iter_mut()) {
            // complementing a tuple flips all its bits, i.e. reverses the index order
            counts.reverse();
            sq.reverse();
        }
        out
    }
}

fn pmf_moment<F: Scalar>(counts: &[u64], total: u64, power: i32) -> F {
    let total = F::from_count(total);
    counts
        .iter()
        .enumerate()
        .map(|(x, &c)| F::from_count(x as u64).powi(power) * F::from_count(c))
        .sum::<F>()
        / total
}

/// Largest window length for which [`overlap_covariances`] enumerates.
pub const MAX_OVERLAP_WINDOW: usize = 12;

/// Alternations in a `k`-bit window.
pub fn bit_alternations(bits: u64, k: usize) -> u32 {
    if k < 2 {
        return 0;
    }
    ((bits ^ (bits >> 1)) & low_mask(k - 1)).count_ones()
}

/// Maximal runs of length exactly `len` in a `k`-bit window.
pub fn bit_runs_of_length(bits: u64, k: usize, len: usize) -> u32 {
    let mut found = 0;
    let mut run = 1usize;
    for i in 1..k {
        if (bits >> i) & 1 == (bits >> (i - 1)) & 1 {
            run += 1;
        } else {
            found += u32::from(run == len);
            run = 1;
        }
    }
    found + u32::from(run == len)
}

/// Covariance under a fair coin between `stat` on two `k`-flip windows whose
/// starts are `d` flips apart in one sequence, for `d` in `0..k`. Entry 0 is
/// the variance; windows `k` or more apart share nothing and are independent.
///
/// Overlapping windows from one response are far from independent, so a
/// standard error that ignores this understates the noise several-fold.
pub fn overlap_covariances<S>(k: usize, stat: S) -> Result<Vec<f64>, BaselineError>
where
    S: Fn(u64) -> f64 + Sync,
{
    if !(1..=MAX_OVERLAP_WINDOW).contains(&k) {
        return Err(BaselineError::OutOfEnumerationBound(k));
    }
    let mask = low_mask(k);
    let n0 = (1u64 << k) as f64;
    let mean = (0..1u64 << k).map(&stat).sum::<f64>() / n0;
    Ok((0..k)
        .map(|d| {
            let total = (0..1u64 << (k + d))
                .into_par_iter()
                .map(|x| stat(x >> d) * stat(x & mask))
                .sum::<f64>();
            total / (1u64 << (k + d)) as f64 - mean * mean
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Human reference constants
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanConstant {
    pub value: f64,
    pub citation: String,
}

impl HumanConstant {
    fn new(value: f64, citation: &str) -> Self {
        Self { value, citation: citation.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanBaselineRegistry {
    pub alternation_rate: HumanConstant,
    pub first_flip_heads_rate: HumanConstant,
    pub heads_first_given_heads_first_prompt: HumanConstant,
    pub tails_first_given_tails_first_prompt: HumanConstant,
    pub min_mse: HumanConstant,
}

impl Default for HumanBaselineRegistry {
    fn default() -> Self {
        Self {
            alternation_rate: HumanConstant::new(
                0.6,
                "Nickerson (2009); Budescu (1987); Falk & Konold (1997): aggregate human alternation rate",
            ),
            first_flip_heads_rate: HumanConstant::new(
                0.8,
                "Bar-Hillel, Peer & Acquisti (2014): heads on the first simulated toss",
            ),
            heads_first_given_heads_first_prompt: HumanConstant::new(
                0.87,
                "Bar-Hillel, Peer & Acquisti (2014): heads-first sequences under heads-first instructions",
            ),
            tails_first_given_tails_first_prompt: HumanConstant::new(
                0.67,
                "Bar-Hillel, Peer & Acquisti (2014): tails-first sequences under tails-first instructions",
            ),
            min_mse: HumanConstant::new(
                0.24,
                "Kleinberg, Liang & Mullainathan (2017): best next-flip predictor on human sequences",
            ),
        }
    }
}

/// Override document: one table per constant, e.g.
///
/// ```toml
/// [first_flip_heads_rate]
/// value = 0.87
/// citation = "lab replication, 2025"
/// ```
pub type HumanOverrides = BTreeMap<String, HumanConstant>;

impl HumanBaselineRegistry {
    pub const KEYS: [&'static str; 5] = [
        "alternation_rate",
        "first_flip_heads_rate",
        "heads_first_given_heads_first_prompt",
        "tails_first_given_tails_first_prompt",
        "min_mse",
    ];

    fn slot(&mut self, key: &str) -> Option<&mut HumanConstant> {
        Some(match key {
            "alternation_rate" => &mut self.alternation_rate,
            "first_flip_heads_rate" => &mut self.first_flip_heads_rate,
            "heads_first_given_heads_first_prompt" => &mut self.heads_first_given_heads_first_prompt,
            "tails_first_given_tails_first_prompt" => &mut self.tails_first_given_tails_first_prompt,
            "min_mse" => &mut self.min_mse,
            _ => return None,
        })
    }

    pub fn entries(&self) -> [(&'static str, &HumanConstant); 5] {
        [
            ("alternation_rate", &self.alternation_rate),
            ("first_flip_heads_rate", &self.first_flip_heads_rate),
            ("heads_first_given_heads_first_prompt", &self.heads_first_given_heads_first_prompt),
            ("tails_first_given_tails_first_prompt", &self.tails_first_given_tails_first_prompt),
            ("min_mse", &self.min_mse),
        ]
    }

    pub fn with_overrides(mut self, overrides: &HumanOverrides) -> Result<Self, BaselineError> {
        for (key, c) in overrides {
            if c.citation.trim().is_empty() {
                return Err(BaselineError::MissingCitation(key.clone()));
            }
            let slot = self.slot(key).ok_or_else(|| BaselineError::UnknownConstant(key.clone()))?;
            *slot = c.clone();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        for (key, c) in self.entries() {
            let (ok, range) = if key == "min_mse" {
                (c.value > 0.0 && c.value <= FAIR_MSE_FLOOR, "(0, 0.25]")
            } else {
                ((0.0..=1.0).contains(&c.value), "[0, 1]")
            };
            if !ok {
                return Err(BaselineError::OutOfRange { key: key.to_string(), value: c.value, range });
            }
            if c.citation.trim().is_empty() {
                return Err(BaselineError::MissingCitation(key.to_string()));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, BaselineError> {
        let overrides: HumanOverrides =
            toml::from_str(text).map_err(|e| BaselineError::Malformed(e.to_string()))?;
        Self::default().with_overrides(&overrides)
    }
}

/// Shipped defaults, overridden by the file at `path` when given.
pub fn load_human_baselines(path: Option<&Path>) -> Result<HumanBaselineRegistry, BaselineError> {
    match path {
        None => Ok(HumanBaselineRegistry::default()),
        Some(p) => HumanBaselineRegistry::from_toml_str(&fs::read_to_string(p)?),
    }
}

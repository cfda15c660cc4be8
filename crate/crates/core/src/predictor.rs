//! Next-flip predictability: features from a window's prefix, an L1-penalized
//! least-squares fit by cyclic coordinate descent, and grouped k-fold
//! cross-validation of the penalty. The held-out MSE is the score; a fair
//! coin cannot be predicted below 0.25.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use num_rational::Ratio;
use num_traits::{CheckedDiv, CheckedSub};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::XorShift64Star;
use crate::scalar::Scalar;
use crate::sequence::{Flip, Window};
use crate::stats::{alternations, heads_count, run_lengths, terminal_run_length, StatsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("prefix has {got} flips, expected {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("{rows} rows in X but {targets} targets")]
    ShapeMismatch { rows: usize, targets: usize },
    #[error("penalty must be non-negative and finite")]
    BadPenalty,
    #[error("invalid cross-validation config: {0}")]
    InvalidConfig(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("gap ratio undefined: random-source MSE {random} does not exceed human MSE {human}")]
    DegenerateDenominator { human: f64, random: f64 },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// Feature order for a prefix of length `m`: raw flips `f1..fm` (heads = 1),
/// heads count, alternation count, maximal-run counts for lengths `1..=m`,
/// terminal run length. `2m + 3` features in all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub prefix_len: usize,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self { prefix_len: 7 }
    }
}

impl FeatureLayout {
    pub const VERSION: &'static str = "flips+heads+alternations+runs+terminal/v1";

    pub fn new(prefix_len: usize) -> Self {
        Self { prefix_len }
    }

    pub fn len(&self) -> usize {
        2 * self.prefix_len + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Vec<String> {
        let m = self.prefix_len;
        let mut names: Vec<String> = (1..=m).map(|i| format!("f{i}")).collect();
        names.push("heads".into());
        names.push("alternations".into());
        names.extend((1..=m).map(|l| format!("runs_{l}")));
        names.push("terminal_run".into());
        names
    }

    pub fn extract<F: Scalar>(&self, prefix: &[Flip]) -> Result<FeatureVector<F>, PredictError> {
        Ok(FeatureVector { values: self.values(prefix)?, names: self.names() })
    }

    fn values<F: Scalar>(&self, prefix: &[Flip]) -> Result<Vec<F>, PredictError> {
        let m = self.prefix_len;
        if prefix.len() != m {
            return Err(PredictError::WrongLength { expected: m, got: prefix.len() });
        }
        let c = |n: usize| F::from_count(n as u64);
        let mut v = Vec::with_capacity(self.len());
        v.extend(prefix.iter().map(|f| c(f.bit() as usize)));
        v.push(c(heads_count(prefix)));
        v.push(c(alternations(prefix)));
        let mut runs = vec![0usize; m + 1];
        for l in run_lengths(prefix) {
            runs[l] += 1;
        }
        v.extend(runs[1..].iter().map(|&r| c(r)));
        v.push(c(terminal_run_length(prefix)));
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureVector<F> {
    pub values: Vec<F>,
    pub names: Vec<String>,
}

impl<F: Scalar> FeatureVector<F> {
    pub fn get(&self, name: &str) -> Option<F> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Features of a 7-flip prefix.
pub fn extract_features<F: Scalar>(prefix: &Window) -> Result<FeatureVector<F>, PredictError> {
    FeatureLayout::default().extract(&prefix.flips)
}

/// Rows are window prefixes (all but the last flip); targets are last flips.
pub fn design_matrix<F: Scalar>(windows: &[Window]) -> Result<(Array2<F>, Array1<F>), PredictError> {
    let k = windows.first().map(Window::len).ok_or(StatsError::Empty)?;
    if k < 2 {
        return Err(StatsError::WindowTooShort { got: k, min: 2 }.into());
    }
    let layout = FeatureLayout::new(k - 1);
    let mut x = Array2::zeros((windows.len(), layout.len()));
    let mut y = Array1::zeros(windows.len());
    for (i, w) in windows.iter().enumerate() {
        if w.len() != k {
            return Err(StatsError::MixedLength(k, w.len()).into());
        }
        let row = layout.values::<F>(&w.flips[..k - 1])?;
        x.row_mut(i).assign(&Array1::from(row));
        y[i] = F::from_count(w.flips[k - 1].bit() as u64);
    }
    Ok((x, y))
}

// ---------------------------------------------------------------------------
// LASSO
// ---------------------------------------------------------------------------

#[inline]
pub fn soft_threshold<F: Scalar>(z: F, gamma: F) -> F {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        F::zero()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaGrid {
    /// `count` log-spaced values from the data's `lambda_max` down to
    /// `lambda_max * min_ratio`.
    Auto { count: usize, min_ratio: f64 },
    /// Strictly descending positive values.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub grid: LambdaGrid,
    pub seed: u64,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            grid: LambdaGrid::Auto { count: 50, min_ratio: 1e-3 },
            seed: 0,
            tolerance: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<(), PredictError> {
        let bad = |m: &str| Err(PredictError::InvalidConfig(m.to_string()));
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.max_sweeps == 0 {
            return bad("max_sweeps must be positive");
        }
        match &self.grid {
            LambdaGrid::Auto { count, min_ratio } => {
                if *count == 0 {
                    return bad("grid count must be positive");
                }
                if !(*min_ratio > 0.0 && *min_ratio < 1.0) {
                    return bad("grid min_ratio must lie in (0, 1)");
                }
            }
            LambdaGrid::Explicit(values) => {
                if values.is_empty() {
                    return bad("grid is empty");
                }
                if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return bad("grid values must be positive");
                }
                if values.windows(2).any(|w| w[1] >= w[0]) {
                    return bad("grid must be strictly descending");
                }
            }
        }
        Ok(())
    }

    fn lambdas<F: Scalar>(&self, lambda_max: F) -> Vec<F> {
        match &self.grid {
            LambdaGrid::Explicit(v) => v.iter().map(|&l| F::from_f64_lossy(l)).collect(),
            LambdaGrid::Auto { .. } if lambda_max <= F::zero() => vec![F::zero()],
            LambdaGrid::Auto { count: 1, .. } => vec![lambda_max],
            LambdaGrid::Auto { count, min_ratio } => {
                let ratio = F::from_f64_lossy(*min_ratio);
                let steps = F::from_count(*count as u64 - 1);
                (0..*count).map(|i| lambda_max * ratio.powf(F::from_count(i as u64) / steps)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoModel<F> {
    /// In original feature units.
    pub weights: Vec<F>,
    pub intercept: F,
    pub lambda: F,
    pub feature_means: Vec<F>,
    pub feature_scales: Vec<F>,
    pub sweeps: usize,
    pub converged: bool,
    /// `(1/2m)·RSS + λ·Σ|β|` in standardized units after the last sweep.
    pub objective: F,
    /// Objective after every sweep.
    pub objective_history: Vec<F>,
}

impl<F: Scalar> LassoModel<F> {
    pub fn predict_raw(&self, row: ArrayView1<'_, F>) -> F {
        self.intercept + row.iter().zip(&self.weights).map(|(&x, &w)| x * w).sum::<F>()
    }

    /// Prediction clamped to `[0, 1]`.
    pub fn predict(&self, row: ArrayView1<'_, F>) -> F {
        self.predict_raw(row).max(F::zero()).min(F::one())
    }

    /// Mean squared error of clamped predictions.
    pub fn mse(&self, x: ArrayView2<'_, F>, y: ArrayView1<'_, F>) -> F {
        let n = F::from_count(y.len() as u64);
        x.outer_iter().zip(y.iter()).map(|(row, &t)| (t - self.predict(row)).powi(2)).sum::<F>() / n
    }

    pub fn nonzero_weights(&self) -> usize {
        self.weights.iter().filter(|w| !w.is_zero()).count()
    }

    /// Whether the per-sweep objective never increased (up to rounding).
    pub fn objective_is_monotone(&self) -> bool {
        monotone(&self.objective_history)
    }
}

fn monotone<F: Scalar>(history: &[F]) -> bool {
    history.windows(2).all(|w| w[1] <= w[0] + objective_slack(w[0]))
}

fn objective_slack<F: Scalar>(obj: F) -> F {
    F::epsilon() * F::from_count(1024) * (F::one() + obj.abs())
}

/// Standardized least-squares problem in covariance form. Features are
/// centered and scaled by their population standard deviation (constant
/// features keep scale 1 and become all-zero columns).
struct Standardized<F> {
    means: Vec<F>,
    scales: Vec<F>,
    y_mean: F,
    /// `Xsᵀ Xs / m`
    gram: Array2<F>,
    /// `Xsᵀ (y - ȳ) / m`
    xty: Array1<F>,
    /// `‖y - ȳ‖² / m`
    yty: F,
}

struct Solution<F> {
    beta: Vec<F>,
    sweeps: usize,
    converged: bool,
    history: Vec<F>,
}

impl<F: Scalar> Standardized<F> {
    fn new(x: ArrayView2<'_, F>, y: ArrayView1<'_, F>) -> Self {
        let m = F::from_count(x.nrows() as u64);
        let p = x.ncols();
        let means: Vec<F> = x.axis_iter(Axis(1)).map(|c| c.sum() / m).collect();
        let scales: Vec<F> = x
            .axis_iter(Axis(1))
            .zip(&means)
            .map(|(c, &mu)| {
                let var = c.iter().map(|&v| (v - mu).powi(2)).sum::<F>() / m;
                if var > F::zero() {
                    var.sqrt()
                } else {
                    F::one()
                }
            })
            .collect();
        let y_mean = y.sum() / m;
        let mut xs = x.to_owned();
        for (j, mut col) in xs.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - means[j]) / scales[j]);
        }
        let yc = y.mapv(|v| v - y_mean);
        let gram = xs.t().dot(&xs).mapv(|v| v / m);
        let xty = xs.t().dot(&yc).mapv(|v| v / m);
        let yty = yc.dot(&yc) / m;
        debug_assert_eq!(gram.nrows(), p);
        Self { means, scales, y_mean, gram, xty, yty }
    }

    fn lambda_max(&self) -> F {
        self.xty.iter().fold(F::zero(), |acc, v| acc.max(v.abs()))
    }

    fn objective(&self, beta: &[F], gb: &[F], lambda: F) -> F {
        let half = F::from_f64_lossy(0.5);
        let bxty: F = beta.iter().zip(self.xty.iter()).map(|(&b, &c)| b * c).sum();
        let bgb: F = beta.iter().zip(gb).map(|(&b, &g)| b * g).sum();
        let l1: F = beta.iter().map(|b| b.abs()).sum();
        half * (self.yty - bxty - bxty + bgb) + lambda * l1
    }

    fn solve(&self, lambda: F, warm: Option<&[F]>, tolerance: F, max_sweeps: usize) -> Solution<F> {
        let p = self.xty.len();
        let mut beta: Vec<F> = warm.map_or_else(|| vec![F::zero(); p], <[F]>::to_vec);
        let mut gb: Vec<F> = (0..p).map(|j| (0..p).map(|l| self.gram[[j, l]] * beta[l]).sum()).collect();
        let mut history = Vec::new();
        let mut converged = false;
        let mut sweeps = 0;
        while sweeps < max_sweeps {
            sweeps += 1;
            let mut max_change = F::zero();
            for j in 0..p {
                let gjj = self.gram[[j, j]];
                let old = beta[j];
                let new = if gjj > F::zero() {
                    let rho = self.xty[j] - (gb[j] - gjj * old);
                    soft_threshold(rho, lambda) / gjj
                } else {
                    F::zero()
                };
                let delta = new - old;
                if !delta.is_zero() {
                    beta[j] = new;
                    for (l, g) in gb.iter_mut().enumerate() {
                        *g = *g + delta * self.gram[[l, j]];
                    }
                    max_change = max_change.max(delta.abs());
                }
            }
            let obj = self.objective(&beta, &gb, lambda);
            debug_assert!(
                history.last().is_none_or(|&prev: &F| obj <= prev + objective_slack(prev)),
                "coordinate descent objective increased"
            );
            history.push(obj);
            if max_change < tolerance {
                converged = true;
                break;
            }
        }
        Solution { beta, sweeps, converged, history }
    }

    fn model(&self, lambda: F, sol: Solution<F>) -> LassoModel<F> {
        let weights: Vec<F> = sol.beta.iter().zip(&self.scales).map(|(&b, &s)| b / s).collect();
        let shift: F = weights.iter().zip(&self.means).map(|(&w, &mu)| w * mu).sum();
        LassoModel {
            weights,
            intercept: self.y_mean - shift,
            lambda,
            feature_means: self.means.clone(),
            feature_scales: self.scales.clone(),
            sweeps: sol.sweeps,
            converged: sol.converged,
            objective: sol.history.last().copied().unwrap_or_else(F::nan),
            objective_history: sol.history,
        }
    }
}

fn check_inputs<F: Scalar>(x: ArrayView2<'_, F>, y: ArrayView1<'_, F>) -> Result<(), PredictError> {
    if x.nrows() != y.len() {
        return Err(PredictError::ShapeMismatch { rows: x.nrows(), targets: y.len() });
    }
    if x.nrows() < 2 {
        return Err(PredictError::TooFewRows(x.nrows()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(PredictError::NonFinite);
    }
    Ok(())
}

/// Largest useful penalty: `maxⱼ |⟨xⱼ, y − ȳ⟩| / m` on standardized features.
/// At or above it every weight is zero.
pub fn lambda_max<F: Scalar>(x: ArrayView2<'_, F>, y: ArrayView1<'_, F>) -> Result<F, PredictError> {
    check_inputs(x, y)?;
    Ok(Standardized::new(x, y).lambda_max())
}

/// Minimizes `(1/2m)·Σ(yᵢ − β₀ − xᵢ·β)² + λ·Σ|βⱼ|` by cyclic coordinate descent
/// on standardized features. The intercept is unpenalized; weights are
/// returned in original units.
pub fn fit_lasso<F: Scalar>(
    x: ArrayView2<'_, F>,
    y: ArrayView1<'_, F>,
    lambda: F,
    config: &CvConfig,
) -> Result<LassoModel<F>, PredictError> {
    check_inputs(x, y)?;
    if !(lambda.is_finite() && lambda >= F::zero()) {
        return Err(PredictError::BadPenalty);
    }
    let problem = Standardized::new(x, y);
    let sol = problem.solve(lambda, None, F::from_f64_lossy(config.tolerance), config.max_sweeps);
    Ok(problem.model(lambda, sol))
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint<F> {
    pub lambda: F,
    pub mean_mse: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult<F> {
    pub best_lambda: F,
    /// Mean held-out MSE at `best_lambda`.
    pub mse: F,
    /// Held-out MSE of each fold at `best_lambda`.
    pub fold_mses: Vec<F>,
    pub path: Vec<PathPoint<F>>,
    /// Refit on every window at `best_lambda`.
    pub model: LassoModel<F>,
    pub feature_names: Vec<String>,
    pub window_count: usize,
    pub group_count: usize,
}

/// Seeded grouped k-fold assignment: groups are shuffled, then dealt to folds
/// round-robin. Returns the fold of every row.
pub fn assign_folds(groups: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut unique: Vec<usize> = groups.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    XorShift64Star::new(seed).shuffle(&mut unique);
    let fold_of: std::collections::HashMap<usize, usize> =
        unique.iter().enumerate().map(|(i, &g)| (g, i % folds)).collect();
    groups.iter().map(|g| fold_of[g]).collect()
}

fn select_rows<F: Scalar>(x: &Array2<F>, y: &Array1<F>, rows: &[usize]) -> (Array2<F>, Array1<F>) {
    (x.select(Axis(0), rows), y.select(Axis(0), rows))
}

/// Held-out MSE of the LASSO next-flip predictor on one cell's windows.
/// Windows sharing a `parent` always land in the same fold.
pub fn cross_validated_mse<F: Scalar>(windows: &[Window], config: &CvConfig) -> Result<CvResult<F>, PredictError> {
    config.validate()?;
    if windows.len() < config.folds * 2 {
        return Err(PredictError::InsufficientData(format!(
            "{} windows for {} folds (need {})",
            windows.len(),
            config.folds,
            config.folds * 2
        )));
    }
    let (x, y) = design_matrix::<F>(windows)?;
    let groups: Vec<usize> = windows.iter().map(|w| w.parent).collect();
    let group_count = groups.iter().collect::<BTreeSet<_>>().len();
    if group_count < config.folds {
        return Err(PredictError::InsufficientData(format!(
            "{group_count} parent sequences for {} folds",
            config.folds
        )));
    }
    let fold_of = assign_folds(&groups, config.folds, config.seed);

    let full = Standardized::new(x.view(), y.view());
    let lambdas = config.lambdas(full.lambda_max());
    let tolerance = F::from_f64_lossy(config.tolerance);

    // fold × lambda held-out errors
    let per_fold: Vec<Vec<F>> = (0..config.folds)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<usize> = (0..windows.len()).filter(|&i| fold_of[i] != fold).collect();
            let test: Vec<usize> = (0..windows.len()).filter(|&i| fold_of[i] == fold).collect();
            let (xt, yt) = select_rows(&x, &y, &train);
            let (xv, yv) = select_rows(&x, &y, &test);
            let problem = Standardized::new(xt.view(), yt.view());
            let mut warm: Option<Vec<F>> = None;
            lambdas
                .iter()
                .map(|&lambda| {
                    let sol = problem.solve(lambda, warm.as_deref(), tolerance, config.max_sweeps);
                    warm = Some(sol.beta.clone());
                    problem.model(lambda, sol).mse(xv.view(), yv.view())
                })
                .collect()
        })
        .collect();

    let folds_f = F::from_count(config.folds as u64);
    let path: Vec<PathPoint<F>> = lambdas
        .iter()
        .enumerate()
        .map(|(li, &lambda)| PathPoint { lambda, mean_mse: per_fold.iter().map(|f| f[li]).sum::<F>() / folds_f })
        .collect();
    // strict comparison keeps the earliest (largest) lambda on ties
    let best = path
        .iter()
        .enumerate()
        .fold(0, |best, (i, p)| if p.mean_mse < path[best].mean_mse { i } else { best });

    let best_lambda = lambdas[best];
    let model = full.model(best_lambda, full.solve(best_lambda, None, tolerance, config.max_sweeps));
    Ok(CvResult {
        best_lambda,
        mse: path[best].mean_mse,
        fold_mses: per_fold.iter().map(|f| f[best]).collect(),
        path,
        model,
        feature_names: FeatureLayout::new(windows[0].len() - 1).names(),
        window_count: windows.len(),
        group_count,
    })
}

// ---------------------------------------------------------------------------
// Gap ratio
// ---------------------------------------------------------------------------

/// `(human − subject) / (random − human)`: how many human-to-random gaps the
/// subject sits below the human floor.
///
/// Inputs are taken at their shortest decimal representation and combined in
/// rational arithmetic, so `(0.22, 0.24, 0.25)` gives exactly 2.
pub fn gap_ratio<F: Scalar>(mse_subject: F, mse_human: F, mse_random: F) -> Result<F, PredictError> {
    let (s, h, r) = (mse_subject.to_f64_lossy(), mse_human.to_f64_lossy(), mse_random.to_f64_lossy());
    if !(s.is_finite() && h.is_finite() && r.is_finite()) {
        return Err(PredictError::NonFinite);
    }
    if r <= h {
        return Err(PredictError::DegenerateDenominator { human: h, random: r });
    }
    let exact = (|| {
        let (s, h, r) = (decimal_ratio(&mse_subject)?, decimal_ratio(&mse_human)?, decimal_ratio(&mse_random)?);
        let num = h.checked_sub(&s)?;
        let den = r.checked_sub(&h)?;
        let q = num.checked_div(&den)?;
        Some(*q.numer() as f64 / *q.denom() as f64)
    })();
    Ok(F::from_f64_lossy(exact.unwrap_or((h - s) / (r - h))))
}

/// Exact value of the decimal string `Display` prints for `x`.
fn decimal_ratio<F: Scalar>(x: &F) -> Option<Ratio<i128>> {
    let text = x.to_string();
    let (negative, digits) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.as_str()),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    if frac.len() > 30 || !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let mantissa: i128 = format!("{int}{frac}").parse().ok()?;
    let scale = 10i128.checked_pow(frac.len() as u32)?;
    let r = Ratio::new(mantissa, scale);
    Some(if negative { -r } else { r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::parse_letters;
    use ndarray::array;

    fn window(s: &str) -> Window {
        Window::new(parse_letters(s).unwrap())
    }

    #[test]
    fn feature_examples() {
        let f: FeatureVector<f64> = extract_features(&window("HTHTHTH")).unwrap();
        assert_eq!(f.values.len(), 17);
        assert_eq!(f.get("heads"), Some(4.0));
        assert_eq!(f.get("alternations"), Some(6.0));
        assert_eq!(f.get("runs_1"), Some(7.0));
        assert_eq!((2..=7).map(|l| f.get(&format!("runs_{l}")).unwrap()).sum::<f64>(), 0.0);
        assert_eq!(f.get("terminal_run"), Some(1.0));
        assert_eq!(&f.values[..7], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);

        let f: FeatureVector<f64> = extract_features(&window("HHHHHHH")).unwrap();
        assert_eq!(f.get("heads"), Some(7.0));
        assert_eq!(f.get("alternations"), Some(0.0));
        assert_eq!(f.get("runs_7"), Some(1.0));
        assert_eq!(f.get("runs_1"), Some(0.0));
        assert_eq!(f.get("terminal_run"), Some(7.0));

        let f: FeatureVector<f32> = extract_features(&window("HHTHHHT")).unwrap();
        assert_eq!(f.get("heads"), Some(5.0));
        assert_eq!(f.get("alternations"), Some(3.0));
        assert_eq!(f.get("runs_1"), Some(2.0));
        assert_eq!(f.get("runs_2"), Some(1.0));
        assert_eq!(f.get("runs_3"), Some(1.0));
        assert_eq!(f.get("terminal_run"), Some(1.0));
    }

    #[test]
    fn feature_length_checked() {
        assert_eq!(
            extract_features::<f64>(&window("HTH")),
            Err(PredictError::WrongLength { expected: 7, got: 3 })
        );
        assert_eq!(FeatureLayout::new(7).names()[16], "terminal_run");
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(2.0, 0.5), 1.5);
        assert_eq!(soft_threshold(-2.0, 0.5), -1.5);
        assert_eq!(soft_threshold(-0.5f32, 0.5), 0.0);
    }

    #[test]
    fn full_shrinkage_at_lambda_max() {
        let x: Array2<f64> = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0], [1.0, 0.0]];
        let y = array![1.0, 0.0, 1.0, 0.0, 0.0];
        let lmax = lambda_max(x.view(), y.view()).unwrap();
        let m = fit_lasso(x.view(), y.view(), lmax, &CvConfig::default()).unwrap();
        assert!(m.weights.iter().all(|w| *w == 0.0));
        assert!((m.intercept - 0.4).abs() < 1e-15);
        let var = 0.4 * 0.6;
        assert!((m.mse(x.view(), y.view()) - var).abs() < 1e-12);
        // just below lambda_max something enters
        let m = fit_lasso(x.view(), y.view(), lmax * 0.9, &CvConfig::default()).unwrap();
        assert!(m.nonzero_weights() > 0);
    }

    #[test]
    fn constant_feature_is_neutral() {
        let x: Array2<f64> = array![[1.0, 3.0], [0.0, 3.0], [1.0, 3.0], [0.0, 3.0]];
        let y = array![1.0, 0.0, 1.0, 0.0];
        let m = fit_lasso(x.view(), y.view(), 0.0, &CvConfig::default()).unwrap();
        assert_eq!(m.weights[1], 0.0);
        assert_eq!(m.feature_scales[1], 1.0);
        assert!((m.weights[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn input_errors() {
        let x = array![[1.0], [0.0]];
        assert_eq!(
            fit_lasso(x.view(), array![1.0].view(), 0.0, &CvConfig::default()),
            Err(PredictError::ShapeMismatch { rows: 2, targets: 1 })
        );
        assert_eq!(
            fit_lasso(array![[1.0]].view(), array![1.0].view(), 0.0, &CvConfig::default()),
            Err(PredictError::TooFewRows(1))
        );
        assert_eq!(
            fit_lasso(array![[1.0], [f64::NAN]].view(), array![1.0, 0.0].view(), 0.0, &CvConfig::default()),
            Err(PredictError::NonFinite)
        );
        assert_eq!(
            fit_lasso(x.view(), array![1.0, 0.0].view(), -1.0, &CvConfig::default()),
            Err(PredictError::BadPenalty)
        );
    }

    #[test]
    fn config_validation() {
        assert!(CvConfig::default().validate().is_ok());
        let bad = |grid| CvConfig { grid, ..CvConfig::default() }.validate().is_err();
        assert!(bad(LambdaGrid::Explicit(vec![])));
        assert!(bad(LambdaGrid::Explicit(vec![0.1, 0.2])));
        assert!(bad(LambdaGrid::Explicit(vec![0.1, 0.1])));
        assert!(bad(LambdaGrid::Explicit(vec![0.1, 0.0])));
        assert!(!bad(LambdaGrid::Explicit(vec![0.2, 0.1])));
        assert!(CvConfig { folds: 1, ..CvConfig::default() }.validate().is_err());
        assert!(CvConfig { tolerance: 0.0, ..CvConfig::default() }.validate().is_err());
    }

    #[test]
    fn auto_grid_is_log_spaced() {
        let g: Vec<f64> = CvConfig::default().lambdas(2.0);
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 2.0);
        assert!((g[49] - 2e-3).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
        let r0 = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - r0).abs() < 1e-12));
    }

    #[test]
    fn folds_keep_groups_together() {
        let groups: Vec<usize> = (0..100).map(|i| i / 13).collect();
        let folds = assign_folds(&groups, 5, 3);
        for (i, g) in groups.iter().enumerate() {
            for (j, h) in groups.iter().enumerate() {
                if g == h {
                    assert_eq!(folds[i], folds[j]);
                }
            }
        }
        let used: BTreeSet<usize> = folds.iter().copied().collect();
        assert_eq!(used.len(), 5);
        assert_eq!(assign_folds(&groups, 5, 3), folds);
    }

    #[test]
    fn cv_needs_data() {
        let ws: Vec<Window> = (0..9).map(|i| Window { parent: i, ..window("HTHTHTHT") }).collect();
        assert!(matches!(cross_validated_mse::<f64>(&ws, &CvConfig::default()), Err(PredictError::InsufficientData(_))));
        let ws: Vec<Window> = (0..20).map(|_| window("HTHTHTHT")).collect();
        assert!(matches!(cross_validated_mse::<f64>(&ws, &CvConfig::default()), Err(PredictError::InsufficientData(_))));
    }

    #[test]
    fn gap_ratio_examples() {
        assert_eq!(gap_ratio(0.22, 0.24, 0.25).unwrap(), 2.0);
        assert_eq!(gap_ratio(0.24, 0.24, 0.25).unwrap(), 0.0);
        assert_eq!(gap_ratio(0.15, 0.24, 0.25).unwrap(), 9.0);
        assert_eq!(gap_ratio(0.22f32, 0.24, 0.25).unwrap(), 2.0);
        assert!(matches!(gap_ratio(0.2, 0.25, 0.25), Err(PredictError::DegenerateDenominator { .. })));
        assert!(matches!(gap_ratio(0.2, 0.26, 0.25), Err(PredictError::DegenerateDenominator { .. })));
        // falls back to floating point for values with very long expansions
        let g: f64 = gap_ratio(1e-40, 0.24, 0.25).unwrap();
        assert!((g - 24.0).abs() < 1e-9);
    }
}

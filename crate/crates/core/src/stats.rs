//! Correlation and regression machinery: Pearson and Spearman coefficients,
//! logit scaling of accuracies, a Huber IRLS line fit, and percentile
//! bootstrap bands for that fit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

/// Clamp applied to accuracies before the logit so endpoints stay finite.
pub const LOGIT_EPS: f64 = 1e-6;
/// Huber tuning constant (95% efficiency under Gaussian noise).
pub const HUBER_TUNING: f64 = 1.345;
/// Consistency constant turning a MAD into a Gaussian standard deviation.
pub const MAD_TO_SIGMA: f64 = 0.6745;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("x and y lengths differ: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Paired observations `(x, y)` with at least three points and no `NaN`/`∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleXY {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl SampleXY {
    pub const MIN_POINTS: usize = 3;

    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self, StatsError> {
        if x.len() != y.len() {
            return Err(StatsError::LengthMismatch { x: x.len(), y: y.len() });
        }
        if x.len() < Self::MIN_POINTS {
            return Err(StatsError::TooFewPoints {
                needed: Self::MIN_POINTS,
                got: x.len(),
            });
        }
        if let Some(i) = x.iter().zip(&y).position(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(StatsError::NonFinite(i));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self {
            x: self.y.clone(),
            y: self.x.clone(),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pearson_slices(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Degenerate("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Product-moment correlation coefficient.
pub fn pearson(s: &SampleXY) -> Result<f64, StatsError> {
    pearson_slices(&s.x, &s.y)
}

/// 1-based ranks; tied values share the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Rank correlation: Pearson on average ranks.
pub fn spearman(s: &SampleXY) -> Result<f64, StatsError> {
    pearson_slices(&average_ranks(&s.x), &average_ranks(&s.y))
}

/// `ln(a / (1 − a))` with `a` clamped to `[ε, 1 − ε]`.
pub fn logit_scale(acc: f64) -> f64 {
    let a = acc.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (a / (1.0 - a)).ln()
}

pub fn inverse_logit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberConfig {
    pub tuning: f64,
    /// Convergence threshold on the largest parameter change.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for HuberConfig {
    fn default() -> Self {
        Self {
            tuning: HUBER_TUNING,
            tolerance: 1e-8,
            max_iterations: 100,
        }
    }
}

/// Weighted least squares line; `None` weights means ordinary least squares.
/// Returns `(slope, intercept)`.
fn weighted_line(x: &[f64], y: &[f64], w: Option<&[f64]>) -> Result<(f64, f64), StatsError> {
    let weight = |i: usize| w.map_or(1.0, |w| w[i]);
    let (mut sw, mut swx, mut swy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let wi = weight(i);
        sw += wi;
        swx += wi * x[i];
        swy += wi * y[i];
    }
    let (mx, my) = (swx / sw, swy / sw);
    let (mut sxx, mut sxy, mut scale) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let wi = weight(i);
        let dx = x[i] - mx;
        sxx += wi * dx * dx;
        sxy += wi * dx * (y[i] - my);
        scale += wi * x[i] * x[i];
    }
    if sxx.is_nan() || sxx <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
        return Err(StatsError::Degenerate("singular normal equations (x has no spread)"));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Median of `v`, reordering it in place.
fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Median absolute deviation about the median.
fn mad(values: &[f64], scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend_from_slice(values);
    let med = median_in_place(scratch);
    for v in scratch.iter_mut() {
        *v = (*v - med).abs();
    }
    median_in_place(scratch)
}

fn huber_slices(x: &[f64], y: &[f64], cfg: &HuberConfig) -> Result<LinearFit, StatsError> {
    let (mut slope, mut intercept) = weighted_line(x, y, None)?;
    let n = x.len();
    let y_scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut residuals = vec![0.0; n];
    let mut weights = vec![1.0; n];
    let mut scratch = Vec::with_capacity(n);
    for iteration in 1..=cfg.max_iterations {
        for i in 0..n {
            residuals[i] = y[i] - (intercept + slope * x[i]);
        }
        let sigma = mad(&residuals, &mut scratch) / MAD_TO_SIGMA;
        if sigma <= 1e-15 * y_scale {
            // a majority of points already lies on the line
            return Ok(LinearFit {
                slope,
                intercept,
                iterations: iteration - 1,
                converged: true,
            });
        }
        let delta = cfg.tuning * sigma;
        for (w, r) in weights.iter_mut().zip(&residuals) {
            *w = if r.abs() <= delta { 1.0 } else { delta / r.abs() };
        }
        let (s, c) = weighted_line(x, y, Some(&weights))?;
        let change = (s - slope).abs().max((c - intercept).abs());
        slope = s;
        intercept = c;
        if change < cfg.tolerance {
            return Ok(LinearFit {
                slope,
                intercept,
                iterations: iteration,
                converged: true,
            });
        }
    }
    Ok(LinearFit {
        slope,
        intercept,
        iterations: cfg.max_iterations,
        converged: false,
    })
}

/// Huber-loss line fit by IRLS with the default configuration.
pub fn huber_fit(s: &SampleXY) -> Result<LinearFit, StatsError> {
    huber_fit_with(s, &HuberConfig::default())
}

/// Huber-loss line fit by IRLS. The threshold is `tuning · MAD/0.6745` of the
/// current residuals, re-estimated every iteration; iteration starts from
/// the least-squares line.
pub fn huber_fit_with(s: &SampleXY, cfg: &HuberConfig) -> Result<LinearFit, StatsError> {
    huber_slices(&s.x, &s.y, cfg)
}

/// Pointwise percentile envelope of bootstrap line fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBand {
    pub level: f64,
    pub resamples: usize,
    pub grid: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub seed: u64,
    /// Resamples dropped after exhausting redraws.
    #[serde(default)]
    pub skipped: usize,
}

impl BootstrapBand {
    /// `(lower, upper, extrapolated)` at `x`, linearly interpolated between
    /// grid points and extended linearly beyond the grid ends.
    pub fn interval_at(&self, x: f64) -> (f64, f64, bool) {
        let g = &self.grid;
        let last = g.len() - 1;
        if last == 0 {
            return (self.lower[0], self.upper[0], x != g[0]);
        }
        let extrapolated = x < g[0] || x > g[last];
        let seg = match g.partition_point(|&v| v <= x) {
            0 => 0,
            p if p > last => last - 1,
            p => p - 1,
        };
        let t = (x - g[seg]) / (g[seg + 1] - g[seg]);
        let lerp = |v: &[f64]| v[seg] + t * (v[seg + 1] - v[seg]);
        let (a, b) = (lerp(&self.lower), lerp(&self.upper));
        (a.min(b), a.max(b), extrapolated)
    }

    pub fn width_at(&self, x: f64) -> f64 {
        let (lo, hi, _) = self.interval_at(x);
        hi - lo
    }
}

pub const DEFAULT_GRID_POINTS: usize = 101;
const MAX_REDRAWS: usize = 16;

/// Evenly spaced grid spanning the observed `x` range.
pub fn default_grid(s: &SampleXY) -> Vec<f64> {
    let lo = s.x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let steps = DEFAULT_GRID_POINTS - 1;
    (0..=steps)
        .map(|i| if i == steps { hi } else { lo + (hi - lo) * i as f64 / steps as f64 })
        .collect()
}

/// Type-7 (linear interpolation) quantile of sorted data.
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Random stream for resample `index`: a ChaCha8 generator keyed by `seed`
/// with the stream id set to the index, so streams are independent of each
/// other and of scheduling.
pub fn resample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Case-resampling bootstrap band over [`default_grid`].
pub fn bootstrap_band(s: &SampleXY, resamples: usize, level: f64, seed: u64) -> Result<BootstrapBand, StatsError> {
    let grid = default_grid(s);
    bootstrap_band_on_grid(s, resamples, level, seed, grid)
}

/// Case-resampling percentile bootstrap of the Huber line, evaluated at
/// each point of `grid`. Resamples whose `x` has no spread are redrawn a few
/// times and then skipped.
pub fn bootstrap_band_on_grid(
    s: &SampleXY,
    resamples: usize,
    level: f64,
    seed: u64,
    mut grid: Vec<f64>,
) -> Result<BootstrapBand, StatsError> {
    if resamples < 100 {
        return Err(StatsError::Argument(format!("need at least 100 resamples, got {resamples}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::Argument(format!("level must lie in (0, 1), got {level}")));
    }
    if grid.is_empty() || grid.iter().any(|g| !g.is_finite()) {
        return Err(StatsError::Argument("grid must be non-empty and finite".into()));
    }
    grid.sort_by(f64::total_cmp);
    // the full-sample fit must exist for the band to mean anything
    huber_fit(s)?;

    let n = s.len();
    let cfg = HuberConfig::default();
    let fits: Vec<Option<LinearFit>> = par::map_indexed(resamples, |b| {
        let mut rng = resample_rng(seed, b as u64);
        let mut bx = vec![0.0; n];
        let mut by = vec![0.0; n];
        for _ in 0..MAX_REDRAWS {
            for i in 0..n {
                let j = rng.random_range(0..n);
                bx[i] = s.x[j];
                by[i] = s.y[j];
            }
            if let Ok(fit) = huber_slices(&bx, &by, &cfg) {
                return Some(fit);
            }
        }
        None
    });
    let fits: Vec<LinearFit> = fits.into_iter().flatten().collect();
    let skipped = resamples - fits.len();
    if fits.len() < 2 {
        return Err(StatsError::Degenerate("almost every bootstrap resample was degenerate"));
    }

    let (q_lo, q_hi) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);
    let mut column = vec![0.0; fits.len()];
    let mut lower = Vec::with_capacity(grid.len());
    let mut upper = Vec::with_capacity(grid.len());
    for &g in &grid {
        for (c, f) in column.iter_mut().zip(&fits) {
            *c = f.predict(g);
        }
        column.sort_by(f64::total_cmp);
        lower.push(sorted_quantile(&column, q_lo));
        upper.push(sorted_quantile(&column, q_hi));
    }
    Ok(BootstrapBand {
        level,
        resamples,
        grid,
        lower,
        upper,
        seed,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStats {
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub n: usize,
}

pub fn correlate(s: &SampleXY) -> Result<CorrelationStats, StatsError> {
    Ok(CorrelationStats {
        pearson_r: pearson(s)?,
        spearman_rho: spearman(s)?,
        n: s.len(),
    })
}

//! Quantitative evaluation: per-bar distribution overlapped-area metrics over
//! pitch class, note, duration, and inter-onset interval; interval-window
//! pattern similarity; and tie-corrected Kendall rank correlation.

use crate::midi::{BarGrid, Score};
use crate::pattern::SelectedEventStream;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("histogram bin counts differ: {0} vs {1}")]
    BinMismatch(usize, usize),
    #[error("histograms must be normalized")]
    NotNormalized,
    #[error("stream of {z} values is too short for pattern length {p}")]
    TooShort { z: usize, p: usize },
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

/// Normalized discrete distribution over a metric's classes. An all-zero,
/// un-normalized histogram marks an empty bar.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bins: Vec<f64>,
    pub normalized: bool,
}

impl Histogram {
    pub fn from_counts(counts: Vec<f64>) -> Self {
        let total: f64 = counts.iter().sum();
        if total > 0.0 {
            Histogram {
                bins: counts.iter().map(|c| c / total).collect(),
                normalized: true,
            }
        } else {
            Histogram {
                bins: counts,
                normalized: false,
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.normalized
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistributionMetric {
    PitchClass,
    Note,
    Duration,
    Ioi,
}

pub const ALL_METRICS: [DistributionMetric; 4] = [
    DistributionMetric::PitchClass,
    DistributionMetric::Note,
    DistributionMetric::Duration,
    DistributionMetric::Ioi,
];

impl DistributionMetric {
    pub fn bin_count(self) -> usize {
        match self {
            DistributionMetric::PitchClass => 12,
            DistributionMetric::Note => 128,
            DistributionMetric::Duration => 32,
            DistributionMetric::Ioi => 32,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistributionMetric::PitchClass => "pitch_class",
            DistributionMetric::Note => "note",
            DistributionMetric::Duration => "duration",
            DistributionMetric::Ioi => "ioi",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_METRICS.iter().copied().find(|m| m.name() == name)
    }
}

/// (bin index, bar index) observations for one track under one metric.
fn observations(score: &Score, track: usize, metric: DistributionMetric) -> Vec<(usize, usize)> {
    let notes = &score.tracks[track].notes;
    if notes.is_empty() {
        return Vec::new();
    }
    let mut grid = BarGrid::new(score);
    let unit = score.ticks_per_quarter as f64 / 8.0; // one 32nd note
    let mut out = Vec::with_capacity(notes.len());
    match metric {
        DistributionMetric::PitchClass => {
            for n in notes {
                out.push(((n.pitch % 12) as usize, grid.bar_of(n.start_tick as u64)));
            }
        }
        DistributionMetric::Note => {
            for n in notes {
                out.push((n.pitch as usize, grid.bar_of(n.start_tick as u64)));
            }
        }
        DistributionMetric::Duration => {
            for n in notes {
                let v = (n.duration_ticks as f64 / unit).round() as i64;
                out.push(((v.clamp(1, 32) - 1) as usize, grid.bar_of(n.start_tick as u64)));
            }
        }
        DistributionMetric::Ioi => {
            // Gap to the next onset anywhere in the piece; the last note
            // contributes none. Notes are sorted by start tick.
            for w in notes.windows(2) {
                let gap = (w[1].start_tick - w[0].start_tick) as f64 / unit;
                let v = gap.round() as i64;
                out.push((v.clamp(0, 31) as usize, grid.bar_of(w[0].start_tick as u64)));
            }
        }
    }
    out
}

fn track_bar_count(score: &Score, track: usize) -> usize {
    let notes = &score.tracks[track].notes;
    if notes.is_empty() {
        return 0;
    }
    let mut grid = BarGrid::new(score);
    notes
        .iter()
        .map(|n| grid.bar_of(n.start_tick as u64))
        .max()
        .unwrap()
        + 1
}

/// One histogram per bar, covering bars 0..=last onset bar. Empty bars yield
/// an empty-flagged histogram.
pub fn bar_histograms(
    score: &Score,
    track: usize,
    metric: DistributionMetric,
) -> Vec<Histogram> {
    let bars = track_bar_count(score, track);
    let mut counts = vec![vec![0.0f64; metric.bin_count()]; bars];
    for (bin, bar) in observations(score, track, metric) {
        counts[bar][bin] += 1.0;
    }
    counts.into_iter().map(Histogram::from_counts).collect()
}

/// Whole-piece histogram for one track (all bars pooled).
pub fn pooled_histogram(score: &Score, track: usize, metric: DistributionMetric) -> Histogram {
    let mut counts = vec![0.0f64; metric.bin_count()];
    for (bin, _) in observations(score, track, metric) {
        counts[bin] += 1.0;
    }
    Histogram::from_counts(counts)
}

/// Overlapped area of two normalized histograms: the min-sum, in [0, 1].
pub fn overlapped_area(p: &Histogram, q: &Histogram) -> Result<f64, MetricsError> {
    if p.bins.len() != q.bins.len() {
        return Err(MetricsError::BinMismatch(p.bins.len(), q.bins.len()));
    }
    if !p.normalized || !q.normalized {
        return Err(MetricsError::NotNormalized);
    }
    Ok(p.bins.iter().zip(&q.bins).map(|(a, b)| a.min(*b)).sum())
}

/// Per-(track, bar) overlap detail row backing the report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct BarDetail {
    pub metric: DistributionMetric,
    pub track: usize,
    /// None for a pooled whole-piece comparison.
    pub bar: Option<usize>,
    pub oa: f64,
}

/// Mean overlapped area between two scores for one metric.
///
/// Tracks pair by index. When every pair has equal bar counts the mean runs
/// over (track, bar) pairs, skipping bars empty on either side; otherwise
/// each pair is compared once via pooled piece-level histograms. Returns
/// `None` when nothing is comparable.
pub fn d_metric_detailed(
    a: &Score,
    b: &Score,
    metric: DistributionMetric,
) -> (Option<f64>, Vec<BarDetail>) {
    let pairs: Vec<usize> = (0..a.tracks.len().min(b.tracks.len()))
        .filter(|&i| !a.tracks[i].notes.is_empty() && !b.tracks[i].notes.is_empty())
        .collect();
    if pairs.is_empty() {
        return (None, Vec::new());
    }
    let equal_bars = pairs
        .iter()
        .all(|&i| track_bar_count(a, i) == track_bar_count(b, i));

    let mut details = Vec::new();
    let mut values = Vec::new();
    for &i in &pairs {
        if equal_bars {
            let ha = bar_histograms(a, i, metric);
            let hb = bar_histograms(b, i, metric);
            for (bar, (pa, pb)) in ha.iter().zip(&hb).enumerate() {
                if pa.is_empty() || pb.is_empty() {
                    continue;
                }
                let oa = overlapped_area(pa, pb).expect("equal bin counts");
                details.push(BarDetail {
                    metric,
                    track: i,
                    bar: Some(bar),
                    oa,
                });
                values.push(oa);
            }
        } else {
            let pa = pooled_histogram(a, i, metric);
            let pb = pooled_histogram(b, i, metric);
            if pa.is_empty() || pb.is_empty() {
                continue;
            }
            let oa = overlapped_area(&pa, &pb).expect("equal bin counts");
            details.push(BarDetail {
                metric,
                track: i,
                bar: None,
                oa,
            });
            values.push(oa);
        }
    }
    if values.is_empty() {
        (None, details)
    } else {
        (Some(values.iter().sum::<f64>() / values.len() as f64), details)
    }
}

pub fn d_metric(a: &Score, b: &Score, metric: DistributionMetric) -> Option<f64> {
    d_metric_detailed(a, b, metric).0
}

/// Evaluation summary for a pair of pieces.
#[derive(Debug, Clone, Default)]
pub struct SimilarityReport {
    pub d_values: BTreeMap<&'static str, Option<f64>>,
    pub details: Vec<BarDetail>,
    pub ps_by_p: BTreeMap<usize, f64>,
}

pub fn evaluate_distributions(a: &Score, b: &Score) -> SimilarityReport {
    let mut report = SimilarityReport::default();
    for metric in ALL_METRICS {
        let (value, details) = d_metric_detailed(a, b, metric);
        report.d_values.insert(metric.name(), value);
        report.details.extend(details);
    }
    report
}

fn contains_window(haystack: &[i64], needle: &[i64]) -> bool {
    haystack.len() >= needle.len() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Pattern similarity with the literal loop bounds: counts interval windows
/// of `y_hat` (p+1 consecutive intervals, scanned from the first up to but
/// not including the final possible window) that occur contiguously in `x`'s
/// interval stream, divided by `z_yhat - p`. Identical streams score < 1.
pub fn pattern_similarity(
    x: &SelectedEventStream,
    y_hat: &SelectedEventStream,
    p: usize,
) -> Result<f64, MetricsError> {
    assert!(p >= 1, "pattern length must be at least 1");
    let z_yhat = y_hat.len();
    if z_yhat <= p + 1 {
        return Err(MetricsError::TooShort { z: z_yhat, p });
    }
    let ix = x.intervals();
    let iy = y_hat.intervals();
    let mut matches = 0usize;
    let mut z = 1usize;
    while z < z_yhat - 1 - p {
        if contains_window(&ix, &iy[z - 1..z + p]) {
            matches += 1;
        }
        z += 1;
    }
    Ok(matches as f64 / (z_yhat - p) as f64)
}

/// Full-coverage variant: scans every interval window and divides by the
/// window count, so identical streams score exactly 1.
pub fn pattern_similarity_normalized(
    x: &SelectedEventStream,
    y_hat: &SelectedEventStream,
    p: usize,
) -> Result<f64, MetricsError> {
    assert!(p >= 1, "pattern length must be at least 1");
    let z_yhat = y_hat.len();
    if z_yhat <= p + 1 {
        return Err(MetricsError::TooShort { z: z_yhat, p });
    }
    let ix = x.intervals();
    let iy = y_hat.intervals();
    let window_count = iy.len() - p; // windows of p+1 intervals
    let matches = iy
        .windows(p + 1)
        .filter(|w| contains_window(&ix, w))
        .count();
    Ok(matches as f64 / window_count as f64)
}

// ---------------------------------------------------------------------------
// Kendall correlation
// ---------------------------------------------------------------------------

fn erfc(x: f64) -> f64 {
    // Numerical Recipes rational Chebyshev fit, |error| < 1.2e-7.
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t * (-z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
    .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

fn tie_groups(sorted: &[f64]) -> Vec<usize> {
    let mut groups = Vec::new();
    let mut run = 1usize;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            if run > 1 {
                groups.push(run);
            }
            run = 1;
        }
    }
    if run > 1 {
        groups.push(run);
    }
    groups
}

/// Number of permutations of n elements with exactly k inversions, for the
/// exact null distribution of the untied statistic.
fn inversion_counts(n: usize) -> Vec<u64> {
    let mut counts = vec![1u64];
    for m in 2..=n {
        let max_inv = m * (m - 1) / 2;
        let mut next = vec![0u64; max_inv + 1];
        for (k, &c) in counts.iter().enumerate() {
            for j in 0..m {
                next[k + j] += c;
            }
        }
        counts = next;
    }
    counts
}

/// Tie-corrected Kendall tau-b with a two-sided p-value.
///
/// The p-value uses the exact permutation distribution when n <= 10 and the
/// data are free of ties, and the tie-corrected normal approximation
/// otherwise.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<(f64, f64), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(MetricsError::DegenerateInput(
            "need at least 2 observations".into(),
        ));
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[i] - x[j]).partial_cmp(&0.0).ok_or_else(|| {
                MetricsError::DegenerateInput("non-finite value".into())
            })?;
            let dy = (y[i] - y[j]).partial_cmp(&0.0).ok_or_else(|| {
                MetricsError::DegenerateInput("non-finite value".into())
            })?;
            use std::cmp::Ordering::*;
            match (dx, dy) {
                (Equal, _) | (_, Equal) => {}
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tx = tie_groups(&xs);
    let ty = tie_groups(&ys);

    let n0 = (n * (n - 1) / 2) as i64;
    let n1: i64 = tx.iter().map(|&t| (t * (t - 1) / 2) as i64).sum();
    let n2: i64 = ty.iter().map(|&t| (t * (t - 1) / 2) as i64).sum();
    if n1 == n0 || n2 == n0 {
        return Err(MetricsError::DegenerateInput(
            "all values tied in one input".into(),
        ));
    }
    let num = concordant - discordant;
    let tau = num as f64 / (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();

    let p_value = if n <= 10 && tx.is_empty() && ty.is_empty() {
        // Exact: S = P - Q = n0 - 2 * inversions; the distribution of the
        // inversion count under the null is uniform over permutations.
        let counts = inversion_counts(n);
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let s_obs = num.abs();
        let mass: f64 = counts
            .iter()
            .enumerate()
            .filter(|&(k, _)| (n0 - 2 * k as i64).abs() >= s_obs)
            .map(|(_, &c)| c as f64)
            .sum();
        (mass / total).min(1.0)
    } else {
        let nf = n as f64;
        let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
        let vt: f64 = tx
            .iter()
            .map(|&t| t as f64 * (t as f64 - 1.0) * (2.0 * t as f64 + 5.0))
            .sum();
        let vu: f64 = ty
            .iter()
            .map(|&t| t as f64 * (t as f64 - 1.0) * (2.0 * t as f64 + 5.0))
            .sum();
        let sum_tx1: f64 = tx.iter().map(|&t| (t * (t - 1)) as f64).sum();
        let sum_ty1: f64 = ty.iter().map(|&t| (t * (t - 1)) as f64).sum();
        let sum_tx2: f64 = tx.iter().map(|&t| (t * (t - 1) * (t.max(2) - 2)) as f64).sum();
        let sum_ty2: f64 = ty.iter().map(|&t| (t * (t - 1) * (t.max(2) - 2)) as f64).sum();
        let v1 = sum_tx1 * sum_ty1 / (2.0 * nf * (nf - 1.0));
        let v2 = if n > 2 {
            sum_tx2 * sum_ty2 / (9.0 * nf * (nf - 1.0) * (nf - 2.0))
        } else {
            0.0
        };
        let var = (v0 - vt - vu) / 18.0 + v1 + v2;
        if var <= 0.0 {
            1.0
        } else {
            let z = num as f64 / var.sqrt();
            erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
        }
    };
    Ok((tau, p_value))
}

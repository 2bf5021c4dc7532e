//! Streaming estimators with uncertainty for percolation run batches:
//! survival probabilities (Wilson intervals), conditional empirical
//! Laplace transforms (percentile bootstrap), and binned conditional
//! transition transforms.
//!
//! A `BatchSummary` is a mergeable monoid: counts and sums merge
//! exactly, survivor records concatenate in run order, and interval
//! quantities are recomputed from the merged data. Workers can therefore
//! summarize disjoint chunks in parallel and fold the results in chunk
//! order without changing any estimate.

use serde::Serialize;
use thiserror::Error;

use crate::percolation::ClusterTrace;
use crate::rng::{Stream, DOMAIN_BOOTSTRAP};

/// 99% two-sided normal quantile.
pub const Z_99: f64 = 2.575_829_303_548_900_4;
/// Survivor floor below which the Laplace estimator refuses to run.
pub const MIN_SURVIVORS: u64 = 100;
/// Survivor floor below which a transition bin is dropped.
pub const MIN_BIN_COUNT: u64 = 200;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("insufficient survivors: {available} < required {required}")]
    InsufficientSurvivors { available: u64, required: u64 },
    #[error("level {level} not recorded by this batch (n_max = {n_max})")]
    LevelOutOfRange { level: u32, n_max: u32 },
}

/// Survivor record: the conditioning-level count and, when recorded, the
/// value-level count of one surviving run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SurvivorRecord {
    pub y_cond: u32,
    pub y_value: u32,
}

/// Compact accumulation of a run batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSummary {
    pub n_runs: u64,
    pub aborted: u64,
    /// Conditioning level n.
    pub cond_level: u32,
    /// Optional later level whose counts are kept per survivor.
    pub value_level: Option<u32>,
    /// survival_counts[k] = number of runs with Y_k > 0, k = 0..=n_max.
    pub survival_counts: Vec<u64>,
    /// One record per run with Y_cond > 0, in run order.
    pub survivors: Vec<SurvivorRecord>,
}

impl BatchSummary {
    pub fn new(n_max: u32, cond_level: u32, value_level: Option<u32>) -> Self {
        assert!(cond_level <= n_max);
        if let Some(v) = value_level {
            assert!(v <= n_max);
        }
        BatchSummary {
            n_runs: 0,
            aborted: 0,
            cond_level,
            value_level,
            survival_counts: vec![0; n_max as usize + 1],
            survivors: Vec::new(),
        }
    }

    pub fn n_max(&self) -> u32 {
        (self.survival_counts.len() - 1) as u32
    }

    pub fn add(&mut self, trace: &ClusterTrace) {
        assert!(trace.n_max >= self.n_max());
        self.n_runs += 1;
        for (k, &c) in trace.counts.iter().enumerate().take(self.survival_counts.len()) {
            if c == 0 {
                break;
            }
            self.survival_counts[k] += 1;
        }
        let y_cond = trace.y(self.cond_level);
        if y_cond > 0 {
            let y_value = self.value_level.map(|v| trace.y(v)).unwrap_or(0);
            self.survivors.push(SurvivorRecord {
                y_cond: y_cond.min(u32::MAX as u64) as u32,
                y_value: y_value.min(u32::MAX as u64) as u32,
            });
        }
    }

    pub fn add_aborted(&mut self) {
        self.aborted += 1;
    }

    /// Exact merge: counts add, survivor records concatenate in order.
    pub fn merge(mut self, other: BatchSummary) -> BatchSummary {
        assert_eq!(self.cond_level, other.cond_level);
        assert_eq!(self.value_level, other.value_level);
        assert_eq!(self.survival_counts.len(), other.survival_counts.len());
        self.n_runs += other.n_runs;
        self.aborted += other.aborted;
        for (a, b) in self.survival_counts.iter_mut().zip(other.survival_counts.iter()) {
            *a += b;
        }
        self.survivors.extend_from_slice(&other.survivors);
        self
    }

    pub fn survivors_at_cond(&self) -> u64 {
        self.survival_counts[self.cond_level as usize]
    }
}

/// Summarize `total_runs` runs in fixed chunks, in parallel, with a
/// deterministic chunk-order fold. The closure sees a run-index range
/// and returns that chunk's summary.
pub fn parallel_batch<F>(total_runs: u64, chunk_size: u64, make: F) -> BatchSummary
where
    F: Fn(std::ops::Range<u64>) -> BatchSummary + Sync,
{
    use rayon::prelude::*;
    assert!(total_runs > 0 && chunk_size > 0);
    let chunks = total_runs.div_ceil(chunk_size);
    let mut partials: Vec<BatchSummary> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk_size;
            let hi = (lo + chunk_size).min(total_runs);
            make(lo..hi)
        })
        .collect();
    let mut acc = partials.remove(0);
    for p in partials {
        acc = acc.merge(p);
    }
    acc
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    assert!(n > 0);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SurvivalEstimate {
    pub level: u32,
    pub n_runs: u64,
    pub survivors: u64,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Fraction of runs alive at `level`, with a Wilson 99% interval.
pub fn survival_estimate_from(
    summary: &BatchSummary,
    level: u32,
) -> Result<SurvivalEstimate, EstimatorError> {
    if summary.n_runs == 0 {
        return Err(EstimatorError::EmptyBatch);
    }
    if level > summary.n_max() {
        return Err(EstimatorError::LevelOutOfRange { level, n_max: summary.n_max() });
    }
    let survivors = summary.survival_counts[level as usize];
    let (ci_lo, ci_hi) = wilson_interval(survivors, summary.n_runs, Z_99);
    Ok(SurvivalEstimate {
        level,
        n_runs: summary.n_runs,
        survivors,
        p_hat: survivors as f64 / summary.n_runs as f64,
        ci_lo,
        ci_hi,
    })
}

/// Convenience form over a trace slice.
pub fn survival_estimate(
    traces: &[ClusterTrace],
    level: u32,
) -> Result<SurvivalEstimate, EstimatorError> {
    if traces.is_empty() {
        return Err(EstimatorError::EmptyBatch);
    }
    let n_max = traces.iter().map(|t| t.n_max).min().unwrap();
    if level > n_max {
        return Err(EstimatorError::LevelOutOfRange { level, n_max });
    }
    let mut s = BatchSummary::new(n_max, level, None);
    for t in traces {
        s.add(t);
    }
    survival_estimate_from(&s, level)
}

#[derive(Clone, Debug)]
pub struct BootstrapCfg {
    pub resamples: u32,
    pub seed: u64,
    /// Two-sided confidence level for the percentile interval.
    pub level: f64,
}

impl Default for BootstrapCfg {
    fn default() -> Self {
        BootstrapCfg { resamples: 1000, seed: 0, level: 0.99 }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LaplaceEstimate {
    pub theta: f64,
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub survivors: u64,
}

#[derive(Clone, Debug)]
pub struct LaplaceOptions {
    pub min_survivors: u64,
    pub bootstrap: BootstrapCfg,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        LaplaceOptions { min_survivors: MIN_SURVIVORS, bootstrap: BootstrapCfg::default() }
    }
}

/// Which survivor field feeds the transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformOf {
    CondLevel,
    ValueLevel,
}

/// Empirical conditional Laplace transform: the mean of
/// exp(-theta * scale * Y) over surviving runs, with a percentile
/// bootstrap interval. `scale` is the caller's n^-beta.
pub fn laplace_estimate_from(
    summary: &BatchSummary,
    thetas: &[f64],
    scale: f64,
    which: TransformOf,
    opts: &LaplaceOptions,
) -> Result<Vec<LaplaceEstimate>, EstimatorError> {
    let s = summary.survivors.len() as u64;
    if s < opts.min_survivors {
        return Err(EstimatorError::InsufficientSurvivors {
            available: s,
            required: opts.min_survivors,
        });
    }
    let values: Vec<f64> = summary
        .survivors
        .iter()
        .map(|r| match which {
            TransformOf::CondLevel => r.y_cond as f64,
            TransformOf::ValueLevel => r.y_value as f64,
        })
        .collect();
    Ok(laplace_with_bootstrap(&values, thetas, scale, &opts.bootstrap, s))
}

fn laplace_with_bootstrap(
    values: &[f64],
    thetas: &[f64],
    scale: f64,
    boot: &BootstrapCfg,
    survivors: u64,
) -> Vec<LaplaceEstimate> {
    let s = values.len();
    // Precompute the transformed columns once; resamples reuse them.
    let cols: Vec<Vec<f64>> = thetas
        .iter()
        .map(|&th| values.iter().map(|&y| (-th * scale * y).exp()).collect())
        .collect();
    let means: Vec<f64> =
        cols.iter().map(|col| col.iter().sum::<f64>() / s as f64).collect();

    let b = boot.resamples as usize;
    let mut resampled: Vec<Vec<f64>> = vec![Vec::with_capacity(b); thetas.len()];
    let mut stream = Stream::new(DOMAIN_BOOTSTRAP, boot.seed);
    for _ in 0..b {
        let mut sums = vec![0.0; thetas.len()];
        for _ in 0..s {
            let idx = stream.index(s as u64) as usize;
            for (t, col) in cols.iter().enumerate() {
                sums[t] += col[idx];
            }
        }
        for (t, sum) in sums.iter().enumerate() {
            resampled[t].push(sum / s as f64);
        }
    }
    let qlo = (1.0 - boot.level) / 2.0;
    let qhi = 1.0 - qlo;
    thetas
        .iter()
        .enumerate()
        .map(|(t, &theta)| {
            let mut r = resampled[t].clone();
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            LaplaceEstimate {
                theta,
                value: means[t],
                ci_lo: percentile(&r, qlo),
                ci_hi: percentile(&r, qhi),
                survivors,
            }
        })
        .collect()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Convenience form over a trace slice: conditional on Y_n > 0, the
/// transform of scale * Y_n.
pub fn laplace_estimate(
    traces: &[ClusterTrace],
    n: u32,
    thetas: &[f64],
    scale: f64,
) -> Result<Vec<LaplaceEstimate>, EstimatorError> {
    if traces.is_empty() {
        return Err(EstimatorError::EmptyBatch);
    }
    let mut s = BatchSummary::new(n, n, None);
    for t in traces {
        s.add(t);
    }
    laplace_estimate_from(&s, thetas, scale, TransformOf::CondLevel, &LaplaceOptions::default())
}

/// Bin layout over the rescaled conditioning values a = scale * Y_cond.
#[derive(Clone, Debug)]
pub enum BinSpec {
    /// One bin at the survivor median with half-width 0.25 * median.
    MedianBin,
    /// Explicit centers, half-width = rel_halfwidth * center.
    Centers { centers: Vec<f64>, rel_halfwidth: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct BinEstimate {
    pub center: f64,
    pub halfwidth: f64,
    pub count: u64,
    /// Mean of a over the bin's survivors.
    pub mean_a: f64,
    pub dropped: bool,
    pub points: Vec<LaplaceEstimate>,
}

/// Conditional transform of scale * Y_value given scale * Y_cond in a
/// bin. Bins with fewer than MIN_BIN_COUNT survivors are dropped but
/// still reported, flagged.
pub fn binned_transition_estimate_from(
    summary: &BatchSummary,
    thetas: &[f64],
    scale: f64,
    bins: &BinSpec,
    boot: &BootstrapCfg,
) -> Result<Vec<BinEstimate>, EstimatorError> {
    assert!(summary.value_level.is_some(), "batch must record a value level");
    if summary.n_runs == 0 {
        return Err(EstimatorError::EmptyBatch);
    }
    let survivors = &summary.survivors;
    if survivors.is_empty() {
        return Err(EstimatorError::InsufficientSurvivors { available: 0, required: 1 });
    }
    let centers: Vec<(f64, f64)> = match bins {
        BinSpec::MedianBin => {
            let mut a: Vec<f64> = survivors.iter().map(|r| r.y_cond as f64 * scale).collect();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let med = a[a.len() / 2];
            vec![(med, 0.25 * med)]
        }
        BinSpec::Centers { centers, rel_halfwidth } => {
            centers.iter().map(|&c| (c, rel_halfwidth * c)).collect()
        }
    };
    let mut out = Vec::with_capacity(centers.len());
    for (center, halfwidth) in centers {
        let lo = center - halfwidth;
        let hi = center + halfwidth;
        let members: Vec<&SurvivorRecord> = survivors
            .iter()
            .filter(|r| {
                let a = r.y_cond as f64 * scale;
                a >= lo && a <= hi
            })
            .collect();
        let count = members.len() as u64;
        if count < MIN_BIN_COUNT {
            out.push(BinEstimate {
                center,
                halfwidth,
                count,
                mean_a: f64::NAN,
                dropped: true,
                points: Vec::new(),
            });
            continue;
        }
        let mean_a =
            members.iter().map(|r| r.y_cond as f64 * scale).sum::<f64>() / count as f64;
        let values: Vec<f64> = members.iter().map(|r| r.y_value as f64).collect();
        let points = laplace_with_bootstrap(&values, thetas, scale, boot, count);
        out.push(BinEstimate { center, halfwidth, count, mean_a, dropped: false, points });
    }
    Ok(out)
}

/// Convenience form over traces recording Y_n and Y_2n.
pub fn binned_transition_estimate(
    traces: &[ClusterTrace],
    n: u32,
    thetas: &[f64],
    bins: &BinSpec,
    scale: f64,
) -> Result<Vec<BinEstimate>, EstimatorError> {
    if traces.is_empty() {
        return Err(EstimatorError::EmptyBatch);
    }
    let mut s = BatchSummary::new(2 * n, n, Some(2 * n));
    for t in traces {
        s.add(t);
    }
    binned_transition_estimate_from(&s, thetas, scale, bins, &BootstrapCfg::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{bernoulli_threshold, Stream, DOMAIN_PERC};

    fn synthetic_trace(counts: Vec<u64>) -> ClusterTrace {
        let n_max = (counts.len() - 1) as u32;
        let survival = *counts.last().unwrap() > 0;
        ClusterTrace { n_max, counts, survival, level_sets: None }
    }

    #[test]
    fn survival_all_alive() {
        let traces: Vec<ClusterTrace> =
            (0..50).map(|_| synthetic_trace(vec![1, 2, 3])).collect();
        let e = survival_estimate(&traces, 2).unwrap();
        assert_eq!(e.p_hat, 1.0);
        assert_eq!(e.ci_hi, 1.0);
        assert!(e.ci_lo < 1.0);
    }

    #[test]
    fn survival_level_zero_is_certain() {
        let traces: Vec<ClusterTrace> =
            (0..10).map(|i| synthetic_trace(vec![1, i % 2])).collect();
        let e = survival_estimate(&traces, 0).unwrap();
        assert_eq!(e.p_hat, 1.0);
    }

    #[test]
    fn survival_synthetic_bernoulli() {
        // Bernoulli(0.03) stream: the Wilson CI should cover 0.03.
        let thr = bernoulli_threshold(0.03);
        let mut s = Stream::new(DOMAIN_PERC, 123);
        let mut summary = BatchSummary::new(1, 1, None);
        for _ in 0..1_000_000 {
            let alive = s.bernoulli(thr);
            summary.add(&synthetic_trace(vec![1, alive as u64]));
        }
        let e = survival_estimate_from(&summary, 1).unwrap();
        assert!(e.ci_lo <= 0.03 && 0.03 <= e.ci_hi, "CI [{}, {}]", e.ci_lo, e.ci_hi);
        assert!((e.p_hat - 0.03).abs() < 4.0 * (0.03 * 0.97 / 1e6f64).sqrt());
    }

    #[test]
    fn survival_empty_batch() {
        assert!(matches!(survival_estimate(&[], 0), Err(EstimatorError::EmptyBatch)));
    }

    #[test]
    fn wilson_coverage_monte_carlo() {
        // 1000 repetitions of Binomial(1000, 0.3); nominal 99% coverage,
        // asserted within 3 sigma of nominal.
        let p = 0.3;
        let thr = bernoulli_threshold(p);
        let mut s = Stream::new(DOMAIN_PERC, 7);
        let reps = 1000;
        let n = 1000u64;
        let mut covered = 0u64;
        for _ in 0..reps {
            let hits = (0..n).filter(|_| s.bernoulli(thr)).count() as u64;
            let (lo, hi) = wilson_interval(hits, n, Z_99);
            if lo <= p && p <= hi {
                covered += 1;
            }
        }
        let cov = covered as f64 / reps as f64;
        let sigma = (0.99 * 0.01 / reps as f64).sqrt();
        assert!((cov - 0.99).abs() < 3.0 * sigma, "coverage = {cov}");
    }

    #[test]
    fn laplace_theta_zero_is_one() {
        let traces: Vec<ClusterTrace> =
            (0..200).map(|i| synthetic_trace(vec![1, 1 + i % 5])).collect();
        let e = laplace_estimate(&traces, 1, &[0.0], 1.0).unwrap();
        assert_eq!(e[0].value, 1.0);
    }

    #[test]
    fn laplace_point_mass() {
        // All survivors have Y_n = n^beta, so the transform is exactly
        // exp(-theta).
        let n = 16u32;
        let traces: Vec<ClusterTrace> =
            (0..500).map(|_| synthetic_trace(vec![1; n as usize + 1].iter().enumerate().map(|(k, _)| if k == n as usize { 16 } else { 1 }).collect())).collect();
        let scale = 1.0 / 16.0;
        let est = laplace_estimate(&traces, n, &[0.5, 1.0, 2.0], scale).unwrap();
        for e in est {
            assert!((e.value - (-e.theta).exp()).abs() < 1e-12);
            assert!(e.ci_lo <= e.value && e.value <= e.ci_hi);
        }
    }

    #[test]
    fn laplace_monotone_in_theta() {
        let traces: Vec<ClusterTrace> =
            (0..300).map(|i| synthetic_trace(vec![1, 1 + (i * 7) % 23])).collect();
        let thetas = [0.1, 0.5, 1.0, 2.0, 4.0];
        let est = laplace_estimate(&traces, 1, &thetas, 0.25).unwrap();
        for w in est.windows(2) {
            assert!(w[1].value < w[0].value);
        }
    }

    #[test]
    fn laplace_insufficient_survivors() {
        let traces: Vec<ClusterTrace> =
            (0..99).map(|_| synthetic_trace(vec![1, 2])).collect();
        assert!(matches!(
            laplace_estimate(&traces, 1, &[1.0], 1.0),
            Err(EstimatorError::InsufficientSurvivors { available: 99, required: 100 })
        ));
    }

    #[test]
    fn binned_identity_dynamics() {
        // Y_2n = Y_n exactly: the conditional transform at the bin equals
        // the transform of the bin's own values.
        let n = 8u32;
        let mut traces = Vec::new();
        for i in 0..3000u64 {
            let y = 6 + (i % 5); // a = y/8 in [0.75, 1.25]
            let mut counts = vec![1u64; 2 * n as usize + 1];
            counts[n as usize] = y;
            counts[2 * n as usize] = y;
            traces.push(synthetic_trace(counts));
        }
        let scale = 1.0 / n as f64;
        let bins = binned_transition_estimate(&traces, n, &[1.0], &BinSpec::MedianBin, scale)
            .unwrap();
        assert_eq!(bins.len(), 1);
        let bin = &bins[0];
        assert!(!bin.dropped);
        // exp(-theta a) averaged over the in-bin values; bin width effect
        // bounded by the spread of a in the bin.
        let theta = 1.0;
        let target = (-theta * bin.mean_a).exp();
        assert!(
            (bin.points[0].value - target).abs() < 0.02,
            "{} vs {}",
            bin.points[0].value,
            target
        );
    }

    #[test]
    fn binned_drops_sparse_bins() {
        let n = 4u32;
        let traces: Vec<ClusterTrace> = (0..300)
            .map(|_| synthetic_trace(vec![1, 1, 1, 1, 2, 2, 2, 2, 2]))
            .collect();
        let bins = binned_transition_estimate(
            &traces,
            n,
            &[1.0],
            &BinSpec::Centers { centers: vec![0.5, 100.0], rel_halfwidth: 0.25 },
            1.0 / n as f64,
        )
        .unwrap();
        assert!(!bins[0].dropped);
        assert!(bins[1].dropped);
        assert_eq!(bins[1].count, 0);
    }

    #[test]
    fn merge_equals_concatenation() {
        let ta: Vec<ClusterTrace> =
            (0..40).map(|i| synthetic_trace(vec![1, i % 3, i % 2])).collect();
        let tb: Vec<ClusterTrace> =
            (0..60).map(|i| synthetic_trace(vec![1, (i + 1) % 4, i % 5])).collect();
        let build = |ts: &[ClusterTrace]| {
            let mut s = BatchSummary::new(2, 1, Some(2));
            for t in ts {
                s.add(t);
            }
            s
        };
        let merged = build(&ta).merge(build(&tb));
        let all: Vec<ClusterTrace> = ta.iter().chain(tb.iter()).cloned().collect();
        let direct = build(&all);
        assert_eq!(merged, direct);
    }

    #[test]
    fn parallel_batch_is_deterministic() {
        let make = |range: std::ops::Range<u64>| {
            let mut s = BatchSummary::new(1, 1, None);
            for i in range {
                s.add(&synthetic_trace(vec![1, i % 2]));
            }
            s
        };
        let a = parallel_batch(10_000, 256, make);
        let b = parallel_batch(10_000, 256, make);
        assert_eq!(a, b);
        // chunk size must not change results
        let c = parallel_batch(10_000, 1024, make);
        assert_eq!(a.survival_counts, c.survival_counts);
        assert_eq!(a.survivors, c.survivors);
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(y1: u64, y2: u64) -> ClusterTrace {
        ClusterTrace {
            n_max: 2,
            counts: vec![1, y1, if y1 == 0 { 0 } else { y2 }],
            survival: y1 != 0 && y2 != 0,
            level_sets: None,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn merge_equals_concatenation(
            ya in proptest::collection::vec((0u64..5, 0u64..5), 1..60),
            yb in proptest::collection::vec((0u64..5, 0u64..5), 1..60),
        ) {
            let build = |pairs: &[(u64, u64)]| {
                let mut s = BatchSummary::new(2, 1, Some(2));
                for &(a, b) in pairs {
                    s.add(&trace(a, b));
                }
                s
            };
            let merged = build(&ya).merge(build(&yb));
            let mut all = ya.clone();
            all.extend_from_slice(&yb);
            prop_assert_eq!(merged, build(&all));
        }

        #[test]
        fn wilson_interval_contains_point_estimate(s in 0u64..500, extra in 1u64..500) {
            let n = s + extra;
            let (lo, hi) = wilson_interval(s, n, Z_99);
            let p = s as f64 / n as f64;
            prop_assert!(lo <= p && p <= hi);
            prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        }
    }
}

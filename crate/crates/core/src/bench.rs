//! Measurement of clustered projection against the exact baseline.
//!
//! Every aggregate in a [`BenchReport`] is derived from per-batch
//! [`BatchLog`] entries, which are kept in the report and can be written out
//! alongside it.

use std::fmt::Write as _;
use std::time::Instant;

use crate::engine::{clustered_project, flop_estimate};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans_train, KMeansParams, DEFAULT_ITERS};
use crate::map::{build_active_sets, k_truncate, ClusterMap, DirectionMeta};
use crate::recorder::HiddenRecordSet;
use crate::tensor::{argmax, full_project, softmax_rows, topk_row, HiddenBatch, WeightMatrix};

pub const CSV_HEADER: &str = "r,K,mean_active_pct,max_active_pct,argmax_agree_pct,top5_overlap_pct,flop_ratio,wall_exact_ms,wall_clustered_ms,fallbacks";

pub const RAW_HEADER: &str =
    "r,K,seed,batch,rows,active,union,argmax_hits,topk_hits,topk,fallback,mults";

/// Raw measurement of one evaluation batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLog {
    pub r: usize,
    pub k: usize,
    pub seed: u64,
    pub batch: usize,
    pub rows: usize,
    /// Columns actually projected: the union size, or N after a fallback.
    pub active: usize,
    pub union: usize,
    pub argmax_hits: usize,
    /// Sum over rows of `|clustered top-k ∩ exact top-k|`.
    pub topk_hits: usize,
    pub topk: usize,
    pub fallback: bool,
    pub mults: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveStats {
    pub mean_pct: f64,
    pub max_pct: f64,
    pub per_batch_pct: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agreement {
    pub argmax_pct: f64,
    pub topk_overlap_pct: f64,
    pub rows: usize,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub exact_ms: f64,
    pub clustered_ms: f64,
    /// `exact_ms / clustered_ms`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub r: usize,
    pub k: usize,
    pub mean_active_pct: f64,
    pub max_active_pct: f64,
    pub argmax_agree_pct: f64,
    pub topk_overlap_pct: f64,
    pub flop_ratio: f64,
    pub wall_exact_ms: f64,
    pub wall_clustered_ms: f64,
    pub fallbacks: usize,
}

/// Per-cluster active percentages of one trained map.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterProfile {
    pub r: usize,
    pub k: usize,
    pub seed: u64,
    pub member_counts: Vec<u32>,
    pub active_pct: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<SweepRow>,
    pub raw: Vec<BatchLog>,
    pub profiles: Vec<ClusterProfile>,
}

fn check_batches(batches: &[HiddenBatch]) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::invalid("no evaluation batches"));
    }
    Ok(())
}

/// Runs exact and clustered projection on every batch and logs the comparison.
pub fn evaluate_map(
    w: &WeightMatrix,
    map: &ClusterMap,
    batches: &[HiddenBatch],
    topk: usize,
    seed: u64,
) -> Result<Vec<BatchLog>> {
    check_batches(batches)?;
    if topk == 0 || topk > w.n() {
        return Err(Error::invalid(format!(
            "top-k overlap needs 1 <= k <= N, got {topk}"
        )));
    }
    batches
        .iter()
        .enumerate()
        .map(|(b, h)| {
            let exact = softmax_rows(&full_project(h, w)?)?;
            let out = clustered_project(h, w, map)?;
            let mut argmax_hits = 0;
            let mut topk_hits = 0;
            for m in 0..h.len() {
                let (e, c) = (exact.row(m), out.probs.row(m));
                argmax_hits += usize::from(argmax(e) == argmax(c));
                let want = topk_row(e, topk);
                topk_hits += topk_row(c, topk)
                    .iter()
                    .filter(|id| want.contains(id))
                    .count();
            }
            Ok(BatchLog {
                r: map.r(),
                k: map.k(),
                seed,
                batch: b,
                rows: h.len(),
                active: if out.fallback { w.n() } else { out.union.len() },
                union: out.union.len(),
                argmax_hits,
                topk_hits,
                topk,
                fallback: out.fallback,
                mults: out.mults,
            })
        })
        .collect()
}

fn active_from_logs(logs: &[BatchLog], n: usize) -> ActiveStats {
    let per_batch_pct: Vec<f64> = logs
        .iter()
        .map(|l| 100.0 * l.active as f64 / n as f64)
        .collect();
    ActiveStats {
        mean_pct: per_batch_pct.iter().sum::<f64>() / per_batch_pct.len().max(1) as f64,
        max_pct: per_batch_pct.iter().copied().fold(0.0, f64::max),
        per_batch_pct,
    }
}

fn agreement_from_logs(logs: &[BatchLog]) -> Agreement {
    let rows: usize = logs.iter().map(|l| l.rows).sum();
    let argmax: usize = logs.iter().map(|l| l.argmax_hits).sum();
    let slots: usize = logs.iter().map(|l| l.rows * l.topk).sum();
    let topk: usize = logs.iter().map(|l| l.topk_hits).sum();
    Agreement {
        argmax_pct: 100.0 * argmax as f64 / rows.max(1) as f64,
        topk_overlap_pct: 100.0 * topk as f64 / slots.max(1) as f64,
        rows,
        fallbacks: logs.iter().filter(|l| l.fallback).count(),
    }
}

/// Share of the vocabulary touched per batch (`100 * |union| / N`).
pub fn measure_active(map: &ClusterMap, batches: &[HiddenBatch]) -> Result<ActiveStats> {
    check_batches(batches)?;
    let mut logs = Vec::with_capacity(batches.len());
    for h in batches {
        let ids = crate::engine::predict_clusters(h, map)?;
        let u = crate::engine::batch_union(&ids, map)?;
        let active = if u.is_empty() { map.n() } else { u.len() };
        logs.push(BatchLog {
            r: map.r(),
            k: map.k(),
            seed: 0,
            batch: logs.len(),
            rows: h.len(),
            active,
            union: u.len(),
            argmax_hits: 0,
            topk_hits: 0,
            topk: 0,
            fallback: u.is_empty(),
            mults: 0,
        });
    }
    Ok(active_from_logs(&logs, map.n()))
}

pub fn measure_agreement(
    w: &WeightMatrix,
    map: &ClusterMap,
    batches: &[HiddenBatch],
    k: usize,
) -> Result<Agreement> {
    Ok(agreement_from_logs(&evaluate_map(w, map, batches, k, 0)?))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median wall time over `repeats` runs of exact and clustered projection (softmax included),
/// measured on a single worker thread.
pub fn time_projection(
    w: &WeightMatrix,
    map: &ClusterMap,
    batches: &[HiddenBatch],
    repeats: usize,
) -> Result<Timing> {
    check_batches(batches)?;
    if repeats < 3 {
        return Err(Error::invalid(format!(
            "timing needs >= 3 repeats, got {repeats}"
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build timing pool: {e}")))?;
    pool.install(|| {
        let mut exact = Vec::with_capacity(repeats);
        let mut clustered = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            for h in batches {
                std::hint::black_box(softmax_rows(&full_project(h, w)?)?);
            }
            exact.push(t.elapsed().as_secs_f64() * 1e3);
            let t = Instant::now();
            for h in batches {
                std::hint::black_box(clustered_project(h, w, map)?);
            }
            clustered.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let (exact_ms, clustered_ms) = (median(exact), median(clustered));
        Ok(Timing {
            exact_ms,
            clustered_ms,
            ratio: exact_ms / clustered_ms,
        })
    })
}

/// Aggregates raw logs of one `(r, K)` cell into a report row.
pub fn row_from_logs(
    logs: &[BatchLog],
    r: usize,
    k: usize,
    n: usize,
    timing: Option<Timing>,
) -> SweepRow {
    let active = active_from_logs(logs, n);
    let agree = agreement_from_logs(logs);
    let mean_active = logs.iter().map(|l| l.active as f64).sum::<f64>() / logs.len().max(1) as f64;
    SweepRow {
        r,
        k,
        mean_active_pct: active.mean_pct,
        max_active_pct: active.max_pct,
        argmax_agree_pct: agree.argmax_pct,
        topk_overlap_pct: agree.topk_overlap_pct,
        flop_ratio: n as f64 / (r as f64 + mean_active),
        wall_exact_ms: timing.map_or(0.0, |t| t.exact_ms),
        wall_clustered_ms: timing.map_or(0.0, |t| t.clustered_ms),
        fallbacks: agree.fallbacks,
    }
}

/// Training records, evaluation batches and weights for a sweep.
#[derive(Debug, Clone)]
pub struct Workload {
    pub weights: WeightMatrix,
    /// Recorded at a K at least as large as every swept K.
    pub train: HiddenRecordSet,
    pub eval: Vec<HiddenBatch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub r_values: Vec<usize>,
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub iters: usize,
    /// Width of the top-k overlap metric.
    pub overlap_k: usize,
    /// Timing repeats per cell; `None` skips timing.
    pub timing_repeats: Option<usize>,
    pub direction: DirectionMeta,
}

impl SweepConfig {
    pub fn new(r_values: Vec<usize>, k_values: Vec<usize>, seeds: Vec<u64>) -> Self {
        Self {
            r_values,
            k_values,
            seeds,
            iters: DEFAULT_ITERS,
            overlap_k: 5,
            timing_repeats: None,
            direction: DirectionMeta::default(),
        }
    }
}

/// Cross product over `r x K x seed`. Centroids are trained once per `(r, seed)`
/// and shared by every K, so active sets nest across K within a cell.
pub fn sweep(config: &SweepConfig, workload: &Workload) -> Result<BenchReport> {
    if config.r_values.is_empty() || config.k_values.is_empty() || config.seeds.is_empty() {
        return Err(Error::invalid("sweep needs non-empty r, K and seed lists"));
    }
    let max_k = *config.k_values.iter().max().unwrap();
    if max_k > workload.train.k() {
        return Err(Error::invalid(format!(
            "sweep K={max_k} exceeds the recorded K={}",
            workload.train.k()
        )));
    }
    let n = workload.weights.n();
    let vectors = workload.train.vectors()?;
    let truncated: Vec<HiddenRecordSet> = config
        .k_values
        .iter()
        .map(|&k| k_truncate(&workload.train, k))
        .collect::<Result<_>>()?;

    let mut report = BenchReport::default();
    let mut cells: Vec<Vec<BatchLog>> =
        vec![Vec::new(); config.r_values.len() * config.k_values.len()];
    let mut timings: Vec<Option<Timing>> = vec![None; cells.len()];
    for &seed in &config.seeds {
        for (ri, &r) in config.r_values.iter().enumerate() {
            let params = KMeansParams {
                r,
                iters: config.iters,
                seed,
                min_rel_improvement: None,
            };
            let centroids = kmeans_train(&vectors, &params)?;
            for (ki, records) in truncated.iter().enumerate() {
                let map = build_active_sets(records, &centroids, n, config.direction.clone())?;
                let stats = map.build_stats();
                report.profiles.push(ClusterProfile {
                    r,
                    k: records.k(),
                    seed,
                    member_counts: stats.member_counts,
                    active_pct: stats.active_pct,
                });
                let logs = evaluate_map(
                    &workload.weights,
                    &map,
                    &workload.eval,
                    config.overlap_k,
                    seed,
                )?;
                let cell = ri * config.k_values.len() + ki;
                if let (Some(repeats), None) = (config.timing_repeats, timings[cell]) {
                    timings[cell] = Some(time_projection(
                        &workload.weights,
                        &map,
                        &workload.eval,
                        repeats,
                    )?);
                }
                cells[cell].extend(logs);
            }
        }
    }
    for (ri, &r) in config.r_values.iter().enumerate() {
        for (ki, &k) in config.k_values.iter().enumerate() {
            let cell = ri * config.k_values.len() + ki;
            report
                .rows
                .push(row_from_logs(&cells[cell], r, k, n, timings[cell]));
        }
    }
    report.raw = cells.into_iter().flatten().collect();
    Ok(report)
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
                r.r,
                r.k,
                r.mean_active_pct,
                r.max_active_pct,
                r.argmax_agree_pct,
                r.topk_overlap_pct,
                r.flop_ratio,
                r.wall_exact_ms,
                r.wall_clustered_ms,
                r.fallbacks
            );
        }
        out
    }

    pub fn raw_csv(&self) -> String {
        let mut out = String::from(RAW_HEADER);
        out.push('\n');
        for l in &self.raw {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                l.r,
                l.k,
                l.seed,
                l.batch,
                l.rows,
                l.active,
                l.union,
                l.argmax_hits,
                l.topk_hits,
                l.topk,
                u8::from(l.fallback),
                l.mults
            );
        }
        out
    }

    pub fn profile_csv(&self) -> String {
        let mut out = String::from("r,K,seed,cluster,members,active_pct\n");
        for p in &self.profiles {
            for (j, (&m, &a)) in p.member_counts.iter().zip(&p.active_pct).enumerate() {
                let _ = writeln!(out, "{},{},{},{j},{m},{a:.4}", p.r, p.k, p.seed);
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>6} {:>3} {:>10} {:>10} {:>10} {:>10} {:>8} {:>10} {:>10} {:>5}\n",
            "r",
            "K",
            "mean_act%",
            "max_act%",
            "argmax%",
            "top5%",
            "flops",
            "exact_ms",
            "clust_ms",
            "fb"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>6} {:>3} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>8.2} {:>10.3} {:>10.3} {:>5}",
                r.r,
                r.k,
                r.mean_active_pct,
                r.max_active_pct,
                r.argmax_agree_pct,
                r.topk_overlap_pct,
                r.flop_ratio,
                r.wall_exact_ms,
                r.wall_clustered_ms,
                r.fallbacks
            );
        }
        out
    }
}

/// Re-derives report rows from raw logs, grouping by `(r, K)` in first-seen order.
pub fn rows_from_raw(raw: &[BatchLog], n: usize) -> Vec<SweepRow> {
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for l in raw {
        if !keys.contains(&(l.r, l.k)) {
            keys.push((l.r, l.k));
        }
    }
    keys.into_iter()
        .map(|(r, k)| {
            let logs: Vec<BatchLog> = raw
                .iter()
                .filter(|l| (l.r, l.k) == (r, k))
                .cloned()
                .collect();
            row_from_logs(&logs, r, k, n, None)
        })
        .collect()
}

/// Multiplications the FLOP model predicts for a logged batch.
pub fn predicted_mults(log: &BatchLog, d: usize, n: usize) -> u64 {
    flop_estimate(log.rows, d, n, log.r, log.active).clustered_mults
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmeans::CentroidSet;
    use crate::recorder::record;
    use crate::synth::{blocked_workload, gen_hidden, WorkloadParams};

    fn small_workload() -> Workload {
        let p = WorkloadParams::new(16, 512, 4, 3);
        let wl = blocked_workload(&p).unwrap();
        let train = gen_hidden(&wl.mixture, 3000, 1).unwrap();
        let held = gen_hidden(&wl.mixture, 320, 2).unwrap();
        let train = record([&train.vectors], &wl.weights, 5, "B0En").unwrap();
        let eval = HiddenRecordSet::hidden_only(&held.vectors, "B0En")
            .unwrap()
            .batches(32)
            .unwrap();
        Workload {
            weights: wl.weights,
            train,
            eval,
        }
    }

    fn full_map(w: &WeightMatrix) -> ClusterMap {
        ClusterMap::new(
            CentroidSet::new(w.d(), vec![0.0; w.d()]).unwrap(),
            vec![(0..w.n() as u32).collect()],
            vec![1],
            w.n(),
            1,
            DirectionMeta::default(),
        )
        .unwrap()
    }

    #[test]
    fn full_map_is_all_active_and_agrees() {
        let wl = small_workload();
        let map = full_map(&wl.weights);
        let a = measure_active(&map, &wl.eval).unwrap();
        assert_eq!(a.mean_pct, 100.0);
        let g = measure_agreement(&wl.weights, &map, &wl.eval, 5).unwrap();
        assert_eq!((g.argmax_pct, g.topk_overlap_pct), (100.0, 100.0));
    }

    #[test]
    fn toy_union_is_seventy_percent() {
        let map = ClusterMap::new(
            CentroidSet::new(1, vec![0.0, 10.0, 20.0]).unwrap(),
            vec![vec![2, 4, 6], vec![2, 8, 9], vec![1, 3]],
            vec![1, 1, 1],
            10,
            3,
            DirectionMeta::default(),
        )
        .unwrap();
        let h = HiddenBatch::new(1, vec![0.0, 10.0, 20.0]).unwrap();
        let a = measure_active(&map, &[h]).unwrap();
        assert!((a.mean_pct - 70.0).abs() < 1e-12);
    }

    #[test]
    fn single_cell_sweep_equals_direct_measurement() {
        let wl = small_workload();
        let config = SweepConfig::new(vec![16], vec![3], vec![7]);
        let report = sweep(&config, &wl).unwrap();
        let centroids =
            kmeans_train(&wl.train.vectors().unwrap(), &KMeansParams::new(16, 7)).unwrap();
        let map = build_active_sets(
            &k_truncate(&wl.train, 3).unwrap(),
            &centroids,
            512,
            DirectionMeta::default(),
        )
        .unwrap();
        let a = measure_active(&map, &wl.eval).unwrap();
        let g = measure_agreement(&wl.weights, &map, &wl.eval, 5).unwrap();
        let row = &report.rows[0];
        assert_eq!(row.mean_active_pct, a.mean_pct);
        assert_eq!(row.max_active_pct, a.max_pct);
        assert_eq!(row.argmax_agree_pct, g.argmax_pct);
        assert_eq!(row.topk_overlap_pct, g.topk_overlap_pct);
    }

    #[test]
    fn report_rows_recomputable_from_raw_logs() {
        let wl = small_workload();
        let config = SweepConfig::new(vec![4, 8], vec![1, 5], vec![1, 2]);
        let report = sweep(&config, &wl).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.profiles.len(), 8);
        assert_eq!(rows_from_raw(&report.raw, 512), report.rows);
        for l in &report.raw {
            assert_eq!(l.mults, predicted_mults(l, 16, 512));
        }
        let csv = report.to_csv();
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(report.raw_csv().lines().count(), 1 + report.raw.len());
    }

    #[test]
    fn sweep_and_timing_reject_bad_input() {
        let wl = small_workload();
        assert!(sweep(&SweepConfig::new(vec![], vec![1], vec![0]), &wl).is_err());
        assert!(sweep(&SweepConfig::new(vec![4], vec![6], vec![0]), &wl).is_err());
        let map = full_map(&wl.weights);
        assert!(time_projection(&wl.weights, &map, &wl.eval, 2).is_err());
        let t = time_projection(&wl.weights, &map, &wl.eval[..1], 3).unwrap();
        assert!(t.exact_ms > 0.0 && t.clustered_ms > 0.0);
    }

    #[test]
    fn percentages_in_range_and_k_monotone() {
        let wl = small_workload();
        let report = sweep(&SweepConfig::new(vec![8, 32], vec![1, 3, 5], vec![3]), &wl).unwrap();
        for row in &report.rows {
            for v in [
                row.mean_active_pct,
                row.max_active_pct,
                row.argmax_agree_pct,
                row.topk_overlap_pct,
            ] {
                assert!((0.0..=100.0).contains(&v));
            }
            if row.mean_active_pct + 100.0 * row.r as f64 / 512.0 < 100.0 {
                assert!(row.flop_ratio >= 1.0);
            }
        }
        for chunk in report.rows.chunks(3) {
            assert!(chunk[0].mean_active_pct <= chunk[1].mean_active_pct);
            assert!(chunk[1].mean_active_pct <= chunk[2].mean_active_pct);
        }
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clustervocab::bench::{
    evaluate_map, row_from_logs, sweep, time_projection, BenchReport, SweepConfig, Workload,
};
use clustervocab::engine::{clustered_project, decode as run_decode, DecodeConfig};
use clustervocab::kmeans::KMeansParams;
use clustervocab::map::{
    build_active_sets, filter_by_direction, k_truncate, train_map as fit_map, ClusterMap,
    DirectionMeta,
};
use clustervocab::recorder::{merge, record as run_record, HiddenRecordSet};
use clustervocab::rng::derive_seed;
use clustervocab::store;
use clustervocab::synth::{
    blocked_workload, gen_hidden, stub_hidden_source, Mixture, SourceKind, WorkloadParams,
};
use clustervocab::tensor::{argmax, full_project, softmax_rows, WeightMatrix};
use clustervocab::Error;

use crate::{BenchArgs, DecodeArgs, Mode, ProjectArgs, RecordArgs, SynthArgs, TrainMapArgs};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(Error::Io(e))
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text)?;
    Ok(())
}

pub fn synth(a: SynthArgs) -> Outcome {
    if a.d == 0 || a.n == 0 || a.count == 0 {
        return Err(usage("--d, --n and --count must be >= 1"));
    }
    if a.blocks == 0 || a.blocks > a.n {
        return Err(usage(format!(
            "--blocks must satisfy 1 <= blocks <= n, got {}",
            a.blocks
        )));
    }
    if a.count < a.blocks {
        return Err(usage("--count must be at least --blocks"));
    }
    if a.k == 0 || a.k > a.n {
        return Err(usage(format!("--k must satisfy 1 <= k <= n, got {}", a.k)));
    }
    let mut p = WorkloadParams::new(a.d, a.n, a.blocks, a.seed);
    p.block_noise = a.noise;
    p.hidden_scale = a.scale;
    p.hidden_std = a.std;
    let wl = blocked_workload(&p)?;
    store::save_weights(&a.out_weights, &wl.weights)?;
    let common = vec![
        ("command", "synth".to_string()),
        ("d", a.d.to_string()),
        ("n", a.n.to_string()),
        ("blocks", a.blocks.to_string()),
        ("seed", a.seed.to_string()),
        ("noise", a.noise.to_string()),
        ("scale", a.scale.to_string()),
        ("std", a.std.to_string()),
    ];
    store::write_manifest(&a.out_weights, &common)?;

    for (b, comp) in wl.mixture.components.iter().enumerate() {
        let count = a.count / a.blocks + usize::from(b < a.count % a.blocks);
        let only = Mixture {
            components: vec![clustervocab::synth::Component {
                weight: 1.0,
                ..comp.clone()
            }],
        };
        let sample = gen_hidden(&only, count, derive_seed(a.seed, &[10, b as u64]))?;
        let tag = format!("B{b}En");
        let set = run_record([&sample.vectors], &wl.weights, a.k, &tag)?;
        let path = PathBuf::from(format!("{}{tag}.hrec", a.out_records_prefix));
        store::save_records(&path, &set)?;
        let mut manifest = common.clone();
        manifest.extend([
            ("tag", tag.clone()),
            ("count", count.to_string()),
            ("k", a.k.to_string()),
        ]);
        store::write_manifest(&path, &manifest)?;
    }
    let heldout = a.heldout.unwrap_or(a.count / 5).max(1);
    let sample = gen_hidden(&wl.mixture, heldout, derive_seed(a.seed, &[11]))?;
    let path = PathBuf::from(format!("{}heldout.hrec", a.out_records_prefix));
    store::save_records(
        &path,
        &HiddenRecordSet::hidden_only(&sample.vectors, "heldout")?,
    )?;
    let mut manifest = common;
    manifest.extend([
        ("tag", "heldout".to_string()),
        ("count", heldout.to_string()),
        ("k", "0".to_string()),
    ]);
    store::write_manifest(&path, &manifest)?;
    println!(
        "wrote d={} n={} weights, {} block record files ({} vectors, K={}), {heldout} held-out vectors",
        a.d, a.n, a.blocks, a.count, a.k
    );
    Ok(())
}

pub fn record(a: RecordArgs) -> Outcome {
    let w = store::load_weights(&a.weights)?;
    let hidden = store::load_records(&a.hidden)?.vectors()?;
    let set = run_record([&hidden], &w, a.k, &a.tag)?;
    store::save_records(&a.out, &set)?;
    println!(
        "recorded {} vectors at K={} with tag {}",
        set.len(),
        a.k,
        a.tag
    );
    Ok(())
}

fn load_merged(paths: &[PathBuf]) -> Result<HiddenRecordSet, Failure> {
    let sets: Vec<HiddenRecordSet> = paths
        .iter()
        .map(store::load_records)
        .collect::<Result<_, _>>()?;
    Ok(merge(&sets)?)
}

pub fn train_map(a: TrainMapArgs) -> Outcome {
    let n = match (a.vocab_size, &a.weights) {
        (Some(n), _) => n,
        (None, Some(w)) => store::load_weights(w)?.n(),
        (None, None) => return Err(usage("--vocab-size or --weights is required")),
    };
    let mut records = load_merged(&a.records)?;
    let direction = match &a.target {
        Some(target) => {
            let sources = (!a.sources.is_empty()).then_some(a.sources.as_slice());
            records = filter_by_direction(&records, target, sources)?;
            if a.sources.is_empty() {
                DirectionMeta::target_only(target)
            } else {
                let refs: Vec<&str> = a.sources.iter().map(String::as_str).collect();
                DirectionMeta::source_target(&refs, target)
            }
        }
        None => DirectionMeta::default(),
    };
    if let Some(k) = a.k {
        records = k_truncate(&records, k)?;
    }
    let params = KMeansParams {
        r: a.r,
        iters: a.iters,
        seed: a.seed,
        min_rel_improvement: None,
    };
    let map = match &a.centroids_from {
        Some(path) => {
            build_active_sets(&records, store::load_map(path)?.centroids(), n, direction)?
        }
        None => fit_map(&records, &params, n, direction)?,
    };
    store::save_map(&a.out, &map)?;
    store::write_manifest(
        &a.out,
        &[
            ("command", "train-map".into()),
            ("records", records.len().to_string()),
            ("r", map.r().to_string()),
            (
                "centroids",
                a.centroids_from
                    .as_ref()
                    .map_or("kmeans".into(), |p| p.display().to_string()),
            ),
            ("k", map.k().to_string()),
            ("iters", a.iters.to_string()),
            ("seed", a.seed.to_string()),
        ],
    )?;
    let stats = map.build_stats();
    let empty = stats.member_counts.iter().filter(|&&c| c == 0).count();
    println!(
        "trained r={} K={} over {} records (N={n}): max active {:.3}%, mean active {:.3}%, empty clusters {empty}",
        map.r(),
        map.k(),
        records.len(),
        stats.max_active_pct,
        stats.mean_active_pct
    );
    Ok(())
}

fn check_map(w: &WeightMatrix, map: &ClusterMap) -> Outcome {
    for (what, expected, actual) in [
        ("map vocabulary vs weights", w.n(), map.n()),
        ("map dimension vs weights", w.d(), map.d()),
    ] {
        if expected != actual {
            return Err(Failure::Data(Error::DimensionMismatch {
                what,
                expected,
                actual,
            }));
        }
    }
    Ok(())
}

fn load_map_for(
    w: &WeightMatrix,
    path: Option<&PathBuf>,
    exact: bool,
) -> Result<Option<ClusterMap>, Failure> {
    match (exact, path) {
        (true, _) => Ok(None),
        (false, Some(p)) => {
            let map = store::load_map(p)?;
            check_map(w, &map)?;
            Ok(Some(map))
        }
        (false, None) => Err(usage("--map is required unless --exact is given")),
    }
}

pub fn project(a: ProjectArgs) -> Outcome {
    let w = store::load_weights(&a.weights)?;
    let map = load_map_for(&w, a.map.as_ref(), a.exact)?;
    let batches = store::load_records(&a.hidden)?.batches(a.batch)?;
    let mut csv = String::from("row,argmax,prob,active\n");
    let mut row = 0;
    let mut total_active = 0usize;
    for (b, h) in batches.iter().enumerate() {
        let (probs, active) = match &map {
            None => (softmax_rows(&full_project(h, &w)?)?, w.n()),
            Some(map) => {
                let out = clustered_project(h, &w, map)?;
                let active = if out.fallback { w.n() } else { out.union.len() };
                (out.probs, active)
            }
        };
        total_active += active;
        println!("batch {b}: active count {active} of {}", w.n());
        for m in 0..h.len() {
            let p = probs.row(m);
            let best = argmax(p);
            let _ = writeln!(csv, "{row},{best},{:.9e},{active}", p[best as usize]);
            row += 1;
        }
    }
    write_text(&a.out_csv, &csv)?;
    println!(
        "projected {row} rows in {} batches ({}): mean active {:.3}%",
        batches.len(),
        if map.is_some() { "clustered" } else { "exact" },
        100.0 * total_active as f64 / (batches.len() * w.n()) as f64
    );
    Ok(())
}

pub fn decode(a: DecodeArgs) -> Outcome {
    let w = store::load_weights(&a.weights)?;
    let map = load_map_for(&w, a.map.as_ref(), a.exact)?;
    let kind: SourceKind = a
        .source_kind
        .parse()
        .map_err(|e: Error| usage(e.to_string()))?;
    let hidden = store::load_records(&a.hidden)?.vectors()?;
    let vectors: Vec<Vec<f32>> = hidden.rows().map(<[f32]>::to_vec).collect();
    let inputs = a.inputs.unwrap_or(vectors.len());
    let source = stub_hidden_source(kind, vectors, a.std, a.seed)?;
    let mut config = match a.mode {
        Mode::Greedy => DecodeConfig::greedy(a.steps),
        Mode::Beam => DecodeConfig::beam(a.beam, a.steps),
    };
    config.eos = a.eos;
    let prefixes = vec![Vec::new(); inputs];
    let out = run_decode(&prefixes, &source, &w, map.as_ref(), &config)?;
    let mut csv = String::from("input,score,tokens\n");
    for (i, (seq, score)) in out.sequences.iter().zip(&out.scores).enumerate() {
        let tokens: Vec<String> = seq.iter().map(u32::to_string).collect();
        println!("{i}: {} (log p {score:.4})", tokens.join(" "));
        let _ = writeln!(csv, "{i},{score:.9e},{}", tokens.join(" "));
    }
    if let Some(path) = &a.out {
        write_text(path, &csv)?;
    }
    let mean_active =
        out.active_counts.iter().sum::<usize>() as f64 / out.active_counts.len().max(1) as f64;
    println!(
        "decoded {inputs} inputs for {} steps: mean active {:.1} of {}, fallbacks {}",
        out.steps_run,
        mean_active,
        w.n(),
        out.fallbacks
    );
    Ok(())
}

fn write_report(a: &BenchArgs, report: &BenchReport) -> Outcome {
    print!("{}", report.to_table());
    if let Some(p) = &a.out_csv {
        write_text(p, &report.to_csv())?;
    }
    if let Some(p) = &a.raw_log {
        write_text(p, &report.raw_csv())?;
    }
    if let Some(p) = &a.profile_csv {
        write_text(p, &report.profile_csv())?;
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Outcome {
    let weights = store::load_weights(&a.weights)?;
    let eval = store::load_records(&a.eval)?.batches(a.batch)?;
    if !a.map.is_empty() {
        let mut report = BenchReport::default();
        for path in &a.map {
            let map = store::load_map(path)?;
            check_map(&weights, &map)?;
            let logs = evaluate_map(&weights, &map, &eval, 5, 0)?;
            let timing = a
                .repeats
                .map(|n| time_projection(&weights, &map, &eval, n))
                .transpose()?;
            report
                .rows
                .push(row_from_logs(&logs, map.r(), map.k(), weights.n(), timing));
            report.raw.extend(logs);
        }
        return write_report(&a, &report);
    }
    if a.r_list.is_empty() || a.k_list.is_empty() || a.seeds.is_empty() {
        return Err(usage("--r-list, --k-list and --seeds must be non-empty"));
    }
    let mut config = SweepConfig::new(a.r_list.clone(), a.k_list.clone(), a.seeds.clone());
    config.iters = a.iters;
    config.timing_repeats = a.repeats;
    let workload = Workload {
        weights,
        train: load_merged(&a.records)?,
        eval,
    };
    let report = sweep(&config, &workload)?;
    write_report(&a, &report)
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clustervocab::kmeans::CentroidSet;
use clustervocab::map::{ClusterMap, DirectionMeta};
use clustervocab::recorder::{HiddenRecordSet, Record};
use clustervocab::store;
use clustervocab::tensor::{HiddenBatch, WeightMatrix};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clustervocab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn clustervocab")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Synth {
    dir: TempDir,
}

impl Synth {
    fn new(seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let seed = seed.to_string();
        let prefix = format!("{}/r_", s(dir.path()));
        let weights = dir.path().join("w.wmat");
        ok(&[
            "synth",
            "--d",
            "16",
            "--n",
            "1024",
            "--blocks",
            "4",
            "--count",
            "2000",
            "--seed",
            &seed,
            "--out-weights",
            s(&weights),
            "--out-records-prefix",
            &prefix,
        ]);
        Synth { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn records(&self) -> Vec<String> {
        (0..4)
            .map(|b| s(&self.path(&format!("r_B{b}En.hrec"))).to_owned())
            .collect()
    }

    fn train(&self, out: &str, r: &str, k: &str, seed: &str) -> String {
        let weights = self.path("w.wmat");
        let out = self.path(out);
        let mut args = vec![
            "train-map",
            "--r",
            r,
            "--k",
            k,
            "--seed",
            seed,
            "--weights",
            s(&weights),
            "--out",
            s(&out),
        ];
        args.push("--records");
        let recs = self.records();
        args.extend(recs.iter().map(String::as_str));
        ok(&args)
    }
}

fn csv_column(path: &Path, col: usize) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().to_owned())
        .collect()
}

#[test]
fn synth_is_deterministic_and_validates_sizes() {
    let (a, b) = (Synth::new(7), Synth::new(7));
    for name in ["w.wmat", "r_B0En.hrec", "r_B3En.hrec", "r_heldout.hrec"] {
        assert_eq!(
            std::fs::read(a.path(name)).unwrap(),
            std::fs::read(b.path(name)).unwrap(),
            "{name}"
        );
    }
    let manifest = store::read_manifest(a.path("r_B2En.hrec")).unwrap();
    assert!(manifest.contains(&("tag".into(), "B2En".into())));
    let recs = store::load_records(a.path("r_B1En.hrec")).unwrap();
    assert_eq!((recs.len(), recs.k(), recs.tags()), (500, 5, vec!["B1En"]));

    let t = tempfile::tempdir().unwrap();
    let prefix = format!("{}/x_", s(t.path()));
    assert_eq!(
        code(&[
            "synth",
            "--d",
            "8",
            "--n",
            "64",
            "--blocks",
            "2",
            "--count",
            "10",
            "--seed",
            "1",
            "--out-records-prefix",
            &prefix
        ]),
        2
    );
    let w = t.path().join("w");
    let base = [
        "synth",
        "--d",
        "8",
        "--n",
        "64",
        "--count",
        "10",
        "--seed",
        "1",
        "--out-weights",
        s(&w),
        "--out-records-prefix",
        &prefix,
    ];
    assert_eq!(code(&[&base[..], &["--blocks", "0"]].concat()), 2);
    assert_eq!(code(&[&base[..], &["--blocks", "65"]].concat()), 2);
    ok(&[&base[..], &["--blocks", "1"]].concat());
    assert_eq!(
        store::load_records(format!("{prefix}B0En.hrec"))
            .unwrap()
            .len(),
        10
    );
}

#[test]
fn record_matches_library_and_rejects_dimension_mismatch() {
    let sy = Synth::new(3);
    let out = sy.path("rec.hrec");
    ok(&[
        "record",
        "--weights",
        s(&sy.path("w.wmat")),
        "--hidden",
        s(&sy.path("r_heldout.hrec")),
        "--k",
        "3",
        "--tag",
        "ItEn",
        "--out",
        s(&out),
    ]);
    let got = store::load_records(&out).unwrap();
    let w = store::load_weights(sy.path("w.wmat")).unwrap();
    let hidden = store::load_records(sy.path("r_heldout.hrec"))
        .unwrap()
        .vectors()
        .unwrap();
    assert_eq!(
        got,
        clustervocab::recorder::record([&hidden], &w, 3, "ItEn").unwrap()
    );

    let other = sy.path("w8.wmat");
    store::save_weights(
        &other,
        &WeightMatrix::new(8, 4, vec![0.5; 32], vec![0.0; 4]).unwrap(),
    )
    .unwrap();
    assert_eq!(
        code(&[
            "record",
            "--weights",
            s(&other),
            "--hidden",
            s(&sy.path("r_heldout.hrec")),
            "--k",
            "1",
            "--tag",
            "ItEn",
            "--out",
            s(&out)
        ]),
        3
    );
}

#[test]
fn train_map_reproduces_worked_union() {
    let t = tempfile::tempdir().unwrap();
    let mut recs = HiddenRecordSet::new(1, 3).unwrap();
    for topk in [vec![2, 4, 6], vec![2, 8, 9]] {
        recs.push(Record {
            vector: vec![1.0],
            topk,
            tag: "ItEn".into(),
        })
        .unwrap();
    }
    let input = t.path().join("toy.hrec");
    store::save_records(&input, &recs).unwrap();
    let out = t.path().join("toy.cmap");
    let stdout = ok(&[
        "train-map",
        "--records",
        s(&input),
        "--r",
        "1",
        "--vocab-size",
        "10",
        "--target",
        "En",
        "--sources",
        "It",
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("max active 50.000%"), "{stdout}");
    let map = store::load_map(&out).unwrap();
    assert_eq!(map.active_set(0), &[2, 4, 6, 8, 9]);
    assert_eq!(
        map.direction(),
        &DirectionMeta::source_target(&["It"], "En")
    );
    assert_eq!(
        code(&[
            "train-map",
            "--records",
            s(&input),
            "--r",
            "3",
            "--vocab-size",
            "10",
            "--out",
            s(&out)
        ]),
        3
    );
}

#[test]
fn train_map_k_chain_and_determinism() {
    let sy = Synth::new(5);
    sy.train("k1.cmap", "8", "1", "9");
    sy.train("k5.cmap", "8", "5", "9");
    sy.train("k5b.cmap", "8", "5", "9");
    let (k1, k5) = (
        store::load_map(sy.path("k1.cmap")).unwrap(),
        store::load_map(sy.path("k5.cmap")).unwrap(),
    );
    for j in 0..8 {
        assert!(
            k1.active_set(j)
                .iter()
                .all(|id| k5.active_set(j).contains(id)),
            "cluster {j}"
        );
    }
    assert_eq!(
        std::fs::read(sy.path("k5.cmap")).unwrap(),
        std::fs::read(sy.path("k5b.cmap")).unwrap()
    );
}

#[test]
fn project_exact_and_clustered_agree_on_training_records() {
    let sy = Synth::new(6);
    sy.train("m.cmap", "16", "1", "2");
    let (w, m) = (sy.path("w.wmat"), sy.path("m.cmap"));
    let hidden = sy.path("r_B2En.hrec");
    let (exact, clustered) = (sy.path("exact.csv"), sy.path("clustered.csv"));
    ok(&[
        "project",
        "--weights",
        s(&w),
        "--hidden",
        s(&hidden),
        "--out-csv",
        s(&exact),
        "--exact",
    ]);
    let stdout = ok(&[
        "project",
        "--weights",
        s(&w),
        "--map",
        s(&m),
        "--hidden",
        s(&hidden),
        "--out-csv",
        s(&clustered),
    ]);
    assert!(stdout.contains("active count"));
    assert_eq!(csv_column(&exact, 1), csv_column(&clustered, 1));
    assert!(csv_column(&exact, 3).iter().all(|a| a == "1024"));

    let small = sy.path("small.wmat");
    store::save_weights(
        &small,
        &WeightMatrix::new(16, 10, vec![0.1; 160], vec![0.0; 10]).unwrap(),
    )
    .unwrap();
    assert_eq!(
        code(&[
            "project",
            "--weights",
            s(&small),
            "--map",
            s(&m),
            "--hidden",
            s(&hidden),
            "--out-csv",
            s(&exact)
        ]),
        3
    );
}

#[test]
fn project_toy_instance_reports_seven_of_ten() {
    let t = tempfile::tempdir().unwrap();
    let w = t.path().join("w.wmat");
    let cols: Vec<f32> = (0..10).map(|j| j as f32 * 0.1).collect();
    store::save_weights(&w, &WeightMatrix::new(1, 10, cols, vec![0.0; 10]).unwrap()).unwrap();
    let map = ClusterMap::new(
        CentroidSet::new(1, vec![0.0, 10.0, 20.0]).unwrap(),
        vec![vec![2, 4, 6], vec![2, 8, 9], vec![1, 3]],
        vec![1, 1, 1],
        10,
        3,
        DirectionMeta::default(),
    )
    .unwrap();
    let m = t.path().join("toy.cmap");
    store::save_map(&m, &map).unwrap();
    let h = t.path().join("h.hrec");
    let batch = HiddenBatch::new(1, vec![0.0, 10.0, 20.0]).unwrap();
    store::save_records(&h, &HiddenRecordSet::hidden_only(&batch, "toy").unwrap()).unwrap();
    let csv = t.path().join("p.csv");
    let stdout = ok(&[
        "project",
        "--weights",
        s(&w),
        "--map",
        s(&m),
        "--hidden",
        s(&h),
        "--out-csv",
        s(&csv),
    ]);
    assert!(stdout.contains("active count 7 of 10"), "{stdout}");
    assert_eq!(csv_column(&csv, 3), vec!["7"; 3]);
}

#[test]
fn decode_beam_one_equals_greedy() {
    let sy = Synth::new(8);
    sy.train("m.cmap", "8", "3", "1");
    let (w, m, h) = (
        sy.path("w.wmat"),
        sy.path("m.cmap"),
        sy.path("r_heldout.hrec"),
    );
    let common = [
        "decode",
        "--weights",
        s(&w),
        "--map",
        s(&m),
        "--hidden",
        s(&h),
        "--steps",
        "5",
        "--inputs",
        "6",
        "--source-kind",
        "mixture_cycle",
        "--seed",
        "4",
    ];
    let greedy = ok(&[&common[..], &["--mode", "greedy"]].concat());
    let beam1 = ok(&[&common[..], &["--mode", "beam", "--beam", "1"]].concat());
    assert_eq!(greedy, beam1);
    assert_eq!(greedy, ok(&[&common[..], &["--mode", "greedy"]].concat()));
    let out = sy.path("d.csv");
    ok(&[
        "decode",
        "--weights",
        s(&w),
        "--exact",
        "--hidden",
        s(&h),
        "--steps",
        "3",
        "--inputs",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 3);
    assert_eq!(
        code(&[&common[..], &["--source-kind", "spiral"]].concat()),
        2
    );
}

#[test]
fn bench_csv_header_single_cell_and_k_trend() {
    let sy = Synth::new(9);
    let (w, eval) = (sy.path("w.wmat"), sy.path("r_heldout.hrec"));
    let out = sy.path("bench.csv");
    let recs = sy.records();
    let mut args = vec![
        "bench",
        "--weights",
        s(&w),
        "--eval",
        s(&eval),
        "--r-list",
        "8,16",
        "--k-list",
        "1,3,5",
        "--seeds",
        "4",
        "--out-csv",
        s(&out),
        "--records",
    ];
    args.extend(recs.iter().map(String::as_str));
    ok(&args);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "r,K,mean_active_pct,max_active_pct,argmax_agree_pct,top5_overlap_pct,flop_ratio,wall_exact_ms,wall_clustered_ms,fallbacks"
    );
    let means: Vec<f64> = csv_column(&out, 2)
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(means.len(), 6);
    for r in means.chunks(3) {
        assert!(r[0] <= r[1] && r[1] <= r[2], "{r:?}");
    }

    // one cell equals train-map + project on the same records and seed
    sy.train("cell.cmap", "16", "3", "4");
    let pcsv = sy.path("p.csv");
    ok(&[
        "project",
        "--weights",
        s(&w),
        "--map",
        s(&sy.path("cell.cmap")),
        "--hidden",
        s(&eval),
        "--out-csv",
        s(&pcsv),
    ]);
    let actives: Vec<f64> = csv_column(&pcsv, 3)
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    let per_batch: Vec<f64> = actives.chunks(40).map(|c| c[0]).collect();
    let mean = 100.0 * per_batch.iter().sum::<f64>() / (per_batch.len() as f64 * 1024.0);
    assert!((means[4] - mean).abs() < 1e-3, "{} vs {mean}", means[4]);

    let mut empty = vec![
        "bench",
        "--weights",
        s(&w),
        "--eval",
        s(&eval),
        "--r-list",
        "",
        "--k-list",
        "1",
        "--records",
    ];
    empty.extend(recs.iter().map(String::as_str));
    assert_eq!(code(&empty), 2);
}

#[test]
fn thread_env_is_validated() {
    let t = tempfile::tempdir().unwrap();
    let w = t.path().join("w");
    let prefix = format!("{}/p_", s(t.path()));
    let args = [
        "synth",
        "--d",
        "4",
        "--n",
        "16",
        "--blocks",
        "2",
        "--count",
        "8",
        "--seed",
        "1",
        "--out-weights",
        s(&w),
        "--out-records-prefix",
        &prefix,
    ];
    let status = |v: &str| {
        bin()
            .args(args)
            .env("CLUSTERVOCAB_THREADS", v)
            .output()
            .unwrap()
            .status
            .code()
    };
    assert_eq!(status("1"), Some(0));
    assert_eq!(status("0"), Some(0));
    assert_eq!(status("many"), Some(2));
}

#[test]
fn train_map_can_share_centroids_across_directions() {
    let sy = Synth::new(12);
    sy.train("pooled.cmap", "8", "3", "1");
    let recs = sy.records();
    let (w, shared) = (sy.path("w.wmat"), sy.path("shared.cmap"));
    let pooled = sy.path("pooled.cmap");
    let mut args = vec![
        "train-map",
        "--r",
        "8",
        "--k",
        "3",
        "--weights",
        s(&w),
        "--target",
        "En",
        "--sources",
        "B0",
        "--centroids-from",
        s(&pooled),
        "--out",
        s(&shared),
        "--records",
    ];
    args.extend(recs.iter().map(String::as_str));
    ok(&args);
    let (p, m) = (
        store::load_map(&pooled).unwrap(),
        store::load_map(&shared).unwrap(),
    );
    assert_eq!(p.centroids(), m.centroids());
    assert!(m.build_stats().max_active_pct <= p.build_stats().max_active_pct);
    for j in 0..8 {
        assert!(m
            .active_set(j)
            .iter()
            .all(|id| p.active_set(j).contains(id)));
    }
}

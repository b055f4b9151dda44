//! Pilot sweep over the blocked synthetic workload.
//!
//! Usage: `cargo run --release -p clustervocab --example pilot -- [noise] [std] [batch] [seed]`

use clustervocab::bench::{sweep, SweepConfig, Workload};
use clustervocab::recorder::{record, HiddenRecordSet};
use clustervocab::synth::{blocked_workload, gen_hidden, WorkloadParams};

fn main() -> clustervocab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let seed = arg(3, 11.0) as u64;
    let mut p = WorkloadParams::new(64, 8192, 16, seed);
    p.block_noise = arg(0, 0.5) as f32;
    p.hidden_std = arg(1, 0.5) as f32;
    let batch = arg(2, 40.0) as usize;
    let wl = blocked_workload(&p)?;
    let train = gen_hidden(&wl.mixture, 20_000, 1)?;
    let held = gen_hidden(&wl.mixture, 4_000, 2)?;
    let workload = Workload {
        train: record([&train.vectors], &wl.weights, 5, "B0En")?,
        eval: HiddenRecordSet::hidden_only(&held.vectors, "B0En")?.batches(batch)?,
        weights: wl.weights,
    };
    let config = SweepConfig::new(vec![8, 16, 32, 64, 128], vec![1, 3, 5], vec![0]);
    print!("{}", sweep(&config, &workload)?.to_table());
    Ok(())
}

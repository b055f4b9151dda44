//! Deterministic synthetic workloads: weights, Gaussian-mixture hidden
//! vectors and stub hidden sources for the decode harness.
//!
//! Every generator is a pure function of its parameters and seed, drawing
//! from [`DetRng`] sub-streams labelled as documented on each function.

use std::str::FromStr;

use crate::engine::{HiddenSource, RowContext};
use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::{dot, HiddenBatch, WeightMatrix};

/// Stream labels mixed into the user seed.
const STREAM_DIRECTIONS: u64 = 1;
const STREAM_COLUMNS: u64 = 2;
const STREAM_HIDDEN: u64 = 3;
const STREAM_SOURCE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightStructure {
    /// i.i.d. normal(0, 1/sqrt(d)) entries.
    Random,
    /// Contiguous token blocks whose columns scatter around a per-block unit direction.
    /// `noise` is the expected norm of a column's deviation from its direction.
    Blocked { blocks: usize, noise: f32 },
}

fn normalize(v: &mut [f32]) {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Unit directions, one per block; orthonormal (Gram-Schmidt) whenever `blocks <= d`.
pub fn block_directions(d: usize, blocks: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = DetRng::derive(seed, &[STREAM_DIRECTIONS]);
    let mut dirs: Vec<Vec<f32>> = Vec::with_capacity(blocks);
    while dirs.len() < blocks {
        let mut v = rng.normal_vec(d, 0.0, 1.0);
        if dirs.len() < d {
            for u in &dirs {
                let proj = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, &y)| *x -= proj * y);
            }
        }
        if dot(&v, &v) < 1e-12 {
            continue;
        }
        normalize(&mut v);
        dirs.push(v);
    }
    dirs
}

/// Block of token `j` when `n` tokens are split into `blocks` contiguous ranges.
pub fn block_of(j: usize, n: usize, blocks: usize) -> usize {
    j * blocks / n
}

pub fn gen_weights(
    d: usize,
    n: usize,
    seed: u64,
    structure: WeightStructure,
) -> Result<WeightMatrix> {
    if d == 0 || n == 0 {
        return Err(Error::invalid("weights need d >= 1 and N >= 1"));
    }
    let mut rng = DetRng::derive(seed, &[STREAM_COLUMNS]);
    let columns = match structure {
        WeightStructure::Random => rng.normal_vec(d * n, 0.0, 1.0 / (d as f32).sqrt()),
        WeightStructure::Blocked { blocks, noise } => {
            if blocks == 0 || blocks > n {
                return Err(Error::invalid(format!(
                    "block count must satisfy 1 <= B <= N, got {blocks}"
                )));
            }
            let dirs = block_directions(d, blocks, seed);
            let scale = noise / (d as f32).sqrt();
            let mut cols = Vec::with_capacity(d * n);
            for j in 0..n {
                let dir = &dirs[block_of(j, n, blocks)];
                cols.extend(dir.iter().map(|&u| u + scale * rng.normal() as f32));
            }
            cols
        }
    };
    WeightMatrix::new(d, n, columns, vec![0.0; n])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub mean: Vec<f32>,
    pub std: f32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub components: Vec<Component>,
}

impl Mixture {
    /// Equal-weight mixture with a shared standard deviation.
    pub fn uniform(means: Vec<Vec<f32>>, std: f32) -> Self {
        let w = 1.0 / means.len() as f64;
        Self {
            components: means
                .into_iter()
                .map(|mean| Component {
                    mean,
                    std,
                    weight: w,
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::invalid(
                "mixture needs at least one non-empty component",
            ));
        }
        if self.components.iter().any(|c| c.mean.len() != d) {
            return Err(Error::invalid("mixture components differ in dimension"));
        }
        if self
            .components
            .iter()
            .any(|c| c.weight < 0.0 || c.std < 0.0)
        {
            return Err(Error::invalid(
                "mixture weights and stds must be non-negative",
            ));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        Ok(())
    }

    fn pick(&self, u: f64) -> usize {
        let mut cum = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            cum += c.weight;
            if u < cum {
                return i;
            }
        }
        self.components.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSample {
    pub vectors: HiddenBatch,
    /// Mixture component of each row.
    pub labels: Vec<usize>,
}

/// Draws `count` rows: a component by weight (one uniform), then `mean + std * normal` per coordinate.
pub fn gen_hidden(mixture: &Mixture, count: usize, seed: u64) -> Result<HiddenSample> {
    mixture.validate()?;
    if count == 0 {
        return Err(Error::invalid("count must be >= 1"));
    }
    let d = mixture.dim();
    let mut rng = DetRng::derive(seed, &[STREAM_HIDDEN]);
    let mut data = Vec::with_capacity(count * d);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let c = mixture.pick(rng.uniform());
        let comp = &mixture.components[c];
        data.extend(
            comp.mean
                .iter()
                .map(|&m| (m as f64 + comp.std as f64 * rng.normal()) as f32),
        );
        labels.push(c);
    }
    Ok(HiddenSample {
        vectors: HiddenBatch::new(d, data)?,
        labels,
    })
}

/// Blocked weights together with the mixture whose components sit on the block directions.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedWorkload {
    pub weights: WeightMatrix,
    pub directions: Vec<Vec<f32>>,
    pub mixture: Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadParams {
    pub d: usize,
    pub n: usize,
    pub blocks: usize,
    pub block_noise: f32,
    /// Norm of each mixture mean (`scale * direction`).
    pub hidden_scale: f32,
    /// Per-coordinate standard deviation of hidden vectors around a mean.
    pub hidden_std: f32,
    pub seed: u64,
}

impl WorkloadParams {
    pub fn new(d: usize, n: usize, blocks: usize, seed: u64) -> Self {
        Self {
            d,
            n,
            blocks,
            block_noise: 0.5,
            hidden_scale: 4.0,
            hidden_std: 0.3,
            seed,
        }
    }
}

pub fn blocked_workload(p: &WorkloadParams) -> Result<BlockedWorkload> {
    let weights = gen_weights(
        p.d,
        p.n,
        p.seed,
        WeightStructure::Blocked {
            blocks: p.blocks,
            noise: p.block_noise,
        },
    )?;
    let directions = block_directions(p.d, p.blocks, p.seed);
    let means = directions
        .iter()
        .map(|u| u.iter().map(|&x| x * p.hidden_scale).collect())
        .collect();
    Ok(BlockedWorkload {
        weights,
        directions,
        mixture: Mixture::uniform(means, p.hidden_std),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Constant,
    Walk,
    MixtureCycle,
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(SourceKind::Constant),
            "walk" => Ok(SourceKind::Walk),
            "mixture_cycle" | "mixture-cycle" => Ok(SourceKind::MixtureCycle),
            other => Err(Error::invalid(format!(
                "unknown hidden source kind {other:?}"
            ))),
        }
    }
}

/// Stub decoder state for [`crate::engine::decode`].
///
/// * `Constant`: input `i` always sees `vectors[i % len]`.
/// * `Walk`: starts at `vectors[i % len]`; at step `t` adds `std * normal` drawn from
///   sub-stream `(seed, 4, i, t)` to the step `t - 1` vector.
/// * `MixtureCycle`: at step `t` row of input `i` uses component `(i + t) % len`,
///   plus `std * normal` noise from sub-stream `(seed, 4, i, t, last token)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StubSource {
    kind: SourceKind,
    vectors: Vec<Vec<f32>>,
    std: f32,
    seed: u64,
}

pub fn stub_hidden_source(
    kind: SourceKind,
    vectors: Vec<Vec<f32>>,
    std: f32,
    seed: u64,
) -> Result<StubSource> {
    let d = vectors.first().map_or(0, Vec::len);
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::invalid(
            "stub source needs non-empty vectors of one dimension",
        ));
    }
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::invalid("stub source std must be finite and >= 0"));
    }
    Ok(StubSource {
        kind,
        vectors,
        std,
        seed,
    })
}

impl StubSource {
    fn row(&self, ctx: &RowContext<'_>) -> Vec<f32> {
        let base = &self.vectors[ctx.input % self.vectors.len()];
        match self.kind {
            SourceKind::Constant => base.clone(),
            SourceKind::Walk => {
                let mut v = base.clone();
                for t in 1..=ctx.step {
                    let mut rng =
                        DetRng::derive(self.seed, &[STREAM_SOURCE, ctx.input as u64, t as u64]);
                    v.iter_mut()
                        .for_each(|x| *x += (self.std as f64 * rng.normal()) as f32);
                }
                v
            }
            SourceKind::MixtureCycle => {
                let comp = &self.vectors[(ctx.input + ctx.step) % self.vectors.len()];
                let last = ctx.history.last().map_or(u64::MAX, |&t| t as u64);
                let mut rng = DetRng::derive(
                    self.seed,
                    &[STREAM_SOURCE, ctx.input as u64, ctx.step as u64, last],
                );
                comp.iter()
                    .map(|&m| (m as f64 + self.std as f64 * rng.normal()) as f32)
                    .collect()
            }
        }
    }
}

impl HiddenSource for StubSource {
    fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    fn hidden(&self, rows: &[RowContext<'_>]) -> Result<HiddenBatch> {
        let data: Vec<f32> = rows.iter().flat_map(|r| self.row(r)).collect();
        HiddenBatch::new(self.dim(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{decode, predict_clusters, DecodeConfig};
    use crate::kmeans::{kmeans_train, KMeansParams};
    use crate::map::{train_map, DirectionMeta};
    use crate::recorder::record;

    fn cosine(a: &[f32], b: &[f32]) -> f32 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    #[test]
    fn random_weights_deterministic_zero_bias() {
        let a = gen_weights(8, 30, 5, WeightStructure::Random).unwrap();
        let b = gen_weights(8, 30, 5, WeightStructure::Random).unwrap();
        assert_eq!(a, b);
        assert!(a.bias().iter().all(|&x| x == 0.0));
        assert_ne!(a, gen_weights(8, 30, 6, WeightStructure::Random).unwrap());
    }

    #[test]
    fn blocked_cosines() {
        let w = gen_weights(
            8,
            40,
            3,
            WeightStructure::Blocked {
                blocks: 4,
                noise: 0.1,
            },
        )
        .unwrap();
        assert!(w.bias().iter().all(|&x| x == 0.0));
        let mut min_within = f32::MAX;
        let mut max_across = f32::MIN;
        for i in 0..40 {
            for j in (i + 1)..40 {
                let c = cosine(w.column(i), w.column(j));
                if block_of(i, 40, 4) == block_of(j, 40, 4) {
                    min_within = min_within.min(c);
                } else {
                    max_across = max_across.max(c);
                }
            }
        }
        assert!(min_within >= 0.7, "within {min_within}");
        assert!(max_across <= 0.3, "across {max_across}");
    }

    #[test]
    fn degenerate_mixture_repeats_mean() {
        let m = Mixture::uniform(vec![vec![1.0, -2.0, 3.5]], 0.0);
        let s = gen_hidden(&m, 10, 1).unwrap();
        assert!(s.vectors.rows().all(|r| r == [1.0, -2.0, 3.5]));
        assert!(s.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn mixture_weights_must_sum_to_one() {
        let mut m = Mixture::uniform(vec![vec![0.0], vec![1.0]], 1.0);
        m.components[0].weight = 0.6;
        assert!(gen_hidden(&m, 5, 0).is_err());
    }

    #[test]
    fn gen_hidden_deterministic() {
        let m = Mixture::uniform(vec![vec![0.0; 4], vec![5.0; 4]], 1.0);
        assert_eq!(
            gen_hidden(&m, 50, 9).unwrap(),
            gen_hidden(&m, 50, 9).unwrap()
        );
    }

    #[test]
    fn kmeans_recovers_far_components() {
        let m = Mixture::uniform(vec![vec![0.0, 0.0], vec![100.0, 100.0]], 1.0);
        let s = gen_hidden(&m, 1000, 4).unwrap();
        let set = kmeans_train(&s.vectors, &KMeansParams::new(2, 1)).unwrap();
        for c in 0..2 {
            let rows: Vec<&[f32]> = s
                .vectors
                .rows()
                .zip(&s.labels)
                .filter(|(_, &l)| l == c)
                .map(|(r, _)| r)
                .collect();
            let mean: Vec<f64> = (0..2)
                .map(|i| rows.iter().map(|r| r[i] as f64).sum::<f64>() / rows.len() as f64)
                .collect();
            let j = set.assign(&[mean[0] as f32, mean[1] as f32]).unwrap() as usize;
            for i in 0..2 {
                assert!((set.centroid(j)[i] as f64 - mean[i]).abs() < 0.5);
            }
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!("spiral".parse::<SourceKind>().is_err());
        assert_eq!("walk".parse::<SourceKind>().unwrap(), SourceKind::Walk);
    }

    #[test]
    fn walk_without_noise_is_constant() {
        let v = vec![vec![0.5, -0.25, 1.0]];
        let walk = stub_hidden_source(SourceKind::Walk, v.clone(), 0.0, 3).unwrap();
        let konst = stub_hidden_source(SourceKind::Constant, v, 0.0, 3).unwrap();
        for step in 0..5 {
            let ctx = [RowContext {
                input: 0,
                step,
                history: &[1, 2],
            }];
            assert_eq!(walk.hidden(&ctx).unwrap(), konst.hidden(&ctx).unwrap());
        }
        let noisy = stub_hidden_source(SourceKind::Walk, vec![vec![0.0; 3]], 1.0, 3).unwrap();
        let at = |step| {
            noisy
                .hidden(&[RowContext {
                    input: 0,
                    step,
                    history: &[],
                }])
                .unwrap()
        };
        assert_ne!(at(1), at(2));
        assert_eq!(at(2), at(2));
    }

    #[test]
    fn constant_source_decodes_one_token() {
        let w = gen_weights(6, 50, 2, WeightStructure::Random).unwrap();
        let src = stub_hidden_source(SourceKind::Constant, vec![vec![0.3; 6]], 0.0, 0).unwrap();
        let out = decode(&[vec![0]], &src, &w, None, &DecodeConfig::greedy(5)).unwrap();
        assert!(out.sequences[0].windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn mixture_cycle_hits_several_clusters() {
        let mut p = WorkloadParams::new(16, 400, 4, 8);
        p.hidden_std = 0.3;
        let wl = blocked_workload(&p).unwrap();
        let train = gen_hidden(&wl.mixture, 2000, 1).unwrap();
        let recs = record([&train.vectors], &wl.weights, 1, "B0En").unwrap();
        let map = train_map(
            &recs,
            &KMeansParams::new(8, 2),
            400,
            DirectionMeta::default(),
        )
        .unwrap();
        let means: Vec<Vec<f32>> = wl.mixture.components[..3]
            .iter()
            .map(|c| c.mean.clone())
            .collect();
        let src = stub_hidden_source(SourceKind::MixtureCycle, means, 0.3, 5).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for step in 0..9 {
            let h = src
                .hidden(&[RowContext {
                    input: 0,
                    step,
                    history: &[0],
                }])
                .unwrap();
            seen.extend(predict_clusters(&h, &map).unwrap());
        }
        assert!(seen.len() >= 3, "{seen:?}");
    }
}

//! Lloyd kmeans over hidden vectors and nearest-centroid assignment.
//!
//! Assignment at inference time ranks centroids by `|C_j|^2 - 2 h.C_j`, which
//! is the squared Euclidean distance minus the per-query constant `|h|^2`.
//! The squared norms are cached on the [`CentroidSet`] so a query costs one
//! dot product per centroid.

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::rng::DetRng;
use crate::tensor::{dot, HiddenBatch, OpCounter};

/// Iteration count used when the caller does not pick one.
pub const DEFAULT_ITERS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    d: usize,
    centroids: Vec<f32>,
    sq_norms: Vec<f32>,
    inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc
}

impl CentroidSet {
    /// Builds a set from row-major centroids, computing the squared norms.
    pub fn new(d: usize, centroids: Vec<f32>) -> Result<Self> {
        if d == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "centroid data of length {} is not a positive multiple of d={d}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("centroids must be finite"));
        }
        Ok(Self {
            d,
            centroids,
            sq_norms: Vec::new(),
            inertia_history: Vec::new(),
        }
        .recompute_sq_norms())
    }

    /// Builds a set with caller-supplied squared norms, e.g. read back from disk.
    /// The norms are kept verbatim; see [`CentroidSet::max_sq_norm_error`].
    pub fn with_sq_norms(d: usize, centroids: Vec<f32>, sq_norms: Vec<f32>) -> Result<Self> {
        let mut set = Self::new(d, centroids)?;
        check_dim("squared norm count", set.r(), sq_norms.len())?;
        set.sq_norms = sq_norms;
        Ok(set)
    }

    pub fn recompute_sq_norms(mut self) -> Self {
        self.sq_norms = self
            .centroids
            .chunks_exact(self.d)
            .map(|c| dot(c, c))
            .collect();
        self
    }

    /// Largest relative gap between a cached squared norm and `dot(c, c)`.
    pub fn max_sq_norm_error(&self) -> f64 {
        self.centroids
            .chunks_exact(self.d)
            .zip(&self.sq_norms)
            .map(|(c, &cached)| {
                let exact = dot(c, c) as f64;
                let diff = (cached as f64 - exact).abs();
                if !cached.is_finite() {
                    f64::INFINITY
                } else if exact == 0.0 {
                    diff
                } else {
                    diff / exact
                }
            })
            .fold(0.0, f64::max)
    }

    /// Cluster count `r`.
    pub fn r(&self) -> usize {
        self.centroids.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.d..(j + 1) * self.d]
    }

    pub fn centroids_raw(&self) -> &[f32] {
        &self.centroids
    }

    pub fn sq_norms(&self) -> &[f32] {
        &self.sq_norms
    }

    /// Within-cluster sum of squared distances, one entry per Lloyd iteration.
    pub fn inertia_history(&self) -> &[f64] {
        &self.inertia_history
    }

    /// Nearest-centroid score of `h` against cluster `j`.
    #[inline]
    pub fn score(&self, h: &[f32], j: usize) -> f32 {
        self.sq_norms[j] - 2.0 * dot(h, self.centroid(j))
    }

    /// Nearest centroid plus the number of multiplications the scan performed.
    fn assign_unchecked(&self, h: &[f32]) -> (u32, u64) {
        let mut best = 0;
        let mut best_score = self.score(h, 0);
        let mut mults = self.centroid(0).len() as u64;
        for j in 1..self.r() {
            let s = self.score(h, j);
            mults += self.centroid(j).len() as u64;
            if s < best_score {
                best = j;
                best_score = s;
            }
        }
        (best as u32, mults)
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn assign(&self, h: &[f32]) -> Result<u32> {
        check_dim("vector dimension vs centroids", self.d, h.len())?;
        Ok(self.assign_unchecked(h).0)
    }

    pub fn assign_batch(&self, h: &HiddenBatch) -> Result<Vec<u32>> {
        self.assign_batch_counted(h, None)
    }

    /// Like [`CentroidSet::assign_batch`], adding the multiplications spent to `counter`.
    pub fn assign_batch_counted(
        &self,
        h: &HiddenBatch,
        counter: Option<&OpCounter>,
    ) -> Result<Vec<u32>> {
        check_dim("hidden dimension vs centroids", self.d, h.d())?;
        let (ids, mults): (Vec<u32>, Vec<u64>) = h
            .as_slice()
            .par_chunks_exact(self.d)
            .map(|row| self.assign_unchecked(row))
            .unzip();
        if let Some(c) = counter {
            c.add(mults.iter().sum());
        }
        Ok(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub r: usize,
    pub iters: usize,
    pub seed: u64,
    /// Stop once `(prev - cur) / prev` falls below this value.
    pub min_rel_improvement: Option<f64>,
}

impl KMeansParams {
    pub fn new(r: usize, seed: u64) -> Self {
        Self {
            r,
            iters: DEFAULT_ITERS,
            seed,
            min_rel_improvement: None,
        }
    }
}

/// kmeans++ seeding: first centre uniform, then proportional to squared distance.
fn seed_plus_plus(points: &[f32], d: usize, r: usize, rng: &mut DetRng) -> Vec<f32> {
    let m = points.len() / d;
    let point = |i: usize| &points[i * d..(i + 1) * d];
    let mut centroids = Vec::with_capacity(r * d);
    let first = rng.below(m as u64) as usize;
    centroids.extend_from_slice(point(first));
    let mut dist: Vec<f64> = (0..m)
        .map(|i| sq_dist(point(i), point(first)) as f64)
        .collect();
    while centroids.len() < r * d {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut cum = 0.0;
            let mut chosen = None;
            for (i, &di) in dist.iter().enumerate() {
                cum += di;
                if di > 0.0 && cum > target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave target just past the final sum
            chosen.unwrap_or_else(|| dist.iter().rposition(|&x| x > 0.0).unwrap())
        } else {
            rng.below(m as u64) as usize
        };
        let c = point(pick).to_vec();
        for (i, di) in dist.iter_mut().enumerate() {
            let nd = sq_dist(point(i), &c) as f64;
            if nd < *di {
                *di = nd;
            }
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Trains `params.r` centroids with kmeans++ seeding and Lloyd iterations.
///
/// Each iteration assigns every point to its nearest centroid (recording the
/// resulting inertia), repairs empty clusters, then moves each centroid to the
/// f64 mean of its members. An empty cluster takes over the point farthest from
/// its current centroid, drawn from a cluster with more than one member.
pub fn kmeans_train(vectors: &HiddenBatch, params: &KMeansParams) -> Result<CentroidSet> {
    let KMeansParams {
        r,
        iters,
        seed,
        min_rel_improvement,
    } = *params;
    let d = vectors.d();
    let m = vectors.len();
    if r == 0 || iters == 0 {
        return Err(Error::invalid("kmeans needs r >= 1 and iters >= 1"));
    }
    if m < r {
        return Err(Error::invalid(format!(
            "kmeans needs at least r={r} vectors, got {m}"
        )));
    }
    let points = vectors.as_slice();
    let mut rng = DetRng::new(seed);
    let mut centroids = seed_plus_plus(points, d, r, &mut rng);
    let mut history = Vec::with_capacity(iters);

    for _ in 0..iters {
        let mut assignment: Vec<(u32, f32)> = points
            .par_chunks_exact(d)
            .map(|p| {
                let mut best = (0u32, sq_dist(p, &centroids[..d]));
                for j in 1..r {
                    let dist = sq_dist(p, &centroids[j * d..(j + 1) * d]);
                    if dist < best.1 {
                        best = (j as u32, dist);
                    }
                }
                best
            })
            .collect();
        let inertia: f64 = assignment.iter().map(|&(_, dist)| dist as f64).sum();

        let mut counts = vec![0usize; r];
        for &(c, _) in &assignment {
            counts[c as usize] += 1;
        }
        for empty in 0..r {
            if counts[empty] > 0 {
                continue;
            }
            let donor = assignment
                .iter()
                .enumerate()
                .filter(|(_, (c, _))| counts[*c as usize] > 1)
                .fold(
                    None,
                    |best: Option<(usize, f32)>, (i, &(_, dist))| match best {
                        Some((_, bd)) if bd >= dist => best,
                        _ => Some((i, dist)),
                    },
                );
            // m >= r guarantees some cluster has a spare member
            let (i, _) = donor.expect("a cluster with more than one member exists");
            counts[assignment[i].0 as usize] -= 1;
            counts[empty] = 1;
            assignment[i] = (empty as u32, 0.0);
        }

        let mut sums = vec![0.0f64; r * d];
        for (p, &(c, _)) in points.chunks_exact(d).zip(&assignment) {
            let acc = &mut sums[c as usize * d..(c as usize + 1) * d];
            for (a, &x) in acc.iter_mut().zip(p) {
                *a += x as f64;
            }
        }
        for (j, acc) in sums.chunks_exact(d).enumerate() {
            let inv = 1.0 / counts[j] as f64;
            for (dst, &s) in centroids[j * d..(j + 1) * d].iter_mut().zip(acc) {
                *dst = (s * inv) as f32;
            }
        }

        let prev = history.last().copied();
        history.push(inertia);
        if let (Some(tol), Some(prev)) = (min_rel_improvement, prev) {
            if prev <= 0.0 || (prev - inertia) / prev < tol {
                break;
            }
        }
    }

    let mut set = CentroidSet::new(d, centroids)?;
    set.inertia_history = history;
    Ok(set)
}

//! Online clustered projection and a small greedy/beam decode harness.
//!
//! One clustered step runs five stages: nearest-centroid prediction per row,
//! union of the selected clusters' active sets over the whole batch, gathered
//! projection on the union, scatter back to full width with masking, softmax.
//! Probabilities on the union equal a softmax over the exact logits restricted
//! to the union; every other position is exactly zero.

use crate::error::{check_dim, Error, Result};
use crate::map::ClusterMap;
use crate::tensor::{
    full_project_counted, gather_project_counted, scatter_logits, softmax_rows, topk_row,
    HiddenBatch, Matrix, OpCounter, TokenId, WeightMatrix,
};

/// Cluster predictions for one batch and the merged active vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchUnion {
    pub cluster_ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub active: Vec<TokenId>,
}

impl BatchUnion {
    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }
}

pub fn predict_clusters(h: &HiddenBatch, map: &ClusterMap) -> Result<Vec<u32>> {
    map.centroids().assign_batch(h)
}

pub fn batch_union(cluster_ids: &[u32], map: &ClusterMap) -> Result<BatchUnion> {
    let mut mask = vec![false; map.n()];
    for &c in cluster_ids {
        if c as usize >= map.r() {
            return Err(Error::invalid(format!(
                "cluster id {c} out of range for r={}",
                map.r()
            )));
        }
        for &id in map.active_set(c as usize) {
            mask[id as usize] = true;
        }
    }
    let active = mask
        .iter()
        .enumerate()
        .filter_map(|(j, &on)| on.then_some(j as TokenId))
        .collect();
    Ok(BatchUnion {
        cluster_ids: cluster_ids.to_vec(),
        mask,
        active,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredProjection {
    /// Full-width probabilities, zero outside `union.active`.
    pub probs: Matrix,
    pub union: BatchUnion,
    /// Set when every selected cluster was memberless and the exact path ran instead.
    pub fallback: bool,
    /// Multiplications spent on centroid scoring plus projection.
    pub mults: u64,
}

fn check_compat(h: &HiddenBatch, w: &WeightMatrix, map: &ClusterMap) -> Result<()> {
    check_dim("map vocabulary vs weights", w.n(), map.n())?;
    check_dim("map dimension vs weights", w.d(), map.d())?;
    check_dim("hidden dimension vs weights", w.d(), h.d())
}

pub fn clustered_project(
    h: &HiddenBatch,
    w: &WeightMatrix,
    map: &ClusterMap,
) -> Result<ClusteredProjection> {
    check_compat(h, w, map)?;
    let counter = OpCounter::new();
    let ids = map.centroids().assign_batch_counted(h, Some(&counter))?;
    let union = batch_union(&ids, map)?;
    if union.is_empty() {
        let probs = softmax_rows(&full_project_counted(h, w, Some(&counter))?)?;
        return Ok(ClusteredProjection {
            probs,
            union,
            fallback: true,
            mults: counter.get(),
        });
    }
    let reduced = gather_project_counted(h, w, &union.active, Some(&counter))?;
    let probs = softmax_rows(&scatter_logits(&reduced, &union.active, w.n())?)?;
    Ok(ClusteredProjection {
        probs,
        union,
        fallback: false,
        mults: counter.get(),
    })
}

/// Result of projecting each row against its own cluster's set.
#[derive(Debug, Clone, PartialEq)]
pub struct RowwiseProjection {
    pub probs: Matrix,
    pub unions: Vec<BatchUnion>,
    pub fallbacks: usize,
    pub mults: u64,
}

/// Per-row ablation of [`clustered_project`]: no union across the batch.
pub fn clustered_project_rowwise(
    h: &HiddenBatch,
    w: &WeightMatrix,
    map: &ClusterMap,
) -> Result<RowwiseProjection> {
    check_compat(h, w, map)?;
    let mut data = Vec::with_capacity(h.len() * w.n());
    let mut unions = Vec::with_capacity(h.len());
    let mut fallbacks = 0;
    let mut mults = 0;
    for row in h.rows() {
        let single = HiddenBatch::new(h.d(), row.to_vec())?;
        let out = clustered_project(&single, w, map)?;
        data.extend_from_slice(out.probs.as_slice());
        unions.push(out.union);
        fallbacks += usize::from(out.fallback);
        mults += out.mults;
    }
    Ok(RowwiseProjection {
        probs: Matrix::new(h.len(), w.n(), data)?,
        unions,
        fallbacks,
        mults,
    })
}

/// How far a union reaches when a map is in use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnionScope {
    /// One union over all `M = batch x beam` rows of a step.
    #[default]
    Batch,
    PerRow,
}

/// Exact or clustered projection, chosen once per job.
#[derive(Debug, Clone, Copy)]
pub enum Projector<'a> {
    Exact,
    Clustered {
        map: &'a ClusterMap,
        scope: UnionScope,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepProjection {
    pub probs: Matrix,
    /// Active vocabulary size per union (one entry for batch scope, one per row otherwise).
    pub active_counts: Vec<usize>,
    pub fallbacks: usize,
    pub mults: u64,
}

impl Projector<'_> {
    pub fn project(&self, h: &HiddenBatch, w: &WeightMatrix) -> Result<StepProjection> {
        match *self {
            Projector::Exact => {
                let counter = OpCounter::new();
                let probs = softmax_rows(&full_project_counted(h, w, Some(&counter))?)?;
                Ok(StepProjection {
                    probs,
                    active_counts: vec![w.n()],
                    fallbacks: 0,
                    mults: counter.get(),
                })
            }
            Projector::Clustered {
                map,
                scope: UnionScope::Batch,
            } => {
                let out = clustered_project(h, w, map)?;
                let active = if out.fallback { w.n() } else { out.union.len() };
                Ok(StepProjection {
                    probs: out.probs,
                    active_counts: vec![active],
                    fallbacks: usize::from(out.fallback),
                    mults: out.mults,
                })
            }
            Projector::Clustered {
                map,
                scope: UnionScope::PerRow,
            } => {
                let out = clustered_project_rowwise(h, w, map)?;
                Ok(StepProjection {
                    probs: out.probs,
                    active_counts: out
                        .unions
                        .iter()
                        .map(|u| if u.is_empty() { w.n() } else { u.len() })
                        .collect(),
                    fallbacks: out.fallbacks,
                    mults: out.mults,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopEstimate {
    pub exact_mults: u64,
    pub clustered_mults: u64,
    pub ratio: f64,
}

/// Multiplication counts for one step: `M*d*N` exact versus `M*d*r + M*d*|union|`.
pub fn flop_estimate(m: usize, d: usize, n: usize, r: usize, union_size: usize) -> FlopEstimate {
    let (m, d, n, r, u) = (m as u64, d as u64, n as u64, r as u64, union_size as u64);
    let exact_mults = m * d * n;
    let clustered_mults = m * d * r + m * d * u;
    FlopEstimate {
        exact_mults,
        clustered_mults,
        ratio: exact_mults as f64 / clustered_mults as f64,
    }
}

/// What the decode loop tells a hidden source about one live row.
#[derive(Debug, Clone, Copy)]
pub struct RowContext<'a> {
    pub input: usize,
    pub step: usize,
    /// Prefix plus every token emitted so far on this hypothesis.
    pub history: &'a [TokenId],
}

/// Produces the decoder's hidden vectors for the live rows of a step.
pub trait HiddenSource {
    fn dim(&self) -> usize;
    fn hidden(&self, rows: &[RowContext<'_>]) -> Result<HiddenBatch>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub max_steps: usize,
    pub eos: Option<TokenId>,
    pub scope: UnionScope,
}

impl DecodeConfig {
    pub fn greedy(max_steps: usize) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_size: 1,
            max_steps,
            eos: None,
            scope: UnionScope::Batch,
        }
    }

    pub fn beam(beam_size: usize, max_steps: usize) -> Self {
        Self {
            mode: DecodeMode::Beam,
            beam_size,
            ..Self::greedy(max_steps)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub step: usize,
    /// Hypotheses per input, best first.
    pub beams: Vec<Vec<Hypothesis>>,
    prefix_lens: Vec<usize>,
}

impl DecodeState {
    pub fn new(initial: &[Vec<TokenId>]) -> Self {
        Self {
            step: 0,
            beams: initial
                .iter()
                .map(|prefix| {
                    vec![Hypothesis {
                        tokens: prefix.clone(),
                        log_prob: 0.0,
                        finished: false,
                    }]
                })
                .collect(),
            prefix_lens: initial.iter().map(Vec::len).collect(),
        }
    }

    /// Live rows in input order, then hypothesis order; this is the row order `M`.
    fn live(&self) -> Vec<(usize, usize)> {
        self.beams
            .iter()
            .enumerate()
            .flat_map(|(i, hyps)| {
                hyps.iter()
                    .enumerate()
                    .filter(|(_, h)| !h.finished)
                    .map(move |(b, _)| (i, b))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Best hypothesis per input, prefix excluded.
    pub sequences: Vec<Vec<TokenId>>,
    pub scores: Vec<f64>,
    pub steps_run: usize,
    pub fallbacks: usize,
    /// Union size of every projection call, in order.
    pub active_counts: Vec<usize>,
}

/// Decodes every input from its prefix until EOS or `max_steps`.
///
/// With `map` absent every step uses the exact projection; otherwise the
/// clustered projection over the live rows of the step.
pub fn decode(
    initial: &[Vec<TokenId>],
    source: &dyn HiddenSource,
    w: &WeightMatrix,
    map: Option<&ClusterMap>,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    if config.max_steps < 1 {
        return Err(Error::invalid("max_steps must be >= 1"));
    }
    if config.beam_size < 1 {
        return Err(Error::invalid("beam_size must be >= 1"));
    }
    if initial.is_empty() {
        return Err(Error::invalid("decode needs at least one input"));
    }
    check_dim("hidden source dimension vs weights", w.d(), source.dim())?;
    let projector = match map {
        None => Projector::Exact,
        Some(map) => Projector::Clustered {
            map,
            scope: config.scope,
        },
    };
    let width = match config.mode {
        DecodeMode::Greedy => 1,
        DecodeMode::Beam => config.beam_size,
    };

    let mut state = DecodeState::new(initial);
    let mut fallbacks = 0;
    let mut active_counts = Vec::new();
    while state.step < config.max_steps {
        let live = state.live();
        if live.is_empty() {
            break;
        }
        let contexts: Vec<RowContext> = live
            .iter()
            .map(|&(i, b)| RowContext {
                input: i,
                step: state.step,
                history: &state.beams[i][b].tokens,
            })
            .collect();
        let h = source.hidden(&contexts)?;
        check_dim("hidden rows vs live hypotheses", live.len(), h.len())?;
        let out = projector.project(&h, w)?;
        fallbacks += out.fallbacks;
        active_counts.extend(out.active_counts);

        let mut next = Vec::with_capacity(state.beams.len());
        for (i, hyps) in state.beams.iter().enumerate() {
            // (score, hypothesis index, token); finished hypotheses carry over with no token
            let mut candidates: Vec<(f64, usize, Option<TokenId>)> = Vec::new();
            for (b, hyp) in hyps.iter().enumerate() {
                if hyp.finished {
                    candidates.push((hyp.log_prob, b, None));
                    continue;
                }
                let row_idx = live.iter().position(|&x| x == (i, b)).unwrap();
                let row = out.probs.row(row_idx);
                for tok in topk_row(row, width) {
                    let p = row[tok as usize];
                    if p > 0.0 {
                        candidates.push((hyp.log_prob + (p as f64).ln(), b, Some(tok)));
                    }
                }
            }
            // stable: equal scores keep hypothesis then probability-rank order
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
            candidates.truncate(width);
            let beam = candidates
                .into_iter()
                .map(|(score, b, tok)| {
                    let mut hyp = hyps[b].clone();
                    hyp.log_prob = score;
                    if let Some(tok) = tok {
                        hyp.tokens.push(tok);
                        hyp.finished = config.eos == Some(tok);
                    }
                    hyp
                })
                .collect();
            next.push(beam);
        }
        state.beams = next;
        state.step += 1;
    }

    let (sequences, scores) = state
        .beams
        .iter()
        .zip(&state.prefix_lens)
        .map(|(hyps, &plen)| (hyps[0].tokens[plen..].to_vec(), hyps[0].log_prob))
        .unzip();
    Ok(DecodeOutput {
        sequences,
        scores,
        steps_run: state.step,
        fallbacks,
        active_counts,
    })
}

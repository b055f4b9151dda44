//! Cluster maps: centroids plus the union of member top-K ids per cluster.

use std::collections::BTreeSet;

use crate::error::{check_dim, Error, Result};
use crate::kmeans::{kmeans_train, CentroidSet, KMeansParams};
use crate::recorder::{HiddenRecordSet, Record};
use crate::tensor::TokenId;

/// Which languages a map was built for. Advisory only; projection never checks it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DirectionMeta {
    pub source_known: bool,
    pub target: String,
    pub sources: Vec<String>,
}

impl DirectionMeta {
    pub fn target_only(target: &str) -> Self {
        Self {
            source_known: false,
            target: target.to_owned(),
            sources: Vec::new(),
        }
    }

    pub fn source_target(sources: &[&str], target: &str) -> Self {
        Self {
            source_known: true,
            target: target.to_owned(),
            sources: sources.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildStats {
    pub member_counts: Vec<u32>,
    /// `100 * |a_j| / N` per cluster.
    pub active_pct: Vec<f64>,
    pub max_active_pct: f64,
    /// Member-weighted mean of `active_pct`, i.e. `100 * N_bar / N`.
    pub mean_active_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMap {
    centroids: CentroidSet,
    active_sets: Vec<Vec<TokenId>>,
    member_counts: Vec<u32>,
    n: usize,
    k: usize,
    direction: DirectionMeta,
}

impl ClusterMap {
    /// Assembles a map, checking every structural invariant.
    pub fn new(
        centroids: CentroidSet,
        active_sets: Vec<Vec<TokenId>>,
        member_counts: Vec<u32>,
        n: usize,
        k: usize,
        direction: DirectionMeta,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("map vocabulary size must be >= 1"));
        }
        check_dim("active set count", centroids.r(), active_sets.len())?;
        check_dim("member count entries", centroids.r(), member_counts.len())?;
        for (j, (set, &members)) in active_sets.iter().zip(&member_counts).enumerate() {
            let field = || format!("active_sets[{j}]");
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::integrity(field(), "ids not sorted and unique"));
            }
            if let Some(&bad) = set.last().filter(|&&id| id as usize >= n) {
                return Err(Error::integrity(field(), format!("id {bad} >= N={n}")));
            }
            if set.is_empty() != (members == 0) {
                return Err(Error::integrity(
                    field(),
                    format!("{} ids with {members} members", set.len()),
                ));
            }
        }
        Ok(Self {
            centroids,
            active_sets,
            member_counts,
            n,
            k,
            direction,
        })
    }

    pub fn centroids(&self) -> &CentroidSet {
        &self.centroids
    }

    pub fn r(&self) -> usize {
        self.active_sets.len()
    }

    pub fn d(&self) -> usize {
        self.centroids.d()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn direction(&self) -> &DirectionMeta {
        &self.direction
    }

    pub fn active_set(&self, j: usize) -> &[TokenId] {
        &self.active_sets[j]
    }

    pub fn active_sets(&self) -> &[Vec<TokenId>] {
        &self.active_sets
    }

    pub fn member_counts(&self) -> &[u32] {
        &self.member_counts
    }

    pub fn build_stats(&self) -> BuildStats {
        let n = self.n as f64;
        let active_pct: Vec<f64> = self
            .active_sets
            .iter()
            .map(|s| 100.0 * s.len() as f64 / n)
            .collect();
        let max_active_pct = active_pct.iter().copied().fold(0.0, f64::max);
        let total: f64 = self.member_counts.iter().map(|&c| c as f64).sum();
        let mean_active_pct = if total > 0.0 {
            active_pct
                .iter()
                .zip(&self.member_counts)
                .map(|(&p, &c)| p * c as f64)
                .sum::<f64>()
                / total
        } else {
            0.0
        };
        BuildStats {
            member_counts: self.member_counts.clone(),
            active_pct,
            max_active_pct,
            mean_active_pct,
        }
    }
}

/// Assigns each record to its nearest centroid and unions the members' top-K ids.
pub fn build_active_sets(
    records: &HiddenRecordSet,
    centroids: &CentroidSet,
    n: usize,
    direction: DirectionMeta,
) -> Result<ClusterMap> {
    if records.is_empty() {
        return Err(Error::invalid(
            "cannot build a map from an empty record set",
        ));
    }
    if records.k() == 0 {
        return Err(Error::invalid("records carry no top-K ids (K = 0)"));
    }
    check_dim("record dimension vs centroids", centroids.d(), records.d())?;
    let assignment = centroids.assign_batch(&records.vectors()?)?;
    let mut unions: Vec<BTreeSet<TokenId>> = vec![BTreeSet::new(); centroids.r()];
    let mut members = vec![0u32; centroids.r()];
    for (rec, &c) in records.records().iter().zip(&assignment) {
        if let Some(&bad) = rec.topk.iter().find(|&&id| id as usize >= n) {
            return Err(Error::invalid(format!("recorded token id {bad} >= N={n}")));
        }
        unions[c as usize].extend(rec.topk.iter().copied());
        members[c as usize] += 1;
    }
    let active_sets = unions
        .into_iter()
        .map(|s| s.into_iter().collect())
        .collect();
    ClusterMap::new(
        centroids.clone(),
        active_sets,
        members,
        n,
        records.k(),
        direction,
    )
}

/// True when `tag` names a direction into `target`, restricted to `sources` when given.
///
/// A tag is the source code immediately followed by the target code, e.g. `"ItEn"`.
pub fn tag_matches(tag: &str, target: &str, sources: Option<&[String]>) -> bool {
    let Some(source) = tag.strip_suffix(target) else {
        return false;
    };
    match sources {
        None => true,
        Some(list) => list.iter().any(|s| s == source),
    }
}

pub fn filter_by_direction(
    records: &HiddenRecordSet,
    target: &str,
    sources: Option<&[String]>,
) -> Result<HiddenRecordSet> {
    let kept: Vec<Record> = records
        .records()
        .iter()
        .filter(|r| tag_matches(&r.tag, target, sources))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid(format!(
            "no records match target {target:?} with sources {sources:?}"
        )));
    }
    Ok(HiddenRecordSet::from_parts(records.d(), records.k(), kept))
}

/// Keeps the first `new_k` (most likely) ids of every record.
pub fn k_truncate(records: &HiddenRecordSet, new_k: usize) -> Result<HiddenRecordSet> {
    if new_k < 1 || new_k > records.k() {
        return Err(Error::invalid(format!(
            "new K must satisfy 1 <= K <= {}, got {new_k}",
            records.k()
        )));
    }
    let kept = records
        .records()
        .iter()
        .map(|r| Record {
            vector: r.vector.clone(),
            topk: r.topk[..new_k].to_vec(),
            tag: r.tag.clone(),
        })
        .collect();
    Ok(HiddenRecordSet::from_parts(records.d(), new_k, kept))
}

/// Full offline pipeline on already-filtered records: kmeans, then active-set union.
pub fn train_map(
    records: &HiddenRecordSet,
    params: &KMeansParams,
    n: usize,
    direction: DirectionMeta,
) -> Result<ClusterMap> {
    if records.is_empty() {
        return Err(Error::invalid(
            "cannot train a map from an empty record set",
        ));
    }
    let centroids = kmeans_train(&records.vectors()?, params)?;
    build_active_sets(records, &centroids, n, direction)
}

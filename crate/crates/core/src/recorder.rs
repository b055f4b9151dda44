//! Offline recording of (hidden vector, top-K token ids) pairs.

use crate::error::{check_dim, Error, Result};
use crate::tensor::{full_project, softmax_rows, topk_rows, HiddenBatch, TokenId, WeightMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub vector: Vec<f32>,
    /// Likely tokens in descending probability order.
    pub topk: Vec<TokenId>,
    /// Language direction, e.g. `"ItEn"`.
    pub tag: String,
}

/// Recorded training pairs sharing one dimension `d` and one `K`.
///
/// A set with `K = 0` carries hidden vectors only; it is how raw hidden
/// datasets are stored before recording.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenRecordSet {
    d: usize,
    k: usize,
    records: Vec<Record>,
}

impl HiddenRecordSet {
    pub fn new(d: usize, k: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("record dimension must be >= 1"));
        }
        Ok(Self {
            d,
            k,
            records: Vec::new(),
        })
    }

    /// Hidden-only set (`K = 0`) with every vector tagged `tag`.
    pub fn hidden_only(batch: &HiddenBatch, tag: &str) -> Result<Self> {
        let mut set = Self::new(batch.d(), 0)?;
        for row in batch.rows() {
            set.push(Record {
                vector: row.to_vec(),
                topk: Vec::new(),
                tag: tag.to_owned(),
            })?;
        }
        Ok(set)
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        check_dim("record vector length", self.d, record.vector.len())?;
        check_dim("record top-k length", self.k, record.topk.len())?;
        if record.tag.is_empty() {
            return Err(Error::invalid("direction tag must be non-empty"));
        }
        if record.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("record vector is not finite"));
        }
        let mut ids = record.topk.clone();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("record top-k ids are not unique"));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Distinct tags in order of first appearance.
    pub fn tags(&self) -> Vec<&str> {
        let mut tags: Vec<&str> = Vec::new();
        for r in &self.records {
            if !tags.contains(&r.tag.as_str()) {
                tags.push(&r.tag);
            }
        }
        tags
    }

    /// All vectors stacked as one batch.
    pub fn vectors(&self) -> Result<HiddenBatch> {
        let mut data = Vec::with_capacity(self.d * self.records.len());
        for r in &self.records {
            data.extend_from_slice(&r.vector);
        }
        HiddenBatch::new(self.d, data)
    }

    /// Consecutive batches of at most `batch` vectors.
    pub fn batches(&self, batch: usize) -> Result<Vec<HiddenBatch>> {
        if batch == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        self.records
            .chunks(batch)
            .map(|chunk| {
                let mut data = Vec::with_capacity(self.d * chunk.len());
                for r in chunk {
                    data.extend_from_slice(&r.vector);
                }
                HiddenBatch::new(self.d, data)
            })
            .collect()
    }

    pub(crate) fn from_parts(d: usize, k: usize, records: Vec<Record>) -> Self {
        Self { d, k, records }
    }
}

/// Rows projected at once while recording; bounds the logits buffer to `RECORD_CHUNK * N`.
const RECORD_CHUNK: usize = 512;

/// Runs the exact projection over `stream` and keeps each vector's `k` most likely tokens.
pub fn record<'a, I>(stream: I, w: &WeightMatrix, k: usize, tag: &str) -> Result<HiddenRecordSet>
where
    I: IntoIterator<Item = &'a HiddenBatch>,
{
    if k == 0 || k > w.n() {
        return Err(Error::invalid(format!(
            "K must satisfy 1 <= K <= N={}, got {k}",
            w.n()
        )));
    }
    let mut set = HiddenRecordSet::new(w.d(), k)?;
    for batch in stream {
        check_dim("hidden dimension vs weights", w.d(), batch.d())?;
        for chunk in batch.as_slice().chunks(RECORD_CHUNK * batch.d()) {
            let part = HiddenBatch::new(batch.d(), chunk.to_vec())?;
            let probs = softmax_rows(&full_project(&part, w)?)?;
            for (row, topk) in part.rows().zip(topk_rows(&probs, k)?) {
                set.push(Record {
                    vector: row.to_vec(),
                    topk,
                    tag: tag.to_owned(),
                })?;
            }
        }
    }
    Ok(set)
}

/// Concatenates record sets in order, keeping each record's tag.
pub fn merge(sets: &[HiddenRecordSet]) -> Result<HiddenRecordSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("merge needs at least one record set"))?;
    let mut records = Vec::with_capacity(sets.iter().map(HiddenRecordSet::len).sum());
    for s in sets {
        check_dim("merged record dimension", first.d, s.d)?;
        check_dim("merged record K", first.k, s.k)?;
        records.extend_from_slice(&s.records);
    }
    Ok(HiddenRecordSet::from_parts(first.d, first.k, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn random_weights(seed: u64, d: usize, n: usize) -> WeightMatrix {
        let mut rng = DetRng::new(seed);
        WeightMatrix::new(
            d,
            n,
            rng.normal_vec(d * n, 0.0, 1.0),
            rng.normal_vec(n, 0.0, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn zero_vector_records_bias_argmax() {
        let mut bias = vec![0.0f32; 10];
        bias[7] = 2.0;
        let w = WeightMatrix::new(3, 10, vec![0.5; 30], bias).unwrap();
        let h = HiddenBatch::new(3, vec![0.0; 3]).unwrap();
        let set = record([&h], &w, 1, "ItEn").unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.records()[0].topk, vec![7]);
        assert_eq!(set.records()[0].tag, "ItEn");
    }

    #[test]
    fn k_equals_n_is_permutation() {
        let w = random_weights(1, 4, 12);
        let mut rng = DetRng::new(2);
        let h = HiddenBatch::new(4, rng.normal_vec(5 * 4, 0.0, 1.0)).unwrap();
        let set = record([&h], &w, 12, "FrEn").unwrap();
        for r in set.records() {
            let mut ids = r.topk.clone();
            ids.sort_unstable();
            assert_eq!(ids, (0..12).collect::<Vec<_>>());
        }
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let w = random_weights(3, 8, 64);
        let mut rng = DetRng::new(4);
        let batches: Vec<HiddenBatch> = (0..10)
            .map(|_| HiddenBatch::new(8, rng.normal_vec(10 * 8, 0.0, 1.0)).unwrap())
            .collect();
        let set = record(&batches, &w, 3, "EsEn").unwrap();
        assert_eq!(set.len(), 100);
        for (r, row) in set
            .records()
            .iter()
            .zip(batches.iter().flat_map(|b| b.rows()))
        {
            assert_eq!(r.vector, row);
            // logits in f64, sorted; softmax is monotone so the order carries over
            let mut scored: Vec<(f64, u32)> = (0..64)
                .map(|j| {
                    let z: f64 = w
                        .column(j)
                        .iter()
                        .zip(row)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
                        + w.bias()[j] as f64;
                    (z, j as u32)
                })
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<u32> = scored[..3].iter().map(|s| s.1).collect();
            assert_eq!(r.topk, want);
        }
    }

    #[test]
    fn record_rejects_bad_k_and_dims() {
        let w = random_weights(5, 4, 6);
        let h = HiddenBatch::new(4, vec![0.0; 4]).unwrap();
        assert!(record([&h], &w, 0, "t").is_err());
        assert!(record([&h], &w, 7, "t").is_err());
        let bad = HiddenBatch::new(3, vec![0.0; 3]).unwrap();
        assert!(matches!(
            record([&bad], &w, 1, "t"),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn merge_concatenates_in_order() {
        let w = random_weights(6, 4, 20);
        let mut rng = DetRng::new(7);
        let a = record(
            [&HiddenBatch::new(4, rng.normal_vec(10 * 4, 0.0, 1.0)).unwrap()],
            &w,
            2,
            "ItEn",
        )
        .unwrap();
        let b = record(
            [&HiddenBatch::new(4, rng.normal_vec(20 * 4, 0.0, 1.0)).unwrap()],
            &w,
            2,
            "FrEn",
        )
        .unwrap();
        assert_eq!(merge(std::slice::from_ref(&a)).unwrap(), a);
        let m = merge(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.len(), 30);
        assert_eq!(&m.records()[..10], a.records());
        assert_eq!(&m.records()[10..], b.records());
        assert_eq!(m.tags(), vec!["ItEn", "FrEn"]);

        let other_k = record(
            [&HiddenBatch::new(4, rng.normal_vec(4, 0.0, 1.0)).unwrap()],
            &w,
            3,
            "EsEn",
        )
        .unwrap();
        assert!(merge(&[a, other_k]).is_err());
        assert!(merge(&[]).is_err());
    }

    #[test]
    fn push_validates() {
        let mut s = HiddenRecordSet::new(2, 2).unwrap();
        let rec = |topk: Vec<u32>, tag: &str| Record {
            vector: vec![0.0, 1.0],
            topk,
            tag: tag.into(),
        };
        assert!(s.push(rec(vec![1, 1], "t")).is_err());
        assert!(s.push(rec(vec![1], "t")).is_err());
        assert!(s.push(rec(vec![1, 2], "")).is_err());
        s.push(rec(vec![2, 1], "t")).unwrap();
        assert_eq!(s.len(), 1);
    }
}

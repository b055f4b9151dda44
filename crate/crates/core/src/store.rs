//! Binary persistence for weights (`WMAT1`), records (`HREC1`) and cluster maps (`CMAP1`).
//!
//! All integers are little-endian, all payload values f32, no padding or
//! compression. Every file starts with a 5-byte ASCII magic and a u32 version.
//!
//! ```text
//! WMAT1  version d N  | N columns x d f32 (column-major) | N f32 bias
//! HREC1  version d K count | tag table | count x (u16 tag index, d f32, K u32 ids)
//! CMAP1  version r d N K | u8 source_known | tag table (target, sources...)
//!        | r x d f32 centroids | r f32 squared norms
//!        | r x (u32 member_count, u32 set_size, set_size u32 sorted ids)
//! tag table = u16 tag count, then per tag: u16 byte length + UTF-8 bytes
//! ```
//!
//! Loaders reject anything structurally off (wrong magic, short payloads,
//! trailing bytes, unsorted sets, stale squared norms) and name the field.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kmeans::CentroidSet;
use crate::map::{ClusterMap, DirectionMeta};
use crate::recorder::{HiddenRecordSet, Record};
use crate::tensor::{TokenId, WeightMatrix};

pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_MAGIC: &[u8; 5] = b"WMAT1";
pub const RECORDS_MAGIC: &[u8; 5] = b"HREC1";
pub const MAP_MAGIC: &[u8; 5] = b"CMAP1";

/// Relative tolerance for stored squared norms against their centroids.
pub const SQ_NORM_TOLERANCE: f64 = 1e-4;

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 5]) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f32]) {
        self.0.reserve(vs.len() * 4);
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn u32s(&mut self, vs: &[u32]) {
        self.0.reserve(vs.len() * 4);
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn count(&mut self, field: &str, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| overflow(field))?;
        self.u32(v);
        Ok(())
    }

    fn tags<S: AsRef<str>>(&mut self, tags: &[S]) -> Result<()> {
        let n = u16::try_from(tags.len()).map_err(|_| overflow("tag count"))?;
        self.u16(n);
        for t in tags {
            let bytes = t.as_ref().as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| overflow("tag length"))?;
            self.u16(len);
            self.0.extend_from_slice(bytes);
        }
        Ok(())
    }
}

fn overflow(field: &str) -> Error {
    Error::SizeOverflow {
        field: field.to_owned(),
    }
}

fn truncated(field: &str) -> Error {
    Error::Truncated {
        field: field.to_owned(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], magic: &[u8; 5]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let found = r.take(5, "magic")?;
        if found != magic {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        Ok(r)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(truncated(field));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Byte size of `count` items of `width` bytes, checked against overflow and the buffer.
    fn span(&self, count: usize, width: usize, field: &str) -> Result<usize> {
        let bytes = count.checked_mul(width).ok_or_else(|| overflow(field))?;
        if bytes > self.remaining() {
            return Err(truncated(field));
        }
        Ok(bytes)
    }

    fn f32s(&mut self, count: usize, field: &str) -> Result<Vec<f32>> {
        let bytes = self.span(count, 4, field)?;
        let raw = self.take(bytes, field)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::integrity(
                format!("{field}[{i}]"),
                "value is not finite",
            ));
        }
        Ok(values)
    }

    fn u32s(&mut self, count: usize, field: &str) -> Result<Vec<u32>> {
        let bytes = self.span(count, 4, field)?;
        let raw = self.take(bytes, field)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    fn tags(&mut self, field: &str) -> Result<Vec<String>> {
        let n = self.u16(&format!("{field} count"))?;
        (0..n)
            .map(|i| {
                let f = format!("{field}[{i}]");
                let len = self.u16(&f)? as usize;
                let bytes = self.take(len, &f)?;
                String::from_utf8(bytes.to_vec())
                    .map_err(|_| Error::integrity(f.clone(), "tag is not valid UTF-8"))
            })
            .collect()
    }

    fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::integrity(
                "trailer",
                format!("{} unexpected bytes after payload", self.remaining()),
            ));
        }
        Ok(())
    }
}

fn nonzero(v: u32, field: &str) -> Result<usize> {
    if v == 0 {
        return Err(Error::integrity(field, "must be >= 1"));
    }
    Ok(v as usize)
}

pub fn encode_weights(w: &WeightMatrix) -> Result<Vec<u8>> {
    let mut out = Writer::new(WEIGHTS_MAGIC);
    out.count("d", w.d())?;
    out.count("N", w.n())?;
    out.f32s(w.columns_raw());
    out.f32s(w.bias());
    Ok(out.0)
}

pub fn decode_weights(buf: &[u8]) -> Result<WeightMatrix> {
    let mut r = Reader::open(buf, WEIGHTS_MAGIC)?;
    let d = nonzero(r.u32("d")?, "d")?;
    let n = nonzero(r.u32("N")?, "N")?;
    let cells = d.checked_mul(n).ok_or_else(|| overflow("columns"))?;
    let columns = r.f32s(cells, "columns")?;
    let bias = r.f32s(n, "bias")?;
    r.finish()?;
    WeightMatrix::new(d, n, columns, bias)
}

pub fn encode_records(set: &HiddenRecordSet) -> Result<Vec<u8>> {
    let tags = set.tags();
    let mut out = Writer::new(RECORDS_MAGIC);
    out.count("d", set.d())?;
    out.count("K", set.k())?;
    out.count("count", set.len())?;
    out.tags(&tags)?;
    for rec in set.records() {
        // tags.len() fits u16, checked by out.tags
        let idx = tags.iter().position(|t| *t == rec.tag).unwrap() as u16;
        out.u16(idx);
        out.f32s(&rec.vector);
        out.u32s(&rec.topk);
    }
    Ok(out.0)
}

pub fn decode_records(buf: &[u8]) -> Result<HiddenRecordSet> {
    let mut r = Reader::open(buf, RECORDS_MAGIC)?;
    let d = nonzero(r.u32("d")?, "d")?;
    let k = r.u32("K")? as usize;
    let count = r.u32("count")? as usize;
    let tags = r.tags("tags")?;
    let record_bytes = d
        .checked_mul(4)
        .and_then(|x| k.checked_mul(4).and_then(|y| x.checked_add(y)))
        .and_then(|x| x.checked_add(2))
        .ok_or_else(|| overflow("record size"))?;
    r.span(count, record_bytes, "records")?;
    let mut set = HiddenRecordSet::new(d, k)?;
    for i in 0..count {
        let idx = r.u16(&format!("records[{i}].tag_index"))? as usize;
        let tag = tags.get(idx).ok_or_else(|| {
            Error::integrity(
                format!("records[{i}].tag_index"),
                format!("index {idx} with {} tags", tags.len()),
            )
        })?;
        let vector = r.f32s(d, &format!("records[{i}].vector"))?;
        let topk = r.u32s(k, &format!("records[{i}].topk"))?;
        set.push(Record {
            vector,
            topk,
            tag: tag.clone(),
        })
        .map_err(|e| Error::integrity(format!("records[{i}]"), e.to_string()))?;
    }
    r.finish()?;
    Ok(set)
}

pub fn encode_map(map: &ClusterMap) -> Result<Vec<u8>> {
    let c = map.centroids();
    let meta = map.direction();
    let mut out = Writer::new(MAP_MAGIC);
    out.count("r", map.r())?;
    out.count("d", map.d())?;
    out.count("N", map.n())?;
    out.count("K", map.k())?;
    out.u8(u8::from(meta.source_known));
    let mut tags = vec![meta.target.as_str()];
    tags.extend(meta.sources.iter().map(String::as_str));
    out.tags(&tags)?;
    out.f32s(c.centroids_raw());
    out.f32s(c.sq_norms());
    for (set, &members) in map.active_sets().iter().zip(map.member_counts()) {
        out.u32(members);
        out.count("set_size", set.len())?;
        out.u32s(set);
    }
    Ok(out.0)
}

pub fn decode_map(buf: &[u8]) -> Result<ClusterMap> {
    let mut r = Reader::open(buf, MAP_MAGIC)?;
    let clusters = nonzero(r.u32("r")?, "r")?;
    let d = nonzero(r.u32("d")?, "d")?;
    let n = nonzero(r.u32("N")?, "N")?;
    let k = r.u32("K")? as usize;
    let source_known = match r.u8("source_known")? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::integrity(
                "source_known",
                format!("flag value {other}"),
            ))
        }
    };
    let mut tags = r.tags("tags")?;
    if tags.is_empty() {
        return Err(Error::integrity("tags", "target tag missing"));
    }
    let target = tags.remove(0);
    let cells = clusters
        .checked_mul(d)
        .ok_or_else(|| overflow("centroids"))?;
    let centroids = r.f32s(cells, "centroids")?;
    let sq_norms = r.f32s(clusters, "sq_norms")?;
    let mut active_sets = Vec::with_capacity(clusters.min(r.remaining() / 8));
    let mut members = Vec::with_capacity(active_sets.capacity());
    for j in 0..clusters {
        members.push(r.u32(&format!("clusters[{j}].member_count"))?);
        let size = r.u32(&format!("clusters[{j}].set_size"))? as usize;
        if size > n {
            return Err(Error::integrity(
                format!("clusters[{j}].set_size"),
                format!("{size} ids exceed N={n}"),
            ));
        }
        let ids: Vec<TokenId> = r.u32s(size, &format!("clusters[{j}].ids"))?;
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::integrity(
                format!("clusters[{j}].ids"),
                "ids not sorted and unique",
            ));
        }
        if let Some(&bad) = ids.last().filter(|&&id| id as usize >= n) {
            return Err(Error::integrity(
                format!("clusters[{j}].ids"),
                format!("id {bad} >= N={n}"),
            ));
        }
        active_sets.push(ids);
    }
    r.finish()?;

    let set = CentroidSet::with_sq_norms(d, centroids, sq_norms)?;
    for (j, &stored) in set.sq_norms().iter().enumerate() {
        let exact = crate::tensor::dot(set.centroid(j), set.centroid(j)) as f64;
        let diff = (stored as f64 - exact).abs();
        let bound = SQ_NORM_TOLERANCE * exact.abs().max(f64::MIN_POSITIVE);
        if diff > bound && diff > 0.0 {
            return Err(Error::integrity(
                format!("sq_norms[{j}]"),
                format!("stored {stored} but centroid gives {exact}"),
            ));
        }
    }
    let direction = DirectionMeta {
        source_known,
        target,
        sources: tags,
    };
    ClusterMap::new(set, active_sets, members, n, k, direction)
}

pub fn save_weights(path: impl AsRef<Path>, w: &WeightMatrix) -> Result<()> {
    Ok(fs::write(path, encode_weights(w)?)?)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightMatrix> {
    decode_weights(&fs::read(path)?)
}

pub fn save_records(path: impl AsRef<Path>, set: &HiddenRecordSet) -> Result<()> {
    Ok(fs::write(path, encode_records(set)?)?)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<HiddenRecordSet> {
    decode_records(&fs::read(path)?)
}

pub fn save_map(path: impl AsRef<Path>, map: &ClusterMap) -> Result<()> {
    Ok(fs::write(path, encode_map(map)?)?)
}

pub fn load_map(path: impl AsRef<Path>) -> Result<ClusterMap> {
    decode_map(&fs::read(path)?)
}

/// Sidecar path for `path`: the same name with `.manifest` appended.
pub fn manifest_path(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Writes `key: value` lines next to `path`. Informational; the binary file is authoritative.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(k);
        text.push_str(": ");
        text.push_str(v);
        text.push('\n');
    }
    Ok(fs::write(manifest_path(path), text)?)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(manifest_path(path))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once(": "))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect())
}

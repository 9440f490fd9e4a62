//! Serving: exported item vectors and exact top-K retrieval.
//!
//! Because `σ` is strictly increasing and `b` is shared by all candidates,
//! ranking candidates by `P(y=1 | q, c)` is the same as ranking them by the
//! inner product `x'_q · x_c` with `x'_q = Mᵀ x_q`. Retrieval is therefore a
//! maximum inner product search over the exported candidate vectors.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use crate::compat::{sigmoid, CompatibilityParams, StyleModel};
use crate::corpus::ItemCatalog;
use crate::error::{Error, Result};
use crate::real::Real;

pub const INDEX_MAGIC: &[u8; 4] = b"DSI1";
pub const INDEX_VERSION: u32 = 1;

/// Candidate vectors with cached norms. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleIndex {
    ids: Vec<String>,
    dim: usize,
    /// Item-major: vector `i` occupies `[i*dim, (i+1)*dim)`.
    vectors: Vec<f32>,
    norms: Vec<f32>,
    /// Candidate positions by descending norm.
    by_norm: Vec<usize>,
}

/// `x'_q = Mᵀ x_q`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedQuery(pub Vec<f32>);

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub item_id: String,
    /// `x'_q · x_c`; excludes the bias `b`.
    pub score: f64,
}

impl Hit {
    pub fn probability(&self, bias: f64) -> f64 {
        sigmoid(self.score + bias)
    }
}

/// Dot product accumulated in `f64`.
pub fn inner<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.to_acc() * y.to_acc())
        .sum()
}

fn norm(v: &[f32]) -> f32 {
    inner(v, v).sqrt() as f32
}

impl StyleIndex {
    /// Builds an index from ids and item-major vectors.
    pub fn new(ids: Vec<String>, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 || vectors.len() != ids.len() * dim {
            return Err(Error::shape(
                "StyleIndex::new",
                format!("{} x {dim} values", ids.len()),
                vectors.len(),
            ));
        }
        let norms = vectors.chunks(dim).map(norm).collect();
        Ok(Self::with_norms(ids, dim, vectors, norms))
    }

    fn with_norms(ids: Vec<String>, dim: usize, vectors: Vec<f32>, norms: Vec<f32>) -> Self {
        let mut by_norm: Vec<usize> = (0..ids.len()).collect();
        by_norm.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
        Self {
            ids,
            dim,
            vectors,
            norms,
            by_norm,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norm(&self, i: usize) -> f32 {
        self.norms[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    fn check_query(&self, q: &TransformedQuery) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("style index is empty".into()));
        }
        if q.0.len() != self.dim {
            return Err(Error::shape("style index query", self.dim, q.0.len()));
        }
        Ok(())
    }

    fn score(&self, q: &TransformedQuery, i: usize) -> f64 {
        inner(&q.0, self.vector(i))
    }

    /// Serialises to the `DSI1` layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * (4 + 4 * self.dim + 4));
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in self.vector(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for n in &self.norms {
            out.extend_from_slice(&n.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "DSI1 index");
        if r.take(4, "magic")? != INDEX_MAGIC {
            return Err(Error::format("DSI1 index", "magic", "expected \"DSI1\""));
        }
        let version = r.u32("version")?;
        if version != INDEX_VERSION {
            return Err(Error::format(
                "DSI1 index",
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let dim = r.u32("dimension")? as usize;
        let count = r.u32("count")? as usize;
        if dim == 0 {
            return Err(Error::format("DSI1 index", "dimension", "must be >= 1"));
        }
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut vectors = Vec::with_capacity(count.min(1 << 20) * dim);
        for i in 0..count {
            let len = r.u32("id length")? as usize;
            let id = std::str::from_utf8(r.take(len, "id")?)
                .map_err(|_| Error::format("DSI1 index", format!("id {i}"), "not UTF-8"))?;
            ids.push(id.to_owned());
            for _ in 0..dim {
                vectors.push(r.f32("vector")?);
            }
        }
        let norms = (0..count)
            .map(|_| r.f32("norms"))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self::with_norms(ids, dim, vectors, norms))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Little-endian cursor that reports truncation by field name.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], format: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            format,
        }
    }

    pub(crate) fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.format,
                field,
                format!("file truncated at byte {} (need {n} more)", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self, field: &str) -> Result<f32> {
        let b = self.take(4, field)?;
        Ok(f32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.format,
                "length",
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Encodes every catalog title in inference mode.
pub fn export_index(model: &StyleModel<f32>, catalog: &ItemCatalog) -> Result<StyleIndex> {
    if catalog.is_empty() {
        return Err(Error::Data(
            "cannot export an index for an empty catalog".into(),
        ));
    }
    let n = model.repr_dim();
    let mut ids = Vec::with_capacity(catalog.len());
    let mut vectors = Vec::with_capacity(catalog.len() * n);
    let prepared = model.prepare()?;
    for (id, title) in catalog.iter() {
        ids.push(id.to_owned());
        vectors.extend(prepared.encode(title)?);
    }
    StyleIndex::new(ids, n, vectors)
}

/// `Mᵀ x_q` at any precision, accumulated in `f64`.
pub fn transform_vector<T: Real>(params: &CompatibilityParams<T>, x_q: &[T]) -> Result<Vec<T>> {
    let n = params.dim();
    if x_q.len() != n {
        return Err(Error::shape("transform_query", n, x_q.len()));
    }
    let mut acc = vec![0f64; n];
    for (i, &q) in x_q.iter().enumerate() {
        let q = q.to_acc();
        for (a, &m) in acc.iter_mut().zip(params.matrix.row(i)) {
            *a += q * m.to_acc();
        }
    }
    Ok(acc.into_iter().map(T::from_acc).collect())
}

/// `x'_q = Mᵀ x_q`, so that `x'_q · x_c = x_qᵀ M x_c`.
pub fn transform_query(params: &CompatibilityParams<f32>, x_q: &[f32]) -> Result<TransformedQuery> {
    transform_vector(params, x_q).map(TransformedQuery)
}

/// Descending score, then ascending id.
fn rank_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Scores every candidate and returns the `k` best.
pub fn topk_exact(index: &StyleIndex, q: &TransformedQuery, k: usize) -> Result<Vec<Hit>> {
    index.check_query(q)?;
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    let mut scored: Vec<(f64, &str)> = (0..index.len())
        .map(|i| (index.score(q, i), index.ids[i].as_str()))
        .collect();
    scored.sort_by(rank_order);
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(score, id)| Hit {
            item_id: id.to_owned(),
            score,
        })
        .collect())
}

/// Heap entry ordered so the heap's maximum is the current worst hit.
struct Worst<'a>(f64, &'a str);

impl PartialEq for Worst<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Worst<'_> {}
impl PartialOrd for Worst<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&(self.0, self.1), &(other.0, other.1))
    }
}

/// Relative slack on the Cauchy–Schwarz bound covering `f32` norm rounding.
const BOUND_SLACK: f64 = 1e-6;

/// Same result as [`topk_exact`], scanning candidates by descending norm and
/// stopping once `‖x'_q‖·‖x_c‖` falls below the current K-th best score.
pub fn topk_pruned(index: &StyleIndex, q: &TransformedQuery, k: usize) -> Result<Vec<Hit>> {
    topk_pruned_counted(index, q, k).map(|(hits, _)| hits)
}

/// [`topk_pruned`] plus the number of candidates actually scored.
pub fn topk_pruned_counted(
    index: &StyleIndex,
    q: &TransformedQuery,
    k: usize,
) -> Result<(Vec<Hit>, usize)> {
    index.check_query(q)?;
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    let q_norm = inner(&q.0, &q.0).sqrt();
    let mut heap: BinaryHeap<Worst<'_>> = BinaryHeap::with_capacity(k + 1);
    let mut scanned = 0;
    for &i in &index.by_norm {
        if heap.len() == k {
            let threshold = heap.peek().expect("non-empty").0;
            let bound = q_norm * index.norms[i] as f64;
            if bound + BOUND_SLACK * bound.abs() + f64::MIN_POSITIVE < threshold {
                break;
            }
        }
        scanned += 1;
        let entry = Worst(index.score(q, i), index.ids[i].as_str());
        if heap.len() < k {
            heap.push(entry);
        } else if entry < *heap.peek().expect("non-empty") {
            heap.pop();
            heap.push(entry);
        }
    }
    let mut hits: Vec<(f64, &str)> = heap.into_iter().map(|w| (w.0, w.1)).collect();
    hits.sort_by(rank_order);
    Ok((
        hits.into_iter()
            .map(|(score, id)| Hit {
                item_id: id.to_owned(),
                score,
            })
            .collect(),
        scanned,
    ))
}

/// `rank,item_id,score,probability` rows with a header.
pub fn hits_to_csv(hits: &[Hit], bias: f64) -> String {
    let mut out = String::from("rank,item_id,score,probability\n");
    for (rank, h) in hits.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{:.9},{:.9}\n",
            rank + 1,
            h.item_id,
            h.score,
            h.probability(bias)
        ));
    }
    out
}

//! Exact cosine neighbour search over CLS embeddings and context assembly.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::params::{Group, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    /// Row position inside the index.
    pub pos: usize,
    pub id: u64,
    pub sim: f64,
}

/// Descending similarity, then ascending id.
fn rank(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.sim
        .partial_cmp(&a.sim)
        .unwrap_or(Ordering::Equal)
        .then(a.id.cmp(&b.id))
}

/// Backend contract shared by exact and approximate searchers.
pub trait NeighborSearch {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Up to `k` neighbours of `query` whose ids are not in `exclude`,
    /// sorted by descending similarity with ties on ascending id.
    fn search(&self, query: &[f64], k: usize, exclude: &HashSet<u64>) -> Result<Vec<Neighbor>>;
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        Some(v.iter().map(|x| x / norm).collect())
    } else {
        None
    }
}

/// ℓ2-normalised embedding matrix with parallel ids; exhaustive search.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    vectors: Vec<f64>,
    ids: Vec<u64>,
}

impl EmbeddingIndex {
    pub fn build(embeddings: &Tensor, ids: &[u64]) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.n_rows() != ids.len() {
            return Err(Error::dim("build_index", embeddings.shape(), &[ids.len()]));
        }
        if ids.is_empty() {
            return Err(Error::Contract("cannot index zero embeddings".into()));
        }
        let dim = embeddings.last_dim();
        let mut vectors = Vec::with_capacity(embeddings.numel());
        for r in 0..ids.len() {
            let v = normalize(embeddings.row(r)).ok_or(Error::DegenerateEmbedding { index: r })?;
            vectors.extend(v);
        }
        Ok(Self {
            dim,
            vectors,
            ids: ids.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vector(&self, pos: usize) -> &[f64] {
        &self.vectors[pos * self.dim..(pos + 1) * self.dim]
    }

    /// Top-`k` by cosine similarity. The flag is set when fewer than `k`
    /// candidates were available.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<(Vec<Neighbor>, bool)> {
        let hits = self.search(query, k, &HashSet::new())?;
        let short = hits.len() < k;
        Ok((hits, short))
    }
}

impl NeighborSearch for EmbeddingIndex {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn search(&self, query: &[f64], k: usize, exclude: &HashSet<u64>) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::dim("knn", &[query.len()], &[self.dim]));
        }
        let q = normalize(query).ok_or(Error::DegenerateEmbedding { index: 0 })?;
        let mut all: Vec<Neighbor> = Vec::with_capacity(self.ids.len());
        for (pos, &id) in self.ids.iter().enumerate() {
            if exclude.contains(&id) {
                continue;
            }
            let v = self.vector(pos);
            let sim = q.iter().zip(v).map(|(a, b)| a * b).sum();
            all.push(Neighbor { pos, id, sim });
        }
        if all.len() > k {
            all.select_nth_unstable_by(k - 1, rank);
            all.truncate(k);
        }
        all.sort_by(rank);
        Ok(all)
    }
}

/// Context selected for one target chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextAssembly {
    /// Selected context rows, best score first.
    pub selected: Vec<Neighbor>,
    /// Distinct candidates before the cap.
    pub pool_size: usize,
}

impl ContextAssembly {
    pub fn positions(&self) -> Vec<usize> {
        self.selected.iter().map(|n| n.pos).collect()
    }
}

/// Pools the `k` neighbours of every target row, scores each candidate by its
/// best similarity to any target and keeps the top `c`.
pub fn assemble_context(
    index: &dyn NeighborSearch,
    targets: &Tensor,
    k: usize,
    c: usize,
    exclude: &HashSet<u64>,
) -> Result<ContextAssembly> {
    if targets.n_rows() == 0 {
        return Err(Error::Contract("empty target chunk".into()));
    }
    let mut best: BTreeMap<u64, Neighbor> = BTreeMap::new();
    for r in 0..targets.n_rows() {
        for n in index.search(targets.row(r), k, exclude)? {
            best.entry(n.id)
                .and_modify(|b| {
                    if n.sim > b.sim {
                        *b = n;
                    }
                })
                .or_insert(n);
        }
    }
    if best.is_empty() {
        return Err(Error::EmptyContext);
    }
    let pool_size = best.len();
    let mut selected: Vec<Neighbor> = best.into_values().collect();
    selected.sort_by(rank);
    selected.truncate(c);
    Ok(ContextAssembly {
        selected,
        pool_size,
    })
}

/// Consecutive chunks of at most `m` rows covering `0..n`.
pub fn chunk_ranges(n: usize, m: usize) -> Vec<Range<usize>> {
    let m = m.max(1);
    (0..n).step_by(m).map(|s| s..(s + m).min(n)).collect()
}

/// A target chunk paired with its context.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedChunk {
    pub targets: Range<usize>,
    pub context: ContextAssembly,
}

/// Chunks `target_embeddings` by `m` and assembles each chunk's context from
/// `index`. `target_ids` are excluded from every pool.
pub fn chunked_inference_plan(
    index: &dyn NeighborSearch,
    target_embeddings: &Tensor,
    target_ids: &[u64],
    m: usize,
    k: usize,
    c: usize,
) -> Result<Vec<PlannedChunk>> {
    let n = target_embeddings.n_rows();
    if n == 0 {
        return Err(Error::Contract("empty target set".into()));
    }
    if target_ids.len() != n {
        return Err(Error::dim("chunked_inference_plan", &[n], &[target_ids.len()]));
    }
    chunk_ranges(n, m)
        .into_iter()
        .map(|range| {
            let rows: Vec<f64> = range
                .clone()
                .flat_map(|r| target_embeddings.row(r).to_vec())
                .collect();
            let chunk = Tensor::new(vec![range.len(), target_embeddings.last_dim()], rows)?;
            let exclude: HashSet<u64> = target_ids[range.clone()].iter().copied().collect();
            Ok(PlannedChunk {
                context: assemble_context(index, &chunk, k, c, &exclude)?,
                targets: range,
            })
        })
        .collect()
}

/// Hash of every parameter that shapes the CLS embedding.
pub fn encoder_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for g in [Group::Tokenizer, Group::Encoder, Group::Gate] {
        h.update(g.as_str().as_bytes());
        h.update(store.group_bytes(g));
    }
    hex::encode(h.finalize())
}

pub const CACHE_MAGIC: &[u8; 5] = b"ICLNN";
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CacheRecord {
    pub query_id: u64,
    pub k: u32,
    pub hits: Vec<(u64, f64)>,
}

/// Persisted neighbour lists keyed by the encoder that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborCache {
    pub encoder_hash: String,
    pub records: Vec<CacheRecord>,
}

impl NeighborCache {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.encoder_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.encoder_hash.as_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.query_id.to_le_bytes());
            out.extend_from_slice(&r.k.to_le_bytes());
            out.extend_from_slice(&(r.hits.len() as u32).to_le_bytes());
            for &(id, sim) in &r.hits {
                out.extend_from_slice(&id.to_le_bytes());
                out.extend_from_slice(&sim.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Container {
            path: Default::default(),
            message: m.to_string(),
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = b.get(pos..pos + n).ok_or_else(|| bad("truncated neighbour cache"))?;
            pos += n;
            Ok(s)
        };
        if take(5)? != CACHE_MAGIC {
            return Err(bad("bad neighbour cache magic"));
        }
        let u32_of = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let u64_of = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap());
        if u32_of(take(4)?) != CACHE_VERSION {
            return Err(bad("unsupported neighbour cache version"));
        }
        let hl = u32_of(take(4)?) as usize;
        let encoder_hash =
            String::from_utf8(take(hl)?.to_vec()).map_err(|_| bad("hash is not UTF-8"))?;
        let n = u64_of(take(8)?);
        let mut records = Vec::new();
        for _ in 0..n {
            let query_id = u64_of(take(8)?);
            let k = u32_of(take(4)?);
            let cnt = u32_of(take(4)?) as usize;
            let mut hits = Vec::with_capacity(cnt);
            for _ in 0..cnt {
                let id = u64_of(take(8)?);
                let sim = f64::from_le_bytes(take(8)?.try_into().unwrap());
                hits.push((id, sim));
            }
            records.push(CacheRecord { query_id, k, hits });
        }
        if pos != b.len() {
            return Err(bad("trailing bytes in neighbour cache"));
        }
        Ok(Self {
            encoder_hash,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Loads a cache and checks it belongs to `expected_hash`.
    pub fn load(path: impl AsRef<Path>, expected_hash: &str) -> Result<Self> {
        let c = Self::from_bytes(&std::fs::read(path)?)?;
        if c.encoder_hash != expected_hash {
            return Err(Error::Contract(format!(
                "neighbour cache was built for encoder {}, not {expected_hash}",
                c.encoder_hash
            )));
        }
        Ok(c)
    }
}

//! Squared-L2 vector search: exact flat scan, inverted-file partitioning
//! (IVF-Flat) and product quantization with asymmetric distances.
//!
//! Distances are reported squared and never square-rooted. Vectors are
//! stored as `f32`; distances accumulate in `f64`. Ties in distance are
//! broken by ascending internal (insertion) id, in every index kind.

mod flat;
mod io;
mod ivf;
mod kmeans;
mod pq;

use thiserror::Error;

pub use flat::FlatIndex;
pub use io::{
    load_index, read_embeddings, read_index, save_index, write_embeddings, write_index,
    EMBEDDING_MAGIC, INDEX_MAGIC, INDEX_VERSION,
};
pub use ivf::IvfIndex;
pub use kmeans::{kmeans_train, kmeans_train_with, nearest_centroid, DEFAULT_KMEANS_ITERS};
pub use pq::{PqCodebook, PqIndex};

use crate::par::Execution;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, vector has {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("too few points: {have} < {need}")]
    TooFewPoints { have: usize, need: usize },
    #[error("nprobe {nprobe} outside 1..={nlist}")]
    BadNprobe { nprobe: usize, nlist: usize },
    #[error("dimension {dim} not divisible into {m} subspaces")]
    BadSubspace { dim: usize, m: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("malformed file: {0}")]
    Malformed(String),
}

/// One ranked hit.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub song_id: String,
    pub internal_id: u32,
    pub squared_distance: f64,
}

/// Hits ranked by nondecreasing squared distance, ties by internal id.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SearchResult {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

impl SearchResult {
    pub fn song_ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.song_id.as_str())
    }
}

/// Squared Euclidean distance with `f64` accumulation.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Sorts `(distance, internal id)` candidates and keeps the best `k`.
pub(crate) fn top_k(mut cands: Vec<(f64, u32)>, k: usize) -> Vec<(f64, u32)> {
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if cands.len() > k && k > 0 {
        cands.select_nth_unstable_by(k - 1, cmp);
        cands.truncate(k);
    }
    cands.sort_unstable_by(cmp);
    cands
}

pub(crate) fn to_result(query_id: &str, ranked: Vec<(f64, u32)>, ids: &[String]) -> SearchResult {
    SearchResult {
        query_id: query_id.to_string(),
        hits: ranked
            .into_iter()
            .map(|(d, i)| Hit {
                song_id: ids[i as usize].clone(),
                internal_id: i,
                squared_distance: d,
            })
            .collect(),
    }
}

/// Any of the three index kinds, as stored in an index file.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyIndex {
    Flat(FlatIndex),
    Ivf(IvfIndex),
    Pq(PqIndex),
}

impl AnyIndex {
    pub fn dim(&self) -> usize {
        match self {
            AnyIndex::Flat(i) => i.dim(),
            AnyIndex::Ivf(i) => i.dim(),
            AnyIndex::Pq(i) => i.dim(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnyIndex::Flat(i) => i.len(),
            AnyIndex::Ivf(i) => i.len(),
            AnyIndex::Pq(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> &[String] {
        match self {
            AnyIndex::Flat(i) => i.ids(),
            AnyIndex::Ivf(i) => i.ids(),
            AnyIndex::Pq(i) => i.ids(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            AnyIndex::Flat(_) => "flat",
            AnyIndex::Ivf(_) => "ivf",
            AnyIndex::Pq(_) => "pq",
        }
    }

    /// Searches with each index's default parameters (IVF uses its stored nprobe).
    pub fn search(&self, q: &[f32], k: usize) -> Result<SearchResult, IndexError> {
        match self {
            AnyIndex::Flat(i) => i.search(q, k),
            AnyIndex::Ivf(i) => i.search(q, k, i.nprobe()),
            AnyIndex::Pq(i) => i.search(q, k),
        }
    }

    pub fn search_batch(
        &self,
        queries: &[(String, Vec<f32>)],
        k: usize,
        exec: Execution,
    ) -> Result<Vec<SearchResult>, IndexError> {
        crate::par::map(exec, queries, |(id, q)| {
            self.search(q, k).map(|mut r| {
                r.query_id = id.clone();
                r
            })
        })
        .into_iter()
        .collect()
    }
}

pub(crate) fn check_k(k: usize) -> Result<(), IndexError> {
    if k == 0 {
        return Err(IndexError::InvalidParameter("k must be >= 1".into()));
    }
    Ok(())
}

//! Inverted-file index over raw vectors (IVF-Flat).

use super::flat::FlatIndex;
use super::kmeans::{kmeans_train_with, nearest_centroid, DEFAULT_KMEANS_ITERS};
use super::{squared_l2, to_result, top_k, IndexError, SearchResult};
use crate::par::{self, Execution};

#[derive(Clone, Debug, PartialEq)]
pub struct IvfIndex {
    base: FlatIndex,
    nlist: usize,
    nprobe: usize,
    centroids: Vec<f32>,
    /// Internal ids per partition, ascending.
    lists: Vec<Vec<u32>>,
}

impl IvfIndex {
    /// Trains `nlist` coarse centroids on the vectors of `base` and assigns
    /// every vector to its nearest centroid.
    pub fn build(base: FlatIndex, nlist: usize, nprobe: usize, seed: u64) -> Result<Self, IndexError> {
        Self::build_with(base, nlist, nprobe, seed, Execution::default())
    }

    pub fn build_with(
        base: FlatIndex,
        nlist: usize,
        nprobe: usize,
        seed: u64,
        exec: Execution,
    ) -> Result<Self, IndexError> {
        if base.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if base.len() < nlist {
            return Err(IndexError::TooFewPoints {
                have: base.len(),
                need: nlist,
            });
        }
        check_nprobe(nprobe, nlist)?;
        let dim = base.dim();
        let centroids =
            kmeans_train_with(base.vectors(), dim, nlist, DEFAULT_KMEANS_ITERS, seed, exec)?;
        let lists = assign(&base, &centroids, nlist, exec);
        Ok(Self {
            base,
            nlist,
            nprobe,
            centroids,
            lists,
        })
    }

    pub(crate) fn from_parts(
        base: FlatIndex,
        nprobe: usize,
        centroids: Vec<f32>,
        lists: Vec<Vec<u32>>,
    ) -> Result<Self, IndexError> {
        let nlist = lists.len();
        check_nprobe(nprobe, nlist)?;
        if centroids.len() != nlist * base.dim() {
            return Err(IndexError::Malformed("centroid table size".into()));
        }
        let mut seen = vec![false; base.len()];
        for &id in lists.iter().flatten() {
            let slot = seen
                .get_mut(id as usize)
                .ok_or_else(|| IndexError::Malformed(format!("list entry {id} out of range")))?;
            if *slot {
                return Err(IndexError::Malformed(format!("id {id} listed twice")));
            }
            *slot = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(IndexError::Malformed("vector missing from every list".into()));
        }
        Ok(Self {
            base,
            nlist,
            nprobe,
            centroids,
            lists,
        })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        self.base.ids()
    }

    pub fn nlist(&self) -> usize {
        self.nlist
    }

    /// Default probe count used by [`AnyIndex::search`](super::AnyIndex::search).
    pub fn nprobe(&self) -> usize {
        self.nprobe
    }

    pub fn base(&self) -> &FlatIndex {
        &self.base
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    /// Scans the `nprobe` partitions whose centroids are nearest `q`.
    pub fn search(&self, q: &[f32], k: usize, nprobe: usize) -> Result<SearchResult, IndexError> {
        self.base.check_query(q, k)?;
        check_nprobe(nprobe, self.nlist)?;
        let dim = self.dim();
        let coarse: Vec<(f64, u32)> = self
            .centroids
            .chunks_exact(dim)
            .enumerate()
            .map(|(i, c)| (squared_l2(q, c), i as u32))
            .collect();
        let probes = top_k(coarse, nprobe);
        let cands = probes
            .iter()
            .flat_map(|&(_, list)| self.lists[list as usize].iter())
            .map(|&id| (squared_l2(q, self.base.vector(id as usize)), id))
            .collect();
        Ok(to_result("", top_k(cands, k), self.base.ids()))
    }

    pub fn search_batch(
        &self,
        queries: &[Vec<f32>],
        k: usize,
        nprobe: usize,
        exec: Execution,
    ) -> Result<Vec<SearchResult>, IndexError> {
        par::map(exec, queries, |q| self.search(q, k, nprobe))
            .into_iter()
            .collect()
    }
}

fn check_nprobe(nprobe: usize, nlist: usize) -> Result<(), IndexError> {
    if nprobe < 1 || nprobe > nlist {
        return Err(IndexError::BadNprobe { nprobe, nlist });
    }
    Ok(())
}

fn assign(base: &FlatIndex, centroids: &[f32], nlist: usize, exec: Execution) -> Vec<Vec<u32>> {
    let dim = base.dim();
    let owners = par::map_range(exec, base.len(), |i| nearest_centroid(centroids, dim, base.vector(i)).0);
    let mut lists = vec![Vec::new(); nlist];
    for (i, c) in owners.into_iter().enumerate() {
        lists[c].push(i as u32);
    }
    lists
}

use std::collections::HashMap;

use super::{check_k, squared_l2, to_result, top_k, IndexError, SearchResult};
use crate::par::{self, Execution};

/// Exhaustive exact squared-L2 index.
#[derive(Clone, Debug, Default)]
pub struct FlatIndex {
    dim: usize,
    vectors: Vec<f32>,
    ids: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl PartialEq for FlatIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.ids == other.ids && self.vectors == other.vectors
    }
}

impl FlatIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, internal_id: usize) -> &[f32] {
        &self.vectors[internal_id * self.dim..(internal_id + 1) * self.dim]
    }

    /// Row-major `N × D` storage.
    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn internal_id(&self, id: &str) -> Option<u32> {
        self.lookup.get(id).copied()
    }

    pub fn add(&mut self, id: impl Into<String>, v: &[f32]) -> Result<u32, IndexError> {
        if v.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        let id = id.into();
        if self.lookup.contains_key(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        let internal = self.ids.len() as u32;
        self.lookup.insert(id.clone(), internal);
        self.ids.push(id);
        self.vectors.extend_from_slice(v);
        Ok(internal)
    }

    pub(crate) fn check_query(&self, q: &[f32], k: usize) -> Result<(), IndexError> {
        check_k(k)?;
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if q.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        Ok(())
    }

    /// The `min(k, N)` nearest vectors, exact.
    pub fn search(&self, q: &[f32], k: usize) -> Result<SearchResult, IndexError> {
        self.check_query(q, k)?;
        let cands = self
            .vectors
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, v)| (squared_l2(q, v), i as u32))
            .collect();
        Ok(to_result("", top_k(cands, k), &self.ids))
    }

    /// One search per query, fanned out across threads when `exec` allows.
    pub fn search_batch(
        &self,
        queries: &[Vec<f32>],
        k: usize,
        exec: Execution,
    ) -> Result<Vec<SearchResult>, IndexError> {
        par::map(exec, queries, |q| self.search(q, k))
            .into_iter()
            .collect()
    }
}

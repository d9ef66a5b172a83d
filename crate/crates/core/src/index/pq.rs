//! Product quantization with asymmetric distance computation (ADC).

use std::collections::HashMap;

use super::flat::FlatIndex;
use super::kmeans::{kmeans_train_with, nearest_centroid};
use super::{check_k, squared_l2, to_result, top_k, IndexError, SearchResult};
use crate::par::{self, Execution};
use crate::rng;

const PQ_STREAM: u64 = 0x5051;

/// `m` sub-codebooks of `ksub` centroids each, over `dim / m`-dimensional subspaces.
#[derive(Clone, Debug, PartialEq)]
pub struct PqCodebook {
    dim: usize,
    m: usize,
    ksub: usize,
    /// `m × ksub × dsub`, row-major.
    centroids: Vec<f32>,
}

impl PqCodebook {
    pub fn train(
        data: &[f32],
        dim: usize,
        m: usize,
        ksub: usize,
        iters: usize,
        seed: u64,
        exec: Execution,
    ) -> Result<Self, IndexError> {
        check_shape(dim, m, ksub)?;
        if !data.len().is_multiple_of(dim) {
            return Err(IndexError::InvalidParameter("data length not a multiple of dim".into()));
        }
        let n = data.len() / dim;
        if n < ksub {
            return Err(IndexError::TooFewPoints { have: n, need: ksub });
        }
        let dsub = dim / m;
        let mut centroids = Vec::with_capacity(m * ksub * dsub);
        for s in 0..m {
            let sub: Vec<f32> = data
                .chunks_exact(dim)
                .flat_map(|v| v[s * dsub..(s + 1) * dsub].iter().copied())
                .collect();
            let seed_s = rng::derive(seed, &[PQ_STREAM, s as u64]);
            centroids.extend(kmeans_train_with(&sub, dsub, ksub, iters, seed_s, exec)?);
        }
        Ok(Self { dim, m, ksub, centroids })
    }

    pub fn from_parts(dim: usize, m: usize, ksub: usize, centroids: Vec<f32>) -> Result<Self, IndexError> {
        check_shape(dim, m, ksub)?;
        if centroids.len() != m * ksub * (dim / m) {
            return Err(IndexError::Malformed("codebook size".into()));
        }
        Ok(Self { dim, m, ksub, centroids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn ksub(&self) -> usize {
        self.ksub
    }

    pub fn dsub(&self) -> usize {
        self.dim / self.m
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    fn sub_book(&self, s: usize) -> &[f32] {
        let len = self.ksub * self.dsub();
        &self.centroids[s * len..(s + 1) * len]
    }

    fn sub_centroid(&self, s: usize, c: usize) -> &[f32] {
        let d = self.dsub();
        &self.sub_book(s)[c * d..(c + 1) * d]
    }

    pub fn encode(&self, v: &[f32]) -> Result<Vec<u8>, IndexError> {
        self.check_dim(v)?;
        let d = self.dsub();
        Ok((0..self.m)
            .map(|s| nearest_centroid(self.sub_book(s), d, &v[s * d..(s + 1) * d]).0 as u8)
            .collect())
    }

    pub fn decode(&self, code: &[u8]) -> Vec<f32> {
        code.iter()
            .enumerate()
            .flat_map(|(s, &c)| self.sub_centroid(s, c as usize).iter().copied())
            .collect()
    }

    /// Mean squared reconstruction error over row-major `data`.
    pub fn distortion(&self, data: &[f32]) -> Result<f64, IndexError> {
        let n = data.len() / self.dim;
        if n == 0 {
            return Err(IndexError::EmptyIndex);
        }
        let mut total = 0.0;
        for v in data.chunks_exact(self.dim) {
            total += squared_l2(v, &self.decode(&self.encode(v)?));
        }
        Ok(total / n as f64)
    }

    /// Per-subspace squared distances from `q` to every sub-centroid, `m × ksub`.
    pub fn distance_table(&self, q: &[f32]) -> Vec<f64> {
        let d = self.dsub();
        let mut table = Vec::with_capacity(self.m * self.ksub);
        for s in 0..self.m {
            let qs = &q[s * d..(s + 1) * d];
            table.extend(self.sub_book(s).chunks_exact(d).map(|c| squared_l2(qs, c)));
        }
        table
    }

    fn check_dim(&self, v: &[f32]) -> Result<(), IndexError> {
        if v.len() != self.dim {
            return Err(IndexError::DimMismatch { expected: self.dim, got: v.len() });
        }
        Ok(())
    }
}

fn check_shape(dim: usize, m: usize, ksub: usize) -> Result<(), IndexError> {
    if m == 0 || dim == 0 || !dim.is_multiple_of(m) {
        return Err(IndexError::BadSubspace { dim, m });
    }
    if !(1..=256).contains(&ksub) {
        return Err(IndexError::InvalidParameter(format!("ksub {ksub} outside 1..=256")));
    }
    Ok(())
}

/// Vectors stored only as PQ codes; searched by ADC.
#[derive(Clone, Debug, PartialEq)]
pub struct PqIndex {
    codebook: PqCodebook,
    codes: Vec<u8>,
    ids: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl PqIndex {
    pub fn new(codebook: PqCodebook) -> Self {
        Self { codebook, codes: Vec::new(), ids: Vec::new(), lookup: HashMap::new() }
    }

    /// Trains a codebook on the vectors of `base` and encodes all of them.
    pub fn build(
        base: &FlatIndex,
        m: usize,
        ksub: usize,
        iters: usize,
        seed: u64,
        exec: Execution,
    ) -> Result<Self, IndexError> {
        if base.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        let book = PqCodebook::train(base.vectors(), base.dim(), m, ksub, iters, seed, exec)?;
        let mut idx = Self::new(book);
        for (i, id) in base.ids().iter().enumerate() {
            idx.add(id.clone(), base.vector(i))?;
        }
        Ok(idx)
    }

    pub(crate) fn from_parts(codebook: PqCodebook, ids: Vec<String>, codes: Vec<u8>) -> Result<Self, IndexError> {
        if codes.len() != ids.len() * codebook.m() {
            return Err(IndexError::Malformed("code table size".into()));
        }
        if codes.iter().any(|&c| c as usize >= codebook.ksub()) {
            return Err(IndexError::Malformed("code out of range".into()));
        }
        let mut lookup = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if lookup.insert(id.clone(), i as u32).is_some() {
                return Err(IndexError::DuplicateId(id.clone()));
            }
        }
        Ok(Self { codebook, codes, ids, lookup })
    }

    pub fn add(&mut self, id: impl Into<String>, v: &[f32]) -> Result<u32, IndexError> {
        let id = id.into();
        if self.lookup.contains_key(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        let code = self.codebook.encode(v)?;
        let internal = self.ids.len() as u32;
        self.codes.extend_from_slice(&code);
        self.lookup.insert(id.clone(), internal);
        self.ids.push(id);
        Ok(internal)
    }

    pub fn dim(&self) -> usize {
        self.codebook.dim()
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

    pub fn codebook(&self) -> &PqCodebook {
        &self.codebook
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn code(&self, internal_id: usize) -> &[u8] {
        let m = self.codebook.m();
        &self.codes[internal_id * m..(internal_id + 1) * m]
    }

    pub fn search(&self, q: &[f32], k: usize) -> Result<SearchResult, IndexError> {
        check_k(k)?;
        self.codebook.check_dim(q)?;
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        let ksub = self.codebook.ksub();
        let table = self.codebook.distance_table(q);
        let cands = self
            .codes
            .chunks_exact(self.codebook.m())
            .enumerate()
            .map(|(i, code)| {
                let d: f64 = code.iter().enumerate().map(|(s, &c)| table[s * ksub + c as usize]).sum();
                (d, i as u32)
            })
            .collect();
        Ok(to_result("", top_k(cands, k), &self.ids))
    }

    pub fn search_batch(&self, queries: &[Vec<f32>], k: usize, exec: Execution) -> Result<Vec<SearchResult>, IndexError> {
        par::map(exec, queries, |q| self.search(q, k)).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut r = rng::stream(seed, &[]);
        (0..n * dim).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    fn flat_of(data: &[f32], dim: usize) -> FlatIndex {
        let mut f = FlatIndex::new(dim);
        for (i, v) in data.chunks(dim).enumerate() {
            f.add(format!("v{i}"), v).unwrap();
        }
        f
    }

    #[test]
    fn single_centroid_is_the_subspace_mean() {
        let data = [0.0f32, 4.0, 2.0, 8.0];
        let book = PqCodebook::train(&data, 2, 2, 1, 5, 0, Execution::Sequential).unwrap();
        assert_eq!(book.decode(&book.encode(&[9.0, 9.0]).unwrap()), vec![1.0, 6.0]);
    }

    #[test]
    fn memorizing_codebook_ranks_like_flat() {
        let dim = 8;
        let data = random(32, dim, 1);
        let flat = flat_of(&data, dim);
        let pq = PqIndex::build(&flat, 4, 32, 20, 2, Execution::Sequential).unwrap();
        for (i, v) in data.chunks(dim).enumerate() {
            assert_eq!(pq.codebook().decode(pq.code(i)), v);
        }
        for q in random(20, dim, 3).chunks(dim) {
            let a = flat.search(q, 10).unwrap();
            let b = pq.search(q, 10).unwrap();
            assert_eq!(a.song_ids().collect::<Vec<_>>(), b.song_ids().collect::<Vec<_>>());
            for (x, y) in a.hits.iter().zip(&b.hits) {
                assert!((x.squared_distance - y.squared_distance).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn distortion_falls_with_codebook_size() {
        let data = random(512, 8, 4);
        let d: Vec<f64> = [16, 32, 64]
            .iter()
            .map(|&k| {
                PqCodebook::train(&data, 8, 2, k, 25, 5, Execution::Sequential)
                    .unwrap()
                    .distortion(&data)
                    .unwrap()
            })
            .collect();
        assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
    }

    #[test]
    fn adc_equals_distance_to_reconstruction() {
        let data = random(200, 16, 6);
        let flat = flat_of(&data, 16);
        let pq = PqIndex::build(&flat, 4, 16, 15, 7, Execution::Sequential).unwrap();
        for q in random(10, 16, 8).chunks(16) {
            let res = pq.search(q, 200).unwrap();
            for h in &res.hits {
                let rec = pq.codebook().decode(pq.code(h.internal_id as usize));
                assert!((h.squared_distance - squared_l2(q, &rec)).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn errors() {
        let data = random(10, 6, 0);
        assert!(matches!(
            PqCodebook::train(&data, 6, 4, 2, 5, 0, Execution::Sequential),
            Err(IndexError::BadSubspace { dim: 6, m: 4 })
        ));
        assert!(matches!(
            PqCodebook::train(&data, 6, 3, 11, 5, 0, Execution::Sequential),
            Err(IndexError::TooFewPoints { have: 10, need: 11 })
        ));
        let book = PqCodebook::train(&data, 6, 3, 4, 5, 0, Execution::Sequential).unwrap();
        let mut pq = PqIndex::new(book);
        assert!(matches!(pq.search(&[0.0; 6], 1), Err(IndexError::EmptyIndex)));
        pq.add("a", &data[..6]).unwrap();
        assert!(matches!(pq.add("a", &data[..6]), Err(IndexError::DuplicateId(_))));
        assert!(matches!(pq.search(&[0.0; 5], 1), Err(IndexError::DimMismatch { .. })));
    }
}

//! Embedding storage and maximum-inner-product search.
//!
//! Two index flavors answer top-k inner-product queries over the passage
//! embeddings: a flat store scanned exhaustively (exact) and an HNSW graph
//! (approximate). Proximity is the raw dot product in both; vectors are
//! stored as `f32` on disk and accumulated in `f64` during scoring.
//!
//! The HNSW construction follows the published algorithm: geometric level
//! assignment with multiplier `1 / ln(neighbors_per_node)`, greedy descent
//! through the upper layers, beam search with `construction_search_depth`
//! candidates at insertion time, and diversity-based neighbor pruning.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::binio;
use crate::error::{Error, Result};
use crate::Scalar;

/// Row-major embedding matrix with passage ids attached.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore<T> {
    dim: usize,
    ids: Vec<String>,
    data: Vec<T>,
    by_id: HashMap<String, u32>,
}

/// One search result: store ordinal plus inner-product score.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor<T> {
    pub ordinal: usize,
    pub score: T,
}

const STORE_MAGIC: [u8; 4] = *b"DEMB";
const STORE_VERSION: u32 = 1;
const HNSW_MAGIC: [u8; 4] = *b"DHNW";
const HNSW_VERSION: u32 = 1;

impl<T: Scalar> EmbeddingStore<T> {
    /// Empty store for `dim`-dimensional vectors.
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    /// Appends a vector. Rejects dimension mismatches and duplicate ids.
    pub fn push(&mut self, id: impl Into<String>, vector: &[T]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        let id = id.into();
        if self.by_id.contains_key(&id) {
            return Err(Error::DuplicatePassageId(id));
        }
        self.by_id.insert(id.clone(), self.ids.len() as u32);
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
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

    pub fn id(&self, ordinal: usize) -> &str {
        &self.ids[ordinal]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn ordinal(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).map(|&i| i as usize)
    }

    pub fn vector(&self, ordinal: usize) -> &[T] {
        &self.data[ordinal * self.dim..(ordinal + 1) * self.dim]
    }

    /// Serializes as `DEMB`: dimension, count, `f32` rows, then the id
    /// table. Values beyond `f32` precision are rounded on save.
    pub fn save(&self, path: &Path) -> Result<()> {
        let loc = path.display().to_string();
        let file = File::create(path).map_err(|e| Error::io(&loc, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(&loc, e);

        binio::write_header(&mut w, STORE_MAGIC, STORE_VERSION).map_err(io_err)?;
        binio::write_u32(&mut w, self.dim as u32).map_err(io_err)?;
        binio::write_u64(&mut w, self.ids.len() as u64).map_err(io_err)?;
        for v in &self.data {
            binio::write_f32(&mut w, v.to_f64_lossy() as f32).map_err(io_err)?;
        }
        for id in &self.ids {
            binio::write_str(&mut w, id).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    /// Loads a `DEMB` file, widening the stored `f32` values to `T`.
    pub fn load(path: &Path) -> Result<Self> {
        let loc = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&loc, e))?;
        let mut r = BufReader::new(file);

        let version = binio::read_header(&mut r, &loc, STORE_MAGIC)?;
        binio::expect_version("embedding store", &loc, version, STORE_VERSION)?;

        let dim = binio::read_u32(&mut r, &loc)? as usize;
        let count = binio::read_u64(&mut r, &loc)? as usize;
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            data.push(T::from_f64_lossy(binio::read_f32(&mut r, &loc)? as f64));
        }
        let mut store = EmbeddingStore::new(dim);
        for i in 0..count {
            let id = binio::read_str(&mut r, &loc)?;
            store.push(id, &data[i * dim..(i + 1) * dim])?;
        }
        Ok(store)
    }
}

/// Inner product accumulated in `f64` regardless of the storage scalar.
fn dot_hp<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.to_f64_lossy() * y.to_f64_lossy())
        .sum()
}

/// Exact top-k inner-product search by exhaustive scan.
///
/// Results are sorted by descending score with ties broken by ascending
/// passage id; at most `min(k, len)` entries are returned.
pub fn flat_search<T: Scalar>(
    store: &EmbeddingStore<T>,
    query: &[T],
    k: usize,
) -> Result<Vec<Neighbor<T>>> {
    if query.len() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            got: query.len(),
        });
    }
    let mut scored: Vec<(usize, f64)> = (0..store.len())
        .map(|i| (i, dot_hp(query, store.vector(i))))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| store.id(a.0).cmp(store.id(b.0)))
    });
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(ordinal, score)| Neighbor {
            ordinal,
            score: T::from_f64_lossy(score),
        })
        .collect())
}

/// HNSW construction and query parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HnswConfig {
    /// Links kept per node per layer (the ground layer allows twice this).
    pub neighbors_per_node: usize,
    /// Beam width while inserting.
    pub construction_search_depth: usize,
    /// Beam width while querying.
    pub query_search_depth: usize,
    /// Seed for the level assignment.
    pub seed: u64,
}

impl Default for HnswConfig {
    fn default() -> Self {
        HnswConfig {
            neighbors_per_node: 512,
            construction_search_depth: 200,
            query_search_depth: 128,
            seed: 0,
        }
    }
}

/// Candidate ordering used by the search heaps: higher score wins, ties go
/// to the lower node id so traversal is deterministic.
#[derive(Debug, Clone, Copy)]
struct Scored {
    score: f64,
    node: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scored {}
impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        // Finite embeddings cannot produce NaN scores.
        self.score
            .partial_cmp(&other.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Navigable small-world graph over an embedding store.
#[derive(Debug, Clone)]
pub struct HnswIndex<T> {
    store: EmbeddingStore<T>,
    config: HnswConfig,
    /// Top layer of each node.
    levels: Vec<u32>,
    /// `links[node][layer]` lists the node's neighbors on that layer.
    links: Vec<Vec<Vec<u32>>>,
    entry_point: u32,
    max_level: u32,
}

impl<T: Scalar> HnswIndex<T> {
    pub fn store(&self) -> &EmbeddingStore<T> {
        &self.store
    }

    pub fn config(&self) -> &HnswConfig {
        &self.config
    }

    /// Consumes the index and returns the embedding store.
    pub fn into_store(self) -> EmbeddingStore<T> {
        self.store
    }

    fn score(&self, query: &[T], node: u32) -> f64 {
        dot_hp(query, self.store.vector(node as usize))
    }

    /// Beam search on one layer starting from `entries`, keeping up to `ef`
    /// best candidates.
    fn search_layer(&self, query: &[T], entries: &[Scored], layer: usize, ef: usize) -> Vec<Scored> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;

        let mut visited = vec![false; self.store.len()];
        let mut frontier: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();

        for &e in entries {
            if !visited[e.node as usize] {
                visited[e.node as usize] = true;
                frontier.push(e);
                results.push(Reverse(e));
            }
        }
        while results.len() > ef {
            results.pop();
        }

        while let Some(best) = frontier.pop() {
            let worst = results.peek().expect("results nonempty").0;
            if results.len() >= ef && best < worst {
                break;
            }
            for &nb in &self.links[best.node as usize][layer] {
                if visited[nb as usize] {
                    continue;
                }
                visited[nb as usize] = true;
                let cand = Scored {
                    score: self.score(query, nb),
                    node: nb,
                };
                if results.len() < ef || cand > results.peek().unwrap().0 {
                    frontier.push(cand);
                    results.push(Reverse(cand));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }

        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Greedy single-step descent used on layers above the target.
    fn greedy_descend(&self, query: &[T], mut ep: Scored, from: u32, to: u32) -> Scored {
        let mut layer = from;
        loop {
            let mut improved = true;
            while improved {
                improved = false;
                for &nb in &self.links[ep.node as usize][layer as usize] {
                    let cand = Scored {
                        score: self.score(query, nb),
                        node: nb,
                    };
                    if cand > ep {
                        ep = cand;
                        improved = true;
                    }
                }
            }
            if layer == to {
                return ep;
            }
            layer -= 1;
        }
    }

    /// Diversity-pruning neighbor selection. Candidates must be sorted best
    /// first; keeps a candidate only when it is closer to the query than to
    /// any already-selected neighbor, then backfills with the nearest
    /// rejected candidates if the budget is not met.
    fn select_neighbors(&self, candidates: &[Scored], m: usize) -> Vec<u32> {
        let mut selected: Vec<Scored> = Vec::with_capacity(m);
        let mut rejected: Vec<Scored> = Vec::new();
        for &c in candidates {
            if selected.len() >= m {
                break;
            }
            let cv = self.store.vector(c.node as usize);
            let diverse = selected.iter().all(|s| {
                c.score > dot_hp(cv, self.store.vector(s.node as usize))
            });
            if diverse {
                selected.push(c);
            } else {
                rejected.push(c);
            }
        }
        for r in rejected {
            if selected.len() >= m {
                break;
            }
            selected.push(r);
        }
        selected.into_iter().map(|s| s.node).collect()
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            self.config.neighbors_per_node * 2
        } else {
            self.config.neighbors_per_node
        }
    }

    /// Re-prunes a node whose link list overflowed its layer budget.
    fn shrink(&mut self, node: u32, layer: usize) {
        let cap = self.max_links(layer);
        if self.links[node as usize][layer].len() <= cap {
            return;
        }
        let base = self.store.vector(node as usize);
        let mut cands: Vec<Scored> = self.links[node as usize][layer]
            .iter()
            .map(|&nb| Scored {
                score: dot_hp(base, self.store.vector(nb as usize)),
                node: nb,
            })
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        self.links[node as usize][layer] = self.select_neighbors(&cands, cap);
    }

    fn insert(&mut self, node: u32, level: u32) {
        let layers = (level + 1) as usize;
        self.links[node as usize] = vec![Vec::new(); layers];

        if node == 0 {
            self.entry_point = 0;
            self.max_level = level;
            return;
        }

        let query: Vec<T> = self.store.vector(node as usize).to_vec();
        let mut ep = Scored {
            score: self.score(&query, self.entry_point),
            node: self.entry_point,
        };

        if self.max_level > level {
            ep = self.greedy_descend(&query, ep, self.max_level, level + 1);
        }

        let mut entries = vec![ep];
        let top = level.min(self.max_level);
        for layer in (0..=top as usize).rev() {
            let found =
                self.search_layer(&query, &entries, layer, self.config.construction_search_depth);
            let neighbors = self.select_neighbors(&found, self.config.neighbors_per_node);
            for &nb in &neighbors {
                self.links[node as usize][layer].push(nb);
                self.links[nb as usize][layer].push(node);
                self.shrink(nb, layer);
            }
            entries = found;
        }

        if level > self.max_level {
            self.max_level = level;
            self.entry_point = node;
        }
    }
}

/// Builds an HNSW graph over the store. Construction is deterministic for a
/// given store order and seed.
pub fn hnsw_build<T: Scalar>(store: EmbeddingStore<T>, config: HnswConfig) -> Result<HnswIndex<T>> {
    if config.neighbors_per_node < 2 {
        return Err(Error::InvalidArgument(
            "neighbors_per_node must be at least 2".into(),
        ));
    }
    if config.construction_search_depth == 0 || config.query_search_depth == 0 {
        return Err(Error::InvalidArgument(
            "search depths must be positive".into(),
        ));
    }

    let n = store.len();
    let mut index = HnswIndex {
        store,
        config,
        levels: Vec::with_capacity(n),
        links: vec![Vec::new(); n],
        entry_point: 0,
        max_level: 0,
    };

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let ml = 1.0 / (config.neighbors_per_node as f64).ln();
    for node in 0..n as u32 {
        // u in (0, 1] so ln(u) is finite
        let u: f64 = 1.0 - rng.gen::<f64>();
        let level = (-u.ln() * ml).floor() as u32;
        index.levels.push(level);
        index.insert(node, level);
    }
    Ok(index)
}

/// Approximate top-k inner-product search.
///
/// With `query_search_depth >= store.len()` on a graph whose layers were
/// never pruned the search degenerates to an exhaustive scan and matches
/// [`flat_search`] exactly.
pub fn hnsw_search<T: Scalar>(
    index: &HnswIndex<T>,
    query: &[T],
    k: usize,
) -> Result<Vec<Neighbor<T>>> {
    if query.len() != index.store.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.store.dim(),
            got: query.len(),
        });
    }
    if index.store.is_empty() || k == 0 {
        return Ok(Vec::new());
    }

    let mut ep = Scored {
        score: index.score(query, index.entry_point),
        node: index.entry_point,
    };
    if index.max_level > 0 {
        ep = index.greedy_descend(query, ep, index.max_level, 1);
    }
    let ef = index.config.query_search_depth.max(k);
    let mut found = index.search_layer(query, &[ep], 0, ef);

    found.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| {
                index
                    .store
                    .id(a.node as usize)
                    .cmp(index.store.id(b.node as usize))
            })
    });
    found.truncate(k);
    Ok(found
        .into_iter()
        .map(|s| Neighbor {
            ordinal: s.node as usize,
            score: T::from_f64_lossy(s.score),
        })
        .collect())
}

impl<T: Scalar> HnswIndex<T> {
    /// Serializes the graph (not the vectors) as `DHNW`: config, per-node
    /// levels, entry point, and adjacency lists.
    pub fn save_graph(&self, path: &Path) -> Result<()> {
        let loc = path.display().to_string();
        let file = File::create(path).map_err(|e| Error::io(&loc, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(&loc, e);

        binio::write_header(&mut w, HNSW_MAGIC, HNSW_VERSION).map_err(io_err)?;
        binio::write_u32(&mut w, self.config.neighbors_per_node as u32).map_err(io_err)?;
        binio::write_u32(&mut w, self.config.construction_search_depth as u32).map_err(io_err)?;
        binio::write_u32(&mut w, self.config.query_search_depth as u32).map_err(io_err)?;
        binio::write_u64(&mut w, self.config.seed).map_err(io_err)?;

        binio::write_u64(&mut w, self.store.len() as u64).map_err(io_err)?;
        if !self.store.is_empty() {
            binio::write_u32(&mut w, self.entry_point).map_err(io_err)?;
            binio::write_u32(&mut w, self.max_level).map_err(io_err)?;
        }
        for &level in &self.levels {
            binio::write_u32(&mut w, level).map_err(io_err)?;
        }
        for node in 0..self.store.len() {
            for layer in &self.links[node] {
                binio::write_u64(&mut w, layer.len() as u64).map_err(io_err)?;
                for &nb in layer {
                    binio::write_u32(&mut w, nb).map_err(io_err)?;
                }
            }
        }
        w.flush().map_err(io_err)
    }

    /// Loads a graph written by [`HnswIndex::save_graph`] and attaches it to
    /// the embedding store it was built from.
    pub fn load_graph(store: EmbeddingStore<T>, path: &Path) -> Result<Self> {
        let loc = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&loc, e))?;
        let mut r = BufReader::new(file);

        let version = binio::read_header(&mut r, &loc, HNSW_MAGIC)?;
        binio::expect_version("hnsw graph", &loc, version, HNSW_VERSION)?;

        let config = HnswConfig {
            neighbors_per_node: binio::read_u32(&mut r, &loc)? as usize,
            construction_search_depth: binio::read_u32(&mut r, &loc)? as usize,
            query_search_depth: binio::read_u32(&mut r, &loc)? as usize,
            seed: binio::read_u64(&mut r, &loc)?,
        };

        let n = binio::read_u64(&mut r, &loc)? as usize;
        if n != store.len() {
            return Err(Error::format(
                "hnsw graph",
                &loc,
                format!("graph has {n} nodes but store has {}", store.len()),
            ));
        }

        let (entry_point, max_level) = if n > 0 {
            (binio::read_u32(&mut r, &loc)?, binio::read_u32(&mut r, &loc)?)
        } else {
            (0, 0)
        };

        let mut levels = Vec::with_capacity(n);
        for _ in 0..n {
            levels.push(binio::read_u32(&mut r, &loc)?);
        }
        let mut links = Vec::with_capacity(n);
        for node in 0..n {
            let mut per_node = Vec::with_capacity(levels[node] as usize + 1);
            for _ in 0..=levels[node] {
                let cnt = binio::read_u64(&mut r, &loc)? as usize;
                let mut layer = Vec::with_capacity(cnt);
                for _ in 0..cnt {
                    let nb = binio::read_u32(&mut r, &loc)?;
                    if nb as usize >= n {
                        return Err(Error::format(
                            "hnsw graph",
                            &loc,
                            format!("link target {nb} out of range"),
                        ));
                    }
                    layer.push(nb);
                }
                per_node.push(layer);
            }
            links.push(per_node);
        }

        Ok(HnswIndex {
            store,
            config,
            levels,
            links,
            entry_point,
            max_level,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_from(rows: &[(&str, Vec<f64>)]) -> EmbeddingStore<f64> {
        let dim = rows[0].1.len();
        let mut s = EmbeddingStore::new(dim);
        for (id, v) in rows {
            s.push(*id, v).unwrap();
        }
        s
    }

    /// Deterministic pseudo-gaussian unit vectors via Box-Muller.
    fn random_unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut v: Vec<f64> = (0..dim)
                    .map(|_| {
                        let u1: f64 = 1.0 - rng.gen::<f64>();
                        let u2: f64 = rng.gen();
                        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                    })
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in &mut v {
                    *x /= norm;
                }
                v
            })
            .collect()
    }

    fn naive_top_k(store: &EmbeddingStore<f64>, query: &[f64], k: usize) -> Vec<usize> {
        let mut scored: Vec<(usize, f64)> = (0..store.len())
            .map(|i| {
                let v = store.vector(i);
                (i, query.iter().zip(v).map(|(a, b)| a * b).sum())
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| store.id(a.0).cmp(store.id(b.0)))
        });
        scored.into_iter().take(k).map(|(i, _)| i).collect()
    }

    #[test]
    fn push_rejects_dim_mismatch_and_duplicates() {
        let mut s = EmbeddingStore::<f64>::new(2);
        s.push("a", &[1.0, 0.0]).unwrap();
        assert!(matches!(
            s.push("b", &[1.0]).unwrap_err(),
            Error::DimensionMismatch { .. }
        ));
        assert!(matches!(
            s.push("a", &[0.0, 1.0]).unwrap_err(),
            Error::DuplicatePassageId(_)
        ));
    }

    #[test]
    fn flat_search_is_exact_and_tie_breaks_by_id() {
        let s = store_from(&[
            ("p2", vec![1.0, 0.0]),
            ("p1", vec![1.0, 0.0]),
            ("p0", vec![0.0, 1.0]),
        ]);
        let hits = flat_search(&s, &[1.0, 0.0], 3).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| s.id(h.ordinal)).collect();
        assert_eq!(ids, vec!["p1", "p2", "p0"]);
        assert_eq!(hits[0].score, 1.0);
        assert_eq!(hits[2].score, 0.0);
    }

    #[test]
    fn flat_search_caps_k_and_checks_dim() {
        let s = store_from(&[("a", vec![1.0, 2.0])]);
        assert_eq!(flat_search(&s, &[1.0, 0.0], 10).unwrap().len(), 1);
        assert!(flat_search(&s, &[1.0], 1).is_err());
        assert!(flat_search(&s, &[1.0, 0.0], 0).unwrap().is_empty());
    }

    #[test]
    fn flat_search_matches_naive_oracle_on_random_store() {
        let vectors = random_unit_vectors(300, 16, 11);
        let mut s = EmbeddingStore::new(16);
        for (i, v) in vectors.iter().enumerate() {
            s.push(format!("v{i:04}"), v).unwrap();
        }
        for (qi, q) in random_unit_vectors(20, 16, 99).iter().enumerate() {
            let got: Vec<usize> = flat_search(&s, q, 10)
                .unwrap()
                .iter()
                .map(|h| h.ordinal)
                .collect();
            assert_eq!(got, naive_top_k(&s, q, 10), "query {qi}");
        }
    }

    #[test]
    fn store_round_trip_preserves_f32_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.demb");
        let s = store_from(&[("x", vec![0.5, -1.25]), ("y", vec![3.0, 0.0])]);
        s.save(&path).unwrap();
        let back = EmbeddingStore::<f64>::load(&path).unwrap();
        assert_eq!(back, s);

        // saving twice is byte-identical
        let path2 = dir.path().join("store2.demb");
        s.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn store_save_quantizes_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.demb");
        let third = 1.0f64 / 3.0;
        let s = store_from(&[("x", vec![third])]);
        s.save(&path).unwrap();
        let back = EmbeddingStore::<f64>::load(&path).unwrap();
        assert_eq!(back.vector(0)[0], third as f32 as f64);
    }

    #[test]
    fn hnsw_empty_and_tiny_stores() {
        let empty = EmbeddingStore::<f64>::new(4);
        let index = hnsw_build(empty, HnswConfig::default()).unwrap();
        assert!(hnsw_search(&index, &[0.0; 4], 5).unwrap().is_empty());

        let one = store_from(&[("solo", vec![1.0, 0.0])]);
        let index = hnsw_build(one, HnswConfig::default()).unwrap();
        let hits = hnsw_search(&index, &[1.0, 1.0], 3).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(index.store().id(hits[0].ordinal), "solo");
    }

    #[test]
    fn hnsw_exhaustive_regime_equals_flat() {
        // neighbors_per_node exceeds the store size, so no pruning happens
        // and a deep search must reproduce the exact scan.
        let vectors = random_unit_vectors(60, 8, 21);
        let mut s = EmbeddingStore::new(8);
        for (i, v) in vectors.iter().enumerate() {
            s.push(format!("n{i:03}"), v).unwrap();
        }
        let index = hnsw_build(s.clone(), HnswConfig::default()).unwrap();
        for q in random_unit_vectors(10, 8, 77) {
            let flat = flat_search(&s, &q, 10).unwrap();
            let hnsw = hnsw_search(&index, &q, 10).unwrap();
            assert_eq!(flat, hnsw);
        }
    }

    #[test]
    fn hnsw_recall_at_small_scale() {
        let vectors = random_unit_vectors(500, 16, 5);
        let mut s = EmbeddingStore::new(16);
        for (i, v) in vectors.iter().enumerate() {
            s.push(format!("n{i:04}"), v).unwrap();
        }
        let config = HnswConfig {
            neighbors_per_node: 16,
            construction_search_depth: 64,
            query_search_depth: 48,
            seed: 3,
        };
        let index = hnsw_build(s.clone(), config).unwrap();

        let queries = random_unit_vectors(25, 16, 123);
        let mut hits = 0usize;
        let mut total = 0usize;
        for q in &queries {
            let truth: std::collections::HashSet<usize> =
                naive_top_k(&s, q, 10).into_iter().collect();
            for n in hnsw_search(&index, q, 10).unwrap() {
                if truth.contains(&n.ordinal) {
                    hits += 1;
                }
            }
            total += truth.len();
        }
        let recall = hits as f64 / total as f64;
        assert!(recall >= 0.95, "recall {recall} below 0.95");
    }

    #[test]
    fn hnsw_build_is_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let vectors = random_unit_vectors(120, 8, 9);
        let mut s = EmbeddingStore::new(8);
        for (i, v) in vectors.iter().enumerate() {
            s.push(format!("n{i}"), v).unwrap();
        }
        let config = HnswConfig {
            neighbors_per_node: 8,
            construction_search_depth: 32,
            query_search_depth: 16,
            seed: 42,
        };
        let a = dir.path().join("a.dhnw");
        let b = dir.path().join("b.dhnw");
        hnsw_build(s.clone(), config).unwrap().save_graph(&a).unwrap();
        hnsw_build(s, config).unwrap().save_graph(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn hnsw_graph_round_trip_preserves_search() {
        let dir = tempfile::tempdir().unwrap();
        let vectors = random_unit_vectors(150, 8, 31);
        let mut s = EmbeddingStore::new(8);
        for (i, v) in vectors.iter().enumerate() {
            s.push(format!("n{i}"), v).unwrap();
        }
        let config = HnswConfig {
            neighbors_per_node: 8,
            construction_search_depth: 32,
            query_search_depth: 24,
            seed: 7,
        };
        let index = hnsw_build(s.clone(), config).unwrap();
        let path = dir.path().join("g.dhnw");
        index.save_graph(&path).unwrap();
        let loaded = HnswIndex::load_graph(s, &path).unwrap();

        for q in random_unit_vectors(10, 8, 55) {
            assert_eq!(
                hnsw_search(&index, &q, 5).unwrap(),
                hnsw_search(&loaded, &q, 5).unwrap()
            );
        }
    }

    #[test]
    fn hnsw_load_rejects_store_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let s = store_from(&[("a", vec![1.0]), ("b", vec![2.0])]);
        let index = hnsw_build(s, HnswConfig::default()).unwrap();
        let path = dir.path().join("g.dhnw");
        index.save_graph(&path).unwrap();

        let smaller = store_from(&[("a", vec![1.0])]);
        assert!(HnswIndex::load_graph(smaller, &path).is_err());
    }

    #[test]
    fn hnsw_recall_monotone_in_query_depth() {
        let vectors = random_unit_vectors(800, 16, 61);
        let mut s = EmbeddingStore::new(16);
        for (i, v) in vectors.iter().enumerate() {
            s.push(format!("n{i:04}"), v).unwrap();
        }
        let queries = random_unit_vectors(30, 16, 62);
        let truths: Vec<std::collections::HashSet<usize>> = queries
            .iter()
            .map(|q| naive_top_k(&s, q, 10).into_iter().collect())
            .collect();

        let mut last = 0.0f64;
        for depth in [16usize, 64, 128] {
            let config = HnswConfig {
                neighbors_per_node: 16,
                construction_search_depth: 64,
                query_search_depth: depth,
                seed: 13,
            };
            let index = hnsw_build(s.clone(), config).unwrap();
            let mut hits = 0usize;
            for (q, truth) in queries.iter().zip(&truths) {
                hits += hnsw_search(&index, q, 10)
                    .unwrap()
                    .iter()
                    .filter(|n| truth.contains(&n.ordinal))
                    .count();
            }
            let recall = hits as f64 / (queries.len() * 10) as f64;
            assert!(
                recall >= last,
                "recall dropped from {last} to {recall} at depth {depth}"
            );
            last = recall;
        }
    }
}

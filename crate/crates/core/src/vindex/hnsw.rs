//! HNSW graph construction and layered search.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Index, IndexParams};
use crate::embed::dot;

/// Levels are capped so the per-node level fits the file format's byte.
const MAX_LEVEL: usize = 32;

/// A node with its similarity to the current query. Orders by similarity,
/// then by lower node position so heaps are deterministic.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    sim: f64,
    node: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Generation-stamped visited set, reusable across searches.
struct Visited {
    marks: Vec<u32>,
    generation: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            marks: vec![0; n],
            generation: 0,
        }
    }

    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.generation = 1;
        }
    }

    /// Returns true the first time `node` is seen in this generation.
    fn insert(&mut self, node: u32) -> bool {
        let m = &mut self.marks[node as usize];
        if *m == self.generation {
            false
        } else {
            *m = self.generation;
            true
        }
    }
}

/// Read-only view the search routines need.
trait Graph {
    fn vector(&self, node: u32) -> &[f64];
    fn neighbors(&self, node: u32, layer: usize) -> &[u32];
}

impl Graph for Index {
    fn vector(&self, node: u32) -> &[f64] {
        Index::vector(self, node as usize)
    }

    fn neighbors(&self, node: u32, layer: usize) -> &[u32] {
        &self.links[node as usize][layer]
    }
}

/// Follows the single best neighbor until no neighbor improves on the
/// current node.
fn greedy_closest<G: Graph>(g: &G, query: &[f64], mut current: Candidate, layer: usize) -> Candidate {
    loop {
        let mut improved = false;
        for &nb in g.neighbors(current.node, layer) {
            let c = Candidate {
                sim: dot(g.vector(nb), query),
                node: nb,
            };
            if c > current {
                current = c;
                improved = true;
            }
        }
        if !improved {
            return current;
        }
    }
}

/// Beam search on one layer. Returns up to `ef` nodes, best first.
fn search_layer<G: Graph>(
    g: &G,
    query: &[f64],
    entry: &[Candidate],
    ef: usize,
    layer: usize,
    visited: &mut Visited,
) -> Vec<Candidate> {
    let mut frontier: BinaryHeap<Candidate> = BinaryHeap::new();
    let mut best: BinaryHeap<Reverse<Candidate>> = BinaryHeap::new();
    for &c in entry {
        if visited.insert(c.node) {
            frontier.push(c);
            best.push(Reverse(c));
        }
    }
    while best.len() > ef {
        best.pop();
    }
    while let Some(c) = frontier.pop() {
        let worst = best.peek().expect("non-empty").0;
        if c < worst && best.len() >= ef {
            break;
        }
        for &nb in g.neighbors(c.node, layer) {
            if !visited.insert(nb) {
                continue;
            }
            let cand = Candidate {
                sim: dot(g.vector(nb), query),
                node: nb,
            };
            if best.len() < ef || cand > best.peek().expect("non-empty").0 {
                frontier.push(cand);
                best.push(Reverse(cand));
                if best.len() > ef {
                    best.pop();
                }
            }
        }
    }
    let mut out: Vec<Candidate> = best.into_iter().map(|r| r.0).collect();
    out.sort_by(|a, b| b.cmp(a));
    out
}

/// Query-time search: greedy descent to layer 1, beam of `ef` on layer 0.
pub(super) fn search(index: &Index, query: &[f64], ef: usize) -> Vec<u32> {
    let Some(entry) = index.entry else {
        return Vec::new();
    };
    let mut current = Candidate {
        sim: dot(index.vector(entry as usize), query),
        node: entry,
    };
    for layer in (1..=index.max_level()).rev() {
        current = greedy_closest(index, query, current, layer);
    }
    let mut visited = Visited::new(index.len());
    visited.reset(index.len());
    search_layer(index, query, &[current], ef, 0, &mut visited)
        .into_iter()
        .map(|c| c.node)
        .collect()
}

pub(super) struct Builder<'a> {
    params: &'a IndexParams,
    vectors: &'a [f64],
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    rng: ChaCha8Rng,
    visited: Visited,
}

impl Graph for Builder<'_> {
    fn vector(&self, node: u32) -> &[f64] {
        let d = self.params.dims;
        &self.vectors[node as usize * d..(node as usize + 1) * d]
    }

    fn neighbors(&self, node: u32, layer: usize) -> &[u32] {
        &self.links[node as usize][layer]
    }
}

impl<'a> Builder<'a> {
    pub(super) fn new(params: &'a IndexParams, vectors: &'a [f64]) -> Self {
        let n = vectors.len() / params.dims;
        Self {
            params,
            vectors,
            links: Vec::with_capacity(n),
            entry: None,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            visited: Visited::new(n),
        }
    }

    pub(super) fn build(mut self) -> (Vec<Vec<Vec<u32>>>, Option<u32>) {
        let n = self.vectors.len() / self.params.dims;
        for node in 0..n {
            self.insert(node as u32);
        }
        (self.links, self.entry)
    }

    /// Geometric level: `P(level >= l) = level_probability^l`.
    fn random_level(&mut self) -> usize {
        let u: f64 = 1.0 - self.rng.random::<f64>();
        let level = (u.ln() / self.params.level_probability.ln()).floor();
        (level as usize).min(MAX_LEVEL)
    }

    fn level(&self, node: u32) -> usize {
        self.links[node as usize].len() - 1
    }

    fn insert(&mut self, node: u32) {
        let level = self.random_level();
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(node);
            return;
        };
        let query = self.vector(node).to_vec();
        let top = self.level(entry);
        let mut current = Candidate {
            sim: dot(self.vector(entry), &query),
            node: entry,
        };
        for layer in (level + 1..=top).rev() {
            current = greedy_closest(self, &query, current, layer);
        }
        let mut entry_points = vec![current];
        for layer in (0..=level.min(top)).rev() {
            let mut visited = std::mem::replace(&mut self.visited, Visited::new(0));
            visited.reset(self.links.len());
            let found = search_layer(self, &query, &entry_points, self.params.ef_construction, layer, &mut visited);
            self.visited = visited;

            // layer 0 is filled to its full 2M capacity on insert
            let chosen = self.select_neighbors(&found, self.params.layer_capacity(layer));
            self.links[node as usize][layer] = chosen.iter().map(|c| c.node).collect();
            for c in &chosen {
                self.connect(c.node, node, layer);
            }
            entry_points = found;
        }
        if level > top {
            self.entry = Some(node);
        }
    }

    /// Neighbor-diversity heuristic: walk candidates best first and keep one
    /// only if it is more similar to the base point than to every neighbor
    /// already kept. Discarded candidates back-fill any remaining slots.
    fn select_neighbors(&self, candidates: &[Candidate], m: usize) -> Vec<Candidate> {
        let mut kept: Vec<Candidate> = Vec::with_capacity(m);
        let mut discarded = Vec::new();
        for &c in candidates {
            if kept.len() >= m {
                break;
            }
            let cv = self.vector(c.node);
            let diverse = kept.iter().all(|k| dot(cv, self.vector(k.node)) < c.sim);
            if diverse {
                kept.push(c);
            } else {
                discarded.push(c);
            }
        }
        for c in discarded {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept
    }

    /// Adds `new` to `target`'s list on `layer`, shrinking it with the
    /// heuristic when it exceeds the layer's capacity.
    fn connect(&mut self, target: u32, new: u32, layer: usize) {
        let cap = self.params.layer_capacity(layer);
        self.links[target as usize][layer].push(new);
        if self.links[target as usize][layer].len() <= cap {
            return;
        }
        let base = self.vector(target).to_vec();
        let mut cands: Vec<Candidate> = self.links[target as usize][layer]
            .iter()
            .map(|&nb| Candidate {
                sim: dot(self.vector(nb), &base),
                node: nb,
            })
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        let kept = self.select_neighbors(&cands, cap);
        self.links[target as usize][layer] = kept.into_iter().map(|c| c.node).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingVector;
    use crate::vindex::IndexEntry;
    use rand_chacha::rand_core::RngCore;

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> EmbeddingVector {
        let mut v: Vec<f64> = (0..d).map(|_| (rng.next_u32() as f64 / u32::MAX as f64) - 0.5).collect();
        let n = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        EmbeddingVector::new(v).unwrap()
    }

    #[test]
    fn level_distribution_is_geometric() {
        let params = IndexParams::new(1).with_seed(5);
        let mut b = Builder::new(&params, &[]);
        let n = 100_000;
        let at_least_one = (0..n).filter(|_| b.random_level() >= 1).count() as f64 / n as f64;
        // P(level >= 1) = 1/e
        assert!((at_least_one - params.level_probability).abs() < 0.01, "{at_least_one}");
    }

    #[test]
    fn graph_is_well_formed_after_build() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let entries: Vec<_> = (0..600)
            .map(|i| IndexEntry::new(format!("c{i:04}"), random_unit(&mut rng, 12)))
            .collect();
        let mut params = IndexParams::new(12);
        params.max_neighbors = 4;
        params.ef_construction = 32;
        let ix = Index::build(entries, params).unwrap();
        ix.check_graph().unwrap();
        assert!(ix.max_level() >= 1);
        // the entry point sits on the top layer
        let top = ix.max_level();
        let entry = ix.chunk_ids().iter().position(|id| Some(id.as_str()) == ix.entry_point()).unwrap();
        assert_eq!(ix.level_of(entry), top);
    }

    #[test]
    fn same_seed_same_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let entries: Vec<_> = (0..300)
            .map(|i| IndexEntry::new(format!("c{i}"), random_unit(&mut rng, 8)))
            .collect();
        let a = Index::build(entries.clone(), IndexParams::new(8).with_seed(1)).unwrap();
        let b = Index::build(entries, IndexParams::new(8).with_seed(1)).unwrap();
        assert_eq!(a.links, b.links);
        assert_eq!(a.entry, b.entry);
    }
}

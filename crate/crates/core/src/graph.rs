//! Mutable working graph for state merging.
//!
//! States keep the ids they had in the model the graph was built from; a
//! fused group survives under its smallest id. Edges carry an arbitrary
//! payload that is combined when two edges fold together, so the same engine
//! serves plain counts, per-group counts and per-observation covariates.

use std::collections::{BTreeMap, HashMap};

use smallvec::SmallVec;

use crate::automaton::{Apfa, Edge, StateId, Symbol};
use crate::error::{Error, Result};

/// Data attached to an edge that can be pooled when edges fold.
pub trait EdgeStats: Clone + Send + Sync {
    fn absorb(&mut self, other: &Self);
}

impl EdgeStats for u64 {
    fn absorb(&mut self, other: &Self) {
        *self += *other;
    }
}

impl EdgeStats for Vec<u64> {
    fn absorb(&mut self, other: &Self) {
        if self.len() < other.len() {
            self.resize(other.len(), 0);
        }
        for (a, b) in self.iter_mut().zip(other) {
            *a += *b;
        }
    }
}

impl EdgeStats for Vec<f64> {
    fn absorb(&mut self, other: &Self) {
        self.extend_from_slice(other);
    }
}

impl EdgeStats for Option<u64> {
    fn absorb(&mut self, other: &Self) {
        *self = match (*self, *other) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
    }
}

impl EdgeStats for () {
    fn absorb(&mut self, _: &Self) {}
}

#[derive(Clone, Debug)]
pub(crate) struct OutEdge<S> {
    pub symbol: Symbol,
    pub target: u32,
    pub stats: S,
    pub synthetic: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct MergeGraph<S> {
    alphabets: Vec<u32>,
    level: Vec<u32>,
    by_level: Vec<Vec<u32>>,
    out: Vec<SmallVec<[OutEdge<S>; 2]>>,
    parents: Vec<SmallVec<[u32; 2]>>,
    uf: Vec<u32>,
    sink: u32,
}

impl<S: EdgeStats> MergeGraph<S> {
    /// Copies the topology of `a`, attaching `stats(edge_index)` to each edge.
    pub fn from_apfa(a: &Apfa, mut stats: impl FnMut(usize) -> S) -> Self {
        let n = a.num_states();
        let p = a.num_levels();
        let sink = a.sink().index() as u32;
        let level: Vec<u32> = a.levels().iter().map(|&l| l as u32).collect();
        let mut by_level = vec![Vec::new(); p + 1];
        for (i, &l) in level.iter().enumerate() {
            by_level[l as usize].push(i as u32);
        }
        let mut out: Vec<SmallVec<[OutEdge<S>; 2]>> = (0..n).map(|_| SmallVec::new()).collect();
        let mut parents: Vec<SmallVec<[u32; 2]>> = vec![SmallVec::new(); n];
        for s in a.states() {
            for &e in a.out_edges(s) {
                let edge = a.edge(e);
                let t = edge.target.index() as u32;
                out[s.index()].push(OutEdge {
                    symbol: edge.symbol,
                    target: t,
                    stats: stats(e),
                    synthetic: edge.synthetic,
                });
                if t != sink {
                    let ps = &mut parents[t as usize];
                    if !ps.contains(&(s.index() as u32)) {
                        ps.push(s.index() as u32);
                    }
                }
            }
        }
        MergeGraph {
            alphabets: a.alphabets().to_vec(),
            level,
            by_level,
            out,
            parents,
            uf: (0..n as u32).collect(),
            sink,
        }
    }

    /// Number of original states, live or fused away.
    pub fn len(&self) -> usize {
        self.level.len()
    }

    pub fn num_levels(&self) -> usize {
        self.alphabets.len()
    }

    pub fn alphabets(&self) -> &[u32] {
        &self.alphabets
    }

    pub fn level(&self, i: u32) -> usize {
        self.level[i as usize] as usize
    }

    pub fn is_alive(&self, i: u32) -> bool {
        self.uf[i as usize] == i
    }

    pub fn find(&self, mut i: u32) -> u32 {
        while self.uf[i as usize] != i {
            i = self.uf[i as usize];
        }
        i
    }

    fn find_mut(&mut self, i: u32) -> u32 {
        let r = self.find(i);
        let mut at = i;
        while self.uf[at as usize] != r {
            let next = self.uf[at as usize];
            self.uf[at as usize] = r;
            at = next;
        }
        r
    }

    pub fn out(&self, i: u32) -> &[OutEdge<S>] {
        &self.out[i as usize]
    }

    pub fn child(&self, i: u32, symbol: Symbol) -> Option<&OutEdge<S>> {
        let out = &self.out[i as usize];
        out.binary_search_by_key(&symbol, |e| e.symbol).ok().map(|k| &out[k])
    }

    pub fn alive_at_level(&self, level: usize) -> Vec<u32> {
        self.by_level[level]
            .iter()
            .copied()
            .filter(|&i| self.is_alive(i))
            .collect()
    }

    /// Checks a user-supplied state set and converts it to graph indices.
    pub fn check_seeds(&self, seeds: &[StateId]) -> Result<Vec<u32>> {
        let mut idx = Vec::with_capacity(seeds.len());
        for &s in seeds {
            if s.0 == 0 || s.index() >= self.level.len() || !self.is_alive(s.index() as u32) {
                return Err(Error::NoSuchState(s));
            }
            idx.push(s.index() as u32);
        }
        idx.sort_unstable();
        idx.dedup();
        if idx.len() < 2 || idx.contains(&self.sink) {
            return Err(Error::BadStateSet(seeds.to_vec()));
        }
        let l = self.level(idx[0]);
        if idx.iter().any(|&i| self.level(i) != l) {
            return Err(Error::MixedLevels(seeds.to_vec()));
        }
        if l >= self.num_levels() {
            return Err(Error::BadStateSet(seeds.to_vec()));
        }
        Ok(idx)
    }

    /// The merge-list of `seeds`, found level by level without touching the
    /// graph: at each level the classes are the connected groups of states
    /// reached from one class by one symbol.
    pub fn classes(&self, seeds: &[u32]) -> Vec<Vec<u32>> {
        let p = self.num_levels();
        let mut seed = seeds.to_vec();
        seed.sort_unstable();
        seed.dedup();
        let mut level = self.level(seed[0]);
        let mut current = vec![seed];
        let mut all = Vec::new();
        while !current.is_empty() {
            level += 1;
            let next = if level < p {
                self.next_classes(&current)
            } else {
                Vec::new()
            };
            all.extend(current);
            current = next;
        }
        all
    }

    fn next_classes(&self, classes: &[Vec<u32>]) -> Vec<Vec<u32>> {
        fn root(uf: &mut HashMap<u32, u32>, x: u32) -> u32 {
            let mut r = x;
            while let Some(&up) = uf.get(&r) {
                if up == r {
                    break;
                }
                r = up;
            }
            uf.insert(x, r);
            r
        }
        let mut uf: HashMap<u32, u32> = HashMap::new();
        let mut first: Vec<(Symbol, u32)> = Vec::new();
        for class in classes {
            first.clear();
            for &u in class {
                for e in self.out(u) {
                    match first.iter().find(|(s, _)| *s == e.symbol) {
                        Some(&(_, t)) if t != e.target => {
                            let (a, b) = (root(&mut uf, t), root(&mut uf, e.target));
                            if a != b {
                                uf.insert(a.max(b), a.min(b));
                            }
                        }
                        Some(_) => {}
                        None => {
                            first.push((e.symbol, e.target));
                            uf.entry(e.target).or_insert(e.target);
                        }
                    }
                }
            }
        }
        let keys: Vec<u32> = uf.keys().copied().collect();
        let mut groups: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for x in keys {
            let r = root(&mut uf, x);
            groups.entry(r).or_default().push(x);
        }
        let mut out: Vec<Vec<u32>> = groups
            .into_values()
            .filter(|g| g.len() > 1)
            .map(|mut g| {
                g.sort_unstable();
                g
            })
            .collect();
        out.sort_unstable_by_key(|g| g[0]);
        out
    }

    /// Fuses `seeds` and every pair of corresponding descendants, by
    /// repeatedly redirecting the edges into one state onto the other and
    /// folding out-edges that now share a symbol. Returns the fused groups,
    /// ordered by level and then by smallest member.
    pub fn merge(&mut self, seeds: &[u32]) -> Vec<Vec<u32>> {
        let mut work: Vec<(u32, u32)> = seeds.windows(2).map(|w| (w[0], w[1])).collect();
        work.reverse();
        let mut touched: Vec<u32> = Vec::new();
        while let Some((x, y)) = work.pop() {
            let (x, y) = (self.find_mut(x), self.find_mut(y));
            if x == y {
                continue;
            }
            let (keep, gone) = (x.min(y), x.max(y));
            debug_assert_ne!(gone, self.sink);
            self.uf[gone as usize] = keep;
            touched.push(keep);
            touched.push(gone);

            let gone_parents = std::mem::take(&mut self.parents[gone as usize]);
            for &p in &gone_parents {
                let p = self.find_mut(p);
                for e in self.out[p as usize].iter_mut() {
                    if e.target == gone {
                        e.target = keep;
                    }
                }
            }
            let mut merged: SmallVec<[u32; 2]> = SmallVec::new();
            let keep_parents = std::mem::take(&mut self.parents[keep as usize]);
            for p in keep_parents.into_iter().chain(gone_parents) {
                let p = self.find_mut(p);
                if !merged.contains(&p) {
                    merged.push(p);
                }
            }
            self.parents[keep as usize] = merged;

            let gone_out = std::mem::take(&mut self.out[gone as usize]);
            for e in gone_out {
                let kept = &mut self.out[keep as usize];
                match kept.binary_search_by_key(&e.symbol, |k| k.symbol) {
                    Ok(k) => {
                        let ek = &mut kept[k];
                        ek.stats.absorb(&e.stats);
                        ek.synthetic &= e.synthetic;
                        if ek.target != e.target {
                            work.push((ek.target, e.target));
                        }
                    }
                    Err(pos) => kept.insert(pos, e),
                }
            }
        }

        let mut groups: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        touched.sort_unstable();
        touched.dedup();
        for x in touched {
            let r = self.find(x);
            groups.entry(r).or_default().push(x);
        }
        let mut out: Vec<Vec<u32>> = groups.into_values().collect();
        out.sort_unstable_by_key(|g| (self.level(g[0]), g[0]));
        out
    }

    /// Exports the live states, numbered level-major in id order. The map
    /// sends each original index to its new id, or `None` if it was fused
    /// away.
    pub fn to_apfa(&self, count: impl Fn(&S) -> Option<u64>) -> (Apfa, Vec<Option<StateId>>) {
        let mut order: Vec<u32> = (0..self.level.len() as u32).filter(|&i| self.is_alive(i)).collect();
        order.sort_by_key(|&i| self.level[i as usize]);
        let mut map = vec![None; self.level.len()];
        for (k, &i) in order.iter().enumerate() {
            map[i as usize] = Some(StateId::from_index(k));
        }
        let levels = order.iter().map(|&i| self.level(i)).collect();
        let mut edges = Vec::new();
        for &i in &order {
            for e in self.out(i) {
                edges.push(Edge {
                    source: map[i as usize].unwrap(),
                    target: map[e.target as usize].expect("edges point at live states"),
                    symbol: e.symbol,
                    count: count(&e.stats),
                    prob: None,
                    synthetic: e.synthetic,
                });
            }
        }
        let a = Apfa::from_parts(self.alphabets.clone(), levels, edges)
            .expect("merging keeps states in range");
        (a, map)
    }
}

impl MergeGraph<u64> {
    pub fn from_counted(c: &crate::ingest::CountedApfa) -> Self {
        Self::from_apfa(c.apfa(), |e| c.edge_count(e))
    }

    pub fn node_count(&self, i: u32) -> u64 {
        self.out(i).iter().map(|e| e.stats).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn graph(c: &crate::ingest::CountedApfa) -> MergeGraph<u64> {
        MergeGraph::from_counted(c)
    }

    #[test]
    fn sweep_and_fusion_agree_on_the_full_sample() {
        let c = fixtures::seventy_full_sample();
        let mut g = graph(&c);
        let sweep = g.classes(&[1, 2]);
        let fused = g.merge(&[1, 2]);
        assert_eq!(sweep, vec![vec![1, 2], vec![3, 5], vec![4, 6]]);
        assert_eq!(sweep, fused);
        assert_eq!(g.alive_at_level(2), vec![3, 4]);
        assert_eq!(g.node_count(1), 70);
    }

    #[test]
    fn fusion_sums_counts_and_redirects_edges() {
        let c = fixtures::seventy_gapped_sample();
        let mut g = graph(&c);
        g.merge(&[1, 2]);
        let (a, map) = g.to_apfa(|&n| Some(n));
        assert_eq!(a.num_states(), 5);
        a.ensure_valid().unwrap();
        assert_eq!(map[2], None);
        let merged = StateId(2);
        let counts: Vec<u64> = a.out_edges(merged).iter().map(|&e| a.edge(e).count.unwrap()).collect();
        assert_eq!(counts, vec![39, 31]);
    }

    #[test]
    fn seed_checks() {
        let c = fixtures::seventy_full_sample();
        let g = graph(&c);
        assert!(matches!(g.check_seeds(&[StateId(2)]), Err(Error::BadStateSet(_))));
        assert!(matches!(g.check_seeds(&[StateId(2), StateId(4)]), Err(Error::MixedLevels(_))));
        assert!(matches!(g.check_seeds(&[StateId(2), StateId(99)]), Err(Error::NoSuchState(_))));
        assert_eq!(g.check_seeds(&[StateId(3), StateId(2)]).unwrap(), vec![1, 2]);
    }

    #[test]
    fn payloads_pool() {
        let mut a = vec![1u64, 2];
        a.absorb(&vec![3, 4, 5]);
        assert_eq!(a, vec![4, 6, 5]);
        let mut z = vec![0.5f64];
        z.absorb(&vec![1.5]);
        assert_eq!(z, vec![0.5, 1.5]);
    }
}

//! Sample trees and sample APFA.

use crate::automaton::{Apfa, Edge, StateId, Symbol};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// An APFA whose every edge carries a count, with node counts derived from
/// them. Node counts satisfy `n(v) = Σ in-counts = Σ out-counts`.
#[derive(Clone, Debug, PartialEq)]
pub struct CountedApfa {
    apfa: Apfa,
    node_counts: Vec<u64>,
    total: u64,
}

impl CountedApfa {
    /// Wraps a model whose edges all carry counts, checking that the counts
    /// are conserved through every interior state.
    pub fn new(apfa: Apfa) -> Result<Self> {
        if !apfa.has_counts() {
            return Err(Error::Counts("some edges have no count".into()));
        }
        let count = |e: &usize| apfa.edge(*e).count.unwrap();
        let mut node_counts = vec![0u64; apfa.num_states()];
        for s in apfa.states() {
            let out: u64 = apfa.out_edges(s).iter().map(count).sum();
            let inn: u64 = apfa.in_edges(s).iter().map(count).sum();
            let (has_in, has_out) = (!apfa.in_edges(s).is_empty(), apfa.out_degree(s) > 0);
            if has_in && has_out && inn != out {
                return Err(Error::Counts(format!(
                    "state {s} receives {inn} but emits {out}"
                )));
            }
            node_counts[s.index()] = if has_in { inn } else { out };
        }
        let total = node_counts[apfa.root().index()];
        Ok(CountedApfa {
            apfa,
            node_counts,
            total,
        })
    }

    /// Counts each row of `data` along its path in `model`. Every row must
    /// lie in the model's sample space.
    pub fn from_dataset(model: &Apfa, data: &Dataset) -> Result<Self> {
        if data.alphabets().len() != model.num_levels()
            || data.alphabets().iter().zip(model.alphabets()).any(|(d, m)| d > m)
        {
            return Err(Error::AlphabetMismatch {
                data: data.alphabets().to_vec(),
                model: model.alphabets().to_vec(),
            });
        }
        let mut counts = vec![0u64; model.num_edges()];
        for (k, row) in data.rows().enumerate() {
            let path = model.path_for(row).ok_or(Error::Unroutable { row: k + 1 })?;
            for e in path {
                counts[e] += 1;
            }
        }
        Self::new(model.with_counts(&counts))
    }

    pub fn apfa(&self) -> &Apfa {
        &self.apfa
    }

    pub fn into_apfa(self) -> Apfa {
        self.apfa
    }

    /// Sample size `N`.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn node_count(&self, s: StateId) -> u64 {
        self.node_counts[s.index()]
    }

    pub fn node_counts(&self) -> &[u64] {
        &self.node_counts
    }

    pub fn edge_count(&self, e: usize) -> u64 {
        self.apfa.edge(e).count.unwrap()
    }

    /// Out-edge counts of `s`, indexed by `symbol - 1`; empty for the sink.
    pub fn symbol_counts(&self, s: StateId) -> Vec<u64> {
        let l = self.apfa.level(s);
        if l >= self.apfa.num_levels() {
            return Vec::new();
        }
        let mut row = vec![0u64; self.apfa.alphabet_size(l + 1) as usize];
        for &e in self.apfa.out_edges(s) {
            let edge = self.apfa.edge(e);
            row[edge.symbol as usize - 1] += edge.count.unwrap();
        }
        row
    }
}

/// The prefix tree of a dataset: one state per distinct observed prefix,
/// one leaf per distinct observed outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTree {
    tree: CountedApfa,
}

impl SampleTree {
    pub fn counted(&self) -> &CountedApfa {
        &self.tree
    }

    pub fn apfa(&self) -> &Apfa {
        self.tree.apfa()
    }

    pub fn leaves(&self) -> Vec<StateId> {
        let p = self.tree.apfa().num_levels();
        self.tree.apfa().states_at_level(p)
    }

    /// Contracts the leaves onto a single sink.
    pub fn contract(&self) -> CountedApfa {
        let a = self.tree.apfa();
        let p = a.num_levels();
        let leaves = self.leaves();
        let first_leaf = leaves[0].index();
        let sink = StateId::from_index(first_leaf);
        let levels = a.levels()[..=first_leaf].to_vec();
        let edges = a
            .edges()
            .iter()
            .map(|e| {
                let mut e = e.clone();
                if a.level(e.target) == p {
                    e.target = sink;
                }
                e
            })
            .collect();
        let apfa = Apfa::from_parts(a.alphabets().to_vec(), levels, edges)
            .expect("contracting leaves keeps states in range");
        CountedApfa::new(apfa).expect("contraction preserves counts")
    }
}

struct TrieNode {
    level: usize,
    count: u64,
    children: Vec<(Symbol, u32)>,
}

/// Builds the sample tree, numbering states level-major with siblings in
/// symbol order.
pub fn sample_tree(data: &Dataset) -> Result<SampleTree> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = data.num_vars();
    let mut nodes = vec![TrieNode {
        level: 0,
        count: 0,
        children: Vec::new(),
    }];
    for row in data.rows() {
        let mut at = 0usize;
        nodes[0].count += 1;
        for &sym in row {
            let next = match nodes[at].children.iter().find(|(s, _)| *s == sym) {
                Some(&(_, c)) => c as usize,
                None => {
                    let c = nodes.len();
                    nodes.push(TrieNode {
                        level: nodes[at].level + 1,
                        count: 0,
                        children: Vec::new(),
                    });
                    nodes[at].children.push((sym, c as u32));
                    c
                }
            };
            nodes[next].count += 1;
            at = next;
        }
    }

    // level-major renumbering, siblings by symbol
    let mut order = Vec::with_capacity(nodes.len());
    let mut frontier = vec![0u32];
    for _ in 0..=p {
        let mut next = Vec::new();
        for &n in &frontier {
            order.push(n);
            let node = &mut nodes[n as usize];
            node.children.sort_unstable_by_key(|&(s, _)| s);
            next.extend(node.children.iter().map(|&(_, c)| c));
        }
        frontier = next;
    }
    let mut id = vec![StateId(0); nodes.len()];
    for (k, &n) in order.iter().enumerate() {
        id[n as usize] = StateId::from_index(k);
    }
    let levels = order.iter().map(|&n| nodes[n as usize].level).collect();
    let mut edges = Vec::with_capacity(nodes.len());
    for &n in &order {
        for &(sym, c) in &nodes[n as usize].children {
            edges.push(Edge::new(id[n as usize], id[c as usize], sym).with_count(nodes[c as usize].count));
        }
    }
    let apfa = Apfa::from_parts(data.alphabets().to_vec(), levels, edges)?;
    Ok(SampleTree {
        tree: CountedApfa::new(apfa)?,
    })
}

/// The sample tree with its leaves contracted to the sink.
pub fn sample_apfa(data: &Dataset) -> Result<CountedApfa> {
    Ok(sample_tree(data)?.contract())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn full_tree_has_level_one_counts() {
        let t = sample_tree(&fixtures::seventy_full()).unwrap();
        let c = t.counted();
        assert_eq!(c.total(), 70);
        let l1: Vec<u64> = c.apfa().states_at_level(1).iter().map(|&s| c.node_count(s)).collect();
        assert_eq!(l1, vec![36, 34]);
        assert_eq!(t.leaves().len(), 8);
        assert!(c.apfa().edges().iter().all(|e| e.count.unwrap() > 0));
    }

    #[test]
    fn gapped_tree_lacks_the_22_branch() {
        let t = sample_tree(&fixtures::seventy_gapped()).unwrap();
        let a = t.apfa();
        assert!(a.state_after(&[2, 2]).is_none());
        assert!(a.state_after(&[2, 1]).is_some());
        assert_eq!(t.leaves().len(), 6);
    }

    #[test]
    fn repeated_row_is_a_single_path() {
        let d = Dataset::from_counts(&[(vec![2, 1, 2], 5)]).unwrap();
        let c = sample_apfa(&d).unwrap();
        assert_eq!(c.apfa().num_states(), 4);
        assert!(c.apfa().edges().iter().all(|e| e.count == Some(5)));
        c.apfa().ensure_valid().unwrap();
    }

    #[test]
    fn sample_apfa_is_numbered_level_major() {
        let c = sample_apfa(&fixtures::seventy_gapped()).unwrap();
        let a = c.apfa();
        assert_eq!(a.num_states(), 7);
        assert_eq!(a.state_after(&[1]), Some(StateId(2)));
        assert_eq!(a.state_after(&[2]), Some(StateId(3)));
        assert_eq!(a.state_after(&[1, 1]), Some(StateId(4)));
        assert_eq!(a.state_after(&[1, 2]), Some(StateId(5)));
        assert_eq!(a.state_after(&[2, 1]), Some(StateId(6)));
        assert_eq!(a.sink(), StateId(7));
        assert!(!a.is_complete());
        assert_eq!(a.out_degree(StateId(3)), 1);
    }

    #[test]
    fn counts_telescope_per_level() {
        let c = sample_apfa(&fixtures::seventy_full()).unwrap();
        for l in 0..=3 {
            let sum: u64 = c.apfa().states_at_level(l).iter().map(|&s| c.node_count(s)).sum();
            assert_eq!(sum, 70);
        }
    }

    #[test]
    fn inconsistent_counts_are_rejected() {
        let a = crate::automaton::minimal_apfa(&[2]).unwrap();
        let bad = a.with_counts(&[3, 4]);
        assert!(CountedApfa::new(bad).is_ok());
        let m = crate::automaton::minimal_apfa(&[2, 2]).unwrap();
        let bad = m.with_counts(&[3, 4, 1, 1]);
        assert!(matches!(CountedApfa::new(bad), Err(Error::Counts(_))));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let d = Dataset::from_rows(&[vec![1, 1]]).unwrap();
        let empty = Dataset::from_flat(d.alphabets().to_vec(), vec![]);
        assert!(matches!(sample_tree(&empty), Err(Error::EmptyDataset)));
    }
}

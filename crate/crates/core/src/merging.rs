//! State merging, merge-lists, submodel partitions and the completion
//! nesting check.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::automaton::{isomorphism, Apfa, StateId};
use crate::error::{Error, Result};
use crate::graph::MergeGraph;
use crate::ingest::CountedApfa;

/// The groups of same-level states fused by merging a seed set, seed first,
/// then by level and smallest member.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeList {
    pub level: usize,
    pub groups: Vec<Vec<StateId>>,
}

impl MergeList {
    pub fn seed(&self) -> &[StateId] {
        &self.groups[0]
    }

    /// Number of states removed by the merge.
    pub fn states_removed(&self) -> usize {
        self.groups.iter().map(|g| g.len() - 1).sum()
    }

    /// Groups as sorted sets, ignoring their order.
    pub fn as_sets(&self) -> Vec<Vec<StateId>> {
        let mut g = self.groups.clone();
        g.sort();
        g
    }

    fn from_indices(level: usize, groups: Vec<Vec<u32>>) -> Self {
        MergeList {
            level,
            groups: groups
                .into_iter()
                .map(|g| g.into_iter().map(|i| StateId::from_index(i as usize)).collect())
                .collect(),
        }
    }
}

fn option_graph(a: &Apfa) -> MergeGraph<Option<u64>> {
    MergeGraph::from_apfa(a, |e| a.edge(e).count)
}

/// Merge-list of `s`, computed level by level from the classes of states
/// reachable by a common symbol string from the seed.
pub fn merge_list(a: &Apfa, s: &[StateId]) -> Result<MergeList> {
    let g = option_graph(a);
    let seeds = g.check_seeds(s)?;
    let level = g.level(seeds[0]);
    Ok(MergeList::from_indices(level, g.classes(&seeds)))
}

/// Merge-list of `s`, computed by actually fusing states on a scratch copy.
pub fn merge_list_recursive(a: &Apfa, s: &[StateId]) -> Result<MergeList> {
    let mut g = option_graph(a);
    let seeds = g.check_seeds(s)?;
    let level = g.level(seeds[0]);
    Ok(MergeList::from_indices(level, g.merge(&seeds)))
}

/// Result of a merge: the new model, its merge-list (in the old ids) and
/// where each old state went.
#[derive(Clone, Debug)]
pub struct MergeOutcome<M> {
    pub model: M,
    pub list: MergeList,
    pub map: Vec<StateId>,
}

/// Merges `s` in a model, summing counts where present. Probabilities are
/// dropped; refit afterwards.
pub fn merge_apfa(a: &Apfa, s: &[StateId]) -> Result<MergeOutcome<Apfa>> {
    let mut g = option_graph(a);
    let seeds = g.check_seeds(s)?;
    let level = g.level(seeds[0]);
    let groups = g.merge(&seeds);
    let (model, map) = g.to_apfa(|&c| c);
    let map = (0..a.num_states())
        .map(|i| map[g.find(i as u32) as usize].unwrap())
        .collect();
    Ok(MergeOutcome {
        model,
        list: MergeList::from_indices(level, groups),
        map,
    })
}

/// Merges `s`; fused edges carry the sum of their members' counts.
pub fn merge(c: &CountedApfa, s: &[StateId]) -> Result<CountedApfa> {
    Ok(merge_with_report(c, s)?.model)
}

pub fn merge_with_report(c: &CountedApfa, s: &[StateId]) -> Result<MergeOutcome<CountedApfa>> {
    let out = merge_apfa(c.apfa(), s)?;
    Ok(MergeOutcome {
        model: CountedApfa::new(out.model)?,
        list: out.list,
        map: out.map,
    })
}

/// How strictly [`submodel_partition`] reads "obtainable by merging".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NestingMode {
    /// Every member of a block must carry every symbol its image carries:
    /// the smaller model's sample space equals that of the merged model.
    Strict,
    /// Members may lack symbols their image carries; the models are then
    /// compared through their completions.
    #[default]
    UpToCompletion,
}

/// A per-level partition of the larger model's states, with the state of the
/// smaller model each block becomes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubmodelPartition {
    /// `levels[i]` lists the level-`i` blocks, each sorted, ordered by first
    /// member.
    pub levels: Vec<Vec<Vec<StateId>>>,
    /// Image of each state of the larger model.
    pub image: Vec<StateId>,
}

impl SubmodelPartition {
    /// Blocks with more than one member, by level.
    pub fn nontrivial_blocks(&self) -> Vec<Vec<StateId>> {
        self.levels
            .iter()
            .flatten()
            .filter(|b| b.len() > 1)
            .cloned()
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.nontrivial_blocks().is_empty()
    }
}

/// Finds the partition of `a`'s states whose blockwise merge gives `a0`.
///
/// Fails with [`Error::NotNested`] when no partition works, and with
/// [`Error::Incompatible`] when the models differ in shape.
pub fn submodel_partition(a: &Apfa, a0: &Apfa, mode: NestingMode) -> Result<SubmodelPartition> {
    if a.alphabets() != a0.alphabets() {
        return Err(Error::Incompatible(format!(
            "alphabets {:?} vs {:?}",
            a.alphabets(),
            a0.alphabets()
        )));
    }
    let mut image: Vec<Option<StateId>> = vec![None; a.num_states()];
    let mut edge_hit = vec![false; a0.num_edges()];
    let mut state_hit = vec![false; a0.num_states()];
    image[a.root().index()] = Some(a0.root());
    state_hit[a0.root().index()] = true;
    let mut queue = VecDeque::from([a.root()]);
    while let Some(u) = queue.pop_front() {
        let k = image[u.index()].unwrap();
        if mode == NestingMode::Strict && a.out_degree(u) != a0.out_degree(k) {
            return Err(Error::NotNested(format!(
                "state {u} has {} out-edges but its image {k} has {}",
                a.out_degree(u),
                a0.out_degree(k)
            )));
        }
        for &e in a.out_edges(u) {
            let edge = a.edge(e);
            let e0 = a0.out_edge(k, edge.symbol).ok_or_else(|| {
                Error::NotNested(format!(
                    "state {u} has symbol {} but its image {k} does not",
                    edge.symbol
                ))
            })?;
            edge_hit[e0] = true;
            let t0 = a0.edge(e0).target;
            let t = edge.target;
            match image[t.index()] {
                Some(x) if x != t0 => {
                    return Err(Error::NotNested(format!(
                        "state {t} would map to both {x} and {t0}"
                    )))
                }
                Some(_) => {}
                None => {
                    image[t.index()] = Some(t0);
                    state_hit[t0.index()] = true;
                    queue.push_back(t);
                }
            }
        }
    }
    if let Some(e) = edge_hit.iter().position(|h| !h) {
        let edge = a0.edge(e);
        return Err(Error::NotNested(format!(
            "edge {} -{}-> {} of the smaller model has no counterpart",
            edge.source, edge.symbol, edge.target
        )));
    }
    if let Some(s) = state_hit.iter().position(|h| !h) {
        return Err(Error::NotNested(format!(
            "state {} of the smaller model has no counterpart",
            StateId::from_index(s)
        )));
    }
    let image: Vec<StateId> = image
        .into_iter()
        .enumerate()
        .map(|(i, x)| x.ok_or_else(|| Error::NotNested(format!("state {} is unreachable", i + 1))))
        .collect::<Result<_>>()?;

    let mut levels = vec![Vec::new(); a.num_levels() + 1];
    let mut blocks: std::collections::BTreeMap<StateId, Vec<StateId>> = Default::default();
    for s in a.states() {
        blocks.entry(image[s.index()]).or_default().push(s);
    }
    for (k, members) in blocks {
        levels[a0.level(k)].push(members);
    }
    for l in &mut levels {
        l.sort();
    }
    Ok(SubmodelPartition { levels, image })
}

/// Both routes to a merged completion and whether they agree.
#[derive(Clone, Debug)]
pub struct NestingEvidence {
    /// The completion with `s` merged.
    pub completed_then_merged: Apfa,
    /// The merged model, completed.
    pub merged_then_completed: Apfa,
    /// Isomorphism from the first onto the second, if one exists.
    pub isomorphism: Option<Vec<StateId>>,
    /// Whether edge counts agree under the isomorphism.
    pub counts_agree: bool,
}

impl NestingEvidence {
    pub fn holds(&self) -> bool {
        self.isomorphism.is_some() && self.counts_agree
    }
}

/// Builds both the merged completion and the completed merge of `a` and
/// checks that they coincide. `max_new_states` bounds each completion.
pub fn check_nesting(a: &Apfa, s: &[StateId], max_new_states: usize) -> Result<NestingEvidence> {
    let (plus, map) = a.complete_with_map(max_new_states)?;
    let seeds: Vec<StateId> = s.iter().map(|x| map[x.index()]).collect();
    let left = merge_apfa(&plus, &seeds)?.model;
    let right = merge_apfa(a, s)?.model.complete(max_new_states)?;
    let iso = isomorphism(&left, &right);
    let counts_agree = iso.as_ref().is_some_and(|f| {
        left.edges().iter().all(|e| {
            let k = f[e.source.index()];
            right
                .out_edge(k, e.symbol)
                .is_some_and(|e2| right.edge(e2).count == e.count)
        })
    });
    Ok(NestingEvidence {
        completed_then_merged: left,
        merged_then_completed: right,
        isomorphism: iso,
        counts_agree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automaton::ids;
    use crate::estimation::fit_mle;
    use crate::fixtures;

    #[test]
    fn full_sample_merge_list() {
        let c = fixtures::seventy_full_sample();
        let l = merge_list(c.apfa(), &ids(&[2, 3])).unwrap();
        assert_eq!(l.seed(), &ids(&[2, 3])[..]);
        assert_eq!(l.as_sets(), vec![ids(&[2, 3]), ids(&[4, 6]), ids(&[5, 7])]);
        assert_eq!(l, merge_list_recursive(c.apfa(), &ids(&[2, 3])).unwrap());
    }

    #[test]
    fn gapped_sample_merge_list() {
        let c = fixtures::seventy_gapped_sample();
        let l = merge_list(c.apfa(), &ids(&[2, 3])).unwrap();
        assert_eq!(l.groups, vec![ids(&[2, 3]), ids(&[4, 6])]);
    }

    #[test]
    fn last_level_merge_list_is_the_seed() {
        let c = fixtures::seventy_full_sample();
        let l = merge_list(c.apfa(), &ids(&[4, 5, 7])).unwrap();
        assert_eq!(l.groups, vec![ids(&[4, 5, 7])]);
    }

    #[test]
    fn merge_reproduces_the_merged_fixture() {
        let c = fixtures::seventy_full_sample();
        let m = merge(&c, &ids(&[2, 3])).unwrap();
        let expected = fixtures::seventy_full_merged();
        assert!(isomorphism(m.apfa(), expected.apfa()).is_some());
        let mut into_sink: Vec<u64> = m.apfa().in_edges(m.apfa().sink()).iter().map(|&e| m.edge_count(e)).collect();
        into_sink.sort();
        assert_eq!(into_sink, vec![10, 18, 19, 23]);
        assert_eq!(m.apfa().num_states(), c.apfa().num_states() - 3);
        assert_eq!(m.total(), 70);
    }

    #[test]
    fn gapped_merge_counts() {
        let m = merge(&fixtures::seventy_gapped_sample(), &ids(&[2, 3])).unwrap();
        let a = m.apfa();
        let z = a.states_at_level(1)[0];
        assert_eq!(m.symbol_counts(z), vec![39, 31]);
        assert_eq!(a.num_states(), 5);
        assert!(isomorphism(a, fixtures::seventy_gapped_merged().apfa()).is_some());
    }

    #[test]
    fn rejects_bad_seeds() {
        let c = fixtures::seventy_full_sample();
        assert!(matches!(merge(&c, &ids(&[2, 4])), Err(Error::MixedLevels(_))));
        assert!(matches!(merge(&c, &ids(&[8, 8])), Err(Error::BadStateSet(_))));
        assert!(matches!(merge(&c, &ids(&[1])), Err(Error::BadStateSet(_))));
    }

    #[test]
    fn identical_subtrees_keep_the_likelihood() {
        let d = crate::dataset::Dataset::from_counts(&[
            (vec![1, 1, 1], 4),
            (vec![1, 1, 2], 2),
            (vec![2, 1, 1], 4),
            (vec![2, 1, 2], 2),
        ])
        .unwrap();
        let c = crate::ingest::sample_apfa(&d).unwrap();
        let m = merge(&c, &ids(&[2, 3])).unwrap();
        assert!((fit_mle(&c).log_likelihood() - fit_mle(&m).log_likelihood()).abs() < 1e-12);
    }

    #[test]
    fn partition_of_a_merge() {
        let a = fixtures::seventy_full_sample();
        let b = fixtures::seventy_full_merged();
        let part = submodel_partition(a.apfa(), b.apfa(), NestingMode::Strict).unwrap();
        assert_eq!(part.levels[1], vec![ids(&[2, 3])]);
        assert_eq!(part.levels[2], vec![ids(&[4, 6]), ids(&[5, 7])]);
        let same = submodel_partition(a.apfa(), a.apfa(), NestingMode::Strict).unwrap();
        assert!(same.is_identity());
    }

    #[test]
    fn gapped_partition_needs_completion() {
        let a = fixtures::seventy_gapped_sample();
        let b = fixtures::seventy_gapped_merged();
        assert!(matches!(
            submodel_partition(a.apfa(), b.apfa(), NestingMode::Strict),
            Err(Error::NotNested(_))
        ));
        let part = submodel_partition(a.apfa(), b.apfa(), NestingMode::UpToCompletion).unwrap();
        assert_eq!(part.nontrivial_blocks(), vec![ids(&[2, 3]), ids(&[4, 6])]);
        let ap = a.apfa().complete(100).unwrap();
        let bp = b.apfa().complete(100).unwrap();
        assert!(submodel_partition(&ap, &bp, NestingMode::Strict).is_ok());
    }

    #[test]
    fn merge_is_not_reversible() {
        let a = fixtures::seventy_full_sample();
        let b = fixtures::seventy_full_merged();
        assert!(submodel_partition(b.apfa(), a.apfa(), NestingMode::UpToCompletion).is_err());
        let other = crate::automaton::maximal_apfa(&[2, 2], 10).unwrap();
        assert!(matches!(
            submodel_partition(a.apfa(), &other, NestingMode::Strict),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn nesting_on_the_gapped_sample() {
        let a = fixtures::seventy_gapped_sample();
        let ev = check_nesting(a.apfa(), &ids(&[2, 3]), 100).unwrap();
        assert!(ev.holds());
        let full = fixtures::seventy_full_sample();
        let ev = check_nesting(full.apfa(), &ids(&[2, 3]), 100).unwrap();
        assert!(ev.holds());
        assert!(matches!(
            check_nesting(a.apfa(), &ids(&[2, 3]), 0),
            Err(Error::SizeGuard { .. })
        ));
    }
}

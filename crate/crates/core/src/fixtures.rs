//! Reference models and datasets used throughout the test suites.
//!
//! State numbering follows the level-major convention of the rest of the
//! crate.

use std::collections::HashMap;

use crate::automaton::{Apfa, Edge, StateId, Symbol};
use crate::dataset::Dataset;
use crate::ingest::{sample_apfa, CountedApfa};

/// 70 observations of three binary variables; all eight outcomes occur.
pub fn seventy_full() -> Dataset {
    Dataset::from_counts(&[
        (vec![1, 1, 1], 2),
        (vec![1, 1, 2], 3),
        (vec![1, 2, 1], 9),
        (vec![1, 2, 2], 22),
        (vec![2, 1, 1], 16),
        (vec![2, 1, 2], 16),
        (vec![2, 2, 1], 1),
        (vec![2, 2, 2], 1),
    ])
    .unwrap()
}

/// 70 observations of three binary variables; `x_1 = 2, x_2 = 2` never occurs.
pub fn seventy_gapped() -> Dataset {
    Dataset::from_counts(&[
        (vec![1, 1, 1], 3),
        (vec![1, 1, 2], 2),
        (vec![1, 2, 1], 9),
        (vec![1, 2, 2], 22),
        (vec![2, 1, 1], 17),
        (vec![2, 1, 2], 17),
    ])
    .unwrap()
}

/// Builds the complete APFA whose level-`i` states are the classes of
/// prefixes `x_{≤i}` with equal `key(x_{≤i})`. States are numbered in
/// discovery order: each level's states in order, out-symbols ascending.
///
/// `key` must be consistent: prefixes sharing a key must lead to shared keys
/// after every extension.
pub fn from_context<K>(alphabets: &[u32], key: K) -> Apfa
where
    K: Fn(&[Symbol]) -> Vec<Symbol>,
{
    let p = alphabets.len();
    let mut levels = vec![0usize];
    let mut reps: Vec<Vec<Symbol>> = vec![vec![]];
    let mut edges = Vec::new();
    let mut frontier = vec![StateId(1)];
    for l in 1..=p {
        let mut index: HashMap<Vec<Symbol>, StateId> = HashMap::new();
        let mut next = Vec::new();
        let sink = (l == p).then(|| {
            levels.push(p);
            StateId::from_index(levels.len() - 1)
        });
        for &s in &frontier {
            for sym in 1..=alphabets[l - 1] {
                let mut prefix = reps[s.index()].clone();
                prefix.push(sym);
                let t = match sink {
                    Some(t) => t,
                    None => *index.entry(key(&prefix)).or_insert_with(|| {
                        levels.push(l);
                        reps.push(prefix.clone());
                        let t = StateId::from_index(levels.len() - 1);
                        next.push(t);
                        t
                    }),
                };
                edges.push(Edge::new(s, t, sym));
            }
        }
        frontier = next;
    }
    Apfa::from_parts(alphabets.to_vec(), levels, edges).unwrap()
}

/// The sample APFA of [`seventy_full`], which is the maximal APFA.
pub fn seventy_full_sample() -> CountedApfa {
    sample_apfa(&seventy_full()).unwrap()
}

/// [`seventy_full`] on the model with its level-1 states merged, so `x_1` is independent of the rest.
pub fn seventy_full_merged() -> CountedApfa {
    let topo = from_context(&[2, 2, 2], |x| if x.len() == 1 { vec![] } else { vec![x[1]] });
    CountedApfa::from_dataset(&topo, &seventy_full()).unwrap()
}

/// The incomplete sample APFA of [`seventy_gapped`].
pub fn seventy_gapped_sample() -> CountedApfa {
    sample_apfa(&seventy_gapped()).unwrap()
}

/// [`seventy_gapped`] on the model with states 2 and 3 (and hence 4 and 6)
/// of its sample APFA merged.
pub fn seventy_gapped_merged() -> CountedApfa {
    let topo = from_context(&[2, 2, 2], |x| if x.len() == 1 { vec![] } else { vec![x[1]] });
    CountedApfa::from_dataset(&topo, &seventy_gapped()).unwrap()
}

/// Eight states over five levels. State 5 (`x_2 = 2`) has no
/// symbol-2 out-edge and collects the prefixes `(1,2)` and `(2,2)`.
///
/// Edge probabilities are illustrative.
pub fn gapped_chain() -> Apfa {
    let s = StateId;
    let e = |a, b, sym, p| Edge::new(s(a), s(b), sym).with_prob(p);
    let edges = vec![
        e(1, 2, 1, 0.4),
        e(1, 3, 2, 0.6),
        e(2, 4, 1, 0.3),
        e(2, 5, 2, 0.7),
        e(3, 6, 1, 0.8),
        e(3, 5, 2, 0.2),
        e(4, 7, 1, 0.25),
        e(4, 7, 2, 0.75),
        e(5, 7, 1, 1.0),
        e(6, 7, 1, 0.6),
        e(6, 7, 2, 0.4),
        e(7, 8, 1, 0.35),
        e(7, 8, 2, 0.65),
    ];
    Apfa::new(vec![2, 2, 2, 2], vec![0, 1, 1, 2, 2, 2, 3, 4], edges).unwrap()
}

/// Four binary variables whose intermediate states keep the all-1 and all-2
/// histories apart and pool every other history.
pub fn pooled_middle() -> Apfa {
    let s = StateId;
    let e = |a, b, sym, p| Edge::new(s(a), s(b), sym).with_prob(p);
    // 1 root; 2,3 = X1; 4 (1,1), 5 mixed, 6 (2,2); 7 (1,1,1), 8 mixed, 9 (2,2,2); 10 sink
    let edges = vec![
        e(1, 2, 1, 0.84),
        e(1, 3, 2, 0.16),
        e(2, 4, 1, 0.88),
        e(2, 5, 2, 0.12),
        e(3, 5, 1, 0.53),
        e(3, 6, 2, 0.47),
        e(4, 7, 1, 0.93),
        e(4, 8, 2, 0.07),
        e(5, 8, 1, 0.30),
        e(5, 8, 2, 0.70),
        e(6, 8, 1, 0.34),
        e(6, 9, 2, 0.66),
        e(7, 10, 1, 0.96),
        e(7, 10, 2, 0.04),
        e(8, 10, 1, 0.21),
        e(8, 10, 2, 0.79),
        e(9, 10, 1, 0.33),
        e(9, 10, 2, 0.67),
    ];
    Apfa::new(vec![2; 4], vec![0, 1, 1, 2, 2, 2, 3, 3, 3, 4], edges).unwrap()
}

/// Complete independence of four binary variables.
pub fn independence() -> Apfa {
    crate::automaton::minimal_apfa(&[2; 4]).unwrap()
}

/// First-order Markov chain on five binary variables.
pub fn markov1() -> Apfa {
    from_context(&[2; 5], |x| vec![*x.last().unwrap()])
}

/// Second-order Markov chain on five binary variables.
pub fn markov2() -> Apfa {
    from_context(&[2; 5], |x| x[x.len().saturating_sub(2)..].to_vec())
}

/// Variable-length Markov chain. Memory one when the last symbol
/// is 1, two otherwise.
pub fn vlmc() -> Apfa {
    from_context(&[2; 5], |x| {
        let n = x.len();
        if x[n - 1] == 1 || n == 1 {
            x[n - 1..].to_vec()
        } else {
            x[n - 2..].to_vec()
        }
    })
}

/// Memory-gap chain on three binary variables; both interior
/// levels remember `x_1` only.
pub fn memory_gap() -> Apfa {
    from_context(&[2; 3], |x| vec![x[0]])
}

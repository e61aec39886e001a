#![allow(dead_code)]

use apfa_core::automaton::Edge;
use apfa_core::{Apfa, Dataset, FittedApfa, StateId};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

/// A random binary APFA with `p` levels and at most `width` states per
/// inner level, carrying the counts of `n` rows simulated from random
/// probabilities.
pub fn random_binary_apfa<R: Rng>(rng: &mut R, p: usize, width: usize, n: usize) -> Apfa {
    let mut sizes = vec![1usize];
    for i in 1..p {
        let cap = (2 * sizes[i - 1]).min(width);
        sizes.push(rng.random_range(1..=cap));
    }
    sizes.push(1);
    let mut first = vec![1u32];
    for i in 0..p {
        first.push(first[i] + sizes[i] as u32);
    }
    let levels: Vec<usize> = sizes.iter().enumerate().flat_map(|(l, &k)| vec![l; k]).collect();

    let mut edges = Vec::new();
    for i in 0..p {
        let mut slots: Vec<(u32, u32)> = (0..sizes[i] as u32).flat_map(|s| [(s, 1), (s, 2)]).collect();
        slots.shuffle(rng);
        let next = sizes[i + 1] as u32;
        let mut used = vec![false; sizes[i]];
        for (k, &(s, sym)) in slots.iter().enumerate() {
            let target = if (k as u32) < next {
                Some(k as u32)
            } else if rng.random_bool(0.6) {
                Some(rng.random_range(0..next))
            } else {
                None
            };
            if let Some(t) = target {
                used[s as usize] = true;
                edges.push(Edge::new(StateId(first[i] + s), StateId(first[i + 1] + t), sym));
            }
        }
        // every state needs an out-edge
        for (s, _) in used.iter().enumerate().filter(|(_, u)| !**u) {
            let t = rng.random_range(0..next);
            edges.push(Edge::new(StateId(first[i] + s as u32), StateId(first[i + 1] + t), rng.random_range(1..=2)));
        }
    }
    let topology = Apfa::new(vec![2; p], levels, edges).expect("generated model is valid");
    let probs = random_probabilities(rng, &topology);
    let data = topology.with_probabilities(&probs).simulate(n, rng.random()).unwrap();
    let counted = apfa_core::CountedApfa::from_dataset(&topology, &data).unwrap();
    counted.into_apfa()
}

/// Random transition probabilities bounded away from zero.
pub fn random_probabilities<R: Rng>(rng: &mut R, a: &Apfa) -> Vec<f64> {
    let mut probs = vec![0.0; a.num_edges()];
    for s in a.states() {
        let out = a.out_edges(s);
        let w: Vec<f64> = out.iter().map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = w.iter().sum();
        for (&e, x) in out.iter().zip(w) {
            probs[e] = x / total;
        }
    }
    probs
}

/// Rows with some serial dependence: each variable copies its predecessor
/// when that symbol exists, with probability one half.
pub fn random_dataset<R: Rng>(rng: &mut R, p: usize, max_alphabet: u32, n: usize) -> Dataset {
    let alphabets: Vec<u32> = (0..p).map(|_| rng.random_range(2..=max_alphabet)).collect();
    let rows: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            let mut row: Vec<u32> = Vec::with_capacity(p);
            for &k in &alphabets {
                let x = match row.last() {
                    Some(&prev) if prev <= k && rng.random_bool(0.5) => prev,
                    _ => rng.random_range(1..=k),
                };
                row.push(x);
            }
            row
        })
        .collect();
    Dataset::from_rows(&rows).unwrap().with_alphabets(alphabets).unwrap()
}

/// Log-likelihood summed row by row from the fitted path probabilities.
pub fn brute_force_loglik(f: &FittedApfa, d: &Dataset) -> f64 {
    d.rows().map(|x| f.apfa().probability_of(x).unwrap().ln()).sum()
}

/// Two distinct random states on a level with at least two states.
pub fn random_pair<R: Rng>(rng: &mut R, a: &Apfa) -> Option<[StateId; 2]> {
    let levels: Vec<usize> = (1..a.num_levels()).filter(|&l| a.states_at_level(l).len() >= 2).collect();
    let &l = levels.choose(rng)?;
    let states = a.states_at_level(l);
    let mut pick: Vec<StateId> = states.choose_multiple(rng, 2).copied().collect();
    pick.sort();
    Some([pick[0], pick[1]])
}

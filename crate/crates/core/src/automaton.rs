//! The APFA data model.
//!
//! An [`Apfa`] is a levelled directed multigraph: one root at level 0, one
//! sink at level `p`, and every edge running from level `i` to level `i + 1`.
//! Each edge carries a symbol from the alphabet of the level it enters, and
//! the out-edges of a state carry distinct symbols, so an edge is identified
//! by its source and symbol and a root-to-sink path by its symbol string.
//!
//! State ids are 1-based and dense. Models built by this crate number their
//! states level-major: the root is state 1, then the level-1 states, and so
//! on, with the sink last.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// A symbol code. Symbols are 1-based: level `i` uses `1..=|Σ_i|`.
pub type Symbol = u32;

/// A realization `(x_1, ..., x_p)`.
pub type Outcome = [Symbol];

/// Tolerance for per-state probability sums when validating.
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub u32);

impl StateId {
    /// Zero-based position of the state in the model's state table.
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    #[inline]
    pub fn from_index(index: usize) -> Self {
        StateId(index as u32 + 1)
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Convenience for writing state sets by their printed ids.
pub fn ids(labels: &[u32]) -> Vec<StateId> {
    labels.iter().map(|&l| StateId(l)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: StateId,
    pub target: StateId,
    pub symbol: Symbol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
    /// Added by completion; carries no data.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

impl Edge {
    pub fn new(source: StateId, target: StateId, symbol: Symbol) -> Self {
        Edge {
            source,
            target,
            symbol,
            count: None,
            prob: None,
            synthetic: false,
        }
    }

    pub fn with_count(mut self, count: u64) -> Self {
        self.count = Some(count);
        self
    }

    pub fn with_prob(mut self, prob: f64) -> Self {
        self.prob = Some(prob);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Apfa {
    alphabets: Vec<u32>,
    levels: Vec<usize>,
    edges: Vec<Edge>,
    out: Vec<Vec<usize>>,
    inc: Vec<Vec<usize>>,
}

impl Apfa {
    /// Assembles a model from raw parts. Only referential integrity is
    /// checked here; call [`Apfa::validate`] for the structural invariants.
    ///
    /// `alphabets[i]` is `|Σ_{i+1}|` and `levels[k]` is the level of state `k + 1`.
    pub fn from_parts(alphabets: Vec<u32>, levels: Vec<usize>, edges: Vec<Edge>) -> Result<Self> {
        if alphabets.is_empty() || alphabets.contains(&0) {
            return Err(Error::BadAlphabets);
        }
        let n = levels.len();
        let mut out = vec![Vec::new(); n];
        let mut inc = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            for s in [e.source, e.target] {
                if s.0 == 0 || s.index() >= n {
                    return Err(Error::UnknownState { edge: i, state: s });
                }
            }
            out[e.source.index()].push(i);
            inc[e.target.index()].push(i);
        }
        for list in &mut out {
            list.sort_by_key(|&i| edges[i].symbol);
        }
        Ok(Apfa {
            alphabets,
            levels,
            edges,
            out,
            inc,
        })
    }

    /// Like [`Apfa::from_parts`] but rejects models that fail validation.
    pub fn new(alphabets: Vec<u32>, levels: Vec<usize>, edges: Vec<Edge>) -> Result<Self> {
        let a = Self::from_parts(alphabets, levels, edges)?;
        a.ensure_valid()?;
        Ok(a)
    }

    pub fn into_parts(self) -> (Vec<u32>, Vec<usize>, Vec<Edge>) {
        (self.alphabets, self.levels, self.edges)
    }

    /// Number of variables `p`.
    pub fn num_levels(&self) -> usize {
        self.alphabets.len()
    }

    pub fn alphabets(&self) -> &[u32] {
        &self.alphabets
    }

    /// `|Σ_level|` for `level` in `1..=p`.
    pub fn alphabet_size(&self, level: usize) -> u32 {
        self.alphabets[level - 1]
    }

    pub fn num_states(&self) -> usize {
        self.levels.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> + '_ {
        (0..self.levels.len()).map(StateId::from_index)
    }

    pub fn level(&self, s: StateId) -> usize {
        self.levels[s.index()]
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn contains(&self, s: StateId) -> bool {
        s.0 >= 1 && s.index() < self.levels.len()
    }

    pub fn states_at_level(&self, level: usize) -> Vec<StateId> {
        self.states().filter(|&s| self.level(s) == level).collect()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, i: usize) -> &Edge {
        &self.edges[i]
    }

    /// Out-edge indices of `s`, ordered by symbol.
    pub fn out_edges(&self, s: StateId) -> &[usize] {
        &self.out[s.index()]
    }

    pub fn in_edges(&self, s: StateId) -> &[usize] {
        &self.inc[s.index()]
    }

    pub fn out_degree(&self, s: StateId) -> usize {
        self.out[s.index()].len()
    }

    /// The out-edge of `s` carrying `symbol`, if any.
    pub fn out_edge(&self, s: StateId, symbol: Symbol) -> Option<usize> {
        self.out[s.index()]
            .iter()
            .copied()
            .find(|&i| self.edges[i].symbol == symbol)
    }

    /// The first level-0 state.
    pub fn root(&self) -> StateId {
        self.states()
            .find(|&s| self.level(s) == 0)
            .unwrap_or(StateId(1))
    }

    /// The first level-`p` state.
    pub fn sink(&self) -> StateId {
        let p = self.num_levels();
        self.states()
            .find(|&s| self.level(s) == p)
            .unwrap_or_else(|| StateId::from_index(self.levels.len().saturating_sub(1)))
    }

    pub fn has_probabilities(&self) -> bool {
        self.edges.iter().all(|e| e.prob.is_some())
    }

    pub fn has_counts(&self) -> bool {
        self.edges.iter().all(|e| e.count.is_some())
    }

    /// Returns a copy with every edge probability replaced.
    pub fn with_probabilities(&self, probs: &[f64]) -> Apfa {
        let mut a = self.clone();
        for (e, &p) in a.edges.iter_mut().zip(probs) {
            e.prob = Some(p);
        }
        a
    }

    /// Returns a copy with every edge count replaced.
    pub fn with_counts(&self, counts: &[u64]) -> Apfa {
        let mut a = self.clone();
        for (e, &c) in a.edges.iter_mut().zip(counts) {
            e.count = Some(c);
        }
        a
    }

    /// Drops counts and probabilities, keeping topology and symbols.
    pub fn topology(&self) -> Apfa {
        let mut a = self.clone();
        for e in &mut a.edges {
            e.count = None;
            e.prob = None;
        }
        a
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(report))
        }
    }

    /// True iff every non-sink state has an out-edge for every symbol of the
    /// next level, i.e. the sample space is the full product space.
    pub fn is_complete(&self) -> bool {
        let p = self.num_levels();
        self.states().all(|s| {
            let l = self.level(s);
            l >= p || self.out_degree(s) == self.alphabet_size(l + 1) as usize
        })
    }

    /// The root-to-sink edge sequence generating `x`, if `x` lies in the
    /// model's sample space.
    pub fn path_for(&self, x: &Outcome) -> Option<Vec<usize>> {
        if x.len() != self.num_levels() {
            return None;
        }
        let mut at = self.root();
        let mut path = Vec::with_capacity(x.len());
        for &sym in x {
            let e = self.out_edge(at, sym)?;
            path.push(e);
            at = self.edges[e].target;
        }
        Some(path)
    }

    /// State reached after reading `prefix` from the root.
    pub fn state_after(&self, prefix: &[Symbol]) -> Option<StateId> {
        let mut at = self.root();
        for &sym in prefix {
            at = self.edges[self.out_edge(at, sym)?].target;
        }
        Some(at)
    }

    /// Product of edge probabilities along the path of `x`; 0 if there is none.
    pub fn probability_of(&self, x: &Outcome) -> Result<f64> {
        if !self.has_probabilities() {
            return Err(Error::ProbabilitiesUnset);
        }
        Ok(match self.path_for(x) {
            Some(path) => path.iter().map(|&e| self.edges[e].prob.unwrap()).product(),
            None => 0.0,
        })
    }

    /// Visits every outcome in the sample space together with its path.
    /// Exponential in `p`; intended for small models.
    pub fn for_each_outcome(&self, mut f: impl FnMut(&[Symbol], &[usize])) {
        let p = self.num_levels();
        let mut symbols = Vec::with_capacity(p);
        let mut path = Vec::with_capacity(p);
        fn walk(
            a: &Apfa,
            s: StateId,
            symbols: &mut Vec<Symbol>,
            path: &mut Vec<usize>,
            f: &mut dyn FnMut(&[Symbol], &[usize]),
        ) {
            if a.out_degree(s) == 0 {
                if symbols.len() == a.num_levels() {
                    f(symbols, path);
                }
                return;
            }
            for &e in a.out_edges(s) {
                symbols.push(a.edges[e].symbol);
                path.push(e);
                walk(a, a.edges[e].target, symbols, path, f);
                symbols.pop();
                path.pop();
            }
        }
        walk(self, self.root(), &mut symbols, &mut path, &mut f);
    }

    /// Draws `n` independent root-to-sink walks.
    pub fn simulate(&self, n: usize, seed: u64) -> Result<Dataset> {
        if !self.has_probabilities() {
            return Err(Error::ProbabilitiesUnset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.num_levels();
        let root = self.root();
        let mut values = Vec::with_capacity(n * p);
        for _ in 0..n {
            let mut at = root;
            for _ in 0..p {
                let out = self.out_edges(at);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = *out.last().expect("non-sink state without out-edges");
                for &e in out {
                    acc += self.edges[e].prob.unwrap();
                    if u < acc {
                        chosen = e;
                        break;
                    }
                }
                // never step onto a zero-probability edge through rounding
                if self.edges[chosen].prob.unwrap() == 0.0 {
                    chosen = out
                        .iter()
                        .rev()
                        .copied()
                        .find(|&e| self.edges[e].prob.unwrap() > 0.0)
                        .unwrap_or(chosen);
                }
                values.push(self.edges[chosen].symbol);
                at = self.edges[chosen].target;
            }
        }
        Ok(Dataset::from_flat(self.alphabets.clone(), values))
    }

    /// Relabels states so that state `order[k]` becomes state `k + 1`.
    pub(crate) fn relabel(&self, order: &[StateId]) -> (Apfa, Vec<StateId>) {
        let mut map = vec![StateId(0); self.num_states()];
        for (k, &s) in order.iter().enumerate() {
            map[s.index()] = StateId::from_index(k);
        }
        let levels = order.iter().map(|&s| self.level(s)).collect();
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| Edge {
                source: map[e.source.index()],
                target: map[e.target.index()],
                ..e.clone()
            })
            .collect();
        edges.sort_by_key(|e| (e.source, e.symbol));
        let a = Apfa::from_parts(self.alphabets.clone(), levels, edges)
            .expect("relabelling preserves referential integrity");
        (a, map)
    }

    /// Canonical numbering: breadth-first from the root, visiting each
    /// level's states in order and their out-edges by symbol. Two models are
    /// isomorphic iff their canonical forms are equal.
    pub fn canonical(&self) -> Apfa {
        let mut seen = vec![false; self.num_states()];
        let mut order = Vec::with_capacity(self.num_states());
        let mut queue = VecDeque::new();
        let root = self.root();
        seen[root.index()] = true;
        queue.push_back(root);
        while let Some(s) = queue.pop_front() {
            order.push(s);
            for &e in self.out_edges(s) {
                let t = self.edges[e].target;
                if !seen[t.index()] {
                    seen[t.index()] = true;
                    queue.push_back(t);
                }
            }
        }
        for s in self.states() {
            if !seen[s.index()] {
                order.push(s);
            }
        }
        // the sink is reached early through short-circuit edges only in
        // malformed graphs; keep level-major order regardless
        order.sort_by_key(|&s| self.level(s));
        self.relabel(&order).0
    }

    /// Level-major renumbering that keeps the relative order of states within
    /// each level.
    pub fn level_major(&self) -> (Apfa, Vec<StateId>) {
        let mut order: Vec<StateId> = self.states().collect();
        order.sort_by_key(|&s| self.level(s));
        self.relabel(&order)
    }
}

/// Finds the symbol-preserving isomorphism from `a` onto `b`, if one exists.
/// The result maps each state of `a` (by index) to a state of `b`.
///
/// Because out-edges are identified by symbol, the isomorphism is forced
/// once the roots are matched, so a single simultaneous traversal decides it.
pub fn isomorphism(a: &Apfa, b: &Apfa) -> Option<Vec<StateId>> {
    if a.alphabets != b.alphabets || a.num_states() != b.num_states() || a.num_edges() != b.num_edges() {
        return None;
    }
    let n = a.num_states();
    let mut fwd: Vec<Option<StateId>> = vec![None; n];
    let mut back: Vec<Option<StateId>> = vec![None; n];
    let (ra, rb) = (a.root(), b.root());
    fwd[ra.index()] = Some(rb);
    back[rb.index()] = Some(ra);
    let mut queue = VecDeque::from([ra]);
    while let Some(u) = queue.pop_front() {
        let v = fwd[u.index()].unwrap();
        if a.out_degree(u) != b.out_degree(v) || a.level(u) != b.level(v) {
            return None;
        }
        for &e in a.out_edges(u) {
            let ea = &a.edges[e];
            let eb = &b.edges[b.out_edge(v, ea.symbol)?];
            let (t, t2) = (ea.target, eb.target);
            match (fwd[t.index()], back[t2.index()]) {
                (None, None) => {
                    fwd[t.index()] = Some(t2);
                    back[t2.index()] = Some(t);
                    queue.push_back(t);
                }
                (Some(x), Some(y)) if x == t2 && y == t => {}
                _ => return None,
            }
        }
    }
    fwd.into_iter().collect()
}

// ----------------------------------------------------------------------------
// validation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationKind {
    Shape,
    RootSink,
    Levelled,
    Connectivity,
    Symbols,
    Probabilities,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    LevelOutOfRange { state: StateId, level: usize },
    RootCount { found: Vec<StateId> },
    RootHasIncoming { state: StateId },
    SinkCount { found: Vec<StateId> },
    SinkHasOutgoing { state: StateId },
    NotLevelled { edge: usize, source: StateId, target: StateId },
    NoIncoming { state: StateId },
    NoOutgoing { state: StateId },
    DuplicateSymbol { state: StateId, symbol: Symbol },
    SymbolOutOfAlphabet { edge: usize, symbol: Symbol },
    PartialProbabilities,
    ProbabilityOutOfRange { edge: usize, prob: f64 },
    ProbabilitySum { state: StateId, sum: f64 },
}

impl Violation {
    pub fn kind(&self) -> ViolationKind {
        use Violation::*;
        match self {
            LevelOutOfRange { .. } => ViolationKind::Shape,
            RootCount { .. } | RootHasIncoming { .. } | SinkCount { .. } | SinkHasOutgoing { .. } => {
                ViolationKind::RootSink
            }
            NotLevelled { .. } => ViolationKind::Levelled,
            NoIncoming { .. } | NoOutgoing { .. } => ViolationKind::Connectivity,
            DuplicateSymbol { .. } | SymbolOutOfAlphabet { .. } => ViolationKind::Symbols,
            PartialProbabilities | ProbabilityOutOfRange { .. } | ProbabilitySum { .. } => {
                ViolationKind::Probabilities
            }
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            LevelOutOfRange { state, level } => write!(f, "state {state} has level {level} beyond p"),
            RootCount { found } => write!(f, "expected one level-0 state, found {found:?}"),
            RootHasIncoming { state } => write!(f, "root {state} has incoming edges"),
            SinkCount { found } => write!(f, "expected one level-p state, found {found:?}"),
            SinkHasOutgoing { state } => write!(f, "sink {state} has outgoing edges"),
            NotLevelled { edge, source, target } => {
                write!(f, "edge {edge} ({source} -> {target}) does not join adjacent levels")
            }
            NoIncoming { state } => write!(f, "state {state} has no incoming edge"),
            NoOutgoing { state } => write!(f, "state {state} has no outgoing edge"),
            DuplicateSymbol { state, symbol } => {
                write!(f, "state {state} has several out-edges with symbol {symbol}")
            }
            SymbolOutOfAlphabet { edge, symbol } => {
                write!(f, "edge {edge} carries symbol {symbol} outside its alphabet")
            }
            PartialProbabilities => write!(f, "only some edges carry probabilities"),
            ProbabilityOutOfRange { edge, prob } => write!(f, "edge {edge} has probability {prob}"),
            ProbabilitySum { state, sum } => {
                write!(f, "out-edge probabilities of state {state} sum to {sum}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn kinds(&self) -> std::collections::BTreeSet<ViolationKind> {
        self.violations.iter().map(Violation::kind).collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

fn validate(a: &Apfa) -> ValidationReport {
    let p = a.num_levels();
    let mut v = Vec::new();

    for s in a.states() {
        if a.level(s) > p {
            v.push(Violation::LevelOutOfRange { state: s, level: a.level(s) });
        }
    }
    let roots = a.states_at_level(0);
    if roots.len() != 1 {
        v.push(Violation::RootCount { found: roots.clone() });
    }
    for &r in &roots {
        if !a.in_edges(r).is_empty() {
            v.push(Violation::RootHasIncoming { state: r });
        }
    }
    let sinks = a.states_at_level(p);
    if sinks.len() != 1 {
        v.push(Violation::SinkCount { found: sinks.clone() });
    }
    for &s in &sinks {
        if a.out_degree(s) > 0 {
            v.push(Violation::SinkHasOutgoing { state: s });
        }
    }
    for (i, e) in a.edges.iter().enumerate() {
        if a.level(e.target) != a.level(e.source) + 1 {
            v.push(Violation::NotLevelled {
                edge: i,
                source: e.source,
                target: e.target,
            });
        }
        let l = a.level(e.source);
        if e.symbol == 0 || l >= p || e.symbol > a.alphabet_size(l + 1) {
            v.push(Violation::SymbolOutOfAlphabet { edge: i, symbol: e.symbol });
        }
    }
    for s in a.states() {
        let l = a.level(s);
        if l > 0 && l < p {
            if a.in_edges(s).is_empty() {
                v.push(Violation::NoIncoming { state: s });
            }
            if a.out_degree(s) == 0 {
                v.push(Violation::NoOutgoing { state: s });
            }
        }
        let out = a.out_edges(s);
        for w in out.windows(2) {
            let sym = a.edges[w[0]].symbol;
            if sym == a.edges[w[1]].symbol {
                v.push(Violation::DuplicateSymbol { state: s, symbol: sym });
            }
        }
    }

    let with_prob = a.edges.iter().filter(|e| e.prob.is_some()).count();
    if with_prob > 0 && with_prob < a.edges.len() {
        v.push(Violation::PartialProbabilities);
    } else if with_prob > 0 {
        for (i, e) in a.edges.iter().enumerate() {
            let pr = e.prob.unwrap();
            if !(0.0..=1.0).contains(&pr) {
                v.push(Violation::ProbabilityOutOfRange { edge: i, prob: pr });
            }
        }
        for s in a.states() {
            if a.out_degree(s) == 0 {
                continue;
            }
            let sum: f64 = a.out_edges(s).iter().map(|&i| a.edges[i].prob.unwrap()).sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                v.push(Violation::ProbabilitySum { state: s, sum });
            }
        }
    }
    ValidationReport { violations: v }
}

// ----------------------------------------------------------------------------
// construction of standard models and completion

/// Number of non-sink states in a complete tree whose root sits at `level`
/// (levels `level..p-1`), for `level` in `1..=p`.
pub(crate) fn complete_tree_states(alphabets: &[u32], level: usize) -> Option<u128> {
    let mut total = 0u128;
    let mut width = 1u128;
    for &k in &alphabets[level.min(alphabets.len())..] {
        total = total.checked_add(width)?;
        width = width.checked_mul(k as u128)?;
    }
    Some(total)
}

fn guard(required: Option<u128>, limit: usize) -> Result<()> {
    match required {
        Some(r) if r <= limit as u128 => Ok(()),
        Some(r) => Err(Error::SizeGuard {
            required: r.to_string(),
            limit,
        }),
        None => Err(Error::SizeGuard {
            required: "more than 2^128".into(),
            limit,
        }),
    }
}

/// The unrestricted model: one state per observable prefix.
pub fn maximal_apfa(alphabets: &[u32], max_states: usize) -> Result<Apfa> {
    if alphabets.is_empty() || alphabets.contains(&0) {
        return Err(Error::BadAlphabets);
    }
    let p = alphabets.len();
    let required = complete_tree_states(alphabets, 0).and_then(|n| n.checked_add(1));
    guard(required, max_states)?;

    let mut levels = vec![0usize];
    let mut edges = Vec::new();
    let mut frontier = vec![StateId(1)];
    for l in 1..=p {
        let k = alphabets[l - 1];
        let mut next = Vec::new();
        if l == p {
            levels.push(p);
            let sink = StateId::from_index(levels.len() - 1);
            for &s in &frontier {
                for sym in 1..=k {
                    edges.push(Edge::new(s, sink, sym));
                }
            }
        } else {
            for &s in &frontier {
                for sym in 1..=k {
                    levels.push(l);
                    let t = StateId::from_index(levels.len() - 1);
                    edges.push(Edge::new(s, t, sym));
                    next.push(t);
                }
            }
        }
        frontier = next;
    }
    Apfa::from_parts(alphabets.to_vec(), levels, edges)
}

/// Complete independence: a single state per level.
pub fn minimal_apfa(alphabets: &[u32]) -> Result<Apfa> {
    if alphabets.is_empty() || alphabets.contains(&0) {
        return Err(Error::BadAlphabets);
    }
    let p = alphabets.len();
    let levels: Vec<usize> = (0..=p).collect();
    let mut edges = Vec::new();
    for (l, &k) in alphabets.iter().enumerate() {
        for sym in 1..=k {
            edges.push(Edge::new(StateId::from_index(l), StateId::from_index(l + 1), sym));
        }
    }
    Apfa::from_parts(alphabets.to_vec(), levels, edges)
}

impl Apfa {
    /// Number of states completion would add.
    pub fn completion_size(&self) -> Option<u128> {
        let p = self.num_levels();
        let mut total = 0u128;
        for s in self.states() {
            let l = self.level(s);
            if l + 1 >= p {
                continue;
            }
            let missing = self.alphabet_size(l + 1) as usize - self.out_degree(s).min(self.alphabet_size(l + 1) as usize);
            let per = complete_tree_states(&self.alphabets, l + 1)?;
            total = total.checked_add(per.checked_mul(missing as u128)?)?;
        }
        Some(total)
    }

    /// The completion: every missing out-edge is added with count 0 and
    /// probability 0, and each new state roots a complete tree whose last
    /// level is contracted onto the sink. Added edges are flagged synthetic.
    pub fn complete(&self, max_new_states: usize) -> Result<Apfa> {
        Ok(self.complete_with_map(max_new_states)?.0)
    }

    /// As [`Apfa::complete`], also returning where each original state went.
    pub fn complete_with_map(&self, max_new_states: usize) -> Result<(Apfa, Vec<StateId>)> {
        guard(self.completion_size(), max_new_states)?;
        let p = self.num_levels();
        let probs = self.has_probabilities() && !self.edges.is_empty();
        let counts = self.has_counts() && !self.edges.is_empty();
        let sink = self.sink();
        let mut levels = self.levels.clone();
        let mut edges = self.edges.clone();

        let synthetic = |s: StateId, t: StateId, sym: Symbol, prob: f64| Edge {
            source: s,
            target: t,
            symbol: sym,
            count: counts.then_some(0),
            prob: probs.then_some(prob),
            synthetic: true,
        };

        // (state, level) pairs still to fill; fresh states take uniform probabilities
        let mut stack: Vec<(StateId, bool)> = self.states().map(|s| (s, false)).collect();
        stack.reverse();
        while let Some((s, fresh)) = stack.pop() {
            let l = levels[s.index()];
            if l >= p {
                continue;
            }
            let k = self.alphabets[l];
            let present: Vec<Symbol> = if fresh {
                Vec::new()
            } else {
                self.out_edges(s).iter().map(|&e| self.edges[e].symbol).collect()
            };
            let prob = if fresh { 1.0 / k as f64 } else { 0.0 };
            for sym in 1..=k {
                if present.contains(&sym) {
                    continue;
                }
                let t = if l + 1 == p {
                    sink
                } else {
                    levels.push(l + 1);
                    let t = StateId::from_index(levels.len() - 1);
                    stack.push((t, true));
                    t
                };
                edges.push(synthetic(s, t, sym, prob));
            }
        }
        let grown = Apfa::from_parts(self.alphabets.clone(), levels, edges)?;
        let (done, map) = grown.level_major();
        Ok((done, map[..self.num_states()].to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::ingest::sample_apfa;
    use approx::assert_abs_diff_eq;

    fn total_probability(a: &Apfa) -> f64 {
        let mut sum = 0.0;
        a.for_each_outcome(|x, _| sum += a.probability_of(x).unwrap());
        sum
    }

    #[test]
    fn reference_model_is_valid() {
        assert!(fixtures::gapped_chain().validate().is_empty());
        assert!(fixtures::pooled_middle().validate().is_empty());
    }

    #[test]
    fn self_loop_breaks_levels_and_ends() {
        let a = Apfa::from_parts(vec![1], vec![0], vec![Edge::new(StateId(1), StateId(1), 1)]).unwrap();
        let kinds = a.validate().kinds();
        assert!(kinds.contains(&ViolationKind::Levelled));
        assert!(kinds.contains(&ViolationKind::RootSink));
        assert!(matches!(a.ensure_valid(), Err(Error::Invalid(_))));
    }

    #[test]
    fn perturbed_probability_is_reported_at_its_state() {
        let (alphabets, levels, mut edges) = fixtures::gapped_chain().into_parts();
        edges[2].prob = Some(0.35);
        let a = Apfa::from_parts(alphabets, levels, edges).unwrap();
        let report = a.validate();
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(report.violations[0], Violation::ProbabilitySum { state: StateId(2), .. }));
    }

    #[test]
    fn duplicate_symbols_and_dangling_states() {
        let s = StateId;
        let edges = vec![
            Edge::new(s(1), s(2), 1),
            Edge::new(s(1), s(3), 1),
            Edge::new(s(2), s(4), 1),
        ];
        let a = Apfa::from_parts(vec![2, 2], vec![0, 1, 1, 2], edges).unwrap();
        let v = a.validate().violations;
        assert!(v.contains(&Violation::DuplicateSymbol { state: s(1), symbol: 1 }));
        assert!(v.contains(&Violation::NoOutgoing { state: s(3) }));
    }

    #[test]
    fn completeness() {
        assert!(fixtures::seventy_full_sample().apfa().is_complete());
        assert!(!fixtures::seventy_gapped_sample().apfa().is_complete());
        assert!(minimal_apfa(&[3, 1, 4]).unwrap().is_complete());
        assert!(!fixtures::gapped_chain().is_complete());
    }

    #[test]
    fn completion_restores_the_full_topology() {
        let gapped = fixtures::seventy_gapped_sample();
        let plus = gapped.apfa().complete(100).unwrap();
        assert!(plus.validate().is_empty());
        assert!(plus.is_complete());
        assert!(isomorphism(&plus.topology(), &fixtures::seventy_full_sample().apfa().topology()).is_some());
        let added: Vec<&Edge> = plus.edges().iter().filter(|e| e.synthetic).collect();
        assert_eq!(added.len(), 3);
        assert!(added.iter().all(|e| e.count == Some(0)));
        let again = plus.complete(0).unwrap();
        assert_eq!(again, plus);
    }

    #[test]
    fn completion_of_a_single_row() {
        let d = Dataset::from_rows(&[vec![1, 2, 1]]).unwrap().with_alphabets(vec![2, 2, 2]).unwrap();
        let plus = sample_apfa(&d).unwrap().apfa().complete(100).unwrap();
        assert_eq!(plus.num_states(), 8);
        let per_level: Vec<usize> = (0..=3).map(|l| plus.states_at_level(l).len()).collect();
        assert_eq!(per_level, vec![1, 2, 4, 1]);
        let mut outcomes = 0;
        plus.for_each_outcome(|_, _| outcomes += 1);
        assert_eq!(outcomes, 8);
    }

    #[test]
    fn completion_probabilities_stay_normalized() {
        let plus = fixtures::gapped_chain().complete(100).unwrap();
        assert!(plus.validate().is_empty());
        assert_abs_diff_eq!(total_probability(&plus), 1.0, epsilon = 1e-12);
        assert_eq!(plus.probability_of(&[1, 2, 2, 1]).unwrap(), 0.0);
    }

    #[test]
    fn size_guard() {
        assert!(matches!(fixtures::seventy_gapped_sample().apfa().complete(0), Err(Error::SizeGuard { .. })));
        assert!(matches!(maximal_apfa(&[2; 100], 1 << 20), Err(Error::SizeGuard { .. })));
    }

    #[test]
    fn maximal_and_minimal() {
        let max = maximal_apfa(&[2, 2, 2], 100).unwrap();
        let sizes: Vec<usize> = (0..=3).map(|l| max.states_at_level(l).len()).collect();
        assert_eq!(sizes, vec![1, 2, 4, 1]);
        let min = minimal_apfa(&[2, 2, 2]).unwrap();
        assert_eq!(min.num_states(), 4);
        assert_eq!(crate::estimation::dimension(&min), 3);
        for a in [&max, &min] {
            assert!(a.validate().is_empty() && a.is_complete());
        }
        let one = maximal_apfa(&[5], 10).unwrap();
        assert_eq!(one, minimal_apfa(&[5]).unwrap());
        assert_eq!(one.num_edges(), 5);
        assert!(matches!(minimal_apfa(&[2, 0]), Err(Error::BadAlphabets)));
    }

    #[test]
    fn paths_and_probabilities() {
        let a = fixtures::gapped_chain();
        assert!(a.path_for(&[2, 2, 2, 1]).is_none());
        assert!(a.path_for(&[2, 2]).is_none());
        assert_eq!(a.state_after(&[1, 2]), Some(StateId(5)));
        assert_eq!(a.state_after(&[2, 2]), Some(StateId(5)));

        let c = fixtures::seventy_full_sample();
        let path = c.apfa().path_for(&[2, 2, 1]).unwrap();
        let counts: Vec<u64> = path.iter().map(|&e| c.edge_count(e)).collect();
        assert_eq!(counts, vec![34, 2, 1]);

        let w = fixtures::pooled_middle();
        assert_abs_diff_eq!(w.probability_of(&[2, 2, 2, 2]).unwrap(), 0.16 * 0.47 * 0.66 * 0.67, epsilon = 1e-15);
        assert_abs_diff_eq!(total_probability(&w), 1.0, epsilon = 1e-12);
        assert!(matches!(w.topology().probability_of(&[1, 1, 1, 1]), Err(Error::ProbabilitiesUnset)));
    }

    #[test]
    fn simulation_is_seeded_and_follows_the_model() {
        let a = fixtures::gapped_chain();
        let d = a.simulate(20_000, 3).unwrap();
        assert_eq!(d, a.simulate(20_000, 3).unwrap());
        assert_ne!(d, a.simulate(20_000, 4).unwrap());
        assert!(d.rows().all(|x| a.path_for(x).is_some()));
        let first = d.rows().filter(|x| x[0] == 1).count() as f64 / d.len() as f64;
        assert!((first - 0.4).abs() < 0.015);
        assert!(matches!(a.topology().simulate(1, 0), Err(Error::ProbabilitiesUnset)));
    }

    #[test]
    fn isomorphism_ignores_numbering() {
        let a = fixtures::markov2();
        let mut order: Vec<StateId> = a.states().collect();
        order.swap(1, 2);
        order.swap(4, 6);
        let (b, _) = a.relabel(&order);
        assert_ne!(a, b);
        assert!(isomorphism(&a, &b).is_some());
        assert_eq!(a.canonical(), b.canonical());
        assert!(isomorphism(&a, &fixtures::vlmc()).is_none());
    }
}

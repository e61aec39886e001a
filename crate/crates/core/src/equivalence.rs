//! Graphical-model structure of an APFA.
//!
//! A level has property Q when its states are exactly the value classes of
//! some coordinate set `A(i)` of the past. When every level has it, the
//! model is a directed graphical model with `pa(i) = A(i-1)`, and the
//! converse constructions build the APFA of a DAG or undirected graph.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::automaton::{Apfa, Edge, StateId, Symbol};
use crate::error::{Error, Result};

/// Most prefixes listed in a context-specific statement.
pub const STATEMENT_PREFIX_CAP: usize = 256;

/// Largest APFA the graph constructions will build.
pub const DEFAULT_MAX_STATES: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatementKind {
    ContextSpecific,
    Marginal,
    Conditional,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Condition {
    None,
    /// Given the values of these variables.
    Given { vars: Vec<usize> },
    /// Given that the past lies in the prefix set of `state`.
    Event {
        state: StateId,
        prefixes: Vec<Vec<Symbol>>,
        /// Size of the full prefix set; `prefixes` is cut at
        /// [`STATEMENT_PREFIX_CAP`].
        total: u128,
    },
}

/// `X_future ⊥ X_past | condition`; variables are numbered from 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndependenceStatement {
    pub kind: StatementKind,
    /// The level separating past and future.
    pub level: usize,
    pub future: Vec<usize>,
    pub past: Vec<usize>,
    pub condition: Condition,
}

fn vars(v: &[usize]) -> String {
    let names: Vec<String> = v.iter().map(|i| format!("X{i}")).collect();
    if names.len() == 1 {
        names[0].clone()
    } else {
        format!("({})", names.join(","))
    }
}

impl fmt::Display for IndependenceStatement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ⊥ {}", vars(&self.future), vars(&self.past))?;
        match &self.condition {
            Condition::None => Ok(()),
            Condition::Given { vars: given } => write!(f, " | {}", vars(given)),
            Condition::Event { prefixes, total, .. } => {
                let shown: Vec<String> = prefixes
                    .iter()
                    .map(|x| {
                        let s: Vec<String> = x.iter().map(|v| v.to_string()).collect();
                        format!("({})", s.join(","))
                    })
                    .collect();
                let more = if (prefixes.len() as u128) < *total { ",…" } else { "" };
                write!(f, " | {} ∈ {{{}{}}}", vars(&self.past), shown.join(","), more)
            }
        }
    }
}

/// Per-state value of each past coordinate, when it is the same for every
/// prefix reaching the state.
fn constant_coordinates(a: &Apfa) -> Vec<Vec<Option<Symbol>>> {
    let mut known: Vec<Vec<Option<Symbol>>> = vec![Vec::new(); a.num_states()];
    let mut order: Vec<StateId> = a.states().collect();
    order.sort_by_key(|&s| a.level(s));
    for s in order {
        let l = a.level(s);
        if l == 0 {
            continue;
        }
        let mut acc: Option<Vec<Option<Symbol>>> = None;
        for &e in a.in_edges(s) {
            let edge = a.edge(e);
            let mut row = known[edge.source.index()].clone();
            row.push(Some(edge.symbol));
            acc = Some(match acc {
                None => row,
                Some(prev) => prev
                    .into_iter()
                    .zip(row)
                    .map(|(x, y)| if x == y { x } else { None })
                    .collect(),
            });
        }
        known[s.index()] = acc.unwrap_or_default();
    }
    known
}

/// Property-Q analysis of one level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub states: usize,
    /// Coordinates fixed within every state of the level; the only
    /// candidate for a maximal `A(i)`.
    pub constant: Vec<usize>,
    /// Whether the constant coordinates tell the states apart.
    pub holds: bool,
}

/// Analysis of levels `1..p-1`.
pub fn level_reports(a: &Apfa) -> Vec<LevelReport> {
    let known = constant_coordinates(a);
    (1..a.num_levels())
        .map(|i| {
            let states = a.states_at_level(i);
            let constant: Vec<usize> = (0..i)
                .filter(|&j| states.iter().all(|s| known[s.index()][j].is_some()))
                .collect();
            let mut seen = HashSet::new();
            let holds = states
                .iter()
                .all(|s| seen.insert(constant.iter().map(|&j| known[s.index()][j]).collect::<Vec<_>>()));
            LevelReport {
                level: i,
                states: states.len(),
                constant: constant.into_iter().map(|j| j + 1).collect(),
                holds,
            }
        })
        .collect()
}

/// Maximal conditioning sets `A(1), …, A(p-1)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyQ {
    pub sets: Vec<Vec<usize>>,
}

impl PropertyQ {
    /// `A(i)`, with `A(0)` and `A(p)` empty.
    pub fn set(&self, i: usize) -> &[usize] {
        if i == 0 || i > self.sets.len() {
            &[]
        } else {
            &self.sets[i - 1]
        }
    }
}

/// The maximal sets `A(i)` if every interior level has property Q.
///
/// A set works at level `i` exactly when each of its coordinates is fixed
/// within every state and the values separate the states. Both conditions
/// are monotone in the set, so the constant coordinates are maximal
/// whenever any set works.
pub fn property_q(a: &Apfa) -> Option<PropertyQ> {
    let reports = level_reports(a);
    reports
        .iter()
        .all(|r| r.holds)
        .then(|| PropertyQ {
            sets: reports.into_iter().map(|r| r.constant).collect(),
        })
}

/// Number of root paths into each state, saturating.
fn path_counts(a: &Apfa) -> Vec<u128> {
    let mut n = vec![0u128; a.num_states()];
    let mut order: Vec<StateId> = a.states().collect();
    order.sort_by_key(|&s| a.level(s));
    n[a.root().index()] = 1;
    for s in order {
        for &e in a.out_edges(s) {
            let t = a.edge(e).target.index();
            n[t] = n[t].saturating_add(n[s.index()]);
        }
    }
    n
}

/// Up to `cap` prefixes reaching `s`, in lexicographic order.
fn prefixes_of(a: &Apfa, s: StateId, cap: usize) -> Vec<Vec<Symbol>> {
    fn walk(a: &Apfa, s: StateId, suffix: &mut Vec<Symbol>, out: &mut Vec<Vec<Symbol>>, cap: usize) {
        if out.len() >= cap {
            return;
        }
        if a.level(s) == 0 {
            out.push(suffix.iter().rev().copied().collect());
            return;
        }
        for &e in a.in_edges(s) {
            let edge = a.edge(e);
            suffix.push(edge.symbol);
            walk(a, edge.source, suffix, out, cap);
            suffix.pop();
        }
    }
    let mut out = Vec::new();
    walk(a, s, &mut Vec::new(), &mut out, cap);
    out.sort();
    out
}

/// Independence statements read off the topology: a marginal statement for
/// every interior level with one state, a context-specific statement for
/// every other state reached by several prefixes, and a conditional
/// statement for every property-Q level whose conditioning set leaves part
/// of the past out.
pub fn extract_statements(a: &Apfa) -> Vec<IndependenceStatement> {
    let p = a.num_levels();
    let counts = path_counts(a);
    let reports = level_reports(a);
    let mut out = Vec::new();
    for r in &reports {
        let i = r.level;
        let future: Vec<usize> = (i + 1..=p).collect();
        let past: Vec<usize> = (1..=i).collect();
        if r.states == 1 {
            out.push(IndependenceStatement {
                kind: StatementKind::Marginal,
                level: i,
                future,
                past,
                condition: Condition::None,
            });
            continue;
        }
        for s in a.states_at_level(i) {
            if counts[s.index()] > 1 {
                out.push(IndependenceStatement {
                    kind: StatementKind::ContextSpecific,
                    level: i,
                    future: future.clone(),
                    past: past.clone(),
                    condition: Condition::Event {
                        state: s,
                        prefixes: prefixes_of(a, s, STATEMENT_PREFIX_CAP),
                        total: counts[s.index()],
                    },
                });
            }
        }
        if r.holds && !r.constant.is_empty() && r.constant.len() < i {
            let b: Vec<usize> = past.iter().copied().filter(|j| !r.constant.contains(j)).collect();
            out.push(IndependenceStatement {
                kind: StatementKind::Conditional,
                level: i,
                future,
                past: b,
                condition: Condition::Given {
                    vars: r.constant.clone(),
                },
            });
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    kind: String,
    p: usize,
    edges: Vec<[usize; 2]>,
}

/// DAG on nodes `1..=p` whose edges point from lower to higher index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct Dag {
    parents: Vec<BTreeSet<usize>>,
}

/// Undirected graph on nodes `1..=p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct UndirectedGraph {
    adjacent: Vec<BTreeSet<usize>>,
}

fn check_edge(p: usize, i: usize, j: usize) -> Result<()> {
    if i == 0 || j == 0 || i > p || j > p || i == j {
        return Err(Error::Other(format!("edge ({i}, {j}) is not between distinct nodes of 1..={p}")));
    }
    Ok(())
}

impl Dag {
    pub fn empty(p: usize) -> Self {
        Dag {
            parents: vec![BTreeSet::new(); p],
        }
    }

    /// Builds a DAG from `(from, to)` pairs with `from < to`.
    pub fn from_edges(p: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Dag::empty(p);
        for &(i, j) in edges {
            check_edge(p, i, j)?;
            if i > j {
                return Err(Error::Other(format!("edge {i} -> {j} runs against the variable order")));
            }
            g.parents[j - 1].insert(i);
        }
        Ok(g)
    }

    pub fn from_parents(parents: Vec<BTreeSet<usize>>) -> Result<Self> {
        let p = parents.len();
        let edges: Vec<(usize, usize)> = parents
            .iter()
            .enumerate()
            .flat_map(|(j, ps)| ps.iter().map(move |&i| (i, j + 1)))
            .collect();
        Dag::from_edges(p, &edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self, i: usize) -> &BTreeSet<usize> {
        &self.parents[i - 1]
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (j, ps) in self.parents.iter().enumerate() {
            out.extend(ps.iter().map(|&i| (i, j + 1)));
        }
        out.sort_unstable();
        out
    }

    /// The undirected graph with the same adjacencies.
    pub fn skeleton(&self) -> UndirectedGraph {
        UndirectedGraph::from_edges(self.num_nodes(), &self.edges()).expect("dag edges are valid")
    }

    /// Checks `pa(i) ⊆ pa(i-1) ∪ {i-1}` for `i = 2..=p`.
    pub fn check_parent_condition(&self) -> Result<()> {
        for i in 2..=self.num_nodes() {
            let allowed = self.parents(i - 1);
            for &j in self.parents(i) {
                if j != i - 1 && !allowed.contains(&j) {
                    return Err(Error::GraphCondition {
                        node: i,
                        detail: format!("parent {j} is neither {} nor a parent of {}", i - 1, i - 1),
                    });
                }
            }
        }
        Ok(())
    }
}

impl UndirectedGraph {
    pub fn empty(p: usize) -> Self {
        UndirectedGraph {
            adjacent: vec![BTreeSet::new(); p],
        }
    }

    pub fn from_edges(p: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = UndirectedGraph::empty(p);
        for &(i, j) in edges {
            check_edge(p, i, j)?;
            g.adjacent[i - 1].insert(j);
            g.adjacent[j - 1].insert(i);
        }
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacent.len()
    }

    pub fn adjacent(&self, i: usize) -> &BTreeSet<usize> {
        &self.adjacent[i - 1]
    }

    /// Each edge once, as `(smaller, larger)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, adj) in self.adjacent.iter().enumerate() {
            out.extend(adj.iter().filter(|&&j| j > i + 1).map(|&j| (i + 1, j)));
        }
        out
    }

    /// Orients every edge from the lower to the higher index.
    pub fn orient(&self) -> Dag {
        Dag::from_edges(self.num_nodes(), &self.edges()).expect("edges are valid")
    }
}

impl TryFrom<RawGraph> for Dag {
    type Error = Error;
    fn try_from(raw: RawGraph) -> Result<Self> {
        if raw.kind != "dag" {
            return Err(Error::Other(format!("expected kind \"dag\", found \"{}\"", raw.kind)));
        }
        let edges: Vec<(usize, usize)> = raw.edges.iter().map(|e| (e[0], e[1])).collect();
        Dag::from_edges(raw.p, &edges)
    }
}

impl From<Dag> for RawGraph {
    fn from(g: Dag) -> Self {
        RawGraph {
            kind: "dag".into(),
            p: g.num_nodes(),
            edges: g.edges().into_iter().map(|(i, j)| [i, j]).collect(),
        }
    }
}

impl TryFrom<RawGraph> for UndirectedGraph {
    type Error = Error;
    fn try_from(raw: RawGraph) -> Result<Self> {
        if raw.kind != "ug" {
            return Err(Error::Other(format!("expected kind \"ug\", found \"{}\"", raw.kind)));
        }
        let edges: Vec<(usize, usize)> = raw.edges.iter().map(|e| (e[0], e[1])).collect();
        UndirectedGraph::from_edges(raw.p, &edges)
    }
}

impl From<UndirectedGraph> for RawGraph {
    fn from(g: UndirectedGraph) -> Self {
        RawGraph {
            kind: "ug".into(),
            p: g.num_nodes(),
            edges: g.edges().into_iter().map(|(i, j)| [i, j]).collect(),
        }
    }
}

/// The DAG with `pa(i) = A(i-1)`.
pub fn apfa_to_dag(a: &Apfa) -> Result<Dag> {
    let q = property_q(a).ok_or_else(|| {
        let level = level_reports(a).into_iter().find(|r| !r.holds).map_or(0, |r| r.level);
        Error::NoPropertyQ(level)
    })?;
    let p = a.num_levels();
    let parents = (1..=p).map(|i| q.set(i - 1).iter().copied().collect()).collect();
    Dag::from_parents(parents)
}

/// The APFA whose level-`i` states are the values of `x_{pa(i+1)}`.
pub fn dag_to_apfa(g: &Dag, alphabets: &[u32]) -> Result<Apfa> {
    dag_to_apfa_limited(g, alphabets, DEFAULT_MAX_STATES)
}

pub fn dag_to_apfa_limited(g: &Dag, alphabets: &[u32], max_states: usize) -> Result<Apfa> {
    let p = g.num_nodes();
    if alphabets.len() != p || p == 0 || alphabets.contains(&0) {
        return Err(Error::BadAlphabets);
    }
    g.check_parent_condition()?;
    // memory after reading level i: the parents of node i+1
    let memory: Vec<Vec<usize>> = (0..=p)
        .map(|i| if i < p { g.parents(i + 1).iter().copied().collect() } else { Vec::new() })
        .collect();
    let memory = |i: usize| memory[i].as_slice();

    let mut total: usize = 1;
    let mut sizes = Vec::with_capacity(p + 1);
    for i in 0..=p {
        let size = memory(i)
            .iter()
            .try_fold(1usize, |acc, &j| acc.checked_mul(alphabets[j - 1] as usize));
        let size = size.filter(|&s| s <= max_states).ok_or(Error::SizeGuard {
            required: format!("more than {max_states} at level {i}"),
            limit: max_states,
        })?;
        total = total.saturating_add(size);
        sizes.push(size);
    }
    if total > max_states {
        return Err(Error::SizeGuard {
            required: total.to_string(),
            limit: max_states,
        });
    }

    // state ids: level offsets plus the mixed-radix index of the memory values
    let mut offset = vec![0usize; p + 2];
    for i in 0..=p {
        offset[i + 1] = offset[i] + sizes[i];
    }
    let index_of = |i: usize, values: &HashMap<usize, Symbol>| -> usize {
        memory(i)
            .iter()
            .fold(0usize, |acc, &j| acc * alphabets[j - 1] as usize + (values[&j] - 1) as usize)
    };
    let decode = |i: usize, mut k: usize| -> HashMap<usize, Symbol> {
        let mut values = HashMap::new();
        for &j in memory(i).iter().rev() {
            let r = alphabets[j - 1] as usize;
            values.insert(j, (k % r) as Symbol + 1);
            k /= r;
        }
        values
    };

    let mut levels = Vec::with_capacity(total);
    for (i, &size) in sizes.iter().enumerate() {
        levels.extend(std::iter::repeat_n(i, size));
    }
    let mut edges = Vec::new();
    for i in 0..p {
        for k in 0..sizes[i] {
            let mut values = decode(i, k);
            for sym in 1..=alphabets[i] {
                values.insert(i + 1, sym);
                let t = offset[i + 1] + index_of(i + 1, &values);
                edges.push(Edge::new(
                    StateId::from_index(offset[i] + k),
                    StateId::from_index(t),
                    sym,
                ));
            }
        }
    }
    Apfa::from_parts(alphabets.to_vec(), levels, edges)
}

/// Orients `u` by the variable order and builds the APFA of the result.
pub fn ug_to_apfa(u: &UndirectedGraph, alphabets: &[u32]) -> Result<Apfa> {
    dag_to_apfa(&u.orient(), alphabets)
}

/// Outcome of comparing a joint distribution with a DAG factorization.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionCheck {
    /// Largest `|P(x) - Π P(x_i | x_pa(i))|` over the sample space.
    pub factorization_error: f64,
    /// Parents whose removal leaves the factorization intact.
    pub redundant_parents: Vec<(usize, usize)>,
}

impl DistributionCheck {
    /// The distribution satisfies the independences of the DAG and no others
    /// that the DAG could drop.
    pub fn exact(&self, tol: f64) -> bool {
        self.factorization_error <= tol && self.redundant_parents.is_empty()
    }
}

/// Joint probabilities of every outcome of a model with probabilities.
fn joint(a: &Apfa) -> Result<HashMap<Vec<Symbol>, f64>> {
    if !a.has_probabilities() {
        return Err(Error::ProbabilitiesUnset);
    }
    let mut out = HashMap::new();
    a.for_each_outcome(|x, path| {
        out.insert(x.to_vec(), path.iter().map(|&e| a.edge(e).prob.unwrap()).product());
    });
    Ok(out)
}

fn marginal(joint: &HashMap<Vec<Symbol>, f64>, vars: &[usize]) -> HashMap<Vec<Symbol>, f64> {
    let mut out = HashMap::new();
    for (x, &pr) in joint {
        *out.entry(vars.iter().map(|&j| x[j - 1]).collect()).or_insert(0.0) += pr;
    }
    out
}

fn factorization_error(joint: &HashMap<Vec<Symbol>, f64>, parents: &[Vec<usize>]) -> f64 {
    let mut factors = Vec::new();
    for (i, pa) in parents.iter().enumerate() {
        let mut with: Vec<usize> = pa.clone();
        with.push(i + 1);
        factors.push((marginal(joint, &with), marginal(joint, pa), with, pa.clone()));
    }
    let mut worst: f64 = 0.0;
    for (x, &pr) in joint {
        let mut prod = 1.0;
        for (num, den, with, pa) in &factors {
            let kn: Vec<Symbol> = with.iter().map(|&j| x[j - 1]).collect();
            let kd: Vec<Symbol> = pa.iter().map(|&j| x[j - 1]).collect();
            let d = den[&kd];
            prod *= if d > 0.0 { num[&kn] / d } else { 0.0 };
        }
        worst = worst.max((pr - prod).abs());
    }
    worst
}

/// Exhaustively checks that the distribution of `a` factorizes over `g` and
/// that no single parent can be dropped. Exponential in `p`.
pub fn check_distribution(a: &Apfa, g: &Dag, tol: f64) -> Result<DistributionCheck> {
    if g.num_nodes() != a.num_levels() {
        return Err(Error::Incompatible(format!(
            "graph has {} nodes, model has {} levels",
            g.num_nodes(),
            a.num_levels()
        )));
    }
    let joint = joint(a)?;
    let parents: Vec<Vec<usize>> = (1..=g.num_nodes()).map(|i| g.parents(i).iter().copied().collect()).collect();
    let error = factorization_error(&joint, &parents);
    let mut redundant = Vec::new();
    for (i, pa) in parents.iter().enumerate() {
        for &j in pa {
            let mut fewer = parents.clone();
            fewer[i].retain(|&k| k != j);
            if factorization_error(&joint, &fewer) <= tol {
                redundant.push((j, i + 1));
            }
        }
    }
    Ok(DistributionCheck {
        factorization_error: error,
        redundant_parents: redundant,
    })
}

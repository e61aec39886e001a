//! Likelihood-ratio tests for merging states.
//!
//! The deviance between a model and one obtained from it by merging splits
//! into one independence test per fused group: the rows are the group's
//! states, the columns the next variable's symbols, the cells the out-edge
//! counts.

use serde::{Deserialize, Serialize};

use crate::automaton::{Apfa, StateId};
use crate::error::{Error, Result};
use crate::estimation::fit_mle;
use crate::graph::MergeGraph;
use crate::ingest::CountedApfa;
use crate::merging::{submodel_partition, NestingMode};

/// `G²` statistic and degrees of freedom of the independence test on an
/// `r x c` table. Rows and columns that are entirely zero do not count
/// towards the degrees of freedom.
pub fn g2_independence<R: AsRef<[u64]>>(table: &[R]) -> Result<(f64, u64)> {
    let ncol = table.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
    let mut col = vec![0u64; ncol];
    let mut rows = Vec::with_capacity(table.len());
    for r in table {
        let r = r.as_ref();
        for (j, &x) in r.iter().enumerate() {
            col[j] += x;
        }
        rows.push(r.iter().sum::<u64>());
    }
    let n: u64 = rows.iter().sum();
    if n == 0 {
        return Err(Error::EmptyTable);
    }
    let nf = n as f64;
    let mut g2 = 0.0;
    for (r, &ri) in table.iter().zip(&rows) {
        for (j, &x) in r.as_ref().iter().enumerate() {
            if x > 0 {
                let x = x as f64;
                g2 += x * (x * nf / (ri as f64 * col[j] as f64)).ln();
            }
        }
    }
    let nz_rows = rows.iter().filter(|&&r| r > 0).count() as u64;
    let nz_cols = col.iter().filter(|&&c| c > 0).count() as u64;
    Ok(((2.0 * g2).max(0.0), (nz_rows - 1) * (nz_cols - 1)))
}

/// Upper-tail probability of a `χ²(df)` variable beyond `g2`; `None` for
/// zero degrees of freedom.
pub fn chi2_upper_tail(g2: f64, df: u64) -> Option<f64> {
    if df == 0 {
        return None;
    }
    if g2 <= 0.0 {
        return Some(1.0);
    }
    Some(statrs::function::gamma::gamma_ur(df as f64 / 2.0, g2 / 2.0))
}

/// Out-edge counts of a set of same-level states.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSymbolTable {
    pub level: usize,
    pub states: Vec<StateId>,
    /// `cells[r][j]` counts symbol `j + 1` out of `states[r]`.
    pub cells: Vec<Vec<u64>>,
}

impl NodeSymbolTable {
    pub fn row_totals(&self) -> Vec<u64> {
        self.cells.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn g2(&self) -> (f64, u64) {
        g2_independence(&self.cells).unwrap_or((0.0, 0))
    }
}

pub fn node_symbol_table(c: &CountedApfa, group: &[StateId]) -> Result<NodeSymbolTable> {
    let a = c.apfa();
    check_group(a, group)?;
    Ok(NodeSymbolTable {
        level: a.level(group[0]),
        states: group.to_vec(),
        cells: group.iter().map(|&s| c.symbol_counts(s)).collect(),
    })
}

fn check_group(a: &Apfa, group: &[StateId]) -> Result<()> {
    if group.is_empty() {
        return Err(Error::BadStateSet(vec![]));
    }
    for &s in group {
        if !a.contains(s) {
            return Err(Error::NoSuchState(s));
        }
    }
    let l = a.level(group[0]);
    if group.iter().any(|&s| a.level(s) != l) {
        return Err(Error::MixedLevels(group.to_vec()));
    }
    if l >= a.num_levels() {
        return Err(Error::BadStateSet(group.to_vec()));
    }
    Ok(())
}

/// Independence test on the node-symbol table of `group`. An all-zero table
/// gives `(0, 0)`.
pub fn local_lrt(c: &CountedApfa, group: &[StateId]) -> Result<(f64, u64)> {
    Ok(node_symbol_table(c, group)?.g2())
}

/// One fused group's contribution to a merge test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestPart {
    pub level: usize,
    pub states: Vec<StateId>,
    /// Covariate level, for conditional tests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum: Option<String>,
    pub table: Vec<Vec<u64>>,
    pub g2: f64,
    pub df: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub g2: f64,
    /// Degrees of freedom counting only estimable parameters.
    pub df_adjusted: u64,
    /// Difference in dimension between the completed models; absent when it
    /// overflows.
    pub df_unadjusted: Option<u128>,
    pub p_value: Option<f64>,
    pub parts: Vec<TestPart>,
    /// Fitting problems met while computing the statistic.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TestResult {
    pub(crate) fn from_parts(parts: Vec<TestPart>, df_unadjusted: Option<u128>) -> Self {
        let g2: f64 = parts.iter().map(|p| p.g2).sum();
        let df_adjusted = parts.iter().map(|p| p.df).sum();
        TestResult {
            g2,
            df_adjusted,
            df_unadjusted,
            p_value: chi2_upper_tail(g2, df_adjusted),
            parts,
            warnings: Vec::new(),
        }
    }

    /// Unadjusted p-value, when the unadjusted df fits in a `u64`.
    pub fn p_value_unadjusted(&self) -> Option<f64> {
        self.df_unadjusted
            .and_then(|d| u64::try_from(d).ok())
            .and_then(|d| chi2_upper_tail(self.g2, d))
    }
}

/// Dimension of a complete tree rooted at a fresh level-`level` state:
/// `Π_{k > level} |Σ_k| - 1`.
pub(crate) fn fresh_subtree_dim(alphabets: &[u32], level: usize) -> Option<u128> {
    alphabets[level..]
        .iter()
        .try_fold(1u128, |acc, &k| acc.checked_mul(k as u128))
        .map(|x| x - 1)
}

/// Loss of dimension in the completed model when a group of level-`level`
/// states with the given out-symbol sets is fused into one state.
pub(crate) fn completed_dim_drop(alphabets: &[u32], level: usize, supports: &[Vec<u32>]) -> Option<u128> {
    let c = alphabets[level] as u128;
    let d = fresh_subtree_dim(alphabets, level + 1)?;
    let mut before = 0u128;
    let mut union: Vec<u32> = Vec::new();
    for s in supports {
        let missing = c - s.len() as u128;
        before = before.checked_add((c - 1).checked_add(missing.checked_mul(d)?)?)?;
        union.extend_from_slice(s);
    }
    union.sort_unstable();
    union.dedup();
    let after = (c - 1).checked_add((c - union.len() as u128).checked_mul(d)?)?;
    Some(before - after)
}

/// Statistics of one fused group in a working graph.
#[derive(Clone, Debug, Default)]
pub(crate) struct GroupStats {
    pub g2: f64,
    pub df: u64,
    /// Decrease in `Σ (outdegree - 1)` over the drawn (incomplete) model.
    pub dim_drop: i64,
    pub table: Vec<Vec<u64>>,
}

pub(crate) fn group_stats(g: &MergeGraph<u64>, group: &[u32], keep_table: bool) -> GroupStats {
    let l = g.level(group[0]);
    let ncol = g.alphabets()[l] as usize;
    let mut table = Vec::with_capacity(group.len());
    let mut union = vec![false; ncol];
    let mut before = 0i64;
    for &u in group {
        let mut row = vec![0u64; ncol];
        for e in g.out(u) {
            row[e.symbol as usize - 1] = e.stats;
            union[e.symbol as usize - 1] = true;
        }
        before += g.out(u).len() as i64 - 1;
        table.push(row);
    }
    let after = union.iter().filter(|&&x| x).count() as i64 - 1;
    let (g2, df) = g2_independence(&table).unwrap_or((0.0, 0));
    GroupStats {
        g2,
        df,
        dim_drop: before - after,
        table: if keep_table { table } else { Vec::new() },
    }
}

pub(crate) fn graph_merge_test(g: &MergeGraph<u64>, seeds: &[u32]) -> TestResult {
    let classes = g.classes(seeds);
    let mut unadjusted = Some(0u128);
    let parts = classes
        .iter()
        .map(|class| {
            let level = g.level(class[0]);
            let supports: Vec<Vec<u32>> = class
                .iter()
                .map(|&u| g.out(u).iter().map(|e| e.symbol).collect())
                .collect();
            unadjusted = unadjusted
                .and_then(|acc| acc.checked_add(completed_dim_drop(g.alphabets(), level, &supports)?));
            let st = group_stats(g, class, true);
            TestPart {
                level,
                states: class.iter().map(|&i| StateId::from_index(i as usize)).collect(),
                stratum: None,
                table: st.table,
                g2: st.g2,
                df: st.df,
            }
        })
        .collect();
    TestResult::from_parts(parts, unadjusted)
}

/// Test of the model obtained by merging `s` against `c`, as the sum of the
/// local tests over the merge-list.
pub fn merge_test(c: &CountedApfa, s: &[StateId]) -> Result<TestResult> {
    let g = MergeGraph::from_counted(c);
    let seeds = g.check_seeds(s)?;
    Ok(graph_merge_test(&g, &seeds))
}

/// Adjusted df by the outdegree route: `Σ (outdegree - 1)` over the states
/// produced by the merge. Agrees with the table route when every fused
/// group is a pair of states with observations.
pub fn merged_outdegree_df(c: &CountedApfa, s: &[StateId]) -> Result<u64> {
    let out = crate::merging::merge_apfa(c.apfa(), s)?;
    let merged = &out.model;
    let mut result = 0;
    for group in &out.list.groups {
        let z = out.map[group[0].index()];
        result += merged.out_degree(z).saturating_sub(1) as u64;
    }
    Ok(result)
}

/// Deviance of `c0` against `c`, where `c0` must arise from `c` by merging,
/// split over the blocks of the submodel partition.
pub fn nested_test(c: &CountedApfa, c0: &CountedApfa) -> Result<TestResult> {
    let (a, a0) = (c.apfa(), c0.apfa());
    let part = submodel_partition(a, a0, NestingMode::UpToCompletion)?;
    for k in a0.states() {
        let mut expect = c0.symbol_counts(k);
        for (u, img) in a.states().zip(&part.image) {
            if *img == k {
                for (x, y) in expect.iter_mut().zip(c.symbol_counts(u)) {
                    *x = x.wrapping_sub(y);
                }
            }
        }
        if expect.iter().any(|&x| x != 0) {
            return Err(Error::NotNested(format!(
                "counts out of state {k} are not the sums over its block"
            )));
        }
    }
    let mut unadjusted = Some(0u128);
    let mut parts = Vec::new();
    for block in part.nontrivial_blocks() {
        let level = a.level(block[0]);
        let supports: Vec<Vec<u32>> = block
            .iter()
            .map(|&u| a.out_edges(u).iter().map(|&e| a.edge(e).symbol).collect())
            .collect();
        unadjusted = unadjusted.and_then(|acc| acc.checked_add(completed_dim_drop(a.alphabets(), level, &supports)?));
        let t = node_symbol_table(c, &block)?;
        let (g2, df) = t.g2();
        parts.push(TestPart {
            level,
            states: block,
            stratum: None,
            table: t.cells,
            g2,
            df,
        });
    }
    Ok(TestResult::from_parts(parts, unadjusted))
}

/// `-2 [ℓ̂(c0) - ℓ̂(c)]` from two separate fits.
pub fn deviance(c: &CountedApfa, c0: &CountedApfa) -> f64 {
    -2.0 * (fit_mle(c0).log_likelihood() - fit_mle(c).log_likelihood())
}

//! Models whose transition probabilities depend on a baseline covariate.
//!
//! A categorical covariate gives every group its own set of edge
//! probabilities on a shared topology; a continuous covariate gives every
//! binary state a logistic regression of its transitions on the covariate.

mod logistic;

pub use logistic::{
    fit_binary_logistic, fit_logistic_edges, logistic_loglik, logistic_merge_test, logistic_score, FitStatus,
    LogisticEdgeModel, LogisticFit,
};

use serde::Serialize;

use crate::automaton::{Apfa, StateId};
use crate::dataset::{Covariate, Dataset};
use crate::error::{Error, Result};
use crate::estimation::{multinomial_loglik, Penalty};
use crate::graph::MergeGraph;
use crate::inference::{completed_dim_drop, g2_independence, merge_test, TestPart, TestResult};
use crate::ingest::{sample_apfa, CountedApfa};
use crate::selection::{greedy, PairScore, Score, SelectionConfig, SelectionTrace};

/// Edge counts split by covariate group on one shared topology.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedCounts {
    apfa: Apfa,
    labels: Vec<String>,
    /// `counts[e][z]`.
    counts: Vec<Vec<u64>>,
}

impl GroupedCounts {
    fn from_graph(g: &MergeGraph<Vec<u64>>, labels: Vec<String>) -> Self {
        let (apfa, _) = g.to_apfa(|c| Some(c.iter().sum()));
        let mut counts = Vec::with_capacity(apfa.num_edges());
        let mut order: Vec<u32> = (0..g.len() as u32).filter(|&i| g.is_alive(i)).collect();
        order.sort_by_key(|&i| g.level(i));
        for i in order {
            for e in g.out(i) {
                let mut c = e.stats.clone();
                c.resize(labels.len(), 0);
                counts.push(c);
            }
        }
        GroupedCounts { apfa, labels, counts }
    }

    /// The shared topology, with pooled counts.
    pub fn apfa(&self) -> &Apfa {
        &self.apfa
    }

    pub fn pooled(&self) -> CountedApfa {
        CountedApfa::new(self.apfa.clone()).expect("pooled counts are consistent")
    }

    pub fn num_groups(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `n(e|z)` for every group.
    pub fn edge_counts(&self, e: usize) -> &[u64] {
        &self.counts[e]
    }

    /// Out-edge counts of `s` within group `z`, indexed by `symbol - 1`.
    pub fn symbol_counts(&self, s: StateId, z: usize) -> Vec<u64> {
        let a = &self.apfa;
        let l = a.level(s);
        if l >= a.num_levels() {
            return Vec::new();
        }
        let mut row = vec![0u64; a.alphabet_size(l + 1) as usize];
        for &e in a.out_edges(s) {
            row[a.edge(e).symbol as usize - 1] = self.counts[e][z];
        }
        row
    }

    pub fn node_count(&self, s: StateId, z: usize) -> u64 {
        self.apfa.out_edges(s).iter().map(|&e| self.counts[e][z]).sum()
    }

    /// The model of group `z` alone, with its counts.
    pub fn group(&self, z: usize) -> CountedApfa {
        let counts: Vec<u64> = self.counts.iter().map(|c| c[z]).collect();
        CountedApfa::new(self.apfa.with_counts(&counts)).expect("group counts are consistent")
    }

    /// `π̂(e|z) = n(e|z)/n(v|z)`, uniform where `n(v|z) = 0`.
    pub fn probabilities(&self, z: usize) -> Vec<f64> {
        let a = &self.apfa;
        let mut probs = vec![0.0; a.num_edges()];
        for s in a.states() {
            let out = a.out_edges(s);
            let n: u64 = out.iter().map(|&e| self.counts[e][z]).sum();
            for &e in out {
                probs[e] = if n > 0 {
                    self.counts[e][z] as f64 / n as f64
                } else {
                    1.0 / out.len() as f64
                };
            }
        }
        probs
    }

    /// The group-`z` model with fitted probabilities.
    pub fn fitted(&self, z: usize) -> Apfa {
        let counts: Vec<u64> = self.counts.iter().map(|c| c[z]).collect();
        self.apfa.with_counts(&counts).with_probabilities(&self.probabilities(z))
    }

    pub fn group_log_likelihood(&self, z: usize) -> f64 {
        self.apfa
            .states()
            .map(|s| multinomial_loglik(&self.symbol_counts(s, z)))
            .sum()
    }

    /// Conditional log-likelihood: the sum of the group log-likelihoods.
    pub fn log_likelihood(&self) -> f64 {
        (0..self.num_groups()).map(|z| self.group_log_likelihood(z)).sum()
    }

    /// `Σ_z Σ_v (number of observed out-symbols of v in group z - 1)⁺`.
    pub fn dimension(&self) -> u64 {
        let a = &self.apfa;
        let mut dim = 0;
        for z in 0..self.num_groups() {
            for s in a.states() {
                let k = a.out_edges(s).iter().filter(|&&e| self.counts[e][z] > 0).count() as u64;
                dim += k.saturating_sub(1);
            }
        }
        dim
    }

    pub fn information_criterion(&self, alpha: f64) -> Result<f64> {
        if alpha.is_nan() || alpha < 0.0 {
            return Err(Error::NegativePenalty(alpha));
        }
        Ok(-2.0 * self.log_likelihood() + alpha * self.dimension() as f64)
    }

    fn graph(&self) -> MergeGraph<Vec<u64>> {
        MergeGraph::from_apfa(&self.apfa, |e| self.counts[e].clone())
    }
}

fn categorical(d: &Dataset) -> Result<(&[String], &[usize])> {
    match d.covariate() {
        Some(Covariate::Categorical { levels, groups, .. }) => Ok((levels, groups)),
        Some(_) => Err(Error::CovariateKind {
            expected: "categorical",
        }),
        None => Err(Error::MissingCovariate),
    }
}

/// Splits the counts of `c` by the categorical covariate of `d`, routing
/// each row along its path.
pub fn fit_grouped(c: &CountedApfa, d: &Dataset) -> Result<GroupedCounts> {
    let (labels, groups) = categorical(d)?;
    let a = c.apfa();
    let k = labels.len();
    let mut seen = vec![false; k];
    let mut counts = vec![vec![0u64; k]; a.num_edges()];
    for (row_idx, (row, &z)) in d.rows().zip(groups).enumerate() {
        seen[z] = true;
        let path = a.path_for(row).ok_or(Error::Unroutable { row: row_idx + 1 })?;
        for e in path {
            counts[e][z] += 1;
        }
    }
    if let Some(z) = seen.iter().position(|s| !s) {
        return Err(Error::EmptyGroup(labels[z].clone()));
    }
    for (e, row) in counts.iter().enumerate() {
        if row.iter().sum::<u64>() != c.edge_count(e) {
            return Err(Error::Counts(format!(
                "edge {e}: group counts do not add up to the model's count"
            )));
        }
    }
    Ok(GroupedCounts {
        apfa: a.clone(),
        labels: labels.to_vec(),
        counts,
    })
}

/// Sum over groups of the independence tests on the within-group
/// node-symbol tables of `group`.
pub fn conditional_local_lrt(g: &GroupedCounts, group: &[StateId]) -> Result<(f64, u64)> {
    let a = g.apfa();
    for &s in group {
        if !a.contains(s) {
            return Err(Error::NoSuchState(s));
        }
    }
    if group.is_empty() || group.iter().any(|&s| a.level(s) != a.level(group[0])) {
        return Err(Error::MixedLevels(group.to_vec()));
    }
    if a.level(group[0]) >= a.num_levels() {
        return Err(Error::BadStateSet(group.to_vec()));
    }
    let (mut g2, mut df) = (0.0, 0);
    for z in 0..g.num_groups() {
        let table: Vec<Vec<u64>> = group.iter().map(|&s| g.symbol_counts(s, z)).collect();
        let (x, k) = g2_independence(&table).unwrap_or((0.0, 0));
        g2 += x;
        df += k;
    }
    Ok((g2, df))
}

struct GroupedStats {
    g2: f64,
    df: u64,
    dim_drop: i64,
}

fn grouped_class_stats(
    g: &MergeGraph<Vec<u64>>,
    class: &[u32],
    groups: usize,
    mut part: impl FnMut(usize, Vec<Vec<u64>>, f64, u64),
) -> GroupedStats {
    let l = g.level(class[0]);
    let ncol = g.alphabets()[l] as usize;
    let mut out = GroupedStats {
        g2: 0.0,
        df: 0,
        dim_drop: 0,
    };
    for z in 0..groups {
        let mut union = vec![false; ncol];
        let mut before = 0i64;
        let table: Vec<Vec<u64>> = class
            .iter()
            .map(|&u| {
                let mut row = vec![0u64; ncol];
                for e in g.out(u) {
                    let x = e.stats.get(z).copied().unwrap_or(0);
                    row[e.symbol as usize - 1] = x;
                    if x > 0 {
                        union[e.symbol as usize - 1] = true;
                    }
                }
                before += (row.iter().filter(|&&x| x > 0).count() as i64 - 1).max(0);
                row
            })
            .collect();
        let after = (union.iter().filter(|&&x| x).count() as i64 - 1).max(0);
        out.dim_drop += before - after;
        let (x, k) = g2_independence(&table).unwrap_or((0.0, 0));
        out.g2 += x;
        out.df += k;
        part(z, table, x, k);
    }
    out
}

/// Conditional analogue of [`merge_test`]: one part per fused group and
/// covariate level.
pub fn conditional_merge_test(g: &GroupedCounts, s: &[StateId]) -> Result<TestResult> {
    let graph = g.graph();
    let seeds = graph.check_seeds(s)?;
    let groups = g.num_groups();
    let mut parts = Vec::new();
    let mut unadjusted = Some(0u128);
    for class in graph.classes(&seeds) {
        let level = graph.level(class[0]);
        let states: Vec<StateId> = class.iter().map(|&i| StateId::from_index(i as usize)).collect();
        let supports: Vec<Vec<u32>> = class
            .iter()
            .map(|&u| graph.out(u).iter().map(|e| e.symbol).collect())
            .collect();
        unadjusted = unadjusted.and_then(|acc| {
            acc.checked_add(completed_dim_drop(graph.alphabets(), level, &supports)?.checked_mul(groups as u128)?)
        });
        grouped_class_stats(&graph, &class, groups, |z, table, g2, df| {
            parts.push(TestPart {
                level,
                states: states.clone(),
                stratum: Some(g.labels()[z].clone()),
                table,
                g2,
                df,
            })
        });
    }
    Ok(TestResult::from_parts(parts, unadjusted))
}

/// The fitted model of a conditional selection run.
#[derive(Clone, Debug)]
pub enum ConditionalModel {
    Grouped(GroupedCounts),
    Logistic(LogisticEdgeModel),
}

impl ConditionalModel {
    /// The selected topology with pooled counts.
    pub fn apfa(&self) -> &Apfa {
        match self {
            ConditionalModel::Grouped(g) => g.apfa(),
            ConditionalModel::Logistic(m) => m.apfa(),
        }
    }

    pub fn log_likelihood(&self) -> f64 {
        match self {
            ConditionalModel::Grouped(g) => g.log_likelihood(),
            ConditionalModel::Logistic(m) => m.log_likelihood(),
        }
    }

    pub fn dimension(&self) -> u64 {
        match self {
            ConditionalModel::Grouped(g) => g.dimension(),
            ConditionalModel::Logistic(m) => m.dimension(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConditionalSelection {
    pub model: ConditionalModel,
    pub trace: SelectionTrace,
}

fn penalty_of(config: &SelectionConfig) -> Result<Penalty> {
    config.validate()?;
    match config.score {
        Score::PenalizedLikelihood(p) => Ok(p),
        Score::MaxDifference(_) => Err(Error::Other(
            "conditional selection uses the penalized likelihood score".into(),
        )),
    }
}

/// Greedy selection scored by conditional tests: per-group tables for a
/// categorical covariate, logistic fits for a continuous one.
pub fn conditional_select(d: &Dataset, config: &SelectionConfig) -> Result<ConditionalSelection> {
    let penalty = penalty_of(config)?;
    let sample = sample_apfa(d)?;
    let alpha = penalty.weight(sample.total());
    match d.covariate() {
        None => Err(Error::MissingCovariate),
        Some(Covariate::Categorical { .. }) => {
            let grouped = fit_grouped(&sample, d)?;
            let groups = grouped.num_groups();
            let labels = grouped.labels().to_vec();
            let initial_ic = grouped.information_criterion(alpha)?;
            let mut g = grouped.graph();
            let scorer = move |g: &MergeGraph<Vec<u64>>, v: u32, w: u32| {
                let (mut g2, mut df, mut drop) = (0.0, 0, 0);
                for class in g.classes(&[v, w]) {
                    let st = grouped_class_stats(g, &class, groups, |_, _, _, _| {});
                    g2 += st.g2;
                    df += st.df;
                    drop += st.dim_drop;
                }
                PairScore::penalized(g2, df, drop, alpha)
            };
            let steps = greedy(&mut g, scorer, alpha, initial_ic, config.full_rescore);
            Ok(ConditionalSelection {
                model: ConditionalModel::Grouped(GroupedCounts::from_graph(&g, labels)),
                trace: SelectionTrace {
                    ic_weight: alpha,
                    initial_ic,
                    steps: if config.trace { steps } else { Vec::new() },
                },
            })
        }
        Some(Covariate::Continuous { .. }) => {
            let model = fit_logistic_edges(&sample, d)?;
            let initial_ic = -2.0 * model.log_likelihood() + alpha * model.dimension() as f64;
            let mut g = model.graph();
            let scorer = move |g: &MergeGraph<Vec<f64>>, v: u32, w: u32| {
                let (mut g2, mut df, mut drop) = (0.0, 0, 0);
                for class in g.classes(&[v, w]) {
                    let part = logistic::class_test(g, &class);
                    g2 += part.g2;
                    df += part.df;
                    drop += part.dim_drop;
                }
                PairScore::penalized(g2, df, drop, alpha)
            };
            let steps = greedy(&mut g, scorer, alpha, initial_ic, config.full_rescore);
            Ok(ConditionalSelection {
                model: ConditionalModel::Logistic(LogisticEdgeModel::from_graph(&g)?),
                trace: SelectionTrace {
                    ic_weight: alpha,
                    initial_ic,
                    steps: if config.trace { steps } else { Vec::new() },
                },
            })
        }
    }
}

/// Summary of the covariate-augmented test.
#[derive(Clone, Debug, Serialize)]
pub struct GlobalTest {
    pub result: TestResult,
    /// The sample APFA with the covariate as its first variable.
    #[serde(skip)]
    pub augmented: CountedApfa,
}

/// Tests whether the conditional distribution of the variables is the same
/// in every covariate group: the covariate becomes the first variable and
/// all level-1 states of the resulting sample APFA are merged.
pub fn covariate_global_test(d: &Dataset) -> Result<GlobalTest> {
    let (labels, groups) = categorical(d)?;
    if labels.len() < 2 {
        return Err(Error::SingleCovariateLevel);
    }
    let mut rows = Vec::with_capacity(d.len());
    for (row, &z) in d.rows().zip(groups) {
        let mut r = Vec::with_capacity(row.len() + 1);
        r.push(z as u32 + 1);
        r.extend_from_slice(row);
        rows.push(r);
    }
    let mut alphabets = vec![labels.len() as u32];
    alphabets.extend_from_slice(d.alphabets());
    let augmented = Dataset::from_rows(&rows)?.with_alphabets(alphabets)?;
    let sample = sample_apfa(&augmented)?;
    let level1 = sample.apfa().states_at_level(1);
    if level1.len() < 2 {
        return Err(Error::SingleCovariateLevel);
    }
    let result = merge_test(&sample, &level1)?;
    Ok(GlobalTest {
        result,
        augmented: sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automaton::ids;
    use crate::fixtures;
    use crate::inference::local_lrt;
    use crate::selection::select;
    use approx::assert_abs_diff_eq;

    fn with_groups(d: Dataset, labels: &[&str]) -> Dataset {
        d.with_covariate(Covariate::categorical("z", labels)).unwrap()
    }

    fn doubled(d: &Dataset) -> Dataset {
        let rows: Vec<Vec<u32>> = d.rows().chain(d.rows()).map(|r| r.to_vec()).collect();
        let mut labels = vec!["a"; d.len()];
        labels.extend(vec!["b"; d.len()]);
        with_groups(Dataset::from_rows(&rows).unwrap(), &labels)
    }

    #[test]
    fn duplicated_groups_share_probabilities() {
        let d = doubled(&fixtures::seventy_gapped());
        let c = sample_apfa(&d).unwrap();
        let g = fit_grouped(&c, &d).unwrap();
        assert_eq!(g.probabilities(0), g.probabilities(1));
        assert_abs_diff_eq!(g.log_likelihood(), g.group_log_likelihood(0) * 2.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_covariate_reduces_to_the_plain_test() {
        let base = fixtures::seventy_gapped();
        let d = with_groups(base.clone(), &vec!["x"; base.len()]);
        let c = sample_apfa(&d).unwrap();
        let g = fit_grouped(&c, &d).unwrap();
        for group in [ids(&[2, 3]), ids(&[4, 6]), ids(&[4, 5, 6])] {
            assert_eq!(conditional_local_lrt(&g, &group).unwrap(), local_lrt(&c, &group).unwrap());
        }
        let plain = merge_test(&c, &ids(&[2, 3])).unwrap();
        let cond = conditional_merge_test(&g, &ids(&[2, 3])).unwrap();
        assert_eq!(plain.g2, cond.g2);
        assert_eq!(plain.df_adjusted, cond.df_adjusted);
        assert_eq!(plain.df_unadjusted, cond.df_unadjusted);
        let fitted = crate::estimation::fit_mle(&c);
        assert_eq!(g.log_likelihood(), fitted.log_likelihood());
        assert_eq!(g.dimension(), fitted.dimension());
    }

    #[test]
    fn duplicated_groups_double_the_statistic() {
        let base = fixtures::seventy_gapped();
        let d = doubled(&base);
        let c = sample_apfa(&d).unwrap();
        let g = fit_grouped(&c, &d).unwrap();
        let (g2, df) = conditional_local_lrt(&g, &ids(&[2, 3])).unwrap();
        let (one, k) = local_lrt(&sample_apfa(&base).unwrap(), &ids(&[2, 3])).unwrap();
        assert_abs_diff_eq!(g2, 2.0 * one, epsilon = 1e-9);
        assert_eq!(df, 2 * k);
    }

    #[test]
    fn confounded_tables_separate_under_conditioning() {
        // within each group X_2 does not depend on X_1, but the groups differ
        // in both, so pooled data show a strong association
        let mut rows2 = Vec::new();
        let mut labels2 = Vec::new();
        // group a: x1 mostly 1, x2 mostly 1; group b: x1 mostly 2, x2 mostly 2
        for (z, x1_one, x2_one) in [("a", 0.8, 0.9), ("b", 0.2, 0.1)] {
            for i in 0..100u32 {
                let x1 = if (i as f64) < 100.0 * x1_one { 1 } else { 2 };
                for j in 0..10u32 {
                    let x2 = if (j as f64) < 10.0 * x2_one { 1 } else { 2 };
                    rows2.push(vec![x1, x2]);
                    labels2.push(z);
                }
            }
        }
        let d = with_groups(Dataset::from_rows(&rows2).unwrap(), &labels2);
        let c = sample_apfa(&d).unwrap();
        let g = fit_grouped(&c, &d).unwrap();
        let (marginal, _) = local_lrt(&c, &ids(&[2, 3])).unwrap();
        let (conditional, _) = conditional_local_lrt(&g, &ids(&[2, 3])).unwrap();
        assert!(marginal > 100.0);
        assert_abs_diff_eq!(conditional, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn grouped_additivity_against_refit() {
        let d = doubled(&fixtures::seventy_full());
        let c = sample_apfa(&d).unwrap();
        let g = fit_grouped(&c, &d).unwrap();
        let t = conditional_merge_test(&g, &ids(&[2, 3])).unwrap();
        assert_eq!(t.parts.len(), 6);
        let merged = crate::merging::merge(&c, &ids(&[2, 3])).unwrap();
        let g0 = fit_grouped(&merged, &d).unwrap();
        assert_abs_diff_eq!(t.g2, -2.0 * (g0.log_likelihood() - g.log_likelihood()), epsilon = 1e-9);
    }

    #[test]
    fn constant_covariate_selection_matches_plain_selection() {
        let base = fixtures::gapped_chain().simulate(2000, 4).unwrap();
        let d = with_groups(base.clone(), &vec!["1"; base.len()]);
        let plain = select(&base, &SelectionConfig::bic()).unwrap();
        let cond = conditional_select(&d, &SelectionConfig::bic()).unwrap();
        assert_eq!(plain.trace, cond.trace);
        assert_eq!(plain.model.apfa().topology(), cond.model.apfa().topology());
    }

    #[test]
    fn global_test_on_duplicated_groups_is_zero() {
        let d = doubled(&fixtures::seventy_full());
        let t = covariate_global_test(&d).unwrap();
        assert_abs_diff_eq!(t.result.g2, 0.0, epsilon = 1e-9);
        assert_eq!(t.result.df_unadjusted, Some(7));
        let single = with_groups(fixtures::seventy_full(), &vec!["k"; 70]);
        assert!(matches!(covariate_global_test(&single), Err(Error::SingleCovariateLevel)));
    }

    #[test]
    fn covariate_errors() {
        let c = fixtures::seventy_full_sample();
        assert!(matches!(fit_grouped(&c, &fixtures::seventy_full()), Err(Error::MissingCovariate)));
        let cont = fixtures::seventy_full()
            .with_covariate(Covariate::Continuous {
                name: "z".into(),
                values: vec![0.5; 70],
            })
            .unwrap();
        assert!(matches!(fit_grouped(&c, &cont), Err(Error::CovariateKind { .. })));
        assert!(conditional_select(&fixtures::seventy_full(), &SelectionConfig::bic()).is_err());
    }
}

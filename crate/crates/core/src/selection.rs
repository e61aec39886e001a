//! Greedy level-by-level model selection.
//!
//! Starting from the sample APFA, each level in turn repeatedly merges its
//! most similar pair of states until no pair passes the threshold. Levels
//! below the current one are still trees, so merging a pair only changes the
//! scores of pairs that involve the surviving state; the rest are kept.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::automaton::StateId;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimation::{fit_mle, FittedApfa, Penalty};
use crate::graph::{EdgeStats, MergeGraph};
use crate::inference::group_stats;
use crate::ingest::{sample_apfa, CountedApfa};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Score {
    /// `G² - α·df`; pairs with a negative score merge.
    PenalizedLikelihood(Penalty),
    /// Largest absolute difference between corresponding transition
    /// probabilities; pairs scoring below `μ` merge.
    MaxDifference(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Among equal scores, the lexicographically smallest `(v, w)`.
    #[default]
    SmallestPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub score: Score,
    #[serde(default)]
    pub tie_break: TieBreak,
    #[serde(default = "yes")]
    pub trace: bool,
    /// Rescore every pair of the level after each merge instead of only the
    /// pairs touching the merged state. Same result, slower.
    #[serde(default)]
    pub full_rescore: bool,
}

fn yes() -> bool {
    true
}

impl SelectionConfig {
    pub fn penalized(penalty: Penalty) -> Self {
        SelectionConfig {
            score: Score::PenalizedLikelihood(penalty),
            tie_break: TieBreak::SmallestPair,
            trace: true,
            full_rescore: false,
        }
    }

    pub fn bic() -> Self {
        Self::penalized(Penalty::Bic)
    }

    pub fn max_difference(mu: f64) -> Self {
        SelectionConfig {
            score: Score::MaxDifference(mu),
            ..Self::bic()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.score {
            Score::PenalizedLikelihood(Penalty::Weight(w)) if w.is_nan() || w < 0.0 => {
                Err(Error::NegativePenalty(w))
            }
            Score::MaxDifference(mu) if !(mu > 0.0 && mu <= 1.0) => Err(Error::BadThreshold(mu)),
            _ => Ok(()),
        }
    }

    /// Weight used for the information criterion reported in the trace.
    /// Max-difference runs report BIC.
    pub fn ic_weight(&self, n: u64) -> f64 {
        match self.score {
            Score::PenalizedLikelihood(p) => p.weight(n),
            Score::MaxDifference(_) => Penalty::Bic.weight(n),
        }
    }
}

/// One executed merge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub level: usize,
    /// The merged pair, in the ids of the sample APFA.
    pub pair: (StateId, StateId),
    pub score: f64,
    pub g2: f64,
    pub df: u64,
    /// Merged although the score is not negative, because the merge has no
    /// degrees of freedom and so leaves the criterion unchanged.
    pub zero_df: bool,
    pub ic_before: f64,
    pub ic_after: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub ic_weight: f64,
    pub initial_ic: f64,
    pub steps: Vec<TraceStep>,
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub model: FittedApfa,
    pub trace: SelectionTrace,
}

/// What a scorer reports for a candidate pair.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PairScore {
    pub score: f64,
    pub g2: f64,
    pub df: u64,
    /// Drop in the number of free parameters if merged.
    pub dim_drop: i64,
    pub accept: bool,
    pub zero_df: bool,
}

impl PairScore {
    /// `G² - α·df`, merged when negative or when `df` is zero. When the
    /// merged states have different supports the parameter count can fall by
    /// less than `df`, or rise, so the criterion itself may go up; the trace
    /// records the actual change.
    pub(crate) fn penalized(g2: f64, df: u64, dim_drop: i64, alpha: f64) -> Self {
        let score = g2 - alpha * df as f64;
        PairScore {
            score,
            g2,
            df,
            dim_drop,
            accept: score < 0.0 || df == 0,
            zero_df: df == 0,
        }
    }
}

/// Runs the level sweep on `g`, returning the executed merges.
pub(crate) fn greedy<S, F>(
    g: &mut MergeGraph<S>,
    scorer: F,
    ic_weight: f64,
    initial_ic: f64,
    full_rescore: bool,
) -> Vec<TraceStep>
where
    S: EdgeStats,
    F: Fn(&MergeGraph<S>, u32, u32) -> PairScore + Sync,
{
    let mut steps = Vec::new();
    let mut ic = initial_ic;
    let p = g.num_levels();
    for level in 1..p {
        let score_all = |g: &MergeGraph<S>, pairs: Vec<(u32, u32)>| -> Vec<((u32, u32), PairScore)> {
            pairs.into_par_iter().map(|(v, w)| ((v, w), scorer(g, v, w))).collect()
        };
        let states = g.alive_at_level(level);
        if states.len() < 2 {
            continue;
        }
        let mut pairs = Vec::new();
        for (k, &v) in states.iter().enumerate() {
            for &w in &states[k + 1..] {
                pairs.push((v, w));
            }
        }
        let mut scores: BTreeMap<(u32, u32), PairScore> = score_all(g, pairs).into_iter().collect();
        loop {
            let best = scores
                .iter()
                .filter(|(_, s)| s.accept)
                .min_by(|a, b| a.1.score.total_cmp(&b.1.score).then(a.0.cmp(b.0)));
            let Some((&(v, w), &s)) = best else { break };
            g.merge(&[v, w]);
            let ic_after = ic + s.g2 - ic_weight * s.dim_drop as f64;
            steps.push(TraceStep {
                level,
                pair: (StateId::from_index(v as usize), StateId::from_index(w as usize)),
                score: s.score,
                g2: s.g2,
                df: s.df,
                zero_df: s.zero_df,
                ic_before: ic,
                ic_after,
            });
            ic = ic_after;
            let alive = g.alive_at_level(level);
            let fresh: Vec<(u32, u32)> = if full_rescore {
                scores.clear();
                let mut all = Vec::new();
                for (k, &x) in alive.iter().enumerate() {
                    for &y in &alive[k + 1..] {
                        all.push((x, y));
                    }
                }
                all
            } else {
                scores.retain(|&(x, y), _| x != v && x != w && y != v && y != w);
                alive
                    .iter()
                    .filter(|&&x| x != v)
                    .map(|&x| (x.min(v), x.max(v)))
                    .collect()
            };
            scores.extend(score_all(g, fresh));
        }
    }
    steps
}

fn penalized_scorer(alpha: f64) -> impl Fn(&MergeGraph<u64>, u32, u32) -> PairScore + Sync {
    move |g, v, w| {
        let (mut g2, mut df, mut drop) = (0.0, 0u64, 0i64);
        for class in g.classes(&[v, w]) {
            let st = group_stats(g, &class, false);
            g2 += st.g2;
            df += st.df;
            drop += st.dim_drop;
        }
        PairScore::penalized(g2, df, drop, alpha)
    }
}

/// Largest `|π̂_u(a) - π̂_w(a)|` over the fused groups of merging `v` and
/// `w`, with absent edges read as probability zero. States without
/// observations are skipped.
fn max_difference(g: &MergeGraph<u64>, classes: &[Vec<u32>]) -> f64 {
    let mut worst: f64 = 0.0;
    for class in classes {
        let l = g.level(class[0]);
        let ncol = g.alphabets()[l] as usize;
        let mut lo = vec![f64::INFINITY; ncol];
        let mut hi = vec![f64::NEG_INFINITY; ncol];
        for &u in class {
            let n = g.node_count(u);
            if n == 0 {
                continue;
            }
            let mut row = vec![0.0; ncol];
            for e in g.out(u) {
                row[e.symbol as usize - 1] = e.stats as f64 / n as f64;
            }
            for j in 0..ncol {
                lo[j] = lo[j].min(row[j]);
                hi[j] = hi[j].max(row[j]);
            }
        }
        for j in 0..ncol {
            if hi[j] >= lo[j] {
                worst = worst.max(hi[j] - lo[j]);
            }
        }
    }
    worst
}

fn max_difference_scorer(mu: f64) -> impl Fn(&MergeGraph<u64>, u32, u32) -> PairScore + Sync {
    move |g, v, w| {
        let classes = g.classes(&[v, w]);
        let (mut g2, mut df, mut drop) = (0.0, 0u64, 0i64);
        for class in &classes {
            let st = group_stats(g, class, false);
            g2 += st.g2;
            df += st.df;
            drop += st.dim_drop;
        }
        let score = max_difference(g, &classes);
        PairScore {
            score,
            g2,
            df,
            dim_drop: drop,
            accept: score < mu,
            zero_df: false,
        }
    }
}

/// Similarity of two same-level states under the configured score.
pub fn score_pair(c: &CountedApfa, v: StateId, w: StateId, config: &SelectionConfig) -> Result<f64> {
    config.validate()?;
    let g = MergeGraph::from_counted(c);
    let seeds = g.check_seeds(&[v, w])?;
    Ok(match config.score {
        Score::PenalizedLikelihood(p) => penalized_scorer(p.weight(c.total()))(&g, seeds[0], seeds[1]).score,
        Score::MaxDifference(mu) => max_difference_scorer(mu)(&g, seeds[0], seeds[1]).score,
    })
}

/// Selects a model for `d`, starting from its sample APFA.
pub fn select(d: &Dataset, config: &SelectionConfig) -> Result<Selection> {
    select_from(&sample_apfa(d)?, config)
}

/// Selection starting from a given counted model, normally a sample APFA.
pub fn select_from(sample: &CountedApfa, config: &SelectionConfig) -> Result<Selection> {
    config.validate()?;
    let n = sample.total();
    let ic_weight = config.ic_weight(n);
    let initial_ic = fit_mle(sample).information_criterion(ic_weight)?;
    let mut g = MergeGraph::from_counted(sample);
    let steps = match config.score {
        Score::PenalizedLikelihood(p) => greedy(
            &mut g,
            penalized_scorer(p.weight(n)),
            ic_weight,
            initial_ic,
            config.full_rescore,
        ),
        Score::MaxDifference(mu) => greedy(
            &mut g,
            max_difference_scorer(mu),
            ic_weight,
            initial_ic,
            config.full_rescore,
        ),
    };
    let (apfa, _) = g.to_apfa(|&c| Some(c));
    let model = fit_mle(&CountedApfa::new(apfa)?);
    Ok(Selection {
        model,
        trace: SelectionTrace {
            ic_weight,
            initial_ic,
            steps: if config.trace { steps } else { Vec::new() },
        },
    })
}

/// Applies the merges of a trace, in order, to the model it started from.
pub fn replay(sample: &CountedApfa, trace: &SelectionTrace) -> Result<CountedApfa> {
    let mut g = MergeGraph::from_counted(sample);
    for step in &trace.steps {
        let seeds = g.check_seeds(&[step.pair.0, step.pair.1])?;
        g.merge(&seeds);
    }
    CountedApfa::new(g.to_apfa(|&c| Some(c)).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automaton::{isomorphism, minimal_apfa};
    use crate::fixtures;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gapped_pair_scores() {
        let c = fixtures::seventy_gapped_sample();
        let s = score_pair(&c, StateId(2), StateId(3), &SelectionConfig::penalized(Penalty::Bic)).unwrap();
        assert_abs_diff_eq!(s, 67.288 - 2.0 * 70f64.ln(), epsilon = 1e-2);
        let s = score_pair(&c, StateId(4), StateId(6), &SelectionConfig::max_difference(0.5)).unwrap();
        assert_abs_diff_eq!(s, 0.1, epsilon = 1e-12);
        assert!(score_pair(&c, StateId(2), StateId(4), &SelectionConfig::bic()).is_err());
    }

    #[test]
    fn identical_pair_scores_negative() {
        let d = Dataset::from_counts(&[(vec![1, 1], 3), (vec![1, 2], 5), (vec![2, 1], 3), (vec![2, 2], 5)]).unwrap();
        let c = sample_apfa(&d).unwrap();
        let s = score_pair(&c, StateId(2), StateId(3), &SelectionConfig::penalized(Penalty::Aic)).unwrap();
        assert_abs_diff_eq!(s, -2.0, epsilon = 1e-12);
    }

    #[test]
    fn single_row_is_returned_as_is() {
        let d = Dataset::from_rows(&[vec![1, 2, 2]]).unwrap();
        let sel = select(&d, &SelectionConfig::bic()).unwrap();
        assert!(sel.trace.steps.is_empty());
        assert_eq!(sel.model.apfa().num_states(), 4);
    }

    #[test]
    fn strong_level_one_dependence_is_kept() {
        let sel = select(&fixtures::seventy_full(), &SelectionConfig::bic()).unwrap();
        assert_eq!(sel.model.apfa().states_at_level(1).len(), 2);
        assert!(sel.model.bic() <= fit_mle(&fixtures::seventy_full_sample()).bic() + 1e-9);
    }

    #[test]
    fn independent_data_gives_the_minimal_model() {
        let mut truth = minimal_apfa(&[2, 2, 2, 2]).unwrap();
        let probs: Vec<f64> = [0.3, 0.7, 0.6, 0.4, 0.5, 0.5, 0.8, 0.2].to_vec();
        truth = truth.with_probabilities(&probs);
        let d = truth.simulate(5000, 7).unwrap();
        let sel = select(&d, &SelectionConfig::bic()).unwrap();
        assert!(isomorphism(sel.model.apfa(), &truth).is_some());
    }

    #[test]
    fn disjoint_supports_can_raise_the_criterion() {
        // both level-1 states have one out-edge, on different symbols, so the
        // merged state gains a free parameter
        let d = Dataset::from_rows(&[vec![1, 1], vec![2, 2]]).unwrap();
        let sample = sample_apfa(&d).unwrap();
        let config = SelectionConfig::penalized(Penalty::Weight(5.0));
        let sel = select_from(&sample, &config).unwrap();
        let step = &sel.trace.steps[0];
        assert_eq!(step.df, 1);
        assert!(step.score < 0.0);
        assert_abs_diff_eq!(step.ic_after - step.ic_before, step.g2 + 5.0, epsilon = 1e-9);
        assert_abs_diff_eq!(step.ic_after, sel.model.information_criterion(5.0).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn trace_replays_and_ic_is_tracked() {
        let truth = fixtures::gapped_chain();
        let d = truth.simulate(3000, 11).unwrap();
        let sample = sample_apfa(&d).unwrap();
        let sel = select_from(&sample, &SelectionConfig::bic()).unwrap();
        let again = replay(&sample, &sel.trace).unwrap();
        assert_eq!(&again, sel.model.counted());
        let last = sel.trace.steps.last().unwrap();
        assert_abs_diff_eq!(last.ic_after, sel.model.bic(), epsilon = 1e-6);
        for w in sel.trace.steps.windows(2) {
            assert_eq!(w[0].ic_after, w[1].ic_before);
            assert!(w[0].level <= w[1].level);
        }
    }

    fn random_probs(a: &crate::automaton::Apfa, seed: u64) -> crate::automaton::Apfa {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut probs = vec![0.0; a.num_edges()];
        for s in a.states() {
            let out = a.out_edges(s);
            let w: Vec<f64> = out.iter().map(|_| rng.random_range(0.1..1.0)).collect();
            let t: f64 = w.iter().sum();
            for (&e, x) in out.iter().zip(w) {
                probs[e] = x / t;
            }
        }
        a.with_probabilities(&probs)
    }

    #[test]
    fn cached_and_full_rescoring_agree() {
        let d = random_probs(&fixtures::markov2(), 5).simulate(800, 3).unwrap();
        let fast = select(&d, &SelectionConfig::bic()).unwrap();
        let slow = select(&d, &SelectionConfig { full_rescore: true, ..SelectionConfig::bic() }).unwrap();
        assert!(!fast.trace.steps.is_empty());
        assert_eq!(fast.trace, slow.trace);
        let fast = select(&d, &SelectionConfig::max_difference(0.2)).unwrap();
        let slow = select(&d, &SelectionConfig { full_rescore: true, ..SelectionConfig::max_difference(0.2) }).unwrap();
        assert_eq!(fast.trace, slow.trace);
    }

    #[test]
    fn config_validation() {
        assert!(SelectionConfig::max_difference(0.0).validate().is_err());
        assert!(SelectionConfig::max_difference(1.5).validate().is_err());
        assert!(SelectionConfig::penalized(Penalty::Weight(-1.0)).validate().is_err());
        assert!(SelectionConfig::max_difference(1.0).validate().is_ok());
    }

    #[test]
    fn untraced_runs_have_no_steps() {
        let cfg = SelectionConfig { trace: false, ..SelectionConfig::bic() };
        let sel = select(&fixtures::seventy_gapped(), &cfg).unwrap();
        assert!(sel.trace.steps.is_empty());
        let merged = merge_count(&fixtures::seventy_gapped());
        assert_eq!(sel.model.apfa().num_states(), merged);
    }

    fn merge_count(d: &Dataset) -> usize {
        select(d, &SelectionConfig::bic()).unwrap().model.apfa().num_states()
    }

    #[test]
    fn max_difference_merges_close_pairs() {
        let c = fixtures::seventy_gapped_sample();
        let sel = select_from(&c, &SelectionConfig::max_difference(0.15)).unwrap();
        let merged: Vec<_> = sel.trace.steps.iter().map(|s| s.pair).collect();
        assert_eq!(merged, vec![(StateId(4), StateId(6))]);
    }
}

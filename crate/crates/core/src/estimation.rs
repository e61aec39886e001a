//! Maximum-likelihood fitting, log-likelihood, marginals and model size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::automaton::{Apfa, StateId};
use crate::error::{Error, Result};
use crate::ingest::CountedApfa;

/// `Σ n_k log(n_k / Σ n)`, with `0 log 0 = 0`.
pub fn multinomial_loglik(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| n as f64 * (n as f64 / t).ln())
        .sum()
}

/// Penalty weight for an information criterion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    Aic,
    Bic,
    Weight(f64),
}

impl Penalty {
    /// The numeric weight for a sample of size `n`.
    pub fn weight(self, n: u64) -> f64 {
        match self {
            Penalty::Aic => 2.0,
            Penalty::Bic => (n.max(1) as f64).ln(),
            Penalty::Weight(w) => w,
        }
    }
}

impl std::str::FromStr for Penalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Penalty::Aic),
            "bic" => Ok(Penalty::Bic),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|w| w.is_finite())
                .map(Penalty::Weight)
                .ok_or_else(|| Error::Other(format!("`{s}` is not aic, bic or a number"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedApfa {
    counted: CountedApfa,
    fitted: Apfa,
    inestimable: Vec<bool>,
    state_loglik: Vec<f64>,
    log_likelihood: f64,
    dimension: u64,
}

impl FittedApfa {
    /// The model with edge probabilities (and counts) set.
    pub fn apfa(&self) -> &Apfa {
        &self.fitted
    }

    pub fn into_apfa(self) -> Apfa {
        self.fitted
    }

    pub fn counted(&self) -> &CountedApfa {
        &self.counted
    }

    pub fn prob(&self, edge: usize) -> f64 {
        self.fitted.edge(edge).prob.unwrap()
    }

    /// True for states with no observations, whose probabilities are set
    /// uniform rather than estimated.
    pub fn is_inestimable(&self, s: StateId) -> bool {
        self.inestimable[s.index()]
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// Contribution of each state's out-edges to the log-likelihood.
    pub fn state_log_likelihoods(&self) -> &[f64] {
        &self.state_loglik
    }

    pub fn dimension(&self) -> u64 {
        self.dimension
    }

    pub fn total(&self) -> u64 {
        self.counted.total()
    }

    /// `-2 ℓ̂ + α · dim`.
    pub fn information_criterion(&self, alpha: f64) -> Result<f64> {
        if alpha.is_nan() || alpha < 0.0 {
            return Err(Error::NegativePenalty(alpha));
        }
        Ok(-2.0 * self.log_likelihood + alpha * self.dimension as f64)
    }

    pub fn aic(&self) -> f64 {
        self.information_criterion(2.0).unwrap()
    }

    pub fn bic(&self) -> f64 {
        self.information_criterion(Penalty::Bic.weight(self.total())).unwrap()
    }

    /// Sample proportions of states and edges.
    pub fn marginals(&self) -> Marginals {
        let n = self.counted.total().max(1) as f64;
        Marginals {
            states: self.counted.node_counts().iter().map(|&c| c as f64 / n).collect(),
            edges: (0..self.fitted.num_edges())
                .map(|e| self.counted.edge_count(e) as f64 / n)
                .collect(),
        }
    }
}

/// `p̂(v) = n(v)/N` indexed by state, `p̂(e) = n(e)/N` indexed by edge.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    pub states: Vec<f64>,
    pub edges: Vec<f64>,
}

impl Marginals {
    pub fn state(&self, s: StateId) -> f64 {
        self.states[s.index()]
    }
}

/// Relative-frequency estimates `π̂(e) = n(e)/n(v)`. States with `n(v) = 0`
/// get uniform probabilities and are marked inestimable.
pub fn fit_mle(c: &CountedApfa) -> FittedApfa {
    let a = c.apfa();
    let per_state: Vec<(Vec<(usize, f64)>, f64)> = a
        .states()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&s| {
            let out = a.out_edges(s);
            let counts: Vec<u64> = out.iter().map(|&e| c.edge_count(e)).collect();
            let n: u64 = counts.iter().sum();
            let probs = out
                .iter()
                .zip(&counts)
                .map(|(&e, &k)| {
                    let p = if n > 0 {
                        k as f64 / n as f64
                    } else {
                        1.0 / out.len() as f64
                    };
                    (e, p)
                })
                .collect();
            (probs, multinomial_loglik(&counts))
        })
        .collect();

    let mut probs = vec![0.0; a.num_edges()];
    let mut state_loglik = Vec::with_capacity(a.num_states());
    let mut inestimable = Vec::with_capacity(a.num_states());
    for (s, (edge_probs, ll)) in a.states().zip(per_state) {
        for (e, p) in edge_probs {
            probs[e] = p;
        }
        state_loglik.push(ll);
        inestimable.push(a.out_degree(s) > 0 && c.node_count(s) == 0);
    }
    let fitted = a.with_probabilities(&probs);
    FittedApfa {
        counted: c.clone(),
        log_likelihood: state_loglik.iter().sum(),
        dimension: dimension(a),
        fitted,
        inestimable,
        state_loglik,
    }
}

pub fn log_likelihood(f: &FittedApfa) -> f64 {
    f.log_likelihood()
}

pub fn marginals(f: &FittedApfa) -> Marginals {
    f.marginals()
}

pub fn information_criterion(f: &FittedApfa, alpha: f64) -> Result<f64> {
    f.information_criterion(alpha)
}

/// Free parameters of the model as drawn: `Σ (outdegree - 1)` over the
/// non-sink states. Absent edges contribute nothing.
pub fn dimension(a: &Apfa) -> u64 {
    a.states()
        .map(|s| a.out_degree(s).saturating_sub(1) as u64)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automaton::{maximal_apfa, minimal_apfa};
    use crate::dataset::Dataset;
    use crate::fixtures;
    use crate::ingest::sample_apfa;
    use approx::assert_abs_diff_eq;

    #[test]
    fn full_sample_root_probabilities() {
        let f = fit_mle(&fixtures::seventy_full_sample());
        let a = f.apfa();
        let root: Vec<f64> = a.out_edges(a.root()).iter().map(|&e| f.prob(e)).collect();
        assert_abs_diff_eq!(root[0], 36.0 / 70.0, epsilon = 1e-15);
        assert_abs_diff_eq!(root[1], 34.0 / 70.0, epsilon = 1e-15);
    }

    #[test]
    fn reference_log_likelihoods() {
        let full = fit_mle(&fixtures::seventy_full_sample());
        let merged = fit_mle(&fixtures::seventy_full_merged());
        assert_abs_diff_eq!(full.log_likelihood(), -116.2117, epsilon = 1e-3);
        assert_abs_diff_eq!(merged.log_likelihood(), -142.7731, epsilon = 1e-3);
        assert_eq!(full.dimension(), 7);
        assert_eq!(merged.dimension(), 4);
        assert_eq!(dimension(fixtures::seventy_gapped_sample().apfa()), 5);
    }

    #[test]
    fn deterministic_data_has_zero_loglik() {
        let d = Dataset::from_counts(&[(vec![1, 2, 1], 9)]).unwrap();
        let f = fit_mle(&sample_apfa(&d).unwrap());
        assert_eq!(f.log_likelihood(), 0.0);
        assert!(f.apfa().edges().iter().all(|e| e.prob == Some(1.0)));
        f.apfa().ensure_valid().unwrap();
    }

    #[test]
    fn loglik_matches_per_row_sum() {
        let d = fixtures::seventy_gapped();
        let f = fit_mle(&sample_apfa(&d).unwrap());
        let brute: f64 = d.rows().map(|r| f.apfa().probability_of(r).unwrap().ln()).sum();
        assert_abs_diff_eq!(f.log_likelihood(), brute, epsilon = 1e-9);
    }

    #[test]
    fn marginals_per_level_sum_to_one() {
        let f = fit_mle(&fixtures::seventy_full_sample());
        let m = f.marginals();
        let a = f.apfa();
        assert_eq!(m.state(a.root()), 1.0);
        let l1: Vec<f64> = a.states_at_level(1).iter().map(|&s| m.state(s)).collect();
        assert_abs_diff_eq!(l1[0], 36.0 / 70.0);
        for l in 0..=3 {
            let s: f64 = a.states_at_level(l).iter().map(|&s| m.state(s)).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn information_criteria() {
        let f = fit_mle(&fixtures::seventy_full_sample());
        assert_abs_diff_eq!(f.information_criterion(0.0).unwrap(), 2.0 * 116.2117, epsilon = 2e-3);
        assert!(matches!(f.information_criterion(-1.0), Err(Error::NegativePenalty(_))));
        let g = fit_mle(&fixtures::seventy_full_merged());
        for alpha in [2.0, 70f64.ln()] {
            assert!(f.information_criterion(alpha).unwrap() < g.information_criterion(alpha).unwrap());
        }
    }

    #[test]
    fn standard_model_dimensions() {
        assert_eq!(dimension(&maximal_apfa(&[2, 2, 2], 100).unwrap()), 7);
        assert_eq!(dimension(&minimal_apfa(&[2, 2, 2]).unwrap()), 3);
        assert_eq!(dimension(&minimal_apfa(&[2; 6]).unwrap()), 6);
        assert_eq!(dimension(&maximal_apfa(&[3, 2], 100).unwrap()), 5);
    }

    #[test]
    fn zero_count_states_are_uniform_and_flagged() {
        let c = fixtures::seventy_gapped_sample();
        let completed = c.apfa().complete(100).unwrap();
        let cc = CountedApfa::new(completed).unwrap();
        let f = fit_mle(&cc);
        let flagged: Vec<StateId> = f.apfa().states().filter(|&s| f.is_inestimable(s)).collect();
        assert_eq!(flagged.len(), 1);
        let s = flagged[0];
        assert!(f.apfa().out_edges(s).iter().all(|&e| f.prob(e) == 0.5));
        assert_abs_diff_eq!(f.log_likelihood(), fit_mle(&c).log_likelihood(), epsilon = 1e-12);
        f.apfa().ensure_valid().unwrap();
    }

    #[test]
    fn penalty_parsing() {
        assert_eq!("bic".parse::<Penalty>().unwrap(), Penalty::Bic);
        assert_eq!("AIC".parse::<Penalty>().unwrap(), Penalty::Aic);
        assert_eq!("1.5".parse::<Penalty>().unwrap(), Penalty::Weight(1.5));
        assert!("lots".parse::<Penalty>().is_err());
        assert_abs_diff_eq!(Penalty::Bic.weight(70), 70f64.ln());
    }
}

//! Logistic edge probabilities for binary states and a continuous covariate.
//!
//! At a state with out-symbols 1 and 2, `P(symbol 1 | z) = σ(a + b z)`.
//! Fits use Newton steps on a standardized covariate with step halving.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::automaton::{Apfa, StateId};
use crate::dataset::{Covariate, Dataset};
use crate::error::{Error, Result};
use crate::graph::MergeGraph;
use crate::inference::{completed_dim_drop, TestPart, TestResult};
use crate::ingest::CountedApfa;

const MAX_ITER: u32 = 50;
const GRAD_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    IterationLimit,
    /// The outcomes are split by a threshold on the covariate; no finite
    /// maximizer exists and the reported log-likelihood is the supremum.
    Separated,
    /// Only one symbol was observed.
    SingleOutcome,
    /// Both symbols occur but the covariate takes one value; only the
    /// intercept is fitted.
    ConstantCovariate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: Option<f64>,
    pub slope: Option<f64>,
    pub se_intercept: Option<f64>,
    pub se_slope: Option<f64>,
    pub log_likelihood: f64,
    pub iterations: u32,
    /// Largest absolute score component at the reported coefficients.
    pub max_gradient: f64,
    pub status: FitStatus,
    pub ones: usize,
    pub zeros: usize,
}

impl LogisticFit {
    pub fn both_outcomes(&self) -> bool {
        self.ones > 0 && self.zeros > 0
    }

    pub fn converged(&self) -> bool {
        matches!(self.status, FitStatus::Converged | FitStatus::ConstantCovariate)
    }

    /// Free parameters this fit contributes to the model dimension.
    pub fn params(&self) -> u64 {
        if self.both_outcomes() {
            2
        } else {
            0
        }
    }

    /// `P(symbol 1 | z)`, when the coefficients are finite.
    pub fn probability(&self, z: f64) -> Option<f64> {
        let a = self.intercept?;
        Some(sigmoid(a + self.slope.unwrap_or(0.0) * z))
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Log-likelihood of `(a, b)` given covariates of the symbol-1 and symbol-2
/// observations.
pub fn logistic_loglik(a: f64, b: f64, ones: &[f64], zeros: &[f64]) -> f64 {
    -ones.iter().map(|&z| softplus(-(a + b * z))).sum::<f64>() - zeros.iter().map(|&z| softplus(a + b * z)).sum::<f64>()
}

/// Gradient of [`logistic_loglik`] in `(a, b)`.
pub fn logistic_score(a: f64, b: f64, ones: &[f64], zeros: &[f64]) -> [f64; 2] {
    let mut g = [0.0; 2];
    for &z in ones {
        let r = 1.0 - sigmoid(a + b * z);
        g[0] += r;
        g[1] += r * z;
    }
    for &z in zeros {
        let r = -sigmoid(a + b * z);
        g[0] += r;
        g[1] += r * z;
    }
    g
}

fn binomial_loglik(k1: usize, k0: usize) -> f64 {
    let n = (k1 + k0) as f64;
    let term = |k: usize| if k == 0 { 0.0 } else { k as f64 * (k as f64 / n).ln() };
    term(k1) + term(k0)
}

fn extent(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| (lo.min(z), hi.max(z)))
}

/// Supremum of the log-likelihood when the outcomes are separated at `c`:
/// every point off the threshold is fitted exactly and the tied points share
/// one free probability.
fn separated_sup(ones: &[f64], zeros: &[f64], c: f64) -> f64 {
    let k1 = ones.iter().filter(|&&z| z == c).count();
    let k0 = zeros.iter().filter(|&&z| z == c).count();
    binomial_loglik(k1, k0)
}

fn special(status: FitStatus, ll: f64, ones: &[f64], zeros: &[f64]) -> LogisticFit {
    LogisticFit {
        intercept: None,
        slope: None,
        se_intercept: None,
        se_slope: None,
        log_likelihood: ll,
        iterations: 0,
        max_gradient: 0.0,
        status,
        ones: ones.len(),
        zeros: zeros.len(),
    }
}

/// Maximum-likelihood logistic fit of the symbol-1 indicator on `z`.
pub fn fit_binary_logistic(ones: &[f64], zeros: &[f64]) -> LogisticFit {
    let (k1, k0) = (ones.len(), zeros.len());
    if k1 == 0 || k0 == 0 {
        return special(FitStatus::SingleOutcome, 0.0, ones, zeros);
    }
    let (lo1, hi1) = extent(ones);
    let (lo0, hi0) = extent(zeros);
    if lo1 == hi1 && lo0 == hi0 && lo1 == lo0 {
        let a = (k1 as f64 / k0 as f64).ln();
        let n = (k1 + k0) as f64;
        let pi = k1 as f64 / n;
        let mut fit = special(FitStatus::ConstantCovariate, binomial_loglik(k1, k0), ones, zeros);
        fit.intercept = Some(a);
        fit.se_intercept = Some((1.0 / (n * pi * (1.0 - pi))).sqrt());
        fit.max_gradient = logistic_score(a, 0.0, ones, zeros)[0].abs();
        return fit;
    }
    if hi0 <= lo1 {
        return special(FitStatus::Separated, separated_sup(ones, zeros, hi0), ones, zeros);
    }
    if hi1 <= lo0 {
        return special(FitStatus::Separated, separated_sup(ones, zeros, hi1), ones, zeros);
    }

    let n = (k1 + k0) as f64;
    let mean = (ones.iter().sum::<f64>() + zeros.iter().sum::<f64>()) / n;
    let var = (ones.iter().chain(zeros).map(|z| (z - mean).powi(2)).sum::<f64>()) / n;
    let sd = var.sqrt();
    let x1: Vec<f64> = ones.iter().map(|z| (z - mean) / sd).collect();
    let x0: Vec<f64> = zeros.iter().map(|z| (z - mean) / sd).collect();
    let original = |beta: [f64; 2]| [beta[0] - beta[1] * mean / sd, beta[1] / sd];

    let info = |beta: [f64; 2]| {
        let mut h = [0.0; 3];
        for &x in x1.iter().chain(&x0) {
            let p = sigmoid(beta[0] + beta[1] * x);
            let w = p * (1.0 - p);
            h[0] += w;
            h[1] += w * x;
            h[2] += w * x * x;
        }
        h
    };

    let mut beta = [(k1 as f64 / k0 as f64).ln(), 0.0];
    let mut ll = logistic_loglik(beta[0], beta[1], &x1, &x0);
    let mut iterations = 0;
    let mut status = FitStatus::IterationLimit;
    let mut grad;
    loop {
        let ab = original(beta);
        grad = logistic_score(ab[0], ab[1], ones, zeros);
        if grad[0].abs().max(grad[1].abs()) < GRAD_TOL {
            status = FitStatus::Converged;
            break;
        }
        if iterations == MAX_ITER {
            break;
        }
        iterations += 1;
        let g = logistic_score(beta[0], beta[1], &x1, &x0);
        let h = info(beta);
        let det = h[0] * h[2] - h[1] * h[1];
        if det.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            break;
        }
        let step = [(h[2] * g[0] - h[1] * g[1]) / det, (h[0] * g[1] - h[1] * g[0]) / det];
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = [beta[0] + t * step[0], beta[1] + t * step[1]];
            let l = logistic_loglik(cand[0], cand[1], &x1, &x0);
            if l >= ll {
                beta = cand;
                ll = l;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            // at the optimum to machine precision; a final check decides
            let ab = original(beta);
            grad = logistic_score(ab[0], ab[1], ones, zeros);
            if grad[0].abs().max(grad[1].abs()) < GRAD_TOL {
                status = FitStatus::Converged;
            }
            break;
        }
    }

    let ab = original(beta);
    let h = info(beta);
    let det = h[0] * h[2] - h[1] * h[1];
    // covariance on the standardized scale, mapped back through the
    // linear reparametrization
    let (v00, v01, v11) = (h[2] / det, -h[1] / det, h[0] / det);
    let c = -mean / sd;
    let var_a = v00 + 2.0 * c * v01 + c * c * v11;
    let var_b = v11 / (sd * sd);
    LogisticFit {
        intercept: Some(ab[0]),
        slope: Some(ab[1]),
        se_intercept: Some(var_a.sqrt()),
        se_slope: Some(var_b.sqrt()),
        log_likelihood: logistic_loglik(ab[0], ab[1], ones, zeros),
        iterations,
        max_gradient: grad[0].abs().max(grad[1].abs()),
        status,
        ones: k1,
        zeros: k0,
    }
}

/// A topology whose binary states carry logistic fits on a continuous
/// covariate.
#[derive(Clone, Debug)]
pub struct LogisticEdgeModel {
    apfa: Apfa,
    /// Covariate values of the observations routed through each edge.
    covariates: Vec<Vec<f64>>,
    /// One fit per state; `None` at the sink and at unary levels.
    fits: Vec<Option<LogisticFit>>,
}

fn fit_state(a: &Apfa, covariates: &[Vec<f64>], s: StateId) -> Option<LogisticFit> {
    let l = a.level(s);
    if l >= a.num_levels() || a.alphabet_size(l + 1) < 2 {
        return None;
    }
    let side = |sym| a.out_edge(s, sym).map(|e| covariates[e].as_slice()).unwrap_or(&[]);
    Some(fit_binary_logistic(side(1), side(2)))
}

fn check_binary(a: &Apfa) -> Result<()> {
    for s in a.states() {
        let l = a.level(s);
        if l < a.num_levels() && a.alphabet_size(l + 1) > 2 {
            return Err(Error::NonBinary {
                state: s,
                size: a.alphabet_size(l + 1),
            });
        }
    }
    Ok(())
}

impl LogisticEdgeModel {
    fn build(apfa: Apfa, covariates: Vec<Vec<f64>>) -> Result<Self> {
        check_binary(&apfa)?;
        let states: Vec<StateId> = apfa.states().collect();
        let fits = states
            .par_iter()
            .map(|&s| fit_state(&apfa, &covariates, s))
            .collect();
        Ok(LogisticEdgeModel {
            apfa,
            covariates,
            fits,
        })
    }

    pub(crate) fn from_graph(g: &MergeGraph<Vec<f64>>) -> Result<Self> {
        let (apfa, _) = g.to_apfa(|c| Some(c.len() as u64));
        let mut order: Vec<u32> = (0..g.len() as u32).filter(|&i| g.is_alive(i)).collect();
        order.sort_by_key(|&i| g.level(i));
        let covariates = order
            .iter()
            .flat_map(|&i| g.out(i).iter().map(|e| e.stats.clone()))
            .collect();
        Self::build(apfa, covariates)
    }

    pub(crate) fn graph(&self) -> MergeGraph<Vec<f64>> {
        MergeGraph::from_apfa(&self.apfa, |e| self.covariates[e].clone())
    }

    /// The topology with pooled counts.
    pub fn apfa(&self) -> &Apfa {
        &self.apfa
    }

    pub fn fit(&self, s: StateId) -> Option<&LogisticFit> {
        self.fits[s.index()].as_ref()
    }

    pub fn fits(&self) -> impl Iterator<Item = (StateId, &LogisticFit)> {
        self.fits
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.as_ref().map(|f| (StateId::from_index(i), f)))
    }

    pub fn edge_covariates(&self, e: usize) -> &[f64] {
        &self.covariates[e]
    }

    pub fn log_likelihood(&self) -> f64 {
        self.fits.iter().flatten().map(|f| f.log_likelihood).sum()
    }

    /// Two parameters for every state where both symbols were observed.
    pub fn dimension(&self) -> u64 {
        self.fits.iter().flatten().map(LogisticFit::params).sum()
    }
}

/// Routes every row of `d` through `c` and fits each binary state.
pub fn fit_logistic_edges(c: &CountedApfa, d: &Dataset) -> Result<LogisticEdgeModel> {
    let values = match d.covariate() {
        Some(Covariate::Continuous { values, .. }) => values,
        Some(_) => return Err(Error::CovariateKind { expected: "continuous" }),
        None => return Err(Error::MissingCovariate),
    };
    let a = c.apfa();
    check_binary(a)?;
    let mut covariates = vec![Vec::new(); a.num_edges()];
    for (k, (row, &z)) in d.rows().zip(values).enumerate() {
        let path = a.path_for(row).ok_or(Error::Unroutable { row: k + 1 })?;
        for e in path {
            covariates[e].push(z);
        }
    }
    for (e, v) in covariates.iter().enumerate() {
        if v.len() as u64 != c.edge_count(e) {
            return Err(Error::Counts(format!(
                "edge {e}: routed rows do not match the model's count"
            )));
        }
    }
    LogisticEdgeModel::build(a.clone(), covariates)
}

pub(crate) struct ClassTest {
    pub g2: f64,
    pub df: u64,
    pub dim_drop: i64,
    pub table: Vec<Vec<u64>>,
    pub separated: bool,
}

fn sides(g: &MergeGraph<Vec<f64>>, u: u32) -> (&[f64], &[f64]) {
    let side = |sym| g.child(u, sym).map(|e| e.stats.as_slice()).unwrap_or(&[]);
    (side(1), side(2))
}

/// Likelihood ratio of fitting one logistic curve to the pooled members of
/// `class` against one curve per member. Degrees of freedom are two per
/// observed member beyond the first, and none when the pooled data hold a
/// single symbol.
pub(crate) fn class_test(g: &MergeGraph<Vec<f64>>, class: &[u32]) -> ClassTest {
    let l = g.level(class[0]);
    let mut out = ClassTest {
        g2: 0.0,
        df: 0,
        dim_drop: 0,
        table: Vec::new(),
        separated: false,
    };
    if g.alphabets()[l] < 2 {
        out.table = class.iter().map(|&u| vec![g.out(u).iter().map(|e| e.stats.len() as u64).sum()]).collect();
        return out;
    }
    let (mut pooled1, mut pooled0) = (Vec::new(), Vec::new());
    let mut separate = 0.0;
    let mut rows = 0u64;
    let mut before = 0u64;
    for &u in class {
        let (o, z) = sides(g, u);
        out.table.push(vec![o.len() as u64, z.len() as u64]);
        if o.len() + z.len() > 0 {
            rows += 1;
        }
        let fit = fit_binary_logistic(o, z);
        out.separated |= fit.status == FitStatus::Separated;
        separate += fit.log_likelihood;
        before += fit.params();
        pooled1.extend_from_slice(o);
        pooled0.extend_from_slice(z);
    }
    let pooled = fit_binary_logistic(&pooled1, &pooled0);
    out.separated |= pooled.status == FitStatus::Separated;
    out.g2 = (2.0 * (separate - pooled.log_likelihood)).max(0.0);
    out.df = if pooled.both_outcomes() { 2 * rows.saturating_sub(1) } else { 0 };
    out.dim_drop = before as i64 - pooled.params() as i64;
    out
}

/// Merge test for a logistic edge model: the recursive fusion of `s` is
/// computed as for plain counts and every fused group is tested with
/// [`class_test`].
pub fn logistic_merge_test(m: &LogisticEdgeModel, s: &[StateId]) -> Result<TestResult> {
    let g = m.graph();
    let seeds = g.check_seeds(s)?;
    let mut parts = Vec::new();
    let mut warnings = Vec::new();
    let mut unadjusted = Some(0u128);
    for class in g.classes(&seeds) {
        let level = g.level(class[0]);
        let states: Vec<StateId> = class.iter().map(|&i| StateId::from_index(i as usize)).collect();
        let supports: Vec<Vec<u32>> = class
            .iter()
            .map(|&u| g.out(u).iter().map(|e| e.symbol).collect())
            .collect();
        unadjusted = unadjusted
            .and_then(|acc| acc.checked_add(completed_dim_drop(g.alphabets(), level, &supports)?.checked_mul(2)?));
        let t = class_test(&g, &class);
        if t.separated {
            warnings.push(format!("separation among states {states:?}"));
        }
        parts.push(TestPart {
            level,
            states,
            stratum: None,
            table: t.table,
            g2: t.g2,
            df: t.df,
        });
    }
    let mut result = TestResult::from_parts(parts, unadjusted);
    result.warnings = warnings;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automaton::ids;
    use crate::fixtures;
    use crate::ingest::sample_apfa;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn simulate(a: f64, b: f64, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut ones, mut zeros) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            if rng.random::<f64>() < sigmoid(a + b * z) {
                ones.push(z);
            } else {
                zeros.push(z);
            }
        }
        (ones, zeros)
    }

    #[test]
    fn recovers_known_coefficients() {
        let (ones, zeros) = simulate(-1.0, 0.5, 10_000, 11);
        let fit = fit_binary_logistic(&ones, &zeros);
        assert_eq!(fit.status, FitStatus::Converged);
        assert!(fit.max_gradient < 1e-8);
        let (a, b) = (fit.intercept.unwrap(), fit.slope.unwrap());
        assert!((a + 1.0).abs() < 3.0 * fit.se_intercept.unwrap(), "a = {a}");
        assert!((b - 0.5).abs() < 3.0 * fit.se_slope.unwrap(), "b = {b}");
    }

    #[test]
    fn flat_effect_gives_the_marginal_logit() {
        let (ones, zeros) = simulate(0.3, 0.0, 5_000, 2);
        let fit = fit_binary_logistic(&ones, &zeros);
        let logit = (ones.len() as f64 / zeros.len() as f64).ln();
        assert!((fit.intercept.unwrap() - logit).abs() < 3.0 * fit.se_intercept.unwrap());
        assert!(fit.slope.unwrap().abs() < 3.0 * fit.se_slope.unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (ones, zeros) = simulate(0.2, -0.7, 300, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a: f64 = rng.random_range(-2.0..2.0);
            let b: f64 = rng.random_range(-2.0..2.0);
            let g = logistic_score(a, b, &ones, &zeros);
            let h = 1e-5;
            let da = (logistic_loglik(a + h, b, &ones, &zeros) - logistic_loglik(a - h, b, &ones, &zeros)) / (2.0 * h);
            let db = (logistic_loglik(a, b + h, &ones, &zeros) - logistic_loglik(a, b - h, &ones, &zeros)) / (2.0 * h);
            for (x, y) in [(g[0], da), (g[1], db)] {
                assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn shifted_covariate_converges() {
        let (ones, zeros) = simulate(-1.0, 0.5, 2_000, 3);
        let shift = |v: &[f64]| v.iter().map(|z| z + 40.0).collect::<Vec<_>>();
        let base = fit_binary_logistic(&ones, &zeros);
        let moved = fit_binary_logistic(&shift(&ones), &shift(&zeros));
        assert_eq!(moved.status, FitStatus::Converged);
        assert_abs_diff_eq!(base.slope.unwrap(), moved.slope.unwrap(), epsilon = 1e-6);
        assert_abs_diff_eq!(base.log_likelihood, moved.log_likelihood, epsilon = 1e-6);
    }

    #[test]
    fn separation_is_flagged() {
        let fit = fit_binary_logistic(&[2.0, 3.0], &[0.0, 1.0]);
        assert_eq!(fit.status, FitStatus::Separated);
        assert_eq!(fit.slope, None);
        assert_eq!(fit.log_likelihood, 0.0);

        // quasi-separation: ties at z = 1 leave one free probability
        let fit = fit_binary_logistic(&[1.0, 2.0, 3.0], &[0.0, 1.0, 1.0]);
        assert_eq!(fit.status, FitStatus::Separated);
        assert_abs_diff_eq!(fit.log_likelihood, (1.0f64 / 3.0).ln() + 2.0 * (2.0f64 / 3.0).ln(), epsilon = 1e-12);
        // the supremum bounds every finite fit
        assert!(logistic_loglik(0.0, 30.0, &[1.0, 2.0, 3.0], &[0.0, 1.0, 1.0]) < fit.log_likelihood);
    }

    #[test]
    fn degenerate_samples() {
        let fit = fit_binary_logistic(&[1.0, 2.0], &[]);
        assert_eq!(fit.status, FitStatus::SingleOutcome);
        assert_eq!(fit.params(), 0);
        let fit = fit_binary_logistic(&[1.0, 1.0, 1.0], &[1.0]);
        assert_eq!(fit.status, FitStatus::ConstantCovariate);
        assert_abs_diff_eq!(fit.intercept.unwrap(), 3f64.ln(), epsilon = 1e-12);
        assert!(fit.max_gradient < 1e-12);
    }

    fn with_values(d: Dataset, values: Vec<f64>) -> Dataset {
        d.with_covariate(Covariate::Continuous {
            name: "z".into(),
            values,
        })
        .unwrap()
    }

    #[test]
    fn edge_model_routes_every_row() {
        let d = fixtures::seventy_gapped();
        let values: Vec<f64> = (0..d.len()).map(|k| (k % 7) as f64).collect();
        let d = with_values(d, values);
        let c = sample_apfa(&d).unwrap();
        let m = fit_logistic_edges(&c, &d).unwrap();
        for e in 0..c.apfa().num_edges() {
            assert_eq!(m.edge_covariates(e).len() as u64, c.edge_count(e));
        }
        assert!(m.fit(c.apfa().sink()).is_none());
        assert_eq!(m.fits().count(), c.apfa().num_states() - 1);
    }

    #[test]
    fn merge_test_of_identical_laws_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for _ in 0..4000 {
            let z: f64 = rng.sample(StandardNormal);
            let x1 = if rng.random::<f64>() < 0.5 { 1 } else { 2 };
            let x2 = if rng.random::<f64>() < sigmoid(-0.5 + z) { 1 } else { 2 };
            rows.push(vec![x1, x2]);
            values.push(z);
        }
        let d = with_values(Dataset::from_rows(&rows).unwrap(), values);
        let c = sample_apfa(&d).unwrap();
        let m = fit_logistic_edges(&c, &d).unwrap();
        let t = logistic_merge_test(&m, &ids(&[2, 3])).unwrap();
        assert_eq!(t.df_adjusted, 2);
        assert!(t.g2 < 13.8, "g2 = {}", t.g2);
        assert!(t.warnings.is_empty());
    }

    #[test]
    fn non_binary_alphabets_are_rejected() {
        let d = Dataset::from_rows(&[vec![1, 3], vec![2, 1]]).unwrap();
        let d = with_values(d, vec![0.0, 1.0]);
        let c = sample_apfa(&d).unwrap();
        assert!(matches!(fit_logistic_edges(&c, &d), Err(Error::NonBinary { .. })));
    }
}

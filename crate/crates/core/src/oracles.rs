//! Closed-form and brute-force reference solutions used to check the
//! optimizers: bandit closed forms for regularized DPO and distilled DPO, the
//! IPO quadratic program on preference chains, exhaustive simplex grids, the
//! pessimistic ensemble solution, and the DPO degeneracy certificate.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{param, Error, Result};
use crate::losses::{PreferenceDataset, PreferencePair};
use crate::model::{
    kl_divergence, rlhf_optimal_policy, Conditional, KlDirection, OutcomeSpace, PromptDistribution, ReferencePolicy,
    RewardEnsemble, Table, TabularPolicy,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChainKind {
    /// Adjacent comparisons only.
    Chain,
    /// Every ordered comparison implied by the chain.
    Closure,
}

impl ChainKind {
    pub fn name(self) -> &'static str {
        match self {
            ChainKind::Chain => "chain",
            ChainKind::Closure => "closure",
        }
    }
}

/// A totally ordered bandit: arm `i + 1` beats arm `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChainPreferences {
    pub n: usize,
    pub kind: ChainKind,
}

impl ChainPreferences {
    pub fn new(n: usize, kind: ChainKind) -> Result<Self> {
        if n < 2 {
            return param(format!("a chain needs at least 2 arms, got {n}"));
        }
        Ok(Self { n, kind })
    }

    /// Pairs in a single context, dispreferred arm listed with the lower index.
    pub fn pairs(&self) -> Vec<PreferencePair> {
        match self.kind {
            ChainKind::Chain => (0..self.n - 1).map(|i| PreferencePair::new(0, i + 1, i)).collect(),
            ChainKind::Closure => (0..self.n)
                .flat_map(|i| (i + 1..self.n).map(move |j| PreferencePair::new(0, j, i)))
                .collect(),
        }
    }

    pub fn dataset(&self) -> PreferenceDataset {
        PreferenceDataset::new(self.pairs()).expect("chains have at least one pair")
    }
}

/// Log-policy arm weights with zero mean, and their spread.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiSolution {
    pub psi: Vec<f64>,
    pub psi_inf: f64,
}

impl PsiSolution {
    pub fn from_psi(psi: Vec<f64>) -> Self {
        let max = psi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = psi.iter().copied().fold(f64::INFINITY, f64::min);
        Self { psi, psi_inf: max - min }
    }

    /// Arm probabilities `softmax(ψ)`.
    pub fn probs(&self) -> Vec<f64> {
        crate::numeric::softmax(&self.psi)
    }
}

fn unit(v: f64, what: &str) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return param(format!("{what} must lie in (0, 1), got {v}"));
    }
    Ok(())
}

/// Minimizer over `π(y_l)` at fixed `π(y_w)` of the pairwise regularized DPO
/// objective with penalty `β/α`: `min(1 − π_w, π_w (π_ref,l / π_ref,w) (α − 1)^{−1/β})`.
pub fn pdpo_closed_form(pi_w: f64, ref_w: f64, ref_l: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 1.0) {
        return param(format!("alpha must exceed 1, got {alpha}"));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return param(format!("beta must be positive, got {beta}"));
    }
    unit(pi_w, "pi_w")?;
    unit(ref_w, "ref_w")?;
    unit(ref_l, "ref_l")?;
    let log = -(alpha - 1.0).ln() / beta + pi_w.ln() + (ref_l / ref_w).ln();
    Ok((1.0 - pi_w).min(log.exp()))
}

/// Minimizer over `π(y_l)` at fixed `π(y_w)` of the pairwise distillation
/// objective: `min(1 − π_w, π_w (π_ref,l / π_ref,w) exp((r_l − r_w)/β))`.
pub fn ddpo_closed_form(pi_w: f64, ref_w: f64, ref_l: f64, r_diff_lw: f64, beta: f64) -> Result<f64> {
    if !(beta.is_finite() && beta > 0.0) {
        return param(format!("beta must be positive, got {beta}"));
    }
    if !r_diff_lw.is_finite() {
        return param("reward difference must be finite");
    }
    unit(pi_w, "pi_w")?;
    unit(ref_w, "ref_w")?;
    unit(ref_l, "ref_l")?;
    let log = r_diff_lw / beta + pi_w.ln() + (ref_l / ref_w).ln();
    Ok((1.0 - pi_w).min(log.exp()))
}

/// Analytic IPO solution on a chain or its closure under a uniform reference.
pub fn ipo_chain_solution(n: usize, tau_inv: f64, kind: ChainKind) -> Result<PsiSolution> {
    if n < 2 {
        return param(format!("a chain needs at least 2 arms, got {n}"));
    }
    if !tau_inv.is_finite() {
        return param("tau_inv must be finite");
    }
    let spacing = match kind {
        ChainKind::Chain => tau_inv,
        ChainKind::Closure => 2.0 * tau_inv / n as f64,
    };
    let mid = (n - 1) as f64 / 2.0;
    let psi = (0..n).map(|i| (i as f64 - mid) * spacing).collect();
    Ok(PsiSolution { psi, psi_inf: (n - 1) as f64 * spacing })
}

fn components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

/// Exact minimizer of the weighted IPO objective over log-policy weights of a
/// single context, via the normal equations. Each connected component of the
/// comparison graph is gauged to zero mean; arms in no comparison get 0.
pub fn ipo_quadratic_solve(prefs: &PreferenceDataset, reference: &ReferencePolicy, tau_inv: f64) -> Result<PsiSolution> {
    if !tau_inv.is_finite() {
        return param("tau_inv must be finite");
    }
    let x = prefs.pairs()[0].x;
    if prefs.pairs().iter().any(|p| p.x != x) {
        return param("ipo_quadratic_solve expects every pair in one context");
    }
    prefs.validate(&reference.shape())?;
    let lr = reference.log_prob_table().row(x);
    let n = lr.len();
    let mut lap = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for (p, &w) in prefs.pairs().iter().zip(prefs.weights()) {
        let (a, b) = (p.y_w, p.y_l);
        let c = tau_inv + lr[a] - lr[b];
        lap[(a, a)] += w;
        lap[(b, b)] += w;
        lap[(a, b)] -= w;
        lap[(b, a)] -= w;
        rhs[a] += w * c;
        rhs[b] -= w * c;
    }
    let edges: Vec<_> = prefs.pairs().iter().map(|p| (p.y_w, p.y_l)).collect();
    let comp = components(n, &edges);
    let mut sizes: HashMap<usize, usize> = HashMap::new();
    for &c in &comp {
        *sizes.entry(c).or_default() += 1;
    }
    for i in 0..n {
        for j in 0..n {
            if comp[i] == comp[j] {
                lap[(i, j)] += 1.0 / sizes[&comp[i]] as f64;
            }
        }
    }
    let psi = lap
        .cholesky()
        .ok_or_else(|| Error::Precondition("IPO normal equations are not positive definite".into()))?
        .solve(&rhs);
    Ok(PsiSolution::from_psi(psi.iter().copied().collect()))
}

/// Largest grid the brute-force oracle will enumerate.
pub const GRID_LIMIT: u128 = 100_000_000;

fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, parts: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(left - k, parts - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(total, parts, &mut Vec::with_capacity(parts), &mut out);
    out
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Exhaustive minimization over the simplex grid with spacing `grid_step` in
/// every context. Grid points are visited in lexicographic order of their
/// count vectors and the first minimizer wins; NaN losses count as `+inf`.
pub fn grid_brute_force<F>(loss: F, space: &OutcomeSpace, grid_step: f64) -> Result<TabularPolicy>
where
    F: Fn(&TabularPolicy) -> Result<f64>,
{
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return param(format!("grid step {grid_step} outside (0, 1]"));
    }
    let total = (1.0 / grid_step).round();
    if ((1.0 / grid_step) - total).abs() > 1e-9 * total {
        return param(format!("grid step {grid_step} does not divide 1"));
    }
    let total = total as usize;
    let shape = space.shape();
    if let Some(n) = shape.iter().find(|&&n| n > 4) {
        return param(format!("grid oracle supports at most 4 outcomes per context, got {n}"));
    }
    let points = shape
        .iter()
        .fold(1u128, |acc, &n| acc.saturating_mul(binomial(total as u128 + n as u128 - 1, n as u128 - 1)));
    if points > GRID_LIMIT {
        return Err(Error::GridTooLarge { points, limit: GRID_LIMIT });
    }
    let per_context: Vec<Vec<Vec<f64>>> = shape
        .iter()
        .map(|&n| {
            compositions(total, n)
                .into_iter()
                .map(|c| c.into_iter().map(|k| (k as f64 / total as f64).ln()).collect())
                .collect()
        })
        .collect();
    let mut idx = vec![0usize; shape.len()];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let logits = Table::from_rows(idx.iter().enumerate().map(|(x, &i)| per_context[x][i].clone()).collect());
        let v = loss(&TabularPolicy::new(logits)?)?;
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, idx.clone()));
        }
        // Mixed-radix increment, last context fastest.
        let mut x = shape.len();
        loop {
            if x == 0 {
                let (_, i) = best.expect("grid has at least one point");
                let rows = i.iter().enumerate().map(|(x, &k)| per_context[x][k].clone()).collect();
                return TabularPolicy::new(Table::from_rows(rows));
            }
            x -= 1;
            idx[x] += 1;
            if idx[x] < per_context[x].len() {
                break;
            }
            idx[x] = 0;
        }
    }
}

/// The member of `{π_i ∝ π_ref exp(r_i/β)}` closest to the reference in
/// forward KL, with its index. Near-ties (relative 1e-12) go to the lower index.
pub fn pessimistic_set_solution(
    ensemble: &RewardEnsemble,
    reference: &ReferencePolicy,
    mu: &PromptDistribution,
    beta: f64,
) -> Result<(TabularPolicy, usize)> {
    let mut best: Option<(f64, usize, TabularPolicy)> = None;
    for (i, r) in ensemble.members().iter().enumerate() {
        let pi = rlhf_optimal_policy(reference, r, beta)?;
        let kl = kl_divergence(&pi, reference, mu, KlDirection::Forward)?;
        let better = match &best {
            None => true,
            Some((b, _, _)) => kl < b - 1e-12 * b.abs().max(1e-300),
        };
        if better {
            best = Some((kl, i, pi));
        }
    }
    let (_, i, pi) = best.ok_or_else(|| Error::Parameter("reward ensemble must be nonempty".into()))?;
    Ok((pi, i))
}

/// Degeneracy summary of a policy on disjoint preference data, worst case over contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct DegeneracyReport {
    /// Largest total mass any context puts on its dispreferred outcomes.
    pub mass_on_losers: f64,
    /// Smallest probability of any preferred outcome.
    pub min_winner_prob: f64,
    /// Smallest total mass any context puts on outcomes absent from the data.
    pub mass_on_unseen: f64,
    pub eps: f64,
    pub passed: bool,
}

/// Checks that `policy` looks like a global DPO minimizer on disjoint data:
/// almost no mass on dispreferred outcomes and positive mass on every preferred one.
pub fn dpo_degeneracy_certificate(policy: &TabularPolicy, data: &PreferenceDataset, eps: f64) -> Result<DegeneracyReport> {
    let shape = policy.shape();
    data.validate(&shape)?;
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    for (k, p) in data.pairs().iter().enumerate() {
        for y in [p.y_w, p.y_l] {
            if let Some(prev) = seen.insert((p.x, y), k) {
                return Err(Error::Precondition(format!(
                    "dataset is not disjoint: outcome {y} of context {} appears in pairs {prev} and {k}",
                    p.x
                )));
            }
        }
    }
    let mut losers = 0.0f64;
    let mut winners = f64::INFINITY;
    let mut unseen = f64::INFINITY;
    let mut contexts: Vec<usize> = data.pairs().iter().map(|p| p.x).collect();
    contexts.sort_unstable();
    contexts.dedup();
    for x in contexts {
        let probs = policy.probs(x);
        let mut l = 0.0;
        for p in data.pairs().iter().filter(|p| p.x == x) {
            l += probs[p.y_l];
            winners = winners.min(probs[p.y_w]);
        }
        let u: f64 = probs.iter().enumerate().filter(|(y, _)| !seen.contains_key(&(x, *y))).map(|(_, p)| p).sum();
        losers = losers.max(l);
        unseen = unseen.min(u);
    }
    Ok(DegeneracyReport {
        mass_on_losers: losers,
        min_winner_prob: winners,
        mass_on_unseen: unseen,
        eps,
        passed: losers < eps && winners > 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{distill_loss, dpo_loss, TripleDataset};
    use crate::model::{pessimistic_objective, RewardTable};

    #[test]
    fn pdpo_closed_form_examples() {
        assert!((pdpo_closed_form(0.3, 0.5, 0.5, 2.0, 1.7).unwrap() - 0.3).abs() < 1e-15);
        assert!((pdpo_closed_form(0.9, 0.5, 0.5, 2.0, 1.7).unwrap() - 0.1).abs() < 1e-15);
        let beta: f64 = 2.5;
        let v = pdpo_closed_form(0.3, 0.5, 0.5, 1.0 + beta.exp(), beta).unwrap();
        assert!((v - 0.3 * (-1f64).exp()).abs() < 1e-14);
        assert!((v - 0.110364).abs() < 1e-6);
        assert!(pdpo_closed_form(0.3, 0.5, 0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn ddpo_closed_form_examples() {
        for pw in [0.2, 0.5, 0.7] {
            assert!((ddpo_closed_form(pw, 0.5, 0.5, 0.0, 0.4).unwrap() - pw.min(1.0 - pw)).abs() < 1e-15);
        }
        let v = ddpo_closed_form(0.3, 0.5, 0.5, -0.8, 0.8).unwrap();
        assert!((v - 0.3 * (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn chain_solution_examples() {
        assert_eq!(ipo_chain_solution(3, 1.0, ChainKind::Chain).unwrap().psi_inf, 2.0);
        assert!((ipo_chain_solution(3, 1.0, ChainKind::Closure).unwrap().psi_inf - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(ipo_chain_solution(2, 1.0, ChainKind::Chain).unwrap().psi_inf, 1.0);
        assert_eq!(ipo_chain_solution(2, 1.0, ChainKind::Closure).unwrap().psi_inf, 1.0);
        assert!(ipo_chain_solution(1, 1.0, ChainKind::Chain).is_err());
    }

    #[test]
    fn quadratic_solve_examples() {
        let r4 = ReferencePolicy::uniform_shape(&[4]);
        let chain = ipo_quadratic_solve(&ChainPreferences::new(4, ChainKind::Chain).unwrap().dataset(), &r4, 1.0).unwrap();
        assert!((chain.psi_inf - 3.0).abs() < 1e-12);
        for w in chain.psi.windows(2) {
            assert!((w[1] - w[0] - 1.0).abs() < 1e-12);
        }
        let clos = ipo_quadratic_solve(&ChainPreferences::new(4, ChainKind::Closure).unwrap().dataset(), &r4, 1.0).unwrap();
        assert!((clos.psi_inf - 1.5).abs() < 1e-12);
        let single = PreferenceDataset::new(vec![PreferencePair::new(0, 2, 0)]).unwrap();
        let s = ipo_quadratic_solve(&single, &ReferencePolicy::uniform_shape(&[3]), 2.0).unwrap();
        assert!((s.psi[2] - s.psi[0] - 2.0).abs() < 1e-15);
        assert_eq!(s.psi[1], 0.0);
        assert!(s.psi.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn grid_examples() {
        let space = OutcomeSpace::single(3).unwrap();
        let first = grid_brute_force(|_| Ok(1.0), &space, 0.25).unwrap();
        assert_eq!(first.probs(0), vec![0.0, 0.0, 1.0]);

        let reference = ReferencePolicy::uniform_shape(&[2]);
        let target = RewardTable::from_rows(vec![vec![0.7, -0.1]]).unwrap();
        let t = TripleDataset::full_support(&[2], &PromptDistribution::uniform(1)).unwrap();
        let two = OutcomeSpace::single(2).unwrap();
        let g = grid_brute_force(|p| Ok(distill_loss(&target, p, &reference, &t, 0.5)?.value), &two, 1e-3).unwrap();
        let star = rlhf_optimal_policy(&reference, &target, 0.5).unwrap();
        assert!((g.probs(0)[0] - star.probs(0)[0]).abs() <= 1e-3);

        let d = PreferenceDataset::new(vec![PreferencePair::new(0, 0, 1)]).unwrap();
        let g = grid_brute_force(|p| Ok(dpo_loss(p, &reference, &d, 1.0)?.value), &two, 1e-2).unwrap();
        assert_eq!(g.probs(0)[1], 0.0);

        let big = OutcomeSpace::uniform(3, 4).unwrap();
        assert!(matches!(grid_brute_force(|_| Ok(0.0), &big, 1e-3), Err(Error::GridTooLarge { .. })));
    }

    #[test]
    fn pessimistic_set_examples() {
        let reference = ReferencePolicy::new(vec![vec![0.2, 0.3, 0.5]]).unwrap();
        let mu = PromptDistribution::uniform(1);
        let r = RewardTable::from_rows(vec![vec![1.0, -0.5, 0.2]]).unwrap();
        let single = RewardEnsemble::new(vec![r.clone()]).unwrap();
        let (pi, i) = pessimistic_set_solution(&single, &reference, &mu, 0.7).unwrap();
        assert_eq!(i, 0);
        assert_eq!(pi, rlhf_optimal_policy(&reference, &r, 0.7).unwrap());
        let shifted = RewardEnsemble::new(vec![r.clone(), r.shifted(3.0).unwrap()]).unwrap();
        assert_eq!(pessimistic_set_solution(&shifted, &reference, &mu, 0.7).unwrap().1, 0);

        let s = RewardEnsemble::new(vec![
            RewardTable::from_rows(vec![vec![2.0, 0.0, -1.0]]).unwrap(),
            RewardTable::from_rows(vec![vec![0.1, 0.0, 0.0]]).unwrap(),
        ])
        .unwrap();
        let (pi, i) = pessimistic_set_solution(&s, &reference, &mu, 0.5).unwrap();
        let v = pessimistic_objective(&pi, &s, &reference, &mu, 0.5).unwrap();
        for r in s.members() {
            let other = rlhf_optimal_policy(&reference, r, 0.5).unwrap();
            assert!(pessimistic_objective(&other, &s, &reference, &mu, 0.5).unwrap() <= v + 1e-15);
        }
        assert_eq!(i, 1);
    }

    #[test]
    fn certificate_examples() {
        let d = PreferenceDataset::new(vec![
            PreferencePair::new(0, 0, 1),
            PreferencePair::new(0, 2, 3),
            PreferencePair::new(0, 4, 5),
        ])
        .unwrap();
        let hand = TabularPolicy::from_probs(vec![vec![0.01, 0.0, 0.01, 0.0, 0.01, 0.0, 0.97]]).unwrap();
        let rep = dpo_degeneracy_certificate(&hand, &d, 1e-3).unwrap();
        assert!(rep.passed);
        assert!((rep.mass_on_unseen - 0.97).abs() < 1e-15);
        let uniform = TabularPolicy::from_shape(&[7]);
        let rep = dpo_degeneracy_certificate(&uniform, &d, 1e-3).unwrap();
        assert!(!rep.passed);
        assert!((rep.mass_on_losers - 3.0 / 7.0).abs() < 1e-15);
        let bad = PreferenceDataset::new(vec![PreferencePair::new(0, 0, 1), PreferencePair::new(0, 1, 2)]).unwrap();
        let err = dpo_degeneracy_certificate(&uniform, &bad, 1e-3).unwrap_err().to_string();
        assert!(err.contains("outcome 1"), "{err}");
    }
}

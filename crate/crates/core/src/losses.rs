//! Preference datasets and the five training objectives with analytic logit
//! gradients, plus a central finite-difference checker.
//!
//! Every loss is a weighted mean over its dataset. Pair and triple losses
//! depend on a context's logits only through differences, so their gradients
//! touch exactly two logits per item.

use crate::error::{param, Error, Result};
use crate::model::{check_index, ensure_shape, Conditional, PromptDistribution, ReferencePolicy, RewardEnsemble, RewardTable, Table, TabularPolicy};
use crate::numeric::{sigmoid, softplus};

/// One labeled comparison: `y_w` preferred over `y_l` in context `x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PreferencePair {
    pub x: usize,
    pub y_w: usize,
    pub y_l: usize,
}

impl PreferencePair {
    pub fn new(x: usize, y_w: usize, y_l: usize) -> Self {
        Self { x, y_w, y_l }
    }
}

fn normalized_weights(weights: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    if weights.len() != n {
        return Err(Error::Shape(format!("{} weights for {n} items", weights.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return param("dataset weights must be finite and nonnegative");
    }
    let s: f64 = weights.iter().sum();
    if s <= 0.0 {
        return param("dataset weights sum to zero");
    }
    Ok(weights.into_iter().map(|w| w / s).collect())
}

/// Labeled pairs with normalized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset {
    pairs: Vec<PreferencePair>,
    weights: Vec<f64>,
}

impl PreferenceDataset {
    /// Uniform weights.
    pub fn new(pairs: Vec<PreferencePair>) -> Result<Self> {
        let n = pairs.len();
        Self::with_weights(pairs, vec![1.0; n])
    }

    /// Nonnegative weights, rescaled to sum to 1.
    pub fn with_weights(pairs: Vec<PreferencePair>, weights: Vec<f64>) -> Result<Self> {
        if pairs.is_empty() {
            return param("preference dataset must be nonempty");
        }
        if let Some(p) = pairs.iter().find(|p| p.y_w == p.y_l) {
            return param(format!("pair {p:?} compares an outcome with itself"));
        }
        let weights = normalized_weights(weights, pairs.len())?;
        Ok(Self { pairs, weights })
    }

    pub fn pairs(&self) -> &[PreferencePair] {
        &self.pairs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self, shape: &[usize]) -> Result<()> {
        for p in &self.pairs {
            check_index(shape, p.x, p.y_w)?;
            check_index(shape, p.x, p.y_l)?;
        }
        Ok(())
    }

    /// Items at `indices`, weights renormalized.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut pairs = Vec::with_capacity(indices.len());
        let mut weights = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self.pairs.get(i).ok_or_else(|| Error::Parameter(format!("batch index {i} out of range")))?;
            pairs.push(*p);
            weights.push(self.weights[i]);
        }
        Self::with_weights(pairs, weights)
    }

    /// Duplicate pairs merged into one weighted entry, in order of first appearance.
    pub fn aggregated(&self) -> Self {
        let mut index = std::collections::HashMap::new();
        let mut pairs = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (p, &w) in self.pairs.iter().zip(&self.weights) {
            match index.get(p) {
                Some(&i) => weights[i] += w,
                None => {
                    index.insert(*p, pairs.len());
                    pairs.push(*p);
                    weights.push(w);
                }
            }
        }
        Self { pairs, weights }
    }
}

/// Unlabeled comparison `(x, y1, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub x: usize,
    pub y1: usize,
    pub y2: usize,
}

/// Unlabeled triples with normalized weights. `y1 == y2` is allowed and contributes nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleDataset {
    triples: Vec<Triple>,
    weights: Vec<f64>,
}

impl TripleDataset {
    pub fn new(triples: Vec<Triple>) -> Result<Self> {
        let n = triples.len();
        Self::with_weights(triples, vec![1.0; n])
    }

    pub fn with_weights(triples: Vec<Triple>, weights: Vec<f64>) -> Result<Self> {
        if triples.is_empty() {
            return param("triple dataset must be nonempty");
        }
        let weights = normalized_weights(weights, triples.len())?;
        Ok(Self { triples, weights })
    }

    /// Every `(x, y1, y2)` with weight `μ(x) / n_x²`.
    pub fn full_support(shape: &[usize], mu: &PromptDistribution) -> Result<Self> {
        ensure_shape(&[shape.len()], &[mu.len()], "prompt distribution")?;
        let mut triples = Vec::new();
        let mut weights = Vec::new();
        for (x, &n) in shape.iter().enumerate() {
            for y1 in 0..n {
                for y2 in 0..n {
                    triples.push(Triple { x, y1, y2 });
                    weights.push(mu.weights()[x] / (n * n) as f64);
                }
            }
        }
        Self::with_weights(triples, weights)
    }

    /// The pairs of a preference dataset with their labels dropped.
    pub fn from_preferences(data: &PreferenceDataset) -> Self {
        Self {
            triples: data.pairs().iter().map(|p| Triple { x: p.x, y1: p.y_w, y2: p.y_l }).collect(),
            weights: data.weights().to_vec(),
        }
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn validate(&self, shape: &[usize]) -> Result<()> {
        for t in &self.triples {
            check_index(shape, t.x, t.y1)?;
            check_index(shape, t.x, t.y2)?;
        }
        Ok(())
    }

    /// Items at `indices`, weights renormalized.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut triples = Vec::with_capacity(indices.len());
        let mut weights = Vec::with_capacity(indices.len());
        for &i in indices {
            let t = self.triples.get(i).ok_or_else(|| Error::Parameter(format!("batch index {i} out of range")))?;
            triples.push(*t);
            weights.push(self.weights[i]);
        }
        Self::with_weights(triples, weights)
    }
}

/// Loss value, logit gradient, and the ensemble member that attained the min.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValueAndGrad {
    pub value: f64,
    pub grad: Table,
    pub selected_member: Option<usize>,
    /// The DPO, IPO or distillation part of `value`, without any KL penalty.
    pub data_term: f64,
}

/// How the KL penalty of pessimistic DPO is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KlMode {
    /// `E_μ KL(π_ref ‖ π)`.
    #[default]
    Exact,
    /// Mean of `−log π(y_w) − log π(y_l)` over the preference pairs.
    Empirical,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta.is_finite() && beta > 0.0) {
        return param(format!("beta must be positive, got {beta}"));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return param(format!("gamma must be nonnegative, got {gamma}"));
    }
    Ok(())
}

fn pair_setup(policy: &TabularPolicy, reference: &ReferencePolicy, data: &PreferenceDataset) -> Result<Vec<usize>> {
    let shape = policy.shape();
    ensure_shape(&shape, &reference.shape(), "reference")?;
    data.validate(&shape)?;
    Ok(shape)
}

/// Log-ratio margin `log π(a)/π(b) − log π_ref(a)/π_ref(b)`.
fn margin(policy: &TabularPolicy, reference: &ReferencePolicy, x: usize, a: usize, b: usize) -> f64 {
    let th = policy.logits().row(x);
    let lr = reference.log_prob_table().row(x);
    (th[a] - th[b]) - (lr[a] - lr[b])
}

/// Weighted mean of `−log σ(β m)`.
pub fn dpo_loss(policy: &TabularPolicy, reference: &ReferencePolicy, data: &PreferenceDataset, beta: f64) -> Result<LossValueAndGrad> {
    check_beta(beta)?;
    let shape = pair_setup(policy, reference, data)?;
    let mut grad = Table::zeros(&shape);
    let mut value = 0.0;
    for (p, &w) in data.pairs().iter().zip(data.weights()) {
        let z = beta * margin(policy, reference, p.x, p.y_w, p.y_l);
        value += w * softplus(-z);
        let s = -beta * sigmoid(-z) * w;
        grad.add(p.x, p.y_w, s);
        grad.add(p.x, p.y_l, -s);
    }
    Ok(LossValueAndGrad { value, grad, selected_member: None, data_term: value })
}

/// Weighted mean of `(m − τ⁻¹)²`.
pub fn ipo_loss(policy: &TabularPolicy, reference: &ReferencePolicy, data: &PreferenceDataset, tau_inv: f64) -> Result<LossValueAndGrad> {
    if !tau_inv.is_finite() {
        return param("tau_inv must be finite");
    }
    let shape = pair_setup(policy, reference, data)?;
    let mut grad = Table::zeros(&shape);
    let mut value = 0.0;
    for (p, &w) in data.pairs().iter().zip(data.weights()) {
        let h = margin(policy, reference, p.x, p.y_w, p.y_l) - tau_inv;
        value += w * h * h;
        grad.add(p.x, p.y_w, 2.0 * w * h);
        grad.add(p.x, p.y_l, -2.0 * w * h);
    }
    Ok(LossValueAndGrad { value, grad, selected_member: None, data_term: value })
}

/// Weighted mean of `(r(y1) − r(y2) − β m(y1, y2))²`.
pub fn distill_loss(
    target: &RewardTable,
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    triples: &TripleDataset,
    beta: f64,
) -> Result<LossValueAndGrad> {
    check_beta(beta)?;
    let shape = policy.shape();
    ensure_shape(&shape, &reference.shape(), "reference")?;
    ensure_shape(&shape, &target.shape(), "target reward")?;
    triples.validate(&shape)?;
    let r = target.values();
    let mut grad = Table::zeros(&shape);
    let mut value = 0.0;
    for (t, &w) in triples.triples().iter().zip(triples.weights()) {
        if t.y1 == t.y2 {
            continue;
        }
        let h = (r.get(t.x, t.y1) - r.get(t.x, t.y2)) - beta * margin(policy, reference, t.x, t.y1, t.y2);
        value += w * h * h;
        let s = -2.0 * beta * h * w;
        grad.add(t.x, t.y1, s);
        grad.add(t.x, t.y2, -s);
    }
    Ok(LossValueAndGrad { value, grad, selected_member: None, data_term: value })
}

/// `E_μ KL(π_ref ‖ π)` and its logit gradient `μ(x)(π − π_ref)`.
///
/// Returns `+inf` if the policy puts zero mass where the reference does not.
pub fn forward_kl_with_grad(policy: &TabularPolicy, reference: &ReferencePolicy, mu: &PromptDistribution) -> Result<(f64, Table)> {
    let shape = policy.shape();
    ensure_shape(&shape, &reference.shape(), "reference")?;
    ensure_shape(&[shape.len()], &[mu.len()], "prompt distribution")?;
    let mut grad = Table::zeros(&shape);
    let mut value = 0.0;
    for (x, &m) in mu.weights().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let lp = policy.log_probs(x);
        let lr = reference.log_prob_table().row(x);
        let g = grad.row_mut(x);
        for y in 0..lp.len() {
            let q = lr[y].exp();
            value += m * q * (lr[y] - lp[y]);
            g[y] = m * (lp[y].exp() - q);
        }
    }
    Ok((value, grad))
}

/// Mean of `−log π(y_w) − log π(y_l)` and its gradient `2π − e_w − e_l` per pair.
fn empirical_kl_with_grad(policy: &TabularPolicy, data: &PreferenceDataset) -> (f64, Table) {
    let shape = policy.shape();
    let mut grad = Table::zeros(&shape);
    let mut value = 0.0;
    let mut probs: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; shape.len()];
    for (p, &w) in data.pairs().iter().zip(data.weights()) {
        let (lp, pr) = probs[p.x].get_or_insert_with(|| {
            let lp = policy.log_probs(p.x);
            let pr = lp.iter().map(|v| v.exp()).collect();
            (lp, pr)
        });
        value -= w * (lp[p.y_w] + lp[p.y_l]);
        let g = grad.row_mut(p.x);
        for (gy, py) in g.iter_mut().zip(pr.iter()) {
            *gy += 2.0 * w * py;
        }
        g[p.y_w] -= w;
        g[p.y_l] -= w;
    }
    (value, grad)
}

/// Min over members of the distillation loss on `batch`, plus `γ E_μ KL(π_ref ‖ π)`.
///
/// `batch` holds triple indices; `None` uses the whole dataset. Ties in the
/// min go to the lowest member index.
#[allow(clippy::too_many_arguments)]
pub fn pdistill_loss(
    ensemble: &RewardEnsemble,
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    triples: &TripleDataset,
    mu: &PromptDistribution,
    beta: f64,
    gamma: f64,
    batch: Option<&[usize]>,
) -> Result<LossValueAndGrad> {
    check_gamma(gamma)?;
    if ensemble.is_empty() {
        return param("reward ensemble must be nonempty");
    }
    let sub;
    let triples = match batch {
        Some(idx) => {
            sub = triples.subset(idx)?;
            &sub
        }
        None => triples,
    };
    let mut best: Option<(usize, LossValueAndGrad)> = None;
    for (i, r) in ensemble.members().iter().enumerate() {
        let l = distill_loss(r, policy, reference, triples, beta)?;
        if best.as_ref().is_none_or(|(_, b)| l.value < b.value) {
            best = Some((i, l));
        }
    }
    let (i, mut out) = best.expect("nonempty ensemble");
    out.selected_member = Some(i);
    if gamma > 0.0 {
        let (kl, g) = forward_kl_with_grad(policy, reference, mu)?;
        out.value += gamma * kl;
        out.grad.axpy(gamma, &g);
    }
    Ok(out)
}

/// DPO loss plus a γ-weighted KL penalty computed per `kl_mode`.
#[allow(clippy::too_many_arguments)]
pub fn pdpo_loss(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    data: &PreferenceDataset,
    mu: &PromptDistribution,
    beta: f64,
    gamma: f64,
    kl_mode: KlMode,
) -> Result<LossValueAndGrad> {
    check_gamma(gamma)?;
    let mut out = dpo_loss(policy, reference, data, beta)?;
    if gamma > 0.0 {
        let (kl, g) = match kl_mode {
            KlMode::Exact => forward_kl_with_grad(policy, reference, mu)?,
            KlMode::Empirical => empirical_kl_with_grad(policy, data),
        };
        out.value += gamma * kl;
        out.grad.axpy(gamma, &g);
    }
    Ok(out)
}

/// Central differences of `f` with respect to every logit.
pub fn finite_diff_grad<F>(f: F, policy: &TabularPolicy, eps: f64) -> Result<Table>
where
    F: Fn(&TabularPolicy) -> Result<f64>,
{
    if !(1e-8..=1e-3).contains(&eps) {
        return param(format!("finite-difference step {eps} outside [1e-8, 1e-3]"));
    }
    let shape = policy.shape();
    let mut grad = Table::zeros(&shape);
    let mut probe = policy.clone();
    for (x, &n) in shape.iter().enumerate() {
        for y in 0..n {
            let orig = policy.logits().get(x, y);
            probe.logits_mut().set(x, y, orig + eps);
            let up = f(&probe)?;
            probe.logits_mut().set(x, y, orig - eps);
            let down = f(&probe)?;
            probe.logits_mut().set(x, y, orig);
            grad.set(x, y, (up - down) / (2.0 * eps));
        }
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn relative_error(a: &Table, b: &Table) -> f64 {
    let mut diff = a.clone();
    diff.axpy(-1.0, b);
    diff.norm() / a.norm().max(b.norm()).max(1e-8)
}

/// The objective a driver minimizes.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    Dpo { data: PreferenceDataset, beta: f64 },
    Ipo { data: PreferenceDataset, tau_inv: f64 },
    Distill { target: RewardTable, triples: TripleDataset, beta: f64 },
    PessimisticDistill { ensemble: RewardEnsemble, triples: TripleDataset, mu: PromptDistribution, beta: f64, gamma: f64 },
    PessimisticDpo { data: PreferenceDataset, mu: PromptDistribution, beta: f64, gamma: f64, kl_mode: KlMode },
}

/// An objective bound to its reference policy.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub reference: ReferencePolicy,
    pub objective: Objective,
}

impl LossSpec {
    pub fn new(reference: ReferencePolicy, objective: Objective) -> Self {
        Self { reference, objective }
    }

    /// Evaluates at `policy`. `gamma` overrides the stored γ when the objective has one;
    /// `batch` restricts the data to the given item indices.
    pub fn evaluate(&self, policy: &TabularPolicy, gamma: Option<f64>, batch: Option<&[usize]>) -> Result<LossValueAndGrad> {
        let r = &self.reference;
        match &self.objective {
            Objective::Dpo { data, beta } => match batch {
                Some(b) => dpo_loss(policy, r, &data.subset(b)?, *beta),
                None => dpo_loss(policy, r, data, *beta),
            },
            Objective::Ipo { data, tau_inv } => match batch {
                Some(b) => ipo_loss(policy, r, &data.subset(b)?, *tau_inv),
                None => ipo_loss(policy, r, data, *tau_inv),
            },
            Objective::Distill { target, triples, beta } => match batch {
                Some(b) => distill_loss(target, policy, r, &triples.subset(b)?, *beta),
                None => distill_loss(target, policy, r, triples, *beta),
            },
            Objective::PessimisticDistill { ensemble, triples, mu, beta, gamma: g } => {
                pdistill_loss(ensemble, policy, r, triples, mu, *beta, gamma.unwrap_or(*g), batch)
            }
            Objective::PessimisticDpo { data, mu, beta, gamma: g, kl_mode } => match batch {
                Some(b) => pdpo_loss(policy, r, &data.subset(b)?, mu, *beta, gamma.unwrap_or(*g), *kl_mode),
                None => pdpo_loss(policy, r, data, mu, *beta, gamma.unwrap_or(*g), *kl_mode),
            },
        }
    }

    pub fn value(&self, policy: &TabularPolicy) -> Result<f64> {
        Ok(self.evaluate(policy, None, None)?.value)
    }

    /// Number of pairs or triples, i.e. the range of valid batch indices.
    pub fn n_items(&self) -> usize {
        match &self.objective {
            Objective::Dpo { data, .. } | Objective::Ipo { data, .. } | Objective::PessimisticDpo { data, .. } => data.len(),
            Objective::Distill { triples, .. } | Objective::PessimisticDistill { triples, .. } => triples.len(),
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match &self.objective {
            Objective::Ipo { .. } => None,
            Objective::Dpo { beta, .. }
            | Objective::Distill { beta, .. }
            | Objective::PessimisticDistill { beta, .. }
            | Objective::PessimisticDpo { beta, .. } => Some(*beta),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.reference.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::rlhf_optimal_policy;

    fn pair(w: usize, l: usize) -> PreferencePair {
        PreferencePair::new(0, w, l)
    }

    #[test]
    fn dpo_examples() {
        let r = ReferencePolicy::uniform_shape(&[3]);
        let d = PreferenceDataset::new(vec![pair(0, 1), pair(2, 1)]).unwrap();
        let l = dpo_loss(&r.as_policy(), &r, &d, 0.7).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-15);

        let r2 = ReferencePolicy::uniform_shape(&[2]);
        let pol = TabularPolicy::new(Table::from_rows(vec![vec![0.5, -0.5]])).unwrap();
        let d = PreferenceDataset::new(vec![pair(0, 1)]).unwrap();
        let v = dpo_loss(&pol, &r2, &d, 1.0).unwrap().value;
        let oracle = -(1.0 / (1.0 + (-1f64).exp())).ln();
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn dpo_decreasing_in_margin() {
        let r = ReferencePolicy::uniform_shape(&[2]);
        let d = PreferenceDataset::new(vec![pair(0, 1)]).unwrap();
        let mut prev = f64::INFINITY;
        for k in -20..60 {
            let m = k as f64 * 0.5;
            let pol = TabularPolicy::new(Table::from_rows(vec![vec![m, 0.0]])).unwrap();
            let v = dpo_loss(&pol, &r, &d, 1.0).unwrap().value;
            assert!(v > 0.0 && v < prev);
            prev = v;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn ipo_examples() {
        let r = ReferencePolicy::new(vec![vec![0.2, 0.3, 0.5]]).unwrap();
        let d = PreferenceDataset::new(vec![pair(0, 1), pair(1, 2)]).unwrap();
        assert_eq!(ipo_loss(&r.as_policy(), &r, &d, 0.0).unwrap().value, 0.0);
        assert!((ipo_loss(&r.as_policy(), &r, &d, 1.0).unwrap().value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn distill_examples() {
        let reference = ReferencePolicy::new(vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.3, 0.1]]).unwrap();
        let target = RewardTable::from_rows(vec![vec![0.3, -1.0, 2.0], vec![0.0, 1.5, -0.5]]).unwrap();
        let mu = PromptDistribution::uniform(2);
        let t = TripleDataset::full_support(&[3, 3], &mu).unwrap();
        let star = rlhf_optimal_policy(&reference, &target, 0.8).unwrap();
        assert!(distill_loss(&target, &star, &reference, &t, 0.8).unwrap().value < 1e-20);

        let constant = RewardTable::from_rows(vec![vec![1.0; 3], vec![-2.0; 3]]).unwrap();
        assert_eq!(distill_loss(&constant, &reference.as_policy(), &reference, &t, 0.8).unwrap().value, 0.0);

        let r = ReferencePolicy::uniform_shape(&[2]);
        let one = TripleDataset::new(vec![Triple { x: 0, y1: 0, y2: 1 }]).unwrap();
        let diff = RewardTable::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        assert_eq!(distill_loss(&diff, &r.as_policy(), &r, &one, 2.0).unwrap().value, 1.0);
    }

    #[test]
    fn pdistill_reductions_and_selection() {
        let r = ReferencePolicy::new(vec![vec![0.25, 0.25, 0.5]]).unwrap();
        let mu = PromptDistribution::uniform(1);
        let t = TripleDataset::full_support(&[3], &mu).unwrap();
        let pol = TabularPolicy::new(Table::from_rows(vec![vec![0.4, -0.1, 0.9]])).unwrap();
        let a = RewardTable::from_rows(vec![vec![0.0, 1.0, 0.5]]).unwrap();
        let b = RewardTable::from_rows(vec![vec![3.0, -2.0, 0.0]]).unwrap();

        let single = RewardEnsemble::new(vec![a.clone()]).unwrap();
        let p = pdistill_loss(&single, &pol, &r, &t, &mu, 0.5, 0.0, None).unwrap();
        let d = distill_loss(&a, &pol, &r, &t, 0.5).unwrap();
        assert_eq!(p.value, d.value);
        assert_eq!(p.grad, d.grad);
        assert_eq!(p.selected_member, Some(0));

        let la = distill_loss(&a, &pol, &r, &t, 0.5).unwrap().value;
        let lb = distill_loss(&b, &pol, &r, &t, 0.5).unwrap().value;
        assert!(la < lb);
        let pair_ens = RewardEnsemble::new(vec![b.clone(), a.clone()]).unwrap();
        let p = pdistill_loss(&pair_ens, &pol, &r, &t, &mu, 0.5, 0.0, None).unwrap();
        assert_eq!(p.selected_member, Some(1));
        assert_eq!(p.value, la);

        let tie = RewardEnsemble::new(vec![a.clone(), a.clone()]).unwrap();
        assert_eq!(pdistill_loss(&tie, &pol, &r, &t, &mu, 0.5, 0.0, None).unwrap().selected_member, Some(0));

        let consts = RewardEnsemble::new(vec![
            RewardTable::zeros(&[3]),
            RewardTable::from_rows(vec![vec![2.0; 3]]).unwrap(),
        ])
        .unwrap();
        assert_eq!(pdistill_loss(&consts, &r.as_policy(), &r, &t, &mu, 0.5, 3.0, None).unwrap().value, 0.0);
    }

    #[test]
    fn pdpo_reductions() {
        let r = ReferencePolicy::new(vec![vec![0.1, 0.6, 0.3]]).unwrap();
        let mu = PromptDistribution::uniform(1);
        let d = PreferenceDataset::new(vec![pair(0, 1), pair(2, 1)]).unwrap();
        let pol = TabularPolicy::new(Table::from_rows(vec![vec![0.4, -0.1, 0.9]])).unwrap();
        for mode in [KlMode::Exact, KlMode::Empirical] {
            let p = pdpo_loss(&pol, &r, &d, &mu, 0.3, 0.0, mode).unwrap();
            assert_eq!(p, dpo_loss(&pol, &r, &d, 0.3).unwrap());
        }
        let p = pdpo_loss(&r.as_policy(), &r, &d, &mu, 0.3, 0.7, KlMode::Exact).unwrap();
        assert!((p.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let r = ReferencePolicy::new(vec![vec![0.1, 0.6, 0.3], vec![0.5, 0.2, 0.3]]).unwrap();
        let mu = PromptDistribution::new(vec![0.3, 0.7]).unwrap();
        let d = PreferenceDataset::with_weights(vec![pair(0, 1), PreferencePair::new(1, 2, 0), pair(2, 1)], vec![1.0, 2.0, 0.5]).unwrap();
        let t = TripleDataset::full_support(&[3, 3], &mu).unwrap();
        let target = RewardTable::from_rows(vec![vec![0.3, -1.0, 2.0], vec![0.0, 1.5, -0.5]]).unwrap();
        let ens = RewardEnsemble::new(vec![target.clone(), target.shifted(1.0).unwrap()]).unwrap();
        let pol = TabularPolicy::new(Table::from_rows(vec![vec![0.4, -0.1, 0.9], vec![-1.2, 0.3, 0.05]])).unwrap();
        let specs = [
            Objective::Dpo { data: d.clone(), beta: 0.8 },
            Objective::Ipo { data: d.clone(), tau_inv: 1.3 },
            Objective::Distill { target: target.clone(), triples: t.clone(), beta: 0.8 },
            Objective::PessimisticDistill { ensemble: ens, triples: t, mu: mu.clone(), beta: 0.8, gamma: 0.3 },
            Objective::PessimisticDpo { data: d.clone(), mu: mu.clone(), beta: 0.8, gamma: 0.3, kl_mode: KlMode::Exact },
            Objective::PessimisticDpo { data: d, mu, beta: 0.8, gamma: 0.3, kl_mode: KlMode::Empirical },
        ];
        for o in specs {
            let spec = LossSpec::new(r.clone(), o);
            let analytic = spec.evaluate(&pol, None, None).unwrap().grad;
            let numeric = finite_diff_grad(|p| spec.value(p), &pol, 1e-6).unwrap();
            assert!(relative_error(&analytic, &numeric) < 1e-7, "{:?}", spec.objective);
        }
    }

    #[test]
    fn finite_diff_on_linear_function_and_range() {
        let pol = TabularPolicy::new(Table::from_rows(vec![vec![0.2, -0.3, 1.0]])).unwrap();
        let c = [1.5, -2.0, 0.25];
        let f = |p: &TabularPolicy| Ok(p.logits().row(0).iter().zip(&c).map(|(a, b)| a * b).sum());
        let g = finite_diff_grad(f, &pol, 1e-4).unwrap();
        for (a, b) in g.row(0).iter().zip(&c) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(finite_diff_grad(f, &pol, 1e-2).is_err());
        assert!(finite_diff_grad(f, &pol, 1e-9).is_err());
    }

    #[test]
    fn aggregation_and_subsets() {
        let d = PreferenceDataset::new(vec![pair(0, 1), pair(2, 1), pair(0, 1)]).unwrap();
        let a = d.aggregated();
        assert_eq!(a.pairs(), &[pair(0, 1), pair(2, 1)]);
        assert!((a.weights()[0] - 2.0 / 3.0).abs() < 1e-15);
        let s = d.subset(&[1, 2]).unwrap();
        assert_eq!(s.weights(), &[0.5, 0.5]);
        assert!(d.subset(&[3]).is_err());
        assert!(PreferenceDataset::new(vec![pair(1, 1)]).is_err());
        assert!(PreferenceDataset::new(vec![]).is_err());
    }
}

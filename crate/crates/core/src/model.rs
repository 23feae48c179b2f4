//! Finite outcome spaces, tabular and reference policies, reward tables, and the
//! closed-form alignment quantities every other module is checked against.
//!
//! Contexts and outcomes are addressed by index. Identifiers live on
//! [`OutcomeSpace`] and are only needed for reporting. All probability
//! arithmetic is done on log-probabilities.

use crate::error::{param, Error, Result};
use crate::numeric::{log_softmax, logsumexp, sigmoid};

/// Contexts, the outcomes available in each, and optional integer lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeSpace {
    contexts: Vec<String>,
    outcomes: Vec<Vec<String>>,
    lengths: Option<Vec<Vec<u32>>>,
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return param(format!("duplicate {what} identifier {id:?}"));
        }
    }
    Ok(())
}

impl OutcomeSpace {
    pub fn new(contexts: Vec<String>, outcomes: Vec<Vec<String>>) -> Result<Self> {
        if contexts.is_empty() {
            return param("an outcome space needs at least one context");
        }
        if contexts.len() != outcomes.len() {
            return Err(Error::Shape(format!(
                "{} contexts but {} outcome lists",
                contexts.len(),
                outcomes.len()
            )));
        }
        check_unique(&contexts, "context")?;
        for (x, ys) in outcomes.iter().enumerate() {
            if ys.len() < 2 {
                return param(format!("context {x} has {} outcomes, need at least 2", ys.len()));
            }
            check_unique(ys, "outcome")?;
        }
        Ok(Self { contexts, outcomes, lengths: None })
    }

    /// `n_contexts` contexts named `x0, x1, ...`, each with outcomes `y0, y1, ...`.
    pub fn uniform(n_contexts: usize, n_outcomes: usize) -> Result<Self> {
        Self::from_shape(&vec![n_outcomes; n_contexts])
    }

    /// The single dummy context used by the context-free analyses.
    pub fn single(n_outcomes: usize) -> Result<Self> {
        Self::uniform(1, n_outcomes)
    }

    pub fn from_shape(shape: &[usize]) -> Result<Self> {
        let contexts = (0..shape.len()).map(|x| format!("x{x}")).collect();
        let outcomes = shape.iter().map(|&n| (0..n).map(|y| format!("y{y}")).collect()).collect();
        Self::new(contexts, outcomes)
    }

    pub fn with_lengths(mut self, lengths: Vec<Vec<u32>>) -> Result<Self> {
        if lengths.len() != self.outcomes.len()
            || lengths.iter().zip(&self.outcomes).any(|(l, o)| l.len() != o.len())
        {
            return Err(Error::Shape("length table does not match the outcome space".into()));
        }
        self.lengths = Some(lengths);
        Ok(self)
    }

    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn n_outcomes(&self, x: usize) -> usize {
        self.outcomes[x].len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.outcomes.iter().map(Vec::len).collect()
    }

    pub fn context_id(&self, x: usize) -> &str {
        &self.contexts[x]
    }

    pub fn outcome_id(&self, x: usize, y: usize) -> &str {
        &self.outcomes[x][y]
    }

    pub fn lengths(&self) -> Option<&[Vec<u32>]> {
        self.lengths.as_deref()
    }

    pub fn length(&self, x: usize, y: usize) -> Option<u32> {
        self.lengths.as_ref().map(|l| l[x][y])
    }

    pub fn check(&self, x: usize, y: usize) -> Result<()> {
        check_index(&self.shape(), x, y)
    }
}

pub(crate) fn check_index(shape: &[usize], x: usize, y: usize) -> Result<()> {
    match shape.get(x) {
        None => Err(Error::UnknownContext(x)),
        Some(&n) if y >= n => Err(Error::UnknownOutcome { context: x, outcome: y }),
        Some(_) => Ok(()),
    }
}

pub(crate) fn ensure_shape(expected: &[usize], got: &[usize], what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!("{what}: expected {expected:?}, got {got:?}")));
    }
    Ok(())
}

/// A ragged table with one real per (context, outcome).
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { rows: shape.iter().map(|&n| vec![0.0; n]).collect() }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.rows
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.rows[x]
    }

    pub fn row_mut(&mut self, x: usize) -> &mut [f64] {
        &mut self.rows[x]
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.rows[x][y]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.rows[x][y] = v;
    }

    pub fn add(&mut self, x: usize, y: usize, v: f64) {
        self.rows[x][y] += v;
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flatten().copied()
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Table) {
        for (r, o) in self.rows.iter_mut().zip(&other.rows) {
            for (v, w) in r.iter_mut().zip(o) {
                *v += a * w;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.rows.iter_mut().flatten().for_each(|v| *v *= a);
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// Anything that defines a conditional distribution over outcomes per context.
pub trait Conditional {
    fn shape(&self) -> Vec<usize>;
    /// Normalized log-probabilities for context `x`.
    fn log_probs(&self, x: usize) -> Vec<f64>;

    fn probs(&self, x: usize) -> Vec<f64> {
        self.log_probs(x).into_iter().map(f64::exp).collect()
    }
}

/// Softmax policy with one free logit per (context, outcome).
///
/// Logits may be `-inf` (zero probability, used for simplex boundary points)
/// but never `+inf` or NaN, and each context keeps at least one finite logit.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    logits: Table,
}

impl TabularPolicy {
    pub fn new(logits: Table) -> Result<Self> {
        for (x, row) in logits.rows().iter().enumerate() {
            if row.len() < 2 {
                return param(format!("context {x} has fewer than 2 outcomes"));
            }
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return param(format!("context {x} has a NaN or +inf logit"));
            }
            if row.iter().all(|v| *v == f64::NEG_INFINITY) {
                return param(format!("context {x} has no outcome with positive probability"));
            }
        }
        Ok(Self { logits })
    }

    pub fn zeros(space: &OutcomeSpace) -> Self {
        Self { logits: Table::zeros(&space.shape()) }
    }

    pub fn from_shape(shape: &[usize]) -> Self {
        Self { logits: Table::zeros(shape) }
    }

    /// Logits `log p`; zero probabilities become `-inf` logits.
    pub fn from_probs(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (x, row) in rows.iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return param(format!("context {x} has an invalid probability"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return param(format!("context {x} probabilities sum to {s}"));
            }
        }
        Self::new(Table::from_rows(rows.into_iter().map(|r| r.into_iter().map(f64::ln).collect()).collect()))
    }

    pub fn logits(&self) -> &Table {
        &self.logits
    }

    pub fn into_logits(self) -> Table {
        self.logits
    }

    pub(crate) fn logits_mut(&mut self) -> &mut Table {
        &mut self.logits
    }

    pub fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        log_prob(self, x, y)
    }
}

impl Conditional for TabularPolicy {
    fn shape(&self) -> Vec<usize> {
        self.logits.shape()
    }

    fn log_probs(&self, x: usize) -> Vec<f64> {
        log_softmax(self.logits.row(x))
    }
}

/// Full-support reference policy, stored as normalized log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePolicy {
    log_probs: Table,
}

impl ReferencePolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        let mut rows = Vec::with_capacity(probs.len());
        for (x, row) in probs.iter().enumerate() {
            if row.len() < 2 {
                return param(format!("context {x} has fewer than 2 outcomes"));
            }
            if row.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                return param(format!("reference probabilities in context {x} must be strictly positive"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return param(format!("reference probabilities in context {x} sum to {s}"));
            }
            rows.push(log_softmax(&row.iter().map(|p| p.ln()).collect::<Vec<_>>()));
        }
        Ok(Self { log_probs: Table::from_rows(rows) })
    }

    pub fn uniform(space: &OutcomeSpace) -> Self {
        Self::uniform_shape(&space.shape())
    }

    pub fn uniform_shape(shape: &[usize]) -> Self {
        Self {
            log_probs: Table::from_rows(shape.iter().map(|&n| vec![-(n as f64).ln(); n]).collect()),
        }
    }

    /// Softmax of finite logits.
    pub fn from_logits(logits: &Table) -> Result<Self> {
        if !logits.all_finite() {
            return param("reference logits must be finite");
        }
        Ok(Self { log_probs: Table::from_rows(logits.rows().iter().map(|r| log_softmax(r)).collect()) })
    }

    pub fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        check_index(&self.log_probs.shape(), x, y)?;
        Ok(self.log_probs.get(x, y))
    }

    pub fn log_prob_table(&self) -> &Table {
        &self.log_probs
    }

    /// The reference as a tabular policy (logits = log-probabilities).
    pub fn as_policy(&self) -> TabularPolicy {
        TabularPolicy { logits: self.log_probs.clone() }
    }
}

impl Conditional for ReferencePolicy {
    fn shape(&self) -> Vec<usize> {
        self.log_probs.shape()
    }

    fn log_probs(&self, x: usize) -> Vec<f64> {
        self.log_probs.row(x).to_vec()
    }
}

/// Weights over contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptDistribution {
    weights: Vec<f64>,
}

impl PromptDistribution {
    /// Weights must be nonnegative and sum to 1 within 1e-9; they are renormalized exactly.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return param("prompt weights must be nonempty, finite and nonnegative");
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return param(format!("prompt weights sum to {s}"));
        }
        Ok(Self { weights: weights.iter().map(|w| w / s).collect() })
    }

    pub fn uniform(n_contexts: usize) -> Self {
        Self { weights: vec![1.0 / n_contexts as f64; n_contexts] }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Finite reward per (context, outcome).
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTable {
    values: Table,
}

impl RewardTable {
    pub fn new(values: Table) -> Result<Self> {
        if !values.all_finite() {
            return param("reward values must be finite");
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(Table::from_rows(rows))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { values: Table::zeros(shape) }
    }

    pub fn values(&self) -> &Table {
        &self.values
    }

    pub fn shape(&self) -> Vec<usize> {
        self.values.shape()
    }

    pub fn get(&self, x: usize, y: usize) -> Result<f64> {
        check_index(&self.values.shape(), x, y)?;
        Ok(self.values.get(x, y))
    }

    pub fn shifted(&self, c: f64) -> Result<Self> {
        let mut v = self.values.clone();
        v.rows.iter_mut().flatten().for_each(|r| *r += c);
        Self::new(v)
    }
}

/// Ordered, nonempty list of reward tables on one outcome space.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardEnsemble {
    members: Vec<RewardTable>,
}

impl RewardEnsemble {
    pub fn new(members: Vec<RewardTable>) -> Result<Self> {
        let Some(first) = members.first() else {
            return param("reward ensemble must be nonempty");
        };
        let shape = first.shape();
        for (i, m) in members.iter().enumerate().skip(1) {
            ensure_shape(&shape, &m.shape(), &format!("ensemble member {i}"))?;
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[RewardTable] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.members[0].shape()
    }
}

/// Scalar knobs shared by the objectives and drivers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparams {
    pub beta: f64,
    pub tau_inv: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub steps: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self { beta: 0.1, tau_inv: 1.0, alpha: 2.0, gamma: 0.0, lr: 1.0, steps: 1000 }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return param(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.tau_inv.is_finite() && self.tau_inv > 0.0) {
            return param(format!("tau_inv must be positive, got {}", self.tau_inv));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return param(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return param(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return param(format!("lr must be positive, got {}", self.lr));
        }
        if self.steps == 0 {
            return param("steps must be at least 1");
        }
        Ok(())
    }
}

/// Which argument the expectation is taken under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(q ‖ p)`: expectation under the second argument (typically the reference).
    Forward,
    /// `KL(p ‖ q)`: expectation under the first argument (typically the policy).
    Reverse,
}

pub fn log_prob(policy: &TabularPolicy, x: usize, y: usize) -> Result<f64> {
    check_index(&policy.logits.shape(), x, y)?;
    let row = policy.logits.row(x);
    Ok(row[y] - logsumexp(row))
}

/// `Σ_y a(y) (log a(y) − log b(y))` for one context.
pub(crate) fn kl_row(la: &[f64], lb: &[f64], x: usize) -> Result<f64> {
    let mut s = 0.0;
    for (y, (&a, &b)) in la.iter().zip(lb).enumerate() {
        if a == f64::NEG_INFINITY {
            continue;
        }
        if b == f64::NEG_INFINITY {
            return Err(Error::DivergenceUndefined { context: x, outcome: y });
        }
        s += a.exp() * (a - b);
    }
    Ok(s.max(0.0))
}

/// `E_μ KL` between `p` and `q`; see [`KlDirection`] for the argument order.
pub fn kl_divergence(
    p: &dyn Conditional,
    q: &dyn Conditional,
    mu: &PromptDistribution,
    direction: KlDirection,
) -> Result<f64> {
    let shape = p.shape();
    ensure_shape(&shape, &q.shape(), "kl_divergence")?;
    ensure_shape(&[shape.len()], &[mu.len()], "prompt distribution")?;
    let mut total = 0.0;
    for (x, &w) in mu.weights().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let (lp, lq) = (p.log_probs(x), q.log_probs(x));
        let d = match direction {
            KlDirection::Reverse => kl_row(&lp, &lq, x)?,
            KlDirection::Forward => kl_row(&lq, &lp, x)?,
        };
        total += w * d;
    }
    Ok(total)
}

/// `β[log π(y1) − log π_ref(y1) − log π(y2) + log π_ref(y2)]`.
pub fn implicit_reward_diff(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    beta: f64,
    x: usize,
    y1: usize,
    y2: usize,
) -> Result<f64> {
    let shape = policy.logits.shape();
    check_index(&shape, x, y1)?;
    check_index(&shape, x, y2)?;
    ensure_shape(&shape, &reference.shape(), "reference")?;
    let th = policy.logits.row(x);
    let lr = reference.log_probs.row(x);
    Ok(beta * ((th[y1] - th[y2]) - (lr[y1] - lr[y2])))
}

/// `σ(r(x,y1) − r(x,y2))`.
pub fn bradley_terry_prob(r: &RewardTable, x: usize, y1: usize, y2: usize) -> Result<f64> {
    Ok(sigmoid(r.get(x, y1)? - r.get(x, y2)?))
}

/// `π*(y|x) ∝ π_ref(y|x) exp(r(x,y)/β)`.
pub fn rlhf_optimal_policy(reference: &ReferencePolicy, r: &RewardTable, beta: f64) -> Result<TabularPolicy> {
    if !(beta.is_finite() && beta > 0.0) {
        return param(format!("beta must be positive, got {beta}"));
    }
    ensure_shape(&reference.shape(), &r.shape(), "reward table")?;
    let rows = reference
        .log_probs
        .rows()
        .iter()
        .zip(r.values.rows())
        .map(|(lr, rr)| log_softmax(&lr.iter().zip(rr).map(|(l, v)| l + v / beta).collect::<Vec<_>>()))
        .collect();
    TabularPolicy::new(Table::from_rows(rows))
}

/// `E_μ E_π r`.
pub fn expected_reward(policy: &dyn Conditional, r: &RewardTable, mu: &PromptDistribution) -> Result<f64> {
    let shape = policy.shape();
    ensure_shape(&shape, &r.shape(), "reward table")?;
    ensure_shape(&[shape.len()], &[mu.len()], "prompt distribution")?;
    let mut total = 0.0;
    for (x, &w) in mu.weights().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let e: f64 = policy
            .log_probs(x)
            .iter()
            .zip(r.values.row(x))
            .filter(|(lp, _)| **lp > f64::NEG_INFINITY)
            .map(|(lp, v)| lp.exp() * v)
            .sum();
        total += w * e;
    }
    Ok(total)
}

/// `E_μ[E_π r − β KL(π ‖ π_ref)]`.
pub fn alignment_objective(
    policy: &dyn Conditional,
    r: &RewardTable,
    reference: &ReferencePolicy,
    mu: &PromptDistribution,
    beta: f64,
) -> Result<f64> {
    let er = expected_reward(policy, r, mu)?;
    let kl = kl_divergence(policy, reference, mu, KlDirection::Reverse)?;
    Ok(er - beta * kl)
}

/// `min_i E_μ[E_π r_i − E_ref r_i] − β E_μ KL(π ‖ π_ref)`.
pub fn pessimistic_objective(
    policy: &dyn Conditional,
    ensemble: &RewardEnsemble,
    reference: &ReferencePolicy,
    mu: &PromptDistribution,
    beta: f64,
) -> Result<f64> {
    let mut worst = f64::INFINITY;
    for r in ensemble.members() {
        let adv = expected_reward(policy, r, mu)? - expected_reward(reference, r, mu)?;
        worst = worst.min(adv);
    }
    let kl = kl_divergence(policy, reference, mu, KlDirection::Reverse)?;
    Ok(worst - beta * kl)
}

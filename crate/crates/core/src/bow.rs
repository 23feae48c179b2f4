//! Bag-of-words sequence policies: `log π_θ(y) = c(y)·θ − n·logsumexp(θ)`.
//!
//! Under DPO the parameters move along the count difference `Δ = c(y^w) − c(y^ℓ)`,
//! so the whole trajectory is `θ(t) = τ(t)·Δ` for a scalar `τ(t)`. The study
//! below tracks the preferred sequence's likelihood, its upper bound
//! `c(y)·θ − n·max θ`, and the degenerate sequence that repeats an argmax-Δ token.

use crate::error::{param, Error, Result};
use crate::numeric::{logsumexp, sigmoid, softplus};

/// Token counts of a sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CountVector {
    counts: Vec<u32>,
}

impl CountVector {
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.is_empty() {
            return param("count vector needs at least one token");
        }
        Ok(Self { counts })
    }

    pub fn from_tokens(tokens: &[usize], vocab_size: usize) -> Result<Self> {
        let mut counts = vec![0u32; vocab_size];
        for &t in tokens {
            *counts.get_mut(t).ok_or_else(|| Error::Parameter(format!("token {t} outside vocabulary of {vocab_size}")))? += 1;
        }
        Self::new(counts)
    }

    /// `n` copies of `token`.
    pub fn repeated(token: usize, vocab_size: usize, n: u32) -> Result<Self> {
        if token >= vocab_size {
            return param(format!("token {token} outside vocabulary of {vocab_size}"));
        }
        let mut counts = vec![0; vocab_size];
        counts[token] = n;
        Self::new(counts)
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    fn dot(&self, theta: &[f64]) -> f64 {
        self.counts.iter().zip(theta).map(|(&c, t)| c as f64 * t).sum()
    }
}

/// Every count vector over `vocab_size` tokens with total `n`, in lexicographic order.
pub fn all_count_vectors(vocab_size: usize, n: u32) -> Vec<CountVector> {
    fn rec(left: u32, slots: usize, cur: &mut Vec<u32>, out: &mut Vec<CountVector>) {
        if slots == 1 {
            cur.push(left);
            out.push(CountVector { counts: cur.clone() });
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(left - k, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if vocab_size > 0 {
        rec(n, vocab_size, &mut Vec::new(), &mut out);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BowModel {
    theta: Vec<f64>,
    n: u32,
}

impl BowModel {
    pub fn new(theta: Vec<f64>, n: u32) -> Result<Self> {
        if theta.is_empty() || theta.iter().any(|t| !t.is_finite()) {
            return param("theta must be nonempty and finite");
        }
        if n == 0 {
            return param("sequence length must be at least 1");
        }
        Ok(Self { theta, n })
    }

    pub fn zeros(vocab_size: usize, n: u32) -> Result<Self> {
        Self::new(vec![0.0; vocab_size], n)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn vocab_size(&self) -> usize {
        self.theta.len()
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    fn check(&self, c: &CountVector) -> Result<()> {
        if c.vocab_size() != self.vocab_size() {
            return Err(Error::Shape(format!("count vector over {} tokens, model over {}", c.vocab_size(), self.vocab_size())));
        }
        if c.total() != self.n {
            return param(format!("count total {} does not match sequence length {}", c.total(), self.n));
        }
        Ok(())
    }
}

/// `c·θ − n·logsumexp(θ)`.
pub fn bow_log_prob(model: &BowModel, c: &CountVector) -> Result<f64> {
    model.check(c)?;
    Ok(c.dot(&model.theta) - model.n as f64 * logsumexp(&model.theta))
}

/// `c·θ − n·max θ`, an upper bound on [`bow_log_prob`].
pub fn bow_upper_bound(model: &BowModel, c: &CountVector) -> Result<f64> {
    model.check(c)?;
    let max = model.theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(c.dot(&model.theta) - model.n as f64 * max)
}

fn check_delta(model: &BowModel, delta: &[i64]) -> Result<()> {
    if delta.len() != model.vocab_size() {
        return Err(Error::Shape(format!("delta over {} tokens, model over {}", delta.len(), model.vocab_size())));
    }
    if delta.iter().sum::<i64>() != 0 {
        return param("count difference must sum to zero");
    }
    Ok(())
}

fn delta_dot(delta: &[i64], theta: &[f64]) -> f64 {
    delta.iter().zip(theta).map(|(&d, t)| d as f64 * t).sum()
}

/// DPO loss `−log σ(β Δ·θ + β log_ref_ratio)` for one pair of equal-length sequences.
///
/// `log_ref_ratio` is the reference's contribution to the margin,
/// `log π_ref(y^ℓ) − log π_ref(y^w)`; 0 means an indifferent reference.
pub fn bow_dpo_loss(model: &BowModel, delta: &[i64], log_ref_ratio: f64, beta: f64) -> Result<f64> {
    check_delta(model, delta)?;
    Ok(softplus(-(beta * delta_dot(delta, &model.theta) + beta * log_ref_ratio)))
}

/// Gradient of [`bow_dpo_loss`]: `−(1 − σ(β Δ·θ + β log_ref_ratio)) β Δ`.
pub fn bow_dpo_gradient(model: &BowModel, delta: &[i64], log_ref_ratio: f64, beta: f64) -> Result<Vec<f64>> {
    check_delta(model, delta)?;
    let z = beta * delta_dot(delta, &model.theta) + beta * log_ref_ratio;
    let s = sigmoid(-z) * beta;
    Ok(delta.iter().map(|&d| -s * d as f64).collect())
}

/// Lowest-index token attaining `max Δ`.
pub fn degenerate_sequence(delta: &[i64]) -> Result<usize> {
    if delta.iter().all(|&d| d == 0) {
        return param("count difference is zero: the two sequences have identical counts");
    }
    let max = *delta.iter().max().expect("nonempty");
    Ok(delta.iter().position(|&d| d == max).expect("max exists"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BowRecord {
    pub step: usize,
    pub log_pi_w: f64,
    pub log_upper_w: f64,
    pub log_pi_hat: f64,
    /// Accumulated `Σ lr·β·p(y^ℓ ≻ y^w)` over the updates so far.
    pub tau: f64,
}

impl BowRecord {
    pub fn pi_w(&self) -> f64 {
        self.log_pi_w.exp()
    }

    pub fn upper_w(&self) -> f64 {
        self.log_upper_w.exp()
    }

    pub fn pi_hat(&self) -> f64 {
        self.log_pi_hat.exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BowStudy {
    pub delta: Vec<i64>,
    pub hat_token: usize,
    /// `c(y^w)·Δ − n·max Δ`, never positive.
    pub k: f64,
    /// Record `t` is the state after `t` updates.
    pub records: Vec<BowRecord>,
    pub theta: Vec<f64>,
}

/// DPO gradient descent from `θ = 0` on one pair with an indifferent reference.
pub fn bow_descent_study(y_w: &CountVector, y_l: &CountVector, beta: f64, lr: f64, steps: usize) -> Result<BowStudy> {
    if y_w.vocab_size() != y_l.vocab_size() {
        return Err(Error::Shape("sequences over different vocabularies".into()));
    }
    if y_w.total() != y_l.total() {
        return Err(Error::Precondition(format!("sequence lengths differ: {} vs {}", y_w.total(), y_l.total())));
    }
    if !(beta > 0.0 && lr > 0.0) {
        return param("beta and lr must be positive");
    }
    let v = y_w.vocab_size();
    let n = y_w.total();
    let delta: Vec<i64> = y_w.counts().iter().zip(y_l.counts()).map(|(&a, &b)| a as i64 - b as i64).collect();
    let hat_token = degenerate_sequence(&delta)?;
    let hat = CountVector::repeated(hat_token, v, n)?;
    let max_delta = delta[hat_token] as f64;
    let k = delta_dot(&delta, &y_w.counts().iter().map(|&c| c as f64).collect::<Vec<_>>()) - n as f64 * max_delta;

    let mut model = BowModel::zeros(v, n)?;
    let mut tau = 0.0;
    let mut records = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        records.push(BowRecord {
            step: t,
            log_pi_w: bow_log_prob(&model, y_w)?,
            log_upper_w: bow_upper_bound(&model, y_w)?,
            log_pi_hat: bow_log_prob(&model, &hat)?,
            tau,
        });
        if t == steps {
            break;
        }
        let g = bow_dpo_gradient(&model, &delta, 0.0, beta)?;
        tau += lr * beta * sigmoid(-beta * delta_dot(&delta, &model.theta));
        for (th, gi) in model.theta.iter_mut().zip(g) {
            *th -= lr * gi;
        }
    }
    Ok(BowStudy { delta, hat_token, k, records, theta: model.theta })
}

//! Deterministic descent drivers: full-batch (or seeded mini-batch) gradient
//! descent on logits with per-step trajectories, projected descent on the
//! probability simplex, and γ annealing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{param, Error, Result};
use crate::losses::{LossSpec, PreferencePair};
use crate::model::{kl_divergence, Conditional, KlDirection, PromptDistribution, Table, TabularPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnealMode {
    Linear,
    Constant,
}

/// γ as a function of the step index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub mode: AnnealMode,
}

impl AnnealSchedule {
    pub fn new(gamma_start: f64, gamma_end: f64, mode: AnnealMode) -> Result<Self> {
        if !(gamma_start.is_finite() && gamma_start >= 0.0 && gamma_end.is_finite() && gamma_end >= 0.0) {
            return param("anneal endpoints must be finite and nonnegative");
        }
        Ok(Self { gamma_start, gamma_end, mode })
    }

    pub fn constant(gamma: f64) -> Result<Self> {
        Self::new(gamma, gamma, AnnealMode::Constant)
    }

    pub fn linear(gamma_start: f64, gamma_end: f64) -> Result<Self> {
        Self::new(gamma_start, gamma_end, AnnealMode::Linear)
    }
}

pub fn anneal_gamma(step: usize, total_steps: usize, schedule: &AnnealSchedule) -> Result<f64> {
    if step > total_steps {
        return param(format!("step {step} beyond total {total_steps}"));
    }
    Ok(match schedule.mode {
        AnnealMode::Constant => schedule.gamma_start,
        AnnealMode::Linear if total_steps == 0 => schedule.gamma_start,
        AnnealMode::Linear => {
            let f = step as f64 / total_steps as f64;
            schedule.gamma_start + f * (schedule.gamma_end - schedule.gamma_start)
        }
    })
}

/// State after `step` updates, with the loss evaluated there.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// The DPO, IPO or distillation component of `loss`.
    pub data_term: f64,
    /// `E_μ KL(π_ref ‖ π)`.
    pub kl_forward: f64,
    /// `E_μ KL(π ‖ π_ref)`.
    pub kl_reverse: f64,
    pub mean_log_pi_w: f64,
    pub mean_log_pi_l: f64,
    /// Implicit-reward margin of each tracked pair.
    pub margins: Vec<f64>,
    /// Total probability of the tracked outcomes.
    pub tracked_mass: f64,
    pub selected_member: Option<usize>,
    pub gamma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunTrajectory {
    pub records: Vec<StepRecord>,
    /// Set when the run stopped early because a logit left `[-1e6, 1e6]`.
    pub truncated: bool,
}

impl RunTrajectory {
    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

/// Seeded mini-batching: each epoch is a fresh shuffled partition of the items.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Batching {
    pub size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentOptions {
    pub lr: f64,
    pub steps: usize,
    /// Overrides the objective's γ at every step.
    pub schedule: Option<AnnealSchedule>,
    pub record_pairs: Vec<PreferencePair>,
    /// `(context, outcome)` cells whose summed probability is recorded.
    pub track_mass: Vec<(usize, usize)>,
    /// Record every k-th step (the last step is always recorded).
    pub record_every: usize,
    pub batching: Option<Batching>,
    /// Weights for the recorded KL terms; uniform over contexts when `None`.
    pub mu: Option<PromptDistribution>,
}

impl DescentOptions {
    pub fn new(lr: f64, steps: usize) -> Self {
        Self { lr, steps, schedule: None, record_pairs: Vec::new(), track_mass: Vec::new(), record_every: 1, batching: None, mu: None }
    }

    pub fn schedule(mut self, s: AnnealSchedule) -> Self {
        self.schedule = Some(s);
        self
    }

    pub fn record_pairs(mut self, pairs: Vec<PreferencePair>) -> Self {
        self.record_pairs = pairs;
        self
    }

    pub fn track_mass(mut self, cells: Vec<(usize, usize)>) -> Self {
        self.track_mass = cells;
        self
    }

    pub fn record_every(mut self, k: usize) -> Self {
        self.record_every = k;
        self
    }

    pub fn batching(mut self, b: Batching) -> Self {
        self.batching = Some(b);
        self
    }

    pub fn mu(mut self, mu: PromptDistribution) -> Self {
        self.mu = Some(mu);
        self
    }
}

pub const LOGIT_LIMIT: f64 = 1e6;

struct BatchStream {
    n: usize,
    size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn new(n: usize, b: Batching) -> Result<Self> {
        if b.size == 0 {
            return param("batch size must be positive");
        }
        let mut s = Self { n, size: b.size.min(n), seed: b.seed, epoch: 0, order: Vec::new(), pos: 0 };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
        self.epoch += 1;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.reshuffle();
        }
        let end = (self.pos + self.size).min(self.n);
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        b
    }
}

fn record(
    spec: &LossSpec,
    policy: &TabularPolicy,
    step: usize,
    loss: &crate::losses::LossValueAndGrad,
    gamma: Option<f64>,
    opts: &DescentOptions,
    mu: &PromptDistribution,
) -> Result<StepRecord> {
    let reference = &spec.reference;
    let kl_forward = kl_divergence(policy, reference, mu, KlDirection::Forward)?;
    let kl_reverse = kl_divergence(policy, reference, mu, KlDirection::Reverse)?;
    let beta = spec.beta().unwrap_or(1.0);
    let n = opts.record_pairs.len();
    let (mut w, mut l) = (0.0, 0.0);
    let mut margins = Vec::with_capacity(n);
    for p in &opts.record_pairs {
        w += policy.log_prob(p.x, p.y_w)?;
        l += policy.log_prob(p.x, p.y_l)?;
        margins.push(crate::model::implicit_reward_diff(policy, reference, beta, p.x, p.y_w, p.y_l)?);
    }
    let mut tracked_mass = 0.0;
    for &(x, y) in &opts.track_mass {
        tracked_mass += policy.log_prob(x, y)?.exp();
    }
    let denom = if n == 0 { f64::NAN } else { n as f64 };
    Ok(StepRecord {
        step,
        loss: loss.value,
        data_term: loss.data_term,
        kl_forward,
        kl_reverse,
        mean_log_pi_w: w / denom,
        mean_log_pi_l: l / denom,
        margins,
        tracked_mass,
        selected_member: loss.selected_member,
        gamma,
    })
}

/// Plain gradient descent on the logits.
///
/// Record `t` holds the state after `t` updates and the loss evaluated there,
/// so a run of `steps` updates yields up to `steps + 1` records. A non-finite
/// loss or gradient aborts with the step index.
pub fn gradient_descent(spec: &LossSpec, policy0: &TabularPolicy, opts: &DescentOptions) -> Result<(TabularPolicy, RunTrajectory)> {
    if !(opts.lr.is_finite() && opts.lr > 0.0) {
        return param(format!("learning rate must be positive, got {}", opts.lr));
    }
    if opts.steps == 0 {
        return param("steps must be at least 1");
    }
    if opts.record_every == 0 {
        return param("record_every must be at least 1");
    }
    crate::model::ensure_shape(&spec.shape(), &policy0.shape(), "initial policy")?;
    let mu = opts.mu.clone().unwrap_or_else(|| PromptDistribution::uniform(policy0.shape().len()));
    let mut batches = opts.batching.map(|b| BatchStream::new(spec.n_items(), b)).transpose()?;
    let mut policy = policy0.clone();
    let mut traj = RunTrajectory::default();

    for t in 0..=opts.steps {
        let gamma = opts.schedule.as_ref().map(|s| anneal_gamma(t, opts.steps, s)).transpose()?;
        let batch = batches.as_mut().map(BatchStream::next_batch);
        let loss = spec.evaluate(&policy, gamma, batch.as_deref())?;
        if !loss.value.is_finite() {
            return Err(Error::NonFinite { step: t, what: "loss" });
        }
        if !loss.grad.all_finite() {
            return Err(Error::NonFinite { step: t, what: "gradient" });
        }
        let diverged = policy.logits().max_abs() > LOGIT_LIMIT;
        if t % opts.record_every == 0 || t == opts.steps || diverged {
            traj.records.push(record(spec, &policy, t, &loss, gamma, opts, &mu)?);
        }
        if diverged {
            traj.truncated = true;
            break;
        }
        if t < opts.steps {
            policy.logits_mut().axpy(-opts.lr, &loss.grad);
        }
    }
    Ok((policy, traj))
}

/// Selection counts per member over the records that carry one.
pub fn member_selection_histogram(traj: &RunTrajectory, k: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; k];
    for r in &traj.records {
        if let Some(i) = r.selected_member {
            if i >= k {
                return param(format!("recorded member {i} but ensemble size is {k}"));
            }
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    project_scaled(v, 1.0)
}

/// Projection onto `{p : Σp = s, p ≥ 0}`.
fn project_scaled(v: &[f64], s: f64) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - s) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // Large inputs make `x - theta` cancel; spread the leftover sum over the support.
    for _ in 0..4 {
        let total: f64 = out.iter().sum();
        let support = out.iter().filter(|&&x| x > 0.0).count();
        let resid = total - s;
        if support == 0 || resid.abs() <= 1e-15 * s {
            break;
        }
        let shift = resid / support as f64;
        for x in out.iter_mut().filter(|x| **x > 0.0) {
            *x = (*x - shift).max(0.0);
        }
    }
    out
}

/// Projection onto `{p : Σp = 1, p ≥ floor}`.
pub fn project_simplex_floor(v: &[f64], floor: f64) -> Result<Vec<f64>> {
    let n = v.len() as f64;
    if !(floor >= 0.0 && floor * n < 1.0) {
        return param(format!("floor {floor} infeasible for {} coordinates", v.len()));
    }
    let shifted: Vec<f64> = v.iter().map(|x| x - floor).collect();
    Ok(project_scaled(&shifted, 1.0 - n * floor).into_iter().map(|x| x + floor).collect())
}

/// Step-size rule for [`projected_gd_simplex`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepRule {
    /// Always `lr`.
    Fixed,
    /// Start from twice the last accepted step (capped at `lr`) and halve
    /// until the Armijo sufficient-decrease test passes.
    Armijo,
    /// Barzilai-Borwein trial step, accepted under a nonmonotone Armijo test
    /// against the worst of the last 10 losses.
    Spectral,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimplexOptions {
    pub lr: f64,
    pub steps: usize,
    /// Lower bound kept on every coordinate so log-probabilities stay finite.
    pub floor: f64,
    pub step_rule: StepRule,
    /// Stop once an accepted step moves no coordinate by more than this.
    pub tol: f64,
    pub record_every: usize,
}

impl SimplexOptions {
    pub fn new(lr: f64, steps: usize) -> Self {
        Self { lr, steps, floor: 1e-300, step_rule: StepRule::Fixed, tol: 0.0, record_every: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimplexRun {
    /// Iterates at every `record_every`-th step, starting with the projected initial point.
    pub iterates: Vec<Vec<Vec<f64>>>,
    pub losses: Vec<f64>,
    pub final_point: Vec<Vec<f64>>,
    pub final_loss: f64,
    pub iterations: usize,
}

fn simplex_eval(spec: &LossSpec, p: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let logits = Table::from_rows(p.iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect());
    let out = spec.evaluate(&TabularPolicy::new(logits)?, None, None)?;
    // With θ = log p, ∂L/∂p = (∂L/∂θ) / p.
    let g = out.grad.rows().iter().zip(p).map(|(gr, pr)| gr.iter().zip(pr).map(|(g, q)| g / q).collect()).collect();
    Ok((out.value, g))
}

/// Projected gradient descent over per-context probability vectors.
pub fn projected_gd_simplex(spec: &LossSpec, probs0: &[Vec<f64>], opts: &SimplexOptions) -> Result<SimplexRun> {
    if !(opts.lr.is_finite() && opts.lr > 0.0) {
        return param("learning rate must be positive");
    }
    if opts.record_every == 0 {
        return param("record_every must be at least 1");
    }
    crate::model::ensure_shape(&spec.shape(), &probs0.iter().map(Vec::len).collect::<Vec<_>>(), "initial point")?;
    for (x, r) in probs0.iter().enumerate() {
        let s: f64 = r.iter().sum();
        if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return param(format!("initial point row {x} is not on the simplex"));
        }
    }
    let project = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> { rows.iter().map(|r| project_simplex_floor(r, opts.floor)).collect() };
    let mut p = project(probs0)?;
    let (mut f, mut g) = simplex_eval(spec, &p)?;
    let mut run = SimplexRun { iterates: vec![p.clone()], losses: vec![f], final_point: Vec::new(), final_loss: f, iterations: 0 };
    let mut step = opts.lr;
    let mut history = std::collections::VecDeque::from([f]);
    let flat = |v: &[Vec<f64>]| -> Vec<f64> { v.iter().flatten().copied().collect() };
    for t in 1..=opts.steps {
        let mut trial = match opts.step_rule {
            StepRule::Fixed => opts.lr,
            StepRule::Armijo => (2.0 * step).min(opts.lr),
            StepRule::Spectral => step,
        };
        let reference_loss = match opts.step_rule {
            StepRule::Spectral => history.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            _ => f,
        };
        let accepted = loop {
            let cand: Vec<Vec<f64>> =
                p.iter().zip(&g).map(|(pr, gr)| pr.iter().zip(gr).map(|(a, b)| a - trial * b).collect()).collect();
            let q = project(&cand)?;
            let (fq, gq) = simplex_eval(spec, &q)?;
            if opts.step_rule == StepRule::Fixed {
                break Some((q, fq, gq));
            }
            let decrease: f64 = g.iter().flatten().zip(p.iter().flatten().zip(q.iter().flatten())).map(|(gi, (a, b))| gi * (a - b)).sum();
            if fq.is_finite() && fq <= reference_loss - 1e-4 * decrease {
                break Some((q, fq, gq));
            }
            trial *= 0.5;
            if trial < 1e-300 {
                break None;
            }
        };
        let Some((q, fq, gq)) = accepted else { break };
        let (pf, qf, gf, gqf) = (flat(&p), flat(&q), flat(&g), flat(&gq));
        let moved = pf.iter().zip(&qf).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        step = match opts.step_rule {
            StepRule::Spectral => {
                let (mut ss, mut sy) = (0.0, 0.0);
                for i in 0..pf.len() {
                    let (si, yi) = (qf[i] - pf[i], gqf[i] - gf[i]);
                    ss += si * si;
                    sy += si * yi;
                }
                if sy > 0.0 { (ss / sy).clamp(1e-30, 1e30) } else { opts.lr }
            }
            _ => trial,
        };
        p = q;
        f = fq;
        g = gq;
        history.push_back(f);
        if history.len() > 10 {
            history.pop_front();
        }
        run.iterations = t;
        if t % opts.record_every == 0 || t == opts.steps {
            run.iterates.push(p.clone());
            run.losses.push(f);
        }
        if moved <= opts.tol {
            break;
        }
    }
    run.final_point = p;
    run.final_loss = f;
    Ok(run)
}

/// Options for [`minimize_logits`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogitOptions {
    pub lr: f64,
    pub steps: usize,
    pub step_rule: StepRule,
    /// Stop once the gradient norm falls to this value.
    pub grad_tol: f64,
}

impl LogitOptions {
    pub fn new(lr: f64, steps: usize) -> Self {
        Self { lr, steps, step_rule: StepRule::Spectral, grad_tol: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitRun {
    pub policy: TabularPolicy,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Unconstrained descent on the logits with the same step rules as [`projected_gd_simplex`].
///
/// Stops at `steps`, when the gradient norm reaches `grad_tol`, or when no step is accepted.
pub fn minimize_logits(spec: &LossSpec, policy0: &TabularPolicy, opts: &LogitOptions) -> Result<LogitRun> {
    if !(opts.lr.is_finite() && opts.lr > 0.0) {
        return param("learning rate must be positive");
    }
    crate::model::ensure_shape(&spec.shape(), &policy0.shape(), "initial policy")?;
    let eval = |p: &TabularPolicy| -> Result<(f64, Table)> {
        let out = spec.evaluate(p, None, None)?;
        Ok((out.value, out.grad))
    };
    let mut p = policy0.clone();
    let (mut f, mut g) = eval(&p)?;
    let mut step = opts.lr;
    let mut history = std::collections::VecDeque::from([f]);
    let mut iterations = 0;
    for t in 1..=opts.steps {
        if g.norm() <= opts.grad_tol {
            break;
        }
        let mut trial = match opts.step_rule {
            StepRule::Fixed => opts.lr,
            StepRule::Armijo => (2.0 * step).min(opts.lr),
            StepRule::Spectral => step,
        };
        let reference_loss = match opts.step_rule {
            StepRule::Spectral => history.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            _ => f,
        };
        let gg = g.norm().powi(2);
        let accepted = loop {
            let mut logits = p.logits().clone();
            logits.axpy(-trial, &g);
            let q = TabularPolicy::new(logits)?;
            let (fq, gq) = eval(&q)?;
            if opts.step_rule == StepRule::Fixed || (fq.is_finite() && fq <= reference_loss - 1e-4 * trial * gg) {
                break Some((q, fq, gq));
            }
            trial *= 0.5;
            if trial < 1e-300 {
                break None;
            }
        };
        let Some((q, fq, gq)) = accepted else { break };
        step = match opts.step_rule {
            StepRule::Spectral => {
                let (mut ss, mut sy) = (0.0, 0.0);
                for ((a, b), (ga, gb)) in p.logits().values().zip(q.logits().values()).zip(g.values().zip(gq.values())) {
                    ss += (b - a) * (b - a);
                    sy += (b - a) * (gb - ga);
                }
                if sy > 0.0 { (ss / sy).clamp(1e-30, 1e30) } else { opts.lr }
            }
            _ => trial,
        };
        if !fq.is_finite() || !gq.all_finite() {
            return Err(Error::NonFinite { step: t, what: "loss" });
        }
        p = q;
        f = fq;
        g = gq;
        history.push_back(f);
        if history.len() > 10 {
            history.pop_front();
        }
        iterations = t;
    }
    let grad_norm = g.norm();
    Ok(LogitRun { policy: p, loss: f, grad_norm, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{Objective, PreferenceDataset};
    use crate::model::ReferencePolicy;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15)
    }

    #[test]
    fn projection_examples() {
        let third = 1.0 / 3.0;
        assert!(close(&project_simplex(&[third; 3]), &[third; 3]));
        assert!(close(&project_simplex(&[0.5; 3]), &[third; 3]));
        assert_eq!(project_simplex(&[2.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0]);
        let f = project_simplex_floor(&[2.0, 0.0, 0.0], 0.01).unwrap();
        assert!(close(&f, &[0.98, 0.01, 0.01]));
        assert!(project_simplex_floor(&[0.0; 4], 0.25).is_err());
    }

    #[test]
    fn anneal_examples() {
        let s = AnnealSchedule::linear(1e-4, 1e-2).unwrap();
        assert_eq!(anneal_gamma(0, 100, &s).unwrap(), 1e-4);
        assert_eq!(anneal_gamma(100, 100, &s).unwrap(), 1e-2);
        assert!((anneal_gamma(50, 100, &s).unwrap() - 5.05e-3).abs() < 1e-18);
        assert!(anneal_gamma(101, 100, &s).is_err());
        let c = AnnealSchedule::constant(0.3).unwrap();
        assert_eq!(anneal_gamma(7, 10, &c).unwrap(), 0.3);
    }

    fn dpo_spec(n: usize, pairs: Vec<PreferencePair>) -> LossSpec {
        LossSpec::new(
            ReferencePolicy::uniform_shape(&[n]),
            Objective::Dpo { data: PreferenceDataset::new(pairs).unwrap(), beta: 1.0 },
        )
    }

    #[test]
    fn single_step_margin_is_one() {
        let pair = PreferencePair::new(0, 0, 1);
        let spec = dpo_spec(2, vec![pair]);
        let opts = DescentOptions::new(1.0, 1).record_pairs(vec![pair]);
        let (pol, traj) = gradient_descent(&spec, &TabularPolicy::from_shape(&[2]), &opts).unwrap();
        assert_eq!(traj.records.len(), 2);
        assert_eq!(traj.records[0].margins, vec![0.0]);
        assert_eq!(traj.records[1].margins, vec![1.0]);
        assert_eq!(pol.logits().row(0), &[0.5, -0.5]);
    }

    #[test]
    fn dpo_margin_strictly_increases() {
        let pair = PreferencePair::new(0, 1, 2);
        let spec = dpo_spec(4, vec![pair]);
        let opts = DescentOptions::new(0.5, 2000).record_pairs(vec![pair]);
        let (_, traj) = gradient_descent(&spec, &TabularPolicy::from_shape(&[4]), &opts).unwrap();
        for w in traj.records.windows(2) {
            assert!(w[1].margins[0] > w[0].margins[0]);
            assert!(w[1].loss <= w[0].loss);
        }
    }

    #[test]
    fn zero_gradient_leaves_policy_unchanged() {
        let reference = ReferencePolicy::new(vec![vec![0.2, 0.8]]).unwrap();
        let spec = LossSpec::new(
            reference.clone(),
            Objective::Ipo { data: PreferenceDataset::new(vec![PreferencePair::new(0, 0, 1)]).unwrap(), tau_inv: 0.0 },
        );
        let (pol, _) = gradient_descent(&spec, &reference.as_policy(), &DescentOptions::new(0.7, 50)).unwrap();
        assert_eq!(pol, reference.as_policy());
    }

    #[test]
    fn histogram_examples() {
        let mk = |sel: Vec<Option<usize>>| RunTrajectory {
            records: sel
                .into_iter()
                .enumerate()
                .map(|(step, selected_member)| StepRecord {
                    step,
                    loss: 0.0,
                    data_term: 0.0,
                    kl_forward: 0.0,
                    kl_reverse: 0.0,
                    mean_log_pi_w: 0.0,
                    mean_log_pi_l: 0.0,
                    margins: vec![],
                    tracked_mass: 0.0,
                    selected_member,
                    gamma: None,
                })
                .collect(),
            truncated: false,
        };
        let alt = mk((0..10).map(|i| Some(i % 2)).collect());
        assert_eq!(member_selection_histogram(&alt, 2).unwrap(), vec![5, 5]);
        assert!(member_selection_histogram(&alt, 1).is_err());
        assert_eq!(member_selection_histogram(&mk(vec![Some(0); 4]), 1).unwrap(), vec![4]);
    }

    #[test]
    fn divergence_guard_truncates() {
        let data = PreferenceDataset::new(vec![PreferencePair::new(0, 0, 1)]).unwrap();
        let spec = LossSpec::new(ReferencePolicy::uniform_shape(&[2]), Objective::Ipo { data, tau_inv: 1.0 });
        let opts = DescentOptions::new(10.0, 100);
        let (_, traj) = gradient_descent(&spec, &TabularPolicy::from_shape(&[2]), &opts).unwrap();
        assert!(traj.truncated);
        assert!(traj.records.len() < 101);
    }

    #[test]
    fn simplex_descent_stays_on_simplex() {
        let data = PreferenceDataset::new(vec![PreferencePair::new(0, 1, 0), PreferencePair::new(0, 2, 1)]).unwrap();
        let spec = LossSpec::new(ReferencePolicy::uniform_shape(&[3]), Objective::Ipo { data, tau_inv: 0.5 });
        let mut opts = SimplexOptions::new(0.05, 500);
        opts.floor = 1e-12;
        let run = projected_gd_simplex(&spec, &[vec![1.0 / 3.0; 3]], &opts).unwrap();
        for it in &run.iterates {
            let s: f64 = it[0].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(it[0].iter().all(|v| *v >= 0.0));
        }
        assert!(run.final_loss < run.losses[0]);
    }
}

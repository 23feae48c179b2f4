use super::config::{BiasSweepConfig, EdpoRmDistConfig, Method};
use super::{fmt_f64, par_map, sub_seed, Check, CsvTable};
use crate::error::{Error, Result};
use crate::losses::{KlMode, LossSpec, Objective, PreferenceDataset, TripleDataset};
use crate::model::{Conditional, PromptDistribution, ReferencePolicy, RewardEnsemble, RewardTable, TabularPolicy};
use crate::numeric::argmax_first;
use crate::optim::{gradient_descent, AnnealSchedule, Batching, DescentOptions};
use crate::synthdata::{
    build_biased_dataset, generate_scenario, make_oracle_reward, max_subsample_size, subsample_at_bias, train_reward_linear,
    train_validation_split, BiasedDatasetSpec, Scenario,
};

/// One training run at one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRun {
    pub rho: f64,
    pub method: Method,
    pub hyperparameter: &'static str,
    pub value: f64,
    /// Advantage weighted by the validation split's context frequencies.
    pub validation_advantage: f64,
    /// Advantage under the uniform prompt distribution.
    pub advantage: f64,
    pub diverged: bool,
    /// Ensemble member attaining the min at each evaluation, for ensemble methods.
    pub selections: Vec<usize>,
}

/// Validation-selected run of one method at one ρ.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSelection {
    pub rho: f64,
    pub method: Method,
    pub run: Option<SweepRun>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasSweepResult {
    pub seed: u64,
    pub length_weight: f64,
    pub runs: Vec<SweepRun>,
    pub selected: Vec<MethodSelection>,
    pub checks: Vec<Check>,
}

impl BiasSweepResult {
    pub fn runs_table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["seed", "rho", "method", "hyperparameter", "hyperparameter_value", "metric", "value", "status"]);
        for r in &self.runs {
            let status = if r.diverged { "diverged" } else { "ok" };
            for (metric, v) in [("validation_advantage", r.validation_advantage), ("advantage", r.advantage)] {
                t.push(vec![
                    self.seed.to_string(),
                    fmt_f64(r.rho),
                    r.method.name().into(),
                    r.hyperparameter.into(),
                    fmt_f64(r.value),
                    metric.into(),
                    fmt_f64(v),
                    status.into(),
                ]);
            }
        }
        t
    }

    pub fn selected_table(&self) -> CsvTable {
        let mut t =
            CsvTable::new(&["seed", "rho", "method", "hyperparameter", "hyperparameter_value", "validation_advantage", "advantage"]);
        for s in &self.selected {
            let (h, v, va, a) = match &s.run {
                Some(r) => (r.hyperparameter, fmt_f64(r.value), fmt_f64(r.validation_advantage), fmt_f64(r.advantage)),
                None => ("", String::new(), "nan".into(), "nan".into()),
            };
            t.push(vec![self.seed.to_string(), fmt_f64(s.rho), s.method.name().into(), h.into(), v, va, a]);
        }
        t
    }

    /// Selected advantage of `method` at `rho`; `None` if absent or every run diverged.
    pub fn advantage(&self, rho: f64, method: Method) -> Option<f64> {
        self.selected.iter().find(|s| s.rho == rho && s.method == method).and_then(|s| s.run.as_ref()).map(|r| r.advantage)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdpoRmDistResult {
    pub seed: u64,
    pub bs: Vec<f64>,
    /// `(ρ, per-member selection counts)` of the validation-selected e-DPO run.
    pub histograms: Vec<(f64, Vec<usize>)>,
    pub checks: Vec<Check>,
}

impl EdpoRmDistResult {
    pub fn table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["seed", "rho", "member", "b", "count", "fraction"]);
        for (rho, h) in &self.histograms {
            let total: usize = h.iter().sum();
            for (i, &c) in h.iter().enumerate() {
                let frac = if total == 0 { f64::NAN } else { c as f64 / total as f64 };
                t.push(vec![self.seed.to_string(), fmt_f64(*rho), i.to_string(), fmt_f64(self.bs[i]), c.to_string(), fmt_f64(frac)]);
            }
        }
        t
    }

    /// The `b` of the most selected member at `rho` (ties to the lower index).
    pub fn modal_b(&self, rho: f64) -> Option<f64> {
        let (_, h) = self.histograms.iter().find(|(r, _)| *r == rho)?;
        if h.iter().all(|&c| c == 0) {
            return None;
        }
        argmax_first(&h.iter().map(|&c| c as f64).collect::<Vec<_>>()).map(|i| self.bs[i])
    }
}

struct Prepared {
    rho: f64,
    batch_seed: u64,
    train: PreferenceDataset,
    validation_weights: Vec<f64>,
    r_rho: RewardTable,
    ensemble: RewardEnsemble,
}

fn scenario(cfg: &BiasSweepConfig, seed: u64) -> Result<Scenario> {
    let mut s = generate_scenario(&cfg.scenario.spec(), sub_seed(seed, 1))?;
    if let Some(w) = cfg.scenario.length_weight {
        s.oracle.length_weight = w;
        s.oracle_reward = make_oracle_reward(&s.oracle)?;
    }
    Ok(s)
}

fn prepare(cfg: &BiasSweepConfig, sc: &Scenario, pool: &PreferenceDataset, seed: u64, rho: f64) -> Result<Prepared> {
    let margin = cfg.scenario.longer_margin;
    let tag = rho.to_bits();
    let spec = BiasedDatasetSpec { rho_bias: rho, size: cfg.dataset_size, longer_margin: margin };
    let d = build_biased_dataset(pool, &sc.space, &spec, sub_seed(seed, tag ^ 0x10))?;
    let (train, val) = train_validation_split(&d, cfg.train_fraction, sub_seed(seed, tag ^ 0x20))?;
    let fit = |data: &PreferenceDataset| train_reward_linear(data, &sc.features, cfg.reward_l2, cfg.reward_lr, cfg.reward_steps);
    let r_rho = fit(&train)?.reward;
    let size = max_subsample_size(&train, &sc.space, &cfg.bs, margin)?;
    let mut members = Vec::with_capacity(cfg.bs.len());
    for (j, &b) in cfg.bs.iter().enumerate() {
        let sub = subsample_at_bias(&train, &sc.space, b, size, margin, sub_seed(seed, tag ^ (0x100 + j as u64)))?;
        members.push(fit(&sub)?.reward);
    }
    let mut counts = vec![0.0; sc.space.n_contexts()];
    for p in val.pairs() {
        counts[p.x] += 1.0;
    }
    let n = val.len() as f64;
    Ok(Prepared {
        rho,
        batch_seed: sub_seed(seed, tag ^ 0x30),
        train: if cfg.batch_size.is_some() { train } else { train.aggregated() },
        validation_weights: counts.into_iter().map(|c| c / n).collect(),
        r_rho,
        ensemble: RewardEnsemble::new(members)?,
    })
}

/// `Σ_x w(x) Σ_y (π − π_ref)(y|x) r(x, y)`.
fn advantage(policy: &TabularPolicy, reference: &ReferencePolicy, r: &RewardTable, weights: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (x, &w) in weights.iter().enumerate() {
        let (p, q) = (policy.probs(x), reference.probs(x));
        for (y, (a, b)) in p.iter().zip(&q).enumerate() {
            total += w * (a - b) * r.get(x, y)?;
        }
    }
    Ok(total)
}

/// Gershgorin bound on the largest Hessian eigenvalue of the IPO loss in logit space.
fn ipo_curvature_bound(data: &PreferenceDataset) -> f64 {
    let mut degree = std::collections::HashMap::new();
    for (p, &w) in data.pairs().iter().zip(data.weights()) {
        *degree.entry((p.x, p.y_w)).or_insert(0.0) += w;
        *degree.entry((p.x, p.y_l)).or_insert(0.0) += w;
    }
    4.0 * degree.values().copied().fold(0.0, f64::max)
}

fn run_one(cfg: &BiasSweepConfig, sc: &Scenario, prep: &Prepared, method: Method, value: f64) -> Result<SweepRun> {
    let shape = sc.space.shape();
    let scale = shape.iter().sum::<usize>() as f64;
    let reference = ReferencePolicy::uniform(&sc.space);
    let mu = PromptDistribution::uniform(shape.len());
    let triples = || TripleDataset::from_preferences(&prep.train);
    let beta = value;
    let (objective, lr, annealed) = match method {
        Method::Dpo => (Objective::Dpo { data: prep.train.clone(), beta }, cfg.lr_dpo * scale / (beta * beta), false),
        Method::PDpo => (
            Objective::PessimisticDpo { data: prep.train.clone(), mu, beta, gamma: cfg.gamma_start, kl_mode: KlMode::Exact },
            cfg.lr_dpo * scale / (beta * beta),
            true,
        ),
        Method::Ipo => {
            (Objective::Ipo { data: prep.train.clone(), tau_inv: 1.0 / value }, cfg.lr_ipo / ipo_curvature_bound(&prep.train), false)
        }
        Method::DDpo => {
            (Objective::Distill { target: prep.r_rho.clone(), triples: triples(), beta }, cfg.lr_distill * scale / (beta * beta), false)
        }
        Method::DpDpo => (
            Objective::PessimisticDistill {
                ensemble: RewardEnsemble::new(vec![prep.r_rho.clone()])?,
                triples: triples(),
                mu,
                beta,
                gamma: cfg.gamma_start,
            },
            cfg.lr_distill * scale / (beta * beta),
            true,
        ),
        Method::EDpo => (
            Objective::PessimisticDistill { ensemble: prep.ensemble.clone(), triples: triples(), mu, beta, gamma: cfg.gamma_start },
            cfg.lr_distill * scale / (beta * beta),
            true,
        ),
    };
    let mut opts = DescentOptions::new(lr, cfg.steps).record_every(if method == Method::EDpo { 1 } else { cfg.steps });
    if annealed {
        opts = opts.schedule(AnnealSchedule::linear(cfg.gamma_start, cfg.gamma_end)?);
    }
    if let Some(size) = cfg.batch_size {
        let stream = sub_seed(prep.batch_seed, (method as u64) << 56 ^ value.to_bits());
        opts = opts.batching(Batching { size, seed: stream });
    }
    let spec = LossSpec::new(reference.clone(), objective);
    let hyperparameter = if method == Method::Ipo { "tau" } else { "beta" };
    let mut out = SweepRun {
        rho: prep.rho,
        method,
        hyperparameter,
        value,
        validation_advantage: f64::NAN,
        advantage: f64::NAN,
        diverged: true,
        selections: Vec::new(),
    };
    match gradient_descent(&spec, &TabularPolicy::zeros(&sc.space), &opts) {
        Ok((policy, traj)) if !traj.truncated => {
            // the last record is the evaluation after the final update, which never steers a step
            out.selections = traj.records[..traj.records.len() - 1].iter().filter_map(|r| r.selected_member).collect();
            out.validation_advantage = advantage(&policy, &reference, &sc.oracle_reward, &prep.validation_weights)?;
            out.advantage = advantage(&policy, &reference, &sc.oracle_reward, mu_weights(&shape).as_slice())?;
            out.diverged = false;
        }
        Ok(_) | Err(Error::NonFinite { .. }) => {}
        Err(e) => return Err(e),
    }
    Ok(out)
}

fn mu_weights(shape: &[usize]) -> Vec<f64> {
    vec![1.0 / shape.len() as f64; shape.len()]
}

fn sweep(cfg: &BiasSweepConfig, seed: u64, workers: usize) -> Result<(f64, Vec<SweepRun>, Vec<MethodSelection>)> {
    let sc = scenario(cfg, seed)?;
    let pool = sc.labeled_pool(cfg.pool_repeats, sub_seed(seed, 2))?;
    let prepared = par_map(&cfg.rhos, workers, |&rho| prepare(cfg, &sc, &pool, seed, rho))?;
    let mut jobs = Vec::new();
    for (i, _) in prepared.iter().enumerate() {
        for &m in &cfg.methods {
            let grid = if m == Method::Ipo { &cfg.taus } else { &cfg.betas };
            for &v in grid {
                jobs.push((i, m, v));
            }
        }
    }
    let runs = par_map(&jobs, workers, |&(i, m, v)| run_one(cfg, &sc, &prepared[i], m, v))?;
    let mut selected = Vec::new();
    for p in &prepared {
        for &m in &cfg.methods {
            let best = runs
                .iter()
                .filter(|r| r.rho == p.rho && r.method == m && !r.diverged)
                .fold(None::<&SweepRun>, |best, r| match best {
                    Some(b) if b.validation_advantage >= r.validation_advantage => Some(b),
                    _ => Some(r),
                })
                .cloned();
            selected.push(MethodSelection { rho: p.rho, method: m, run: best });
        }
    }
    Ok((sc.oracle.length_weight, runs, selected))
}

/// Oracle advantage of every method over the ρ grid, with validation-based model selection.
pub fn bias_sweep(cfg: &BiasSweepConfig, seed: u64, workers: usize) -> Result<BiasSweepResult> {
    cfg.validate("bias_sweep")?;
    let (length_weight, runs, selected) = sweep(cfg, seed, workers)?;
    let mut result = BiasSweepResult { seed, length_weight, runs, selected, checks: Vec::new() };
    let mut checks = Vec::new();
    for &rho in &cfg.rhos {
        let mut failing = Vec::new();
        for &m in &cfg.methods {
            match result.advantage(rho, m) {
                Some(a) if a > 0.0 => {}
                Some(a) => failing.push(format!("{} {a:.6}", m.name())),
                None => failing.push(format!("{} diverged", m.name())),
            }
        }
        let detail = if failing.is_empty() { "every selected advantage positive".to_string() } else { failing.join(", ") };
        checks.push(Check::new(format!("all methods beat the reference at rho={rho}"), failing.is_empty(), detail));
    }
    for &rho in &cfg.check_rhos {
        if !cfg.rhos.contains(&rho) {
            continue;
        }
        let best = |pred: fn(Method) -> bool| {
            cfg.methods.iter().filter(|m| pred(**m)).filter_map(|&m| result.advantage(rho, m)).fold(None::<f64>, |a, v| Some(a.map_or(v, |a| a.max(v))))
        };
        let distill = best(Method::is_distillation);
        let direct = best(|m| matches!(m, Method::Dpo | Method::Ipo));
        if let (Some(d), Some(p)) = (distill, direct) {
            checks.push(Check::new(
                format!("distillation >= dpo/ipo at rho={rho}"),
                d >= p,
                format!("best distillation {d:.6}, best dpo/ipo {p:.6}"),
            ));
        }
    }
    result.checks = checks;
    Ok(result)
}

/// Which ensemble member the e-DPO min selects over training, per ρ.
pub fn edpo_rm_dist(cfg: &EdpoRmDistConfig, seed: u64, workers: usize) -> Result<EdpoRmDistResult> {
    let cfg = cfg.sweep();
    cfg.validate("edpo_rm_dist")?;
    let (_, _, selected) = sweep(&cfg, seed, workers)?;
    let mut histograms = Vec::new();
    for s in &selected {
        let mut h = vec![0usize; cfg.bs.len()];
        if let Some(r) = &s.run {
            for &k in &r.selections {
                h[k] += 1;
            }
        }
        histograms.push((s.rho, h));
    }
    let mut result = EdpoRmDistResult { seed, bs: cfg.bs.clone(), histograms, checks: Vec::new() };
    let mut checks = Vec::new();
    for &rho in &cfg.rhos {
        if rho == 0.5 || cfg.bs.len() < 2 {
            continue;
        }
        let modal = result.modal_b(rho);
        let passed = modal.is_some_and(|b| if rho < 0.5 { b > 0.5 } else { b < 0.5 });
        let want = if rho < 0.5 { "b > 0.5" } else { "b < 0.5" };
        checks.push(Check::new(
            format!("modal member at rho={rho} has {want}"),
            passed,
            format!("modal b {}", modal.map_or("none".to_string(), |b| b.to_string())),
        ));
    }
    result.checks = checks;
    Ok(result)
}


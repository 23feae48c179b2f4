use super::config::{DegeneracyConfig, Method};
use super::{fmt_f64, par_map, Check, CsvTable};
use crate::error::{Error, Result};
use crate::losses::{KlMode, LossSpec, Objective, PreferenceDataset, PreferencePair, TripleDataset};
use crate::model::{OutcomeSpace, PromptDistribution, ReferencePolicy, TabularPolicy};
use crate::optim::{gradient_descent, DescentOptions, StepRecord};
use crate::oracles::{ddpo_closed_form, dpo_degeneracy_certificate};
use crate::synthdata::train_reward_mle;

#[derive(Clone, Debug, PartialEq)]
pub struct MethodTrajectory {
    pub method: Method,
    pub records: Vec<StepRecord>,
    pub policy: TabularPolicy,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegeneracyResult {
    pub pairs: Vec<PreferencePair>,
    pub unseen: Vec<usize>,
    pub runs: Vec<MethodTrajectory>,
    pub checks: Vec<Check>,
}

impl DegeneracyResult {
    pub fn table(&self) -> CsvTable {
        let mut t = CsvTable::new(&[
            "method",
            "step",
            "loss",
            "margin_min",
            "margin_max",
            "mean_log_pi_w",
            "mean_log_pi_l",
            "kl_fwd",
            "kl_rev",
            "mass_on_unseen",
        ]);
        for run in &self.runs {
            for r in &run.records {
                let lo = r.margins.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = r.margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                t.push(vec![
                    run.method.name().into(),
                    r.step.to_string(),
                    fmt_f64(r.loss),
                    fmt_f64(lo),
                    fmt_f64(hi),
                    fmt_f64(r.mean_log_pi_w),
                    fmt_f64(r.mean_log_pi_l),
                    fmt_f64(r.kl_forward),
                    fmt_f64(r.kl_reverse),
                    fmt_f64(r.tracked_mass),
                ]);
            }
        }
        t
    }
}

/// Single-context instance: the pairs and the outcomes no pair mentions.
fn instance(cfg: &DegeneracyConfig) -> Result<(Vec<PreferencePair>, usize, Vec<usize>)> {
    let raw: Vec<[usize; 2]> = match &cfg.pairs {
        Some(p) => p.clone(),
        None => (0..cfg.n_pairs).map(|i| [2 * i, 2 * i + 1]).collect(),
    };
    let mut seen = std::collections::BTreeSet::new();
    for [w, l] in &raw {
        for y in [w, l] {
            if !seen.insert(*y) {
                return Err(Error::Precondition(format!("pairs are not disjoint: outcome {y} appears twice")));
            }
        }
    }
    let n_outcomes = seen.iter().next_back().map_or(0, |m| m + 1) + cfg.n_unseen;
    let unseen = (0..n_outcomes).filter(|y| !seen.contains(y)).collect();
    Ok((raw.iter().map(|&[w, l]| PreferencePair::new(0, w, l)).collect(), n_outcomes, unseen))
}

fn log_ratio(policy: &TabularPolicy, reference: &ReferencePolicy, p: &PreferencePair) -> Result<f64> {
    Ok(policy.log_prob(0, p.y_w)? - policy.log_prob(0, p.y_l)? - (reference.log_prob(0, p.y_w)? - reference.log_prob(0, p.y_l)?))
}

/// Descent on disjoint pairs for each configured method, with collapse and closed-form checks.
pub fn degeneracy(cfg: &DegeneracyConfig, workers: usize) -> Result<DegeneracyResult> {
    cfg.validate()?;
    let (pairs, n_outcomes, unseen) = instance(cfg)?;
    let space = OutcomeSpace::single(n_outcomes)?;
    let reference = ReferencePolicy::uniform(&space);
    let data = PreferenceDataset::new(pairs.clone())?;
    let target = if cfg.methods.contains(&Method::DDpo) {
        Some(train_reward_mle(&data, &space, cfg.reward_l2, cfg.reward_lr, cfg.reward_steps)?)
    } else {
        None
    };
    let opts = DescentOptions::new(cfg.lr, cfg.steps)
        .record_pairs(pairs.clone())
        .track_mass(unseen.iter().map(|&y| (0, y)).collect())
        .record_every(cfg.record_every);

    let runs = par_map(&cfg.methods, workers, |&method| {
        let objective = match method {
            Method::Dpo => Objective::Dpo { data: data.clone(), beta: cfg.beta },
            Method::PDpo => Objective::PessimisticDpo {
                data: data.clone(),
                mu: PromptDistribution::uniform(1),
                beta: cfg.beta,
                gamma: cfg.gamma,
                kl_mode: KlMode::Empirical,
            },
            Method::DDpo => Objective::Distill {
                target: target.clone().expect("trained above"),
                triples: TripleDataset::from_preferences(&data),
                beta: cfg.beta,
            },
            _ => unreachable!("rejected by validate"),
        };
        let spec = LossSpec::new(reference.clone(), objective);
        let (policy, traj) = gradient_descent(&spec, &TabularPolicy::zeros(&space), &opts)?;
        Ok(MethodTrajectory { method, records: traj.records, policy, truncated: traj.truncated })
    })?;

    let mut checks = Vec::new();
    for run in &runs {
        let last = run.records.last().expect("at least one record");
        let name = run.method.name();
        match run.method {
            Method::Dpo => {
                let lo = last.margins.iter().copied().fold(f64::INFINITY, f64::min);
                checks.push(Check::new(
                    format!("{name} margin_min > {}", cfg.margin_threshold),
                    lo > cfg.margin_threshold,
                    format!("final margin_min {lo:.6} after {} steps", last.step),
                ));
                checks.push(Check::new(
                    format!("{name} mean_log_pi_l < {}", cfg.log_pi_l_threshold),
                    last.mean_log_pi_l < cfg.log_pi_l_threshold,
                    format!("final mean_log_pi_l {:.6}", last.mean_log_pi_l),
                ));
                let cert = dpo_degeneracy_certificate(&run.policy, &data, cfg.certificate_eps)?;
                checks.push(Check::new(
                    format!("{name} degeneracy certificate eps={}", cfg.certificate_eps),
                    cert.passed,
                    format!("mass on losers {:.3e}, min winner prob {:.3e}", cert.mass_on_losers, cert.min_winner_prob),
                ));
            }
            Method::PDpo => {
                let alpha = cfg.beta / cfg.gamma;
                let want = (alpha - 1.0).ln() / cfg.beta;
                let mut worst = 0.0f64;
                for p in &pairs {
                    worst = worst.max((log_ratio(&run.policy, &reference, p)? - want).abs());
                }
                checks.push(Check::new(
                    format!("{name} log-ratio target log(alpha-1)/beta"),
                    !run.truncated && worst < cfg.target_tolerance,
                    format!("alpha {alpha}, target {want:.6}, max deviation {worst:.3e} (tolerance {:e})", cfg.target_tolerance),
                ));
            }
            Method::DDpo => {
                let r = target.as_ref().expect("trained above");
                let mut min_p = f64::INFINITY;
                let mut worst = 0.0f64;
                for p in &pairs {
                    let pw = run.policy.log_prob(0, p.y_w)?.exp();
                    let pl = run.policy.log_prob(0, p.y_l)?.exp();
                    min_p = min_p.min(pw).min(pl);
                    let rw = reference.log_prob(0, p.y_w)?.exp();
                    let rl = reference.log_prob(0, p.y_l)?.exp();
                    let want = ddpo_closed_form(pw, rw, rl, r.get(0, p.y_l)? - r.get(0, p.y_w)?, cfg.beta)?;
                    worst = worst.max((pl - want).abs() / want);
                }
                checks.push(Check::new(
                    format!("{name} probabilities above {:e}", cfg.prob_floor),
                    min_p > cfg.prob_floor,
                    format!("smallest pair probability {min_p:.6e}"),
                ));
                checks.push(Check::new(
                    format!("{name} matches distillation closed form"),
                    worst < cfg.closed_form_tolerance,
                    format!("max relative deviation {worst:.3e}"),
                ));
            }
            _ => unreachable!(),
        }
    }
    Ok(DegeneracyResult { pairs, unseen, runs, checks })
}

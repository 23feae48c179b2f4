use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{GradLoss, GradcheckConfig};
use super::{fmt_f64, par_map, sub_seed, Check, CsvTable};
use crate::error::Result;
use crate::losses::{
    distill_loss, dpo_loss, finite_diff_grad, ipo_loss, pdistill_loss, pdpo_loss, relative_error, KlMode, LossValueAndGrad,
    PreferenceDataset, PreferencePair, Triple, TripleDataset,
};
use crate::model::{PromptDistribution, ReferencePolicy, RewardEnsemble, RewardTable, Table, TabularPolicy};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub loss: GradLoss,
    pub instance: usize,
    pub eps: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckResult {
    pub rows: Vec<GradcheckRow>,
    pub checks: Vec<Check>,
}

impl GradcheckResult {
    pub fn table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["loss", "instance", "eps", "relative_error"]);
        for r in &self.rows {
            t.push(vec![r.loss.name().into(), r.instance.to_string(), fmt_f64(r.eps), fmt_f64(r.relative_error)]);
        }
        t
    }

    /// Largest relative error per loss, in config order.
    pub fn max_errors(&self) -> Vec<(GradLoss, f64)> {
        let mut out: Vec<(GradLoss, f64)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(l, _)| *l == r.loss) {
                Some((_, m)) => *m = m.max(r.relative_error),
                None => out.push((r.loss, r.relative_error)),
            }
        }
        out
    }
}

fn normal_table(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Table {
    let mut z = || -> f64 { StandardNormal.sample(&mut *rng) };
    Table::from_rows(shape.iter().map(|&n| (0..n).map(|_| scale * z()).collect()).collect())
}

fn random_pairs(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<(usize, usize, usize)> {
    let n = rng.random_range(1..=6);
    (0..n)
        .map(|_| {
            let x = rng.random_range(0..shape.len());
            let a = rng.random_range(0..shape[x]);
            let b = (a + rng.random_range(1..shape[x])) % shape[x];
            (x, a, b)
        })
        .collect()
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.1..1.0)).collect()
}

/// Random instance of `loss`; returns the evaluator at any policy plus the evaluation point.
#[allow(clippy::type_complexity)]
fn instance(loss: GradLoss, cfg: &GradcheckConfig, seed: u64) -> Result<(Box<dyn Fn(&TabularPolicy) -> Result<LossValueAndGrad>>, TabularPolicy)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_ctx = rng.random_range(1..=cfg.max_contexts);
    let shape: Vec<usize> = (0..n_ctx).map(|_| rng.random_range(2..=cfg.max_outcomes)).collect();
    let policy = TabularPolicy::new(normal_table(&mut rng, &shape, 1.5))?;
    let reference = ReferencePolicy::from_logits(&normal_table(&mut rng, &shape, 1.0))?;
    let beta = rng.random_range(0.2..3.0);
    let pairs = random_pairs(&mut rng, &shape);
    let pw = weights(&mut rng, pairs.len());
    let data = PreferenceDataset::with_weights(pairs.iter().map(|&(x, a, b)| PreferencePair::new(x, a, b)).collect(), pw)?;
    let triples = TripleDataset::with_weights(
        pairs.iter().map(|&(x, a, b)| Triple { x, y1: a, y2: b }).collect(),
        weights(&mut rng, pairs.len()),
    )?;
    let mu_raw = weights(&mut rng, n_ctx);
    let s: f64 = mu_raw.iter().sum();
    let mu = PromptDistribution::new(mu_raw.iter().map(|w| w / s).collect())?;
    let gamma = rng.random_range(0.0..1.0);
    let f: Box<dyn Fn(&TabularPolicy) -> Result<LossValueAndGrad>> = match loss {
        GradLoss::Dpo => Box::new(move |p| dpo_loss(p, &reference, &data, beta)),
        GradLoss::Ipo => {
            let tau_inv = rng.random_range(0.2..2.0);
            Box::new(move |p| ipo_loss(p, &reference, &data, tau_inv))
        }
        GradLoss::Distill => {
            let r = RewardTable::new(normal_table(&mut rng, &shape, 1.0))?;
            Box::new(move |p| distill_loss(&r, p, &reference, &triples, beta))
        }
        GradLoss::PDistill => {
            let members = (0..3).map(|_| RewardTable::new(normal_table(&mut rng, &shape, 1.0))).collect::<Result<Vec<_>>>()?;
            let ens = RewardEnsemble::new(members)?;
            Box::new(move |p| pdistill_loss(&ens, p, &reference, &triples, &mu, beta, gamma, None))
        }
        GradLoss::PDpo => Box::new(move |p| pdpo_loss(p, &reference, &data, &mu, beta, gamma, KlMode::Exact)),
    };
    Ok((f, policy))
}

/// Finite-difference check of every configured loss on `cfg.instances` random instances per ε.
pub fn gradcheck(cfg: &GradcheckConfig, seed: u64, workers: usize) -> Result<GradcheckResult> {
    cfg.validate()?;
    let jobs: Vec<(usize, GradLoss, usize)> =
        cfg.losses.iter().enumerate().flat_map(|(li, &l)| (0..cfg.instances).map(move |i| (li, l, i))).collect();
    let per_job = par_map(&jobs, workers, |&(li, loss, i)| {
        let (f, policy) = instance(loss, cfg, sub_seed(seed, (li as u64) << 32 | i as u64))?;
        let mut analytic = f(&policy)?.grad;
        if cfg.negative_control {
            analytic.scale(-1.0);
        }
        cfg.eps
            .iter()
            .map(|&eps| {
                let fd = finite_diff_grad(|p| Ok(f(p)?.value), &policy, eps)?;
                Ok(GradcheckRow { loss, instance: i, eps, relative_error: relative_error(&analytic, &fd) })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<GradcheckRow> = per_job.into_iter().flatten().collect();
    let mut checks = Vec::new();
    for &loss in &cfg.losses {
        for &eps in &cfg.eps {
            let worst = rows.iter().filter(|r| r.loss == loss && r.eps == eps).map(|r| r.relative_error).fold(0.0, f64::max);
            checks.push(Check::new(
                format!("{} eps={eps:e}", loss.name()),
                worst < cfg.tolerance,
                format!("max relative error {worst:.3e} over {} instances (tolerance {:e})", cfg.instances, cfg.tolerance),
            ));
        }
    }
    Ok(GradcheckResult { rows, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes_and_negative_control_fails() {
        let cfg = GradcheckConfig { instances: 10, ..GradcheckConfig::default() };
        let r = gradcheck(&cfg, 3, 1).unwrap();
        assert!(r.checks.iter().all(|c| c.passed), "{:?}", r.checks);
        assert_eq!(r.rows.len(), 5 * 10 * 2);
        let bad = gradcheck(&GradcheckConfig { negative_control: true, ..cfg }, 3, 1).unwrap();
        assert!(bad.checks.iter().all(|c| !c.passed));
    }
}

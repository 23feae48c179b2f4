use super::config::{Method, TransitivityConfig};
use super::{fmt_f64, par_map, Check, CsvTable};
use crate::error::Result;
use crate::losses::{KlMode, LossSpec, Objective};
use crate::model::{Conditional, PromptDistribution, ReferencePolicy, TabularPolicy};
use crate::optim::{minimize_logits, LogitOptions};
use crate::oracles::{ipo_chain_solution, ChainKind, ChainPreferences};

/// Final arm probabilities of one method on one preference structure.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitivityRow {
    pub method: Method,
    pub kind: ChainKind,
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
    pub tau_inv: Option<f64>,
    pub probs: Vec<f64>,
    /// IPO only.
    pub analytic: Option<Vec<f64>>,
    pub grad_norm: f64,
    pub iterations: usize,
}

impl TransitivityRow {
    /// `log(max π / min π)`, the spread of the log-probabilities.
    pub fn spread(&self) -> f64 {
        let hi = self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = self.probs.iter().copied().fold(f64::INFINITY, f64::min);
        (hi / lo).ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitivityResult {
    pub rows: Vec<TransitivityRow>,
    pub checks: Vec<Check>,
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

impl TransitivityResult {
    pub fn table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["method", "kind", "beta", "alpha", "tau_inv", "arm", "prob", "analytic_prob"]);
        for r in &self.rows {
            for (i, p) in r.probs.iter().enumerate() {
                t.push(vec![
                    r.method.name().into(),
                    r.kind.name().into(),
                    opt(r.beta),
                    opt(r.alpha),
                    opt(r.tau_inv),
                    i.to_string(),
                    fmt_f64(*p),
                    opt(r.analytic.as_ref().map(|a| a[i])),
                ]);
            }
        }
        t
    }

    pub fn find(&self, method: Method, kind: ChainKind, beta: Option<f64>, alpha: Option<f64>, tau_inv: Option<f64>) -> Option<&TransitivityRow> {
        self.rows.iter().find(|r| r.method == method && r.kind == kind && r.beta == beta && r.alpha == alpha && r.tau_inv == tau_inv)
    }
}

#[derive(Clone, Copy)]
struct Job {
    method: Method,
    kind: ChainKind,
    beta: Option<f64>,
    alpha: Option<f64>,
    tau_inv: Option<f64>,
}

fn solve(cfg: &TransitivityConfig, job: &Job) -> Result<TransitivityRow> {
    let prefs = ChainPreferences::new(cfg.n, job.kind)?;
    let data = prefs.dataset();
    let reference = ReferencePolicy::uniform_shape(&[cfg.n]);
    let (objective, analytic, lr) = match job.method {
        Method::Ipo => {
            let tau_inv = job.tau_inv.expect("ipo job has a target");
            let sol = ipo_chain_solution(cfg.n, tau_inv, job.kind)?;
            (Objective::Ipo { data: data.clone(), tau_inv }, Some(sol.probs()), 0.1)
        }
        _ => {
            let (beta, alpha) = (job.beta.expect("grid point"), job.alpha.expect("grid point"));
            // summed DPO terms plus (β/α)·KL, written in mean form
            let gamma = beta / (alpha * data.len() as f64);
            let objective = Objective::PessimisticDpo { data, mu: PromptDistribution::uniform(1), beta, gamma, kl_mode: KlMode::Exact };
            (objective, None, 0.1 / (beta * beta))
        }
    };
    let spec = LossSpec::new(reference, objective);
    let opts = LogitOptions { grad_tol: cfg.tol, ..LogitOptions::new(lr, cfg.max_steps) };
    let run = minimize_logits(&spec, &TabularPolicy::from_shape(&[cfg.n]), &opts)?;
    Ok(TransitivityRow {
        method: job.method,
        kind: job.kind,
        beta: job.beta,
        alpha: job.alpha,
        tau_inv: job.tau_inv,
        probs: run.policy.probs(0),
        analytic,
        grad_norm: run.grad_norm,
        iterations: run.iterations,
    })
}

/// IPO and p-DPO arm probabilities on a chain and its transitive closure.
///
/// At each `(β, α)` point IPO uses `τ⁻¹ = log(α − 1)/β`, the log-ratio p-DPO
/// assigns to an isolated pair; `ipo_tau_invs` adds IPO-only points.
pub fn transitivity(cfg: &TransitivityConfig, workers: usize) -> Result<TransitivityResult> {
    cfg.validate()?;
    let kinds = [ChainKind::Chain, ChainKind::Closure];
    let mut jobs = Vec::new();
    for &beta in &cfg.betas {
        for &alpha in &cfg.alphas {
            for kind in kinds {
                let (b, a) = (Some(beta), Some(alpha));
                jobs.push(Job { method: Method::PDpo, kind, beta: b, alpha: a, tau_inv: None });
                jobs.push(Job { method: Method::Ipo, kind, beta: b, alpha: a, tau_inv: Some((alpha - 1.0).ln() / beta) });
            }
        }
    }
    for &t in &cfg.ipo_tau_invs {
        for kind in kinds {
            jobs.push(Job { method: Method::Ipo, kind, beta: None, alpha: None, tau_inv: Some(t) });
        }
    }
    let rows = par_map(&jobs, workers, |j| solve(cfg, j))?;
    let result = TransitivityResult { rows, checks: Vec::new() };

    let mut pdpo_worst = 0.0f64;
    let mut pdpo_at = String::new();
    let mut compressed = true;
    let mut compressed_detail = String::from("closure spread < chain spread at every point");
    let mut analytic_worst = 0.0f64;
    for r in &result.rows {
        if let Some(a) = &r.analytic {
            for (p, q) in r.probs.iter().zip(a) {
                analytic_worst = analytic_worst.max((p - q).abs());
            }
        }
        if r.kind != ChainKind::Chain {
            continue;
        }
        let closure = result.find(r.method, ChainKind::Closure, r.beta, r.alpha, r.tau_inv).expect("closure job exists");
        match r.method {
            Method::PDpo => {
                let d = r.probs.iter().zip(&closure.probs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if d > pdpo_worst {
                    pdpo_worst = d;
                    pdpo_at = format!(" at beta={} alpha={}", r.beta.unwrap_or(f64::NAN), r.alpha.unwrap_or(f64::NAN));
                }
            }
            _ => {
                if closure.spread().partial_cmp(&r.spread()) != Some(std::cmp::Ordering::Less) && compressed {
                    compressed = false;
                    compressed_detail = format!(
                        "closure spread {:.6} not below chain spread {:.6} at tau_inv={}",
                        closure.spread(),
                        r.spread(),
                        r.tau_inv.unwrap_or(f64::NAN)
                    );
                }
            }
        }
    }
    let checks = vec![
        Check::new(
            "p-dpo chain vs closure per-arm difference",
            pdpo_worst < cfg.prob_tolerance,
            format!("max difference {pdpo_worst:.3e}{pdpo_at} (tolerance {:e})", cfg.prob_tolerance),
        ),
        Check::new("ipo closure compresses probabilities", compressed, compressed_detail),
        Check::new(
            "ipo descent matches analytic solution",
            analytic_worst < cfg.analytic_tolerance,
            format!("max probability error {analytic_worst:.3e} (tolerance {:e})", cfg.analytic_tolerance),
        ),
    ];
    Ok(TransitivityResult { checks, ..result })
}

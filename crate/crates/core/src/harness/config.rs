//! Strict JSON experiment configuration. Every block is optional and falls
//! back to its defaults; unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::ScenarioSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "ipo")]
    Ipo,
    #[serde(rename = "d-dpo")]
    DDpo,
    #[serde(rename = "p-dpo")]
    PDpo,
    #[serde(rename = "dp-dpo")]
    DpDpo,
    #[serde(rename = "e-dpo")]
    EDpo,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Dpo, Method::Ipo, Method::DDpo, Method::PDpo, Method::DpDpo, Method::EDpo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::Ipo => "ipo",
            Method::DDpo => "d-dpo",
            Method::PDpo => "p-dpo",
            Method::DpDpo => "dp-dpo",
            Method::EDpo => "e-dpo",
        }
    }

    /// Methods that fit a policy to an explicit reward model.
    pub fn is_distillation(self) -> bool {
        matches!(self, Method::DDpo | Method::DpDpo | Method::EDpo)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradLoss {
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "ipo")]
    Ipo,
    #[serde(rename = "distill")]
    Distill,
    #[serde(rename = "p-distill")]
    PDistill,
    #[serde(rename = "p-dpo")]
    PDpo,
}

impl GradLoss {
    pub const ALL: [GradLoss; 5] = [GradLoss::Dpo, GradLoss::Ipo, GradLoss::Distill, GradLoss::PDistill, GradLoss::PDpo];

    pub fn name(self) -> &'static str {
        match self {
            GradLoss::Dpo => "dpo",
            GradLoss::Ipo => "ipo",
            GradLoss::Distill => "distill",
            GradLoss::PDistill => "p-distill",
            GradLoss::PDpo => "p-dpo",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub gradcheck: GradcheckConfig,
    pub degeneracy: DegeneracyConfig,
    pub transitivity: TransitivityConfig,
    pub bias_sweep: BiasSweepConfig,
    pub edpo_rm_dist: EdpoRmDistConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub losses: Vec<GradLoss>,
    pub instances: usize,
    pub eps: Vec<f64>,
    pub tolerance: f64,
    pub max_contexts: usize,
    pub max_outcomes: usize,
    /// Flip the sign of every analytic gradient; the check must then fail.
    pub negative_control: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            losses: GradLoss::ALL.to_vec(),
            instances: 100,
            eps: vec![1e-4, 1e-6],
            tolerance: 1e-5,
            max_contexts: 3,
            max_outcomes: 4,
            negative_control: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegeneracyConfig {
    pub methods: Vec<Method>,
    /// Explicit `[winner, loser]` outcome pairs; generated as `(0,1), (2,3), …` when absent.
    pub pairs: Option<Vec<[usize; 2]>>,
    pub n_pairs: usize,
    pub n_unseen: usize,
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub record_every: usize,
    /// KL weight for p-dpo; the implied α is `beta / gamma`.
    pub gamma: f64,
    pub reward_l2: f64,
    pub reward_lr: f64,
    pub reward_steps: usize,
    pub certificate_eps: f64,
    pub margin_threshold: f64,
    pub log_pi_l_threshold: f64,
    pub target_tolerance: f64,
    pub prob_floor: f64,
    pub closed_form_tolerance: f64,
}

impl Default for DegeneracyConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Dpo, Method::PDpo, Method::DDpo],
            pairs: None,
            n_pairs: 3,
            n_unseen: 1,
            beta: 1.0,
            lr: 1.0,
            steps: 100_000,
            record_every: 100,
            gamma: 1e-2,
            reward_l2: 1e-3,
            reward_lr: 1.0,
            reward_steps: 20_000,
            certificate_eps: 1e-3,
            margin_threshold: 20.0,
            log_pi_l_threshold: -20.0,
            target_tolerance: 1e-2,
            prob_floor: 1e-6,
            closed_form_tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransitivityConfig {
    pub n: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Extra IPO targets run alongside the `(β, α)` grid, where IPO uses `τ⁻¹ = log(α − 1)/β`.
    pub ipo_tau_invs: Vec<f64>,
    pub max_steps: usize,
    pub tol: f64,
    pub prob_tolerance: f64,
    pub analytic_tolerance: f64,
}

impl Default for TransitivityConfig {
    fn default() -> Self {
        Self {
            n: 3,
            betas: vec![1.0, 3.0, 10.0, 30.0],
            alphas: vec![5.0, 10.0, 20.0, 50.0, 100.0, 1000.0],
            ipo_tau_invs: vec![1.0],
            max_steps: 200_000,
            tol: 1e-15,
            prob_tolerance: 1e-2,
            analytic_tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_contexts: usize,
    pub n_outcomes: usize,
    pub feature_weights: Vec<f64>,
    pub min_length: u32,
    pub max_length: u32,
    pub target_longer_fraction: f64,
    /// Fixed oracle length weight; calibrated to `target_longer_fraction` when absent.
    pub length_weight: Option<f64>,
    pub longer_margin: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let s = ScenarioSpec::default();
        Self {
            n_contexts: s.n_contexts,
            n_outcomes: s.n_outcomes,
            feature_weights: s.feature_weights,
            min_length: s.min_length,
            max_length: s.max_length,
            target_longer_fraction: s.target_longer_fraction,
            length_weight: None,
            longer_margin: s.longer_margin,
        }
    }
}

impl ScenarioConfig {
    pub fn spec(&self) -> ScenarioSpec {
        ScenarioSpec {
            n_contexts: self.n_contexts,
            n_outcomes: self.n_outcomes,
            feature_weights: self.feature_weights.clone(),
            min_length: self.min_length,
            max_length: self.max_length,
            target_longer_fraction: self.target_longer_fraction,
            longer_margin: self.longer_margin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasSweepConfig {
    pub scenario: ScenarioConfig,
    pub rhos: Vec<f64>,
    pub methods: Vec<Method>,
    pub betas: Vec<f64>,
    /// IPO uses `τ⁻¹ = 1/τ` for each entry.
    pub taus: Vec<f64>,
    pub bs: Vec<f64>,
    pub pool_repeats: usize,
    pub dataset_size: usize,
    pub train_fraction: f64,
    pub steps: usize,
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub reward_l2: f64,
    pub reward_lr: f64,
    pub reward_steps: usize,
    /// Step-size multipliers: lr = c · contexts · outcomes / β². IPO uses c divided by a
    /// bound on its curvature, so any c < 2 is stable.
    pub lr_dpo: f64,
    pub lr_distill: f64,
    pub lr_ipo: f64,
    /// ρ values at which distillation must match or beat DPO and IPO.
    pub check_rhos: Vec<f64>,
    /// Mini-batch size over the training pairs; full batch when absent.
    pub batch_size: Option<usize>,
}

impl Default for BiasSweepConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            rhos: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            methods: Method::ALL.to_vec(),
            betas: vec![0.01, 0.1, 1.0, 3.0, 10.0, 30.0, 100.0],
            taus: vec![0.01, 0.1, 1.0, 3.0, 5.0, 10.0, 25.0],
            bs: vec![0.2, 0.4, 0.5, 0.6, 0.8],
            pool_repeats: 32,
            dataset_size: 6000,
            train_fraction: 0.8,
            steps: 600,
            gamma_start: 1e-4,
            gamma_end: 1e-2,
            reward_l2: 1e-3,
            reward_lr: 0.5,
            reward_steps: 2000,
            lr_dpo: 0.5,
            lr_distill: 0.1,
            lr_ipo: 1.0,
            check_rhos: vec![0.2, 0.3],
            batch_size: None,
        }
    }
}

/// The e-DPO part of the bias sweep, run on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdpoRmDistConfig {
    pub scenario: ScenarioConfig,
    pub rhos: Vec<f64>,
    pub betas: Vec<f64>,
    pub bs: Vec<f64>,
    pub pool_repeats: usize,
    pub dataset_size: usize,
    pub train_fraction: f64,
    pub steps: usize,
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub reward_l2: f64,
    pub reward_lr: f64,
    pub reward_steps: usize,
    pub lr_distill: f64,
    pub batch_size: Option<usize>,
}

impl Default for EdpoRmDistConfig {
    fn default() -> Self {
        let b = BiasSweepConfig::default();
        Self {
            scenario: b.scenario,
            rhos: vec![0.2, 0.8],
            betas: b.betas,
            bs: b.bs,
            pool_repeats: b.pool_repeats,
            dataset_size: b.dataset_size,
            train_fraction: b.train_fraction,
            steps: b.steps,
            gamma_start: b.gamma_start,
            gamma_end: b.gamma_end,
            reward_l2: b.reward_l2,
            reward_lr: b.reward_lr,
            reward_steps: b.reward_steps,
            lr_distill: b.lr_distill,
            batch_size: b.batch_size,
        }
    }
}

impl EdpoRmDistConfig {
    /// The equivalent sweep restricted to e-DPO.
    pub fn sweep(&self) -> BiasSweepConfig {
        BiasSweepConfig {
            scenario: self.scenario.clone(),
            rhos: self.rhos.clone(),
            methods: vec![Method::EDpo],
            betas: self.betas.clone(),
            bs: self.bs.clone(),
            pool_repeats: self.pool_repeats,
            dataset_size: self.dataset_size,
            train_fraction: self.train_fraction,
            steps: self.steps,
            gamma_start: self.gamma_start,
            gamma_end: self.gamma_end,
            reward_l2: self.reward_l2,
            reward_lr: self.reward_lr,
            reward_steps: self.reward_steps,
            lr_distill: self.lr_distill,
            check_rhos: Vec::new(),
            ..BiasSweepConfig::default()
        }
    }
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn nonempty<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        return bad(format!("{what} must be nonempty"));
    }
    Ok(())
}

fn positive(v: f64, what: &str) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return bad(format!("{what} must be positive, got {v}"));
    }
    Ok(())
}

fn nonneg(v: f64, what: &str) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return bad(format!("{what} must be nonnegative, got {v}"));
    }
    Ok(())
}

fn all_positive(v: &[f64], what: &str) -> Result<()> {
    nonempty(v, what)?;
    v.iter().try_for_each(|&x| positive(x, what))
}

fn fractions(v: &[f64], what: &str) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return bad(format!("{what} entries must lie in [0, 1], got {x}"));
    }
    Ok(())
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        nonempty(&self.losses, "gradcheck.losses")?;
        nonempty(&self.eps, "gradcheck.eps")?;
        if let Some(e) = self.eps.iter().find(|e| !(1e-8..=1e-3).contains(*e)) {
            return bad(format!("gradcheck.eps entries must lie in [1e-8, 1e-3], got {e}"));
        }
        positive(self.tolerance, "gradcheck.tolerance")?;
        if self.instances == 0 || self.max_contexts == 0 || self.max_outcomes < 2 {
            return bad("gradcheck needs instances ≥ 1, max_contexts ≥ 1, max_outcomes ≥ 2");
        }
        Ok(())
    }
}

impl DegeneracyConfig {
    pub fn validate(&self) -> Result<()> {
        nonempty(&self.methods, "degeneracy.methods")?;
        if let Some(m) = self.methods.iter().find(|m| !matches!(m, Method::Dpo | Method::PDpo | Method::DDpo)) {
            return bad(format!("degeneracy supports dpo, p-dpo and d-dpo, not {}", m.name()));
        }
        positive(self.beta, "degeneracy.beta")?;
        positive(self.lr, "degeneracy.lr")?;
        positive(self.gamma, "degeneracy.gamma")?;
        if self.beta / self.gamma <= 1.0 {
            return bad("degeneracy.beta / degeneracy.gamma must exceed 1");
        }
        nonneg(self.reward_l2, "degeneracy.reward_l2")?;
        positive(self.reward_lr, "degeneracy.reward_lr")?;
        positive(self.certificate_eps, "degeneracy.certificate_eps")?;
        positive(self.target_tolerance, "degeneracy.target_tolerance")?;
        positive(self.closed_form_tolerance, "degeneracy.closed_form_tolerance")?;
        nonneg(self.prob_floor, "degeneracy.prob_floor")?;
        if self.steps == 0 || self.record_every == 0 || self.reward_steps == 0 {
            return bad("degeneracy steps, record_every and reward_steps must be positive");
        }
        if self.pairs.as_ref().is_some_and(|p| p.is_empty()) || (self.pairs.is_none() && self.n_pairs == 0) {
            return bad("degeneracy needs at least one pair");
        }
        Ok(())
    }
}

impl TransitivityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return bad(format!("transitivity.n must be at least 3, got {}", self.n));
        }
        all_positive(&self.betas, "transitivity.betas")?;
        nonempty(&self.alphas, "transitivity.alphas")?;
        if let Some(a) = self.alphas.iter().find(|a| !(a.is_finite() && **a > 2.0)) {
            return bad(format!("transitivity.alphas entries must exceed 2, got {a}"));
        }
        self.ipo_tau_invs.iter().try_for_each(|&t| positive(t, "transitivity.ipo_tau_invs"))?;
        positive(self.prob_tolerance, "transitivity.prob_tolerance")?;
        positive(self.analytic_tolerance, "transitivity.analytic_tolerance")?;
        nonneg(self.tol, "transitivity.tol")?;
        if self.max_steps == 0 {
            return bad("transitivity.max_steps must be positive");
        }
        Ok(())
    }
}

impl BiasSweepConfig {
    pub fn validate(&self, block: &str) -> Result<()> {
        nonempty(&self.rhos, &format!("{block}.rhos"))?;
        fractions(&self.rhos, &format!("{block}.rhos"))?;
        nonempty(&self.methods, &format!("{block}.methods"))?;
        if self.methods.iter().any(|m| *m != Method::Ipo) {
            all_positive(&self.betas, &format!("{block}.betas"))?;
        }
        if self.methods.contains(&Method::Ipo) {
            all_positive(&self.taus, &format!("{block}.taus"))?;
        }
        nonempty(&self.bs, &format!("{block}.bs"))?;
        fractions(&self.bs, &format!("{block}.bs"))?;
        fractions(&self.check_rhos, &format!("{block}.check_rhos"))?;
        if self.batch_size == Some(0) {
            return bad(format!("{block}.batch_size must be positive"));
        }
        if self.pool_repeats == 0 || self.dataset_size == 0 || self.steps == 0 || self.reward_steps == 0 {
            return bad(format!("{block}: pool_repeats, dataset_size, steps and reward_steps must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("{block}.train_fraction must lie in (0, 1)"));
        }
        nonneg(self.gamma_start, &format!("{block}.gamma_start"))?;
        nonneg(self.gamma_end, &format!("{block}.gamma_end"))?;
        nonneg(self.reward_l2, &format!("{block}.reward_l2"))?;
        positive(self.reward_lr, &format!("{block}.reward_lr"))?;
        positive(self.lr_dpo, &format!("{block}.lr_dpo"))?;
        positive(self.lr_distill, &format!("{block}.lr_distill"))?;
        positive(self.lr_ipo, &format!("{block}.lr_ipo"))?;
        let s = &self.scenario;
        if s.n_contexts == 0 || s.n_outcomes < 2 || s.feature_weights.is_empty() {
            return bad(format!("{block}.scenario needs contexts, at least two outcomes and one feature"));
        }
        if s.min_length == 0 || s.min_length > s.max_length {
            return bad(format!("{block}.scenario length range must satisfy 0 < min ≤ max"));
        }
        if let Some(w) = s.length_weight {
            if !w.is_finite() {
                return bad(format!("{block}.scenario.length_weight must be finite"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_all_defaults() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        assert!(ExperimentConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"degeneracy": {"stepz": 5}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bias_sweep": {"scenario": {"colour": 1}}}"#).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        let cfg = ExperimentConfig::from_json(r#"{"degeneracy": {"methods": ["d-dpo", "p-dpo"]}}"#).unwrap();
        assert_eq!(cfg.degeneracy.methods, vec![Method::DDpo, Method::PDpo]);
        for m in Method::ALL {
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }

    #[test]
    fn validation_rejects_empty_lists() {
        let mut c = TransitivityConfig::default();
        c.betas.clear();
        assert!(c.validate().is_err());
        let mut b = BiasSweepConfig::default();
        b.rhos.clear();
        assert!(b.validate("bias_sweep").is_err());
    }
}

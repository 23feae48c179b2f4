//! Synthetic preference data with a controllable length bias.
//!
//! Outcomes carry an integer length. An oracle reward adds a length term to a
//! base reward, Bradley-Terry relabeling turns candidate comparisons into
//! preferences, and bias-controlled selection builds datasets where the longer
//! outcome wins in a chosen fraction of pairs. Reward models are fit by
//! regularized maximum likelihood, either tabular or linear in features.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{param, Error, Result};
use crate::losses::{PreferenceDataset, PreferencePair, Triple};
use crate::model::{ensure_shape, OutcomeSpace, RewardTable, Table};
use crate::numeric::{neg_log_sigmoid, sigmoid};

pub const DEFAULT_LONGER_MARGIN: f64 = 0.10;
pub const DEFAULT_L2: f64 = 1e-3;

fn lengths(space: &OutcomeSpace) -> Result<&[Vec<u32>]> {
    space.lengths().ok_or_else(|| Error::Precondition("outcome lengths are not set".into()))
}

/// Lengths rescaled to `[0, 1]` by the global min and max; all zero when every length is equal.
pub fn normalized_length(space: &OutcomeSpace) -> Result<Table> {
    let l = lengths(space)?;
    let lo = l.iter().flatten().copied().min().unwrap_or(0) as f64;
    let hi = l.iter().flatten().copied().max().unwrap_or(0) as f64;
    let span = hi - lo;
    Ok(Table::from_rows(
        l.iter().map(|row| row.iter().map(|&v| if span > 0.0 { (v as f64 - lo) / span } else { 0.0 }).collect()).collect(),
    ))
}

/// `Some(a)` if `a` has at least `(1 + margin)` times the tokens of `b`, `Some(b)`
/// in the mirrored case, `None` when neither is clearly longer.
pub fn longer_outcome(space: &OutcomeSpace, x: usize, a: usize, b: usize, margin: f64) -> Result<Option<usize>> {
    space.check(x, a)?;
    space.check(x, b)?;
    let l = lengths(space)?;
    let (la, lb) = (l[x][a] as f64, l[x][b] as f64);
    // relative slack so that e.g. 22 vs 20 counts as 10% longer
    let longer = |p: f64, q: f64| p > q && p >= (1.0 + margin) * q * (1.0 - 1e-12);
    Ok(if longer(la, lb) {
        Some(a)
    } else if longer(lb, la) {
        Some(b)
    } else {
        None
    })
}

/// Whether the winner of `p` is clearly longer (`Some(true)`), clearly shorter
/// (`Some(false)`), or neither.
pub fn longer_preferred(space: &OutcomeSpace, p: &PreferencePair, margin: f64) -> Result<Option<bool>> {
    Ok(longer_outcome(space, p.x, p.y_w, p.y_l, margin)?.map(|y| y == p.y_w))
}

/// Every unordered comparison `y1 < y2` in which one outcome is clearly longer.
pub fn length_contrast_pairs(space: &OutcomeSpace, margin: f64) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for x in 0..space.n_contexts() {
        let k = space.n_outcomes(x);
        for y1 in 0..k {
            for y2 in y1 + 1..k {
                if longer_outcome(space, x, y1, y2, margin)?.is_some() {
                    out.push(Triple { x, y1, y2 });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSpec {
    pub space: OutcomeSpace,
    pub base_reward: RewardTable,
    pub length_weight: f64,
    pub seed: u64,
}

/// `base + length_weight · normalized_length`.
pub fn make_oracle_reward(spec: &OracleSpec) -> Result<RewardTable> {
    ensure_shape(&spec.space.shape(), &spec.base_reward.shape(), "base reward")?;
    if !spec.length_weight.is_finite() {
        return param("length weight must be finite");
    }
    let nl = normalized_length(&spec.space)?;
    let mut v = spec.base_reward.values().clone();
    if spec.length_weight != 0.0 {
        v.axpy(spec.length_weight, &nl);
    }
    RewardTable::new(v)
}

/// Mean Bradley-Terry probability that the longer outcome wins, over `pairs`.
pub fn expected_longer_fraction(space: &OutcomeSpace, r: &RewardTable, pairs: &[Triple], margin: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in pairs {
        if let Some(lo) = longer_outcome(space, t.x, t.y1, t.y2, margin)? {
            let sh = if lo == t.y1 { t.y2 } else { t.y1 };
            total += sigmoid(r.get(t.x, lo)? - r.get(t.x, sh)?);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InsufficientData("no pair has a clearly longer outcome".into()));
    }
    Ok(total / n as f64)
}

/// Bisection on the length weight so that the expected longer-wins fraction
/// over `pairs` hits `target`.
pub fn calibrate_length_weight(
    space: &OutcomeSpace,
    base: &RewardTable,
    pairs: &[Triple],
    target: f64,
    margin: f64,
) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return param(format!("target fraction {target} outside (0, 1)"));
    }
    let frac = |w: f64| {
        let spec = OracleSpec { space: space.clone(), base_reward: base.clone(), length_weight: w, seed: 0 };
        expected_longer_fraction(space, &make_oracle_reward(&spec)?, pairs, margin)
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    while frac(lo)? > target {
        lo *= 2.0;
        if lo < -1e6 {
            return Err(Error::InsufficientData(format!("longer-wins fraction cannot be lowered to {target}")));
        }
    }
    while frac(hi)? < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::InsufficientData(format!("longer-wins fraction cannot be raised to {target}")));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if frac(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// Winner drawn with Bradley-Terry probability.
    Sample,
    /// Higher reward wins; ties go to `y1`.
    Argmax,
}

/// Labels each comparison with the oracle. Sample mode consumes one uniform draw per pair.
pub fn relabel_bt(r_oracle: &RewardTable, raw_pairs: &[Triple], seed: u64, mode: LabelMode) -> Result<PreferenceDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(raw_pairs.len());
    for t in raw_pairs {
        let d = r_oracle.get(t.x, t.y1)? - r_oracle.get(t.x, t.y2)?;
        let first = match mode {
            LabelMode::Argmax => d >= 0.0,
            LabelMode::Sample => rng.random::<f64>() < sigmoid(d),
        };
        pairs.push(if first { PreferencePair::new(t.x, t.y1, t.y2) } else { PreferencePair::new(t.x, t.y2, t.y1) });
    }
    PreferenceDataset::new(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasedDatasetSpec {
    /// Fraction of pairs whose winner is the longer outcome.
    pub rho_bias: f64,
    pub size: usize,
    pub longer_margin: f64,
}

impl BiasedDatasetSpec {
    pub fn new(rho_bias: f64, size: usize) -> Self {
        Self { rho_bias, size, longer_margin: DEFAULT_LONGER_MARGIN }
    }
}

/// Fraction of pairs in `data` where the longer outcome won; pairs without a clearly longer side count as not.
pub fn longer_preferred_fraction(space: &OutcomeSpace, data: &PreferenceDataset, margin: f64) -> Result<f64> {
    let mut n = 0usize;
    for p in data.pairs() {
        if longer_preferred(space, p, margin)? == Some(true) {
            n += 1;
        }
    }
    Ok(n as f64 / data.len() as f64)
}

/// Draws `size` pairs without replacement so that `round(rho_bias · size)` of them are longer-preferred.
///
/// Pairs with no clearly longer side are never drawn. The result is shuffled and uniformly weighted.
pub fn build_biased_dataset(
    labeled: &PreferenceDataset,
    space: &OutcomeSpace,
    spec: &BiasedDatasetSpec,
    seed: u64,
) -> Result<PreferenceDataset> {
    if !(0.0..=1.0).contains(&spec.rho_bias) {
        return param(format!("rho_bias {} outside [0, 1]", spec.rho_bias));
    }
    if spec.size == 0 {
        return param("dataset size must be positive");
    }
    let mut long = Vec::new();
    let mut short = Vec::new();
    for p in labeled.pairs() {
        match longer_preferred(space, p, spec.longer_margin)? {
            Some(true) => long.push(*p),
            Some(false) => short.push(*p),
            None => {}
        }
    }
    let n_long = (spec.rho_bias * spec.size as f64).round() as usize;
    let n_short = spec.size - n_long;
    if n_long > long.len() || n_short > short.len() {
        let size = spec.size as f64;
        let lo = spec.size.saturating_sub(short.len()) as f64 / size;
        let hi = long.len().min(spec.size) as f64 / size;
        let range = if lo <= hi { format!("[{lo}, {hi}]") } else { "empty".to_string() };
        return Err(Error::InsufficientData(format!(
            "fraction {} at size {} needs {n_long} longer-wins and {n_short} shorter-wins pairs; have {} and {}; achievable range {range}",
            spec.rho_bias,
            spec.size,
            long.len(),
            short.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<PreferencePair> = index::sample(&mut rng, long.len(), n_long).into_iter().map(|i| long[i]).collect();
    out.extend(index::sample(&mut rng, short.len(), n_short).into_iter().map(|i| short[i]));
    out.shuffle(&mut rng);
    PreferenceDataset::new(out)
}

/// [`build_biased_dataset`] at fraction `b` on an already biased dataset.
pub fn subsample_at_bias(
    d_rho: &PreferenceDataset,
    space: &OutcomeSpace,
    b: f64,
    size: usize,
    longer_margin: f64,
    seed: u64,
) -> Result<PreferenceDataset> {
    build_biased_dataset(d_rho, space, &BiasedDatasetSpec { rho_bias: b, size, longer_margin }, seed)
}

/// Largest size at which every fraction in `bs` is achievable from `data`.
pub fn max_subsample_size(data: &PreferenceDataset, space: &OutcomeSpace, bs: &[f64], margin: f64) -> Result<usize> {
    let mut long = 0usize;
    let mut short = 0usize;
    for p in data.pairs() {
        match longer_preferred(space, p, margin)? {
            Some(true) => long += 1,
            Some(false) => short += 1,
            None => {}
        }
    }
    let mut best = usize::MAX;
    for &b in bs {
        if b > 0.0 {
            best = best.min((long as f64 / b).floor() as usize);
        }
        if b < 1.0 {
            best = best.min((short as f64 / (1.0 - b)).floor() as usize);
        }
    }
    // rounding of b·size may need one more pair of either kind
    let mut s = best.min(long + short);
    while s > 0 && bs.iter().any(|&b| {
        let nl = (b * s as f64).round() as usize;
        nl > long || s - nl > short
    }) {
        s -= 1;
    }
    if s == 0 {
        return Err(Error::InsufficientData("no subsample size achieves every requested fraction".into()));
    }
    Ok(s)
}

/// Deterministic `(train, validation)` split: seeded shuffle, first `train_fraction` for training.
pub fn train_validation_split(data: &PreferenceDataset, train_fraction: f64, seed: u64) -> Result<(PreferenceDataset, PreferenceDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return param(format!("train fraction {train_fraction} outside (0, 1)"));
    }
    let n = data.len();
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InsufficientData(format!("{n} pairs cannot be split at {train_fraction}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((data.subset(&order[..n_train])?, data.subset(&order[n_train..])?))
}

fn center_rows(t: &mut Table) {
    for x in 0..t.rows().len() {
        let row = t.row_mut(x);
        let m = row.iter().sum::<f64>() / row.len() as f64;
        row.iter_mut().for_each(|v| *v -= m);
    }
}

fn check_training(l2_reg: f64, lr: f64, steps: usize) -> Result<()> {
    if !(l2_reg.is_finite() && l2_reg >= 0.0) {
        return param(format!("l2 regularization must be nonnegative, got {l2_reg}"));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return param(format!("learning rate must be positive, got {lr}"));
    }
    if steps == 0 {
        return param("steps must be at least 1");
    }
    Ok(())
}

/// Weighted mean of `−log σ(r(y_w) − r(y_l))` plus `l2_reg·‖r‖²`.
pub fn reward_nll(r: &RewardTable, data: &PreferenceDataset, l2_reg: f64) -> Result<f64> {
    data.validate(&r.shape())?;
    let v = r.values();
    let mut s = 0.0;
    for (p, &w) in data.pairs().iter().zip(data.weights()) {
        s += w * neg_log_sigmoid(v.get(p.x, p.y_w) - v.get(p.x, p.y_l));
    }
    Ok(s + l2_reg * v.norm().powi(2))
}

/// Tabular reward by gradient descent on [`reward_nll`] from zero, re-centered to zero mean per context after every step.
pub fn train_reward_mle(data: &PreferenceDataset, space: &OutcomeSpace, l2_reg: f64, lr: f64, steps: usize) -> Result<RewardTable> {
    check_training(l2_reg, lr, steps)?;
    let shape = space.shape();
    data.validate(&shape)?;
    let data = data.aggregated();
    let mut r = Table::zeros(&shape);
    for _ in 0..steps {
        let mut g = r.clone();
        g.scale(2.0 * l2_reg);
        for (p, &w) in data.pairs().iter().zip(data.weights()) {
            let s = -w * sigmoid(-(r.get(p.x, p.y_w) - r.get(p.x, p.y_l)));
            g.add(p.x, p.y_w, s);
            g.add(p.x, p.y_l, -s);
        }
        r.axpy(-lr, &g);
        center_rows(&mut r);
    }
    RewardTable::new(r)
}

/// Reward linear in per-outcome features, `r(x, y) = φ(x, y)·θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearReward {
    pub theta: Vec<f64>,
    pub reward: RewardTable,
}

/// Gradient descent from `θ = 0` on the mean pairwise log-loss plus `l2_reg·‖θ‖²`.
/// The returned table is centered per context.
pub fn train_reward_linear(
    data: &PreferenceDataset,
    features: &[Vec<Vec<f64>>],
    l2_reg: f64,
    lr: f64,
    steps: usize,
) -> Result<LinearReward> {
    check_training(l2_reg, lr, steps)?;
    let shape: Vec<usize> = features.iter().map(Vec::len).collect();
    data.validate(&shape)?;
    let d = features.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if d == 0 || features.iter().flatten().any(|f| f.len() != d) {
        return Err(Error::Shape("features must share one nonzero dimension".into()));
    }
    let data = data.aggregated();
    let diffs: Vec<Vec<f64>> = data
        .pairs()
        .iter()
        .map(|p| features[p.x][p.y_w].iter().zip(&features[p.x][p.y_l]).map(|(a, b)| a - b).collect())
        .collect();
    let mut theta = vec![0.0; d];
    let mut g = vec![0.0; d];
    for _ in 0..steps {
        g.iter_mut().zip(&theta).for_each(|(gi, t)| *gi = 2.0 * l2_reg * t);
        for (df, &w) in diffs.iter().zip(data.weights()) {
            let z: f64 = df.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let s = -w * sigmoid(-z);
            g.iter_mut().zip(df).for_each(|(gi, a)| *gi += s * a);
        }
        theta.iter_mut().zip(&g).for_each(|(t, gi)| *t -= lr * gi);
    }
    let mut table =
        Table::from_rows(features.iter().map(|row| row.iter().map(|f| f.iter().zip(&theta).map(|(a, b)| a * b).sum()).collect()).collect());
    center_rows(&mut table);
    Ok(LinearReward { theta, reward: RewardTable::new(table)? })
}

/// Generator settings for a random length-biased scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub n_contexts: usize,
    pub n_outcomes: usize,
    /// Weights of the Gaussian quality features in the base reward.
    pub feature_weights: Vec<f64>,
    pub min_length: u32,
    pub max_length: u32,
    /// Expected longer-wins fraction the oracle is calibrated to.
    pub target_longer_fraction: f64,
    pub longer_margin: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n_contexts: 24,
            n_outcomes: 8,
            feature_weights: vec![1.0, 0.7, 0.4],
            min_length: 20,
            max_length: 120,
            target_longer_fraction: 0.61,
            longer_margin: DEFAULT_LONGER_MARGIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub space: OutcomeSpace,
    /// Quality features followed by normalized length.
    pub features: Vec<Vec<Vec<f64>>>,
    pub oracle: OracleSpec,
    pub oracle_reward: RewardTable,
    /// Comparisons with a clearly longer side.
    pub candidate_pairs: Vec<Triple>,
}

impl Scenario {
    /// Every candidate pair repeated `repeats` times and labeled by Bradley-Terry sampling.
    pub fn labeled_pool(&self, repeats: usize, seed: u64) -> Result<PreferenceDataset> {
        let raw: Vec<Triple> = self.candidate_pairs.iter().flat_map(|t| std::iter::repeat_n(*t, repeats)).collect();
        relabel_bt(&self.oracle_reward, &raw, seed, LabelMode::Sample)
    }
}

/// Gaussian quality features, uniform integer lengths, and a length weight calibrated by bisection.
pub fn generate_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Scenario> {
    if spec.n_contexts == 0 || spec.n_outcomes < 2 || spec.feature_weights.is_empty() {
        return param("scenario needs contexts, at least two outcomes, and at least one feature");
    }
    if spec.min_length == 0 || spec.min_length > spec.max_length {
        return param("length range must satisfy 0 < min ≤ max");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.feature_weights.len();
    let mut phi = vec![vec![vec![0.0; d]; spec.n_outcomes]; spec.n_contexts];
    for f in phi.iter_mut().flatten().flatten() {
        *f = StandardNormal.sample(&mut rng);
    }
    let lens: Vec<Vec<u32>> = (0..spec.n_contexts)
        .map(|_| (0..spec.n_outcomes).map(|_| rng.random_range(spec.min_length..=spec.max_length)).collect())
        .collect();
    let space = OutcomeSpace::uniform(spec.n_contexts, spec.n_outcomes)?.with_lengths(lens)?;
    let base = RewardTable::from_rows(
        phi.iter().map(|row| row.iter().map(|f| f.iter().zip(&spec.feature_weights).map(|(a, b)| a * b).sum()).collect()).collect(),
    )?;
    let candidate_pairs = length_contrast_pairs(&space, spec.longer_margin)?;
    let w = calibrate_length_weight(&space, &base, &candidate_pairs, spec.target_longer_fraction, spec.longer_margin)?;
    let oracle = OracleSpec { space: space.clone(), base_reward: base, length_weight: w, seed };
    let oracle_reward = make_oracle_reward(&oracle)?;
    let nl = normalized_length(&space)?;
    let features = phi
        .into_iter()
        .enumerate()
        .map(|(x, row)| {
            row.into_iter()
                .enumerate()
                .map(|(y, mut f)| {
                    f.push(nl.get(x, y));
                    f
                })
                .collect()
        })
        .collect();
    Ok(Scenario { space, features, oracle, oracle_reward, candidate_pairs })
}

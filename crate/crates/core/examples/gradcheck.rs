//! Central-difference check of the p-DPO gradient on a small instance.

use prefopt::losses::{finite_diff_grad, pdpo_loss, relative_error, KlMode, PreferenceDataset, PreferencePair};
use prefopt::model::{PromptDistribution, ReferencePolicy, Table, TabularPolicy};

fn main() -> prefopt::Result<()> {
    let policy = TabularPolicy::new(Table::from_rows(vec![vec![0.3, -1.2, 0.8], vec![0.0, 2.0]]))?;
    let reference = ReferencePolicy::new(vec![vec![0.5, 0.3, 0.2], vec![0.6, 0.4]])?;
    let data = PreferenceDataset::new(vec![PreferencePair::new(0, 0, 1), PreferencePair::new(0, 2, 1), PreferencePair::new(1, 1, 0)])?;
    let mu = PromptDistribution::new(vec![0.7, 0.3])?;
    for mode in [KlMode::Exact, KlMode::Empirical] {
        let f = |p: &TabularPolicy| pdpo_loss(p, &reference, &data, &mu, 1.5, 0.2, mode);
        let analytic = f(&policy)?.grad;
        for eps in [1e-3, 1e-5, 1e-7] {
            let fd = finite_diff_grad(|p| Ok(f(p)?.value), &policy, eps)?;
            println!("{mode:?} eps={eps:e} relative error {:.3e}", relative_error(&analytic, &fd));
        }
    }
    Ok(())
}

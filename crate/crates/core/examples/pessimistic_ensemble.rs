//! Pessimistic distillation against a reward ensemble: the forward-KL-closest
//! member of the induced policy set, and which member the min selects during descent.

use prefopt::losses::{LossSpec, Objective, TripleDataset};
use prefopt::model::{
    kl_divergence, pessimistic_objective, rlhf_optimal_policy, KlDirection, PromptDistribution, ReferencePolicy, RewardEnsemble,
    RewardTable, TabularPolicy,
};
use prefopt::optim::{gradient_descent, member_selection_histogram, AnnealSchedule, DescentOptions};
use prefopt::oracles::pessimistic_set_solution;

fn main() -> prefopt::Result<()> {
    let reference = ReferencePolicy::new(vec![vec![0.4, 0.3, 0.2, 0.1]])?;
    let mu = PromptDistribution::uniform(1);
    let beta = 0.5;
    let ensemble = RewardEnsemble::new(vec![
        RewardTable::from_rows(vec![vec![1.0, 0.0, -0.5, 0.2]])?,
        RewardTable::from_rows(vec![vec![0.3, 0.1, 0.0, -0.1]])?,
        RewardTable::from_rows(vec![vec![-0.2, 0.8, 0.4, 0.0]])?,
    ])?;

    println!("member  forward KL  pessimistic objective");
    for (i, r) in ensemble.members().iter().enumerate() {
        let pi = rlhf_optimal_policy(&reference, r, beta)?;
        let kl = kl_divergence(&pi, &reference, &mu, KlDirection::Forward)?;
        let v = pessimistic_objective(&pi, &ensemble, &reference, &mu, beta)?;
        println!("{i}       {kl:.6}    {v:.6}");
    }
    let (_, chosen) = pessimistic_set_solution(&ensemble, &reference, &mu, beta)?;
    println!("forward-KL-closest member: {chosen}");

    let triples = TripleDataset::full_support(&[4], &mu)?;
    let objective = Objective::PessimisticDistill { ensemble: ensemble.clone(), triples, mu, beta, gamma: 1e-4 };
    let opts = DescentOptions::new(1.0, 2000).schedule(AnnealSchedule::linear(1e-4, 1e-2)?);
    let (_, traj) = gradient_descent(&LossSpec::new(reference, objective), &TabularPolicy::from_shape(&[4]), &opts)?;
    println!("selection counts over descent: {:?}", member_selection_histogram(&traj, ensemble.len())?);
    Ok(())
}

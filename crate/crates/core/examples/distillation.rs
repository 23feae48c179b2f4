//! Distilling an explicit reward into a tabular policy recovers the
//! KL-regularized optimum.

use prefopt::losses::{LossSpec, Objective, TripleDataset};
use prefopt::model::{rlhf_optimal_policy, Conditional, PromptDistribution, ReferencePolicy, RewardTable, TabularPolicy};
use prefopt::optim::{minimize_logits, LogitOptions};

fn main() -> prefopt::Result<()> {
    let reference = ReferencePolicy::new(vec![vec![0.4, 0.3, 0.2, 0.1], vec![0.25, 0.25, 0.5]])?;
    let target = RewardTable::from_rows(vec![vec![1.0, 0.2, -0.5, 0.0], vec![-1.0, 0.5, 0.3]])?;
    let beta = 0.5;
    let triples = TripleDataset::full_support(&reference.shape(), &PromptDistribution::uniform(2))?;
    let spec = LossSpec::new(reference.clone(), Objective::Distill { target: target.clone(), triples, beta });
    let opts = LogitOptions { grad_tol: 1e-12, ..LogitOptions::new(0.5, 10_000) };
    let run = minimize_logits(&spec, &TabularPolicy::from_shape(&reference.shape()), &opts)?;
    let star = rlhf_optimal_policy(&reference, &target, beta)?;
    println!("iterations {}, final loss {:.3e}", run.iterations, run.loss);
    for x in 0..2 {
        println!("context {x}");
        println!("  distilled {:?}", run.policy.probs(x));
        println!("  optimum   {:?}", star.probs(x));
    }
    Ok(())
}

//! DPO on three disjoint pairs with one outcome never seen in the data.
//!
//! The loss keeps falling while the preferred outcomes lose mass to the unseen one.

use prefopt::losses::{LossSpec, Objective, PreferenceDataset, PreferencePair};
use prefopt::model::{Conditional, ReferencePolicy, TabularPolicy};
use prefopt::optim::{gradient_descent, DescentOptions};
use prefopt::oracles::dpo_degeneracy_certificate;

fn main() -> prefopt::Result<()> {
    let pairs: Vec<PreferencePair> = (0..3).map(|i| PreferencePair::new(0, 2 * i, 2 * i + 1)).collect();
    let data = PreferenceDataset::new(pairs.clone())?;
    let spec = LossSpec::new(ReferencePolicy::uniform_shape(&[7]), Objective::Dpo { data: data.clone(), beta: 1.0 });
    let opts = DescentOptions::new(1.0, 100_000).record_pairs(pairs).track_mass(vec![(0, 6)]).record_every(10_000);
    let (policy, traj) = gradient_descent(&spec, &TabularPolicy::from_shape(&[7]), &opts)?;

    println!("step     loss        min margin  mean log pi_w  mass on unseen");
    for r in &traj.records {
        let m = r.margins.iter().copied().fold(f64::INFINITY, f64::min);
        println!("{:<8} {:<11.3e} {:<11.4} {:<14.4} {:.6}", r.step, r.loss, m, r.mean_log_pi_w, r.tracked_mass);
    }
    let cert = dpo_degeneracy_certificate(&policy, &data, 1e-3)?;
    println!("final probs {:?}", policy.probs(0));
    println!("certificate passed: {} (loser mass {:.2e})", cert.passed, cert.mass_on_losers);
    Ok(())
}

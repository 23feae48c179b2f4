//! A reduced length-bias sweep: every method at two bias levels, model-selected
//! on the validation split, scored by oracle advantage over the reference.

use prefopt::harness::bias_sweep;
use prefopt::harness::config::BiasSweepConfig;

fn main() -> prefopt::Result<()> {
    let cfg = BiasSweepConfig { rhos: vec![0.2, 0.8], check_rhos: vec![0.2], ..BiasSweepConfig::default() };
    let result = bias_sweep(&cfg, 0, 1)?;
    println!("rho  method  hyperparameter  advantage");
    for s in &result.selected {
        match &s.run {
            Some(r) => println!("{:.1}  {:<7} {}={:<10} {:.4}", s.rho, s.method.name(), r.hyperparameter, r.value, r.advantage),
            None => println!("{:.1}  {:<7} diverged", s.rho, s.method.name()),
        }
    }
    for c in &result.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(())
}

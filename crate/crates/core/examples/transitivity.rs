//! IPO and p-DPO on a three-arm preference chain and its transitive closure.

use prefopt::harness::config::TransitivityConfig;
use prefopt::harness::transitivity;

fn main() -> prefopt::Result<()> {
    let cfg = TransitivityConfig { betas: vec![1.0, 10.0], alphas: vec![5.0, 100.0], ..TransitivityConfig::default() };
    let result = transitivity(&cfg, 1)?;
    println!("method  kind     beta   alpha  tau_inv  spread   probs");
    for r in &result.rows {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        let probs: Vec<String> = r.probs.iter().map(|p| format!("{p:.4}")).collect();
        println!(
            "{:<7} {:<8} {:<6} {:<6} {:<8} {:<8.4} [{}]",
            r.method.name(),
            r.kind.name(),
            f(r.beta),
            f(r.alpha),
            f(r.tau_inv),
            r.spread(),
            probs.join(", ")
        );
    }
    for c in &result.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(())
}

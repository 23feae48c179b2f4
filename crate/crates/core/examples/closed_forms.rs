//! Pairwise optima of p-DPO and distilled DPO, and the IPO solution on a chain
//! versus its transitive closure.

use prefopt::model::ReferencePolicy;
use prefopt::oracles::{ddpo_closed_form, ipo_chain_solution, ipo_quadratic_solve, pdpo_closed_form, ChainKind, ChainPreferences};

fn main() -> prefopt::Result<()> {
    let (ref_w, ref_l) = (0.5, 0.5);
    println!("pi_w   p-dpo(alpha=5,beta=1)  d-dpo(r_l-r_w=-1,beta=0.5)");
    for pi_w in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let p = pdpo_closed_form(pi_w, ref_w, ref_l, 5.0, 1.0)?;
        let d = ddpo_closed_form(pi_w, ref_w, ref_l, -1.0, 0.5)?;
        println!("{pi_w:.1}    {p:.6}               {d:.6}");
    }

    println!();
    println!("n  kind     psi_inf  (normal equations)");
    for n in [3, 5, 8] {
        for kind in [ChainKind::Chain, ChainKind::Closure] {
            let analytic = ipo_chain_solution(n, 1.0, kind)?;
            let data = ChainPreferences::new(n, kind)?.dataset();
            let solved = ipo_quadratic_solve(&data, &ReferencePolicy::uniform_shape(&[n]), 1.0)?;
            println!("{n}  {:<8} {:.6} ({:.6})", kind.name(), analytic.psi_inf, solved.psi_inf);
        }
    }
    Ok(())
}

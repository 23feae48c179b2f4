//! Bag-of-words DPO: the preferred sequence's likelihood bound shrinks every
//! step while the repeated argmax-token sequence takes over.

use prefopt::bow::{bow_descent_study, CountVector};

fn main() -> prefopt::Result<()> {
    let y_w = CountVector::from_tokens(&[0, 1, 1, 2], 3)?;
    let y_l = CountVector::from_tokens(&[0, 2, 2, 2], 3)?;
    let study = bow_descent_study(&y_w, &y_l, 1.0, 0.1, 2000)?;
    println!("delta {:?}, hat token {}, k {}", study.delta, study.hat_token, study.k);
    println!("step   pi(y_w)      bound        pi(y_hat)    tau");
    for r in study.records.iter().step_by(250) {
        println!("{:<6} {:<12.4e} {:<12.4e} {:<12.4e} {:.4}", r.step, r.pi_w(), r.upper_w(), r.pi_hat(), r.tau);
    }
    Ok(())
}

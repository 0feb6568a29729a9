//! Run the full oracle verification suite and print each check.

use std::time::Instant;

use cvaeseg::verify::{self, VerifyOptions};

fn main() -> cvaeseg::Result<()> {
    let opts = VerifyOptions::default();
    let t = Instant::now();
    let grads = verify::gradient_checks(&opts.grad_seeds)?;
    println!("gradients: {:.1}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let kl = verify::kl_checks(opts.kl, opts.kl_pairs, opts.kl_draws, opts.seed)?;
    println!("kl: {:.1}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let bound = verify::bound_checks(opts.bound_models, opts.seed)?;
    println!("bound: {:.1}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let sgvb = verify::sgvb_checks(opts.sgvb_draws, opts.seed)?;
    println!("sgvb: {:.1}s", t.elapsed().as_secs_f64());
    for c in grads.iter().chain(&kl).chain(&bound).chain(&sgvb) {
        let mark = if c.passed { "ok  " } else { "FAIL" };
        println!("{mark} {:<28} {:>12.3e} <= {:<8.1e} {}", c.name, c.measured, c.tolerance, c.detail);
    }
    Ok(())
}

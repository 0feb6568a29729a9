//! Backward pass against central differences for every primitive and loss.

use cvaeseg::verify::{gradient_checks, FD_STEP};

fn main() -> cvaeseg::Result<()> {
    let seeds: Vec<u64> = (0..5).collect();
    println!("h = {FD_STEP:e}, {} seeds", seeds.len());
    for c in gradient_checks(&seeds)? {
        println!("{:<28} {:.3e}  {}", c.name, c.measured, if c.passed { "ok" } else { "FAIL" });
    }
    Ok(())
}

//! Reparameterised gradient means against the quadrature gradient.

use cvaeseg::oracle::sgvb_gradient_check;
use cvaeseg::verify::smooth_tiny_instance;

fn main() -> cvaeseg::Result<()> {
    let (model, batch) = smooth_tiny_instance(2, 0)?;
    let report = sgvb_gradient_check(&model, &batch, 100_000, 0)?;
    for c in &report.coordinates {
        println!(
            "{:<22} [{}] estimate {:>12.4e} +- {:.1e}  reference {:>12.4e}",
            c.param, c.index, c.estimate, c.std_error, c.reference
        );
    }
    println!("max z = {:.2} over {} draws", report.max_z_score(), report.n_samples);
    Ok(())
}

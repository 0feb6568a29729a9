//! Quadrature bound against the quadrature log-marginal on tiny models.

use cvaeseg::verify::bound_instances;

fn main() -> cvaeseg::Result<()> {
    println!("{:>3} {:>14} {:>14} {:>10} {:>10}", "d", "elbo", "log p(s|x)", "gap", "refine");
    for b in bound_instances(10, 0)? {
        println!(
            "{:>3} {:>14.8} {:>14.8} {:>10.2e} {:>10.1e}",
            b.latent_dim,
            b.elbo,
            b.log_marginal_refined,
            b.log_marginal_refined - b.elbo,
            (b.log_marginal - b.log_marginal_refined).abs()
        );
    }
    Ok(())
}

//! Closed-form diagonal Gaussian KL next to a Monte-Carlo estimate.

use cvaeseg::oracle::mc_kl;
use cvaeseg::verify::library_kl;
use cvaeseg::GaussianParams;

fn main() -> cvaeseg::Result<()> {
    let cases = [
        (GaussianParams::new(vec![1.0], vec![0.0])?, GaussianParams::standard(1)),
        (
            GaussianParams::new(vec![0.3, -0.8, 1.2], vec![-0.5, 0.4, 0.0])?,
            GaussianParams::new(vec![0.0, 0.5, 1.0], vec![0.2, -0.3, 0.6])?,
        ),
    ];
    for (q, p) in &cases {
        let closed = library_kl(q, p)?;
        let (est, se) = mc_kl(q, p, 1_000_000, 7)?;
        println!(
            "d = {}  closed {closed:.6}  monte carlo {est:.6} +- {se:.1e}  z = {:.2}",
            q.dim(),
            (closed - est) / se
        );
    }
    Ok(())
}

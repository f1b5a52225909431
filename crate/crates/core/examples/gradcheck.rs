//! Finite-difference check of every autodiff primitive and of a random
//! radiance MLP in double precision.

use panofield::net::gradcheck::{check_mlp, check_primitives};
use panofield::net::MlpConfig;

fn main() -> panofield::Result<()> {
    for r in check_primitives(0)? {
        println!("{:12} {:4} probes  max rel error {:.2e}", r.name, r.checked, r.max_rel_error);
    }
    let mlp = check_mlp(MlpConfig::nerf(63, 27), 4, 64, 0)?;
    println!("{:12} {:4} probes  max rel error {:.2e}", "mlp 8x256", mlp.checked, mlp.max_rel_error);
    Ok(())
}

//! Residual versus projector heads: the residual head starts as the identity
//! (zero-initialized second layer), the projector does not.

use anyhow::Result;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resdistill::distillation::{fd_loss, projector_transform, residual_transform, ProjectorHead, ResidualHead};
use resdistill::encoders::EmbeddingVector;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let width = 16;
    let teacher = EmbeddingVector::new(Array1::from_shape_fn(width, |_| rng.gen_range(-1.0..1.0)))?;

    for alpha in [0.0, 0.1, 1.0] {
        let head = ResidualHead::new(width, alpha, 1)?;
        let out = residual_transform(&head, &teacher)?;
        println!("residual alpha={alpha:<4} fd to teacher = {:.3e}", fd_loss(&teacher, &out)?);
    }
    let projector = ProjectorHead::new(width, 1)?;
    let out = projector_transform(&projector, &teacher)?;
    println!("projector           fd to teacher = {:.3e}", fd_loss(&teacher, &out)?);
    Ok(())
}

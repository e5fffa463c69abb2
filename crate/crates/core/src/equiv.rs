//! Dense-equivalence check: the sparse block sampling every pixel once with
//! zero offsets must reproduce the dense block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nonlocal::{nl_forward_with, AttentionOpts, NlParams};
use crate::sparse::{snl_forward_with, SamplingGrid, SnlParams};
use crate::tensor::{Precision, Scalar, Tensor};

/// Default pass bound on the output deviation.
pub fn default_tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::Single => 1e-5,
        Precision::Double => 1e-10,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivReport {
    pub seed: u64,
    /// Max abs difference between the two block outputs.
    pub max_output_deviation: f64,
    /// Max abs difference between the two affinity matrices.
    pub max_affinity_deviation: f64,
}

/// Run both blocks on a random `C x H x W` input with shared random
/// projections (standard deviation 0.5, non-zero output projection).
pub fn dense_equivalence<T: Scalar>(
    seed: u64,
    channels: usize,
    height: usize,
    width: usize,
    opts: &AttentionOpts,
) -> Result<EquivReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<T>::randn(&[channels, height, width], 1.0, &mut rng);
    let attn = NlParams::random(channels, 0.5, &mut rng)?;
    let n = height * width;
    let sparse = SnlParams {
        attn: attn.clone(),
        w_offset: Tensor::zeros(&[2 * n, channels]),
        b_offset: Tensor::zeros(&[2 * n]),
    };
    let (zd, dense) = nl_forward_with(&x, &attn, opts)?;
    let (zs, acts) = snl_forward_with(&x, &sparse, SamplingGrid::Full, opts)?;
    Ok(EquivReport {
        seed,
        max_output_deviation: zs.max_abs_diff(&zd)?.as_f64(),
        max_affinity_deviation: acts.affinity.max_abs_diff(&dense.affinity)?.as_f64(),
    })
}

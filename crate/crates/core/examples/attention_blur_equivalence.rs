//! Blurring the attention weights along the query axis is the same as blurring the
//! queries first; blurring the keys is not.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use shine_lab::numerics::{
    attn_blur_equivalence_residual, gaussian_kernel_1d, key_blur_residual, toeplitz_from_kernel, Padding,
};
use shine_lab::pipeline::equivalence_suite;

fn main() -> shine_lab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut normal = |r, c| Array2::from_shape_simple_fn((r, c), || rng.sample::<f64, _>(StandardNormal));
    let (q, k) = (normal(16, 8), normal(16, 8));
    let kernel = gaussian_kernel_1d(5, 1.0)?;

    let b = toeplitz_from_kernel(&kernel, 16, Padding::Replicate)?;
    println!("blur matrix row 0: {:.4}", b.matrix().row(0));
    for pad in [Padding::Replicate, Padding::Zero] {
        println!(
            "{pad:?}: |B(QK^T) - (BQ)K^T| = {:.2e}   |B(QK^T) - Q(BK)^T| = {:.2e}",
            attn_blur_equivalence_residual(q.view(), k.view(), &kernel, pad)?,
            key_blur_residual(q.view(), k.view(), &kernel, pad)?,
        );
    }

    let report = equivalence_suite(200, 0)?;
    println!(
        "suite of {}: max query residual {:.2e}, min key residual {:.2e}",
        report.cases.len(),
        report.max_query_residual(),
        report.min_key_residual()
    );
    Ok(())
}

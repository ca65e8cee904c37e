//! Pure math shared by the rest of the crate: Gaussian kernels, convolution and its
//! Toeplitz form, row softmax, and the binary-mask morphology used for attention masks.

mod kernel;
mod morphology;

pub use kernel::{
    attn_blur_equivalence_residual, convolve2d, gaussian_kernel_1d, gaussian_kernel_for_sigma,
    key_blur_residual, softmax_rows, toeplitz_from_kernel, Kernel1D, Kernel2D, Padding,
    ToeplitzBlur,
};
pub(crate) use kernel::softmax_in_place;
pub use morphology::{binarize, dilate, iou, max_connected_component, BinaryMask, Connectivity};

/// Environment variable that forces single-threaded numerics.
pub const DETERMINISTIC_ENV: &str = "SHINE_LAB_DETERMINISTIC";

/// Whether `SHINE_LAB_DETERMINISTIC=1` is set.
pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

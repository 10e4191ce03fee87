//! Hand-derived 3D CNN: layers with exact forward/backward passes, the
//! classifier model, Adam, and a binary checkpoint container.
//!
//! All arithmetic is generic over [`Scalar`]; training runs in `f32` and the
//! gradient checks run in `f64`.

mod adam;
mod checkpoint;
mod gemm;
pub mod gradcheck;
mod layers;
mod model;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use adam::AdamState;
pub use checkpoint::{
    arch_hash, load_checkpoint, read_checkpoint_file, save_checkpoint, write_checkpoint_file,
    AdamHeader, Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use layers::{
    bce_loss, dropout_backward, dropout_forward, gap_backward, gap_forward, maxpool3d_backward,
    maxpool3d_forward, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, BatchNorm3d,
    BnCache, Conv3d, Dense, Padding, Param, BCE_EPSILON,
};
pub use model::{Model, ModelConfig, ParamCount, DEFAULT_TOTAL_PARAMS, DEFAULT_TRAINABLE_PARAMS};
pub use tensor::Tensor;

/// Floating-point element type of tensors and parameters.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `C = alpha * A * B + beta * C` over strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe matrices inside live allocations,
    /// and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Forward-pass mode. Training uses batch statistics and a seeded dropout
/// mask; inference uses running statistics and no dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Infer,
}

impl Mode {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

//! Numeric substrate: tensors, seeded randomness, and deterministic kernels.

/// Defines a kernel whose body is also compiled with AVX2 enabled and picked
/// at runtime when available. The two builds execute the same arithmetic in
/// the same order (fused multiply-add is never enabled), so they agree
/// bit-for-bit.
macro_rules! wide_kernel {
    ($(#[$m:meta])* $vis:vis fn $name:ident($($arg:ident : $ty:ty),* $(,)?) $(-> $ret:ty)? $body:block) => {
        $(#[$m])*
        $vis fn $name($($arg: $ty),*) $(-> $ret)? {
            #[inline(always)]
            fn kernel($($arg: $ty),*) $(-> $ret)? $body
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) $(-> $ret)? {
                    kernel($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the required CPU feature was detected at runtime.
                    return unsafe { wide($($arg),*) };
                }
            }
            kernel($($arg),*)
        }
    };
}

#[macro_use]
mod simd;

pub mod attention;
pub mod grad;
pub mod ops;
mod rng;
mod tensor;

pub use rng::{splitmix64, Rng, DEFAULT_STREAM};
pub use tensor::Tensor;

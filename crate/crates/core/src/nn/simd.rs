//! Eight-lane f32 vectors for the hand-blocked kernels.
//!
//! [`Lanes`] has a portable array implementation and an AVX one. Each lane
//! performs the same single-precision multiply or add in both, so a kernel
//! written against the trait gives bit-identical results on either.

pub const WIDTH: usize = 8;

pub trait Lanes: Copy {
    fn zero() -> Self;
    fn splat(v: f32) -> Self;
    /// Loads the first eight values of `s`.
    fn load(s: &[f32]) -> Self;
    fn store(self, d: &mut [f32]);
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn div(self, o: Self) -> Self;
    /// Per lane `if x < lo { lo } else { x }`.
    fn floor_at(self, lo: Self) -> Self;
    /// Per lane `if x > hi { hi } else { x }`.
    fn cap_at(self, hi: Self) -> Self;
    /// Per lane `f32::from_bits(((z.to_bits() as i32 - bias) as u32) << 23)`.
    fn shifted_exponent(self, bias: i32) -> Self;
    fn to_array(self) -> [f32; WIDTH];

    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        self.add(a.mul(b))
    }

    /// Sum of the lanes in ascending lane order.
    #[inline(always)]
    fn fold(self) -> f32 {
        let mut s = 0.0f32;
        for v in self.to_array() {
            s += v;
        }
        s
    }
}

#[derive(Clone, Copy)]
pub struct Portable([f32; WIDTH]);

impl Lanes for Portable {
    #[inline(always)]
    fn zero() -> Self {
        Portable([0.0; WIDTH])
    }
    #[inline(always)]
    fn splat(v: f32) -> Self {
        Portable([v; WIDTH])
    }
    #[inline(always)]
    fn load(s: &[f32]) -> Self {
        Portable(s[..WIDTH].try_into().unwrap())
    }
    #[inline(always)]
    fn store(self, d: &mut [f32]) {
        d[..WIDTH].copy_from_slice(&self.0);
    }
    #[inline(always)]
    fn add(self, o: Self) -> Self {
        Portable(std::array::from_fn(|l| self.0[l] + o.0[l]))
    }
    #[inline(always)]
    fn sub(self, o: Self) -> Self {
        Portable(std::array::from_fn(|l| self.0[l] - o.0[l]))
    }
    #[inline(always)]
    fn mul(self, o: Self) -> Self {
        Portable(std::array::from_fn(|l| self.0[l] * o.0[l]))
    }
    #[inline(always)]
    fn div(self, o: Self) -> Self {
        Portable(std::array::from_fn(|l| self.0[l] / o.0[l]))
    }
    #[inline(always)]
    fn floor_at(self, lo: Self) -> Self {
        Portable(std::array::from_fn(|l| if self.0[l] < lo.0[l] { lo.0[l] } else { self.0[l] }))
    }
    #[inline(always)]
    fn cap_at(self, hi: Self) -> Self {
        Portable(std::array::from_fn(|l| if self.0[l] > hi.0[l] { hi.0[l] } else { self.0[l] }))
    }
    #[inline(always)]
    fn shifted_exponent(self, bias: i32) -> Self {
        Portable(self.0.map(|z| f32::from_bits(((z.to_bits() as i32).wrapping_sub(bias) as u32) << 23)))
    }
    #[inline(always)]
    fn to_array(self) -> [f32; WIDTH] {
        self.0
    }
}

#[cfg(target_arch = "x86_64")]
pub use avx::Avx;

#[cfg(target_arch = "x86_64")]
mod avx {
    use super::{Lanes, WIDTH};
    use std::arch::x86_64::*;

    /// Only constructed inside functions compiled with AVX enabled.
    #[derive(Clone, Copy)]
    pub struct Avx(__m256);

    impl Lanes for Avx {
        #[inline(always)]
        fn zero() -> Self {
            unsafe { Avx(_mm256_setzero_ps()) }
        }
        #[inline(always)]
        fn splat(v: f32) -> Self {
            unsafe { Avx(_mm256_set1_ps(v)) }
        }
        #[inline(always)]
        fn load(s: &[f32]) -> Self {
            assert!(s.len() >= WIDTH);
            // SAFETY: eight readable floats; unaligned load.
            unsafe { Avx(_mm256_loadu_ps(s.as_ptr())) }
        }
        #[inline(always)]
        fn store(self, d: &mut [f32]) {
            assert!(d.len() >= WIDTH);
            // SAFETY: eight writable floats; unaligned store.
            unsafe { _mm256_storeu_ps(d.as_mut_ptr(), self.0) }
        }
        #[inline(always)]
        fn add(self, o: Self) -> Self {
            unsafe { Avx(_mm256_add_ps(self.0, o.0)) }
        }
        #[inline(always)]
        fn sub(self, o: Self) -> Self {
            unsafe { Avx(_mm256_sub_ps(self.0, o.0)) }
        }
        #[inline(always)]
        fn mul(self, o: Self) -> Self {
            unsafe { Avx(_mm256_mul_ps(self.0, o.0)) }
        }
        #[inline(always)]
        fn div(self, o: Self) -> Self {
            unsafe { Avx(_mm256_div_ps(self.0, o.0)) }
        }
        #[inline(always)]
        fn floor_at(self, lo: Self) -> Self {
            // maxps returns its second operand when either is NaN
            unsafe { Avx(_mm256_max_ps(lo.0, self.0)) }
        }
        #[inline(always)]
        fn cap_at(self, hi: Self) -> Self {
            unsafe { Avx(_mm256_min_ps(hi.0, self.0)) }
        }
        #[inline(always)]
        fn shifted_exponent(self, bias: i32) -> Self {
            unsafe {
                let e = _mm256_sub_epi32(_mm256_castps_si256(self.0), _mm256_set1_epi32(bias));
                Avx(_mm256_castsi256_ps(_mm256_slli_epi32::<23>(e)))
            }
        }
        #[inline(always)]
        fn to_array(self) -> [f32; WIDTH] {
            let mut out = [0.0f32; WIDTH];
            self.store(&mut out);
            out
        }
    }
}

/// Defines `$name` as a runtime dispatch over `$generic::<L: Lanes>`: the
/// AVX instantiation when the CPU has AVX2, the portable one otherwise.
macro_rules! lanes_kernel {
    ($(#[$m:meta])* $vis:vis fn $name:ident = $generic:ident($($arg:ident : $ty:ty),* $(,)?) $(-> $ret:ty)?) => {
        $(#[$m])*
        $vis fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) $(-> $ret)? {
                    $generic::<$crate::nn::simd::Avx>($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the required CPU feature was detected at runtime.
                    return unsafe { wide($($arg),*) };
                }
            }
            $generic::<$crate::nn::simd::Portable>($($arg),*)
        }
    };
}

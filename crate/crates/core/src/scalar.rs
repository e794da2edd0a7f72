//! Storage scalar abstraction.
//!
//! The KV cache stores keys and values at a fixed element width (2 bytes for
//! half precision, 4 for single). All score and output arithmetic happens at
//! single precision or wider regardless of what the cache stores, so the
//! scalar type only needs cheap widening/narrowing against `f32`.

use std::fmt::Debug;

use half::f16;
use num_traits::Float;

/// Scalar type a [`crate::kv_store::PagedKvCache`] can store.
///
/// Implemented for `f16` (element width 2) and `f32` (element width 4), the
/// two storage widths the engine models.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    /// Bytes occupied by one stored element.
    const ELEMENT_WIDTH: usize;

    /// Widen to the compute precision.
    fn as_f32(self) -> f32;

    /// Narrow from the compute precision, rounding to the nearest
    /// representable value.
    fn from_f32(value: f32) -> Self;
}

impl Scalar for f16 {
    const ELEMENT_WIDTH: usize = 2;

    #[inline(always)]
    fn as_f32(self) -> f32 {
        self.to_f32()
    }

    #[inline(always)]
    fn from_f32(value: f32) -> Self {
        f16::from_f32(value)
    }
}

impl Scalar for f32 {
    const ELEMENT_WIDTH: usize = 4;

    #[inline(always)]
    fn as_f32(self) -> f32 {
        self
    }

    #[inline(always)]
    fn from_f32(value: f32) -> Self {
        value
    }
}

/// Widen a row of stored scalars into an `f32` buffer.
pub fn widen<T: Scalar>(src: &[T], dst: &mut Vec<f32>) {
    dst.clear();
    dst.extend(src.iter().map(|x| x.as_f32()));
}

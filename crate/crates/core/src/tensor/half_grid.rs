//! binary16 emulation: values stay in `f32` storage but are snapped to the
//! nearest representable half-precision number.

use half::f16;

/// Largest finite binary16 value.
pub const HALF_MAX: f32 = 65504.0;

/// Nearest binary16 value (round to nearest, ties to even), saturating at
/// `±HALF_MAX` instead of overflowing to infinity.
#[inline]
pub fn round_to_half(x: f32) -> f32 {
    let h = f16::from_f32(x).to_f32();
    if h.is_infinite() {
        HALF_MAX.copysign(x)
    } else {
        h
    }
}

pub fn round_slice_to_half(xs: &mut [f32]) {
    for x in xs {
        *x = round_to_half(*x);
    }
}

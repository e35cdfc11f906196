//! Branch-free `exp` and `ln` kernels that vectorise inside slice loops.
//!
//! Both use only correctly rounded IEEE operations (including fused
//! multiply-add) and integer bit operations, so results are identical
//! whichever instruction set the surrounding loop is compiled for.

const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
const LOG2_E: f64 = std::f64::consts::LOG2_E;
/// `1.5 · 2^52`: adding it rounds to an integer held in the low mantissa bits.
const ROUND_SHIFT: f64 = 6_755_399_441_055_744.0;
const TWO_52: f64 = 4_503_599_627_370_496.0;
const SQRT_HALF_BITS: u64 = 0x3fe6_a09e_667f_3bcd;

/// `e^x`, relative error below `1e-14` on `[-700, 700]`. Arguments are
/// clamped to that range, so very negative inputs give about `1e-304`.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    let x = x.clamp(-700.0, 700.0);
    let t = x.mul_add(LOG2_E, ROUND_SHIFT);
    let k = t - ROUND_SHIFT;
    let r = (-k).mul_add(LN2_LO, (-k).mul_add(LN2_HI, x));
    let mut p: f64 = 1.0 / 39_916_800.0;
    for c in [
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        1.0 / 2.0,
        1.0,
        1.0,
    ] {
        p = p.mul_add(r, c);
    }
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    p * scale
}

/// Natural logarithm for positive normal inputs; zero maps to `-inf`.
#[inline(always)]
pub fn ln(y: f64) -> f64 {
    let u = y.to_bits().wrapping_add(0x3ff0_0000_0000_0000 - SQRT_HALF_BITS);
    let k = f64::from_bits(0x4330_0000_0000_0000 | (u >> 52)) - (TWO_52 + 1023.0);
    let m = f64::from_bits((u & 0x000f_ffff_ffff_ffff) + SQRT_HALF_BITS);
    let f = m - 1.0;
    let s = f / (2.0 + f);
    let z = s * s;
    let mut series: f64 = 1.0 / 17.0;
    for c in [1.0 / 15.0, 1.0 / 13.0, 1.0 / 11.0, 1.0 / 9.0, 1.0 / 7.0, 1.0 / 5.0, 1.0 / 3.0] {
        series = series.mul_add(z, c);
    }
    let two_s = 2.0 * s;
    let r = k.mul_add(LN2_HI, (two_s * z).mul_add(series, k.mul_add(LN2_LO, two_s)));
    if y > 0.0 {
        r
    } else {
        f64::NEG_INFINITY
    }
}

/// `ln(1 + x)` for `x ≥ 0` with the rounding of `1 + x` compensated.
#[inline(always)]
pub fn ln_1p(x: f64) -> f64 {
    let w = 1.0 + x;
    let correction = (x - (w - 1.0)) / w;
    ln(w) + correction
}

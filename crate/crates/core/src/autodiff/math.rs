//! Branch-free elementwise kernels. The libm routines are opaque calls that
//! block vectorization; these inline into array loops.

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// Adding then subtracting `1.5·2^52` rounds to the nearest integer and
/// leaves that integer in the low mantissa bits.
const ROUNDER: f64 = 6_755_399_441_055_744.0;

/// `(2^k, e^r − 1)` with `x = k·ln2 + r`, `|r| ≤ ln2/2`. `x` must lie in
/// `[-700, 700]`.
#[inline(always)]
fn reduce(x: f64) -> (f64, f64) {
    let t = x * LOG2_E + ROUNDER;
    let k = t - ROUNDER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series of e^r − 1 through r^13; truncation < 1e-17 on |r| ≤ 0.35
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    (scale, p * r)
}

/// `e^x − 1`, accurate near zero. Saturates at `|x| = 700`.
#[inline(always)]
pub fn exp_m1(x: f64) -> f64 {
    let (s, m) = reduce(x.clamp(-700.0, 700.0));
    s * m + (s - 1.0)
}

#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let e = exp_m1(2.0 * x.clamp(-20.0, 20.0));
    e / (e + 2.0)
}

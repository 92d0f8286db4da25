//! The quintic smoothstep and radial cutoffs built from it.

/// Maximum slope of [`smoothstep`].
pub const SMOOTHSTEP_MAX_SLOPE: f64 = 1.875;

/// `6s^5 - 15s^4 + 10s^3`, clamped to `[0, 1]` outside the unit interval.
pub fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (s * (6.0 * s - 15.0) + 10.0)
}

pub fn smoothstep_deriv(s: f64) -> f64 {
    if !(0.0..=1.0).contains(&s) {
        return 0.0;
    }
    30.0 * s * s * (s - 1.0) * (s - 1.0)
}

/// `1` on `[0, inner]`, `0` beyond `2 inner`, smooth in between.
pub fn radial_cutoff(r: f64, inner: f64) -> f64 {
    1.0 - smoothstep((r - inner) / inner)
}

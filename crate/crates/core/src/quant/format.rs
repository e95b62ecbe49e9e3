//! Minifloat element and scale formats with explicit decode tables.
//!
//! A code is `sign << (bits - 1) | magnitude_index`, where magnitude indices
//! enumerate the non-negative finite values in increasing order, so an even
//! index has an even mantissa.

use rand::Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
pub enum FloatFormat {
    E4M3,
    E5M2,
    E2M1,
    /// Unsigned power-of-two scale, 2^(code - 127).
    E8M0,
}

impl FloatFormat {
    pub fn exp_bits(self) -> u32 {
        match self {
            FloatFormat::E4M3 => 4,
            FloatFormat::E5M2 => 5,
            FloatFormat::E2M1 => 2,
            FloatFormat::E8M0 => 8,
        }
    }

    pub fn man_bits(self) -> u32 {
        match self {
            FloatFormat::E4M3 => 3,
            FloatFormat::E5M2 => 2,
            FloatFormat::E2M1 => 1,
            FloatFormat::E8M0 => 0,
        }
    }

    pub fn bias(self) -> i32 {
        match self {
            FloatFormat::E4M3 => 7,
            FloatFormat::E5M2 => 15,
            FloatFormat::E2M1 => 1,
            FloatFormat::E8M0 => 127,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            FloatFormat::E8M0 => 8,
            f => 1 + f.exp_bits() + f.man_bits(),
        }
    }

    /// Number of non-negative finite magnitudes.
    fn magnitudes(self) -> u32 {
        match self {
            // 0x7F is NaN.
            FloatFormat::E4M3 => 127,
            // Top exponent holds inf/NaN.
            FloatFormat::E5M2 => 124,
            FloatFormat::E2M1 => 8,
            // 0xFF is NaN.
            FloatFormat::E8M0 => 255,
        }
    }

    pub fn max_finite(self) -> f64 {
        self.decode_magnitude(self.magnitudes() - 1)
    }

    /// Smallest positive value.
    pub fn min_positive(self) -> f64 {
        match self {
            FloatFormat::E8M0 => self.decode_magnitude(0),
            f => f.decode_magnitude(1),
        }
    }

    pub fn decode_magnitude(self, m: u32) -> f64 {
        if self == FloatFormat::E8M0 {
            return 2f64.powi(m as i32 - 127);
        }
        let mb = self.man_bits();
        let e = (m >> mb) as i32;
        let f = (m & ((1 << mb) - 1)) as f64 / (1u32 << mb) as f64;
        if e == 0 {
            f * 2f64.powi(1 - self.bias())
        } else {
            (1.0 + f) * 2f64.powi(e - self.bias())
        }
    }

    pub fn table(self) -> Vec<f64> {
        (0..self.magnitudes())
            .map(|m| self.decode_magnitude(m))
            .collect()
    }

    fn sign_bit(self) -> u8 {
        1 << (self.bits() - 1)
    }

    pub fn decode(self, code: u8) -> f64 {
        if self == FloatFormat::E8M0 {
            return self.decode_magnitude(code as u32);
        }
        let s = self.sign_bit();
        let v = self.decode_magnitude((code & (s - 1)) as u32);
        if code & s != 0 {
            -v
        } else {
            v
        }
    }

    fn with_sign(self, neg: bool, m: u32) -> u8 {
        if neg && m != 0 {
            self.sign_bit() | m as u8
        } else {
            m as u8
        }
    }

    /// Magnitude indices bracketing `a` (a ≥ 0, a < max).
    fn bracket(self, a: f64) -> (u32, u32) {
        let n = self.magnitudes();
        let (mut lo, mut hi) = (0u32, n - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.decode_magnitude(mid) <= a {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo, hi)
    }

    /// Round to nearest, ties to even, saturating at the largest finite value.
    pub fn encode(self, x: f64) -> u8 {
        debug_assert!(!x.is_nan());
        let neg = x < 0.0;
        let a = x.abs();
        let n = self.magnitudes();
        if a >= self.max_finite() {
            return self.with_sign(neg, n - 1);
        }
        if self == FloatFormat::E8M0 && a <= self.min_positive() {
            return 0;
        }
        let (lo, hi) = self.bracket(a);
        let dl = a - self.decode_magnitude(lo);
        let dh = self.decode_magnitude(hi) - a;
        let m = if dl < dh || (dl == dh && lo % 2 == 0) {
            lo
        } else {
            hi
        };
        self.with_sign(neg, m)
    }

    /// Round up or down with probability proportional to proximity.
    pub fn encode_stochastic(self, x: f64, rng: &mut impl Rng) -> u8 {
        let neg = x < 0.0;
        let a = x.abs();
        let n = self.magnitudes();
        if a >= self.max_finite() {
            return self.with_sign(neg, n - 1);
        }
        let (lo, hi) = self.bracket(a);
        let vl = self.decode_magnitude(lo);
        let vh = self.decode_magnitude(hi);
        if a == vl {
            return self.with_sign(neg, lo);
        }
        let p_up = (a - vl) / (vh - vl);
        let m = if rng.gen::<f64>() < p_up { hi } else { lo };
        self.with_sign(neg, m)
    }

    pub fn quantize(self, x: f64) -> f64 {
        self.decode(self.encode(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_values() {
        assert_eq!(FloatFormat::E4M3.max_finite(), 448.0);
        assert_eq!(FloatFormat::E5M2.max_finite(), 57344.0);
        assert_eq!(FloatFormat::E2M1.max_finite(), 6.0);
        assert_eq!(
            FloatFormat::E2M1.table(),
            vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]
        );
        assert_eq!(FloatFormat::E4M3.min_positive(), 2f64.powi(-9));
        assert_eq!(FloatFormat::E8M0.max_finite(), 2f64.powi(127));
    }

    #[test]
    fn representable_roundtrip() {
        for f in [FloatFormat::E4M3, FloatFormat::E5M2, FloatFormat::E2M1] {
            for v in f.table() {
                assert_eq!(f.quantize(v), v);
                assert_eq!(f.quantize(-v), -v);
            }
        }
        for v in [448.0, -224.0, 112.0] {
            assert_eq!(FloatFormat::E4M3.quantize(v), v);
        }
    }

    #[test]
    fn ties_to_even_and_saturation() {
        // 2.5 sits between 2 (even index 4) and 3.
        assert_eq!(FloatFormat::E2M1.quantize(2.5), 2.0);
        // 5 sits between 4 (index 6) and 6.
        assert_eq!(FloatFormat::E2M1.quantize(5.0), 4.0);
        assert_eq!(FloatFormat::E2M1.quantize(1.25), 1.0);
        assert_eq!(FloatFormat::E2M1.quantize(1.75), 2.0);
        assert_eq!(FloatFormat::E4M3.quantize(1e6), 448.0);
        assert_eq!(FloatFormat::E4M3.quantize(-1e6), -448.0);
        assert_eq!(FloatFormat::E4M3.encode(-0.0), 0);
    }
}

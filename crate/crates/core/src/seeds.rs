//! Seed derivation and exact float formatting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::ser::Error as _;
use serde::{Serialize, Serializer};

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent child seed for a named stream and index.
pub fn derive_seed(base: u64, stream: &str, index: u64) -> u64 {
    let mut h = mix(base);
    for b in stream.bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ mix(index))
}

pub fn rng_for(base: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

/// 17 significant digits: enough to round-trip any `f64` bit-exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Serializes an `f64` as a JSON number with 17 significant digits.
#[derive(Debug, Clone, Copy)]
pub struct F17(pub f64);

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(S::Error::custom("non-finite float"));
        }
        let raw = serde_json::value::RawValue::from_string(fmt_f64(self.0)).map_err(S::Error::custom)?;
        raw.serialize(s)
    }
}

pub fn f17_vec(v: &[f64]) -> Vec<F17> {
    v.iter().copied().map(F17).collect()
}

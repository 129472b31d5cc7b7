//! Fixed-length binary watermark messages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A binary message of fixed length. The embedding networks consume the
/// normalized form (bit - 0.5, i.e. {-0.5, +0.5}).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WatermarkBits {
    bits: Vec<u8>,
}

impl WatermarkBits {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidArgument("watermark must be non-empty".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("watermark bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    /// Seeded uniform random message of length `len`.
    pub fn random(seed: u64, len: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new((0..len).map(|_| rng.gen_range(0..=1u8)).collect())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Normalized form: bit - 0.5.
    pub fn normalized(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64 - 0.5).collect()
    }

    /// Parse from a string of '0'/'1' characters.
    pub fn from_bitstring(s: &str) -> Result<Self> {
        let bits: Result<Vec<u8>> = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::InvalidArgument(format!(
                    "bitstring may contain only 0/1, got '{other}'"
                ))),
            })
            .collect();
        Self::new(bits?)
    }

    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }

    /// Parse from lowercase/uppercase hex, most-significant-bit first.
    /// The message length is 4 * (hex digit count).
    pub fn from_hex(s: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(s.len() * 4);
        for c in s.chars() {
            let nibble = c.to_digit(16).ok_or_else(|| {
                Error::InvalidArgument(format!("invalid hex digit '{c}'"))
            })?;
            for shift in (0..4).rev() {
                bits.push(((nibble >> shift) & 1) as u8);
            }
        }
        Self::new(bits)
    }

    /// Lowercase hex, most-significant-bit first. Errors unless the length is
    /// a multiple of 4.
    pub fn to_hex(&self) -> Result<String> {
        if self.bits.len() % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "length {} is not a multiple of 4; hex form undefined",
                self.bits.len()
            )));
        }
        Ok(self
            .bits
            .chunks(4)
            .map(|chunk| {
                let nibble = chunk.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32);
                char::from_digit(nibble, 16).expect("nibble < 16")
            })
            .collect())
    }
}

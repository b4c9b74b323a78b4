//! Sign-magnitude representation (SMR) of real scalars.
//!
//! A value is housed in `1 + h + l` bits `[a0, a1, ..., a_{h+l}]` where `a0`
//! is the sign and `a1..` are the binary coefficients of `2^{h-1} .. 2^{-l}`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest `h + l` for which every grid point is an exact `f64`.
pub const MAX_MAGNITUDE_BITS: u32 = 53;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmrError {
    #[error("invalid SMR config h={high} l={low}: {reason}")]
    InvalidConfig { high: u32, low: u32, reason: &'static str },
    #[error("cannot encode non-finite value {0}; route missing values through the missing token")]
    NonFinite(f64),
    #[error("bit vector has length {got}, config expects {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("bit {index} has value {value}, expected 0 or 1")]
    NotBinary { index: usize, value: u8 },
    #[error("probability {value} at index {index} is outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("cannot parse bit string {0:?}")]
    Parse(String),
}

/// Bit budget of an SMR code: `high` non-negative exponents, `low` negative ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmrConfig {
    pub high: u32,
    pub low: u32,
}

impl SmrConfig {
    pub fn new(high: u32, low: u32) -> Result<Self, SmrError> {
        let cfg = SmrConfig { high, low };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SmrError> {
        let err = |reason| SmrError::InvalidConfig { high: self.high, low: self.low, reason };
        if self.high < 1 {
            return Err(err("h must be at least 1"));
        }
        if self.high + self.low > MAX_MAGNITUDE_BITS {
            return Err(err("h + l must not exceed 53"));
        }
        Ok(())
    }

    /// Total bit width `1 + h + l`.
    pub fn width(&self) -> usize {
        1 + self.high as usize + self.low as usize
    }

    fn magnitude_bits(&self) -> u32 {
        self.high + self.low
    }

    /// Grid spacing `2^{-l}`.
    pub fn resolution(&self) -> f64 {
        (-(self.low as f64)).exp2()
    }

    /// Largest representable magnitude, `2^h - 2^{-l}`.
    pub fn max_value(&self) -> f64 {
        self.max_scaled() as f64 * self.resolution()
    }

    fn max_scaled(&self) -> u64 {
        (1u64 << self.magnitude_bits()) - 1
    }

    /// Encodes `v`, rounding to the nearest grid point (ties away from zero)
    /// and saturating out-of-range magnitudes.
    pub fn encode(&self, v: f64) -> Result<SmrBits, SmrError> {
        self.encode_saturating(v).map(|(bits, _)| bits)
    }

    /// Like [`encode`](Self::encode), also reporting whether the magnitude saturated.
    pub fn encode_saturating(&self, v: f64) -> Result<(SmrBits, bool), SmrError> {
        if !v.is_finite() {
            return Err(SmrError::NonFinite(v));
        }
        let scaled = (v.abs() * (self.low as f64).exp2()).round();
        let max = self.max_scaled();
        let (magnitude, saturated) = if scaled > max as f64 { (max, true) } else { (scaled as u64, false) };
        let n = self.magnitude_bits();
        let mut bits = Vec::with_capacity(self.width());
        bits.push(u8::from(magnitude != 0 && v.is_sign_negative()));
        for i in (0..n).rev() {
            bits.push(((magnitude >> i) & 1) as u8);
        }
        Ok((SmrBits { cfg: *self, bits }, saturated))
    }

    /// Evaluates the signed expansion of a raw bit slice.
    pub fn decode(&self, bits: &[u8]) -> Result<f64, SmrError> {
        if bits.len() != self.width() {
            return Err(SmrError::LengthMismatch { got: bits.len(), expected: self.width() });
        }
        let mut magnitude: u64 = 0;
        for (index, &b) in bits.iter().enumerate() {
            if b > 1 {
                return Err(SmrError::NotBinary { index, value: b });
            }
            if index > 0 {
                magnitude = (magnitude << 1) | b as u64;
            }
        }
        if magnitude == 0 {
            return Ok(0.0);
        }
        let value = magnitude as f64 * self.resolution();
        Ok(if bits[0] == 1 { -value } else { value })
    }

    /// Thresholds per-bit probabilities (`p > 0.5` is a one) and decodes.
    pub fn decode_probs(&self, probs: &[f64]) -> Result<f64, SmrError> {
        if probs.len() != self.width() {
            return Err(SmrError::LengthMismatch { got: probs.len(), expected: self.width() });
        }
        let mut bits = Vec::with_capacity(probs.len());
        for (index, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(SmrError::ProbabilityOutOfRange { index, value: p });
            }
            bits.push(u8::from(p > 0.5));
        }
        self.decode(&bits)
    }

    /// Decodes directly from logits; `logit > 0` is equivalent to `sigmoid > 0.5`.
    pub fn decode_logits(&self, logits: &[f64]) -> Result<f64, SmrError> {
        if logits.len() != self.width() {
            return Err(SmrError::LengthMismatch { got: logits.len(), expected: self.width() });
        }
        let bits: Vec<u8> = logits.iter().map(|&z| u8::from(z > 0.0)).collect();
        self.decode(&bits)
    }
}

/// An encoded value tied to the config that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SmrBits {
    cfg: SmrConfig,
    bits: Vec<u8>,
}

impl SmrBits {
    pub fn from_bits(bits: Vec<u8>, cfg: SmrConfig) -> Result<Self, SmrError> {
        cfg.decode(&bits)?;
        Ok(SmrBits { cfg, bits })
    }

    /// Parses a string of `0`/`1` characters in `[a0, a1, ...]` order.
    pub fn parse(s: &str, cfg: SmrConfig) -> Result<Self, SmrError> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(SmrError::Parse(s.to_string())),
            })
            .collect::<Result<Vec<u8>, _>>()?;
        Self::from_bits(bits, cfg)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn config(&self) -> SmrConfig {
        self.cfg
    }

    pub fn sign(&self) -> u8 {
        self.bits[0]
    }

    pub fn magnitude(&self) -> &[u8] {
        &self.bits[1..]
    }

    pub fn decode(&self) -> f64 {
        self.cfg.decode(&self.bits).expect("SmrBits is validated on construction")
    }

    /// Bits as `0.0`/`1.0` values, the form fed to the model.
    pub fn to_floats<T: num_traits::Float>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| if b == 1 { T::one() } else { T::zero() }).collect()
    }
}

impl fmt::Display for SmrBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

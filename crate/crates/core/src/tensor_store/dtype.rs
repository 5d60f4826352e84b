use std::fmt;

use half::f16;
use serde::{Deserialize, Serialize};

/// Floating-point storage types accepted in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
}

impl DType {
    pub const ALL: [DType; 4] = [DType::F64, DType::F32, DType::F16, DType::BF16];

    /// Parses the dtype tag used in safetensors headers. Returns `None` for
    /// anything outside the four float types.
    pub fn from_tag(tag: &str) -> Option<DType> {
        match tag {
            "F64" => Some(DType::F64),
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn byte_size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    /// Encodes `value` into little-endian storage bytes, rounding to nearest.
    pub fn encode(self, value: f64, out: &mut Vec<u8>) {
        match self {
            DType::F64 => out.extend_from_slice(&value.to_le_bytes()),
            DType::F32 => out.extend_from_slice(&(value as f32).to_le_bytes()),
            DType::F16 => out.extend_from_slice(&f16::from_f64(value).to_le_bytes()),
            DType::BF16 => out.extend_from_slice(&half::bf16::from_f64(value).to_le_bytes()),
        }
    }

    /// Value after a storage round trip through this dtype.
    pub fn quantize(self, value: f64) -> f64 {
        let mut buf = Vec::with_capacity(8);
        self.encode(value, &mut buf);
        decode_element(&buf, self)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Widens one little-endian stored element to `f64`.
///
/// `raw` must hold exactly `dtype.byte_size()` bytes. BF16 is the upper half
/// of an f32 bit pattern; F16 is IEEE 754 binary16. NaN and infinities pass
/// through unchanged.
pub fn decode_element(raw: &[u8], dtype: DType) -> f64 {
    assert_eq!(raw.len(), dtype.byte_size(), "element width for {dtype}");
    match dtype {
        DType::F64 => f64::from_le_bytes(raw.try_into().unwrap()),
        DType::F32 => f32::from_le_bytes(raw.try_into().unwrap()) as f64,
        DType::F16 => f16::from_bits(u16::from_le_bytes([raw[0], raw[1]])).to_f64(),
        DType::BF16 => bf16_bits_to_f64(u16::from_le_bytes([raw[0], raw[1]])),
    }
}

#[inline]
fn bf16_bits_to_f64(bits: u16) -> f64 {
    f32::from_bits((bits as u32) << 16) as f64
}

/// Decodes a contiguous run of elements, appending to `out`.
pub(crate) fn decode_into(bytes: &[u8], dtype: DType, out: &mut Vec<f64>) {
    out.reserve(bytes.len() / dtype.byte_size());
    match dtype {
        DType::F64 => out.extend(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        ),
        DType::F32 => out.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
        ),
        DType::F16 => out.extend(
            bytes
                .chunks_exact(2)
                .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64()),
        ),
        DType::BF16 => out.extend(
            bytes
                .chunks_exact(2)
                .map(|c| bf16_bits_to_f64(u16::from_le_bytes([c[0], c[1]]))),
        ),
    }
}

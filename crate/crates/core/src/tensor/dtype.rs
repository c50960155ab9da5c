use crate::error::{Error, Result};

/// Element type of a stored tensor.
///
/// Only `BF16` and `F32` take part in arithmetic. The remaining tags are
/// recognised so that real archives load; such tensors are carried through
/// merges unchanged and skipped by diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    BF16,
    F32,
    F16,
    F64,
    I8,
    I16,
    I32,
    I64,
    U8,
    U16,
    U32,
    U64,
    Bool,
}

impl DType {
    pub fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "BF16" => DType::BF16,
            "F32" => DType::F32,
            "F16" => DType::F16,
            "F64" => DType::F64,
            "I8" => DType::I8,
            "I16" => DType::I16,
            "I32" => DType::I32,
            "I64" => DType::I64,
            "U8" => DType::U8,
            "U16" => DType::U16,
            "U32" => DType::U32,
            "U64" => DType::U64,
            "BOOL" => DType::Bool,
            other => return Err(Error::UnknownDtype(other.to_string())),
        })
    }

    pub fn tag(self) -> &'static str {
        match self {
            DType::BF16 => "BF16",
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::F64 => "F64",
            DType::I8 => "I8",
            DType::I16 => "I16",
            DType::I32 => "I32",
            DType::I64 => "I64",
            DType::U8 => "U8",
            DType::U16 => "U16",
            DType::U32 => "U32",
            DType::U64 => "U64",
            DType::Bool => "BOOL",
        }
    }

    /// Bytes per element.
    pub fn size(self) -> usize {
        match self {
            DType::I8 | DType::U8 | DType::Bool => 1,
            DType::BF16 | DType::F16 | DType::I16 | DType::U16 => 2,
            DType::F32 | DType::I32 | DType::U32 => 4,
            DType::F64 | DType::I64 | DType::U64 => 8,
        }
    }

    /// True for the dtypes merges and diagnostics compute on.
    pub fn is_compute(self) -> bool {
        matches!(self, DType::BF16 | DType::F32)
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Exact widening: the bf16 bits become the high half of the f32 pattern.
#[inline]
pub fn bf16_to_f32(bits: u16) -> f32 {
    f32::from_bits(u32::from(bits) << 16)
}

/// Narrowing with round-to-nearest-even on the dropped 16 mantissa bits.
///
/// NaNs keep their sign and high payload bits and are forced quiet, so a NaN
/// never rounds into an infinity.
#[inline]
pub fn f32_to_bf16(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return ((bits >> 16) as u16) | 0x0040;
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb);
    (rounded >> 16) as u16
}

/// Decode little-endian element bytes of a compute dtype into f32 values.
pub fn decode_f32(dtype: DType, bytes: &[u8]) -> Result<Vec<f32>> {
    match dtype {
        DType::BF16 => Ok(bytes
            .chunks_exact(2)
            .map(|c| bf16_to_f32(u16::from_le_bytes([c[0], c[1]])))
            .collect()),
        DType::F32 => Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()),
        other => Err(Error::param(
            "dtype",
            format!("{other} tensors cannot be widened to f32"),
        )),
    }
}

/// Encode f32 values as little-endian bytes of `dtype`, narrowing once.
pub fn encode_f32(dtype: DType, values: &[f32]) -> Result<Vec<u8>> {
    match dtype {
        DType::BF16 => {
            let mut out = Vec::with_capacity(values.len() * 2);
            for &v in values {
                out.extend_from_slice(&f32_to_bf16(v).to_le_bytes());
            }
            Ok(out)
        }
        DType::F32 => {
            let mut out = Vec::with_capacity(values.len() * 4);
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
            Ok(out)
        }
        other => Err(Error::param(
            "dtype",
            format!("cannot encode f32 values as {other}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widening_examples() {
        assert_eq!(bf16_to_f32(0x3F80), 1.0);
        assert_eq!(bf16_to_f32(0x0000), 0.0);
        // sign 1, exponent 129, mantissa 0.25: -(1.25) * 2^2
        assert_eq!(bf16_to_f32(0xC0A0), -5.0);
        assert_eq!(f32_to_bf16(1.0), 0x3F80);
    }

    #[test]
    fn halfway_rounds_to_even() {
        // 1.0 = 0x3F80_0000; the next bf16 above is 0x3F81 (odd mantissa).
        // 0x3F80_8000 sits exactly between them and must go to the even 0x3F80.
        assert_eq!(f32_to_bf16(f32::from_bits(0x3F80_8000)), 0x3F80);
        // Between 0x3F81 (odd) and 0x3F82 (even): rounds up to 0x3F82.
        assert_eq!(f32_to_bf16(f32::from_bits(0x3F81_8000)), 0x3F82);
        // Just above / below halfway.
        assert_eq!(f32_to_bf16(f32::from_bits(0x3F80_8001)), 0x3F81);
        assert_eq!(f32_to_bf16(f32::from_bits(0x3F80_7FFF)), 0x3F80);
    }

    #[test]
    fn overflow_and_specials() {
        assert_eq!(f32_to_bf16(f32::INFINITY), 0x7F80);
        assert_eq!(f32_to_bf16(f32::NEG_INFINITY), 0xFF80);
        assert_eq!(f32_to_bf16(f32::MAX), 0x7F80);
        assert!(bf16_to_f32(f32_to_bf16(f32::NAN)).is_nan());
        // A NaN whose payload lives only in the low bits must stay NaN.
        assert!(bf16_to_f32(f32_to_bf16(f32::from_bits(0x7F80_0001))).is_nan());
        assert_eq!(f32_to_bf16(-0.0), 0x8000);
    }

    #[test]
    fn exhaustive_roundtrip() {
        for bits in 0..=u16::MAX {
            let wide = bf16_to_f32(bits);
            assert_eq!(wide.to_bits() & 0xFFFF, 0);
            if wide.is_nan() {
                assert!(bf16_to_f32(f32_to_bf16(wide)).is_nan());
                if bits & 0x0040 != 0 {
                    assert_eq!(f32_to_bf16(wide), bits);
                }
            } else {
                assert_eq!(f32_to_bf16(wide), bits, "pattern {bits:#06x}");
            }
        }
    }

    #[test]
    fn tags_roundtrip() {
        for d in [
            DType::BF16,
            DType::F32,
            DType::F16,
            DType::F64,
            DType::I8,
            DType::I16,
            DType::I32,
            DType::I64,
            DType::U8,
            DType::U16,
            DType::U32,
            DType::U64,
            DType::Bool,
        ] {
            assert_eq!(DType::from_tag(d.tag()).unwrap(), d);
        }
        assert!(matches!(
            DType::from_tag("F8_E4M3"),
            Err(Error::UnknownDtype(_))
        ));
    }
}

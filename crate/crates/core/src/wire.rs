// SPDX-License-Identifier: Apache-2.0

//! Length-prefixed binary encoding shared by every signed or committed
//! message.
//!
//! Each field is written as a 4-byte big-endian length followed by the field
//! bytes. Integers are 8-byte big-endian two's complement, strings are UTF-8.
//! Signatures are computed over exactly these bytes, so the field order of
//! each payload is part of the wire contract and is documented on the type
//! that produces it.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("unexpected end of input at offset {0}")]
    Truncated(usize),
    #[error("field length {len} at offset {offset} exceeds remaining input")]
    BadLength { offset: usize, len: usize },
    #[error("expected {expected}-byte field, found {found}")]
    WrongSize { expected: usize, found: usize },
    #[error("invalid utf-8 in string field")]
    Utf8,
    #[error("invalid value: {0}")]
    Invalid(&'static str),
    #[error("{0} trailing bytes after message")]
    Trailing(usize),
}

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, field: &[u8]) -> &mut Self {
        let len = u32::try_from(field.len()).expect("field longer than 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(field);
        self
    }

    pub fn str(&mut self, field: &str) -> &mut Self {
        self.bytes(field.as_bytes())
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.bytes(&[u8::from(v)])
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    input: &'a [u8],
    offset: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Self { input, offset: 0 }
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let rest = &self.input[self.offset..];
        if rest.len() < 4 {
            return Err(WireError::Truncated(self.offset));
        }
        let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
        if rest.len() - 4 < len {
            return Err(WireError::BadLength {
                offset: self.offset,
                len,
            });
        }
        let field = &rest[4..4 + len];
        self.offset += 4 + len;
        Ok(field)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        let field = self.bytes()?;
        field.try_into().map_err(|_| WireError::WrongSize {
            expected: N,
            found: field.len(),
        })
    }

    pub fn string(&mut self) -> Result<String, WireError> {
        let field = self.bytes()?;
        String::from_utf8(field.to_vec()).map_err(|_| WireError::Utf8)
    }

    pub fn i64(&mut self) -> Result<i64, WireError> {
        Ok(i64::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn bool(&mut self) -> Result<bool, WireError> {
        match self.array::<1>()? {
            [0] => Ok(false),
            [1] => Ok(true),
            _ => Err(WireError::Invalid("boolean flag")),
        }
    }

    pub fn finish(self) -> Result<(), WireError> {
        match self.input.len() - self.offset {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}

/// Types with a canonical length-prefixed encoding.
pub trait Wire: Sized {
    fn encode(&self, enc: &mut Encoder);
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut dec = Decoder::new(bytes);
        let value = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(value)
    }
}

/// Encodes a list as a count field followed by each element's fields.
pub fn encode_list<T: Wire>(enc: &mut Encoder, items: &[T]) {
    enc.u32(items.len() as u32);
    for item in items {
        item.encode(enc);
    }
}

pub fn decode_list<T: Wire>(dec: &mut Decoder<'_>) -> Result<Vec<T>, WireError> {
    let count = dec.u32()? as usize;
    // Each element occupies at least one 4-byte length prefix.
    if count > dec.input.len().saturating_sub(dec.offset) / 4 {
        return Err(WireError::Invalid("list count exceeds input"));
    }
    (0..count).map(|_| T::decode(dec)).collect()
}

/// Hex (de)serialization for fixed-size byte arrays in JSON artifacts.
pub mod hex_array {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(
        bytes: &[u8; N],
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(
        de: D,
    ) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(de)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom(format!("expected {N} hex-encoded bytes")))
    }
}

pub mod hex_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(de)?;
        hex::decode(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_length_prefixed_big_endian() {
        let bytes = Encoder::new().str("ab").i64(-2).finish();
        assert_eq!(
            bytes,
            [
                0, 0, 0, 2, b'a', b'b', 0, 0, 0, 8, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xfe
            ]
        );
    }

    #[test]
    fn truncated_input_is_rejected() {
        let bytes = Encoder::new().str("hello").finish();
        let mut dec = Decoder::new(&bytes[..6]);
        assert!(matches!(dec.bytes(), Err(WireError::BadLength { .. })));
        let mut dec = Decoder::new(&bytes[..2]);
        assert_eq!(dec.bytes(), Err(WireError::Truncated(0)));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = Encoder::new().u32(7).finish();
        bytes.push(0);
        let mut dec = Decoder::new(&bytes);
        assert_eq!(dec.u32().unwrap(), 7);
        assert_eq!(dec.finish(), Err(WireError::Trailing(1)));
    }

    #[test]
    fn wrong_fixed_size() {
        let bytes = Encoder::new().bytes(&[1, 2, 3]).finish();
        let mut dec = Decoder::new(&bytes);
        assert_eq!(
            dec.array::<4>(),
            Err(WireError::WrongSize {
                expected: 4,
                found: 3
            })
        );
    }
}

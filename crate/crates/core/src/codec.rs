//! Length-prefixed binary encoding used for signing, block hashing and state
//! digests.
//!
//! Every field is written as a big-endian `u32` byte length followed by the
//! field bytes. Integers are fixed-width big-endian. Decoding is strict: a
//! length prefix must match the expected width exactly and trailing bytes are
//! an error.

use thiserror::Error;

use crate::crypto::{Address, Hash, PublicKey, Signature};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unknown transaction kind tag {0}")]
    UnknownKind(u8),
    #[error("input truncated")]
    Truncated,
    #[error("field length {got} where {expected} was expected")]
    BadLength { expected: usize, got: usize },
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid value: {0}")]
    BadValue(&'static str),
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
        let len = u32::try_from(field.len()).expect("field exceeds u32 length");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(field);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.bytes(&[v])
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn i32(&mut self, v: i32) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(u8::from(v))
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn address(&mut self, a: &Address) -> &mut Self {
        self.bytes(a.as_bytes())
    }

    pub fn hash(&mut self, h: &Hash) -> &mut Self {
        self.bytes(h.as_bytes())
    }

    pub fn public_key(&mut self, k: &PublicKey) -> &mut Self {
        self.bytes(&k.0)
    }

    pub fn signature(&mut self, s: &Signature) -> &mut Self {
        self.bytes(&s.0)
    }

    /// Appends already-encoded bytes without a length prefix.
    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }
}

pub struct Decoder<'a> {
    input: &'a [u8],
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Decoder { input }
    }

    pub fn remaining(&self) -> usize {
        self.input.len()
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.input.len() {
            0 => Ok(()),
            n => Err(DecodeError::TrailingBytes(n)),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.input.len() < n {
            return Err(DecodeError::Truncated);
        }
        let (head, tail) = self.input.split_at(n);
        self.input = tail;
        Ok(head)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes"));
        self.take(len as usize)
    }

    fn fixed<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let field = self.bytes()?;
        field.try_into().map_err(|_| DecodeError::BadLength {
            expected: N,
            got: field.len(),
        })
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.fixed::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.fixed()?))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.fixed()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.fixed()?))
    }

    pub fn i32(&mut self) -> Result<i32, DecodeError> {
        Ok(i32::from_be_bytes(self.fixed()?))
    }

    pub fn i64(&mut self) -> Result<i64, DecodeError> {
        Ok(i64::from_be_bytes(self.fixed()?))
    }

    pub fn bool(&mut self) -> Result<bool, DecodeError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(DecodeError::BadValue("boolean")),
        }
    }

    pub fn string(&mut self) -> Result<String, DecodeError> {
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| DecodeError::BadValue("utf-8 string"))
    }

    pub fn address(&mut self) -> Result<Address, DecodeError> {
        self.fixed().map(Address)
    }

    pub fn hash(&mut self) -> Result<Hash, DecodeError> {
        self.fixed().map(Hash)
    }

    pub fn public_key(&mut self) -> Result<PublicKey, DecodeError> {
        self.fixed().map(PublicKey)
    }

    pub fn signature(&mut self) -> Result<Signature, DecodeError> {
        self.fixed().map(Signature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fields_are_length_prefixed_big_endian() {
        let mut enc = Encoder::new();
        enc.u64(0x0102).u8(7);
        assert_eq!(
            enc.finish(),
            vec![0, 0, 0, 8, 0, 0, 0, 0, 0, 0, 1, 2, 0, 0, 0, 1, 7]
        );
    }

    #[test]
    fn strict_decoding() {
        let mut enc = Encoder::new();
        enc.u32(5);
        let bytes = enc.finish();

        let mut dec = Decoder::new(&bytes);
        assert_eq!(
            dec.u64(),
            Err(DecodeError::BadLength {
                expected: 8,
                got: 4
            })
        );

        let mut dec = Decoder::new(&bytes[..6]);
        assert_eq!(dec.u32(), Err(DecodeError::Truncated));

        let mut padded = bytes.clone();
        padded.push(0);
        let mut dec = Decoder::new(&padded);
        assert_eq!(dec.u32(), Ok(5));
        assert_eq!(dec.finish(), Err(DecodeError::TrailingBytes(1)));
    }

    #[test]
    fn bool_rejects_other_bytes() {
        let mut enc = Encoder::new();
        enc.u8(2);
        let bytes = enc.finish();
        assert!(Decoder::new(&bytes).bool().is_err());
    }
}

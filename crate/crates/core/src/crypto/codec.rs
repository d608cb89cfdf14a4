//! Canonical wire encoding: little-endian `u32` length prefixes, fixed-width
//! elements, big integers as minimal big-endian bytes behind a length prefix.

use num_bigint::BigUint;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("message truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("invalid value: {0}")]
    Invalid(&'static str),
}

pub fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_prefixed(buf: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(buf, bytes.len() as u32);
    buf.extend_from_slice(bytes);
}

pub fn put_biguint(buf: &mut Vec<u8>, v: &BigUint) {
    put_prefixed(buf, &v.to_bytes_be());
}

/// `[count][count * width bytes]`; every element must be exactly `width` bytes.
pub fn put_elements<E: AsRef<[u8]>>(buf: &mut Vec<u8>, elements: &[E], width: usize) {
    put_u32(buf, elements.len() as u32);
    buf.reserve(elements.len() * width);
    for e in elements {
        let e = e.as_ref();
        assert_eq!(e.len(), width, "element width");
        buf.extend_from_slice(e);
    }
}

pub fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    put_u32(buf, values.len() as u32);
    for v in values {
        put_f64(buf, *v);
    }
}

/// Big-endian encoding left-padded to `width` bytes.
pub fn to_fixed_be(v: &BigUint, width: usize) -> Vec<u8> {
    let raw = v.to_bytes_be();
    assert!(raw.len() <= width, "value wider than {width} bytes");
    let mut out = vec![0u8; width - raw.len()];
    out.extend_from_slice(&raw);
    out
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.data.len() - self.pos < n {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn prefixed(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.u32()? as usize;
        self.bytes(n)
    }

    pub fn biguint(&mut self) -> Result<BigUint, CodecError> {
        Ok(BigUint::from_bytes_be(self.prefixed()?))
    }

    pub fn elements(&mut self, width: usize) -> Result<Vec<&'a [u8]>, CodecError> {
        let count = self.u32()? as usize;
        let block = self.bytes(count.checked_mul(width).ok_or(CodecError::Invalid("count"))?)?;
        Ok(block.chunks_exact(width.max(1)).take(count).collect())
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, CodecError> {
        let count = self.u32()? as usize;
        (0..count).map(|_| self.f64()).collect()
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn finish(self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn biguint_is_minimal_big_endian() {
        let mut buf = Vec::new();
        put_biguint(&mut buf, &BigUint::from(0x0102u32));
        assert_eq!(buf, vec![2, 0, 0, 0, 1, 2]);
    }

    #[test]
    fn truncation_is_reported() {
        let mut r = Reader::new(&[5, 0, 0, 0, 1]);
        assert!(matches!(r.prefixed(), Err(CodecError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn mixed_message_round_trips(
            elems in proptest::collection::vec(proptest::array::uniform32(any::<u8>()), 0..20),
            big in proptest::collection::vec(any::<u8>(), 1..70),
            xs in proptest::collection::vec(-1e9f64..1e9, 0..10),
        ) {
            let big = BigUint::from_bytes_be(&big);
            let mut buf = Vec::new();
            put_elements(&mut buf, &elems, 32);
            put_biguint(&mut buf, &big);
            put_f64s(&mut buf, &xs);
            let mut r = Reader::new(&buf);
            let back: Vec<[u8; 32]> = r.elements(32).unwrap().into_iter().map(|e| e.try_into().unwrap()).collect();
            prop_assert_eq!(back, elems);
            prop_assert_eq!(r.biguint().unwrap(), big);
            prop_assert_eq!(r.f64s().unwrap(), xs);
            r.finish().unwrap();
        }
    }
}

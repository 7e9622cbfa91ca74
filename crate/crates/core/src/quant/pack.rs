//! Bit-packed storage for low-bit integer codes.
//!
//! Codes are laid out little-endian within each byte: the first code occupies
//! the lowest-order bits of byte 0. Only widths that divide 8 are packed, so a
//! code never straddles a byte boundary.

use crate::error::{Error, Result};

/// Bit widths with a packed representation.
pub const PACKED_WIDTHS: [u8; 4] = [1, 2, 4, 8];

pub fn is_packable(bits: u8) -> bool {
    PACKED_WIDTHS.contains(&bits)
}

fn check_width(bits: u8) -> Result<()> {
    if is_packable(bits) {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "{bits}-bit codes have no packed layout (supported: 1, 2, 4, 8)"
        )))
    }
}

/// Append-only packed code stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    bits: u8,
    len: usize,
    bytes: Vec<u8>,
}

impl PackedCodes {
    pub fn new(bits: u8) -> Result<Self> {
        check_width(bits)?;
        Ok(Self {
            bits,
            len: 0,
            bytes: Vec::new(),
        })
    }

    pub fn with_capacity(bits: u8, codes: usize) -> Result<Self> {
        let mut packed = Self::new(bits)?;
        packed.bytes.reserve(packed_len(codes, bits));
        Ok(packed)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Number of codes stored.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn push(&mut self, code: u8) -> Result<()> {
        if u32::from(code) >= 1u32 << self.bits {
            return Err(Error::Usage(format!(
                "code {code} does not fit in {} bits",
                self.bits
            )));
        }
        let bit = self.len * self.bits as usize;
        if bit.is_multiple_of(8) {
            self.bytes.push(0);
        }
        *self.bytes.last_mut().expect("byte pushed above") |= code << (bit % 8);
        self.len += 1;
        Ok(())
    }

    pub fn extend_from(&mut self, other: &PackedCodes) -> Result<()> {
        if other.bits != self.bits {
            return Err(Error::Usage(format!(
                "cannot append {}-bit codes to a {}-bit stream",
                other.bits, self.bits
            )));
        }
        if (self.len * self.bits as usize).is_multiple_of(8) {
            self.bytes.extend_from_slice(&other.bytes);
            self.len += other.len;
        } else {
            for i in 0..other.len {
                self.push(other.get(i))?;
            }
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, index: usize) -> u8 {
        debug_assert!(index < self.len);
        let bit = index * self.bits as usize;
        let mask = ((1u16 << self.bits) - 1) as u8;
        (self.bytes[bit / 8] >> (bit % 8)) & mask
    }

    /// Unpacks `out.len()` codes starting at `start`.
    pub fn read_into(&self, start: usize, out: &mut [u8]) {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = self.get(start + i);
        }
    }

    pub fn to_codes(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.get(i)).collect()
    }
}

/// Bytes needed for `n` codes of `bits` width.
pub fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    let mut packed = PackedCodes::with_capacity(bits, codes.len())?;
    for &c in codes {
        packed.push(c)?;
    }
    Ok(packed.bytes)
}

pub fn unpack_codes(bytes: &[u8], n: usize, bits: u8) -> Result<Vec<u8>> {
    check_width(bits)?;
    if bytes.len() < packed_len(n, bits) {
        return Err(Error::Usage(format!(
            "{} bytes cannot hold {n} codes of {bits} bits",
            bytes.len()
        )));
    }
    let packed = PackedCodes {
        bits,
        len: n,
        bytes: bytes.to_vec(),
    };
    Ok(packed.to_codes())
}

//! Sub-byte weight packing. Codes are laid out LSB-first: element `i` holds
//! bits `[i*b, (i+1)*b)` of a little-endian bit stream.

use crate::error::{Error, Result};

pub const SUPPORTED_BITS: [u32; 3] = [2, 4, 8];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PackedWeights {
    bits: u32,
    len: usize,
    data: Vec<u8>,
}

pub fn packed_len(len: usize, bits: u32) -> usize {
    (len * bits as usize).div_ceil(8)
}

fn check_bits(bits: u32) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("unsupported weight bit-width {bits}")))
    }
}

impl PackedWeights {
    pub fn pack(codes: &[u32], bits: u32) -> Result<Self> {
        check_bits(bits)?;
        let mut data = vec![0u8; packed_len(codes.len(), bits)];
        let per = 8 / bits as usize;
        for (i, &c) in codes.iter().enumerate() {
            if c >> bits != 0 {
                return Err(Error::InvalidArgument(format!(
                    "code {c} at {i} does not fit in {bits} bits"
                )));
            }
            data[i / per] |= (c as u8) << ((i % per) * bits as usize);
        }
        Ok(Self {
            bits,
            len: codes.len(),
            data,
        })
    }

    /// Rebuilds from raw bytes; `bytes` must hold exactly `len` codes.
    pub fn from_bytes(bits: u32, len: usize, bytes: Vec<u8>) -> Result<Self> {
        check_bits(bits)?;
        let want = packed_len(len, bits);
        if bytes.len() != want {
            return Err(Error::Format(format!(
                "packed blob holds {} bytes, expected {want} for {len} {bits}-bit codes",
                bytes.len()
            )));
        }
        Ok(Self { bits, len, data: bytes })
    }

    pub fn get(&self, i: usize) -> u32 {
        let per = 8 / self.bits as usize;
        let mask = ((1u16 << self.bits) - 1) as u8;
        ((self.data[i / per] >> ((i % per) * self.bits as usize)) & mask) as u32
    }

    pub fn unpack(&self) -> Vec<u32> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }
}

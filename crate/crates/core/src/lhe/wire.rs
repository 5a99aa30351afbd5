//! Binary encoding of a ciphertext: `"LHE1"`, S, level and key hash as
//! little-endian u32, then S little-endian f64 slots.

use super::ciphertext::{Ciphertext, KeyId};
use crate::error::LheError;

pub const MAGIC: &[u8; 4] = b"LHE1";
pub const HEADER_LEN: usize = 16;

impl Ciphertext {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.slots.len()
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.reserve(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.slots.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.level.to_le_bytes());
        out.extend_from_slice(&self.key.hash32().to_le_bytes());
        for v in self.slots.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out);
        out
    }

    /// Decodes one ciphertext from the front of `bytes`, returning it and the
    /// number of bytes consumed. The header's key hash must match `key` and
    /// the level must be below `max_level`.
    pub fn read_from(bytes: &[u8], key: KeyId, max_level: u32) -> Result<(Ciphertext, usize), LheError> {
        if bytes.len() < HEADER_LEN {
            return Err(LheError::Decode(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(LheError::Decode("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let s = word(4) as usize;
        let level = word(8);
        let hash = word(12);
        if hash != key.hash32() {
            return Err(LheError::KeyMismatch { expected: key.hash32() as u64, actual: hash as u64 });
        }
        if level >= max_level {
            return Err(LheError::Decode(format!("level {level} outside [0, {max_level})")));
        }
        let need = HEADER_LEN + 8 * s;
        if bytes.len() < need {
            return Err(LheError::Decode(format!("truncated payload: need {need}, have {}", bytes.len())));
        }
        let slots = bytes[HEADER_LEN..need].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((Ciphertext::from_parts(slots, level, key, false), need))
    }

    pub fn from_bytes(bytes: &[u8], key: KeyId, max_level: u32) -> Result<Ciphertext, LheError> {
        let (ct, used) = Self::read_from(bytes, key, max_level)?;
        if used != bytes.len() {
            return Err(LheError::Decode(format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(ct)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let ct = Ciphertext::from_parts(vec![1.5, -2.0], 3, KeyId(0x1234_5678_9abc_def0), false);
        let b = ct.to_bytes();
        assert_eq!(b.len(), 32);
        assert_eq!(&b[0..4], b"LHE1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &3u32.to_le_bytes());
        assert_eq!(&b[12..16], &(0x1234_5678u32 ^ 0x9abc_def0).to_le_bytes());
        assert_eq!(&b[16..24], &1.5f64.to_le_bytes());
        let back = Ciphertext::from_bytes(&b, ct.key, 6).unwrap();
        assert_eq!(back, ct);
    }

    #[test]
    fn rejects_foreign_key_and_truncation() {
        let ct = Ciphertext::from_parts(vec![0.0; 4], 1, KeyId(7), false);
        let b = ct.to_bytes();
        assert!(matches!(Ciphertext::from_bytes(&b, KeyId(8), 6), Err(LheError::KeyMismatch { .. })));
        assert!(Ciphertext::from_bytes(&b[..20], KeyId(7), 6).is_err());
        assert!(Ciphertext::from_bytes(&b, KeyId(7), 1).is_err());
    }
}

use std::sync::Arc;

use crate::error::LheError;

/// Opaque identity of one key generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub(crate) u64);

impl KeyId {
    pub fn raw(self) -> u64 {
        self.0
    }

    /// 32-bit digest written into the wire header.
    pub fn hash32(self) -> u32 {
        (self.0 ^ (self.0 >> 32)) as u32
    }
}

/// A vector of S reals to be encrypted or multiplied into a ciphertext.
#[derive(Debug, Clone, PartialEq)]
pub struct Plaintext(Vec<f64>);

impl Plaintext {
    pub fn new(slots: Vec<f64>) -> Self {
        Plaintext(slots)
    }

    pub fn zeros(s: usize) -> Self {
        Plaintext(vec![0.0; s])
    }

    pub fn slots(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Plaintext {
    fn from(v: Vec<f64>) -> Self {
        Plaintext(v)
    }
}

/// Simulated ciphertext: slot payload, level, and key identity.
///
/// `scale_pending` marks the output of a multiplication whose rescale has
/// not been applied yet. It does not affect the level algebra; it only
/// changes the level at which a following add or rotation is metered.
#[derive(Debug, Clone, PartialEq)]
pub struct Ciphertext {
    pub(crate) slots: Arc<[f64]>,
    pub(crate) level: u32,
    pub(crate) key: KeyId,
    pub(crate) scale_pending: bool,
}

impl Ciphertext {
    pub(crate) fn from_parts(slots: Vec<f64>, level: u32, key: KeyId, scale_pending: bool) -> Self {
        Ciphertext { slots: slots.into(), level, key, scale_pending }
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn key_id(&self) -> KeyId {
        self.key
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn scale_pending(&self) -> bool {
        self.scale_pending
    }

    /// Same ciphertext with any pending rescale applied.
    pub fn rescaled(&self) -> Ciphertext {
        Ciphertext { scale_pending: false, ..self.clone() }
    }

    /// Level at which an add or rotation on this ciphertext executes.
    pub(crate) fn exec_level(&self) -> u32 {
        self.level + self.scale_pending as u32
    }

    pub(crate) fn check_pair(a: &Ciphertext, b: &Ciphertext) -> Result<(), LheError> {
        if a.key != b.key {
            return Err(LheError::KeyMismatch { expected: a.key.0, actual: b.key.0 });
        }
        if a.slots.len() != b.slots.len() {
            return Err(LheError::LengthMismatch { expected: a.slots.len(), actual: b.slots.len() });
        }
        Ok(())
    }
}

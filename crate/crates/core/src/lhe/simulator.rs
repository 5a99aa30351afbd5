use std::sync::Arc;

use super::ciphertext::{Ciphertext, Plaintext};
use super::keys::{perturb, NoiseSource, PublicKey};
use super::params::LheParams;
use crate::error::LheError;
use crate::meter::OpKind;

/// Homomorphic evaluation interface. The simulator is the only backend here;
/// upper layers reach it through [`super::Evaluator`].
pub trait LheBackend: Send + Sync + std::fmt::Debug {
    fn params(&self) -> &LheParams;
    fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, LheError>;
    fn mul(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, LheError>;
    fn cmul(&self, a: &Ciphertext, pt: &Plaintext) -> Result<Ciphertext, LheError>;
    fn rot(&self, a: &Ciphertext, m: i64) -> Ciphertext;
}

/// Exact slot arithmetic with level bookkeeping.
#[derive(Debug, Clone)]
pub struct Simulator {
    params: LheParams,
    noise: Option<Arc<NoiseSource>>,
}

impl Simulator {
    pub fn new(pk: &PublicKey) -> Self {
        Simulator { params: *pk.params(), noise: pk.noise.clone() }
    }

    fn noisy(&self, mut ct: Ciphertext) -> Ciphertext {
        if self.noise.is_some() {
            let mut v = ct.slots.to_vec();
            perturb(&self.noise, &mut v);
            ct.slots = v.into();
        }
        ct
    }
}

impl LheBackend for Simulator {
    fn params(&self) -> &LheParams {
        &self.params
    }

    fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, LheError> {
        he_add(a, b).map(|c| self.noisy(c))
    }

    fn mul(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, LheError> {
        he_mul(a, b).map(|c| self.noisy(c))
    }

    fn cmul(&self, a: &Ciphertext, pt: &Plaintext) -> Result<Ciphertext, LheError> {
        cmul(a, pt).map(|c| self.noisy(c))
    }

    fn rot(&self, a: &Ciphertext, m: i64) -> Ciphertext {
        self.noisy(rot(a, m))
    }
}

/// Elementwise sum; level is the minimum of the operands.
pub fn he_add(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, LheError> {
    Ciphertext::check_pair(a, b)?;
    let slots = a.slots.iter().zip(b.slots.iter()).map(|(x, y)| x + y).collect();
    let pending = a.scale_pending && b.scale_pending;
    Ok(Ciphertext::from_parts(slots, a.level.min(b.level), a.key, pending))
}

/// Elementwise product; consumes one level.
pub fn he_mul(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, LheError> {
    Ciphertext::check_pair(a, b)?;
    let level = a.level.min(b.level);
    if level == 0 {
        return Err(LheError::LevelExhausted { op: OpKind::Mul, level, scope: None });
    }
    let slots = a.slots.iter().zip(b.slots.iter()).map(|(x, y)| x * y).collect();
    Ok(Ciphertext::from_parts(slots, level - 1, a.key, true))
}

/// Product with a plaintext vector; consumes one level.
pub fn cmul(a: &Ciphertext, pt: &Plaintext) -> Result<Ciphertext, LheError> {
    if pt.len() != a.slots.len() {
        return Err(LheError::LengthMismatch { expected: a.slots.len(), actual: pt.len() });
    }
    if a.level == 0 {
        return Err(LheError::LevelExhausted { op: OpKind::CMul, level: 0, scope: None });
    }
    let slots = a.slots.iter().zip(pt.slots()).map(|(x, y)| x * y).collect();
    Ok(Ciphertext::from_parts(slots, a.level - 1, a.key, true))
}

/// Cyclic left rotation by `m` slots (negative rotates right).
pub fn rot(a: &Ciphertext, m: i64) -> Ciphertext {
    let s = a.slots.len();
    let k = m.rem_euclid(s as i64) as usize;
    if k == 0 {
        return a.clone();
    }
    let mut v = Vec::with_capacity(s);
    v.extend_from_slice(&a.slots[k..]);
    v.extend_from_slice(&a.slots[..k]);
    Ciphertext::from_parts(v, a.level, a.key, a.scale_pending)
}

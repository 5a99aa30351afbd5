use std::sync::Arc;

use super::ciphertext::{Ciphertext, Plaintext};
use super::keys::PublicKey;
use super::params::LheParams;
use super::simulator::{LheBackend, Simulator};
use crate::error::LheError;
use crate::meter::{OpKind, OpMeter};

pub const ROOT_SCOPE: &str = "unscoped";

/// Metered REE-side handle: evaluation and encryption under one public key.
///
/// Cloning is cheap. Every primitive is recorded in the shared meter under
/// the handle's current scope label.
#[derive(Debug, Clone)]
pub struct Evaluator {
    backend: Arc<dyn LheBackend>,
    pk: PublicKey,
    meter: Arc<OpMeter>,
    scope: Arc<str>,
}

impl Evaluator {
    pub fn new(pk: PublicKey, meter: Arc<OpMeter>) -> Self {
        let backend = Arc::new(Simulator::new(&pk));
        Self::with_backend(backend, pk, meter)
    }

    pub fn with_backend(backend: Arc<dyn LheBackend>, pk: PublicKey, meter: Arc<OpMeter>) -> Self {
        Evaluator { backend, pk, meter, scope: Arc::from(ROOT_SCOPE) }
    }

    pub fn params(&self) -> &LheParams {
        self.pk.params()
    }

    pub fn slots(&self) -> usize {
        self.pk.params().slot_count()
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.pk
    }

    pub fn meter(&self) -> &Arc<OpMeter> {
        &self.meter
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// Handle whose operations are attributed to `label`.
    pub fn child(&self, label: &str) -> Evaluator {
        assert!(!label.is_empty(), "scope label must be nonempty");
        Evaluator { scope: Arc::from(label), ..self.clone() }
    }

    /// Runs `body` with all primitives attributed to `label`; the innermost
    /// label wins when scopes nest.
    pub fn scoped<R>(&self, label: &str, body: impl FnOnce(&Evaluator) -> R) -> R {
        body(&self.child(label))
    }

    fn record(&self, op: OpKind, level: u32) {
        self.meter.record(&self.scope, op, level);
    }

    fn tag(&self, e: LheError) -> LheError {
        match e {
            LheError::LevelExhausted { op, level, scope: None } => {
                LheError::LevelExhausted { op, level, scope: Some(self.scope.to_string()) }
            }
            other => other,
        }
    }

    pub fn encrypt(&self, pt: &Plaintext) -> Result<Ciphertext, LheError> {
        let ct = self.pk.encrypt(pt)?;
        self.record(OpKind::Encrypt, ct.level());
        Ok(ct)
    }

    pub fn encrypt_slots(&self, slots: Vec<f64>) -> Result<Ciphertext, LheError> {
        self.encrypt(&Plaintext::new(slots))
    }

    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, LheError> {
        let level = if a.scale_pending() == b.scale_pending() { a.exec_level().min(b.exec_level()) } else { a.level().min(b.level()) };
        let out = self.backend.add(a, b).map_err(|e| self.tag(e))?;
        self.record(OpKind::Add, level);
        Ok(out)
    }

    pub fn mul(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, LheError> {
        let level = a.level().min(b.level());
        let out = self.backend.mul(a, b).map_err(|e| self.tag(e))?;
        self.record(OpKind::Mul, level);
        Ok(out)
    }

    pub fn cmul(&self, a: &Ciphertext, pt: &Plaintext) -> Result<Ciphertext, LheError> {
        let out = self.backend.cmul(a, pt).map_err(|e| self.tag(e))?;
        self.record(OpKind::CMul, a.level());
        Ok(out)
    }

    pub fn rot(&self, a: &Ciphertext, m: i64) -> Ciphertext {
        let out = self.backend.rot(a, m);
        self.record(OpKind::Rot, a.exec_level());
        out
    }

    pub fn square(&self, a: &Ciphertext) -> Result<Ciphertext, LheError> {
        self.mul(a, a)
    }

    /// `a ⊕ rot(a, m)`
    pub fn rot_add(&self, a: &Ciphertext, m: i64) -> Result<Ciphertext, LheError> {
        let r = self.rot(a, m);
        self.add(a, &r)
    }

    /// Sums the products of `pairs`, the first product initializing the accumulator.
    pub fn dot<'a, I>(&self, pairs: I) -> Result<Option<Ciphertext>, LheError>
    where
        I: IntoIterator<Item = (&'a Ciphertext, &'a Ciphertext)>,
    {
        let mut acc: Option<Ciphertext> = None;
        for (a, b) in pairs {
            let p = self.mul(a, b)?;
            acc = Some(match acc {
                None => p,
                Some(c) => self.add(&c, &p)?,
            });
        }
        Ok(acc)
    }

    /// In-place accumulate, treating `None` as an unvisited zero.
    pub fn accumulate(&self, acc: &mut Option<Ciphertext>, term: Ciphertext) -> Result<(), LheError> {
        *acc = Some(match acc.take() {
            None => term,
            Some(c) => self.add(&c, &term)?,
        });
        Ok(())
    }
}

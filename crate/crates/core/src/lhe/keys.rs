use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ciphertext::{Ciphertext, KeyId, Plaintext};
use super::params::LheParams;
use crate::error::LheError;

/// Additive Gaussian perturbation applied to every primitive output.
#[derive(Debug)]
pub(crate) struct NoiseSource {
    dist: Normal<f64>,
    rng: Mutex<ChaCha8Rng>,
}

impl NoiseSource {
    fn new(sigma: f64, seed: u64) -> Option<Arc<Self>> {
        (sigma > 0.0).then(|| {
            Arc::new(NoiseSource {
                dist: Normal::new(0.0, sigma).expect("sigma validated by LheParams"),
                rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed ^ 0x006e_6f69_7365)),
            })
        })
    }

    pub(crate) fn perturb(&self, slots: &mut [f64]) {
        let mut rng = self.rng.lock().unwrap_or_else(|e| e.into_inner());
        for v in slots {
            *v += self.dist.sample(&mut *rng);
        }
    }
}

pub(crate) fn perturb(noise: &Option<Arc<NoiseSource>>, slots: &mut [f64]) {
    if let Some(n) = noise {
        n.perturb(slots);
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

static KEYGEN_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Generates a key context with a fresh, process-unique identity.
pub fn keygen(params: LheParams) -> KeyContext {
    let n = KEYGEN_COUNTER.fetch_add(1, Ordering::Relaxed);
    let salt: u64 = rand::random();
    KeyContext::build(params, splitmix(salt ^ splitmix(n)))
}

/// Deterministic key generation: the same seed always yields the same key id.
pub fn keygen_seeded(params: LheParams, seed: u64) -> KeyContext {
    KeyContext::build(params, splitmix(seed))
}

/// Secret key material. Only the TEE holds one of these.
#[derive(Debug)]
pub struct KeyContext {
    params: LheParams,
    key: KeyId,
    noise: Option<Arc<NoiseSource>>,
}

/// Public and evaluation key handle: can encrypt and evaluate, never decrypt.
///
/// ```compile_fail
/// use lhecnn::lhe::{keygen, LheParams, Plaintext};
/// let ctx = keygen(LheParams::new(8, 2).unwrap());
/// let pk = ctx.public_key();
/// let ct = pk.encrypt(&Plaintext::zeros(8)).unwrap();
/// let _ = pk.decrypt(&ct);
/// ```
#[derive(Debug, Clone)]
pub struct PublicKey {
    params: LheParams,
    key: KeyId,
    pub(crate) noise: Option<Arc<NoiseSource>>,
}

fn fresh(params: &LheParams, key: KeyId, noise: &Option<Arc<NoiseSource>>, pt: &Plaintext, level: u32) -> Result<Ciphertext, LheError> {
    if pt.len() != params.slot_count() {
        return Err(LheError::LengthMismatch { expected: params.slot_count(), actual: pt.len() });
    }
    let mut slots = pt.slots().to_vec();
    perturb(noise, &mut slots);
    Ok(Ciphertext::from_parts(slots, level, key, false))
}

impl KeyContext {
    fn build(params: LheParams, id: u64) -> Self {
        let noise = NoiseSource::new(params.noise_sigma(), id);
        KeyContext { params, key: KeyId(id), noise }
    }

    pub fn params(&self) -> &LheParams {
        &self.params
    }

    pub fn key_id(&self) -> KeyId {
        self.key
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey { params: self.params, key: self.key, noise: self.noise.clone() }
    }

    pub fn encrypt(&self, pt: &Plaintext) -> Result<Ciphertext, LheError> {
        fresh(&self.params, self.key, &self.noise, pt, self.params.top_level())
    }

    /// Encrypts directly at a chosen level (used to model skipping a level reset).
    pub fn encrypt_at_level(&self, pt: &Plaintext, level: u32) -> Result<Ciphertext, LheError> {
        if level > self.params.top_level() {
            return Err(LheError::InvalidParams(format!("level {level} above top level")));
        }
        fresh(&self.params, self.key, &self.noise, pt, level)
    }

    pub fn decrypt(&self, ct: &Ciphertext) -> Result<Plaintext, LheError> {
        self.check(ct)?;
        Ok(Plaintext::new(ct.slots.to_vec()))
    }

    /// Decrypt and encrypt again, restoring level L-1.
    pub fn reencrypt(&self, ct: &Ciphertext) -> Result<Ciphertext, LheError> {
        self.check(ct)?;
        let mut slots = ct.slots.to_vec();
        perturb(&self.noise, &mut slots);
        Ok(Ciphertext::from_parts(slots, self.params.top_level(), self.key, false))
    }

    fn check(&self, ct: &Ciphertext) -> Result<(), LheError> {
        if ct.key != self.key {
            return Err(LheError::KeyMismatch { expected: self.key.0, actual: ct.key.0 });
        }
        if ct.slots.len() != self.params.slot_count() {
            return Err(LheError::LengthMismatch { expected: self.params.slot_count(), actual: ct.slots.len() });
        }
        Ok(())
    }
}

impl PublicKey {
    pub fn params(&self) -> &LheParams {
        &self.params
    }

    pub fn key_id(&self) -> KeyId {
        self.key
    }

    pub fn encrypt(&self, pt: &Plaintext) -> Result<Ciphertext, LheError> {
        fresh(&self.params, self.key, &self.noise, pt, self.params.top_level())
    }

    /// Key id, S, L and noise sigma; 24 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24);
        out.extend_from_slice(&self.key.0.to_le_bytes());
        out.extend_from_slice(&(self.params.slot_count() as u32).to_le_bytes());
        out.extend_from_slice(&self.params.max_level().to_le_bytes());
        out.extend_from_slice(&self.params.noise_sigma().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LheError> {
        if bytes.len() != 24 {
            return Err(LheError::Decode(format!("public key of {} bytes", bytes.len())));
        }
        let id = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let s = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let l = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let sigma = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let params = LheParams::with_noise(s, l, sigma)?;
        Ok(PublicKey { params, key: KeyId(id), noise: NoiseSource::new(sigma, id) })
    }

    /// Parses a serialized ciphertext produced under this key.
    pub fn decode(&self, bytes: &[u8]) -> Result<Ciphertext, LheError> {
        let ct = Ciphertext::from_bytes(bytes, self.key, self.params.max_level())?;
        if ct.slot_count() != self.params.slot_count() {
            return Err(LheError::LengthMismatch { expected: self.params.slot_count(), actual: ct.slot_count() });
        }
        Ok(ct)
    }
}

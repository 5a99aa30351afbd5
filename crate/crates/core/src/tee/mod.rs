//! Simulated trusted execution environment.
//!
//! [`TeeService`] is the only holder of a [`KeyContext`]. Everything that
//! crosses the boundary goes through the wire encoding so that byte counts
//! are the real serialized sizes. Requests are served one at a time.

mod socket;

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::backward::Reencrypt;
use crate::error::{Error, Result};
use crate::lhe::{keygen, keygen_seeded, Ciphertext, KeyContext, LheParams, Plaintext, PublicKey};
use crate::meter::{OpKind, OpMeter};
use crate::oracle::softmax_cross_entropy;
use crate::packing::{PackedTensor, TensorLayout};

pub use socket::{serve_connection, SocketServer, TeeClient};

/// Scope under which TEE-side primitives are metered.
pub const TEE_SCOPE: &str = "tee";

/// Boundary counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeeCounters {
    pub attestations: u64,
    pub reencrypt_calls: u64,
    /// Ciphertexts re-encrypted through `reencrypt_batch`.
    pub reencrypted: u64,
    pub loss_head_calls: u64,
    /// Gradient ciphertexts encrypted by the loss head.
    pub loss_head_outputs: u64,
    pub decrypt_calls: u64,
    pub cts_in: u64,
    pub cts_out: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

impl TeeCounters {
    /// Level resets handed back to the REE: re-encryptions plus loss-head outputs.
    pub fn level_resets(&self) -> u64 {
        self.reencrypted + self.loss_head_outputs
    }

    pub fn since(&self, earlier: &TeeCounters) -> TeeCounters {
        TeeCounters {
            attestations: self.attestations - earlier.attestations,
            reencrypt_calls: self.reencrypt_calls - earlier.reencrypt_calls,
            reencrypted: self.reencrypted - earlier.reencrypted,
            loss_head_calls: self.loss_head_calls - earlier.loss_head_calls,
            loss_head_outputs: self.loss_head_outputs - earlier.loss_head_outputs,
            decrypt_calls: self.decrypt_calls - earlier.decrypt_calls,
            cts_in: self.cts_in - earlier.cts_in,
            cts_out: self.cts_out - earlier.cts_out,
            bytes_in: self.bytes_in - earlier.bytes_in,
            bytes_out: self.bytes_out - earlier.bytes_out,
        }
    }
}

#[derive(Debug, Default)]
struct State {
    registry: BTreeSet<String>,
    counters: TeeCounters,
    log: Vec<String>,
}

/// Result of the plaintext loss head.
#[derive(Debug, Clone)]
pub struct LossHeadOutput {
    pub loss: f64,
    /// Images with a label, i.e. the real batch size.
    pub batch: usize,
    pub grads: PackedTensor,
}

#[derive(Debug)]
pub struct TeeService {
    key: KeyContext,
    state: Mutex<State>,
    meter: Option<Arc<OpMeter>>,
}

impl TeeService {
    pub fn new(params: LheParams) -> Self {
        Self::from_key(keygen(params))
    }

    pub fn with_seed(params: LheParams, seed: u64) -> Self {
        Self::from_key(keygen_seeded(params, seed))
    }

    fn from_key(key: KeyContext) -> Self {
        TeeService { key, state: Mutex::new(State::default()), meter: None }
    }

    /// Also record TEE-side encrypt/decrypt/re-encrypt primitives.
    pub fn with_meter(mut self, meter: Arc<OpMeter>) -> Self {
        self.meter = Some(meter);
        self
    }

    pub fn params(&self) -> &LheParams {
        self.key.params()
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public_key()
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn record(&self, op: OpKind, level: u32, times: usize) {
        if let Some(m) = &self.meter {
            for _ in 0..times {
                m.record(TEE_SCOPE, op, level);
            }
        }
    }

    /// Registers `party` and hands out the public key. Idempotent.
    pub fn attest_and_provision(&self, party: &str) -> PublicKey {
        let mut st = self.lock();
        st.counters.attestations += 1;
        if st.registry.insert(party.to_string()) {
            st.log.push(format!("attested {party}"));
        }
        self.key.public_key()
    }

    pub fn is_attested(&self, party: &str) -> bool {
        self.lock().registry.contains(party)
    }

    pub fn registry_len(&self) -> usize {
        self.lock().registry.len()
    }

    pub fn counters(&self) -> TeeCounters {
        self.lock().counters
    }

    pub fn log(&self) -> Vec<String> {
        self.lock().log.clone()
    }

    /// A [`Reencrypt`] handle bound to an attested party.
    pub fn handle(self: &Arc<Self>, party: &str) -> Result<TeeHandle> {
        self.check_party(&self.lock(), party)?;
        Ok(TeeHandle { tee: self.clone(), party: party.to_string() })
    }

    fn check_party(&self, st: &State, party: &str) -> Result<()> {
        if st.registry.contains(party) {
            Ok(())
        } else {
            Err(Error::Tee(format!("party {party:?} is not attested")))
        }
    }

    fn receive(&self, st: &mut State, cts: &[Ciphertext]) -> Result<Vec<Ciphertext>> {
        let mut out = Vec::with_capacity(cts.len());
        for c in cts {
            let bytes = c.to_bytes();
            st.counters.cts_in += 1;
            st.counters.bytes_in += bytes.len() as u64;
            out.push(Ciphertext::from_bytes(&bytes, self.key.key_id(), self.params().max_level())?);
        }
        Ok(out)
    }

    fn send(&self, st: &mut State, cts: Vec<Ciphertext>) -> Result<Vec<Ciphertext>> {
        let pk = self.key.public_key();
        let mut out = Vec::with_capacity(cts.len());
        for c in cts {
            let bytes = c.to_bytes();
            st.counters.cts_out += 1;
            st.counters.bytes_out += bytes.len() as u64;
            out.push(pk.decode(&bytes)?);
        }
        Ok(out)
    }

    /// Takes every ciphertext back to level L−1.
    pub fn reencrypt_batch(&self, party: &str, cts: &[Ciphertext]) -> Result<Vec<Ciphertext>> {
        let mut st = self.lock();
        self.check_party(&st, party)?;
        if cts.is_empty() {
            return Ok(vec![]);
        }
        let inside = self.receive(&mut st, cts)?;
        let fresh = inside.iter().map(|c| self.key.reencrypt(c)).collect::<Result<Vec<_>, _>>()?;
        for c in &inside {
            self.record(OpKind::Reencrypt, c.level(), 1);
        }
        st.counters.reencrypt_calls += 1;
        st.counters.reencrypted += cts.len() as u64;
        self.send(&mut st, fresh)
    }

    /// Softmax cross-entropy over the decrypted logits. `labels` holds the
    /// label of image j in slot j, negative for empty image slots. Gradients
    /// (softmax − one-hot, zero for empty slots) come back in the logits'
    /// layout at `level`, the top level by default.
    pub fn loss_head(
        &self,
        party: &str,
        logits: &PackedTensor,
        labels: &Ciphertext,
        classes: usize,
        level: Option<u32>,
    ) -> Result<LossHeadOutput> {
        let mut st = self.lock();
        self.check_party(&st, party)?;
        let n = match &logits.layout {
            TensorLayout::Type1 { map, n } if map.features() == classes => *n,
            TensorLayout::Type2 { features, n } if *features == classes => *n,
            other => return Err(Error::Layout { expected: format!("fc output with {classes} classes"), actual: other.tag().into() }),
        };
        let mut inside = self.receive(&mut st, &logits.cts)?;
        inside.extend(self.receive(&mut st, std::slice::from_ref(labels))?);
        let plain: Vec<Vec<f64>> = inside.iter().map(|c| self.key.decrypt(c).map(Plaintext::into_vec)).collect::<Result<_, _>>()?;
        self.record(OpKind::Decrypt, 0, plain.len());
        let (vals, label_slots) = plain.split_at(logits.cts.len());
        let s = self.params().slot_count();
        let mut out = vec![vec![0.0; s]; logits.cts.len()];
        let (mut loss, mut batch) = (0.0, 0usize);
        for j in 0..n {
            let raw = label_slots[0][j].round();
            if raw < 0.0 {
                continue;
            }
            if raw >= classes as f64 {
                return Err(Error::Tee(format!("label {raw} of image {j} outside [0, {classes})")));
            }
            let logit: Vec<f64> = (0..classes)
                .map(|w| {
                    let (c, slot) = logits.layout.fl_slot(w, j);
                    vals[c][slot]
                })
                .collect();
            let (l, g) = softmax_cross_entropy(&logit, raw as usize);
            loss += l;
            batch += 1;
            for (w, gw) in g.into_iter().enumerate() {
                match &logits.layout {
                    TensorLayout::Type2 { .. } => {
                        for b in 0..s / n {
                            out[w][b * n + j] = gw;
                        }
                    }
                    _ => {
                        let (c, slot) = logits.layout.fl_slot(w, j);
                        out[c][slot] = gw;
                    }
                }
            }
        }
        if batch == 0 {
            return Err(Error::Tee("loss head received no labelled images".into()));
        }
        let level = level.unwrap_or(self.params().top_level());
        let cts = out.into_iter().map(|v| self.key.encrypt_at_level(&Plaintext::new(v), level)).collect::<Result<Vec<_>, _>>()?;
        self.record(OpKind::Encrypt, level, cts.len());
        st.counters.loss_head_calls += 1;
        st.counters.loss_head_outputs += cts.len() as u64;
        let cts = self.send(&mut st, cts)?;
        Ok(LossHeadOutput { loss: loss / batch as f64, batch, grads: PackedTensor::new(logits.layout.clone(), cts)? })
    }

    /// Decrypts results for the data provider that owns them.
    pub fn decrypt_for(&self, party: &str, cts: &[Ciphertext]) -> Result<Vec<Vec<f64>>> {
        let mut st = self.lock();
        self.check_party(&st, party)?;
        let inside = self.receive(&mut st, cts)?;
        st.counters.decrypt_calls += 1;
        self.record(OpKind::Decrypt, 0, inside.len());
        Ok(inside.iter().map(|c| self.key.decrypt(c).map(Plaintext::into_vec)).collect::<Result<_, _>>()?)
    }

    /// Per-image FC outputs (e.g. logits) decrypted for `party`.
    pub fn read_outputs(&self, party: &str, t: &PackedTensor, images: usize) -> Result<Vec<Vec<f64>>> {
        let features = match &t.layout {
            TensorLayout::Type1 { map, .. } => map.features(),
            TensorLayout::Type2 { features, .. } => *features,
            other => return Err(Error::Layout { expected: "fc output".into(), actual: other.tag().into() }),
        };
        let vals = self.decrypt_for(party, &t.cts)?;
        Ok((0..images)
            .map(|j| {
                (0..features)
                    .map(|w| {
                        let (c, slot) = t.layout.fl_slot(w, j);
                        vals[c][slot]
                    })
                    .collect()
            })
            .collect())
    }
}

/// Labels as the loss head expects them: slot j = label, −1 past the batch.
pub fn label_vector(labels: &[usize], n: usize, slots: usize) -> Result<Plaintext> {
    if labels.len() > n {
        return Err(Error::Shape(format!("{} labels for n = {n}", labels.len())));
    }
    let mut v = vec![-1.0; slots];
    v[n..].fill(0.0);
    for (j, &l) in labels.iter().enumerate() {
        v[j] = l as f64;
    }
    Ok(Plaintext::new(v))
}

/// Party-bound access to a shared [`TeeService`].
#[derive(Debug, Clone)]
pub struct TeeHandle {
    tee: Arc<TeeService>,
    party: String,
}

impl TeeHandle {
    pub fn service(&self) -> &Arc<TeeService> {
        &self.tee
    }

    pub fn party(&self) -> &str {
        &self.party
    }

    pub fn loss_head(&self, logits: &PackedTensor, labels: &Ciphertext, classes: usize, level: Option<u32>) -> Result<LossHeadOutput> {
        self.tee.loss_head(&self.party, logits, labels, classes, level)
    }
}

impl Reencrypt for TeeHandle {
    fn reencrypt_batch(&self, cts: &[Ciphertext]) -> Result<Vec<Ciphertext>> {
        self.tee.reencrypt_batch(&self.party, cts)
    }
}

#[cfg(test)]
mod tests;

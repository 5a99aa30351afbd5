//! Sessions: provider onboarding, encrypted inference and multi-epoch
//! refining with TEE interaction, plus on-disk session state.

mod store;

use std::sync::Arc;

use crate::backward::{backward_update, packed_counts, BackwardReport, Reencrypt, ReencryptPoint, Schedule};
use crate::error::{Error, Result};
use crate::forward::{encrypt_batch, encrypt_model, forward_pass, EncryptedModel};
use crate::geometry::CnnConfig;
use crate::lhe::{Ciphertext, Evaluator, LheParams, PublicKey};
use crate::meter::{CostTable, OpMeter, OpReport};
use crate::oracle::PlainModel;
use crate::packing::{PackedTensor, TensorLayout, WeightKind};
use crate::plan::{NetworkPlan, RMode};
use crate::tee::{label_vector, LossHeadOutput, TeeClient, TeeHandle};

pub use store::{load_session, save_session, session_config, MANIFEST};

/// What the REE may ask of the TEE.
pub trait TeeLink: Reencrypt {
    fn public_key(&self) -> PublicKey;
    fn loss_head(&self, logits: &PackedTensor, labels: &Ciphertext, classes: usize, level: Option<u32>) -> Result<LossHeadOutput>;
}

impl TeeLink for TeeHandle {
    fn public_key(&self) -> PublicKey {
        self.service().public_key()
    }

    fn loss_head(&self, logits: &PackedTensor, labels: &Ciphertext, classes: usize, level: Option<u32>) -> Result<LossHeadOutput> {
        TeeHandle::loss_head(self, logits, labels, classes, level)
    }
}

impl TeeLink for TeeClient {
    fn public_key(&self) -> PublicKey {
        TeeClient::public_key(self).clone()
    }

    fn loss_head(&self, logits: &PackedTensor, labels: &Ciphertext, classes: usize, level: Option<u32>) -> Result<LossHeadOutput> {
        TeeClient::loss_head(self, logits, labels, classes, level)
    }
}

/// Encrypts plaintext parameters under the provisioned public key.
pub struct ModelProvider {
    ev: Evaluator,
}

impl ModelProvider {
    pub fn new(pk: PublicKey) -> Self {
        ModelProvider { ev: Evaluator::new(pk, Arc::new(OpMeter::new())) }
    }

    pub fn encrypt(&self, plan: &NetworkPlan, model: &PlainModel) -> Result<EncryptedModel> {
        encrypt_model(&self.ev, plan, model)
    }
}

/// One packed batch of at most n images with its encrypted labels.
#[derive(Debug, Clone)]
pub struct EncryptedBatch {
    pub inputs: PackedTensor,
    pub labels: Ciphertext,
    pub count: usize,
}

/// Encrypts images and labels under the provisioned public key.
pub struct DataProvider {
    ev: Evaluator,
}

impl DataProvider {
    pub fn new(pk: PublicKey) -> Self {
        DataProvider { ev: Evaluator::new(pk, Arc::new(OpMeter::new())) }
    }

    pub fn encrypt_inputs(&self, plan: &NetworkPlan, images: &[Vec<f64>]) -> Result<PackedTensor> {
        if images.iter().any(|im| im.len() != plan.cfg.image_len()) {
            return Err(Error::Shape(format!("images must have {} pixels", plan.cfg.image_len())));
        }
        encrypt_batch(&self.ev, plan, images)
    }

    pub fn encrypt_batch(&self, plan: &NetworkPlan, images: &[Vec<f64>], labels: &[usize]) -> Result<EncryptedBatch> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!("{} images, {} labels", images.len(), labels.len())));
        }
        let inputs = self.encrypt_inputs(plan, images)?;
        let lv = label_vector(labels, plan.cfg.n(), self.ev.slots())?;
        let labels_ct = self.ev.encrypt(&lv)?;
        Ok(EncryptedBatch { inputs, labels: labels_ct, count: images.len() })
    }

    /// Splits a labelled set into batches of exactly n images.
    pub fn encrypt_dataset(&self, plan: &NetworkPlan, images: &[Vec<f64>], labels: &[usize]) -> Result<Vec<EncryptedBatch>> {
        let n = plan.cfg.n();
        if images.is_empty() || !images.len().is_multiple_of(n) {
            return Err(Error::Config(format!("refining needs a multiple of n = {n} images, got {}", images.len())));
        }
        images.chunks(n).zip(labels.chunks(n)).map(|(x, y)| self.encrypt_batch(plan, x, y)).collect()
    }
}

/// Per-round refining log entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub epoch: usize,
    pub round: usize,
    pub loss: f64,
    pub images: usize,
    /// Ciphertexts sent for re-encryption, loss-head outputs included.
    pub reencrypted: usize,
    pub refreshes: usize,
}

/// TEE traffic seen from the REE side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TeeTraffic {
    pub loss_head_calls: usize,
    pub loss_head_outputs: usize,
    pub reencrypt_calls: usize,
    pub reencrypted: usize,
}

impl TeeTraffic {
    /// Ciphertexts whose level the TEE reset.
    pub fn level_resets(&self) -> usize {
        self.loss_head_outputs + self.reencrypted
    }

    fn add(&mut self, logits: usize, back: &BackwardReport) {
        self.loss_head_calls += 1;
        self.loss_head_outputs += logits;
        self.reencrypt_calls += back.points.len();
        self.reencrypted += back.reencryptions();
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub rounds: Vec<RoundLog>,
    pub report: OpReport,
    pub tee: TeeTraffic,
}

impl RefineOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.loss).collect()
    }
}

/// An encrypted model bound to a TEE.
pub struct Session {
    plan: NetworkPlan,
    ev: Evaluator,
    model: EncryptedModel,
    tee: Arc<dyn TeeLink>,
    schedule: Schedule,
    rounds_done: usize,
    cost: CostTable,
    input_layout: TensorLayout,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("plan", &self.plan).field("rounds_done", &self.rounds_done).finish_non_exhaustive()
    }
}

/// Opens a session over uploaded encrypted parameters.
pub fn load_base_model(tee: Arc<dyn TeeLink>, cfg: &CnnConfig, mode: RMode, model: EncryptedModel) -> Result<Session> {
    let pk = tee.public_key();
    let plan = NetworkPlan::new(cfg, pk.params(), mode)?;
    validate_model(&plan, &pk, &model)?;
    // the input layout is fixed by the plan; probe it with one blank image
    let probe = vec![vec![0.0; cfg.image_len()]];
    let input_layout = encrypt_batch(&Evaluator::new(pk.clone(), Arc::new(OpMeter::new())), &plan, &probe)?.layout;
    let ev = Evaluator::new(pk, Arc::new(OpMeter::new()));
    Ok(Session { plan, ev, model, tee, schedule: Schedule::default(), rounds_done: 0, cost: CostTable::reference(), input_layout })
}

fn mismatch(what: String) -> Error {
    Error::Layout { expected: "parameters matching the session plan".into(), actual: what }
}

/// Structural check of uploaded parameters against the plan.
pub fn validate_model(plan: &NetworkPlan, pk: &PublicKey, model: &EncryptedModel) -> Result<()> {
    let cfg = &plan.cfg;
    if model.filters.len() != cfg.c() || model.weights.len() != cfg.f() {
        return Err(mismatch(format!("{} conv and {} fc parameter sets", model.filters.len(), model.weights.len())));
    }
    for (l, f) in model.filters.iter().enumerate() {
        let spec = &cfg.conv()[l];
        if f.packing != plan.packings[l] {
            return Err(mismatch(format!("{} filters tagged {}", plan.conv_scope(l), f.packing.tag())));
        }
        let groups_ok = f.filters == spec.filters && f.channels == spec.channels && f.side == spec.filter_side;
        let count = f.out_groups * f.in_groups * f.side * f.side;
        if !groups_ok || f.slots != plan.slot_layout(l) || f.cts.len() != count {
            return Err(mismatch(format!("{} filters of shape {}x{}x{}", plan.conv_scope(l), f.filters, f.channels, f.side)));
        }
    }
    for (l, w) in model.weights.iter().enumerate() {
        let spec = &cfg.fc()[l];
        if w.kind != plan.fc_kind(l) {
            return Err(mismatch(format!("{} weights tagged {}", plan.fc_scope(l), w.kind.tag())));
        }
        if w.outputs != spec.outputs || w.inputs != spec.inputs || w.n != cfg.n() || w.cts.len() != w.rows * w.cols {
            return Err(mismatch(format!("{} weights {}x{}", plan.fc_scope(l), w.outputs, w.inputs)));
        }
    }
    let depth = cfg.forward_depth();
    for c in model.ciphertexts() {
        if c.key_id() != pk.key_id() {
            return Err(Error::Lhe(crate::error::LheError::KeyMismatch { expected: pk.key_id().raw(), actual: c.key_id().raw() }));
        }
        if c.slot_count() != pk.params().slot_count() {
            return Err(mismatch(format!("ciphertext with {} slots", c.slot_count())));
        }
        if c.level() < depth {
            return Err(Error::Config(format!("parameter at level {} cannot serve a forward pass of depth {depth}", c.level())));
        }
    }
    Ok(())
}

impl Session {
    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    pub fn params(&self) -> &LheParams {
        self.ev.params()
    }

    pub fn model(&self) -> &EncryptedModel {
        &self.model
    }

    pub fn meter(&self) -> &Arc<OpMeter> {
        self.ev.meter()
    }

    pub fn public_key(&self) -> &PublicKey {
        self.ev.public_key()
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds_done
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_cost_table(mut self, cost: CostTable) -> Self {
        self.cost = cost;
        self
    }

    /// Swaps in new parameters; the old ones stay if validation fails.
    pub fn reload(&mut self, model: EncryptedModel) -> Result<()> {
        validate_model(&self.plan, self.ev.public_key(), &model)?;
        self.model = model;
        Ok(())
    }

    fn report_since(&self, before: &crate::meter::MeterSnapshot, images: usize) -> OpReport {
        OpReport::from_snapshot(&self.meter().snapshot().since(before), &self.cost, images as u64)
    }

    /// Forward pass only; the report covers this call.
    pub fn infer(&self, inputs: &PackedTensor) -> Result<(PackedTensor, OpReport)> {
        if inputs.layout != self.input_layout {
            return Err(Error::Layout { expected: "session input layout".into(), actual: inputs.tag().into() });
        }
        let before = self.meter().snapshot();
        let cache = forward_pass(&self.ev, &self.plan, &self.model, inputs.clone())?;
        Ok((cache.logits, self.report_since(&before, self.plan.cfg.n())))
    }

    /// One round on one batch.
    pub fn refine_round(&mut self, batch: &EncryptedBatch, lr: f64) -> Result<(f64, BackwardReport, usize)> {
        if batch.count == 0 || batch.count > self.plan.cfg.n() {
            return Err(Error::Config(format!("batch of {} images for n = {}", batch.count, self.plan.cfg.n())));
        }
        let cache = forward_pass(&self.ev, &self.plan, &self.model, batch.inputs.clone())?;
        let level = (!self.schedule.includes(ReencryptPoint::LossHead)).then(|| cache.logits.min_level());
        let head = self.tee.loss_head(&cache.logits, &batch.labels, self.plan.cfg.classes(), level)?;
        if head.batch != batch.count {
            return Err(Error::Tee(format!("loss head counted {} labelled images, batch has {}", head.batch, batch.count)));
        }
        let outputs = head.grads.len();
        // work on a copy so a failed round leaves the session untouched
        let mut model = self.model.clone();
        let report =
            backward_update(&self.ev, &self.plan, &mut model, &cache, head.grads, self.tee.as_ref(), lr, head.batch, &self.schedule)?;
        self.model = model;
        self.rounds_done += 1;
        Ok((head.loss, report, outputs))
    }

    /// `epochs` passes over all batches in order.
    pub fn refine(&mut self, batches: &[EncryptedBatch], lr: f64, epochs: usize) -> Result<RefineOutcome> {
        let n = self.plan.cfg.n();
        if batches.iter().any(|b| b.count != n) {
            return Err(Error::Config(format!("every refining batch must hold exactly n = {n} images")));
        }
        let before = self.meter().snapshot();
        let mut rounds = Vec::new();
        let mut tee = TeeTraffic::default();
        for epoch in 0..epochs {
            for b in batches {
                let (loss, back, outputs) = self.refine_round(b, lr)?;
                tee.add(outputs, &back);
                let refreshes = back.points.iter().filter(|p| matches!(p, ReencryptPoint::Refresh(_))).count();
                rounds.push(RoundLog {
                    epoch,
                    round: rounds.len(),
                    loss,
                    images: b.count,
                    reencrypted: outputs + back.reencryptions(),
                    refreshes,
                });
            }
        }
        let images = rounds.iter().map(|r| r.images).sum::<usize>().max(1);
        Ok(RefineOutcome { rounds, report: self.report_since(&before, images), tee })
    }

    /// Loss-head outputs plus packed gradients: the per-round re-encryption
    /// count when no intermediate refresh is needed.
    pub fn closed_form_reencryptions(&self) -> usize {
        let cfg = &self.plan.cfg;
        let logits = match self.plan.fc_kind(cfg.f() - 1) {
            WeightKind::TypeI => cfg.classes(),
            WeightKind::TypeII => (cfg.classes() * cfg.n()).div_ceil(self.params().slot_count()),
        };
        logits + packed_counts(&self.plan).iter().map(|c| c.1).sum::<usize>()
    }
}

//! Backward propagation, gradient aggregation and TEE-assisted noise removal.
//!
//! Gradients flow as [`GradTensor`]s mirroring the forward layouts. Positions
//! that no output touches stay `None` and count as zero. Parameter gradients
//! are aggregated over the n images into one slot offset per gradient, packed
//! with selectors, re-encrypted, unpacked and added to the parameters.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{EncryptedModel, ForwardCache};
use crate::geometry::{ConvPacking, ConvSpec};
use crate::lhe::{Ciphertext, Evaluator};
use crate::packing::{
    aggregate, block_rotate_sum, compute_rotation_plan, make_selector_blocks, spread, PackedFilters, PackedTensor, PackedWeights,
    TensorLayout, WeightKind,
};
use crate::plan::NetworkPlan;

/// Anything that can take ciphertexts back to the top level.
pub trait Reencrypt: Send + Sync {
    fn reencrypt_batch(&self, cts: &[Ciphertext]) -> Result<Vec<Ciphertext>>;
}

/// Gradient counterpart of a [`PackedTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradTensor {
    pub layout: TensorLayout,
    pub cts: Vec<Option<Ciphertext>>,
}

impl GradTensor {
    pub fn new(layout: TensorLayout, cts: Vec<Option<Ciphertext>>) -> Result<Self> {
        if cts.len() != layout.ciphertexts() {
            return Err(Error::Shape(format!("{} gradient needs {} ciphertexts, got {}", layout.tag(), layout.ciphertexts(), cts.len())));
        }
        Ok(GradTensor { layout, cts })
    }

    pub fn from_packed(t: PackedTensor) -> Self {
        GradTensor { layout: t.layout, cts: t.cts.into_iter().map(Some).collect() }
    }

    pub fn tag(&self) -> &'static str {
        self.layout.tag()
    }

    /// Lowest level over present ciphertexts; None when all are absent.
    pub fn min_level(&self) -> Option<u32> {
        self.cts.iter().flatten().map(|c| c.level()).min()
    }

    pub fn present(&self) -> usize {
        self.cts.iter().flatten().count()
    }

    fn relayout(self, layout: TensorLayout) -> Result<Self> {
        GradTensor::new(layout, self.cts)
    }
}

/// A parameterised layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamLayer {
    Conv(usize),
    Fc(usize),
}

impl fmt::Display for ParamLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamLayer::Conv(l) => write!(f, "CL{}", l + 1),
            ParamLayer::Fc(l) => write!(f, "FL{}", l + 1),
        }
    }
}

/// Where a refining round sends ciphertexts to the TEE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReencryptPoint {
    /// Output gradients from the loss head arrive at the top level.
    LossHead,
    /// Packed parameter gradients of a layer.
    Pack(ParamLayer),
    /// Output gradients of a layer, before its activation derivative.
    Refresh(ParamLayer),
}

impl fmt::Display for ReencryptPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReencryptPoint::LossHead => write!(f, "loss-head"),
            ReencryptPoint::Pack(l) => write!(f, "pack:{l}"),
            ReencryptPoint::Refresh(l) => write!(f, "refresh:{l}"),
        }
    }
}

/// Re-encryption policy for a round.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Schedule {
    /// Loss head and every pack; refresh output gradients when they would
    /// otherwise run out of levels.
    #[default]
    Adaptive,
    /// Exactly these points and nothing else.
    Fixed(Vec<ReencryptPoint>),
}

impl Schedule {
    pub fn includes(&self, p: ReencryptPoint) -> bool {
        match self {
            Schedule::Adaptive => !matches!(p, ReencryptPoint::Refresh(_)),
            Schedule::Fixed(points) => points.contains(&p),
        }
    }
}

/// One aggregated parameter gradient: the value sits at slot offset
/// `idx mod n` of the first `blocks` blocks of `ct`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGradient {
    pub param: usize,
    pub idx: usize,
    pub blocks: usize,
    pub ct: Ciphertext,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawGradients {
    pub layer: ParamLayer,
    pub n: usize,
    pub grads: Vec<RawGradient>,
}

impl RawGradients {
    /// Number of packed ciphertexts these gradients fold into.
    pub fn packed_count(&self) -> usize {
        self.grads.iter().map(|g| g.idx / self.n).max().map_or(0, |k| k + 1)
    }
}

fn sum_terms(ev: &Evaluator, terms: impl Iterator<Item = Result<Ciphertext>>) -> Result<Option<Ciphertext>> {
    let mut acc = None;
    for t in terms {
        ev.accumulate(&mut acc, t?)?;
    }
    Ok(acc)
}

/// Square-activation derivative: δ = g ⊗ (z ⊕ z).
pub fn activation_grad(ev: &Evaluator, out_grads: &GradTensor, preact: &PackedTensor) -> Result<GradTensor> {
    if out_grads.layout != preact.layout {
        return Err(Error::Layout { expected: preact.tag().into(), actual: out_grads.tag().into() });
    }
    let cts = out_grads
        .cts
        .par_iter()
        .zip(&preact.cts)
        .map(|(g, z)| -> Result<Option<Ciphertext>> {
            match g {
                None => Ok(None),
                Some(g) => Ok(Some(ev.mul(g, &ev.add(z, z)?)?)),
            }
        })
        .collect::<Result<_>>()?;
    GradTensor::new(out_grads.layout.clone(), cts)
}

/// Input gradients of a Type I FC layer; no rotations.
pub fn fl_backward_type1(ev: &Evaluator, delta: &GradTensor, weights: &PackedWeights) -> Result<GradTensor> {
    let n = match &delta.layout {
        TensorLayout::Type2 { features, n } if *features == weights.outputs => *n,
        other => return Err(Error::Layout { expected: "fl-type2".into(), actual: other.tag().into() }),
    };
    if weights.kind != WeightKind::TypeI {
        return Err(Error::Layout { expected: "fl-type1".into(), actual: weights.kind.tag().into() });
    }
    let map = weights.map.clone().expect("type I weights carry a feature map");
    let cts = (0..weights.cols)
        .into_par_iter()
        .map(|j| sum_terms(ev, (0..weights.rows).filter_map(|i| delta.cts[i].as_ref().map(|d| Ok(ev.mul(d, weights.get(i, j))?)))))
        .collect::<Result<_>>()?;
    GradTensor::new(TensorLayout::Type1 { map, n }, cts)
}

/// Input gradients of a Type II FC layer: product sums, then a rotate-sum
/// over blocks so each input gradient is replicated.
pub fn fl_backward_type2(ev: &Evaluator, delta: &GradTensor, weights: &PackedWeights) -> Result<GradTensor> {
    let n = match &delta.layout {
        TensorLayout::Type1 { n, map } if map.cts == weights.cols => *n,
        other => return Err(Error::Layout { expected: "fl-type1".into(), actual: other.tag().into() }),
    };
    if weights.kind != WeightKind::TypeII {
        return Err(Error::Layout { expected: "fl-type2".into(), actual: weights.kind.tag().into() });
    }
    let cts = (0..weights.rows)
        .into_par_iter()
        .map(|i| -> Result<Option<Ciphertext>> {
            let s = sum_terms(ev, (0..weights.cols).filter_map(|j| delta.cts[j].as_ref().map(|d| Ok(ev.mul(d, weights.get(i, j))?))))?;
            s.map(|c| block_rotate_sum(ev, &c, n).map_err(Error::from)).transpose()
        })
        .collect::<Result<_>>()?;
    GradTensor::new(TensorLayout::Type2 { features: weights.inputs, n }, cts)
}

fn blocks_in_ct(map: &crate::packing::FeatureMap, ct: usize) -> usize {
    map.entries.iter().filter(|e| e.0 == ct).map(|e| e.1 + 1).max().unwrap_or(0)
}

/// Per-weight gradients summed over the n images of the batch.
pub fn fl_weight_gradients(
    ev: &Evaluator,
    layer: usize,
    delta: &GradTensor,
    inputs: &PackedTensor,
    weights: &PackedWeights,
) -> Result<RawGradients> {
    let n = weights.n;
    let jobs: Vec<(usize, usize, usize, usize, usize)> = match weights.kind {
        WeightKind::TypeI => {
            let map = weights.map.as_ref().expect("type I weights carry a feature map");
            (0..weights.rows)
                .flat_map(|i| (0..weights.cols).map(move |j| (i, j)))
                .map(|(i, j)| (i * weights.cols + j, i * weights.cols + j, blocks_in_ct(map, j), i, j))
                .collect()
        }
        WeightKind::TypeII => {
            let per = ev.slots() / n;
            (0..weights.rows)
                .flat_map(|i| (0..weights.cols).map(move |j| (i, j)))
                .map(|(i, j)| (i * weights.cols + j, j * weights.inputs + i, per.min(weights.outputs - j * per), j, i))
                .collect()
        }
    };
    // (param, idx, blocks, delta ct, input ct)
    let grads = jobs
        .par_iter()
        .filter_map(|&(param, idx, blocks, d, x)| {
            delta.cts[d].as_ref().map(|dc| -> Result<RawGradient> {
                let plan = compute_rotation_plan(idx % n, n)?;
                let ct = aggregate(ev, &ev.mul(dc, &inputs.cts[x])?, &plan)?;
                Ok(RawGradient { param, idx, blocks, ct })
            })
        })
        .collect::<Result<_>>()?;
    Ok(RawGradients { layer: ParamLayer::Fc(layer), n, grads })
}

fn conv_grid(layout: &TensorLayout) -> Result<(ConvPacking, usize, usize)> {
    match layout {
        TensorLayout::Conv { packing, channels, side, .. } => Ok((*packing, *channels, *side)),
        other => Err(Error::Layout { expected: "conv-basic".into(), actual: other.tag().into() }),
    }
}

/// Input gradients of a basic-layout conv layer.
pub fn conv_backward(ev: &Evaluator, spec: &ConvSpec, delta: &GradTensor, filters: &PackedFilters, in_side: usize) -> Result<GradTensor> {
    let (packing, channels, out_side) = conv_grid(&delta.layout)?;
    if packing != ConvPacking::Basic || filters.packing != ConvPacking::Basic {
        return Err(Error::Layout { expected: "conv-basic".into(), actual: filters.packing.tag().into() });
    }
    if channels != spec.filters {
        return Err(Error::Shape(format!("{channels} gradient channels for {} filters", spec.filters)));
    }
    let (g, d) = (spec.filter_side, spec.stride);
    let slots = filters.slots;
    let out_layout = TensorLayout::Conv { packing, channels: spec.channels, groups: spec.channels, side: in_side, slots };
    let jobs: Vec<(usize, usize, usize)> =
        (0..spec.channels).flat_map(|i| (0..in_side).flat_map(move |u| (0..in_side).map(move |v| (i, u, v)))).collect();
    // (u', x) pairs with u' = d·u + x
    let taps =
        |p: usize| (0..g).filter(move |&x| p >= x && (p - x).is_multiple_of(d) && (p - x) / d < out_side).map(move |x| ((p - x) / d, x));
    let cts = jobs
        .par_iter()
        .map(|&(i, up, vp)| {
            let terms = (0..spec.filters).flat_map(|k| taps(up).flat_map(move |(u, x)| taps(vp).map(move |(v, y)| (k, u, v, x, y))));
            sum_terms(
                ev,
                terms.filter_map(|(k, u, v, x, y)| {
                    delta.cts[delta.layout.conv_index(k, u, v)].as_ref().map(|dc| Ok(ev.mul(dc, filters.get(k, i, x, y))?))
                }),
            )
        })
        .collect::<Result<_>>()?;
    GradTensor::new(out_layout, cts)
}

/// Per-kernel-entry gradients summed over images and all output positions.
pub fn conv_kernel_gradients(
    ev: &Evaluator,
    layer: usize,
    spec: &ConvSpec,
    inputs: &PackedTensor,
    delta: &GradTensor,
    cells: usize,
) -> Result<RawGradients> {
    let (_, _, out_side) = conv_grid(&delta.layout)?;
    let n = match &inputs.layout {
        TensorLayout::Conv { slots, .. } => slots.n,
        other => return Err(Error::Layout { expected: "conv-basic".into(), actual: other.tag().into() }),
    };
    let (e, a, g, d) = (spec.filters, spec.channels, spec.filter_side, spec.stride);
    let jobs: Vec<(usize, usize, usize, usize)> =
        (0..e).flat_map(|k| (0..a).flat_map(move |i| (0..g).flat_map(move |x| (0..g).map(move |y| (k, i, x, y))))).collect();
    let grads: Vec<Option<RawGradient>> = jobs
        .par_iter()
        .map(|&(k, i, x, y)| -> Result<Option<RawGradient>> {
            let terms = (0..out_side).flat_map(|u| (0..out_side).map(move |v| (u, v)));
            let s = sum_terms(
                ev,
                terms.filter_map(|(u, v)| {
                    delta.cts[delta.layout.conv_index(k, u, v)]
                        .as_ref()
                        .map(|dc| Ok(ev.mul(&inputs.cts[inputs.layout.conv_index(i, d * u + x, d * v + y)], dc)?))
                }),
            )?;
            let Some(s) = s else { return Ok(None) };
            let idx = ((k * a + i) * g + x) * g + y;
            let plan = compute_rotation_plan(idx % n, n)?;
            let ct = aggregate(ev, &block_rotate_sum(ev, &s, n)?, &plan)?;
            Ok(Some(RawGradient { param: idx, idx, blocks: cells, ct }))
        })
        .collect::<Result<_>>()?;
    Ok(RawGradients { layer: ParamLayer::Conv(layer), n, grads: grads.into_iter().flatten().collect() })
}

/// Masks each gradient with its selector (value β at its offset) and sums
/// groups of n gradients into one ciphertext.
pub fn pack_gradients(ev: &Evaluator, raw: &RawGradients, beta: f64) -> Result<Vec<Ciphertext>> {
    let n = raw.n;
    let count = raw.packed_count();
    (0..count)
        .into_par_iter()
        .map(|k| -> Result<Ciphertext> {
            let terms = raw.grads.iter().filter(|g| g.idx / n == k).map(|g| -> Result<Ciphertext> {
                let sel = make_selector_blocks(g.idx % n, n, ev.slots(), beta, g.blocks)?;
                Ok(ev.cmul(&g.ct, &sel.vector)?)
            });
            match sum_terms(ev, terms)? {
                Some(c) => Ok(c),
                None => Err(Error::Shape(format!("packed gradient {k} of {} is empty", raw.layer))),
            }
        })
        .collect()
}

/// Extracts every gradient from its packed ciphertext and spreads it over
/// its blocks. Returns (param index, update) pairs.
pub fn unpack_gradients(ev: &Evaluator, raw: &RawGradients, packed: &[Ciphertext]) -> Result<Vec<(usize, Ciphertext)>> {
    let n = raw.n;
    raw.grads
        .par_iter()
        .map(|g| -> Result<(usize, Ciphertext)> {
            let p = g.idx % n;
            let sel = make_selector_blocks(p, n, ev.slots(), 1.0, g.blocks)?;
            let u = ev.cmul(&packed[g.idx / n], &sel.vector)?;
            Ok((g.param, spread(ev, &u, &compute_rotation_plan(p, n)?)?))
        })
        .collect()
}

fn apply_updates(ev: &Evaluator, cts: &mut [Ciphertext], updates: Vec<(usize, Ciphertext)>) -> Result<()> {
    let mut slots: Vec<Option<Ciphertext>> = vec![None; cts.len()];
    for (param, u) in updates {
        slots[param] = Some(u);
    }
    cts.par_iter_mut().zip(slots).try_for_each(|(c, u)| -> Result<()> {
        if let Some(u) = u {
            *c = ev.add(c, &u)?;
        }
        Ok(())
    })
}

fn noise_removal(ev: &Evaluator, raw: &RawGradients, cts: &mut [Ciphertext], tee: Option<&dyn Reencrypt>, beta: f64) -> Result<usize> {
    let layer = raw.layer;
    let packed = ev.scoped(&format!("pack.{layer}"), |ev| pack_gradients(ev, raw, beta))?;
    let count = packed.len();
    let packed = match tee {
        Some(t) => t.reencrypt_batch(&packed)?,
        None => packed,
    };
    let updates = ev.scoped(&format!("unpack.{layer}"), |ev| unpack_gradients(ev, raw, &packed))?;
    ev.scoped(&format!("update.{layer}"), |ev| apply_updates(ev, cts, updates))?;
    Ok(count)
}

/// Pack, re-encrypt, unpack, spread and add FC weight gradients. β = −lr/b
/// for a batch of b images does the descent step.
pub fn fl_noise_removal_update(
    ev: &Evaluator,
    raw: &RawGradients,
    weights: &mut PackedWeights,
    tee: Option<&dyn Reencrypt>,
    lr: f64,
    batch: usize,
) -> Result<usize> {
    noise_removal(ev, raw, &mut weights.cts, tee, -lr / batch as f64)
}

/// As [`fl_noise_removal_update`] for conv kernels.
pub fn conv_noise_removal_update(
    ev: &Evaluator,
    raw: &RawGradients,
    filters: &mut PackedFilters,
    tee: Option<&dyn Reencrypt>,
    lr: f64,
    batch: usize,
) -> Result<usize> {
    noise_removal(ev, raw, &mut filters.cts, tee, -lr / batch as f64)
}

/// Maintenance path: re-encrypt parameter ciphertexts directly.
pub fn reencrypt_parameters(model: &mut EncryptedModel, tee: &dyn Reencrypt) -> Result<usize> {
    let all: Vec<Ciphertext> = model.ciphertexts().cloned().collect();
    let mut fresh = tee.reencrypt_batch(&all)?.into_iter();
    for f in &mut model.filters {
        for c in &mut f.cts {
            *c = fresh.next().expect("one output per input");
        }
    }
    for w in &mut model.weights {
        for c in &mut w.cts {
            *c = fresh.next().expect("one output per input");
        }
    }
    Ok(all.len())
}

/// Closed-form number of packed gradient ciphertexts per parameter layer.
pub fn packed_counts(plan: &NetworkPlan) -> Vec<(ParamLayer, usize)> {
    let n = plan.cfg.n();
    let blocks = plan.geo.blocks();
    let mut out = Vec::new();
    for l in (0..plan.cfg.f()).rev() {
        let s = plan.cfg.fc()[l];
        let count = match plan.fc_kind(l) {
            WeightKind::TypeI => s.outputs * plan.fc_input_map(l).cts,
            WeightKind::TypeII => s.outputs.div_ceil(blocks) * s.inputs,
        };
        out.push((ParamLayer::Fc(l), count.div_ceil(n)));
    }
    for l in (0..plan.cfg.c()).rev() {
        out.push((ParamLayer::Conv(l), plan.cfg.conv()[l].kernel_params().div_ceil(n)));
    }
    out
}

/// What a backward pass did at the TEE boundary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BackwardReport {
    /// Re-encryption points executed, in order.
    pub points: Vec<ReencryptPoint>,
    /// Ciphertexts sent per executed point.
    pub sent: Vec<usize>,
}

impl BackwardReport {
    pub fn reencryptions(&self) -> usize {
        self.sent.iter().sum()
    }

    fn record(&mut self, p: ReencryptPoint, count: usize) {
        self.points.push(p);
        self.sent.push(count);
    }
}

/// Whether δ computed from `out_grads` would leave too few levels for the
/// gradient product and its selector.
fn needs_refresh(out_grads: &GradTensor, preact: Option<&PackedTensor>, input: &PackedTensor) -> bool {
    let Some(g) = out_grads.min_level() else { return false };
    let delta = match preact {
        Some(z) => {
            let z = z.min_level();
            if g == 0 || z == 0 {
                -1
            } else {
                g.min(z) as i64 - 1
            }
        }
        None => g as i64,
    };
    delta.min(input.min_level() as i64) < 2
}

struct Stepper<'a> {
    tee: &'a dyn Reencrypt,
    schedule: &'a Schedule,
    report: BackwardReport,
    top: u32,
}

impl Stepper<'_> {
    fn maybe_refresh(
        &mut self,
        layer: ParamLayer,
        g: GradTensor,
        preact: Option<&PackedTensor>,
        input: &PackedTensor,
    ) -> Result<GradTensor> {
        let point = ReencryptPoint::Refresh(layer);
        let want = match self.schedule {
            Schedule::Adaptive => needs_refresh(&g, preact, input) && g.min_level().is_some_and(|l| l < self.top),
            Schedule::Fixed(_) => self.schedule.includes(point),
        };
        if !want {
            return Ok(g);
        }
        let present: Vec<Ciphertext> = g.cts.iter().flatten().cloned().collect();
        let mut fresh = self.tee.reencrypt_batch(&present)?.into_iter();
        self.report.record(point, present.len());
        let cts = g.cts.iter().map(|c| c.as_ref().map(|_| fresh.next().expect("one output per input"))).collect();
        GradTensor::new(g.layout, cts)
    }
}

/// Backward pass and parameter update for one round, starting from the
/// loss-head gradient of the logits. `batch` is the number of real images.
#[allow(clippy::too_many_arguments)]
pub fn backward_update(
    ev: &Evaluator,
    plan: &NetworkPlan,
    model: &mut EncryptedModel,
    cache: &ForwardCache,
    logit_grads: PackedTensor,
    tee: &dyn Reencrypt,
    lr: f64,
    batch: usize,
    schedule: &Schedule,
) -> Result<BackwardReport> {
    if !plan.is_basic() {
        return Err(Error::Config("refining runs on the basic conv layout; use r = 1".into()));
    }
    if batch == 0 || batch > plan.cfg.n() {
        return Err(Error::Shape(format!("batch of {batch} images for n = {}", plan.cfg.n())));
    }
    if logit_grads.layout != cache.logits.layout {
        return Err(Error::Layout { expected: cache.logits.tag().into(), actual: logit_grads.tag().into() });
    }
    let cfg = &plan.cfg;
    let (c, f) = (cfg.c(), cfg.f());
    let mut st = Stepper { tee, schedule, report: BackwardReport::default(), top: ev.params().top_level() };
    let mut raws: Vec<RawGradients> = Vec::with_capacity(c + f);
    let mut g = GradTensor::from_packed(logit_grads);

    for l in (0..f).rev() {
        let layer = ParamLayer::Fc(l);
        let scope = format!("back.{layer}");
        let preact = (l + 1 < f).then(|| &cache.fc_preacts[l]);
        let input = &cache.fc_inputs[l];
        g = st.maybe_refresh(layer, g, preact, input)?;
        let w = &model.weights[l];
        let (delta, next) = ev.scoped(&scope, |ev| -> Result<(GradTensor, GradTensor)> {
            let delta = match preact {
                Some(z) => activation_grad(ev, &g, z)?,
                None => g.clone(),
            };
            let next = match w.kind {
                WeightKind::TypeI => fl_backward_type1(ev, &delta, w)?,
                WeightKind::TypeII => fl_backward_type2(ev, &delta, w)?,
            };
            Ok((delta, next))
        })?;
        raws.push(ev.scoped(&format!("grad.{layer}"), |ev| fl_weight_gradients(ev, l, &delta, input, w))?);
        g = next;
    }

    // FL1 input gradients, read as the final conv layer's output grid
    g = g.relayout(cache.conv_preacts[c - 1].layout.clone())?;
    for l in (0..c).rev() {
        let layer = ParamLayer::Conv(l);
        let spec = &cfg.conv()[l];
        let preact = &cache.conv_preacts[l];
        let input = &cache.conv_inputs[l];
        g = st.maybe_refresh(layer, g, Some(preact), input)?;
        let delta = ev.scoped(&format!("back.{layer}"), |ev| activation_grad(ev, &g, preact))?;
        raws.push(ev.scoped(&format!("grad.{layer}"), |ev| conv_kernel_gradients(ev, l, spec, input, &delta, plan.geo.cells()))?);
        if l > 0 {
            g = ev.scoped(&format!("back.{layer}"), |ev| conv_backward(ev, spec, &delta, &model.filters[l], plan.geo.kernel_sides[l]))?;
        }
    }

    let beta = -lr / batch as f64;
    for raw in &raws {
        let point = ReencryptPoint::Pack(raw.layer);
        let tee = schedule.includes(point).then_some(tee);
        let target = match raw.layer {
            ParamLayer::Conv(l) => &mut model.filters[l].cts,
            ParamLayer::Fc(l) => &mut model.weights[l].cts,
        };
        let sent = noise_removal(ev, raw, target, tee, beta)?;
        if tee.is_some() {
            st.report.record(point, sent);
        }
    }
    Ok(st.report)
}

#[cfg(test)]
mod tests;

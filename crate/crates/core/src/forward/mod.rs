//! Forward propagation over packed ciphertexts.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ConvPacking, ConvSpec};
use crate::lhe::{Ciphertext, Evaluator};
use crate::oracle::PlainModel;
use crate::packing::{
    block_rotate_sum, encode_conv_filters, encode_conv_inputs, encode_fl_weights_type1, encode_fl_weights_type2, FeatureMap, PackedFilters,
    PackedTensor, PackedWeights, TensorLayout, WeightKind,
};
use crate::plan::NetworkPlan;

/// Layer result: the activated output and, when an activation was applied,
/// the pre-activation it was computed from.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub output: PackedTensor,
    pub preact: Option<PackedTensor>,
}

fn activate(ev: &Evaluator, pre: Vec<Ciphertext>, layout: TensorLayout, square_scope: Option<&str>) -> Result<LayerOutput> {
    match square_scope {
        None => Ok(LayerOutput { output: PackedTensor::new(layout, pre)?, preact: None }),
        Some(scope) => {
            let sq = ev.child(scope);
            let out: Vec<Ciphertext> = pre.par_iter().map(|c| sq.square(c).map_err(Error::from)).collect::<Result<_>>()?;
            Ok(LayerOutput { output: PackedTensor::new(layout.clone(), out)?, preact: Some(PackedTensor::new(layout, pre)?) })
        }
    }
}

fn expect(cond: bool, expected: &str, actual: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Layout { expected: expected.into(), actual: actual.into() })
    }
}

/// One conv layer in any of the three layouts; `filters.packing` selects it.
/// Output grid has side `out_side` (γ̃_{l+1}).
pub fn conv_forward_packed(
    ev: &Evaluator,
    spec: &ConvSpec,
    out_side: usize,
    input: &PackedTensor,
    filters: &PackedFilters,
    square_scope: Option<&str>,
) -> Result<LayerOutput> {
    let (in_packing, in_channels, in_groups, in_side, sl) = match &input.layout {
        TensorLayout::Conv { packing, channels, groups, side, slots } => (*packing, *channels, *groups, *side, *slots),
        other => return Err(Error::Layout { expected: filters.packing.tag().into(), actual: other.tag().into() }),
    };
    let want = filters.packing;
    expect(in_packing == want, want.tag(), in_packing.tag())?;
    if in_channels != spec.channels || filters.in_groups != in_groups || filters.side != spec.filter_side {
        return Err(Error::Shape(format!(
            "conv input has {in_channels} channels in {in_groups} groups, filters expect {} in {}",
            spec.channels, filters.in_groups
        )));
    }
    let d = spec.stride;
    let g = spec.filter_side;
    if (out_side - 1) * d + g > in_side {
        return Err(Error::Shape(format!("output side {out_side} does not fit input side {in_side}")));
    }
    let fold = if want == ConvPacking::CrossChannel { sl.r } else { 1 };
    let stride = sl.segment_stride();
    let out_groups = filters.out_groups;
    let jobs: Vec<(usize, usize, usize)> =
        (0..out_groups).flat_map(|k| (0..out_side).flat_map(move |u| (0..out_side).map(move |v| (k, u, v)))).collect();
    let pre: Vec<Ciphertext> = jobs
        .par_iter()
        .map(|&(k, u, v)| -> Result<Ciphertext> {
            let pairs = (0..in_groups).flat_map(|i| (0..g).flat_map(move |x| (0..g).map(move |y| (i, x, y))));
            let mut acc: Option<Ciphertext> = None;
            for (i, x, y) in pairs {
                let c = &input.cts[input.layout.conv_index(i, d * u + x, d * v + y)];
                let p = ev.mul(c, filters.get(k, i, x, y))?;
                ev.accumulate(&mut acc, p)?;
            }
            let mut c = acc.expect("filters are nonempty");
            let mut step = stride;
            while step < stride * fold {
                c = ev.rot_add(&c, step as i64)?;
                step *= 2;
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let out_packing = match want {
        ConvPacking::Basic => ConvPacking::Basic,
        ConvPacking::CrossChannel => ConvPacking::CrossFilter,
        ConvPacking::CrossFilter => ConvPacking::CrossChannel,
    };
    let layout = TensorLayout::Conv { packing: out_packing, channels: spec.filters, groups: out_groups, side: out_side, slots: sl };
    activate(ev, pre, layout, square_scope)
}

pub fn conv_forward(
    ev: &Evaluator,
    spec: &ConvSpec,
    out_side: usize,
    input: &PackedTensor,
    filters: &PackedFilters,
    square_scope: Option<&str>,
) -> Result<LayerOutput> {
    expect(filters.packing == ConvPacking::Basic, "conv-basic", filters.packing.tag())?;
    conv_forward_packed(ev, spec, out_side, input, filters, square_scope)
}

pub fn conv_forward_cross_channel(
    ev: &Evaluator,
    spec: &ConvSpec,
    out_side: usize,
    input: &PackedTensor,
    filters: &PackedFilters,
    square_scope: Option<&str>,
) -> Result<LayerOutput> {
    expect(filters.packing == ConvPacking::CrossChannel, "conv-cross-channel", filters.packing.tag())?;
    conv_forward_packed(ev, spec, out_side, input, filters, square_scope)
}

pub fn conv_forward_cross_filter(
    ev: &Evaluator,
    spec: &ConvSpec,
    out_side: usize,
    input: &PackedTensor,
    filters: &PackedFilters,
    square_scope: Option<&str>,
) -> Result<LayerOutput> {
    expect(filters.packing == ConvPacking::CrossFilter, "conv-cross-filter", filters.packing.tag())?;
    conv_forward_packed(ev, spec, out_side, input, filters, square_scope)
}

/// FC layer on a Type I input: o outputs, each a product-sum over the input
/// ciphertexts followed by a rotate-sum over the blocks. The output is
/// replicated, i.e. a Type II input.
pub fn fl_forward_type1(ev: &Evaluator, input: &PackedTensor, weights: &PackedWeights, square_scope: Option<&str>) -> Result<LayerOutput> {
    let (map, n) = match &input.layout {
        TensorLayout::Type1 { map, n } => (map, *n),
        other => return Err(Error::Layout { expected: "fl-type1".into(), actual: other.tag().into() }),
    };
    expect(weights.kind == WeightKind::TypeI, "fl-type1", weights.kind.tag())?;
    if weights.map.as_ref() != Some(map) {
        return Err(Error::Shape("type I weights were encoded for a different feature map".into()));
    }
    let pre: Vec<Ciphertext> = (0..weights.rows)
        .into_par_iter()
        .map(|i| -> Result<Ciphertext> {
            let c = ev.dot((0..weights.cols).map(|j| (&input.cts[j], weights.get(i, j))))?.expect("nonempty");
            Ok(block_rotate_sum(ev, &c, n)?)
        })
        .collect::<Result<_>>()?;
    activate(ev, pre, TensorLayout::Type2 { features: weights.outputs, n }, square_scope)
}

/// FC layer on a Type II input: ⌈o·n/S⌉ outputs, no rotations. Outputs land
/// in consecutive blocks, i.e. a Type I input.
pub fn fl_forward_type2(ev: &Evaluator, input: &PackedTensor, weights: &PackedWeights, square_scope: Option<&str>) -> Result<LayerOutput> {
    let (features, n) = match &input.layout {
        TensorLayout::Type2 { features, n } => (*features, *n),
        other => return Err(Error::Layout { expected: "fl-type2".into(), actual: other.tag().into() }),
    };
    expect(weights.kind == WeightKind::TypeII, "fl-type2", weights.kind.tag())?;
    if features != weights.inputs {
        return Err(Error::Shape(format!("{features} input features, weights expect {}", weights.inputs)));
    }
    let pre: Vec<Ciphertext> = (0..weights.cols)
        .into_par_iter()
        .map(|j| -> Result<Ciphertext> { Ok(ev.dot((0..weights.rows).map(|i| (&input.cts[i], weights.get(i, j))))?.expect("nonempty")) })
        .collect::<Result<_>>()?;
    let per = ev.slots() / n;
    let layout = TensorLayout::Type1 { map: FeatureMap::contiguous(weights.outputs, per), n };
    activate(ev, pre, layout, square_scope)
}

/// Encrypted parameters of a whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedModel {
    pub filters: Vec<PackedFilters>,
    pub weights: Vec<PackedWeights>,
}

impl EncryptedModel {
    pub fn min_level(&self) -> u32 {
        self.filters.iter().map(|f| f.min_level()).chain(self.weights.iter().map(|w| w.min_level())).min().unwrap_or(0)
    }

    pub fn ciphertexts(&self) -> impl Iterator<Item = &Ciphertext> {
        self.filters.iter().flat_map(|f| f.cts.iter()).chain(self.weights.iter().flat_map(|w| w.cts.iter()))
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub conv_inputs: Vec<PackedTensor>,
    pub conv_preacts: Vec<PackedTensor>,
    pub fc_inputs: Vec<PackedTensor>,
    /// Pre-activations of the activated FC layers (all but the last).
    pub fc_preacts: Vec<PackedTensor>,
    pub logits: PackedTensor,
}

/// Full forward pass with per-layer scopes.
pub fn forward_pass(ev: &Evaluator, plan: &NetworkPlan, model: &EncryptedModel, inputs: PackedTensor) -> Result<ForwardCache> {
    let cfg = &plan.cfg;
    let mut conv_inputs = Vec::with_capacity(cfg.c());
    let mut conv_preacts = Vec::with_capacity(cfg.c());
    let mut x = inputs;
    for (l, spec) in cfg.conv().iter().enumerate() {
        let sq = plan.conv_square_scope(l);
        let out = ev.scoped(&plan.conv_scope(l), |ev| {
            conv_forward_packed(ev, spec, plan.geo.kernel_sides[l + 1], &x, &model.filters[l], Some(&sq))
        })?;
        conv_inputs.push(std::mem::replace(&mut x, out.output));
        conv_preacts.push(out.preact.expect("conv layers are activated"));
    }
    let mut x = x.into_fc_input()?;
    let mut fc_inputs = Vec::with_capacity(cfg.f());
    let mut fc_preacts = Vec::with_capacity(cfg.f());
    for l in 0..cfg.f() {
        let sq = plan.fc_square_scope(l);
        let w = &model.weights[l];
        let out = ev.scoped(&plan.fc_scope(l), |ev| match plan.fc_kind(l) {
            WeightKind::TypeI => fl_forward_type1(ev, &x, w, sq.as_deref()),
            WeightKind::TypeII => fl_forward_type2(ev, &x, w, sq.as_deref()),
        })?;
        fc_inputs.push(std::mem::replace(&mut x, out.output));
        if let Some(p) = out.preact {
            fc_preacts.push(p);
        }
    }
    Ok(ForwardCache { conv_inputs, conv_preacts, fc_inputs, fc_preacts, logits: x })
}

/// Encrypts a plaintext model in the layouts chosen by `plan`.
pub fn encrypt_model(ev: &Evaluator, plan: &NetworkPlan, model: &PlainModel) -> Result<EncryptedModel> {
    model.check(&plan.cfg)?;
    let filters = ev.scoped("enc.filters", |ev| {
        plan.cfg
            .conv()
            .iter()
            .enumerate()
            .map(|(l, spec)| encode_conv_filters(ev, spec, &model.filters[l], &plan.geo, plan.packings[l], plan.r))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut weights = Vec::with_capacity(plan.cfg.f());
    for (l, spec) in plan.cfg.fc().iter().enumerate() {
        let m = &model.weights[l];
        let w = ev.scoped(&format!("enc.weights.{}", plan.fc_scope(l)), |ev| match plan.fc_kind(l) {
            WeightKind::TypeI => encode_fl_weights_type1(ev, m, spec, &plan.fc_input_map(l), plan.cfg.n()),
            WeightKind::TypeII => encode_fl_weights_type2(ev, m, spec, plan.cfg.n()),
        })?;
        weights.push(w);
    }
    Ok(EncryptedModel { filters, weights })
}

/// Encrypts up to n images for the first conv layer.
pub fn encrypt_batch(ev: &Evaluator, plan: &NetworkPlan, images: &[Vec<f64>]) -> Result<PackedTensor> {
    ev.scoped("enc.inputs", |ev| encode_conv_inputs(ev, images, &plan.cfg, &plan.geo, plan.packings[0], plan.r))
}

/// Reads plaintext parameters back from plain slot vectors, given in
/// [`EncryptedModel::ciphertexts`] order. Each value is read from the first
/// slot of its block; `max_spread` reports the largest deviation between
/// that slot and the other slots that replicate it.
pub fn decode_model(plan: &NetworkPlan, model: &EncryptedModel, slots: &[Vec<f64>]) -> Result<(PlainModel, f64)> {
    let total = model.ciphertexts().count();
    if slots.len() != total {
        return Err(Error::Shape(format!("{} slot vectors for {total} ciphertexts", slots.len())));
    }
    let n = plan.cfg.n();
    let mut spread = 0.0f64;
    let mut read = |v: &[f64], base: usize, len: usize| {
        let x = v[base];
        for y in &v[base..base + len] {
            spread = spread.max((y - x).abs());
        }
        x
    };
    let mut out = PlainModel::zeros(&plan.cfg);
    let mut at = 0;
    for (l, f) in model.filters.iter().enumerate() {
        if f.packing != ConvPacking::Basic {
            return Err(Error::Layout { expected: "conv-basic".into(), actual: f.packing.tag().into() });
        }
        let seg = plan.geo.segment_len();
        for (q, v) in out.filters[l].iter_mut().enumerate() {
            *v = read(&slots[at + q], 0, seg);
        }
        at += f.cts.len();
    }
    for (l, w) in model.weights.iter().enumerate() {
        let spec = plan.cfg.fc()[l];
        match w.kind {
            WeightKind::TypeI => {
                let map = w.map.as_ref().expect("type I weights carry a feature map");
                for i in 0..spec.outputs {
                    for (f, &(j, b)) in map.entries.iter().enumerate() {
                        out.weights[l][i * spec.inputs + f] = read(&slots[at + i * w.cols + j], b * n, n);
                    }
                }
            }
            WeightKind::TypeII => {
                let per = plan.geo.blocks();
                for row in 0..spec.outputs {
                    for i in 0..spec.inputs {
                        let (j, b) = (row / per, row % per);
                        out.weights[l][row * spec.inputs + i] = read(&slots[at + i * w.cols + j], b * n, n);
                    }
                }
            }
        }
        at += w.cts.len();
    }
    Ok((out, spread))
}

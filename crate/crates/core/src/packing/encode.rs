use rayon::prelude::*;

use super::layout::{FeatureMap, PackedFilters, PackedTensor, PackedWeights, SlotLayout, TensorLayout, WeightKind};
use crate::error::{Error, Result};
use crate::geometry::{CnnConfig, CombinedGeometry, ConvPacking, ConvSpec, FcSpec};
use crate::lhe::{Ciphertext, Evaluator};

fn encrypt_all(ev: &Evaluator, vecs: Vec<Vec<f64>>) -> Result<Vec<Ciphertext>> {
    vecs.into_par_iter().map(|v| ev.encrypt_slots(v).map_err(Error::from)).collect()
}

fn check_images(images: &[Vec<f64>], cfg: &CnnConfig, geo: &CombinedGeometry) -> Result<()> {
    if images.is_empty() || images.len() > geo.n {
        return Err(Error::Shape(format!("{} images for n = {}", images.len(), geo.n)));
    }
    if let Some(im) = images.iter().find(|im| im.len() != cfg.image_len()) {
        return Err(Error::Shape(format!("image has {} values, expected {}", im.len(), cfg.image_len())));
    }
    Ok(())
}

/// Writes the basic encoding of channel `ch` at grid position `(u, v)` into
/// segment `seg` of `out`.
#[allow(clippy::too_many_arguments)]
fn write_channel(
    out: &mut [f64],
    images: &[Vec<f64>],
    cfg: &CnnConfig,
    geo: &CombinedGeometry,
    sl: &SlotLayout,
    seg: usize,
    ch: usize,
    u: usize,
    v: usize,
) {
    let beta = cfg.conv()[0].input_side;
    let d = geo.strides[0];
    for s in 0..geo.grid_side {
        for t in 0..geo.grid_side {
            for (j, im) in images.iter().enumerate() {
                out[sl.slot(seg, s, t, j)] = im[(ch * beta + u + s * d) * beta + v + t * d];
            }
        }
    }
}

/// Encrypts `images` (each flat `[i][x][y]`) for the first conv layer.
pub fn encode_conv_inputs(
    ev: &Evaluator,
    images: &[Vec<f64>],
    cfg: &CnnConfig,
    geo: &CombinedGeometry,
    packing: ConvPacking,
    r: usize,
) -> Result<PackedTensor> {
    check_images(images, cfg, geo)?;
    let r = if packing == ConvPacking::Basic { 1 } else { r };
    let sl = SlotLayout::new(geo, r)?;
    let alpha = cfg.conv()[0].channels;
    let side = geo.kernel_sides[0];
    let groups = match packing {
        ConvPacking::CrossChannel => alpha.div_ceil(r),
        _ => alpha,
    };
    let mut vecs = Vec::with_capacity(groups * side * side);
    for g in 0..groups {
        for u in 0..side {
            for v in 0..side {
                let mut out = vec![0.0; geo.slots];
                match packing {
                    ConvPacking::Basic => write_channel(&mut out, images, cfg, geo, &sl, 0, g, u, v),
                    ConvPacking::CrossChannel => {
                        for m in 0..r {
                            let ch = g * r + m;
                            if ch < alpha {
                                write_channel(&mut out, images, cfg, geo, &sl, m, ch, u, v);
                            }
                        }
                    }
                    ConvPacking::CrossFilter => {
                        for m in 0..r {
                            write_channel(&mut out, images, cfg, geo, &sl, m, g, u, v);
                        }
                    }
                }
                vecs.push(out);
            }
        }
    }
    let layout = TensorLayout::Conv { packing, channels: alpha, groups, side, slots: sl };
    PackedTensor::new(layout, encrypt_all(ev, vecs)?)
}

pub fn encode_inputs(ev: &Evaluator, images: &[Vec<f64>], cfg: &CnnConfig, geo: &CombinedGeometry) -> Result<PackedTensor> {
    encode_conv_inputs(ev, images, cfg, geo, ConvPacking::Basic, 1)
}

pub fn encode_inputs_cross_channel(
    ev: &Evaluator,
    images: &[Vec<f64>],
    cfg: &CnnConfig,
    geo: &CombinedGeometry,
    r: usize,
) -> Result<PackedTensor> {
    encode_conv_inputs(ev, images, cfg, geo, ConvPacking::CrossChannel, r)
}

/// Basic encoding repeated in all `r` segments, as a cross-filter layer expects.
pub fn encode_inputs_replicated(
    ev: &Evaluator,
    images: &[Vec<f64>],
    cfg: &CnnConfig,
    geo: &CombinedGeometry,
    r: usize,
) -> Result<PackedTensor> {
    encode_conv_inputs(ev, images, cfg, geo, ConvPacking::CrossFilter, r)
}

/// Encrypts the filters of one conv layer (flat `[k][i][x][y]`).
pub fn encode_conv_filters(
    ev: &Evaluator,
    spec: &ConvSpec,
    filters: &[f64],
    geo: &CombinedGeometry,
    packing: ConvPacking,
    r: usize,
) -> Result<PackedFilters> {
    if filters.len() != spec.kernel_params() {
        return Err(Error::Shape(format!("{} filter values, expected {}", filters.len(), spec.kernel_params())));
    }
    let r = if packing == ConvPacking::Basic { 1 } else { r };
    let sl = SlotLayout::new(geo, r)?;
    let (e, a, g) = (spec.filters, spec.channels, spec.filter_side);
    let (out_groups, in_groups) = match packing {
        ConvPacking::Basic => (e, a),
        ConvPacking::CrossChannel => (e, a.div_ceil(r)),
        ConvPacking::CrossFilter => (e.div_ceil(r), a),
    };
    let seg_len = geo.segment_len();
    let value = |k: usize, i: usize, x: usize, y: usize| filters[((k * a + i) * g + x) * g + y];
    let mut vecs = Vec::with_capacity(out_groups * in_groups * g * g);
    for kg in 0..out_groups {
        for ig in 0..in_groups {
            for x in 0..g {
                for y in 0..g {
                    let mut out = vec![0.0; geo.slots];
                    for m in 0..r {
                        let (k, i) = match packing {
                            ConvPacking::Basic => (kg, ig),
                            ConvPacking::CrossChannel => (kg, ig * r + m),
                            ConvPacking::CrossFilter => (kg * r + m, ig),
                        };
                        if k < e && i < a {
                            let base = m * sl.segment_stride();
                            out[base..base + seg_len].fill(value(k, i, x, y));
                        }
                    }
                    vecs.push(out);
                }
            }
        }
    }
    Ok(PackedFilters { packing, filters: e, channels: a, out_groups, in_groups, side: g, slots: sl, cts: encrypt_all(ev, vecs)? })
}

pub fn encode_filters(ev: &Evaluator, spec: &ConvSpec, filters: &[f64], geo: &CombinedGeometry) -> Result<PackedFilters> {
    encode_conv_filters(ev, spec, filters, geo, ConvPacking::Basic, 1)
}

pub fn encode_filters_cross_channel(
    ev: &Evaluator,
    spec: &ConvSpec,
    filters: &[f64],
    geo: &CombinedGeometry,
    r: usize,
) -> Result<PackedFilters> {
    encode_conv_filters(ev, spec, filters, geo, ConvPacking::CrossChannel, r)
}

pub fn encode_filters_cross_filter(
    ev: &Evaluator,
    spec: &ConvSpec,
    filters: &[f64],
    geo: &CombinedGeometry,
    r: usize,
) -> Result<PackedFilters> {
    encode_conv_filters(ev, spec, filters, geo, ConvPacking::CrossFilter, r)
}

/// Type I weights: ciphertext `(i, j)` holds `M[i][w]` replicated n times in
/// the block where `map` places feature `w` on input ciphertext `j`.
pub fn encode_fl_weights_type1(ev: &Evaluator, m: &[f64], spec: &FcSpec, map: &FeatureMap, n: usize) -> Result<PackedWeights> {
    let (o, iota) = (spec.outputs, spec.inputs);
    if m.len() != o * iota || map.features() != iota {
        return Err(Error::Shape(format!("type I weights: {}x{} matrix against {} mapped features", o, iota, map.features())));
    }
    let s = ev.slots();
    let cols = map.cts;
    let mut vecs = vec![vec![0.0; s]; o * cols];
    for i in 0..o {
        for (w, &(j, b)) in map.entries.iter().enumerate() {
            vecs[i * cols + j][b * n..(b + 1) * n].fill(m[i * iota + w]);
        }
    }
    Ok(PackedWeights {
        kind: WeightKind::TypeI,
        outputs: o,
        inputs: iota,
        rows: o,
        cols,
        n,
        map: Some(map.clone()),
        cts: encrypt_all(ev, vecs)?,
    })
}

/// Type II weights: ciphertext `(i, j)` holds column `i` for output rows
/// `j·S/n ..`, one row per block, each replicated n times.
pub fn encode_fl_weights_type2(ev: &Evaluator, m: &[f64], spec: &FcSpec, n: usize) -> Result<PackedWeights> {
    let (o, iota) = (spec.outputs, spec.inputs);
    if m.len() != o * iota {
        return Err(Error::Shape(format!("type II weights: {} values for {}x{}", m.len(), o, iota)));
    }
    let s = ev.slots();
    let per = s / n;
    let cols = o.div_ceil(per);
    let mut vecs = vec![vec![0.0; s]; iota * cols];
    for i in 0..iota {
        for row in 0..o {
            let (j, b) = (row / per, row % per);
            vecs[i * cols + j][b * n..(b + 1) * n].fill(m[row * iota + i]);
        }
    }
    Ok(PackedWeights { kind: WeightKind::TypeII, outputs: o, inputs: iota, rows: iota, cols, n, map: None, cts: encrypt_all(ev, vecs)? })
}

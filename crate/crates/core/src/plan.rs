//! Per-layer layout choice, scope labels and closed-form operation counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{combined_geometry, conv_packings, CnnConfig, CombinedGeometry, ConvPacking};
use crate::lhe::LheParams;
use crate::meter::OpTuple;
use crate::packing::{FeatureMap, SlotLayout, WeightKind};

/// How the replication factor r is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RMode {
    Auto,
    Fixed(usize),
}

/// Everything needed to lay out and schedule one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPlan {
    pub cfg: CnnConfig,
    pub geo: CombinedGeometry,
    pub r: usize,
    pub packings: Vec<ConvPacking>,
}

fn log2(x: usize) -> u64 {
    x.trailing_zeros() as u64
}

impl NetworkPlan {
    pub fn new(cfg: &CnnConfig, params: &LheParams, mode: RMode) -> Result<Self> {
        let geo = combined_geometry(cfg, params)?;
        let r = match mode {
            RMode::Auto => geo.packing_factor,
            RMode::Fixed(r) => {
                if r == 0 || !r.is_power_of_two() || r > geo.packing_factor {
                    return Err(Error::Config(format!(
                        "replication factor {r} must be a power of two no greater than {}",
                        geo.packing_factor
                    )));
                }
                r
            }
        };
        let packings = conv_packings(cfg, r);
        Ok(NetworkPlan { cfg: cfg.clone(), geo, r, packings })
    }

    /// Plan with every conv layer in the basic layout.
    pub fn basic(cfg: &CnnConfig, params: &LheParams) -> Result<Self> {
        Self::new(cfg, params, RMode::Fixed(1))
    }

    pub fn is_basic(&self) -> bool {
        self.packings.iter().all(|p| *p == ConvPacking::Basic)
    }

    pub fn slot_layout(&self, l: usize) -> SlotLayout {
        let r = if self.packings[l] == ConvPacking::Basic { 1 } else { self.r };
        SlotLayout::new(&self.geo, r).expect("r validated at construction")
    }

    pub fn conv_scope(&self, l: usize) -> String {
        format!("CL{}", l + 1)
    }

    pub fn fc_scope(&self, l: usize) -> String {
        format!("FL{}", l + 1)
    }

    pub fn conv_square_scope(&self, l: usize) -> String {
        format!("Square{}", l + 1)
    }

    /// None for the final FC layer, which has no activation.
    pub fn fc_square_scope(&self, l: usize) -> Option<String> {
        (l + 1 < self.cfg.f()).then(|| format!("Square{}", self.cfg.c() + l + 1))
    }

    pub fn fc_kind(&self, l: usize) -> WeightKind {
        if l.is_multiple_of(2) {
            WeightKind::TypeI
        } else {
            WeightKind::TypeII
        }
    }

    /// Input feature placement for a Type I FC layer.
    pub fn fc_input_map(&self, l: usize) -> FeatureMap {
        assert_eq!(self.fc_kind(l), WeightKind::TypeI);
        let iota = self.cfg.fc()[l].inputs;
        if l > 0 {
            return FeatureMap::contiguous(iota, self.geo.blocks());
        }
        let c = self.cfg.c();
        let last = self.packings[c - 1];
        let cells = self.geo.cells();
        let eps = self.cfg.conv()[c - 1].filters;
        if last == ConvPacking::CrossFilter {
            let sl = self.slot_layout(c - 1);
            let entries = (0..iota).map(|w| (w / cells / self.r, sl.block((w / cells) % self.r, w % cells))).collect();
            FeatureMap { entries, cts: eps.div_ceil(self.r) }
        } else {
            FeatureMap::contiguous(iota, cells)
        }
    }

    /// Levels needed for one forward pass from fresh parameters.
    pub fn required_levels(&self) -> u32 {
        self.cfg.forward_depth() + 1
    }

    /// Closed-form counts for a forward pass with inputs at `input_level`
    /// and parameters at `param_level`.
    pub fn predict_forward(&self, input_level: u32, param_level: u32) -> Prediction {
        let cfg = &self.cfg;
        let geo = &self.geo;
        let mut stages = Vec::new();
        let mut enc = Vec::new();
        let mut level = input_level as i64;
        let side0 = geo.kernel_sides[0];
        let alpha0 = cfg.conv()[0].channels;
        let in_groups0 = match self.packings[0] {
            ConvPacking::CrossChannel => alpha0.div_ceil(self.r),
            _ => alpha0,
        };
        enc.push(("enc.inputs".to_string(), (in_groups0 * side0 * side0) as u64));
        let mut filters_total = 0u64;
        for (l, spec) in cfg.conv().iter().enumerate() {
            let out_side = geo.kernel_sides[l + 1];
            let g2 = spec.filter_side * spec.filter_side;
            let (outputs, prods, fold) = match self.packings[l] {
                ConvPacking::Basic => (spec.filters, spec.channels * g2, 0),
                ConvPacking::CrossChannel => (spec.filters, spec.channels.div_ceil(self.r) * g2, log2(self.r)),
                ConvPacking::CrossFilter => (spec.filters.div_ceil(self.r), spec.channels * g2, 0),
            };
            let (og, ig) = match self.packings[l] {
                ConvPacking::Basic => (spec.filters, spec.channels),
                ConvPacking::CrossChannel => (spec.filters, spec.channels.div_ceil(self.r)),
                ConvPacking::CrossFilter => (spec.filters.div_ceil(self.r), spec.channels),
            };
            filters_total += (og * ig * g2) as u64;
            let o = (outputs * out_side * out_side) as u64;
            let p = prods as u64;
            let lv = level.min(param_level as i64);
            stages.push(StagePrediction {
                scope: self.conv_scope(l),
                level: lv,
                ops: OpTuple::new(o * (p - 1) + o * fold, o * p, o * fold, 0),
            });
            stages.push(StagePrediction { scope: self.conv_square_scope(l), level: lv - 1, ops: OpTuple::new(0, o, 0, 0) });
            level = lv - 2;
        }
        enc.push(("enc.filters".to_string(), filters_total));
        let rsum = log2(geo.blocks());
        for (l, spec) in cfg.fc().iter().enumerate() {
            let lv = level.min(param_level as i64);
            let (ops, outs, wcts) = match self.fc_kind(l) {
                WeightKind::TypeI => {
                    let cols = self.fc_input_map(l).cts as u64;
                    let o = spec.outputs as u64;
                    (OpTuple::new(o * (cols - 1) + o * rsum, o * cols, o * rsum, 0), o, o * cols)
                }
                WeightKind::TypeII => {
                    let outs = spec.outputs.div_ceil(geo.blocks()) as u64;
                    let i = spec.inputs as u64;
                    (OpTuple::new(outs * (i - 1), outs * i, 0, 0), outs, outs * i)
                }
            };
            enc.push((format!("enc.weights.{}", self.fc_scope(l)), wcts));
            stages.push(StagePrediction { scope: self.fc_scope(l), level: lv, ops });
            level = lv - 1;
            if let Some(sq) = self.fc_square_scope(l) {
                stages.push(StagePrediction { scope: sq, level: lv - 1, ops: OpTuple::new(0, outs, 0, 0) });
                level = lv - 2;
            }
        }
        Prediction { stages, encryptions: enc, final_level: level }
    }
}

/// Predicted counts of one forward stage; every op in the stage executes at `level`.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePrediction {
    pub scope: String,
    pub level: i64,
    pub ops: OpTuple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub stages: Vec<StagePrediction>,
    pub encryptions: Vec<(String, u64)>,
    /// Level of the logits; negative means the budget is insufficient.
    pub final_level: i64,
}

impl Prediction {
    pub fn totals(&self) -> OpTuple {
        self.stages.iter().fold(OpTuple::default(), |acc, s| acc + s.ops)
    }

    pub fn stage(&self, scope: &str) -> OpTuple {
        self.stages.iter().filter(|s| s.scope == scope).fold(OpTuple::default(), |acc, s| acc + s.ops)
    }

    pub fn feasible(&self) -> bool {
        self.final_level >= 0 && self.stages.iter().all(|s| s.ops.mul == 0 || s.level >= 1)
    }
}

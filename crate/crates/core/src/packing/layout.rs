use crate::error::{Error, Result};
use crate::geometry::{CombinedGeometry, ConvPacking};
use crate::lhe::Ciphertext;

/// Slot addressing shared by every conv-stage ciphertext: `r` segments of
/// stride S/r, each holding β̃₀² pi-sets of n slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotLayout {
    pub slots: usize,
    pub n: usize,
    pub grid_side: usize,
    pub r: usize,
}

impl SlotLayout {
    pub fn new(geo: &CombinedGeometry, r: usize) -> Result<Self> {
        if r == 0 || !r.is_power_of_two() || r * geo.segment_len() > geo.slots {
            return Err(Error::Config(format!(
                "replication factor {r} incompatible with {} slots and segment length {}",
                geo.slots,
                geo.segment_len()
            )));
        }
        Ok(SlotLayout { slots: geo.slots, n: geo.n, grid_side: geo.grid_side, r })
    }

    pub fn cells(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn segment_stride(&self) -> usize {
        self.slots / self.r
    }

    pub fn blocks(&self) -> usize {
        self.slots / self.n
    }

    /// Slot of image `j` in pi-set `(s, t)` of segment `seg`.
    pub fn slot(&self, seg: usize, s: usize, t: usize, j: usize) -> usize {
        seg * self.segment_stride() + (s * self.grid_side + t) * self.n + j
    }

    /// Block index (slot / n) of pi-set `cell` in segment `seg`.
    pub fn block(&self, seg: usize, cell: usize) -> usize {
        (seg * self.segment_stride()) / self.n + cell
    }
}

/// Location of every FC input feature: (ciphertext index, block index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMap {
    pub entries: Vec<(usize, usize)>,
    pub cts: usize,
}

impl FeatureMap {
    /// Features laid out `per_ct` blocks per ciphertext, in order.
    pub fn contiguous(features: usize, per_ct: usize) -> Self {
        let entries = (0..features).map(|w| (w / per_ct, w % per_ct)).collect();
        FeatureMap { entries, cts: features.div_ceil(per_ct) }
    }

    pub fn features(&self) -> usize {
        self.entries.len()
    }
}

/// Index structure of a packed tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorLayout {
    /// Conv-stage grid, ciphertext `(g·side + u)·side + v`.
    Conv { packing: ConvPacking, channels: usize, groups: usize, side: usize, slots: SlotLayout },
    /// FC input without replication: features spread over pi-sets.
    Type1 { map: FeatureMap, n: usize },
    /// FC input with replication: one ciphertext per feature, S/n replicas.
    Type2 { features: usize, n: usize },
}

impl TensorLayout {
    pub fn tag(&self) -> &'static str {
        match self {
            TensorLayout::Conv { packing, .. } => packing.tag(),
            TensorLayout::Type1 { .. } => "fl-type1",
            TensorLayout::Type2 { .. } => "fl-type2",
        }
    }

    pub fn ciphertexts(&self) -> usize {
        match self {
            TensorLayout::Conv { groups, side, .. } => groups * side * side,
            TensorLayout::Type1 { map, .. } => map.cts,
            TensorLayout::Type2 { features, .. } => *features,
        }
    }

    pub fn conv_index(&self, g: usize, u: usize, v: usize) -> usize {
        match self {
            TensorLayout::Conv { side, .. } => (g * side + u) * side + v,
            _ => panic!("conv index on {}", self.tag()),
        }
    }

    /// (ciphertext, slot) of channel `ch` at grid position `(u, v)`, pi-set
    /// `(s, t)`, image `j`. Uses the first segment carrying the channel.
    pub fn conv_slot(&self, ch: usize, u: usize, v: usize, s: usize, t: usize, j: usize) -> (usize, usize) {
        match self {
            TensorLayout::Conv { packing, slots, .. } => {
                let (g, seg) = match packing {
                    ConvPacking::CrossChannel => (ch / slots.r, ch % slots.r),
                    _ => (ch, 0),
                };
                (self.conv_index(g, u, v), slots.slot(seg, s, t, j))
            }
            _ => panic!("conv slot on {}", self.tag()),
        }
    }

    /// (ciphertext, slot) of FC feature `w` for image `j`.
    pub fn fl_slot(&self, w: usize, j: usize) -> (usize, usize) {
        match self {
            TensorLayout::Type1 { map, n } => {
                let (c, b) = map.entries[w];
                (c, b * n + j)
            }
            TensorLayout::Type2 { .. } => (w, j),
            _ => panic!("fl slot on {}", self.tag()),
        }
    }
}

/// Ciphertexts plus the layout that gives them meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    pub layout: TensorLayout,
    pub cts: Vec<Ciphertext>,
}

impl PackedTensor {
    pub fn new(layout: TensorLayout, cts: Vec<Ciphertext>) -> Result<Self> {
        if cts.len() != layout.ciphertexts() {
            return Err(Error::Shape(format!("{} layout needs {} ciphertexts, got {}", layout.tag(), layout.ciphertexts(), cts.len())));
        }
        Ok(PackedTensor { layout, cts })
    }

    pub fn tag(&self) -> &'static str {
        self.layout.tag()
    }

    pub fn len(&self) -> usize {
        self.cts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cts.is_empty()
    }

    pub fn min_level(&self) -> u32 {
        self.cts.iter().map(|c| c.level()).min().unwrap_or(0)
    }

    pub fn expect_tag(&self, tag: &str) -> Result<()> {
        if self.tag() == tag {
            Ok(())
        } else {
            Err(Error::Layout { expected: tag.into(), actual: self.tag().into() })
        }
    }

    /// Reinterprets the output of the final conv layer as a Type I FC input.
    pub fn into_fc_input(self) -> Result<PackedTensor> {
        let map = match &self.layout {
            TensorLayout::Conv { packing, channels, side, slots, .. } => {
                if *side != 1 {
                    return Err(Error::Shape(format!("final conv grid side {side}, expected 1")));
                }
                let cells = slots.cells();
                let entries = (0..channels * cells)
                    .map(|w| {
                        let (k, cell) = (w / cells, w % cells);
                        match packing {
                            ConvPacking::CrossChannel => (k / slots.r, slots.block(k % slots.r, cell)),
                            _ => (k, cell),
                        }
                    })
                    .collect();
                FeatureMap { entries, cts: self.cts.len() }
            }
            other => return Err(Error::Layout { expected: "conv".into(), actual: other.tag().into() }),
        };
        let n = match &self.layout {
            TensorLayout::Conv { slots, .. } => slots.n,
            _ => unreachable!(),
        };
        PackedTensor::new(TensorLayout::Type1 { map, n }, self.cts)
    }
}

/// Encrypted filters of one conv layer, `((kg·in_groups + ig)·γ + x)·γ + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedFilters {
    pub packing: ConvPacking,
    pub filters: usize,
    pub channels: usize,
    pub out_groups: usize,
    pub in_groups: usize,
    pub side: usize,
    pub slots: SlotLayout,
    pub cts: Vec<Ciphertext>,
}

impl PackedFilters {
    pub fn index(&self, kg: usize, ig: usize, x: usize, y: usize) -> usize {
        ((kg * self.in_groups + ig) * self.side + x) * self.side + y
    }

    pub fn get(&self, kg: usize, ig: usize, x: usize, y: usize) -> &Ciphertext {
        &self.cts[self.index(kg, ig, x, y)]
    }

    pub fn min_level(&self) -> u32 {
        self.cts.iter().map(|c| c.level()).min().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    TypeI,
    TypeII,
}

impl WeightKind {
    pub fn tag(self) -> &'static str {
        match self {
            WeightKind::TypeI => "fl-type1",
            WeightKind::TypeII => "fl-type2",
        }
    }
}

/// Encrypted FC weights. Type I: `rows = o`, `cols = ι'` (input ciphertexts).
/// Type II: `rows = ι`, `cols = ⌈o·n/S⌉` (output ciphertexts). Ciphertext
/// `(i, j)` sits at `i·cols + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights {
    pub kind: WeightKind,
    pub outputs: usize,
    pub inputs: usize,
    pub rows: usize,
    pub cols: usize,
    pub n: usize,
    pub map: Option<FeatureMap>,
    pub cts: Vec<Ciphertext>,
}

impl PackedWeights {
    pub fn get(&self, i: usize, j: usize) -> &Ciphertext {
        &self.cts[i * self.cols + j]
    }

    pub fn min_level(&self) -> u32 {
        self.cts.iter().map(|c| c.level()).min().unwrap_or(0)
    }
}

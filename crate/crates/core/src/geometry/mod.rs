//! Layer configuration, combined-layer geometry and level budget.

mod presets;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lhe::LheParams;

pub use presets::{preset, preset_names, Preset};

/// One convolutional layer: α channels of β×β input, ε filters γ×γ, stride δ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub input_side: usize,
    pub filters: usize,
    pub filter_side: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(channels: usize, input_side: usize, filters: usize, filter_side: usize, stride: usize) -> Self {
        ConvSpec { channels, input_side, filters, filter_side, stride }
    }

    /// Side of the valid-convolution output map.
    pub fn output_side(&self) -> usize {
        1 + (self.input_side - self.filter_side) / self.stride
    }

    /// ε·α·γ², the number of kernel parameters.
    pub fn kernel_params(&self) -> usize {
        self.filters * self.channels * self.filter_side * self.filter_side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcSpec {
    pub inputs: usize,
    pub outputs: usize,
}

impl FcSpec {
    pub const fn new(inputs: usize, outputs: usize) -> Self {
        FcSpec { inputs, outputs }
    }
}

/// A validated CNN: `c ≥ 1` conv layers, `f ≥ 1` FC layers, `n` parallel inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    conv: Vec<ConvSpec>,
    fc: Vec<FcSpec>,
    n: usize,
}

impl CnnConfig {
    pub fn new(conv: Vec<ConvSpec>, fc: Vec<FcSpec>, n: usize) -> Result<Self> {
        let cfg = CnnConfig { conv, fc, n };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.conv.is_empty() || self.fc.is_empty() {
            return bad("need at least one conv and one fully-connected layer".into());
        }
        if self.n == 0 || !self.n.is_power_of_two() {
            return bad(format!("n = {} must be a power of two", self.n));
        }
        for (l, c) in self.conv.iter().enumerate() {
            if c.channels == 0 || c.filters == 0 || c.filter_side == 0 || c.stride == 0 || c.input_side == 0 {
                return bad(format!("conv layer {l}: all dimensions must be positive"));
            }
            if c.filter_side > c.input_side {
                return bad(format!("conv layer {l}: filter side {} exceeds input side {}", c.filter_side, c.input_side));
            }
            if l > 0 {
                let p = &self.conv[l - 1];
                if c.channels != p.filters {
                    return bad(format!("conv layer {l}: {} channels but previous layer has {} filters", c.channels, p.filters));
                }
                if c.input_side != p.output_side() {
                    return bad(format!("conv layer {l}: input side {} but previous output side is {}", c.input_side, p.output_side()));
                }
            }
        }
        let last = self.conv.last().unwrap();
        let flat = last.filters * last.output_side() * last.output_side();
        if self.fc[0].inputs != flat {
            return bad(format!("first fully-connected layer has {} inputs, conv stack yields {flat}", self.fc[0].inputs));
        }
        for (l, w) in self.fc.iter().enumerate() {
            if w.inputs == 0 || w.outputs == 0 {
                return bad(format!("fully-connected layer {l}: dimensions must be positive"));
            }
            if l > 0 && w.inputs != self.fc[l - 1].outputs {
                return bad(format!(
                    "fully-connected layer {l}: {} inputs but previous layer has {} outputs",
                    w.inputs,
                    self.fc[l - 1].outputs
                ));
            }
        }
        Ok(())
    }

    pub fn conv(&self) -> &[ConvSpec] {
        &self.conv
    }

    pub fn fc(&self) -> &[FcSpec] {
        &self.fc
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn with_n(&self, n: usize) -> Result<Self> {
        CnnConfig::new(self.conv.clone(), self.fc.clone(), n)
    }

    pub fn c(&self) -> usize {
        self.conv.len()
    }

    pub fn f(&self) -> usize {
        self.fc.len()
    }

    pub fn classes(&self) -> usize {
        self.fc.last().unwrap().outputs
    }

    /// Pixels per image, α₀·β₀².
    pub fn image_len(&self) -> usize {
        let c = &self.conv[0];
        c.channels * c.input_side * c.input_side
    }

    /// Number of square-activated layers in a forward pass (all but the final FC).
    pub fn activations(&self) -> usize {
        self.c() + self.f() - 1
    }

    /// Multiplicative depth of one forward pass.
    pub fn forward_depth(&self) -> u32 {
        (2 * (self.c() + self.f()) - 1) as u32
    }
}

/// Combined kernel sides, strides and pi-set grid for a CNN under given slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinedGeometry {
    /// γ̃_l for l = 0..=c, with γ̃_c = 1 (the final conv output grid).
    pub kernel_sides: Vec<usize>,
    /// δ̃_l for l = 0..=c, with δ̃_c = 1.
    pub strides: Vec<usize>,
    /// β̃₀, pi-set positions per ciphertext side.
    pub grid_side: usize,
    pub packing_factor: usize,
    pub levels: u32,
    pub slots: usize,
    pub n: usize,
}

impl CombinedGeometry {
    pub fn c(&self) -> usize {
        self.kernel_sides.len() - 1
    }

    /// Pi-sets per ciphertext, β̃₀².
    pub fn cells(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Slots occupied by one unreplicated segment, n·β̃₀².
    pub fn segment_len(&self) -> usize {
        self.n * self.cells()
    }

    /// Blocks of n slots per ciphertext, S/n.
    pub fn blocks(&self) -> usize {
        self.slots / self.n
    }
}

/// Computes γ̃, δ̃, β̃₀ and r.
pub fn combined_geometry(cfg: &CnnConfig, params: &LheParams) -> Result<CombinedGeometry> {
    let conv = cfg.conv();
    let c = conv.len();
    let mut kernel_sides = vec![1usize; c + 1];
    let mut strides = vec![1usize; c + 1];
    for l in 0..c {
        let mut g = 1usize;
        let mut prod = 1usize;
        for i in l..c {
            g += (conv[i].filter_side - 1) * prod;
            prod *= conv[i].stride;
        }
        kernel_sides[l] = g;
        strides[l] = prod;
    }
    let beta0 = conv[0].input_side;
    if kernel_sides[0] > beta0 {
        return Err(Error::Config(format!("combined kernel side {} exceeds input side {beta0}", kernel_sides[0])));
    }
    let grid_side = 1 + (beta0 - kernel_sides[0]) / strides[0];
    let slots = params.slot_count();
    let n = cfg.n();
    if n > slots {
        return Err(Error::Config(format!("n = {n} exceeds slot count {slots}")));
    }
    let r = packing_factor(slots, n, grid_side)?;
    Ok(CombinedGeometry { kernel_sides, strides, grid_side, packing_factor: r, levels: params.max_level(), slots, n })
}

/// Largest power of two r with r·n·β̃₀² ≤ S.
pub fn packing_factor(slots: usize, n: usize, grid_side: usize) -> Result<usize> {
    let need = n * grid_side * grid_side;
    if need == 0 || need > slots {
        return Err(Error::Config(format!("n·β̃₀² = {need} does not fit in {slots} slots")));
    }
    let q = slots / need;
    Ok(1usize << (usize::BITS - 1 - q.leading_zeros()))
}

/// L = 2(c+f).
pub fn level_budget(c: usize, f: usize) -> u32 {
    assert!(c >= 1 && f >= 1);
    (2 * (c + f)) as u32
}

/// Slot layout used by one conv layer's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvPacking {
    Basic,
    CrossChannel,
    CrossFilter,
}

impl ConvPacking {
    pub fn tag(self) -> &'static str {
        match self {
            ConvPacking::Basic => "conv-basic",
            ConvPacking::CrossChannel => "conv-cross-channel",
            ConvPacking::CrossFilter => "conv-cross-filter",
        }
    }
}

/// Per-layer packing for replication factor `r`: all basic when r = 1,
/// otherwise alternating cross-channel / cross-filter, starting with
/// cross-channel when the input has several channels.
pub fn conv_packings(cfg: &CnnConfig, r: usize) -> Vec<ConvPacking> {
    let c = cfg.c();
    if r <= 1 {
        return vec![ConvPacking::Basic; c];
    }
    let mut cur = if cfg.conv()[0].channels > 1 { ConvPacking::CrossChannel } else { ConvPacking::CrossFilter };
    let mut out = Vec::with_capacity(c);
    for _ in 0..c {
        out.push(cur);
        cur = match cur {
            ConvPacking::CrossChannel => ConvPacking::CrossFilter,
            _ => ConvPacking::CrossChannel,
        };
    }
    out
}

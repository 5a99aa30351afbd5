use super::{CnnConfig, ConvSpec, FcSpec};

/// A named model with the slot count and level budget it ships with.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub cfg: CnnConfig,
    pub slots: usize,
    pub levels: u32,
    /// True when the layer hyperparameters are a plausible choice rather
    /// than ones pinned down by known operation counts.
    pub assumed: bool,
}

const NAMES: [&str; 10] = ["example", "cnn-1-2", "cnn-2-1", "cnn-2-2", "cnn-3-1", "cnn-3-2", "cnn-4-1", "cnn-4-2", "refining", "shift"];

pub fn preset_names() -> &'static [&'static str] {
    &NAMES
}

fn cnn_4_convs() -> Vec<ConvSpec> {
    vec![ConvSpec::new(1, 28, 16, 5, 2), ConvSpec::new(16, 12, 4, 3, 1), ConvSpec::new(4, 10, 16, 3, 2), ConvSpec::new(16, 4, 4, 3, 1)]
}

fn cnn_3_convs() -> Vec<ConvSpec> {
    vec![ConvSpec::new(1, 28, 16, 4, 2), ConvSpec::new(16, 13, 8, 3, 2), ConvSpec::new(8, 6, 4, 3, 1)]
}

fn cnn_2_convs() -> Vec<ConvSpec> {
    vec![ConvSpec::new(1, 28, 16, 7, 2), ConvSpec::new(16, 11, 4, 5, 2)]
}

pub fn preset(name: &str) -> Option<Preset> {
    let (conv, fc, n, slots, levels, assumed) = match name {
        "example" => {
            (vec![ConvSpec::new(1, 8, 2, 2, 2), ConvSpec::new(2, 4, 1, 2, 2)], vec![FcSpec::new(4, 2), FcSpec::new(2, 2)], 2, 8, 8, false)
        }
        "cnn-1-2" => (vec![ConvSpec::new(1, 28, 4, 7, 3)], vec![FcSpec::new(256, 64), FcSpec::new(64, 10)], 64, 4096, 6, false),
        "cnn-2-1" => (cnn_2_convs(), vec![FcSpec::new(64, 10)], 16, 4096, 6, false),
        "cnn-2-2" => (cnn_2_convs(), vec![FcSpec::new(64, 64), FcSpec::new(64, 10)], 32, 8192, 7, true),
        "cnn-3-1" => (cnn_3_convs(), vec![FcSpec::new(64, 10)], 64, 8192, 8, true),
        "cnn-3-2" => (cnn_3_convs(), vec![FcSpec::new(64, 64), FcSpec::new(64, 10)], 16, 8192, 9, true),
        "cnn-4-1" => (cnn_4_convs(), vec![FcSpec::new(16, 10)], 128, 8192, 10, true),
        "cnn-4-2" => (cnn_4_convs(), vec![FcSpec::new(16, 64), FcSpec::new(64, 10)], 128, 8192, 11, false),
        "refining" => (
            vec![ConvSpec::new(1, 28, 4, 3, 3), ConvSpec::new(4, 9, 4, 2, 1)],
            vec![FcSpec::new(256, 32), FcSpec::new(32, 10)],
            128,
            8192,
            10,
            false,
        ),
        // desk-scale stand-in for label-shift refining on 8x8 synthetic digits
        "shift" => (vec![ConvSpec::new(1, 8, 4, 2, 2)], vec![FcSpec::new(64, 16), FcSpec::new(16, 10)], 16, 256, 10, true),
        _ => return None,
    };
    let cfg = CnnConfig::new(conv, fc, n).expect("preset configs are valid");
    let name = NAMES.iter().find(|n| **n == name).copied().unwrap();
    Some(Preset { name, cfg, slots, levels, assumed })
}

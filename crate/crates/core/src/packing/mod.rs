//! Ciphertext layouts for inputs, filters and FC weights, plus the selector
//! and signed-rotation machinery for gradient packing.

mod encode;
mod layout;
mod rotation;

pub use encode::{
    encode_conv_filters, encode_conv_inputs, encode_filters, encode_filters_cross_channel, encode_filters_cross_filter,
    encode_fl_weights_type1, encode_fl_weights_type2, encode_inputs, encode_inputs_cross_channel, encode_inputs_replicated,
};
pub use layout::{FeatureMap, PackedFilters, PackedTensor, PackedWeights, SlotLayout, TensorLayout, WeightKind};
pub use rotation::{
    aggregate, block_rotate_sum, compute_rotation_plan, make_selector, make_selector_blocks, spread, RotationPlan, Selector,
};

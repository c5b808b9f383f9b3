//! Multi-resolution convolution with adaptive, mask-driven downsampling.
//!
//! A feature map is stored on its full-resolution base grid, with each pixel
//! tagged by the level of the element covering it. Adaptive downsampling
//! coarsens selected blocks, and sparse convolution then runs only on the
//! active elements, with tap spacing matched to the current stage.
//!
//! The crate also provides the regular and dilated reference networks the
//! adaptive variant is checked against, mask generators, file codecs and
//! a verification harness.

pub mod error;
pub mod io;
pub mod masks;
pub mod multires;
pub mod network;
mod par;
pub mod sparse_conv;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use masks::{
    dilate_binary, edge_importance, edge_mask, keypoint_mask, mask_budget_loss, oracle_mask, pool_retain_any,
    stage_masks, BinaryGrid, BudgetParams, KeypointDilation, KeypointSet, LabelMap,
};
pub use multires::{
    adaptive_downsample, adaptive_downsample_stage, densify, extract_level_dense, DownsampleMask, LevelGrid,
    MultiResMap, QuadtreeViolation,
};
pub use network::{
    cost_report, receptive_field_support, receptive_field_supports, run_adaptive, run_dilated, run_regular,
    run_traced, CostReport, Feature, Item, ItemCost, NetworkSpec, StageStats, SupportMap, Variant,
};
pub use par::is_parallel;
pub use sparse_conv::{count_active_taps, multires_conv};
pub use tensor::{
    conv2d, conv2d_dilated, regular_downsample, sobel_magnitude, ConvLayer, DenseTensor, PatchReducer,
    SOBEL_MAX_MAGNITUDE,
};

//! Convolutional backbone, parameter storage and checkpoints.

pub mod backbone;
pub mod checkpoint;
pub mod params;

pub use backbone::{
    arcface_angles, Backbone, BackboneConfig, BlockConfig, BnMode, ForwardOutput, HeadOutput, InsertionSite,
    SiteHook, BN_MOMENTUM,
};
pub use checkpoint::Checkpoint;
pub use params::{Bound, Param, ParamId, ParamStore};

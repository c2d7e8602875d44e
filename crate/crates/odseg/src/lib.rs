//! odseg: a desk-scale 3D tumor-segmentation pipeline.
//!
//! A dual-encoder U-Net whose encoder convolutions can be swapped for
//! omni-dimensional dynamic convolutions (expert kernel banks modulated by
//! four learned attentions), trained with a Dice + cross-entropy objective
//! on synthetic nested-ellipsoid phantoms, with sliding-window inference,
//! connected-component post-processing, and voxel/lesion-wise evaluation.
//!
//! Everything runs on CPU from a single seeded configuration; training,
//! prediction, and evaluation are byte-reproducible.

pub mod layers;
pub mod tensor;

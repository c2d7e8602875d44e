//! Neural building blocks: static and dynamic 3D convolution, instance
//! normalization, trilinear resampling, and cross-attention fusion.
//!
//! Every operation is recorded on a [`Tape`](crate::tensor::Tape) and is
//! differentiable with respect to its parameters and input. Tensors are laid
//! out channel-first without a batch axis: `[c, d, h, w]`.

pub mod attention;
pub mod conv;
pub mod norm;
pub mod odconv;
pub mod resample;

pub use attention::{cross_attention_fuse, CrossAttentionParams, CrossAttentionVars};
pub use conv::{conv3d, conv3d_direct, conv3d_naive, conv_out_extent, transposed_conv3d, Conv3DParams};
pub use norm::instance_norm;
pub use odconv::{
    assemble_effective_kernel, odconv3d_forward, odconv_attentions, OdAttentions, OdConvSpec,
    OdConvVars, ODConvParams,
};
pub use resample::{downsample_trilinear, upsample_trilinear};

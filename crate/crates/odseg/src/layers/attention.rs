//! Single-head cross-attention fusing two feature volumes on the same grid.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Element, Result, Tensor, TensorError};

/// Projections of one cross-attention block. Queries read the primary
/// stream, keys/values the secondary; scores are scaled by 1/sqrt(d_model).
#[derive(Clone, Debug)]
pub struct CrossAttentionParams<E: Element> {
    /// `[d_model, d_feat]`
    pub query_proj: Tensor<E>,
    pub key_proj: Tensor<E>,
    pub value_proj: Tensor<E>,
    /// `[d_feat, d_model]`
    pub output_proj: Tensor<E>,
}

impl<E: Element> CrossAttentionParams<E> {
    pub fn init(d_feat: usize, d_model: usize, rng: &mut impl Rng) -> Result<Self> {
        let draw = |fan_in: usize, shape: &[usize], rng: &mut dyn rand::RngCore| -> Result<Tensor<E>> {
            let std = (1.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std is finite");
            let count: usize = shape.iter().product();
            Tensor::from_data(shape, (0..count).map(|_| E::from_f64(normal.sample(rng))).collect())
        };
        Ok(CrossAttentionParams {
            query_proj: draw(d_feat, &[d_model, d_feat], rng)?,
            key_proj: draw(d_feat, &[d_model, d_feat], rng)?,
            value_proj: draw(d_feat, &[d_model, d_feat], rng)?,
            output_proj: draw(d_model, &[d_feat, d_model], rng)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let qs = self.query_proj.shape();
        if qs.len() != 2 {
            return Err(TensorError::RankMismatch { op: "cross_attention", expected: 2, shape: qs.to_vec() });
        }
        let (d_model, d_feat) = (qs[0], qs[1]);
        for (name, t, want) in [
            ("key_proj", &self.key_proj, [d_model, d_feat]),
            ("value_proj", &self.value_proj, [d_model, d_feat]),
            ("output_proj", &self.output_proj, [d_feat, d_model]),
        ] {
            if t.shape() != want {
                return Err(TensorError::Invalid {
                    op: "cross_attention",
                    msg: format!("{name} has shape {:?}, expected {want:?}", t.shape()),
                });
            }
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.query_proj.shape()[0]
    }

    pub fn d_feat(&self) -> usize {
        self.query_proj.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<E>, requires_grad: bool) -> CrossAttentionVars {
        CrossAttentionVars {
            query_proj: tape.leaf(self.query_proj.clone(), requires_grad),
            key_proj: tape.leaf(self.key_proj.clone(), requires_grad),
            value_proj: tape.leaf(self.value_proj.clone(), requires_grad),
            output_proj: tape.leaf(self.output_proj.clone(), requires_grad),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionVars {
    pub query_proj: Var,
    pub key_proj: Var,
    pub value_proj: Var,
    pub output_proj: Var,
}

/// Fuse `kv_feat` into `q_feat` (both `[c, d, h, w]` on the same grid):
/// voxels become tokens, queries come from `q_feat`, keys/values from
/// `kv_feat`, and the projected attention output is added residually onto
/// `q_feat`.
pub fn cross_attention_fuse<E: Element>(
    tape: &mut Tape<E>,
    q_feat: Var,
    kv_feat: Var,
    vars: &CrossAttentionVars,
) -> Result<Var> {
    let qs = tape.value(q_feat).shape().to_vec();
    let ks = tape.value(kv_feat).shape().to_vec();
    if qs.len() != 4 {
        return Err(TensorError::RankMismatch { op: "cross_attention_fuse", expected: 4, shape: qs });
    }
    if qs != ks {
        return Err(TensorError::ShapeMismatch { op: "cross_attention_fuse", a: qs, b: ks });
    }
    let c = qs[0];
    let tokens = qs[1] * qs[2] * qs[3];
    let d_feat = tape.value(vars.query_proj).shape()[1];
    if d_feat != c {
        return Err(TensorError::Invalid {
            op: "cross_attention_fuse",
            msg: format!("feature dim {c} does not match projection d_feat {d_feat}"),
        });
    }
    let d_model = tape.value(vars.query_proj).shape()[0];
    let scale = 1.0 / (d_model as f64).sqrt();

    // [c, T] -> [T, c] token matrices
    let q_flat = tape.reshape(q_feat, &[c, tokens])?;
    let q_tok = tape.transpose2d(q_flat)?;
    let kv_flat = tape.reshape(kv_feat, &[c, tokens])?;
    let kv_tok = tape.transpose2d(kv_flat)?;

    let wq_t = tape.transpose2d(vars.query_proj)?;
    let wk_t = tape.transpose2d(vars.key_proj)?;
    let wv_t = tape.transpose2d(vars.value_proj)?;
    let q = tape.matmul(q_tok, wq_t)?; // [T, d_model]
    let k = tape.matmul(kv_tok, wk_t)?;
    let v = tape.matmul(kv_tok, wv_t)?;

    let k_t = tape.transpose2d(k)?;
    let scores = tape.matmul(q, k_t)?; // [T, T]
    let scores = tape.scale(scores, scale)?;
    let attn = tape.softmax(scores, 1, 1.0)?;
    let mixed = tape.matmul(attn, v)?; // [T, d_model]

    let wo_t = tape.transpose2d(vars.output_proj)?;
    let update_tok = tape.matmul(mixed, wo_t)?; // [T, c]
    let update_flat = tape.transpose2d(update_tok)?;
    let update = tape.reshape(update_flat, &qs_array(&tape.value(q_feat).shape().to_vec()))?;
    tape.add(q_feat, update)
}

fn qs_array(shape: &[usize]) -> Vec<usize> {
    shape.to_vec()
}

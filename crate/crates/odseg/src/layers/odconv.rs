//! Omni-dimensional dynamic 3D convolution.
//!
//! A bank of `n` expert kernels is modulated by four attentions computed in
//! parallel from one squeezed descriptor of the input: spatial (one weight
//! per kernel tap, length k^3), input-channel, output-filter, and expert.
//! The modulated experts are summed into a single effective kernel which is
//! then applied as one static convolution — mathematically identical to
//! modulating the input four times for a batch of one, with a simpler
//! backward.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::conv3d;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Element, Result, Tensor, TensorError};

/// Architecture knobs of one ODConv3D layer.
#[derive(Clone, Copy, Debug)]
pub struct OdConvSpec {
    /// Number of expert kernels (n).
    pub experts: usize,
    /// Squeeze reduction ratio (r); the shared branch maps c_in to
    /// max(1, c_in / r) features.
    pub reduction: usize,
    /// Softmax temperature of the expert attention.
    pub temperature: f64,
}

impl Default for OdConvSpec {
    fn default() -> Self {
        OdConvSpec { experts: 4, reduction: 4, temperature: 30.0 }
    }
}

impl OdConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.experts < 1 {
            return Err(TensorError::Invalid { op: "odconv", msg: "expert count must be >= 1".into() });
        }
        if self.reduction < 1 {
            return Err(TensorError::Invalid { op: "odconv", msg: "reduction ratio must be >= 1".into() });
        }
        if !(self.temperature > 0.0) {
            return Err(TensorError::BadTemperature(self.temperature));
        }
        Ok(())
    }

    pub fn reduced_channels(&self, c_in: usize) -> usize {
        (c_in / self.reduction).max(1)
    }
}

/// Parameter bank of one ODConv3D layer: the expert kernels, the shared
/// squeeze branch, and the four attention heads.
#[derive(Clone, Debug)]
pub struct ODConvParams<E: Element> {
    /// `[n, c_out, c_in, k, k, k]`
    pub experts: Tensor<E>,
    /// `[c_red, c_in]` / `[c_red]`
    pub reduction_weight: Tensor<E>,
    pub reduction_bias: Tensor<E>,
    /// spatial head: `[k^3, c_red]` / `[k^3]`
    pub spatial_weight: Tensor<E>,
    pub spatial_bias: Tensor<E>,
    /// input-channel head: `[c_in, c_red]` / `[c_in]`
    pub channel_weight: Tensor<E>,
    pub channel_bias: Tensor<E>,
    /// output-filter head: `[c_out, c_red]` / `[c_out]`
    pub filter_weight: Tensor<E>,
    pub filter_bias: Tensor<E>,
    /// expert head: `[n, c_red]` / `[n]`
    pub expert_weight: Tensor<E>,
    pub expert_bias: Tensor<E>,
    pub temperature: f64,
    /// `[c_out]`
    pub bias: Tensor<E>,
    pub stride: usize,
    pub padding: usize,
    /// Test hook: bypass sigmoid/softmax and pin all four attentions to 1.
    pub pin_attentions: bool,
}

impl<E: Element> ODConvParams<E> {
    /// He-initialized experts and squeeze branch; zero attention heads, so
    /// the initial attentions are sigmoid(0) = 0.5 and a uniform expert mix.
    pub fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        spec: OdConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let n = spec.experts;
        let c_red = spec.reduced_channels(c_in);
        let he = |fan_in: usize, shape: &[usize], rng: &mut dyn rand::RngCore| -> Result<Tensor<E>> {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std is finite");
            let count: usize = shape.iter().product();
            let data: Vec<E> =
                (0..count).map(|_| E::from_f64(normal.sample(rng))).collect();
            Tensor::from_data(shape, data)
        };
        let params = ODConvParams {
            experts: he(c_in * k * k * k, &[n, c_out, c_in, k, k, k], rng)?,
            reduction_weight: he(c_in, &[c_red, c_in], rng)?,
            reduction_bias: Tensor::zeros(&[c_red])?,
            spatial_weight: Tensor::zeros(&[k * k * k, c_red])?,
            spatial_bias: Tensor::zeros(&[k * k * k])?,
            channel_weight: Tensor::zeros(&[c_in, c_red])?,
            channel_bias: Tensor::zeros(&[c_in])?,
            filter_weight: Tensor::zeros(&[c_out, c_red])?,
            filter_bias: Tensor::zeros(&[c_out])?,
            expert_weight: Tensor::zeros(&[n, c_red])?,
            expert_bias: Tensor::zeros(&[n])?,
            temperature: spec.temperature,
            bias: Tensor::zeros(&[c_out])?,
            stride,
            padding,
            pin_attentions: false,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let es = self.experts.shape();
        if es.len() != 6 {
            return Err(TensorError::RankMismatch { op: "odconv experts", expected: 6, shape: es.to_vec() });
        }
        let (n, c_out, c_in, k) = (es[0], es[1], es[2], es[3]);
        if es[4] != k || es[5] != k {
            return Err(TensorError::Invalid { op: "odconv", msg: format!("kernel must be cubic, got {es:?}") });
        }
        if n < 1 {
            return Err(TensorError::Invalid { op: "odconv", msg: "expert count must be >= 1".into() });
        }
        if !(self.temperature > 0.0) {
            return Err(TensorError::BadTemperature(self.temperature));
        }
        let c_red = self.reduction_weight.shape()[0];
        let checks: [(&'static str, &Tensor<E>, Vec<usize>); 10] = [
            ("reduction_weight", &self.reduction_weight, vec![c_red, c_in]),
            ("reduction_bias", &self.reduction_bias, vec![c_red]),
            ("spatial_weight", &self.spatial_weight, vec![k * k * k, c_red]),
            ("spatial_bias", &self.spatial_bias, vec![k * k * k]),
            ("channel_weight", &self.channel_weight, vec![c_in, c_red]),
            ("channel_bias", &self.channel_bias, vec![c_in]),
            ("filter_weight", &self.filter_weight, vec![c_out, c_red]),
            ("filter_bias", &self.filter_bias, vec![c_out]),
            ("expert_weight", &self.expert_weight, vec![n, c_red]),
            ("expert_bias", &self.expert_bias, vec![n]),
        ];
        for (name, t, want) in checks {
            if t.shape() != want.as_slice() {
                return Err(TensorError::Invalid {
                    op: "odconv",
                    msg: format!("{name} has shape {:?}, expected {want:?}", t.shape()),
                });
            }
        }
        if self.bias.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch { op: "odconv bias", a: self.bias.shape().to_vec(), b: vec![c_out] });
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let es = self.experts.shape();
        (es[0], es[1], es[2], es[3]) // (n, c_out, c_in, k)
    }

    /// Insert every parameter tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<E>, requires_grad: bool) -> OdConvVars {
        OdConvVars {
            experts: tape.leaf(self.experts.clone(), requires_grad),
            reduction_weight: tape.leaf(self.reduction_weight.clone(), requires_grad),
            reduction_bias: tape.leaf(self.reduction_bias.clone(), requires_grad),
            spatial_weight: tape.leaf(self.spatial_weight.clone(), requires_grad),
            spatial_bias: tape.leaf(self.spatial_bias.clone(), requires_grad),
            channel_weight: tape.leaf(self.channel_weight.clone(), requires_grad),
            channel_bias: tape.leaf(self.channel_bias.clone(), requires_grad),
            filter_weight: tape.leaf(self.filter_weight.clone(), requires_grad),
            filter_bias: tape.leaf(self.filter_bias.clone(), requires_grad),
            expert_weight: tape.leaf(self.expert_weight.clone(), requires_grad),
            expert_bias: tape.leaf(self.expert_bias.clone(), requires_grad),
            bias: tape.leaf(self.bias.clone(), requires_grad),
        }
    }
}

/// Tape handles of one ODConv3D layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct OdConvVars {
    pub experts: Var,
    pub reduction_weight: Var,
    pub reduction_bias: Var,
    pub spatial_weight: Var,
    pub spatial_bias: Var,
    pub channel_weight: Var,
    pub channel_bias: Var,
    pub filter_weight: Var,
    pub filter_bias: Var,
    pub expert_weight: Var,
    pub expert_bias: Var,
    pub bias: Var,
}

/// The four attentions, each a column vector on the tape.
#[derive(Clone, Copy, Debug)]
pub struct OdAttentions {
    /// `[k^3, 1]`, sigmoid
    pub spatial: Var,
    /// `[c_in, 1]`, sigmoid
    pub channel: Var,
    /// `[c_out, 1]`, sigmoid
    pub filter: Var,
    /// `[n, 1]`, temperature softmax (a probability distribution)
    pub expert: Var,
}

fn fc(tape: &mut Tape<impl Element>, w: Var, b: Var, z: Var) -> Result<Var> {
    let len = tape.value(w).shape()[0];
    let wz = tape.matmul(w, z)?;
    let bcol = tape.reshape(b, &[len, 1])?;
    tape.add(wz, bcol)
}

/// Compute the four attentions from one shared squeeze of the input: the
/// global average pool feeds a reduced descriptor `z` and all four heads
/// read the same `z` (the parallel strategy). With `pin` set, all four are
/// constant 1 (test hook).
pub fn odconv_attentions<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    vars: &OdConvVars,
    temperature: f64,
    pin: bool,
) -> Result<OdAttentions> {
    let k3 = tape.value(vars.spatial_weight).shape()[0];
    let c_in = tape.value(vars.channel_weight).shape()[0];
    let c_out = tape.value(vars.filter_weight).shape()[0];
    let n = tape.value(vars.expert_weight).shape()[0];
    if pin {
        let ones = |tape: &mut Tape<E>, len: usize| -> Result<Var> {
            Ok(tape.constant(Tensor::ones(&[len, 1])?))
        };
        return Ok(OdAttentions {
            spatial: ones(tape, k3)?,
            channel: ones(tape, c_in)?,
            filter: ones(tape, c_out)?,
            expert: ones(tape, n)?,
        });
    }
    let squeeze = tape.global_average_pool(x)?;
    let squeeze = tape.reshape(squeeze, &[c_in, 1])?;
    let pre = fc(tape, vars.reduction_weight, vars.reduction_bias, squeeze)?;
    let z = tape.leaky_relu(pre, 0.01)?;
    let s = fc(tape, vars.spatial_weight, vars.spatial_bias, z)?;
    let c = fc(tape, vars.channel_weight, vars.channel_bias, z)?;
    let f = fc(tape, vars.filter_weight, vars.filter_bias, z)?;
    let w = fc(tape, vars.expert_weight, vars.expert_bias, z)?;
    Ok(OdAttentions {
        spatial: tape.sigmoid(s)?,
        channel: tape.sigmoid(c)?,
        filter: tape.sigmoid(f)?,
        expert: tape.softmax(w, 0, temperature)?,
    })
}

/// Modulate each expert along its output-filter, input-channel, and spatial
/// axes, weight by the expert attention, and sum:
/// `W_eff = sum_i a_w[i] * (a_f (x) a_c (x) a_s (x) experts[i])`.
/// Linear in each attention. Returns `[c_out, c_in, k, k, k]`.
pub fn assemble_effective_kernel<E: Element>(
    tape: &mut Tape<E>,
    experts: Var,
    attn: &OdAttentions,
) -> Result<Var> {
    let es = tape.value(experts).shape().to_vec();
    if es.len() != 6 {
        return Err(TensorError::RankMismatch { op: "assemble_effective_kernel", expected: 6, shape: es });
    }
    let (n, c_out, c_in, k) = (es[0], es[1], es[2], es[3]);
    let aw = tape.reshape(attn.expert, &[n, 1, 1, 1, 1, 1])?;
    let af = tape.reshape(attn.filter, &[1, c_out, 1, 1, 1, 1])?;
    let ac = tape.reshape(attn.channel, &[1, 1, c_in, 1, 1, 1])?;
    let as_ = tape.reshape(attn.spatial, &[1, 1, 1, k, k, k])?;
    let m = tape.mul(experts, aw)?;
    let m = tape.mul(m, af)?;
    let m = tape.mul(m, ac)?;
    let m = tape.mul(m, as_)?;
    let summed = tape.reduce_sum(m, &[0], false)?;
    tape.reshape(summed, &[c_out, c_in, k, k, k])
}

/// Full ODConv3D forward: attentions, effective kernel, one static
/// convolution plus bias. Differentiable through both the attention heads
/// and the expert bank.
pub fn odconv3d_forward<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    vars: &OdConvVars,
    temperature: f64,
    stride: usize,
    padding: usize,
    pin_attentions: bool,
) -> Result<Var> {
    let attn = odconv_attentions(tape, x, vars, temperature, pin_attentions)?;
    let w_eff = assemble_effective_kernel(tape, vars.experts, &attn)?;
    conv3d(tape, x, w_eff, Some(vars.bias), stride, padding)
}

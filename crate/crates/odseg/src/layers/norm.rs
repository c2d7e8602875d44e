//! Instance normalization over the spatial axes of a `[c, d, h, w]` tensor.

use crate::tensor::tape::{BackFn, Tape, Var};
use crate::tensor::{Element, Result, Tensor, TensorError};

/// Per-channel zero-mean unit-variance normalization followed by the affine
/// `gamma * x_hat + beta`. Variance is biased (divide by N) and guarded by
/// `eps`.
pub fn instance_norm<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<Var> {
    if !(eps > 0.0) {
        return Err(TensorError::Invalid { op: "instance_norm", msg: format!("eps must be > 0, got {eps}") });
    }
    let xv = tape.value(x);
    if xv.rank() != 4 {
        return Err(TensorError::RankMismatch { op: "instance_norm", expected: 4, shape: xv.shape().to_vec() });
    }
    let c = xv.shape()[0];
    let spatial = xv.numel() / c;
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        let t = tape.value(v);
        if t.shape() != [c] {
            return Err(TensorError::ShapeMismatch { op: "instance_norm", a: t.shape().to_vec(), b: vec![c] });
        }
        let _ = name;
    }
    let eps_e = E::from_f64(eps);
    let inv_n = E::from_f64(1.0 / spatial as f64);
    let xd = xv.data();
    let gd = tape.value(gamma).data();
    let bd = tape.value(beta).data();

    let mut mean = vec![E::ZERO; c];
    let mut inv_std = vec![E::ZERO; c];
    let mut out = vec![E::ZERO; xd.len()];
    for ch in 0..c {
        let xs = &xd[ch * spatial..(ch + 1) * spatial];
        let mut m = E::ZERO;
        for &v in xs {
            m += v;
        }
        m *= inv_n;
        let mut var = E::ZERO;
        for &v in xs {
            let d = v - m;
            var += d * d;
        }
        var *= inv_n;
        let inv = E::ONE / (var + eps_e).sqrt();
        mean[ch] = m;
        inv_std[ch] = inv;
        let (g, b) = (gd[ch], bd[ch]);
        for (o, &v) in out[ch * spatial..(ch + 1) * spatial].iter_mut().zip(xs) {
            *o = g * (v - m) * inv + b;
        }
    }
    let out = Tensor::from_data(xv.shape(), out)?;
    out.check_finite("instance_norm")?;
    let requires =
        tape.requires_grad(x) || tape.requires_grad(gamma) || tape.requires_grad(beta);
    let back: Option<BackFn<E>> = if requires {
        Some(Box::new(move |ctx| {
            let vals = ctx.vals;
            let dy = ctx.dy;
            let xd = vals[x.0].data();
            let gd = vals[gamma.0].data();
            // per-channel sums shared by all three gradients
            let mut sum_dy = vec![E::ZERO; c];
            let mut sum_dy_xhat = vec![E::ZERO; c];
            for ch in 0..c {
                let (m, inv) = (mean[ch], inv_std[ch]);
                let mut s = E::ZERO;
                let mut sx = E::ZERO;
                for i in 0..spatial {
                    let idx = ch * spatial + i;
                    let xhat = (xd[idx] - m) * inv;
                    s += dy[idx];
                    sx += dy[idx] * xhat;
                }
                sum_dy[ch] = s;
                sum_dy_xhat[ch] = sx;
            }
            if ctx.needs(beta) {
                let gb = ctx.slot(beta);
                for ch in 0..c {
                    gb[ch] += sum_dy[ch];
                }
            }
            if ctx.needs(gamma) {
                let gg = ctx.slot(gamma);
                for ch in 0..c {
                    gg[ch] += sum_dy_xhat[ch];
                }
            }
            if ctx.needs(x) {
                let gx = ctx.slot(x);
                for ch in 0..c {
                    let (m, inv, g) = (mean[ch], inv_std[ch], gd[ch]);
                    let mean_dy = sum_dy[ch] * inv_n;
                    let mean_dy_xhat = sum_dy_xhat[ch] * inv_n;
                    for i in 0..spatial {
                        let idx = ch * spatial + i;
                        let xhat = (xd[idx] - m) * inv;
                        gx[idx] += g * inv * (dy[idx] - mean_dy - xhat * mean_dy_xhat);
                    }
                }
            }
        }))
    } else {
        None
    };
    Ok(tape.push_node(out, requires, back))
}

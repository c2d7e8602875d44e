//! 3D convolution: a definition-form reference (`conv3d_naive`), a faster
//! loop-reordered kernel (`conv3d_direct`), the differentiable tape op
//! (`conv3d`), and the transposed convolution that is its exact adjoint.

use crate::tensor::tape::{par_rows, BackFn, Tape, Var};
use crate::tensor::{Element, Result, Tensor, TensorError};

/// Parameters of one static convolution layer. Weight is
/// `[c_out, c_in, k, k, k]` with a cubic kernel, bias `[c_out]`; padding is
/// symmetric zero padding.
#[derive(Clone, Debug)]
pub struct Conv3DParams<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Element> Conv3DParams<E> {
    pub fn new(weight: Tensor<E>, bias: Tensor<E>, stride: usize, padding: usize) -> Result<Self> {
        let p = Conv3DParams { weight, bias, stride, padding };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.len() != 5 {
            return Err(TensorError::RankMismatch { op: "conv3d", expected: 5, shape: ws.to_vec() });
        }
        let k = ws[2];
        if ws[3] != k || ws[4] != k {
            return Err(TensorError::Invalid { op: "conv3d", msg: format!("kernel must be cubic, got {ws:?}") });
        }
        if !(1..=5).contains(&k) {
            return Err(TensorError::Invalid { op: "conv3d", msg: format!("kernel extent {k} outside 1..=5") });
        }
        if self.bias.shape() != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d bias",
                a: self.bias.shape().to_vec(),
                b: vec![ws[0]],
            });
        }
        if self.stride == 0 {
            return Err(TensorError::Invalid { op: "conv3d", msg: "stride must be >= 1".into() });
        }
        Ok(())
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `floor((d + 2·pad − k) / stride) + 1`, or None when non-positive.
pub fn conv_out_extent(d: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = d + 2 * pad;
    if span < k {
        return None;
    }
    Some((span - k) / stride + 1)
}

fn conv_out_shape<E: Element>(
    op: &'static str,
    x: &Tensor<E>,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<[usize; 4]> {
    if x.rank() != 4 {
        return Err(TensorError::RankMismatch { op, expected: 4, shape: x.shape().to_vec() });
    }
    let (d, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let od = conv_out_extent(d, k, stride, pad);
    let oh = conv_out_extent(h, k, stride, pad);
    let ow = conv_out_extent(w, k, stride, pad);
    match (od, oh, ow) {
        (Some(od), Some(oh), Some(ow)) => Ok([c_out, od, oh, ow]),
        _ => Err(TensorError::BadGeometry { op, shape: x.shape().to_vec() }),
    }
}

/// Indices `o` in `[0, domain)` with `0 <= o*s + k_off - p < bound`,
/// half-open.
#[inline]
fn tap_range(domain: usize, bound: usize, s: usize, p: usize, k_off: usize) -> (usize, usize) {
    let lo = if k_off >= p { 0 } else { (p - k_off).div_ceil(s) };
    let hi_num = bound + p;
    if hi_num <= k_off {
        return (0, 0);
    }
    let hi = (((hi_num - 1 - k_off) / s) + 1).min(domain);
    (lo.min(hi), hi)
}

/// Direct seven-nested-loop definition of 3D convolution. Bit-for-bit
/// deterministic; serves as the oracle for `conv3d_direct`.
pub fn conv3d_naive<E: Element>(x: &Tensor<E>, p: &Conv3DParams<E>) -> Result<Tensor<E>> {
    p.validate()?;
    if x.shape()[0] != p.c_in() {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_naive",
            a: x.shape().to_vec(),
            b: p.weight.shape().to_vec(),
        });
    }
    let k = p.kernel();
    let (s, pad) = (p.stride, p.padding);
    let os = conv_out_shape("conv3d_naive", x, p.c_out(), k, s, pad)?;
    let [c_out, od, oh, ow] = os;
    let (c_in, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (xd, wd, bd) = (x.data(), p.weight.data(), p.bias.data());
    let mut out = vec![E::ZERO; c_out * od * oh * ow];
    let mut oi = 0;
    for co in 0..c_out {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[co];
                    for ci in 0..c_in {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let zi = (oz * s + kz) as isize - pad as isize;
                                    let yi = (oy * s + ky) as isize - pad as isize;
                                    let xi = (ox * s + kx) as isize - pad as isize;
                                    if zi < 0 || yi < 0 || xi < 0 {
                                        continue;
                                    }
                                    let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
                                    if zi >= d || yi >= h || xi >= w {
                                        continue;
                                    }
                                    let xv = xd[((ci * d + zi) * h + yi) * w + xi];
                                    let wv = wd[(((co * c_in + ci) * k + kz) * k + ky) * k + kx];
                                    acc += wv * xv;
                                }
                            }
                        }
                    }
                    out[oi] = acc;
                    oi += 1;
                }
            }
        }
    }
    Tensor::from_data(&os, out)
}

/// Loop-reordered convolution kernel. Each output channel slab is filled by
/// one serial pass, so results are identical for any thread count.
#[allow(clippy::too_many_arguments)]
fn conv3d_kernel<E: Element>(
    xd: &[E],
    in_shape: [usize; 4],
    wd: &[E],
    bias: Option<&[E]>,
    k: usize,
    s: usize,
    p: usize,
    out: &mut [E],
    out_shape: [usize; 4],
) {
    let [c_in, d, h, w] = in_shape;
    let [c_out, od, oh, ow] = out_shape;
    let spatial_out = od * oh * ow;
    let work = c_out * spatial_out * c_in * k * k * k;
    par_rows(out, spatial_out, work, |co, slab| {
        if let Some(b) = bias {
            slab.fill(b[co]);
        }
        for ci in 0..c_in {
            let x_ch = &xd[ci * d * h * w..(ci + 1) * d * h * w];
            for kz in 0..k {
                let (zlo, zhi) = tap_range(od, d, s, p, kz);
                for ky in 0..k {
                    let (ylo, yhi) = tap_range(oh, h, s, p, ky);
                    for kx in 0..k {
                        let (xlo, xhi) = tap_range(ow, w, s, p, kx);
                        let wv = wd[(((co * c_in + ci) * k + kz) * k + ky) * k + kx];
                        for oz in zlo..zhi {
                            let zi = oz * s + kz - p;
                            for oy in ylo..yhi {
                                let yi = oy * s + ky - p;
                                let in_row = (zi * h + yi) * w;
                                let out_row = (oz * oh + oy) * ow;
                                for ox in xlo..xhi {
                                    let xi = ox * s + kx - p;
                                    slab[out_row + ox] += wv * x_ch[in_row + xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Convolution without tape recording; identical math to [`conv3d`].
pub fn conv3d_direct<E: Element>(x: &Tensor<E>, p: &Conv3DParams<E>) -> Result<Tensor<E>> {
    p.validate()?;
    if x.shape()[0] != p.c_in() {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_direct",
            a: x.shape().to_vec(),
            b: p.weight.shape().to_vec(),
        });
    }
    let k = p.kernel();
    let os = conv_out_shape("conv3d_direct", x, p.c_out(), k, p.stride, p.padding)?;
    let mut out = vec![E::ZERO; os.iter().product()];
    let in_shape = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    conv3d_kernel(x.data(), in_shape, p.weight.data(), Some(p.bias.data()), k, p.stride, p.padding, &mut out, os);
    let t = Tensor::from_data(&os, out)?;
    t.check_finite("conv3d_direct")?;
    Ok(t)
}

/// Differentiable convolution recorded on the tape; backward produces
/// gradients for the input, weight, and bias.
pub fn conv3d<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xv = tape.value(x);
    let wv = tape.value(weight);
    if wv.rank() != 5 {
        return Err(TensorError::RankMismatch { op: "conv3d", expected: 5, shape: wv.shape().to_vec() });
    }
    let (c_out, c_in, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
    if wv.shape()[3] != k || wv.shape()[4] != k {
        return Err(TensorError::Invalid { op: "conv3d", msg: format!("kernel must be cubic, got {:?}", wv.shape()) });
    }
    if xv.rank() != 4 || xv.shape()[0] != c_in {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            a: xv.shape().to_vec(),
            b: wv.shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        let bv = tape.value(b);
        if bv.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch { op: "conv3d bias", a: bv.shape().to_vec(), b: vec![c_out] });
        }
    }
    let os = conv_out_shape("conv3d", xv, c_out, k, stride, padding)?;
    let in_shape = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
    let mut out = vec![E::ZERO; os.iter().product()];
    {
        let bd = bias.map(|b| tape.value(b).data());
        conv3d_kernel(tape.value(x).data(), in_shape, tape.value(weight).data(), bd, k, stride, padding, &mut out, os);
    }
    let out = Tensor::from_data(&os, out)?;
    out.check_finite("conv3d")?;
    let requires = tape.requires_grad(x)
        || tape.requires_grad(weight)
        || bias.map(|b| tape.requires_grad(b)).unwrap_or(false);
    let back: Option<BackFn<E>> = if requires {
        Some(Box::new(move |ctx| {
            let vals = ctx.vals;
            let dy = ctx.dy;
            let [c_in, d, h, w] = in_shape;
            let [c_out, od, oh, ow] = os;
            let spatial_out = od * oh * ow;
            let xd = vals[x.0].data();
            let wd = vals[weight.0].data();
            let work = c_out * spatial_out * c_in * k * k * k;
            if ctx.needs(weight) {
                // dW[co,ci,kz,ky,kx] = sum over valid output positions of
                // x[ci, o*s+k-p] * dy[co, o]; one thread owns each co slab.
                let gw = ctx.slot(weight);
                par_rows(gw, c_in * k * k * k, work, |co, wslab| {
                    let dy_ch = &dy[co * spatial_out..(co + 1) * spatial_out];
                    for ci in 0..c_in {
                        let x_ch = &xd[ci * d * h * w..(ci + 1) * d * h * w];
                        for kz in 0..k {
                            let (zlo, zhi) = tap_range(od, d, stride, padding, kz);
                            for ky in 0..k {
                                let (ylo, yhi) = tap_range(oh, h, stride, padding, ky);
                                for kx in 0..k {
                                    let (xlo, xhi) = tap_range(ow, w, stride, padding, kx);
                                    let mut acc = E::ZERO;
                                    for oz in zlo..zhi {
                                        let zi = oz * stride + kz - padding;
                                        for oy in ylo..yhi {
                                            let yi = oy * stride + ky - padding;
                                            let in_row = (zi * h + yi) * w;
                                            let out_row = (oz * oh + oy) * ow;
                                            for ox in xlo..xhi {
                                                let xi = ox * stride + kx - padding;
                                                acc += x_ch[in_row + xi] * dy_ch[out_row + ox];
                                            }
                                        }
                                    }
                                    wslab[((ci * k + kz) * k + ky) * k + kx] += acc;
                                }
                            }
                        }
                    }
                });
            }
            if let Some(b) = bias {
                if ctx.needs(b) {
                    let gb = ctx.slot(b);
                    for co in 0..c_out {
                        let mut acc = E::ZERO;
                        for v in &dy[co * spatial_out..(co + 1) * spatial_out] {
                            acc += *v;
                        }
                        gb[co] += acc;
                    }
                }
            }
            if ctx.needs(x) {
                // dX[ci, i] = sum over co,k of w[co,ci,k] * dy[co, o(i,k)];
                // one thread owns each ci slab.
                let gx = ctx.slot(x);
                par_rows(gx, d * h * w, work, |ci, xslab| {
                    for co in 0..c_out {
                        let dy_ch = &dy[co * spatial_out..(co + 1) * spatial_out];
                        for kz in 0..k {
                            let (zlo, zhi) = tap_range(od, d, stride, padding, kz);
                            for ky in 0..k {
                                let (ylo, yhi) = tap_range(oh, h, stride, padding, ky);
                                for kx in 0..k {
                                    let (xlo, xhi) = tap_range(ow, w, stride, padding, kx);
                                    let wv = wd[(((co * c_in + ci) * k + kz) * k + ky) * k + kx];
                                    for oz in zlo..zhi {
                                        let zi = oz * stride + kz - padding;
                                        for oy in ylo..yhi {
                                            let yi = oy * stride + ky - padding;
                                            let in_row = (zi * h + yi) * w;
                                            let out_row = (oz * oh + oy) * ow;
                                            for ox in xlo..xhi {
                                                let xi = ox * stride + kx - padding;
                                                xslab[in_row + xi] += wv * dy_ch[out_row + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }))
    } else {
        None
    };
    Ok(tape.push_node(out, requires, back))
}

/// Transposed convolution, the adjoint of [`conv3d`] for the same stride and
/// padding: `<conv3d(x), y> == <x, transposed_conv3d(y)>` when biases are
/// zero and the geometry is compatible. Weight layout is
/// `[c_in, c_out, k, k, k]` (input channels of this op first), so the same
/// weight tensor can serve both sides of the identity.
pub fn transposed_conv3d<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xv = tape.value(x);
    let wv = tape.value(weight);
    if wv.rank() != 5 {
        return Err(TensorError::RankMismatch { op: "transposed_conv3d", expected: 5, shape: wv.shape().to_vec() });
    }
    let (c_in, c_out, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
    if wv.shape()[3] != k || wv.shape()[4] != k {
        return Err(TensorError::Invalid {
            op: "transposed_conv3d",
            msg: format!("kernel must be cubic, got {:?}", wv.shape()),
        });
    }
    if xv.rank() != 4 || xv.shape()[0] != c_in {
        return Err(TensorError::ShapeMismatch {
            op: "transposed_conv3d",
            a: xv.shape().to_vec(),
            b: wv.shape().to_vec(),
        });
    }
    let (d, h, w) = (xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let up = |e: usize| -> Result<usize> {
        let span = (e - 1) * stride + k;
        if span <= 2 * padding {
            return Err(TensorError::BadGeometry { op: "transposed_conv3d", shape: xv.shape().to_vec() });
        }
        Ok(span - 2 * padding)
    };
    let (od, oh, ow) = (up(d)?, up(h)?, up(w)?);
    if let Some(b) = bias {
        let bv = tape.value(b);
        if bv.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "transposed_conv3d bias",
                a: bv.shape().to_vec(),
                b: vec![c_out],
            });
        }
    }
    let os = [c_out, od, oh, ow];
    let in_shape = [c_in, d, h, w];
    let spatial_out = od * oh * ow;
    let work = c_out * d * h * w * c_in * k * k * k;
    let mut out = vec![E::ZERO; c_out * spatial_out];
    {
        let xd = tape.value(x).data();
        let wd = tape.value(weight).data();
        let bd = bias.map(|b| tape.value(b).data());
        par_rows(&mut out, spatial_out, work, |co, slab| {
            if let Some(b) = bd {
                slab.fill(b[co]);
            }
            for ci in 0..c_in {
                let x_ch = &xd[ci * d * h * w..(ci + 1) * d * h * w];
                for kz in 0..k {
                    let (zlo, zhi) = tap_range(d, od, stride, padding, kz);
                    for ky in 0..k {
                        let (ylo, yhi) = tap_range(h, oh, stride, padding, ky);
                        for kx in 0..k {
                            let (xlo, xhi) = tap_range(w, ow, stride, padding, kx);
                            let wv = wd[(((ci * c_out + co) * k + kz) * k + ky) * k + kx];
                            for iz in zlo..zhi {
                                let zo = iz * stride + kz - padding;
                                for iy in ylo..yhi {
                                    let yo = iy * stride + ky - padding;
                                    let in_row = (iz * h + iy) * w;
                                    let out_row = (zo * oh + yo) * ow;
                                    for ix in xlo..xhi {
                                        let xo = ix * stride + kx - padding;
                                        slab[out_row + xo] += wv * x_ch[in_row + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    let out = Tensor::from_data(&os, out)?;
    out.check_finite("transposed_conv3d")?;
    let requires = tape.requires_grad(x)
        || tape.requires_grad(weight)
        || bias.map(|b| tape.requires_grad(b)).unwrap_or(false);
    let back: Option<BackFn<E>> = if requires {
        Some(Box::new(move |ctx| {
            let vals = ctx.vals;
            let dy = ctx.dy;
            let [_, d, h, w] = in_shape;
            let [c_out, od, oh, ow] = os;
            let spatial_out = od * oh * ow;
            let xd = vals[x.0].data();
            let wd = vals[weight.0].data();
            if ctx.needs(weight) {
                // dW[ci,co,k] = sum over input positions of x[ci,i]*dy[co,o];
                // one thread owns each ci slab of dW.
                let gw = ctx.slot(weight);
                par_rows(gw, c_out * k * k * k, work, |ci, wslab| {
                    let x_ch = &xd[ci * d * h * w..(ci + 1) * d * h * w];
                    for co in 0..c_out {
                        let dy_ch = &dy[co * spatial_out..(co + 1) * spatial_out];
                        for kz in 0..k {
                            let (zlo, zhi) = tap_range(d, od, stride, padding, kz);
                            for ky in 0..k {
                                let (ylo, yhi) = tap_range(h, oh, stride, padding, ky);
                                for kx in 0..k {
                                    let (xlo, xhi) = tap_range(w, ow, stride, padding, kx);
                                    let mut acc = E::ZERO;
                                    for iz in zlo..zhi {
                                        let zo = iz * stride + kz - padding;
                                        for iy in ylo..yhi {
                                            let yo = iy * stride + ky - padding;
                                            let in_row = (iz * h + iy) * w;
                                            let out_row = (zo * oh + yo) * ow;
                                            for ix in xlo..xhi {
                                                let xo = ix * stride + kx - padding;
                                                acc += x_ch[in_row + ix] * dy_ch[out_row + xo];
                                            }
                                        }
                                    }
                                    wslab[((co * k + kz) * k + ky) * k + kx] += acc;
                                }
                            }
                        }
                    }
                });
            }
            if let Some(b) = bias {
                if ctx.needs(b) {
                    let gb = ctx.slot(b);
                    for co in 0..c_out {
                        let mut acc = E::ZERO;
                        for v in &dy[co * spatial_out..(co + 1) * spatial_out] {
                            acc += *v;
                        }
                        gb[co] += acc;
                    }
                }
            }
            if ctx.needs(x) {
                let gx = ctx.slot(x);
                par_rows(gx, d * h * w, work, |ci, xslab| {
                    for co in 0..c_out {
                        let dy_ch = &dy[co * spatial_out..(co + 1) * spatial_out];
                        for kz in 0..k {
                            let (zlo, zhi) = tap_range(d, od, stride, padding, kz);
                            for ky in 0..k {
                                let (ylo, yhi) = tap_range(h, oh, stride, padding, ky);
                                for kx in 0..k {
                                    let (xlo, xhi) = tap_range(w, ow, stride, padding, kx);
                                    let wv = wd[(((ci * c_out + co) * k + kz) * k + ky) * k + kx];
                                    for iz in zlo..zhi {
                                        let zo = iz * stride + kz - padding;
                                        for iy in ylo..yhi {
                                            let yo = iy * stride + ky - padding;
                                            let in_row = (iz * h + iy) * w;
                                            let out_row = (zo * oh + yo) * ow;
                                            for ix in xlo..xhi {
                                                let xo = ix * stride + kx - padding;
                                                xslab[in_row + ix] += wv * dy_ch[out_row + xo];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }))
    } else {
        None
    };
    Ok(tape.push_node(out, requires, back))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fdcheck::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_data(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::from_data(&[1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let p = Conv3DParams::new(
            Tensor::from_data(&[1, 1, 1, 1, 1], vec![1.0]).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
            1,
            0,
        )
        .unwrap();
        let y = conv3d_naive(&x, &p).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_input_broadcasts_bias() {
        let x = Tensor::<f64>::zeros(&[2, 3, 3, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Conv3DParams::new(
            rand_tensor(&mut rng, &[3, 2, 3, 3, 3]),
            Tensor::from_data(&[3], vec![0.5, -1.5, 2.0]).unwrap(),
            1,
            1,
        )
        .unwrap();
        let y = conv3d_naive(&x, &p).unwrap();
        for co in 0..3 {
            for v in &y.data()[co * 27..(co + 1) * 27] {
                assert_eq!(*v, p.bias.data()[co]);
            }
        }
    }

    #[test]
    fn naive_matches_manual_54_term_expansion() {
        // one output voxel of a 2-channel k=3 pad=1 convolution, written out
        // as the explicit 2*27-term sum
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[2, 5, 5, 5]);
        let p = Conv3DParams::new(
            rand_tensor(&mut rng, &[1, 2, 3, 3, 3]),
            Tensor::from_data(&[1], vec![0.25]).unwrap(),
            1,
            1,
        )
        .unwrap();
        let y = conv3d_naive(&x, &p).unwrap();
        // interior voxel (2,2,2): all 54 taps valid
        let (oz, oy, ox) = (2usize, 2usize, 2usize);
        let mut manual = 0.25;
        for ci in 0..2 {
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let xv = x.at(&[ci, oz + kz - 1, oy + ky - 1, ox + kx - 1]);
                        let wv = p.weight.at(&[0, ci, kz, ky, kx]);
                        manual += wv * xv;
                    }
                }
            }
        }
        assert!((y.at(&[0, oz, oy, ox]) - manual).abs() <= 1e-12);
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_out_extent(8, 3, 2, 1), Some(4));
        assert_eq!(conv_out_extent(2, 5, 1, 0), None);
    }

    #[test]
    fn direct_matches_naive_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for case in 0..50 {
            let c_in = rng.gen_range(1..=3);
            let c_out = rng.gen_range(1..=3);
            let k = *[1usize, 3].iter().nth(rng.gen_range(0..2)).unwrap();
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1);
            let d = rng.gen_range(k.max(2)..=8);
            let h = rng.gen_range(k.max(2)..=8);
            let w = rng.gen_range(k.max(2)..=8);
            let x = rand_tensor(&mut rng, &[c_in, d, h, w]);
            let p = Conv3DParams::new(
                rand_tensor(&mut rng, &[c_out, c_in, k, k, k]),
                rand_tensor(&mut rng, &[c_out]),
                stride,
                pad,
            )
            .unwrap();
            let (a, b) = (conv3d_naive(&x, &p).unwrap(), conv3d_direct(&x, &p).unwrap());
            assert_eq!(a.shape(), b.shape());
            for (va, vb) in a.data().iter().zip(b.data()) {
                assert!((va - vb).abs() <= 1e-10, "case {case}: {va} vs {vb}");
            }
        }
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0 = rand_tensor(&mut rng, &[2, 4, 4, 4]);
        let w0 = rand_tensor(&mut rng, &[2, 2, 3, 3, 3]);
        let b0 = rand_tensor(&mut rng, &[2]);

        let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, want_grads: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), want_grads);
            let wv = tape.leaf(w.clone(), want_grads);
            let bv = tape.leaf(b.clone(), want_grads);
            let y = conv3d(&mut tape, xv, wv, Some(bv), 1, 1).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.reduce_sum(sq, &[0, 1, 2, 3], false).unwrap();
            if want_grads {
                tape.backward(loss).unwrap();
                let gx = tape.grad(xv).unwrap().to_vec();
                let gw = tape.grad(wv).unwrap().to_vec();
                let gb = tape.grad(bv).unwrap().to_vec();
                (tape.value(loss).item(), gx, gw, gb)
            } else {
                (tape.value(loss).item(), vec![], vec![], vec![])
            }
        };
        let (_, gx, gw, gb) = run(&x0, &w0, &b0, true);
        let rx = finite_difference_check(|x| run(x, &w0, &b0, false).0, &x0, &gx, 1e-5, 40, &mut rng);
        let rw = finite_difference_check(|w| run(&x0, w, &b0, false).0, &w0, &gw, 1e-5, 40, &mut rng);
        let rb = finite_difference_check(|b| run(&x0, &w0, b, false).0, &b0, &gb, 1e-5, 4, &mut rng);
        for r in [rx, rw, rb] {
            assert!(r.max_rel <= 1e-4, "max_rel = {}", r.max_rel);
        }
    }

    #[test]
    fn transposed_conv_replicates_with_unit_weight() {
        // k=2, stride=2, all-ones weight: each input voxel fills its 2^3 block
        let x = Tensor::from_data(&[1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(Tensor::ones(&[1, 1, 2, 2, 2]).unwrap());
        let y = transposed_conv3d(&mut tape, xv, wv, None, 2, 0).unwrap();
        let yv = tape.value(y);
        assert_eq!(yv.shape(), &[1, 4, 4, 4]);
        for z in 0..4 {
            for yy in 0..4 {
                for xx in 0..4 {
                    let src = x.at(&[0, z / 2, yy / 2, xx / 2]);
                    assert_eq!(yv.at(&[0, z, yy, xx]), src);
                }
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for &(stride, pad, k, d) in &[(1usize, 0usize, 3usize, 6usize), (1, 1, 3, 5), (2, 0, 2, 6)] {
            let (ci, co) = (2, 3);
            let x = rand_tensor(&mut rng, &[ci, d, d, d]);
            let w = rand_tensor(&mut rng, &[co, ci, k, k, k]);
            let od = conv_out_extent(d, k, stride, pad).unwrap();
            let y = rand_tensor(&mut rng, &[co, od, od, od]);

            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let yv = tape.constant(y.clone());
            let cx = conv3d(&mut tape, xv, wv, None, stride, pad).unwrap();
            let ty = transposed_conv3d(&mut tape, yv, wv, None, stride, pad).unwrap();
            let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = tape.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "stride={stride} pad={pad}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x0 = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let w0 = rand_tensor(&mut rng, &[2, 2, 2, 2, 2]);
        let b0 = rand_tensor(&mut rng, &[2]);
        let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, grads: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), grads);
            let wv = tape.leaf(w.clone(), grads);
            let bv = tape.leaf(b.clone(), grads);
            let y = transposed_conv3d(&mut tape, xv, wv, Some(bv), 2, 0).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.reduce_sum(sq, &[0, 1, 2, 3], false).unwrap();
            if grads {
                tape.backward(loss).unwrap();
                (
                    tape.value(loss).item(),
                    tape.grad(xv).unwrap().to_vec(),
                    tape.grad(wv).unwrap().to_vec(),
                    tape.grad(bv).unwrap().to_vec(),
                )
            } else {
                (tape.value(loss).item(), vec![], vec![], vec![])
            }
        };
        let (_, gx, gw, gb) = run(&x0, &w0, &b0, true);
        let rx = finite_difference_check(|x| run(x, &w0, &b0, false).0, &x0, &gx, 1e-5, 30, &mut rng);
        let rw = finite_difference_check(|w| run(&x0, w, &b0, false).0, &w0, &gw, 1e-5, 30, &mut rng);
        let rb = finite_difference_check(|b| run(&x0, &w0, b, false).0, &b0, &gb, 1e-5, 2, &mut rng);
        for r in [rx, rw, rb] {
            assert!(r.max_rel <= 1e-4, "max_rel = {}", r.max_rel);
        }
    }

    #[test]
    fn non_positive_output_extent_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2]).unwrap();
        let p = Conv3DParams::new(
            Tensor::zeros(&[1, 1, 5, 5, 5]).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
            1,
            0,
        )
        .unwrap();
        assert!(matches!(conv3d_naive(&x, &p).unwrap_err(), TensorError::BadGeometry { .. }));
    }
}

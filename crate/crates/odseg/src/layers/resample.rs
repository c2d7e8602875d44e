//! Factor-2 trilinear resampling of `[c, d, h, w]` tensors.

use crate::tensor::tape::{BackFn, Tape, Var};
use crate::tensor::{Element, Result, Tensor, TensorError};

/// Halve each spatial extent by averaging every 2x2x2 block (the trilinear
/// kernel at factor 2). Extents must be even.
pub fn downsample_trilinear<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    if xv.rank() != 4 {
        return Err(TensorError::RankMismatch { op: "downsample_trilinear", expected: 4, shape: xv.shape().to_vec() });
    }
    let [c, d, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Invalid {
            op: "downsample_trilinear",
            msg: format!("spatial extents must be divisible by 2, got {:?}", xv.shape()),
        });
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let eighth = E::from_f64(0.125);
    let xd = xv.data();
    let mut out = vec![E::ZERO; c * od * oh * ow];
    for ch in 0..c {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = E::ZERO;
                    for dz in 0..2 {
                        for dyy in 0..2 {
                            for dx in 0..2 {
                                acc += xd[((ch * d + 2 * oz + dz) * h + 2 * oy + dyy) * w + 2 * ox + dx];
                            }
                        }
                    }
                    out[((ch * od + oz) * oh + oy) * ow + ox] = acc * eighth;
                }
            }
        }
    }
    let out = Tensor::from_data(&[c, od, oh, ow], out)?;
    out.check_finite("downsample_trilinear")?;
    let requires = tape.requires_grad(x);
    let back: Option<BackFn<E>> = if requires {
        Some(Box::new(move |ctx| {
            let dy = ctx.dy;
            let gx = ctx.slot(x);
            for ch in 0..c {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dy[((ch * od + oz) * oh + oy) * ow + ox] * eighth;
                            for dz in 0..2 {
                                for dyy in 0..2 {
                                    for dx in 0..2 {
                                        gx[((ch * d + 2 * oz + dz) * h + 2 * oy + dyy) * w + 2 * ox + dx] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }))
    } else {
        None
    };
    Ok(tape.push_node(out, requires, back))
}

/// Per-axis interpolation taps for doubling an extent with half-voxel
/// alignment: output center o maps to input coordinate o/2 - 0.25.
fn up_taps(extent: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * extent)
        .map(|o| {
            let c = 0.5 * o as f64 - 0.25;
            let f = c.floor();
            let t = c - f;
            let i0 = (f.max(0.0) as usize).min(extent - 1);
            let i1 = (((f + 1.0).max(0.0)) as usize).min(extent - 1);
            (i0, i1, t)
        })
        .collect()
}

/// Double each spatial extent by trilinear interpolation (half-voxel
/// alignment, edge-clamped).
pub fn upsample_trilinear<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    if xv.rank() != 4 {
        return Err(TensorError::RankMismatch { op: "upsample_trilinear", expected: 4, shape: xv.shape().to_vec() });
    }
    let [c, d, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let (tz, ty, tx) = (up_taps(d), up_taps(h), up_taps(w));
    let xd = xv.data();
    let mut out = vec![E::ZERO; c * od * oh * ow];
    for ch in 0..c {
        let x_ch = &xd[ch * d * h * w..(ch + 1) * d * h * w];
        for oz in 0..od {
            let (z0, z1, fz) = tz[oz];
            for oy in 0..oh {
                let (y0, y1, fy) = ty[oy];
                for ox in 0..ow {
                    let (x0, x1, fx) = tx[ox];
                    let mut acc = 0.0f64;
                    for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                        for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                            for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                acc += wz * wy * wx * x_ch[(zi * h + yi) * w + xi].to_f64();
                            }
                        }
                    }
                    out[((ch * od + oz) * oh + oy) * ow + ox] = E::from_f64(acc);
                }
            }
        }
    }
    let out = Tensor::from_data(&[c, od, oh, ow], out)?;
    out.check_finite("upsample_trilinear")?;
    let requires = tape.requires_grad(x);
    let back: Option<BackFn<E>> = if requires {
        Some(Box::new(move |ctx| {
            let dy = ctx.dy;
            let gx = ctx.slot(x);
            for ch in 0..c {
                for oz in 0..od {
                    let (z0, z1, fz) = tz[oz];
                    for oy in 0..oh {
                        let (y0, y1, fy) = ty[oy];
                        for ox in 0..ow {
                            let (x0, x1, fx) = tx[ox];
                            let g = dy[((ch * od + oz) * oh + oy) * ow + ox].to_f64();
                            for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                                for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                                    for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                        gx[ch * d * h * w + (zi * h + yi) * w + xi] +=
                                            E::from_f64(wz * wy * wx * g);
                                    }
                                }
                            }
                        }
                    }
                }
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

    #[test]
    fn downsample_constant_is_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 4, 4, 4], 3.25f64).unwrap());
        let y = downsample_trilinear(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2, 2, 2]);
        for &v in tape.value(y).data() {
            assert_eq!(v, 3.25);
        }
    }

    #[test]
    fn downsample_block_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_data(&[1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap());
        let y = downsample_trilinear(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.5]);
    }

    #[test]
    fn downsample_matches_eight_point_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..2 * 6 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt = Tensor::from_data(&[2, 6, 4, 4], data).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let y = downsample_trilinear(&mut tape, x).unwrap();
        let yv = tape.value(y);
        for ch in 0..2 {
            for oz in 0..3 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let mut s = 0.0;
                        for dz in 0..2 {
                            for dyy in 0..2 {
                                for dx in 0..2 {
                                    s += xt.at(&[ch, 2 * oz + dz, 2 * oy + dyy, 2 * ox + dx]);
                                }
                            }
                        }
                        assert!((yv.at(&[ch, oz, oy, ox]) - s / 8.0).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn downsample_rejects_odd_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 3, 4, 4]).unwrap());
        assert!(downsample_trilinear(&mut tape, x).is_err());
    }

    #[test]
    fn upsample_constant_is_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 2, 2], -1.5f64).unwrap());
        let y = upsample_trilinear(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 4, 4]);
        for &v in tape.value(y).data() {
            assert!((v + 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_then_downsample_of_constant_round_trips() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 2, 2], 2.0f64).unwrap());
        let up = upsample_trilinear(&mut tape, x).unwrap();
        let down = downsample_trilinear(&mut tape, up).unwrap();
        for &v in tape.value(down).data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = Tensor::from_data(&[1, 4, 4, 4], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let run = |x: &Tensor<f64>, grads: bool, up: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), grads);
            let y = if up {
                upsample_trilinear(&mut tape, xv).unwrap()
            } else {
                downsample_trilinear(&mut tape, xv).unwrap()
            };
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.reduce_sum(sq, &[0, 1, 2, 3], false).unwrap();
            if grads {
                tape.backward(loss).unwrap();
                (tape.value(loss).item(), tape.grad(xv).unwrap().to_vec())
            } else {
                (tape.value(loss).item(), vec![])
            }
        };
        for up in [false, true] {
            let (_, gx) = run(&x0, true, up);
            let r = finite_difference_check(|x| run(x, false, up).0, &x0, &gx, 1e-5, 40, &mut rng);
            assert!(r.max_rel <= 1e-4, "up={up} max_rel = {}", r.max_rel);
        }
    }
}

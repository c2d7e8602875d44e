//! Stochastic training augmentation: crop, zoom, flip, noise, blur,
//! brightness, contrast. Spatial transforms move the volume and the mask
//! through the same geometry (trilinear vs. nearest resampling); intensity
//! transforms touch the volume only.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, LabelMask, Result, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Per-transform application probabilities and parameter ranges. Ranges are
/// clamped to their documented bounds at validation: zoom within
/// 0.85..=1.15, noise sigma <= 0.1, blur sigma <= 1 voxel, brightness
/// within +-0.2 additive, contrast within 0.75..=1.25 multiplicative.
#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub p_crop: f64,
    pub crop_min_frac: f64,
    pub p_zoom: f64,
    pub zoom_range: (f64, f64),
    /// applied independently per axis
    pub p_flip: f64,
    pub p_noise: f64,
    pub noise_max: f64,
    pub p_blur: f64,
    pub blur_max: f64,
    pub p_brightness: f64,
    pub brightness_max: f64,
    pub p_contrast: f64,
    pub contrast_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_crop: 0.0,
            crop_min_frac: 0.9,
            p_zoom: 0.2,
            zoom_range: (0.85, 1.15),
            p_flip: 0.5,
            p_noise: 0.15,
            noise_max: 0.1,
            p_blur: 0.1,
            blur_max: 1.0,
            p_brightness: 0.15,
            brightness_max: 0.2,
            p_contrast: 0.15,
            contrast_range: (0.75, 1.25),
        }
    }
}

impl AugmentConfig {
    /// Every probability zero; augment() becomes the identity.
    pub fn disabled() -> Self {
        AugmentConfig {
            p_crop: 0.0,
            p_zoom: 0.0,
            p_flip: 0.0,
            p_noise: 0.0,
            p_blur: 0.0,
            p_brightness: 0.0,
            p_contrast: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_crop,
            self.p_zoom,
            self.p_flip,
            self.p_noise,
            self.p_blur,
            self.p_brightness,
            self.p_contrast,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::InvalidConfig("augment probabilities must be in [0,1]".into()));
        }
        if !(self.crop_min_frac > 0.0 && self.crop_min_frac <= 1.0) {
            return Err(DataError::InvalidConfig("crop_min_frac must be in (0,1]".into()));
        }
        let (zlo, zhi) = self.zoom_range;
        if !(0.85..=1.15).contains(&zlo) || !(0.85..=1.15).contains(&zhi) || zlo > zhi {
            return Err(DataError::InvalidConfig("zoom range must sit within 0.85..=1.15".into()));
        }
        if !(0.0..=0.1).contains(&self.noise_max) {
            return Err(DataError::InvalidConfig("noise sigma bound must be within 0..=0.1".into()));
        }
        if !(0.0..=1.0).contains(&self.blur_max) {
            return Err(DataError::InvalidConfig("blur sigma bound must be within 0..=1".into()));
        }
        if !(0.0..=0.2).contains(&self.brightness_max) {
            return Err(DataError::InvalidConfig("brightness bound must be within 0..=0.2".into()));
        }
        let (clo, chi) = self.contrast_range;
        if !(0.75..=1.25).contains(&clo) || !(0.75..=1.25).contains(&chi) || clo > chi {
            return Err(DataError::InvalidConfig("contrast range must sit within 0.75..=1.25".into()));
        }
        Ok(())
    }
}

/// Apply one randomized augmentation pass. The label set never grows:
/// nearest-neighbor resampling only reuses existing labels.
pub fn augment(
    v: &Volume,
    m: &LabelMask,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Volume, LabelMask)> {
    cfg.validate()?;
    if v.dims != m.dims {
        return Err(DataError::DimsMismatch { a: v.dims, b: m.dims });
    }
    let mut vol = v.clone();
    let mut mask = m.clone();

    if rng.gen::<f64>() < cfg.p_crop {
        let mut target = [0usize; 3];
        let mut origin = [0usize; 3];
        for a in 0..3 {
            let frac = rng.gen_range(cfg.crop_min_frac..=1.0);
            target[a] = ((vol.dims[a] as f64 * frac).round() as usize).clamp(2, vol.dims[a]);
            origin[a] = rng.gen_range(0..=vol.dims[a] - target[a]);
        }
        let (cv, cm) = crop_pair(&vol, &mask, origin, target)?;
        vol = cv;
        mask = cm;
    }

    if rng.gen::<f64>() < cfg.p_zoom {
        let f = rng.gen_range(cfg.zoom_range.0..=cfg.zoom_range.1);
        vol = zoom_volume(&vol, f, Interp::Trilinear);
        mask = zoom_mask(&mask, f);
    }

    for axis in 0..3 {
        if rng.gen::<f64>() < cfg.p_flip {
            flip_volume(&mut vol, axis);
            flip_mask(&mut mask, axis);
        }
    }

    if rng.gen::<f64>() < cfg.p_noise {
        let sigma = rng.gen_range(0.0..=cfg.noise_max);
        if sigma > 0.0 {
            let normal = Normal::new(0.0f64, sigma).expect("sigma checked");
            for x in vol.data.iter_mut() {
                *x = (*x as f64 + normal.sample(rng)) as f32;
            }
        }
    }

    if rng.gen::<f64>() < cfg.p_blur {
        let sigma = rng.gen_range(0.0..=cfg.blur_max);
        if sigma > 0.05 {
            gaussian_blur(&mut vol, sigma);
        }
    }

    if rng.gen::<f64>() < cfg.p_brightness {
        let delta = rng.gen_range(-cfg.brightness_max..=cfg.brightness_max) as f32;
        for x in vol.data.iter_mut() {
            *x += delta;
        }
    }

    if rng.gen::<f64>() < cfg.p_contrast {
        let c = rng.gen_range(cfg.contrast_range.0..=cfg.contrast_range.1) as f32;
        for x in vol.data.iter_mut() {
            *x *= c;
        }
    }

    Ok((vol, mask))
}

pub fn crop_pair(
    v: &Volume,
    m: &LabelMask,
    origin: [usize; 3],
    target: [usize; 3],
) -> Result<(Volume, LabelMask)> {
    for a in 0..3 {
        if target[a] == 0 || origin[a] + target[a] > v.dims[a] {
            return Err(DataError::CropTooLarge { requested: target, dims: v.dims });
        }
    }
    let mut out_v = Volume::zeros(v.channels, target, v.spacing);
    let mut out_m = LabelMask::zeros(target, m.spacing);
    for c in 0..v.channels {
        for z in 0..target[0] {
            for y in 0..target[1] {
                for x in 0..target[2] {
                    let val = v.at(c, origin[0] + z, origin[1] + y, origin[2] + x);
                    out_v.set(c, z, y, x, val);
                }
            }
        }
    }
    for z in 0..target[0] {
        for y in 0..target[1] {
            for x in 0..target[2] {
                out_m.set(z, y, x, m.at(origin[0] + z, origin[1] + y, origin[2] + x));
            }
        }
    }
    Ok((out_v, out_m))
}

pub fn flip_volume(v: &mut Volume, axis: usize) {
    let [d, h, w] = v.dims;
    for c in 0..v.channels {
        match axis {
            0 => {
                for z in 0..d / 2 {
                    for y in 0..h {
                        for x in 0..w {
                            let (i, j) = (v.index(c, z, y, x), v.index(c, d - 1 - z, y, x));
                            v.data.swap(i, j);
                        }
                    }
                }
            }
            1 => {
                for z in 0..d {
                    for y in 0..h / 2 {
                        for x in 0..w {
                            let (i, j) = (v.index(c, z, y, x), v.index(c, z, h - 1 - y, x));
                            v.data.swap(i, j);
                        }
                    }
                }
            }
            _ => {
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w / 2 {
                            let (i, j) = (v.index(c, z, y, x), v.index(c, z, y, w - 1 - x));
                            v.data.swap(i, j);
                        }
                    }
                }
            }
        }
    }
}

pub fn flip_mask(m: &mut LabelMask, axis: usize) {
    let [d, h, w] = m.dims;
    match axis {
        0 => {
            for z in 0..d / 2 {
                for y in 0..h {
                    for x in 0..w {
                        let (i, j) = (m.index(z, y, x), m.index(d - 1 - z, y, x));
                        m.labels.swap(i, j);
                    }
                }
            }
        }
        1 => {
            for z in 0..d {
                for y in 0..h / 2 {
                    for x in 0..w {
                        let (i, j) = (m.index(z, y, x), m.index(z, h - 1 - y, x));
                        m.labels.swap(i, j);
                    }
                }
            }
        }
        _ => {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w / 2 {
                        let (i, j) = (m.index(z, y, x), m.index(z, y, w - 1 - x));
                        m.labels.swap(i, j);
                    }
                }
            }
        }
    }
}

/// Content zoom about the volume center keeping the canvas: the output
/// voxel at `o` reads the input at `center + (o - center)/factor`.
pub fn zoom_volume(v: &Volume, factor: f64, interp: Interp) -> Volume {
    let [d, h, w] = v.dims;
    let center = [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
    let mut out = Volume::zeros(v.channels, v.dims, v.spacing);
    for c in 0..v.channels {
        for z in 0..d {
            let sz = center[0] + (z as f64 - center[0]) / factor;
            for y in 0..h {
                let sy = center[1] + (y as f64 - center[1]) / factor;
                for x in 0..w {
                    let sx = center[2] + (x as f64 - center[2]) / factor;
                    let val = match interp {
                        Interp::Trilinear => trilinear_sample(v, c, sz, sy, sx),
                        Interp::Nearest => nearest_sample(v, c, sz, sy, sx),
                    };
                    out.set(c, z, y, x, val);
                }
            }
        }
    }
    out
}

/// Nearest-neighbor zoom of a mask through the same geometry as
/// [`zoom_volume`]; out-of-range coordinates become background.
pub fn zoom_mask(m: &LabelMask, factor: f64) -> LabelMask {
    let [d, h, w] = m.dims;
    let center = [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
    let mut out = LabelMask::zeros(m.dims, m.spacing);
    for z in 0..d {
        let sz = center[0] + (z as f64 - center[0]) / factor;
        for y in 0..h {
            let sy = center[1] + (y as f64 - center[1]) / factor;
            for x in 0..w {
                let sx = center[2] + (x as f64 - center[2]) / factor;
                let (rz, ry, rx) = (sz.round(), sy.round(), sx.round());
                if rz < 0.0 || ry < 0.0 || rx < 0.0 {
                    continue;
                }
                let (rz, ry, rx) = (rz as usize, ry as usize, rx as usize);
                if rz >= d || ry >= h || rx >= w {
                    continue;
                }
                out.set(z, y, x, m.at(rz, ry, rx));
            }
        }
    }
    out
}

fn nearest_sample(v: &Volume, c: usize, sz: f64, sy: f64, sx: f64) -> f32 {
    let (rz, ry, rx) = (sz.round(), sy.round(), sx.round());
    if rz < 0.0 || ry < 0.0 || rx < 0.0 {
        return 0.0;
    }
    let (rz, ry, rx) = (rz as usize, ry as usize, rx as usize);
    let [d, h, w] = v.dims;
    if rz >= d || ry >= h || rx >= w {
        return 0.0;
    }
    v.at(c, rz, ry, rx)
}

fn trilinear_sample(v: &Volume, c: usize, sz: f64, sy: f64, sx: f64) -> f32 {
    let [d, h, w] = v.dims;
    if sz < 0.0 || sy < 0.0 || sx < 0.0 || sz > (d - 1) as f64 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
        return 0.0;
    }
    let (z0, y0, x0) = (sz.floor() as usize, sy.floor() as usize, sx.floor() as usize);
    let (z1, y1, x1) = ((z0 + 1).min(d - 1), (y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fz, fy, fx) = (sz - z0 as f64, sy - y0 as f64, sx - x0 as f64);
    let mut acc = 0.0f64;
    for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
        for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                acc += wz * wy * wx * v.at(c, zi, yi, xi) as f64;
            }
        }
    }
    acc as f32
}

/// Separable Gaussian blur, kernel truncated at 3 sigma and renormalized at
/// the borders.
pub fn gaussian_blur(v: &mut Volume, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    if radius == 0 {
        return;
    }
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let [d, h, w] = v.dims;
    let n = v.voxels();
    let mut tmp = vec![0.0f32; n];
    for c in 0..v.channels {
        for (axis, extent) in [(0usize, d), (1, h), (2, w)] {
            {
                let src = v.channel(c);
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            let coord = [z, y, x];
                            let mut acc = 0.0f64;
                            let mut norm = 0.0f64;
                            for (ki, kw) in kernel.iter().enumerate() {
                                let off = ki as i64 - radius;
                                let t = coord[axis] as i64 + off;
                                if t < 0 || t >= extent as i64 {
                                    continue;
                                }
                                let mut cc = coord;
                                cc[axis] = t as usize;
                                acc += kw * src[(cc[0] * h + cc[1]) * w + cc[2]] as f64;
                                norm += kw;
                            }
                            tmp[(z * h + y) * w + x] = (acc / norm) as f32;
                        }
                    }
                }
            }
            v.channel_mut(c).copy_from_slice(&tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_probabilities_are_identity() {
        let (v, m) = generate_phantom(&PhantomSpec::with_seed(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (av, am) = augment(&v, &m, &AugmentConfig::disabled(), &mut rng).unwrap();
        assert_eq!(av, v);
        assert_eq!(am, m);
    }

    #[test]
    fn double_flip_is_identity() {
        let (v, _) = generate_phantom(&PhantomSpec::with_seed(4)).unwrap();
        for axis in 0..3 {
            let mut f = v.clone();
            flip_volume(&mut f, axis);
            flip_volume(&mut f, axis);
            assert_eq!(f, v);
        }
    }

    #[test]
    fn zoom_one_keeps_mask_and_label_histogram_survives_flips() {
        let (_, m) = generate_phantom(&PhantomSpec::with_seed(5)).unwrap();
        let zoomed = zoom_mask(&m, 1.0);
        assert_eq!(zoomed, m);

        let histogram = |m: &LabelMask| {
            let mut h = [0usize; 4];
            for &l in &m.labels {
                h[l as usize] += 1;
            }
            h
        };
        let h0 = histogram(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut flipped = m.clone();
        for _ in 0..100 {
            let axis = rand::Rng::gen_range(&mut rng, 0..3usize);
            flip_mask(&mut flipped, axis);
            assert_eq!(histogram(&flipped), h0);
        }
    }

    #[test]
    fn spatial_transforms_keep_volume_and_mask_registered() {
        // coordinate-tagged probe: channel 0 stores the linear voxel index,
        // the mask stores a cycling label; after flips and crops the value
        // at a transformed position must be the value of the source voxel
        let dims = [6, 5, 4];
        let mut v = Volume::zeros(1, dims, [1.0; 3]);
        let mut m = LabelMask::zeros(dims, [1.0; 3]);
        for i in 0..v.voxels() {
            v.data[i] = i as f32;
            m.labels[i] = (i % 4) as u8;
        }
        let mut fv = v.clone();
        let mut fm = m.clone();
        flip_volume(&mut fv, 1);
        flip_mask(&mut fm, 1);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let src = m.index(z, dims[1] - 1 - y, x);
                    assert_eq!(fv.at(0, z, y, x), src as f32);
                    assert_eq!(fm.at(z, y, x), (src % 4) as u8);
                }
            }
        }
        let (cv, cm) = crop_pair(&v, &m, [1, 0, 2], [3, 4, 2]).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..2 {
                    let src = m.index(z + 1, y, x + 2);
                    assert_eq!(cv.at(0, z, y, x), src as f32);
                    assert_eq!(cm.at(z, y, x), (src % 4) as u8);
                }
            }
        }
        // zoom: identical geometry for both paths when the volume is
        // resampled nearest too
        let zv = zoom_volume(&v, 0.9, Interp::Nearest);
        let zm = zoom_mask(&m, 0.9);
        for i in 0..v.voxels() {
            let from_vol = zv.data[i] as usize % 4;
            // out-of-range voxels become 0 in both paths
            if zv.data[i] == 0.0 && zm.labels[i] == 0 {
                continue;
            }
            assert_eq!(from_vol as u8, zm.labels[i]);
        }
    }

    #[test]
    fn crop_larger_than_volume_rejected() {
        let (v, m) = generate_phantom(&PhantomSpec::with_seed(7)).unwrap();
        assert!(matches!(
            crop_pair(&v, &m, [0, 0, 0], [100, 10, 10]).unwrap_err(),
            DataError::CropTooLarge { .. }
        ));
    }

    #[test]
    fn label_set_never_grows() {
        let (v, m) = generate_phantom(&PhantomSpec::with_seed(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cfg = AugmentConfig::default();
        cfg.p_crop = 0.5;
        for _ in 0..20 {
            let (_, am) = augment(&v, &m, &cfg, &mut rng).unwrap();
            assert!(am.validate_labels().is_ok());
            for &l in &am.labels {
                assert!(l <= 3);
            }
        }
    }

    #[test]
    fn out_of_bounds_ranges_rejected() {
        let mut cfg = AugmentConfig::default();
        cfg.zoom_range = (0.5, 1.15);
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.noise_max = 0.5;
        assert!(cfg.validate().is_err());
    }
}

//! Synthetic tumor phantoms: a brain ellipsoid carrying 1..=3 nested
//! ellipsoidal tumors (necrotic core inside an enhancing shell inside
//! edema), rendered into four MRI-like channels with per-tissue intensity
//! profiles and additive Gaussian noise. Fully determined by the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    DataError, LabelMask, Result, Volume, LABEL_EDEMA, LABEL_ENHANCING, LABEL_NECROSIS,
};

/// Tissue classes indexing the intensity tables.
const TISSUE_BACKGROUND: usize = 0;
const TISSUE_BRAIN: usize = 1;
const TISSUE_NECROSIS: usize = 2;
const TISSUE_EDEMA: usize = 3;
const TISSUE_ENHANCING: usize = 4;

/// Per-channel intensity mean/std for each tissue class
/// `[background, brain, necrosis, edema, enhancing]`.
#[derive(Clone, Debug)]
pub struct IntensityProfile {
    pub means: Vec<[f32; 5]>,
    pub stds: Vec<[f32; 5]>,
}

impl IntensityProfile {
    /// Four channels shaped after T1-native, T1-contrast, T2-weighted and
    /// FLAIR appearance; the contrast-like channel (index 1) gives the
    /// enhancing shell its highest mean.
    pub fn default_four_channel() -> Self {
        IntensityProfile {
            means: vec![
                [0.0, 0.60, 0.35, 0.45, 0.55],
                [0.0, 0.55, 0.30, 0.50, 0.95],
                [0.0, 0.50, 0.80, 0.75, 0.60],
                [0.0, 0.45, 0.60, 0.90, 0.70],
            ],
            stds: vec![
                [0.0, 0.05, 0.05, 0.05, 0.05],
                [0.0, 0.05, 0.05, 0.05, 0.05],
                [0.0, 0.05, 0.05, 0.05, 0.05],
                [0.0, 0.05, 0.05, 0.05, 0.05],
            ],
        }
    }
}

/// Geometry and appearance of one generated case.
#[derive(Clone, Debug)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    pub channels: usize,
    /// inclusive tumor count range
    pub tumor_count: (usize, usize),
    /// ellipsoid radius ranges in voxels, outermost to innermost; ranges
    /// must be disjoint and ordered so any draw nests strictly
    pub edema_radius: (f64, f64),
    pub enhancing_radius: (f64, f64),
    pub necrosis_radius: (f64, f64),
    pub intensity: IntensityProfile,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        PhantomSpec {
            extents: [48, 48, 48],
            spacing: [1.0; 3],
            channels: 4,
            tumor_count: (1, 3),
            edema_radius: (6.0, 9.0),
            enhancing_radius: (3.5, 5.0),
            necrosis_radius: (1.8, 3.0),
            intensity: IntensityProfile::default_four_channel(),
            noise_sigma: 0.03,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.necrosis_radius, self.enhancing_radius, self.edema_radius];
        for (lo, hi) in ranges {
            if !(lo > 0.0 && hi >= lo) {
                return Err(DataError::InvalidConfig(format!("bad radius range ({lo}, {hi})")));
            }
        }
        if !(self.necrosis_radius.1 < self.enhancing_radius.0
            && self.enhancing_radius.1 < self.edema_radius.0)
        {
            return Err(DataError::InvalidConfig(
                "radius ranges must nest: necrosis < enhancing < edema".into(),
            ));
        }
        if self.tumor_count.0 < 1 || self.tumor_count.1 < self.tumor_count.0 {
            return Err(DataError::InvalidConfig(format!(
                "bad tumor count range {:?}",
                self.tumor_count
            )));
        }
        if self.channels == 0
            || self.intensity.means.len() != self.channels
            || self.intensity.stds.len() != self.channels
        {
            return Err(DataError::InvalidConfig(
                "intensity profile must cover every channel".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::InvalidConfig("noise sigma must be >= 0".into()));
        }
        let min_extent = *self.extents.iter().min().unwrap() as f64;
        // Largest tumor (with axis jitter up to 1.25) must fit inside the
        // brain ellipsoid with a margin.
        if self.edema_radius.1 * 1.25 + 2.0 > 0.42 * min_extent {
            return Err(DataError::ExtentsTooSmall { extents: self.extents });
        }
        Ok(())
    }
}

/// Render one (volume, mask) pair. Identical seeds give identical bytes.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [d, h, w] = spec.extents;
    let center = [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
    let brain_r = [0.42 * d as f64, 0.42 * h as f64, 0.42 * w as f64];

    let mut mask = LabelMask::zeros(spec.extents, spec.spacing);
    let mut tissue = vec![TISSUE_BACKGROUND as u8; mask.voxels()];

    // brain tissue
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let u = norm2([z, y, x], center, brain_r);
                if u <= 1.0 {
                    tissue[(z * h + y) * w + x] = TISSUE_BRAIN as u8;
                }
            }
        }
    }

    let count = rng.gen_range(spec.tumor_count.0..=spec.tumor_count.1);
    for _ in 0..count {
        // rejection-sample a center whose outer ellipsoid stays inside the brain
        let mut placed = None;
        for _attempt in 0..100 {
            let c = [
                center[0] + rng.gen_range(-0.6..0.6) * brain_r[0],
                center[1] + rng.gen_range(-0.6..0.6) * brain_r[1],
                center[2] + rng.gen_range(-0.6..0.6) * brain_r[2],
            ];
            let scale = [
                rng.gen_range(0.8..1.25),
                rng.gen_range(0.8..1.25),
                rng.gen_range(0.8..1.25),
            ];
            let r_ed = rng.gen_range(spec.edema_radius.0..=spec.edema_radius.1);
            let fits = (0..3).all(|a| {
                (c[a] - center[a]).abs() + r_ed * scale[a] <= 0.95 * brain_r[a]
            });
            if fits {
                let r_et = rng.gen_range(spec.enhancing_radius.0..=spec.enhancing_radius.1);
                let r_ne = rng.gen_range(spec.necrosis_radius.0..=spec.necrosis_radius.1);
                placed = Some((c, scale, r_ed, r_et, r_ne));
                break;
            }
        }
        let Some((c, scale, r_ed, r_et, r_ne)) = placed else {
            continue; // crowded volume; deterministic either way
        };
        let radii = |r: f64| [r * scale[0], r * scale[1], r * scale[2]];
        let (red, ret, rne) = (radii(r_ed), radii(r_et), radii(r_ne));
        let zlo = (c[0] - red[0]).floor().max(0.0) as usize;
        let zhi = ((c[0] + red[0]).ceil() as usize).min(d - 1);
        let ylo = (c[1] - red[1]).floor().max(0.0) as usize;
        let yhi = ((c[1] + red[1]).ceil() as usize).min(h - 1);
        let xlo = (c[2] - red[2]).floor().max(0.0) as usize;
        let xhi = ((c[2] + red[2]).ceil() as usize).min(w - 1);
        for z in zlo..=zhi {
            for y in ylo..=yhi {
                for x in xlo..=xhi {
                    let p = [z, y, x];
                    let label = if norm2(p, c, rne) <= 1.0 {
                        LABEL_NECROSIS
                    } else if norm2(p, c, ret) <= 1.0 {
                        LABEL_ENHANCING
                    } else if norm2(p, c, red) <= 1.0 {
                        LABEL_EDEMA
                    } else {
                        continue;
                    };
                    mask.set(z, y, x, label);
                }
            }
        }
    }

    for (t, &l) in tissue.iter_mut().zip(&mask.labels) {
        match l {
            LABEL_NECROSIS => *t = TISSUE_NECROSIS as u8,
            LABEL_EDEMA => *t = TISSUE_EDEMA as u8,
            LABEL_ENHANCING => *t = TISSUE_ENHANCING as u8,
            _ => {}
        }
    }

    let mut volume = Volume::zeros(spec.channels, spec.extents, spec.spacing);
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    for ch in 0..spec.channels {
        let means = spec.intensity.means[ch];
        let stds = spec.intensity.stds[ch];
        let out = volume.channel_mut(ch);
        for (i, &t) in tissue.iter().enumerate() {
            let t = t as usize;
            if t == TISSUE_BACKGROUND {
                continue; // exact zero background
            }
            let sigma = ((stds[t] as f64).powi(2) + spec.noise_sigma.powi(2)).sqrt();
            out[i] = (means[t] as f64 + sigma * unit.sample(&mut rng)) as f32;
        }
    }
    volume.check_finite()?;
    Ok((volume, mask))
}

#[inline]
fn norm2(p: [usize; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    let dz = (p[0] as f64 - c[0]) / r[0];
    let dy = (p[1] as f64 - c[1]) / r[1];
    let dx = (p[2] as f64 - c[2]) / r[2];
    dz * dz + dy * dy + dx * dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_bytes() {
        let spec = PhantomSpec::with_seed(77);
        let (v1, m1) = generate_phantom(&spec).unwrap();
        let (v2, m2) = generate_phantom(&spec).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn nesting_necrosis_touches_enhancing_shell() {
        // every NE voxel is 26-adjacent to the tumor core (labels {1,3}),
        // and the core is connected through to the ET shell by construction
        for seed in [1, 2, 3, 4, 5] {
            let (_, m) = generate_phantom(&PhantomSpec::with_seed(seed)).unwrap();
            let [d, h, w] = m.dims;
            let mut ne_count = 0usize;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        if m.at(z, y, x) != LABEL_NECROSIS {
                            continue;
                        }
                        ne_count += 1;
                        let mut has_core_neighbor = false;
                        for dz in -1i64..=1 {
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    if dz == 0 && dy == 0 && dx == 0 {
                                        continue;
                                    }
                                    let (nz, ny, nx) =
                                        (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                                    if nz < 0 || ny < 0 || nx < 0 {
                                        continue;
                                    }
                                    let (nz, ny, nx) = (nz as usize, ny as usize, nx as usize);
                                    if nz >= d || ny >= h || nx >= w {
                                        continue;
                                    }
                                    let l = m.at(nz, ny, nx);
                                    if l == LABEL_NECROSIS || l == LABEL_ENHANCING {
                                        has_core_neighbor = true;
                                    }
                                }
                            }
                        }
                        assert!(has_core_neighbor, "isolated NE voxel at ({z},{y},{x})");
                    }
                }
            }
            let _ = ne_count;
        }
    }

    #[test]
    fn whole_tumor_is_union_of_foreground_labels() {
        let (_, m) = generate_phantom(&PhantomSpec::with_seed(9)).unwrap();
        let wt = m.labels.iter().filter(|&&l| l != 0).count();
        let parts: usize = [LABEL_NECROSIS, LABEL_EDEMA, LABEL_ENHANCING]
            .iter()
            .map(|&lbl| m.labels.iter().filter(|&&l| l == lbl).count())
            .sum();
        assert_eq!(wt, parts);
        assert!(wt > 0);
    }

    #[test]
    fn enhancing_brighter_than_edema_on_contrast_channel() {
        // over 20 seeds, mean ET intensity on the contrast-like channel
        // exceeds mean ED intensity
        let mut et_sum = 0.0f64;
        let mut et_n = 0usize;
        let mut ed_sum = 0.0f64;
        let mut ed_n = 0usize;
        for seed in 0..20 {
            let (v, m) = generate_phantom(&PhantomSpec::with_seed(seed)).unwrap();
            let contrast = v.channel(1);
            for (i, &l) in m.labels.iter().enumerate() {
                if l == LABEL_ENHANCING {
                    et_sum += contrast[i] as f64;
                    et_n += 1;
                } else if l == LABEL_EDEMA {
                    ed_sum += contrast[i] as f64;
                    ed_n += 1;
                }
            }
        }
        assert!(et_n > 0 && ed_n > 0);
        assert!(et_sum / et_n as f64 > ed_sum / ed_n as f64);
    }

    #[test]
    fn too_small_extents_rejected() {
        let mut spec = PhantomSpec::with_seed(1);
        spec.extents = [16, 16, 16];
        assert!(matches!(
            generate_phantom(&spec).unwrap_err(),
            DataError::ExtentsTooSmall { .. }
        ));
    }

    #[test]
    fn unordered_radius_ranges_rejected() {
        let mut spec = PhantomSpec::with_seed(1);
        spec.necrosis_radius = (4.0, 6.0);
        assert!(generate_phantom(&spec).is_err());
    }
}

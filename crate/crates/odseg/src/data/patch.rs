//! Foreground-biased patch extraction for training.

use rand::Rng;

use super::{DataError, LabelMask, Result, Volume};

#[derive(Clone, Debug)]
pub struct PatchSample {
    pub volume: Volume,
    pub mask: LabelMask,
    pub origin: [usize; 3],
    /// true when the foreground-biased branch picked a tumor voxel as the
    /// patch center (that voxel always lies inside the patch after clamping)
    pub foreground_centered: bool,
}

/// Cut one `extents`-sized patch. With probability `foreground_bias` the
/// patch is centered on a uniformly drawn tumor voxel (clamped to bounds so
/// the voxel stays inside), otherwise the origin is uniform.
pub fn sample_patch(
    v: &Volume,
    m: &LabelMask,
    extents: [usize; 3],
    foreground_bias: f64,
    rng: &mut impl Rng,
) -> Result<PatchSample> {
    if v.dims != m.dims {
        return Err(DataError::DimsMismatch { a: v.dims, b: m.dims });
    }
    for a in 0..3 {
        if extents[a] == 0 || extents[a] > v.dims[a] {
            return Err(DataError::PatchTooLarge { requested: extents, dims: v.dims });
        }
    }
    let take_fg = rng.gen::<f64>() < foreground_bias;
    let mut origin = [0usize; 3];
    let mut foreground_centered = false;
    if take_fg {
        let fg: Vec<usize> = m
            .labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l != 0).then_some(i))
            .collect();
        if !fg.is_empty() {
            let pick = fg[rng.gen_range(0..fg.len())];
            let [_, h, w] = m.dims;
            let center = [pick / (h * w), (pick / w) % h, pick % w];
            for a in 0..3 {
                let half = extents[a] / 2;
                let lo = center[a].saturating_sub(half);
                origin[a] = lo.min(v.dims[a] - extents[a]);
            }
            foreground_centered = true;
        }
    }
    if !foreground_centered {
        for a in 0..3 {
            origin[a] = rng.gen_range(0..=v.dims[a] - extents[a]);
        }
    }
    let (volume, mask) = super::augment::crop_pair(v, m, origin, extents)?;
    Ok(PatchSample { volume, mask, origin, foreground_centered })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_extent_patch_is_whole_volume() {
        let (v, m) = generate_phantom(&PhantomSpec::with_seed(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_patch(&v, &m, v.dims, 0.0, &mut rng).unwrap();
        assert_eq!(s.volume, v);
        assert_eq!(s.mask, m);
        assert_eq!(s.origin, [0, 0, 0]);
    }

    #[test]
    fn bias_one_keeps_the_tumor_voxel_inside() {
        // single tumor voxel; with bias 1 it must always fall inside
        let mut m = LabelMask::zeros([16, 16, 16], [1.0; 3]);
        m.set(2, 13, 7, 3);
        let v = Volume::zeros(1, [16, 16, 16], [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = sample_patch(&v, &m, [8, 8, 8], 1.0, &mut rng).unwrap();
            assert!(s.foreground_centered);
            assert!(s.mask.labels.iter().any(|&l| l == 3));
        }
    }

    #[test]
    fn empirical_bias_matches_setting() {
        let (v, m) = generate_phantom(&PhantomSpec::with_seed(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bias = 0.5;
        let mut hits = 0usize;
        let n = 1000;
        for _ in 0..n {
            let s = sample_patch(&v, &m, [24, 24, 24], bias, &mut rng).unwrap();
            if s.foreground_centered {
                hits += 1;
            }
        }
        let frac = hits as f64 / n as f64;
        assert!((frac - bias).abs() <= 0.05, "fraction {frac}");
    }

    #[test]
    fn oversized_patch_rejected() {
        let (v, m) = generate_phantom(&PhantomSpec::with_seed(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(
            sample_patch(&v, &m, [64, 8, 8], 0.5, &mut rng).unwrap_err(),
            DataError::PatchTooLarge { .. }
        ));
    }
}

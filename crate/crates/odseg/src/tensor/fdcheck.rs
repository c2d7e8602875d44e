//! Central-difference gradient verification.
//!
//! Compares an analytic gradient against `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`
//! over a sampled coordinate set. Relative error per coordinate is
//! `|fd − analytic| / max(|fd| + |analytic|, 1e-8)`.

use rand::seq::index::sample;
use rand::Rng;

use super::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct FdReport {
    pub max_rel: f64,
    pub median_rel: f64,
    pub samples: usize,
}

impl FdReport {
    pub fn passes(&self, max_tol: f64, median_tol: f64) -> bool {
        self.max_rel <= max_tol && self.median_rel <= median_tol
    }
}

/// Check `analytic` against central differences of `f` at `x0`.
///
/// All coordinates are probed when `numel <= max_samples`, otherwise a
/// uniform sample without replacement. `f` must be deterministic; use
/// double precision.
pub fn finite_difference_check<F>(
    mut f: F,
    x0: &Tensor<f64>,
    analytic: &[f64],
    h: f64,
    max_samples: usize,
    rng: &mut impl Rng,
) -> FdReport
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    assert_eq!(analytic.len(), x0.numel(), "analytic gradient length mismatch");
    let n = x0.numel();
    let coords: Vec<usize> = if n <= max_samples {
        (0..n).collect()
    } else {
        sample(rng, n, max_samples).into_vec()
    };
    let mut rels = Vec::with_capacity(coords.len());
    let mut max_rel = 0.0f64;
    for &i in &coords {
        let mut xp = x0.clone();
        xp.data_mut()[i] += h;
        let fp = f(&xp);
        let mut xm = x0.clone();
        xm.data_mut()[i] -= h;
        let fm = f(&xm);
        let fd = (fp - fm) / (2.0 * h);
        let an = analytic[i];
        let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
        rels.push(rel);
    }
    rels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_rel = if rels.is_empty() { 0.0 } else { rels[rels.len() / 2] };
    FdReport { max_rel, median_rel, samples: coords.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 =
            Tensor::from_data(&[8], (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let analytic = vec![1.0; 8];
        let report = finite_difference_check(
            |x| x.data().iter().sum(),
            &x0,
            &analytic,
            1e-5,
            64,
            &mut rng,
        );
        assert!(report.max_rel <= 1e-8, "max_rel = {}", report.max_rel);
    }

    #[test]
    fn sum_of_sigmoid_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 =
            Tensor::from_data(&[16], (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let s = tape.sigmoid(x).unwrap();
        let y = tape.reduce_sum(s, &[0], false).unwrap();
        tape.backward(y).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();

        let report = finite_difference_check(
            |xt| {
                let mut t = Tape::new();
                let v = t.constant(xt.clone());
                let s = t.sigmoid(v).unwrap();
                let y = t.reduce_sum(s, &[0], false).unwrap();
                t.value(y).item()
            },
            &x0,
            &analytic,
            1e-5,
            64,
            &mut rng,
        );
        assert!(report.max_rel <= 1e-6, "max_rel = {}", report.max_rel);
    }
}

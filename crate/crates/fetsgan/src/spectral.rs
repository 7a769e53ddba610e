//! Spectral normalization of linear weights via power iteration, with
//! persistent singular-vector estimates.

use crate::scalar::Scalar;
use rand::Rng;

// Estimates below this are treated as zero; dividing a zero matrix by the
// floor leaves it unchanged.
const SIGMA_FLOOR: f64 = 1e-12;

/// Persistent left/right singular-vector estimates for one weight matrix.
#[derive(Debug, Clone)]
pub struct SpectralNorm<F> {
    pub u: Vec<F>,
    pub v: Vec<F>,
}

fn normalize_in_place<F: Scalar>(x: &mut [F]) {
    let mut sq = F::zero();
    for &v in x.iter() {
        sq += v * v;
    }
    let norm = sq.sqrt();
    if norm.to_f64() > SIGMA_FLOOR {
        for v in x.iter_mut() {
            *v = *v / norm;
        }
    }
}

impl<F: Scalar> SpectralNorm<F> {
    /// `rows × cols` is the shape of the weight this state belongs to.
    pub fn new(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let mut u: Vec<F> = (0..rows).map(|_| F::from_f64(rng.gen_range(-1.0..1.0))).collect();
        let mut v: Vec<F> = (0..cols).map(|_| F::from_f64(rng.gen_range(-1.0..1.0))).collect();
        normalize_in_place(&mut u);
        normalize_in_place(&mut v);
        SpectralNorm { u, v }
    }

    pub fn from_parts(u: Vec<F>, v: Vec<F>) -> Self {
        SpectralNorm { u, v }
    }

    /// Run `iters` power iterations against `w` (row-major `rows × cols`),
    /// updating the persistent vectors, and return the singular-value
    /// estimate `uᵀ W v`.
    pub fn estimate(&mut self, w: &[F], rows: usize, cols: usize, iters: usize) -> F {
        assert_eq!(w.len(), rows * cols, "weight size");
        for _ in 0..iters.max(1) {
            // v ← normalize(Wᵀ u)
            for j in 0..cols {
                let mut acc = F::zero();
                for i in 0..rows {
                    acc += w[i * cols + j] * self.u[i];
                }
                self.v[j] = acc;
            }
            normalize_in_place(&mut self.v);
            // u ← normalize(W v)
            for i in 0..rows {
                let mut acc = F::zero();
                for j in 0..cols {
                    acc += w[i * cols + j] * self.v[j];
                }
                self.u[i] = acc;
            }
            normalize_in_place(&mut self.u);
        }
        self.sigma(w, rows, cols)
    }

    /// `uᵀ W v` with the current vectors, without updating them.
    pub fn sigma(&self, w: &[F], rows: usize, cols: usize) -> F {
        let mut acc = F::zero();
        for i in 0..rows {
            let mut row = F::zero();
            for j in 0..cols {
                row += w[i * cols + j] * self.v[j];
            }
            acc += self.u[i] * row;
        }
        acc
    }
}

/// Divide `w` by its estimated top singular value (floored at a small
/// positive constant, so a zero matrix comes back unchanged). The persistent
/// estimates in `state` are updated in place.
pub fn spectral_normalize<F: Scalar>(
    w: &[F],
    rows: usize,
    cols: usize,
    state: &mut SpectralNorm<F>,
    power_iters: usize,
) -> Vec<F> {
    let sigma = state.estimate(w, rows, cols, power_iters).to_f64().max(SIGMA_FLOOR);
    let inv = F::from_f64(1.0 / sigma);
    w.iter().map(|&x| x * inv).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn svd_max(w: &[f64], rows: usize, cols: usize) -> f64 {
        let m = nalgebra::DMatrix::from_row_slice(rows, cols, w);
        m.svd(false, false).singular_values[0]
    }

    #[test]
    fn diagonal_matrix_scaled_by_top_singular_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = vec![2.0, 0.0, 0.0, 1.0];
        let mut state = SpectralNorm::<f64>::new(2, 2, &mut rng);
        let out = spectral_normalize(&w, 2, 2, &mut state, 50);
        assert!((out[0] - 1.0).abs() < 1e-9, "{out:?}");
        assert!((out[3] - 0.5).abs() < 1e-9, "{out:?}");
    }

    #[test]
    fn orthogonal_matrix_unchanged() {
        let (c, s) = (0.6f64, 0.8f64);
        let w = vec![c, -s, s, c];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = SpectralNorm::<f64>::new(2, 2, &mut rng);
        let out = spectral_normalize(&w, 2, 2, &mut state, 50);
        for (a, b) in out.iter().zip(&w) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_matrix_unchanged() {
        let w = vec![0.0; 6];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = SpectralNorm::<f64>::new(2, 3, &mut rng);
        let out = spectral_normalize(&w, 2, 3, &mut state, 5);
        assert_eq!(out, w);
    }

    #[test]
    fn random_matrix_normalized_within_tolerance_of_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut state = SpectralNorm::<f64>::new(64, 64, &mut rng);
        let out = spectral_normalize(&w, 64, 64, &mut state, 20);
        let top = svd_max(&out, 64, 64);
        assert!((0.99..=1.01).contains(&top), "top singular value {top}");
    }

    #[test]
    fn normalized_weights_within_acceptance_band() {
        // the band checked by the acceptance suite, at its iteration count
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..32 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut state = SpectralNorm::<f64>::new(32, 16, &mut rng);
            let out = spectral_normalize(&w, 32, 16, &mut state, 30);
            let top = svd_max(&out, 32, 16);
            assert!(top <= 1.0 + 1e-2, "seed {seed}: top {top}");
            assert!(top >= 0.9, "seed {seed}: top {top}");
        }
    }
}

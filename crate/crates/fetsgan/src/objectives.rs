//! The reconstruction objective (first-above-threshold or full sum) and the
//! least-squares adversarial objectives in feature space and latent space.

use crate::scalar::Scalar;
use crate::tensor::{EngineError, Result, Tape, TensorId};

/// First index (1-based) whose value exceeds `eps`; if none does, the argmax
/// (ties broken toward the earliest step).
pub fn fat_index<F: Scalar>(l: &[F], eps: F) -> Result<usize> {
    if l.is_empty() {
        return Err(EngineError::Contract(
            "fat_index: empty per-step loss sequence".into(),
        ));
    }
    for (i, &v) in l.iter().enumerate() {
        if v > eps {
            return Ok(i + 1);
        }
    }
    let mut best = 0;
    for (i, &v) in l.iter().enumerate() {
        if v > l[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// How reconstruction error is aggregated over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconMode {
    /// Loss at the first-above-threshold step only (selection excluded from
    /// differentiation).
    Fat,
    /// Sum of per-step losses over every valid step.
    FullSum,
}

/// Reconstruction loss node plus, in FAT mode, the selected step (1-based)
/// per sequence.
pub struct ReconLoss {
    pub loss: TensorId,
    pub taus: Option<Vec<usize>>,
}

/// Per-step squared error between target steps `x` and reconstructed steps
/// `x_bar` (both `batch × dim` per timestep), averaged over features:
/// one `batch × 1` column per step.
fn per_step_errors<F: Scalar>(
    tape: &mut Tape<F>,
    x: &[TensorId],
    x_bar: &[TensorId],
) -> Result<Vec<TensorId>> {
    if x.len() != x_bar.len() {
        return Err(EngineError::Contract(format!(
            "reconstruction: {} target steps vs {} reconstructed",
            x.len(),
            x_bar.len()
        )));
    }
    let dim = tape.shape(x[0])[1];
    let feat_mean = tape.constant(vec![F::from_f64(1.0 / dim as f64); dim], &[dim, 1])?;
    let mut out = Vec::with_capacity(x.len());
    for (&xt, &bt) in x.iter().zip(x_bar) {
        let diff = tape.sub(xt, bt)?;
        let sq = tape.mul(diff, diff)?;
        out.push(tape.matmul(sq, feat_mean)?);
    }
    Ok(out)
}

/// Reconstruction loss between per-timestep target tensors and reconstructed
/// tensors. `lengths` gives each sequence's valid horizon.
///
/// FAT mode selects `τ_i = fat_index(l_i, eps)` per sequence from the
/// *values* of the per-step errors and returns the batch mean of `l_τ`; the
/// selection itself is a constant mask, so gradient flows only through the
/// selected steps. Full-sum mode returns the batch mean of `Σ_t l_t` over
/// valid steps.
pub fn reconstruction_loss<F: Scalar>(
    tape: &mut Tape<F>,
    x: &[TensorId],
    x_bar: &[TensorId],
    lengths: &[usize],
    eps: f64,
    mode: ReconMode,
) -> Result<ReconLoss> {
    let errors = per_step_errors(tape, x, x_bar)?;
    let batch = lengths.len();
    let t_max = errors.len();
    debug_assert!(lengths.iter().all(|&l| l >= 1 && l <= t_max));
    match mode {
        ReconMode::FullSum => {
            let mut total: Option<TensorId> = None;
            for (t, &l_t) in errors.iter().enumerate() {
                let col: Vec<F> = lengths
                    .iter()
                    .map(|&len| if t < len { F::one() } else { F::zero() })
                    .collect();
                let mask = tape.constant(col, &[batch, 1])?;
                let masked = tape.mul(l_t, mask)?;
                let s = tape.sum(masked);
                total = Some(match total {
                    Some(acc) => tape.add(acc, s)?,
                    None => s,
                });
            }
            let loss = tape.scale(total.expect("at least one step"), 1.0 / batch as f64);
            Ok(ReconLoss { loss, taus: None })
        }
        ReconMode::Fat => {
            let eps_f = F::from_f64(eps);
            // Read the eagerly computed error values and pick τ per sequence.
            let mut taus = Vec::with_capacity(batch);
            for i in 0..batch {
                let per_seq: Vec<F> =
                    (0..lengths[i]).map(|t| tape.value(errors[t])[i]).collect();
                taus.push(fat_index(&per_seq, eps_f)?);
            }
            let mut total: Option<TensorId> = None;
            for (t, &l_t) in errors.iter().enumerate() {
                let col: Vec<F> = taus
                    .iter()
                    .map(|&tau| if tau == t + 1 { F::one() } else { F::zero() })
                    .collect();
                if col.iter().all(|v| v.is_zero()) {
                    continue;
                }
                let sel = tape.constant(col, &[batch, 1])?;
                let picked = tape.mul(l_t, sel)?;
                let s = tape.sum(picked);
                total = Some(match total {
                    Some(acc) => tape.add(acc, s)?,
                    None => s,
                });
            }
            let loss = tape.scale(total.expect("every sequence selects a step"), 1.0 / batch as f64);
            Ok(ReconLoss {
                loss,
                taus: Some(taus),
            })
        }
    }
}

/// Batch mean of `Σ_t (target − y_t)²` over valid steps, for per-timestep
/// score columns.
pub fn lsgan_seq_term<F: Scalar>(
    tape: &mut Tape<F>,
    scores: &[TensorId],
    lengths: &[usize],
    target: f64,
) -> Result<TensorId> {
    let batch = lengths.len();
    let mut total: Option<TensorId> = None;
    for (t, &y_t) in scores.iter().enumerate() {
        let neg = tape.scale(y_t, -1.0);
        let resid = tape.add_scalar(neg, target);
        let sq = tape.mul(resid, resid)?;
        let col: Vec<F> = lengths
            .iter()
            .map(|&len| if t < len { F::one() } else { F::zero() })
            .collect();
        let mask = tape.constant(col, &[batch, 1])?;
        let masked = tape.mul(sq, mask)?;
        let s = tape.sum(masked);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(tape.scale(total.expect("at least one step"), 1.0 / batch as f64))
}

/// Mean of `(target − y)²` for a `batch × 1` score column.
pub fn lsgan_vec_term<F: Scalar>(tape: &mut Tape<F>, scores: TensorId, target: f64) -> Result<TensorId> {
    let neg = tape.scale(scores, -1.0);
    let resid = tape.add_scalar(neg, target);
    let sq = tape.mul(resid, resid)?;
    Ok(tape.mean(sq))
}

/// Least-squares objectives for the feature-space critic:
///   L_dx = ½·E_real[Σ_t (1 − y_t)²] + ½·E_fake[Σ_t ŷ_t²]
///   L_fx = ½·E_fake[Σ_t (1 − ŷ_t)²]
pub fn feature_adv_losses<F: Scalar>(
    tape: &mut Tape<F>,
    y_real: &[TensorId],
    real_lengths: &[usize],
    y_fake: &[TensorId],
    fake_lengths: &[usize],
) -> Result<(TensorId, TensorId)> {
    let real_term = lsgan_seq_term(tape, y_real, real_lengths, 1.0)?;
    let fake_zero = lsgan_seq_term(tape, y_fake, fake_lengths, 0.0)?;
    let sum = tape.add(real_term, fake_zero)?;
    let l_dx = tape.scale(sum, 0.5);
    let fake_one = lsgan_seq_term(tape, y_fake, fake_lengths, 1.0)?;
    let l_fx = tape.scale(fake_one, 0.5);
    Ok((l_dx, l_fx))
}

/// The generator-side feature objective alone:
/// `L_fx = ½·E_fake[Σ_t (1 − ŷ_t)²]`.
pub fn feature_gen_loss<F: Scalar>(
    tape: &mut Tape<F>,
    y_fake: &[TensorId],
    fake_lengths: &[usize],
) -> Result<TensorId> {
    let term = lsgan_seq_term(tape, y_fake, fake_lengths, 1.0)?;
    Ok(tape.scale(term, 0.5))
}

/// The encoder-side latent objective alone:
/// `L_ez = ½·E[(1 − y_posterior)²]`.
pub fn latent_gen_loss<F: Scalar>(tape: &mut Tape<F>, y_posterior: TensorId) -> Result<TensorId> {
    let term = lsgan_vec_term(tape, y_posterior, 1.0)?;
    Ok(tape.scale(term, 0.5))
}

/// Least-squares objectives for the latent critic:
///   L_dz = ½·E[(1 − y_prior)²] + ½·E[y_posterior²]
///   L_ez = ½·E[(1 − y_posterior)²]
pub fn latent_adv_losses<F: Scalar>(
    tape: &mut Tape<F>,
    y_prior: TensorId,
    y_posterior: TensorId,
) -> Result<(TensorId, TensorId)> {
    let prior_term = lsgan_vec_term(tape, y_prior, 1.0)?;
    let post_zero = lsgan_vec_term(tape, y_posterior, 0.0)?;
    let sum = tape.add(prior_term, post_zero)?;
    let l_dz = tape.scale(sum, 0.5);
    let post_one = lsgan_vec_term(tape, y_posterior, 1.0)?;
    let l_ez = tape.scale(post_one, 0.5);
    Ok((l_dz, l_ez))
}

/// `λ·L_recon + L_ez + L_fx`, the quantity minimized jointly over encoder
/// and generator parameters. `l_fx` is absent under the no-feature-critic
/// ablation.
pub fn composite_eg_loss<F: Scalar>(
    tape: &mut Tape<F>,
    lambda: f64,
    l_recon: TensorId,
    l_ez: TensorId,
    l_fx: Option<TensorId>,
) -> Result<TensorId> {
    let weighted = tape.scale(l_recon, lambda);
    let base = tape.add(weighted, l_ez)?;
    match l_fx {
        Some(fx) => tape.add(base, fx),
        None => Ok(base),
    }
}

/// The values of every objective for one training step.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub recon: f64,
    pub fx: Option<f64>,
    pub dx: Option<f64>,
    pub ez: f64,
    pub dz: f64,
    pub taus: Option<Vec<usize>>,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn composite(&self) -> f64 {
        self.lambda * self.recon + self.ez + self.fx.unwrap_or(0.0)
    }

    pub fn mean_tau(&self) -> Option<f64> {
        self.taus
            .as_ref()
            .map(|taus| taus.iter().sum::<usize>() as f64 / taus.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.recon.is_finite()
            && self.ez.is_finite()
            && self.dz.is_finite()
            && self.fx.map_or(true, f64::is_finite)
            && self.dx.map_or(true, f64::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fat_index_definition_cases() {
        assert_eq!(fat_index(&[0.05, 0.02, 0.3, 0.4], 0.1).unwrap(), 3);
        assert_eq!(fat_index(&[0.01, 0.02], 0.1).unwrap(), 2);
        assert_eq!(fat_index(&[0.5, 0.6], 0.1).unwrap(), 1);
        assert_eq!(fat_index(&[0.2, 0.2], 0.5).unwrap(), 1); // tie → earliest
        assert!(fat_index::<f64>(&[], 0.1).is_err());
    }

    #[test]
    fn fat_index_matches_linear_scan_reference() {
        fn reference(l: &[f64], eps: f64) -> usize {
            for (i, &v) in l.iter().enumerate() {
                if v > eps {
                    return i + 1;
                }
            }
            let mut best = 0;
            for i in 1..l.len() {
                if l[i] > l[best] {
                    best = i;
                }
            }
            best + 1
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..10_000 {
            let t = rng.gen_range(1..40);
            let scale = match case % 3 {
                0 => 0.05, // all below threshold
                1 => 10.0, // mostly above
                _ => 1.0,
            };
            let l: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..scale)).collect();
            let eps = rng.gen_range(0.01..0.5);
            assert_eq!(fat_index(&l, eps).unwrap(), reference(&l, eps));
        }
    }

    #[test]
    fn fat_index_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = rng.gen_range(1..20);
            let l: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..1.0)).collect();
            let eps: f64 = rng.gen_range(0.01..0.9);
            let mapped: Vec<f64> = l.iter().map(|v| (3.0 * v).exp()).collect();
            let eps_mapped = (3.0 * eps).exp();
            assert_eq!(
                fat_index(&l, eps).unwrap(),
                fat_index(&mapped, eps_mapped).unwrap()
            );
        }
    }

    fn steps_from(
        tape: &mut Tape<f64>,
        rows: &[Vec<f64>],
        dim: usize,
        grad: bool,
    ) -> Vec<TensorId> {
        rows.iter()
            .map(|r| tape.leaf(r.clone(), &[r.len() / dim, dim], grad).unwrap())
            .collect()
    }

    #[test]
    fn perfect_reconstruction_is_zero_in_both_modes() {
        for mode in [ReconMode::Fat, ReconMode::FullSum] {
            let mut tape = Tape::<f64>::new();
            let x = steps_from(&mut tape, &[vec![0.3, -0.2], vec![0.5, 0.1]], 2, false);
            let xb = steps_from(&mut tape, &[vec![0.3, -0.2], vec![0.5, 0.1]], 2, true);
            let out = reconstruction_loss(&mut tape, &x, &xb, &[2], 0.1, mode).unwrap();
            assert_eq!(tape.scalar_value(out.loss), 0.0);
        }
    }

    #[test]
    fn fat_loss_selects_expected_step() {
        // single sequence, per-step errors [0.05, 0.2] → τ=2, loss 0.2
        let mut tape = Tape::<f64>::new();
        let x = steps_from(&mut tape, &[vec![0.0], vec![0.0]], 1, false);
        let e1 = 0.05f64.sqrt();
        let e2 = 0.2f64.sqrt();
        let xb = steps_from(&mut tape, &[vec![e1], vec![e2]], 1, true);
        let out = reconstruction_loss(&mut tape, &x, &xb, &[2], 0.1, ReconMode::Fat).unwrap();
        assert_eq!(out.taus, Some(vec![2]));
        assert!((tape.scalar_value(out.loss) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn fat_gradient_zero_off_selected_step() {
        let mut tape = Tape::<f64>::new();
        let x = steps_from(&mut tape, &[vec![0.0], vec![0.0], vec![0.0]], 1, false);
        let xb = steps_from(&mut tape, &[vec![0.1], vec![0.9], vec![0.5]], 1, true);
        let out = reconstruction_loss(&mut tape, &x, &xb, &[3], 0.1, ReconMode::Fat).unwrap();
        assert_eq!(out.taus, Some(vec![2]));
        tape.backward(out.loss).unwrap();
        // a grad that never received flow stays unallocated; both forms are
        // "exactly zero"
        let off_tau_zero = |id| tape.grad(id).map_or(true, |g| g.iter().all(|&v| v == 0.0));
        assert!(off_tau_zero(xb[0]));
        assert!(tape.grad(xb[1]).unwrap()[0] != 0.0);
        assert!(off_tau_zero(xb[2]));
    }

    #[test]
    fn full_sum_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (batch, t_max, dim) = (4usize, 6usize, 3usize);
        let lengths = vec![6, 3, 5, 6];
        let xs: Vec<Vec<f64>> = (0..t_max)
            .map(|_| (0..batch * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let bs: Vec<Vec<f64>> = (0..t_max)
            .map(|_| (0..batch * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut tape = Tape::<f64>::new();
        let x = steps_from(&mut tape, &xs, dim, false);
        let xb = steps_from(&mut tape, &bs, dim, true);
        let out =
            reconstruction_loss(&mut tape, &x, &xb, &lengths, 0.1, ReconMode::FullSum).unwrap();
        // independent double-loop summation
        let mut oracle = 0.0;
        for i in 0..batch {
            for t in 0..lengths[i] {
                let mut step = 0.0;
                for d in 0..dim {
                    let a = xs[t][i * dim + d];
                    let b = bs[t][i * dim + d];
                    step += (a - b) * (a - b);
                }
                oracle += step / dim as f64;
            }
        }
        oracle /= batch as f64;
        assert!((tape.scalar_value(out.loss) - oracle).abs() < 1e-6);
    }

    #[test]
    fn feature_losses_hand_cases() {
        // y_real ≡ 1, y_fake ≡ 0 → L_dx = 0
        let mut tape = Tape::<f64>::new();
        let real = steps_from(&mut tape, &[vec![1.0], vec![1.0]], 1, false);
        let fake = steps_from(&mut tape, &[vec![0.0], vec![0.0]], 1, true);
        let (dx, _fx) = feature_adv_losses(&mut tape, &real, &[2], &fake, &[2]).unwrap();
        assert_eq!(tape.scalar_value(dx), 0.0);

        // T=2, y_real ≡ 0, y_fake ≡ 1, one sequence each → L_dx = 2, L_fx = 0
        let mut tape = Tape::<f64>::new();
        let real = steps_from(&mut tape, &[vec![0.0], vec![0.0]], 1, false);
        let fake = steps_from(&mut tape, &[vec![1.0], vec![1.0]], 1, true);
        let (dx, fx) = feature_adv_losses(&mut tape, &real, &[2], &fake, &[2]).unwrap();
        assert_eq!(tape.scalar_value(dx), 2.0);
        assert_eq!(tape.scalar_value(fx), 0.0);
    }

    #[test]
    fn feature_losses_match_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (batch, t_max) = (3usize, 5usize);
        let lengths = vec![5, 2, 4];
        let yr: Vec<Vec<f64>> = (0..t_max)
            .map(|_| (0..batch).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let yf: Vec<Vec<f64>> = (0..t_max)
            .map(|_| (0..batch).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let mut tape = Tape::<f64>::new();
        let real = steps_from(&mut tape, &yr, 1, false);
        let fake = steps_from(&mut tape, &yf, 1, true);
        let (dx, fx) = feature_adv_losses(&mut tape, &real, &lengths, &fake, &lengths).unwrap();
        let (mut o_real, mut o_fake0, mut o_fake1) = (0.0, 0.0, 0.0);
        for i in 0..batch {
            for t in 0..lengths[i] {
                o_real += (1.0 - yr[t][i]).powi(2);
                o_fake0 += yf[t][i].powi(2);
                o_fake1 += (1.0 - yf[t][i]).powi(2);
            }
        }
        let b = batch as f64;
        let dx_oracle = 0.5 * (o_real / b) + 0.5 * (o_fake0 / b);
        let fx_oracle = 0.5 * (o_fake1 / b);
        assert!((tape.scalar_value(dx) - dx_oracle).abs() < 1e-9);
        assert!((tape.scalar_value(fx) - fx_oracle).abs() < 1e-9);
    }

    #[test]
    fn latent_losses_hand_cases_and_oracle() {
        // y_prior ≡ 1, y_posterior ≡ 0 → L_dz = 0, L_ez = 0.5
        let mut tape = Tape::<f64>::new();
        let prior = tape.leaf(vec![1.0, 1.0], &[2, 1], false).unwrap();
        let post = tape.leaf(vec![0.0, 0.0], &[2, 1], true).unwrap();
        let (dz, ez) = latent_adv_losses(&mut tape, prior, post).unwrap();
        assert_eq!(tape.scalar_value(dz), 0.0);
        assert_eq!(tape.scalar_value(ez), 0.5);

        // y_posterior ≡ 1 → L_ez = 0
        let mut tape = Tape::<f64>::new();
        let prior = tape.leaf(vec![0.3], &[1, 1], false).unwrap();
        let post = tape.leaf(vec![1.0], &[1, 1], true).unwrap();
        let (_dz, ez) = latent_adv_losses(&mut tape, prior, post).unwrap();
        assert_eq!(tape.scalar_value(ez), 0.0);

        // random scores vs scalar loop
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 16;
        let yp: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let yq: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::<f64>::new();
        let prior = tape.leaf(yp.clone(), &[n, 1], false).unwrap();
        let post = tape.leaf(yq.clone(), &[n, 1], true).unwrap();
        let (dz, ez) = latent_adv_losses(&mut tape, prior, post).unwrap();
        let nb = n as f64;
        let dz_oracle = 0.5 * yp.iter().map(|y| (1.0 - y).powi(2)).sum::<f64>() / nb
            + 0.5 * yq.iter().map(|y| y.powi(2)).sum::<f64>() / nb;
        let ez_oracle = 0.5 * yq.iter().map(|y| (1.0 - y).powi(2)).sum::<f64>() / nb;
        assert!((tape.scalar_value(dz) - dz_oracle).abs() < 1e-9);
        assert!((tape.scalar_value(ez) - ez_oracle).abs() < 1e-9);
    }

    #[test]
    fn composite_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let recon = tape.leaf(vec![0.1], &[1], true).unwrap();
        let ez = tape.leaf(vec![0.2], &[1], true).unwrap();
        let fx = tape.leaf(vec![0.3], &[1], true).unwrap();
        let c = composite_eg_loss(&mut tape, 10.0, recon, ez, Some(fx)).unwrap();
        assert!((tape.scalar_value(c) - 1.5).abs() < 1e-12);
        let c0 = composite_eg_loss(&mut tape, 0.0, recon, ez, Some(fx)).unwrap();
        assert!((tape.scalar_value(c0) - 0.5).abs() < 1e-12);
        let breakdown = LossBreakdown {
            recon: 0.1,
            fx: Some(0.3),
            dx: Some(0.0),
            ez: 0.2,
            dz: 0.0,
            taus: None,
            lambda: 10.0,
        };
        assert_eq!(breakdown.composite(), 10.0 * 0.1 + 0.2 + 0.3);
    }
}

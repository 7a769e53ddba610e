//! The optimization loop: per batch, one least-squares update of the feature
//! critic on detached reconstructions, one of the latent critic on detached
//! codes, then one joint encoder+generator step on the composite objective.
//! Also the teacher-forced autoregressive baseline and the shared forecaster
//! used for predictive scoring.

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::data::{epoch_batches, Dataset, Normalizer, SeqBatch};
use crate::nn::{
    count_parameters, init_gru_stack, init_linear, init_models, linear_forward, mask_pair,
    GruStack, Linear, ModelBundle, ModelDims, Net, NoiseSeq,
};
use crate::objectives::{
    composite_eg_loss, feature_adv_losses, feature_gen_loss, latent_adv_losses, latent_gen_loss,
    reconstruction_loss, LossBreakdown, ReconMode,
};
use crate::optim::{adam_step, clip_global_norm, AdamState, LrSchedule, OptimError};
use crate::tensor::{EngineError, Tape, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
    #[error("optimizer: {0}")]
    Optim(#[from] OptimError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("data: {0}")]
    Data(#[from] crate::data::DataError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(
        "non-finite loss in epoch {epoch} ({which}); last finite breakdown: \
         recon={recon:.6} fx={fx:?} dx={dx:?} ez={ez:.6} dz={dz:.6}"
    )]
    NonFinite {
        epoch: usize,
        which: &'static str,
        recon: f64,
        fx: Option<f64>,
        dx: Option<f64>,
        ez: f64,
        dz: f64,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which part of the objective to disable, mirroring the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Replace the first-above-threshold reconstruction with the full sum.
    NoFat,
    /// Drop the feature-space critic entirely.
    NoFeatureDisc,
}

/// All hyperparameters of a training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub latent_dim: usize,
    pub noise_dim: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub decay_fraction: f64,
    pub decay_final_ratio: f64,
    pub grad_clip: Option<f64>,
    /// Also feed the feature critic generator samples decoded from prior
    /// draws (off by default: the critic sees reconstructions only).
    pub prior_decoded_fakes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 10.0,
            epsilon: 0.1,
            latent_dim: 4,
            noise_dim: 4,
            hidden_width: 64,
            depth: 3,
            learning_rate: 1e-3,
            epochs: 1000,
            batch_size: 128,
            seed: 0,
            ablation: Ablation::None,
            decay_fraction: 0.1,
            decay_final_ratio: 0.1,
            grad_clip: None,
            prior_decoded_fakes: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.lambda < 0.0 {
            return fail("lambda must be >= 0");
        }
        if self.epsilon <= 0.0 {
            return fail("epsilon must be > 0");
        }
        if self.epochs < 1 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1");
        }
        if self.latent_dim < 1 || self.noise_dim < 1 || self.hidden_width < 1 || self.depth < 1 {
            return fail("dimensions must be >= 1");
        }
        if self.learning_rate <= 0.0 {
            return fail("learning_rate must be > 0");
        }
        if !(0.0 < self.decay_fraction && self.decay_fraction <= 1.0) {
            return fail("decay_fraction must be in (0, 1]");
        }
        if !(0.0 < self.decay_final_ratio && self.decay_final_ratio <= 1.0) {
            return fail("decay_final_ratio must be in (0, 1]");
        }
        Ok(())
    }

    pub fn dims(&self, data_dim: usize) -> ModelDims {
        ModelDims {
            data_dim,
            latent_dim: self.latent_dim,
            noise_dim: self.noise_dim,
            width: self.hidden_width,
            depth: self.depth,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_rate: self.learning_rate,
            total_epochs: self.epochs,
            decay_fraction: self.decay_fraction,
            final_ratio: self.decay_final_ratio,
        }
    }

    pub fn recon_mode(&self) -> ReconMode {
        match self.ablation {
            Ablation::NoFat => ReconMode::FullSum,
            _ => ReconMode::Fat,
        }
    }

    pub fn feature_disc_enabled(&self) -> bool {
        self.ablation != Ablation::NoFeatureDisc
    }
}

/// Per-epoch aggregates.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon: f64,
    pub fx: Option<f64>,
    pub dx: Option<f64>,
    pub ez: f64,
    pub dz: f64,
    pub mean_tau: Option<f64>,
    pub lr: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    /// CSV with one row per epoch:
    /// `epoch,L_recon,L_fx,L_dx,L_ez,L_dz,mean_tau,lr`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,L_recon,L_fx,L_dx,L_ez,L_dz,mean_tau,lr")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                e.epoch,
                e.recon,
                opt(e.fx),
                opt(e.dx),
                e.ez,
                e.dz,
                opt(e.mean_tau),
                e.lr
            )?;
        }
        Ok(())
    }
}

/// Where (and how often) `train` writes checkpoints.
#[derive(Debug, Clone)]
pub struct TrainSink {
    pub dir: PathBuf,
    pub checkpoint_every: usize,
    /// Full resolved run configuration to embed for provenance.
    pub run_config: Option<serde_json::Value>,
}

/// Mutable training state: the bundle plus one Adam instance per network and
/// the noise stream.
pub struct Trainer {
    pub bundle: ModelBundle<f32>,
    pub config: TrainConfig,
    opt_enc: AdamState<f32>,
    opt_gen: AdamState<f32>,
    opt_dx: AdamState<f32>,
    opt_dz: AdamState<f32>,
    noise_rng: ChaCha8Rng,
}

fn draw_latent(rng: &mut impl Rng, batch: usize, dim: usize) -> Vec<f32> {
    (0..batch * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Step-major constants for a detached set of sequences (`seqs[i]` is
/// `t_max × dim`, row-major).
fn bind_sequence_steps(
    tape: &mut Tape<f32>,
    seqs: &[Vec<f32>],
    dim: usize,
    t_max: usize,
) -> Result<Vec<TensorId>, EngineError> {
    let b = seqs.len();
    let mut steps = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let mut m = Vec::with_capacity(b * dim);
        for seq in seqs {
            m.extend_from_slice(&seq[t * dim..(t + 1) * dim]);
        }
        steps.push(tape.constant(m, &[b, dim])?);
    }
    Ok(steps)
}

impl Trainer {
    pub fn new(bundle: ModelBundle<f32>, config: TrainConfig) -> Self {
        let opt_enc = AdamState::for_net(&bundle.encoder.net);
        let opt_gen = AdamState::for_net(&bundle.generator.net);
        let opt_dx = AdamState::for_net(&bundle.feat_disc.net);
        let opt_dz = AdamState::for_net(&bundle.latent_disc.net);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(1);
        Trainer {
            bundle,
            config,
            opt_enc,
            opt_gen,
            opt_dx,
            opt_dz,
            noise_rng,
        }
    }

    /// One optimization pass over a (normalized) batch at the given learning
    /// rate. Phases: feature critic, latent critic, then encoder+generator.
    pub fn train_step(
        &mut self,
        batch: &SeqBatch<f32>,
        rate: f64,
    ) -> Result<LossBreakdown, TrainError> {
        let cfg = self.config.clone();
        let b = batch.batch_size();
        let t_max = batch.t_max;
        let d_eta = cfg.noise_dim;
        let d_z = cfg.latent_dim;
        let use_dx = cfg.feature_disc_enabled();

        // All randomness for the step is drawn up front, in a fixed order.
        let eta_enc = NoiseSeq::draw(b, t_max, d_eta, &mut self.noise_rng);
        let eta_gen = NoiseSeq::draw(b, t_max, d_eta, &mut self.noise_rng);
        let z_prior = draw_latent(&mut self.noise_rng, b, d_z);
        let prior_fakes = if cfg.prior_decoded_fakes && use_dx {
            let z_pf = draw_latent(&mut self.noise_rng, b, d_z);
            let eta_pf = NoiseSeq::draw(b, t_max, d_eta, &mut self.noise_rng);
            Some((z_pf, eta_pf))
        } else {
            None
        };

        // Detached forward: codes and reconstructions as plain values.
        let z_post = self.bundle.encoder.encode(batch, &eta_enc)?;
        let x_bar = self.bundle.generator.generate(&z_post, &eta_gen, t_max)?;
        let prior_decoded = match &prior_fakes {
            Some((z_pf, eta_pf)) => {
                let codes: Vec<Vec<f32>> = z_pf.chunks(d_z).map(|c| c.to_vec()).collect();
                Some(self.bundle.generator.generate(&codes, eta_pf, t_max)?)
            }
            None => None,
        };

        // Phase 1: feature critic on real vs detached fakes.
        let dx_value = if use_dx {
            let mut tape = Tape::new();
            let bound = self.bundle.feat_disc.net.bind(&mut tape, true)?;
            let sigma = self.bundle.feat_disc.head_sigma(1);
            let real_steps: Vec<TensorId> = (0..t_max)
                .map(|t| tape.constant(batch.step_matrix(t), &[b, batch.dim]))
                .collect::<Result<_, _>>()?;
            let (fake_seqs, fake_lengths): (Vec<Vec<f32>>, Vec<usize>) = match &prior_decoded {
                Some(extra) => {
                    let mut seqs = x_bar.clone();
                    seqs.extend(extra.iter().cloned());
                    let mut lens = batch.lengths.clone();
                    lens.extend(batch.lengths.iter().copied());
                    (seqs, lens)
                }
                None => (x_bar.clone(), batch.lengths.clone()),
            };
            let fake_steps = bind_sequence_steps(&mut tape, &fake_seqs, batch.dim, t_max)?;
            let y_real = self.bundle.feat_disc.forward(&mut tape, &bound, &real_steps, sigma)?;
            let y_fake = self.bundle.feat_disc.forward(&mut tape, &bound, &fake_steps, sigma)?;
            let (l_dx, _) =
                feature_adv_losses(&mut tape, &y_real, &batch.lengths, &y_fake, &fake_lengths)?;
            tape.backward(l_dx)?;
            let mut grads = self.bundle.feat_disc.net.collect_grads(&tape, &bound);
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            adam_step(&mut self.bundle.feat_disc.net, &grads, &mut self.opt_dx, rate)?;
            Some(tape.scalar_value(l_dx) as f64)
        } else {
            None
        };

        // Phase 2: latent critic on prior draws vs detached posterior codes.
        let dz_value = {
            let mut tape = Tape::new();
            let bound = self.bundle.latent_disc.net.bind(&mut tape, true)?;
            let sigmas = self.bundle.latent_disc.sigmas(1);
            let prior = tape.constant(z_prior.clone(), &[b, d_z])?;
            let post_flat: Vec<f32> = z_post.iter().flatten().copied().collect();
            let post = tape.constant(post_flat, &[b, d_z])?;
            let y_prior = self.bundle.latent_disc.forward(&mut tape, &bound, prior, &sigmas)?;
            let y_post = self.bundle.latent_disc.forward(&mut tape, &bound, post, &sigmas)?;
            let (l_dz, _) = latent_adv_losses(&mut tape, y_prior, y_post)?;
            tape.backward(l_dz)?;
            let mut grads = self.bundle.latent_disc.net.collect_grads(&tape, &bound);
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            adam_step(&mut self.bundle.latent_disc.net, &grads, &mut self.opt_dz, rate)?;
            tape.scalar_value(l_dz) as f64
        };

        // Phase 3: joint encoder+generator step on λ·recon + L_ez (+ L_fx).
        let (recon_value, ez_value, fx_value, taus) = {
            let mut tape = Tape::new();
            let enc_bound = self.bundle.encoder.net.bind(&mut tape, true)?;
            let gen_bound = self.bundle.generator.net.bind(&mut tape, true)?;
            let z = self
                .bundle
                .encoder
                .forward(&mut tape, &enc_bound, batch, &eta_enc)?;
            let x_bar_steps =
                self.bundle
                    .generator
                    .forward(&mut tape, &gen_bound, z, &eta_gen, t_max)?;
            let x_steps: Vec<TensorId> = (0..t_max)
                .map(|t| tape.constant(batch.step_matrix(t), &[b, batch.dim]))
                .collect::<Result<_, _>>()?;
            let recon = reconstruction_loss(
                &mut tape,
                &x_steps,
                &x_bar_steps,
                &batch.lengths,
                cfg.epsilon,
                cfg.recon_mode(),
            )?;
            let fx = if use_dx {
                let dx_bound = self.bundle.feat_disc.net.bind(&mut tape, false)?;
                let sigma = self.bundle.feat_disc.head_sigma(1);
                let y_fake =
                    self.bundle
                        .feat_disc
                        .forward(&mut tape, &dx_bound, &x_bar_steps, sigma)?;
                let fx_recon = feature_gen_loss(&mut tape, &y_fake, &batch.lengths)?;
                match &prior_fakes {
                    Some((z_pf, eta_pf)) => {
                        let z_const = tape.constant(z_pf.clone(), &[b, d_z])?;
                        let decoded = self.bundle.generator.forward(
                            &mut tape,
                            &gen_bound,
                            z_const,
                            eta_pf,
                            t_max,
                        )?;
                        let y_pf =
                            self.bundle
                                .feat_disc
                                .forward(&mut tape, &dx_bound, &decoded, sigma)?;
                        let fx_prior = feature_gen_loss(&mut tape, &y_pf, &batch.lengths)?;
                        let sum = tape.add(fx_recon, fx_prior)?;
                        Some(tape.scale(sum, 0.5))
                    }
                    None => Some(fx_recon),
                }
            } else {
                None
            };
            let dz_bound = self.bundle.latent_disc.net.bind(&mut tape, false)?;
            let dz_sigmas = self.bundle.latent_disc.sigmas(1);
            let y_post = self
                .bundle
                .latent_disc
                .forward(&mut tape, &dz_bound, z, &dz_sigmas)?;
            let l_ez = latent_gen_loss(&mut tape, y_post)?;
            let composite = composite_eg_loss(&mut tape, cfg.lambda, recon.loss, l_ez, fx)?;
            tape.backward(composite)?;
            let mut enc_grads = self.bundle.encoder.net.collect_grads(&tape, &enc_bound);
            let mut gen_grads = self.bundle.generator.net.collect_grads(&tape, &gen_bound);
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut enc_grads, max_norm);
                clip_global_norm(&mut gen_grads, max_norm);
            }
            adam_step(&mut self.bundle.encoder.net, &enc_grads, &mut self.opt_enc, rate)?;
            adam_step(&mut self.bundle.generator.net, &gen_grads, &mut self.opt_gen, rate)?;
            (
                tape.scalar_value(recon.loss) as f64,
                tape.scalar_value(l_ez) as f64,
                fx.map(|id| tape.scalar_value(id) as f64),
                recon.taus,
            )
        };

        Ok(LossBreakdown {
            recon: recon_value,
            fx: fx_value,
            dx: dx_value,
            ez: ez_value,
            dz: dz_value,
            taus,
            lambda: cfg.lambda,
        })
    }
}

pub(crate) fn shuffle_seed(base: u64, epoch: usize) -> u64 {
    base ^ (epoch as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x1234_5678_9ABC_DEF1)
}

/// Train a bundle from scratch on a raw (unnormalized) dataset. Returns the
/// trained bundle and the per-epoch log; writes periodic and final
/// checkpoints when `sink` is given.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset<f32>,
    sink: Option<&TrainSink>,
) -> Result<(ModelBundle<f32>, TrainLog), TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if dataset.len() < config.batch_size {
        eprintln!(
            "warning: dataset has {} sequences, smaller than batch size {}; training with one smaller batch",
            dataset.len(),
            config.batch_size
        );
    }
    let normalizer = Normalizer::fit(dataset)?;
    let ds_norm = normalizer.apply(dataset);
    let mut bundle: ModelBundle<f32> = init_models(config.dims(dataset.dim), config.seed);
    bundle.normalizer = normalizer;
    let schedule = config.schedule();
    let mut trainer = Trainer::new(bundle, config.clone());
    let mut log = TrainLog::default();

    let save_checkpoint =
        |trainer: &Trainer, name: &str, sink: &TrainSink| -> Result<(), TrainError> {
            std::fs::create_dir_all(&sink.dir)?;
            let ckpt = Checkpoint {
                bundle: trainer.bundle.clone(),
                config: trainer.config.clone(),
                feature_names: dataset.feature_names.clone(),
                run_config: sink.run_config.clone(),
            };
            checkpoint::save(&ckpt, &sink.dir.join(name))?;
            Ok(())
        };

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let rate = schedule.rate_at(epoch)?;
        let batches = epoch_batches(&ds_norm, config.batch_size, shuffle_seed(config.seed, epoch));
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64); // recon, fx, dx, ez, dz
        let mut tau_sum = 0.0f64;
        let mut tau_count = 0usize;
        let mut n_seqs = 0usize;
        let mut last_finite: Option<LossBreakdown> = None;
        for batch in &batches {
            let breakdown = trainer.train_step(batch, rate)?;
            if !breakdown.all_finite() {
                let last = last_finite.unwrap_or_else(|| breakdown.clone());
                return Err(TrainError::NonFinite {
                    epoch,
                    which: "train_step",
                    recon: last.recon,
                    fx: last.fx,
                    dx: last.dx,
                    ez: last.ez,
                    dz: last.dz,
                });
            }
            let w = batch.batch_size() as f64;
            sums.0 += breakdown.recon * w;
            sums.1 += breakdown.fx.unwrap_or(0.0) * w;
            sums.2 += breakdown.dx.unwrap_or(0.0) * w;
            sums.3 += breakdown.ez * w;
            sums.4 += breakdown.dz * w;
            if let Some(taus) = &breakdown.taus {
                tau_sum += taus.iter().sum::<usize>() as f64;
                tau_count += taus.len();
            }
            n_seqs += batch.batch_size();
            last_finite = Some(breakdown);
        }
        let n = n_seqs as f64;
        let use_dx = config.feature_disc_enabled();
        log.epochs.push(EpochStats {
            epoch,
            recon: sums.0 / n,
            fx: use_dx.then_some(sums.1 / n),
            dx: use_dx.then_some(sums.2 / n),
            ez: sums.3 / n,
            dz: sums.4 / n,
            mean_tau: (tau_count > 0).then(|| tau_sum / tau_count as f64),
            lr: rate,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        trainer.bundle.trained_epochs = epoch + 1;
        if let Some(sink) = sink {
            if sink.checkpoint_every > 0 && (epoch + 1) % sink.checkpoint_every == 0 {
                save_checkpoint(&trainer, &format!("checkpoint_epoch{}.fets", epoch + 1), sink)?;
            }
        }
    }
    if let Some(sink) = sink {
        save_checkpoint(&trainer, "final.fets", sink)?;
    }
    Ok((trainer.bundle, log))
}

/// The trainable parameter count for a config and data dimension (reported
/// in training logs).
pub fn parameter_count(config: &TrainConfig, data_dim: usize) -> usize {
    let bundle: ModelBundle<f32> = init_models(config.dims(data_dim), 0);
    count_parameters(&bundle)
}

// ---------------------------------------------------------------------------
// Forecaster: GRU stack + linear head predicting x_{t+horizon} from x_{1:t}.
// Shared by the teacher-forced baseline (horizon 1) and predictive scoring.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ForecastConfig {
    pub width: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without training-loss improvement.
    pub patience: Option<usize>,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            width: 64,
            depth: 3,
            learning_rate: 1e-3,
            epochs: 1000,
            batch_size: 128,
            seed: 0,
            patience: Some(50),
        }
    }
}

/// Autoregressive sequence model over normalized data.
pub struct Forecaster {
    pub net: Net<f32>,
    pub gru: GruStack,
    pub head: Linear,
    pub horizon: usize,
    pub dim: usize,
}

impl Forecaster {
    pub fn init(dim: usize, horizon: usize, fc: &ForecastConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(fc.seed);
        let mut net = Net::new("forecaster");
        let gru = init_gru_stack(&mut net, "gru", dim, fc.width, fc.depth, &mut rng);
        let head = init_linear(&mut net, "head", fc.width, dim, &mut rng);
        Forecaster {
            net,
            gru,
            head,
            horizon,
            dim,
        }
    }

    /// Per-position predictions for a batch: prediction `t` estimates
    /// `x_{t+horizon}` after consuming `x_{0..=t}`.
    fn forward_graph(
        &self,
        tape: &mut Tape<f32>,
        bound: &crate::nn::BoundNet,
        batch: &SeqBatch<f32>,
    ) -> Result<Vec<TensorId>, EngineError> {
        let b = batch.batch_size();
        let k = self.horizon;
        let mut state = self.gru.start(tape, b)?;
        let mut preds = Vec::new();
        for t in 0..batch.t_max.saturating_sub(k) {
            let x = tape.constant(batch.step_matrix(t), &[b, batch.dim])?;
            let top = self.gru.step(tape, bound, &mut state, x, None)?;
            preds.push(linear_forward(tape, bound, &self.head, top)?);
        }
        Ok(preds)
    }

    /// Masked mean squared error over the batch's valid prediction positions
    /// (position `t` is valid when `t + horizon < len_i`).
    fn loss_graph(
        &self,
        tape: &mut Tape<f32>,
        bound: &crate::nn::BoundNet,
        batch: &SeqBatch<f32>,
    ) -> Result<Option<TensorId>, EngineError> {
        let preds = self.forward_graph(tape, bound, batch)?;
        let b = batch.batch_size();
        let k = self.horizon;
        let mut total: Option<TensorId> = None;
        let mut valid = 0usize;
        for (t, &pred) in preds.iter().enumerate() {
            let target = tape.constant(batch.step_matrix(t + k), &[b, batch.dim])?;
            let diff = tape.sub(pred, target)?;
            let sq = tape.mul(diff, diff)?;
            let col: Vec<f32> = batch
                .lengths
                .iter()
                .map(|&len| if t + k < len { 1.0 } else { 0.0 })
                .collect();
            valid += col.iter().filter(|&&v| v > 0.0).count();
            let mask = mask_pair(tape, &col, batch.dim)?.0;
            let masked = tape.mul(sq, mask)?;
            let s = tape.sum(masked);
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        match total {
            Some(sum) if valid > 0 => Ok(Some(tape.scale(sum, 1.0 / (valid * self.dim) as f64))),
            _ => Ok(None),
        }
    }

    /// Teacher-forced predictions per sequence, aligned with targets
    /// `x_{horizon..len_i}`.
    pub fn predict(&self, batch: &SeqBatch<f32>) -> Result<Vec<Vec<f32>>, EngineError> {
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, false)?;
        let preds = self.forward_graph(&mut tape, &bound, batch)?;
        let b = batch.batch_size();
        let k = self.horizon;
        let mut out = vec![Vec::new(); b];
        for (t, &id) in preds.iter().enumerate() {
            let vals = tape.value(id);
            for i in 0..b {
                if t + k < batch.lengths[i] {
                    out[i].extend_from_slice(&vals[i * self.dim..(i + 1) * self.dim]);
                }
            }
        }
        Ok(out)
    }

    /// Free-running generation: consume `prefix` (teacher steps), then feed
    /// back the model's own predictions until `total` steps exist. Only
    /// meaningful at horizon 1.
    pub fn free_run(&self, prefix: &[f32], total: usize) -> Result<Vec<f32>, EngineError> {
        debug_assert_eq!(self.horizon, 1);
        let dim = self.dim;
        let prefix_len = prefix.len() / dim;
        let mut seq: Vec<f32> = prefix.to_vec();
        let mut hidden: Vec<Vec<f32>> = vec![vec![0.0; self.gru.hidden]; self.gru.layers.len()];
        let mut last_pred: Vec<f32> = vec![0.0; dim];
        for t in 0..total {
            let input: Vec<f32> = if t < prefix_len {
                seq[t * dim..(t + 1) * dim].to_vec()
            } else {
                seq.extend_from_slice(&last_pred);
                last_pred.clone()
            };
            let mut tape = Tape::new();
            let bound = self.net.bind(&mut tape, false)?;
            let mut state = self.gru.start_from(&mut tape, &hidden, 1)?;
            let x = tape.constant(input, &[1, dim])?;
            let top = self.gru.step(&mut tape, &bound, &mut state, x, None)?;
            let pred = linear_forward(&mut tape, &bound, &self.head, top)?;
            hidden = self.gru.state_values(&tape, &state);
            last_pred = tape.value(pred).to_vec();
        }
        seq.truncate(total * dim);
        Ok(seq)
    }

    /// Mean squared error of teacher-forced predictions over a dataset.
    pub fn teacher_forced_mse(&self, ds: &Dataset<f32>) -> Result<f64, EngineError> {
        let refs: Vec<&[f32]> = ds.sequences.iter().map(|s| s.as_slice()).collect();
        let batch = SeqBatch::from_sequences(&refs, ds.dim);
        let preds = self.predict(&batch)?;
        let k = self.horizon;
        let mut se = 0.0f64;
        let mut n = 0usize;
        for (i, pred) in preds.iter().enumerate() {
            let target = &batch.sequence(i)[k * ds.dim..];
            for (p, t) in pred.iter().zip(target) {
                se += (*p as f64 - *t as f64).powi(2);
                n += 1;
            }
        }
        Ok(se / n.max(1) as f64)
    }
}

/// Fit a forecaster on (already normalized) data with squared-error teacher
/// forcing. Returns the model and the per-epoch loss curve.
pub fn train_forecaster(
    dataset_norm: &Dataset<f32>,
    horizon: usize,
    fc: &ForecastConfig,
) -> Result<(Forecaster, Vec<f64>), TrainError> {
    if dataset_norm.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if dataset_norm.min_seq_len() <= horizon {
        return Err(TrainError::Config(format!(
            "horizon {horizon} leaves no valid positions for the shortest sequence"
        )));
    }
    let mut model = Forecaster::init(dataset_norm.dim, horizon, fc);
    let mut opt = AdamState::for_net(&model.net);
    let mut curve = Vec::with_capacity(fc.epochs);
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    for epoch in 0..fc.epochs {
        let batches = epoch_batches(dataset_norm, fc.batch_size, shuffle_seed(fc.seed, epoch));
        let mut loss_sum = 0.0f64;
        let mut n = 0usize;
        for batch in &batches {
            let mut tape = Tape::new();
            let bound = model.net.bind(&mut tape, true)?;
            let Some(loss) = model.loss_graph(&mut tape, &bound, batch)? else {
                continue;
            };
            tape.backward(loss)?;
            let grads = model.net.collect_grads(&tape, &bound);
            adam_step(&mut model.net, &grads, &mut opt, fc.learning_rate)?;
            loss_sum += tape.scalar_value(loss) as f64 * batch.batch_size() as f64;
            n += batch.batch_size();
        }
        let epoch_loss = loss_sum / n.max(1) as f64;
        curve.push(epoch_loss);
        if epoch_loss + 1e-12 < best {
            best = epoch_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if let Some(patience) = fc.patience {
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    Ok((model, curve))
}

/// The purely autoregressive baseline: a horizon-1 forecaster trained with
/// teacher forcing. Sampling feeds back its own predictions from a seed
/// prefix taken from the training data.
pub fn train_baseline_tforcing(
    dataset: &Dataset<f32>,
    fc: &ForecastConfig,
) -> Result<(Forecaster, Normalizer, Vec<f64>), TrainError> {
    let normalizer = Normalizer::fit(dataset)?;
    let ds_norm = normalizer.apply(dataset);
    let (model, curve) = train_forecaster(&ds_norm, 1, fc)?;
    Ok((model, normalizer, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_sines, SinesSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            hidden_width: 8,
            depth: 2,
            epochs: 1,
            batch_size: 4,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn tiny_sines(n: usize, t: usize) -> Dataset<f32> {
        synth_sines(&SinesSpec {
            n,
            t,
            seed: 3,
            ..SinesSpec::default()
        })
    }

    #[test]
    fn step_produces_finite_losses() {
        let ds = tiny_sines(8, 12);
        let cfg = tiny_config();
        let norm = Normalizer::fit(&ds).unwrap();
        let ds_n = norm.apply(&ds);
        let mut bundle: ModelBundle<f32> = init_models(cfg.dims(1), cfg.seed);
        bundle.normalizer = norm;
        let mut trainer = Trainer::new(bundle, cfg.clone());
        let batch = &epoch_batches(&ds_n, 8, 0)[0];
        let out = trainer.train_step(batch, 1e-3).unwrap();
        assert!(out.all_finite());
        assert!(out.dx.is_some() && out.fx.is_some());
        assert!(out.taus.is_some());
        assert!(out.recon >= 0.0 && out.ez >= 0.0 && out.dz >= 0.0);
    }

    #[test]
    fn no_feature_disc_leaves_critic_untouched() {
        let ds = tiny_sines(8, 10);
        let cfg = TrainConfig {
            ablation: Ablation::NoFeatureDisc,
            ..tiny_config()
        };
        let norm = Normalizer::fit(&ds).unwrap();
        let ds_n = norm.apply(&ds);
        let mut bundle: ModelBundle<f32> = init_models(cfg.dims(1), cfg.seed);
        bundle.normalizer = norm;
        let before: Vec<Vec<f32>> = bundle
            .feat_disc
            .net
            .entries
            .iter()
            .map(|e| e.data.clone())
            .collect();
        let mut trainer = Trainer::new(bundle, cfg);
        let batch = &epoch_batches(&ds_n, 8, 0)[0];
        let out = trainer.train_step(batch, 1e-3).unwrap();
        assert!(out.dx.is_none() && out.fx.is_none());
        for (e, b) in trainer.bundle.feat_disc.net.entries.iter().zip(&before) {
            assert_eq!(&e.data, b);
        }
    }

    #[test]
    fn no_fat_reports_full_sum_without_taus() {
        let ds = tiny_sines(8, 10);
        let cfg = TrainConfig {
            ablation: Ablation::NoFat,
            ..tiny_config()
        };
        let norm = Normalizer::fit(&ds).unwrap();
        let ds_n = norm.apply(&ds);
        let mut bundle: ModelBundle<f32> = init_models(cfg.dims(1), cfg.seed);
        bundle.normalizer = norm;
        let mut trainer = Trainer::new(bundle, cfg);
        let batch = &epoch_batches(&ds_n, 8, 0)[0];
        let out = trainer.train_step(batch, 1e-3).unwrap();
        assert!(out.taus.is_none());
    }

    #[test]
    fn repeated_step_from_same_state_is_deterministic() {
        let ds = tiny_sines(8, 10);
        let cfg = tiny_config();
        let norm = Normalizer::fit(&ds).unwrap();
        let ds_n = norm.apply(&ds);
        let batch = &epoch_batches(&ds_n, 8, 0)[0];
        let run = || {
            let mut bundle: ModelBundle<f32> = init_models(cfg.dims(1), cfg.seed);
            bundle.normalizer = norm.clone();
            let mut trainer = Trainer::new(bundle, cfg.clone());
            trainer.train_step(batch, 1e-3).unwrap();
            trainer
                .bundle
                .encoder
                .net
                .entries
                .iter()
                .map(|e| e.data.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_one_epoch_writes_loadable_checkpoint() {
        let ds = tiny_sines(10, 8);
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let sink = TrainSink {
            dir: dir.path().to_path_buf(),
            checkpoint_every: 0,
            run_config: None,
        };
        let (bundle, log) = train(&cfg, &ds, Some(&sink)).unwrap();
        assert_eq!(log.epochs.len(), 1);
        let loaded = checkpoint::load(&dir.path().join("final.fets")).unwrap();
        assert_eq!(loaded.bundle.trained_epochs, 1);
        assert_eq!(loaded.config, cfg);
        for (a, b) in loaded
            .bundle
            .encoder
            .net
            .entries
            .iter()
            .zip(&bundle.encoder.net.entries)
        {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn learning_rate_flat_then_decayed_in_log() {
        let ds = tiny_sines(6, 8);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 6,
            hidden_width: 4,
            depth: 1,
            ..tiny_config()
        };
        let (_bundle, log) = train(&cfg, &ds, None).unwrap();
        assert_eq!(log.epochs.len(), 20);
        // flat at the base rate up to and including the window start (0.9·E)
        for e in &log.epochs[..=18] {
            assert_eq!(e.lr, 1e-3);
        }
        assert!(log.epochs[19].lr < 1e-3);
    }

    #[test]
    fn baseline_learns_constant_sequences() {
        let ds = Dataset::new(
            (0..6).map(|_| vec![0.7f32; 10]).collect(),
            1,
            vec!["x0".into()],
        );
        let fc = ForecastConfig {
            width: 8,
            depth: 1,
            epochs: 60,
            batch_size: 6,
            seed: 1,
            patience: None,
            ..ForecastConfig::default()
        };
        let (model, norm, curve) = train_baseline_tforcing(&ds, &fc).unwrap();
        assert!(curve.last().unwrap() < &1e-4, "final loss {curve:?}");
        // constant data normalizes to 0; predictions should be near 0,
        // denormalizing back to the constant
        let ds_n = norm.apply(&ds);
        let refs: Vec<&[f32]> = ds_n.sequences.iter().map(|s| s.as_slice()).collect();
        let batch = SeqBatch::from_sequences(&refs, 1);
        let preds = model.predict(&batch).unwrap();
        for p in preds[0].iter() {
            let denorm = norm.invert_value(0, *p);
            assert!((denorm - 0.7).abs() < 1e-2, "prediction {denorm}");
        }
    }

    #[test]
    fn baseline_loss_decreases_on_sines() {
        let ds = tiny_sines(12, 16);
        let fc = ForecastConfig {
            width: 8,
            depth: 1,
            epochs: 30,
            batch_size: 12,
            seed: 2,
            patience: None,
            ..ForecastConfig::default()
        };
        let (_, _, curve) = train_baseline_tforcing(&ds, &fc).unwrap();
        assert!(curve.last().unwrap() < curve.first().unwrap());
    }

    #[test]
    fn exposure_bias_probe_free_run_no_better_than_teacher_forced() {
        let ds = tiny_sines(16, 20);
        let fc = ForecastConfig {
            width: 16,
            depth: 1,
            epochs: 80,
            batch_size: 16,
            seed: 3,
            patience: None,
            ..ForecastConfig::default()
        };
        let (model, norm, _) = train_baseline_tforcing(&ds, &fc).unwrap();
        let ds_n = norm.apply(&ds);
        let tf_mse = model.teacher_forced_mse(&ds_n).unwrap();
        // free-run from a 1-step prefix of each training sequence
        let mut fr_se = 0.0f64;
        let mut n = 0usize;
        for seq in &ds_n.sequences {
            let total = seq.len();
            let sample = model.free_run(&seq[..1], total).unwrap();
            for (a, b) in sample.iter().zip(seq).skip(1) {
                fr_se += (*a as f64 - *b as f64).powi(2);
                n += 1;
            }
        }
        let fr_mse = fr_se / n as f64;
        assert!(
            fr_mse >= tf_mse - 1e-9,
            "free-run mse {fr_mse} vs teacher-forced {tf_mse}"
        );
    }
}

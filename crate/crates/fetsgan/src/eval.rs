//! Evaluation harness: discriminative score, train-on-synthetic /
//! test-on-real predictive score, dominant-component spectral diagnostics,
//! PCA projection for multivariate data, selective sampling, and the
//! models × draws measurement protocol.

use crate::data::{DataError, Dataset, Normalizer, SeqBatch};
use crate::nn::{
    init_gru_stack, init_linear, linear_forward, mask_pair, GruStack, Linear, ModelBundle, Net,
    NoiseSeq,
};
use crate::objectives::{reconstruction_loss, ReconMode};
use crate::optim::{adam_step, AdamState};
use crate::tensor::{EngineError, Tape, TensorId};
use crate::train::{shuffle_seed, train_forecaster, ForecastConfig, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dominant component requires a single feature, got dim {0}")]
    MultiFeature(usize),
    #[error("sequence of length {len} too short (need at least {need})")]
    TooShort { len: usize, need: usize },
    #[error("horizon {horizon} is not below the shortest sequence length {min_len}")]
    Horizon { horizon: usize, min_len: usize },
    #[error("unknown metric `{0}` (valid: dis, pred, dft)")]
    UnknownMetric(String),
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("data: {0}")]
    Data(#[from] DataError),
}

// ---------------------------------------------------------------------------
// Spectral diagnostics
// ---------------------------------------------------------------------------

/// The strongest non-DC bin of a sequence's discrete Fourier transform.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DominantComponent {
    pub freq_index: usize,
    pub amplitude: f64,
    pub phase: f64,
}

/// DFT argmax over bins `1 .. ⌊T/2⌋`, with amplitude `2|X_k|/T` and the
/// phase angle of `X_k`.
pub fn dominant_component<F: crate::Scalar>(x: &[F]) -> Result<DominantComponent, EvalError> {
    let t = x.len();
    if t < 4 {
        return Err(EvalError::TooShort { len: t, need: 4 });
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v.to_f64(), 0.0)).collect();
    FftPlanner::new().plan_fft_forward(t).process(&mut buf);
    let half = t / 2;
    let mut best = 1usize;
    for k in 1..half {
        if buf[k].norm() > buf[best].norm() {
            best = k;
        }
    }
    Ok(DominantComponent {
        freq_index: best,
        amplitude: 2.0 * buf[best].norm() / t as f64,
        phase: buf[best].arg(),
    })
}

/// Dominant components of every sequence of a one-dimensional dataset.
pub fn dominant_components(ds: &Dataset<f32>) -> Result<Vec<DominantComponent>, EvalError> {
    if ds.dim != 1 {
        return Err(EvalError::MultiFeature(ds.dim));
    }
    ds.sequences.iter().map(|s| dominant_component(s)).collect()
}

/// Two-sample Kolmogorov–Smirnov statistic: the supremum difference of the
/// empirical CDFs.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        let fa = i as f64 / sa.len() as f64;
        let fb = j as f64 / sb.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

/// Shared-bin histogram over the union range of both samples.
#[derive(Debug, Clone, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub real: usize,
    pub synthetic: usize,
}

pub fn shared_histogram(real: &[f64], synth: &[f64], bins: usize) -> Vec<HistogramBin> {
    let all = real.iter().chain(synth);
    let lo = all.clone().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = all.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !lo.is_finite() || !hi.is_finite() {
        return Vec::new();
    }
    let span = (hi - lo).max(1e-12);
    let width = span / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            real: 0,
            synthetic: 0,
        })
        .collect();
    let index = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    for &v in real {
        out[index(v)].real += 1;
    }
    for &v in synth {
        out[index(v)].synthetic += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// PCA projection (multivariate diagnostic)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct PcaPoint {
    pub label: String,
    pub pc1: f64,
    pub pc2: f64,
}

/// Exact 2-D PCA of flattened sequences, fit on the real set and applied to
/// both. Sequences are cropped to the shortest common length first.
pub fn pca_projection(real: &Dataset<f32>, synth: &Dataset<f32>) -> Vec<PcaPoint> {
    let min_len = real.min_seq_len().min(synth.min_seq_len());
    let width = min_len * real.dim;
    if width == 0 || real.is_empty() {
        return Vec::new();
    }
    let flatten = |ds: &Dataset<f32>| -> Vec<Vec<f64>> {
        ds.sequences
            .iter()
            .map(|s| s[..width].iter().map(|&v| v as f64).collect())
            .collect()
    };
    let real_rows = flatten(real);
    let synth_rows = flatten(synth);
    let n = real_rows.len();
    let mut mean = vec![0.0f64; width];
    for row in &real_rows {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = nalgebra::DMatrix::<f64>::zeros(width, width);
    for row in &real_rows {
        let centered: Vec<f64> = row.iter().zip(&mean).map(|(&v, &m)| v - m).collect();
        for i in 0..width {
            for j in i..width {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..width {
        for j in i..width {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let pc: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let col = eig.eigenvectors.column(k);
            let mut v: Vec<f64> = col.iter().copied().collect();
            // fix sign so the largest-magnitude entry is positive
            let lead = v
                .iter()
                .cloned()
                .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if lead < 0.0 {
                for x in &mut v {
                    *x = -*x;
                }
            }
            v
        })
        .collect();
    let project = |rows: &[Vec<f64>], label: &str| -> Vec<PcaPoint> {
        rows.iter()
            .map(|row| {
                let centered: Vec<f64> = row.iter().zip(&mean).map(|(&v, &m)| v - m).collect();
                let dot = |axis: &Vec<f64>| centered.iter().zip(axis).map(|(a, b)| a * b).sum();
                PcaPoint {
                    label: label.to_string(),
                    pc1: dot(&pc[0]),
                    pc2: if pc.len() > 1 { dot(&pc[1]) } else { 0.0 },
                }
            })
            .collect()
    };
    let mut out = project(&real_rows, "real");
    out.extend(project(&synth_rows, "synthetic"));
    out
}

// ---------------------------------------------------------------------------
// Distribution report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub real: Vec<DominantComponent>,
    pub synthetic: Vec<DominantComponent>,
    pub ks_frequency: f64,
    pub ks_amplitude: f64,
    pub ks_phase: f64,
    pub frequency_hist: Vec<HistogramBin>,
    pub amplitude_hist: Vec<HistogramBin>,
    pub phase_hist: Vec<HistogramBin>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistReport {
    pub spectral: Option<SpectralReport>,
    pub pca: Option<Vec<PcaPoint>>,
}

pub const HISTOGRAM_BINS: usize = 20;

/// For one-dimensional data: dominant-component triples, shared-bin
/// histograms, and two-sample KS statistics. For multivariate data: a 2-D
/// PCA projection (fit on real, applied to both).
pub fn distribution_report(
    real: &Dataset<f32>,
    synth: &Dataset<f32>,
) -> Result<DistReport, EvalError> {
    if real.dim == 1 && synth.dim == 1 {
        let rc = dominant_components(real)?;
        let sc = dominant_components(synth)?;
        let pick = |cs: &[DominantComponent], f: fn(&DominantComponent) -> f64| -> Vec<f64> {
            cs.iter().map(f).collect()
        };
        let rf = pick(&rc, |c| c.freq_index as f64);
        let sf = pick(&sc, |c| c.freq_index as f64);
        let ra = pick(&rc, |c| c.amplitude);
        let sa = pick(&sc, |c| c.amplitude);
        let rp = pick(&rc, |c| c.phase);
        let sp = pick(&sc, |c| c.phase);
        Ok(DistReport {
            spectral: Some(SpectralReport {
                ks_frequency: ks_statistic(&rf, &sf),
                ks_amplitude: ks_statistic(&ra, &sa),
                ks_phase: ks_statistic(&rp, &sp),
                frequency_hist: shared_histogram(&rf, &sf, HISTOGRAM_BINS),
                amplitude_hist: shared_histogram(&ra, &sa, HISTOGRAM_BINS),
                phase_hist: shared_histogram(&rp, &sp, HISTOGRAM_BINS),
                real: rc,
                synthetic: sc,
            }),
            pca: None,
        })
    } else {
        Ok(DistReport {
            spectral: None,
            pca: Some(pca_projection(real, synth)),
        })
    }
}

// ---------------------------------------------------------------------------
// Sequence classifier (discriminative score)
// ---------------------------------------------------------------------------

/// Classifier/forecaster training knobs.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub width: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: Option<usize>,
    pub train_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            width: 64,
            depth: 3,
            learning_rate: 1e-3,
            epochs: 1000,
            batch_size: 128,
            patience: Some(50),
            train_fraction: 0.8,
        }
    }
}

impl EvalConfig {
    fn forecast_config(&self, seed: u64) -> ForecastConfig {
        ForecastConfig {
            width: self.width,
            depth: self.depth,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            patience: self.patience,
        }
    }
}

struct SeqClassifier {
    net: Net<f32>,
    gru: GruStack,
    head: Linear,
}

impl SeqClassifier {
    fn init(dim: usize, width: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Net::new("classifier");
        let gru = init_gru_stack(&mut net, "gru", dim, width, depth, &mut rng);
        let head = init_linear(&mut net, "head", width, 1, &mut rng);
        SeqClassifier { net, gru, head }
    }

    /// Logit per sequence from the masked final top state.
    fn logits_graph(
        &self,
        tape: &mut Tape<f32>,
        bound: &crate::nn::BoundNet,
        batch: &SeqBatch<f32>,
    ) -> Result<TensorId, EngineError> {
        let b = batch.batch_size();
        let uniform = batch.uniform_length();
        let mut state = self.gru.start(tape, b)?;
        for t in 0..batch.t_max {
            let x = tape.constant(batch.step_matrix(t), &[b, batch.dim])?;
            let mask = if uniform {
                None
            } else {
                Some(mask_pair(tape, &batch.mask_column(t), self.gru.hidden)?)
            };
            self.gru.step(tape, bound, &mut state, x, mask)?;
        }
        let top = self.gru.top_state(&state);
        linear_forward(tape, bound, &self.head, top)
    }

    fn logits(&self, batch: &SeqBatch<f32>) -> Result<Vec<f32>, EngineError> {
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, false)?;
        let logits = self.logits_graph(&mut tape, &bound, batch)?;
        Ok(tape.value(logits).to_vec())
    }
}

type Labeled<'a> = (&'a [f32], f32);

fn labeled_batch(items: &[Labeled<'_>], dim: usize) -> (SeqBatch<f32>, Vec<f32>) {
    let seqs: Vec<&[f32]> = items.iter().map(|(s, _)| *s).collect();
    let labels: Vec<f32> = items.iter().map(|(_, l)| *l).collect();
    (SeqBatch::from_sequences(&seqs, dim), labels)
}

fn train_classifier(
    train_set: &[Labeled<'_>],
    dim: usize,
    ec: &EvalConfig,
    seed: u64,
) -> Result<SeqClassifier, EvalError> {
    let model = SeqClassifier::init(dim, ec.width, ec.depth, seed);
    let mut model = model;
    let mut opt = AdamState::for_net(&model.net);
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..ec.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(seed, epoch));
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        let mut loss_sum = 0.0f64;
        let mut n = 0usize;
        for chunk in order.chunks(ec.batch_size) {
            let items: Vec<Labeled> = chunk.iter().map(|&i| train_set[i]).collect();
            let (batch, labels) = labeled_batch(&items, dim);
            let mut tape = Tape::new();
            let bound = model.net.bind(&mut tape, true)?;
            let logits = model.logits_graph(&mut tape, &bound, &batch)?;
            let targets = tape.constant(labels, &[batch.batch_size(), 1])?;
            let loss = tape.bce_with_logits(logits, targets)?;
            tape.backward(loss)?;
            let grads = model.net.collect_grads(&tape, &bound);
            adam_step(&mut model.net, &grads, &mut opt, ec.learning_rate)
                .map_err(TrainError::from)?;
            loss_sum += tape.scalar_value(loss) as f64 * batch.batch_size() as f64;
            n += batch.batch_size();
        }
        let epoch_loss = loss_sum / n.max(1) as f64;
        if epoch_loss + 1e-12 < best {
            best = epoch_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if let Some(p) = ec.patience {
                if since_best >= p {
                    break;
                }
            }
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, Serialize)]
pub struct DiscriminativeScore {
    pub score: f64,
    pub test_accuracy: f64,
    pub split_seed: u64,
}

/// `|0.5 − held-out accuracy|` of a recurrent classifier separating real
/// from synthetic sequences (real labeled 1, synthetic 0; 80/20 split).
/// Both datasets must be in the same (normalized) units.
pub fn discriminative_score(
    real: &Dataset<f32>,
    synth: &Dataset<f32>,
    ec: &EvalConfig,
    seed: u64,
) -> Result<DiscriminativeScore, EvalError> {
    let mut pool: Vec<Labeled> = Vec::with_capacity(real.len() + synth.len());
    for s in &real.sequences {
        pool.push((s.as_slice(), 1.0));
    }
    for s in &synth.sequences {
        pool.push((s.as_slice(), 0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(&mut pool[..], &mut rng);
    let n_train = ((pool.len() as f64) * ec.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, pool.len() - 1);
    let (train_set, test_set) = pool.split_at(n_train);
    let model = train_classifier(train_set, real.dim, ec, seed)?;
    let (test_batch, labels) = labeled_batch(test_set, real.dim);
    let logits = model.logits(&test_batch)?;
    let correct = logits
        .iter()
        .zip(&labels)
        .filter(|(&lg, &y)| (lg > 0.0) == (y > 0.5))
        .count();
    let accuracy = correct as f64 / labels.len() as f64;
    Ok(DiscriminativeScore {
        score: (0.5 - accuracy).abs(),
        test_accuracy: accuracy,
        split_seed: seed,
    })
}

// ---------------------------------------------------------------------------
// Predictive score (train on synthetic, test on real)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct PredictiveScore {
    pub horizon: usize,
    pub mae: f64,
    pub mae_denormalized: Option<f64>,
}

/// Train a forecaster on synthetic data, measure mean absolute error of its
/// `horizon`-step predictions over every valid position of the real dataset.
/// Inputs are normalized; the denormalized MAE is derived per feature from
/// the normalizer spans.
pub fn predictive_score(
    real: &Dataset<f32>,
    synth: &Dataset<f32>,
    horizon: usize,
    ec: &EvalConfig,
    seed: u64,
    normalizer: Option<&Normalizer>,
) -> Result<PredictiveScore, EvalError> {
    let min_len = real.min_seq_len().min(synth.min_seq_len());
    if horizon >= min_len {
        return Err(EvalError::Horizon { horizon, min_len });
    }
    let (model, _) = train_forecaster(synth, horizon, &ec.forecast_config(seed))?;
    let refs: Vec<&[f32]> = real.sequences.iter().map(|s| s.as_slice()).collect();
    let batch = SeqBatch::from_sequences(&refs, real.dim);
    let preds = model.predict(&batch)?;
    let dim = real.dim;
    let mut abs_sum = vec![0.0f64; dim];
    let mut count = 0usize;
    for (i, pred) in preds.iter().enumerate() {
        let target = &batch.sequence(i)[horizon * dim..];
        for (row, (p, t)) in pred.chunks(dim).zip(target.chunks(dim)).enumerate() {
            let _ = row;
            for d in 0..dim {
                abs_sum[d] += (p[d] as f64 - t[d] as f64).abs();
            }
            count += 1;
        }
    }
    let per_feature: Vec<f64> = abs_sum.iter().map(|s| s / count.max(1) as f64).collect();
    let mae = per_feature.iter().sum::<f64>() / dim as f64;
    let mae_denormalized = normalizer.map(|norm| {
        per_feature
            .iter()
            .enumerate()
            .map(|(d, m)| m * norm.span(d) * 0.5)
            .sum::<f64>()
            / dim as f64
    });
    Ok(PredictiveScore {
        horizon,
        mae,
        mae_denormalized,
    })
}

// ---------------------------------------------------------------------------
// Selective sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SampleNearOptions {
    pub noise_std: f64,
    pub count: usize,
    /// Reuse one generator noise sequence for every sample (degenerate mode;
    /// with `noise_std = 0` all outputs become identical).
    pub share_generator_noise: bool,
}

impl Default for SampleNearOptions {
    fn default() -> Self {
        SampleNearOptions {
            noise_std: 0.1,
            count: 100,
            share_generator_noise: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleNearResult {
    /// Denormalized sequences, each the anchor's length × data dim.
    pub sequences: Vec<Vec<f32>>,
    pub anchor_code: Vec<f32>,
    /// 0 means the bundle was never trained; flagged for the caller.
    pub trained_epochs: usize,
}

/// Encode an anchor sequence (raw units), perturb its code with clamped
/// Gaussian noise, and decode each perturbed code with fresh generator
/// noise.
pub fn sample_near(
    bundle: &ModelBundle<f32>,
    anchor_raw: &[f32],
    opts: &SampleNearOptions,
    rng: &mut ChaCha8Rng,
) -> Result<SampleNearResult, EvalError> {
    let dim = bundle.dims.data_dim;
    let t = anchor_raw.len() / dim;
    if t == 0 {
        return Err(EvalError::TooShort { len: 0, need: 1 });
    }
    let anchor_norm: Vec<f32> = anchor_raw
        .chunks(dim)
        .flat_map(|row| {
            row.iter()
                .enumerate()
                .map(|(d, &v)| bundle.normalizer.apply_value(d, v))
        })
        .collect();
    let batch = SeqBatch::from_sequences(&[anchor_norm.as_slice()], dim);
    let eta_enc = NoiseSeq::draw(1, t, bundle.dims.noise_dim, rng);
    let anchor_code = bundle.encoder.encode(&batch, &eta_enc)?.remove(0);

    let normal = Normal::new(0.0f64, opts.noise_std.max(0.0)).expect("valid std");
    let codes: Vec<Vec<f32>> = (0..opts.count)
        .map(|_| {
            anchor_code
                .iter()
                .map(|&z| {
                    let perturbed = z as f64 + normal.sample(rng);
                    perturbed.clamp(-1.0, 1.0) as f32
                })
                .collect()
        })
        .collect();
    let noise = if opts.share_generator_noise {
        let one = NoiseSeq::draw(1, t, bundle.dims.noise_dim, rng);
        let mut data = Vec::with_capacity(opts.count * t * bundle.dims.noise_dim);
        for _ in 0..opts.count {
            data.extend_from_slice(&one.data);
        }
        NoiseSeq {
            data,
            batch: opts.count,
            t,
            dim: bundle.dims.noise_dim,
        }
    } else {
        NoiseSeq::draw(opts.count, t, bundle.dims.noise_dim, rng)
    };
    let generated = bundle.generator.generate(&codes, &noise, t)?;
    let sequences = generated
        .into_iter()
        .map(|seq| {
            seq.chunks(dim)
                .flat_map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(d, &v)| bundle.normalizer.invert_value(d, v))
                })
                .collect()
        })
        .collect();
    Ok(SampleNearResult {
        sequences,
        anchor_code,
        trained_epochs: bundle.trained_epochs,
    })
}

// ---------------------------------------------------------------------------
// Prior sampling / generation helpers
// ---------------------------------------------------------------------------

/// Draw codes from the uniform prior and decode one synthetic sequence per
/// requested length. Output stays in normalized units.
pub fn generate_dataset(
    bundle: &ModelBundle<f32>,
    lengths: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Dataset<f32>, EvalError> {
    let d_z = bundle.dims.latent_dim;
    let d_eta = bundle.dims.noise_dim;
    let n = lengths.len();
    let codes: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..d_z).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect();
    let t_max = lengths.iter().copied().max().unwrap_or(0);
    let noise = NoiseSeq::draw(n, t_max, d_eta, rng);
    // group by length so each group generates in one batched pass
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &len) in lengths.iter().enumerate() {
        by_len.entry(len).or_default().push(i);
    }
    let mut sequences = vec![Vec::new(); n];
    for (len, idxs) in by_len {
        let group_codes: Vec<Vec<f32>> = idxs.iter().map(|&i| codes[i].clone()).collect();
        let mut data = Vec::with_capacity(idxs.len() * len * d_eta);
        for &i in &idxs {
            data.extend_from_slice(&noise.data[i * t_max * d_eta..(i * t_max + len) * d_eta]);
        }
        let group_noise = NoiseSeq {
            data,
            batch: idxs.len(),
            t: len,
            dim: d_eta,
        };
        let out = bundle.generator.generate(&group_codes, &group_noise, len)?;
        for (slot, seq) in idxs.into_iter().zip(out) {
            sequences[slot] = seq;
        }
    }
    Ok(Dataset::new(
        sequences,
        bundle.dims.data_dim,
        (0..bundle.dims.data_dim).map(|d| format!("x{d}")).collect(),
    ))
}

// ---------------------------------------------------------------------------
// Latent prior/posterior probe
// ---------------------------------------------------------------------------

/// Train a fresh feed-forward probe to separate prior draws from posterior
/// codes and return its held-out accuracy (chance = 0.5). Low accuracy means
/// the aggregated posterior matches the prior.
pub fn latent_probe_accuracy(
    bundle: &ModelBundle<f32>,
    dataset_norm: &Dataset<f32>,
    ec: &EvalConfig,
    seed: u64,
) -> Result<f64, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_z = bundle.dims.latent_dim;
    // posterior codes over the dataset
    let refs: Vec<&[f32]> = dataset_norm.sequences.iter().map(|s| s.as_slice()).collect();
    let batch = SeqBatch::from_sequences(&refs, dataset_norm.dim);
    let eta = NoiseSeq::draw(batch.batch_size(), batch.t_max, bundle.dims.noise_dim, &mut rng);
    let posterior = bundle.encoder.encode(&batch, &eta)?;
    let n = posterior.len();
    let prior: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..d_z).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect();

    // labeled pool: prior = 1, posterior = 0
    let mut pool: Vec<(Vec<f32>, f32)> = Vec::with_capacity(2 * n);
    pool.extend(prior.into_iter().map(|z| (z, 1.0)));
    pool.extend(posterior.into_iter().map(|z| (z, 0.0)));
    rand::seq::SliceRandom::shuffle(&mut pool[..], &mut rng);
    let n_train = ((pool.len() as f64) * ec.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, pool.len() - 1);

    // small leaky-rectifier MLP probe
    let mut net = Net::<f32>::new("probe");
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let h = ec.width.min(64);
    let l1 = init_linear(&mut net, "l1", d_z, h, &mut init_rng);
    let l2 = init_linear(&mut net, "l2", h, h, &mut init_rng);
    let l3 = init_linear(&mut net, "out", h, 1, &mut init_rng);
    let mut opt = AdamState::for_net(&net);
    let forward = |tape: &mut Tape<f32>,
                   bound: &crate::nn::BoundNet,
                   z: TensorId|
     -> Result<TensorId, EngineError> {
        let a = linear_forward(tape, bound, &l1, z)?;
        let a = tape.leaky_relu(a, 0.2);
        let a = linear_forward(tape, bound, &l2, a)?;
        let a = tape.leaky_relu(a, 0.2);
        linear_forward(tape, bound, &l3, a)
    };
    let epochs = ec.epochs.min(300);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut ep_rng = ChaCha8Rng::seed_from_u64(shuffle_seed(seed, epoch));
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut ep_rng);
        for chunk in order.chunks(ec.batch_size) {
            let zs: Vec<f32> = chunk.iter().flat_map(|&i| pool[i].0.clone()).collect();
            let ys: Vec<f32> = chunk.iter().map(|&i| pool[i].1).collect();
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true)?;
            let z = tape.constant(zs, &[chunk.len(), d_z])?;
            let logits = forward(&mut tape, &bound, z)?;
            let targets = tape.constant(ys, &[chunk.len(), 1])?;
            let loss = tape.bce_with_logits(logits, targets)?;
            tape.backward(loss)?;
            let grads = net.collect_grads(&tape, &bound);
            adam_step(&mut net, &grads, &mut opt, ec.learning_rate).map_err(TrainError::from)?;
        }
    }
    let test = &pool[n_train..];
    let zs: Vec<f32> = test.iter().flat_map(|(z, _)| z.clone()).collect();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false)?;
    let z = tape.constant(zs, &[test.len(), d_z])?;
    let logits = forward(&mut tape, &bound, z)?;
    let correct = tape
        .value(logits)
        .iter()
        .zip(test)
        .filter(|(&lg, (_, y))| (lg > 0.0) == (*y > 0.5))
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Full-sequence reconstruction error of a bundle over a normalized dataset
/// (the full-sum objective evaluated with fresh seeded noise, no gradients).
pub fn recon_error_full(
    bundle: &ModelBundle<f32>,
    dataset_norm: &Dataset<f32>,
    seed: u64,
) -> Result<f64, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    let mut n = 0usize;
    for chunk in dataset_norm.sequences.chunks(128) {
        let refs: Vec<&[f32]> = chunk.iter().map(|s| s.as_slice()).collect();
        let batch = SeqBatch::from_sequences(&refs, dataset_norm.dim);
        let b = batch.batch_size();
        let eta_enc = NoiseSeq::draw(b, batch.t_max, bundle.dims.noise_dim, &mut rng);
        let eta_gen = NoiseSeq::draw(b, batch.t_max, bundle.dims.noise_dim, &mut rng);
        let mut tape = Tape::new();
        let enc_bound = bundle.encoder.net.bind(&mut tape, false)?;
        let gen_bound = bundle.generator.net.bind(&mut tape, false)?;
        let z = bundle.encoder.forward(&mut tape, &enc_bound, &batch, &eta_enc)?;
        let x_bar = bundle
            .generator
            .forward(&mut tape, &gen_bound, z, &eta_gen, batch.t_max)?;
        let x_steps: Vec<TensorId> = (0..batch.t_max)
            .map(|t| tape.constant(batch.step_matrix(t), &[b, batch.dim]))
            .collect::<Result<_, _>>()?;
        let recon = reconstruction_loss(
            &mut tape,
            &x_steps,
            &x_bar,
            &batch.lengths,
            0.1,
            ReconMode::FullSum,
        )?;
        total += tape.scalar_value(recon.loss) as f64 * b as f64;
        n += b;
    }
    Ok(total / n.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Measurement protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Discriminative,
    Predictive,
    Dft,
}

impl MetricKind {
    pub fn parse(name: &str) -> Result<Self, EvalError> {
        match name {
            "dis" => Ok(MetricKind::Discriminative),
            "pred" => Ok(MetricKind::Predictive),
            "dft" => Ok(MetricKind::Dft),
            other => Err(EvalError::UnknownMetric(other.to_string())),
        }
    }
}

pub const PREDICTIVE_HORIZONS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MetricSummary {
            mean,
            std: var.sqrt(),
            runs: values.len(),
            values,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProtocolInfo {
    pub models: usize,
    pub draws: usize,
    pub distinct_checkpoints: usize,
    pub base_seed: u64,
    pub parameter_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub protocol: ProtocolInfo,
    pub metrics: BTreeMap<String, MetricSummary>,
}

fn protocol_seed(base: u64, model: usize, draw: usize) -> u64 {
    let mixed = (model as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((draw as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    base ^ mixed.wrapping_add(0x94D0_49BB_1331_11EB)
}

/// Run the requested metrics under the models × draws protocol: for each of
/// `models` checkpoints (cycled when fewer are supplied) and each of `draws`
/// synthetic sample sets, one measurement per metric. Reported values follow
/// normalized units; predictive entries also carry denormalized variants.
pub fn run_protocol(
    bundles: &[&ModelBundle<f32>],
    real_raw: &Dataset<f32>,
    metrics: &[MetricKind],
    models: usize,
    draws: usize,
    ec: &EvalConfig,
    base_seed: u64,
) -> Result<EvalReport, EvalError> {
    assert!(!bundles.is_empty(), "at least one model required");
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let lengths: Vec<usize> = (0..real_raw.len()).map(|i| real_raw.seq_len(i)).collect();
    for m in 0..models.max(1) {
        let bundle = bundles[m % bundles.len()];
        let real_norm = bundle.normalizer.apply(real_raw);
        for d in 0..draws.max(1) {
            let run_seed = protocol_seed(base_seed, m, d);
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
            let synth_norm = generate_dataset(bundle, &lengths, &mut rng)?;
            for &metric in metrics {
                match metric {
                    MetricKind::Discriminative => {
                        let ds = discriminative_score(&real_norm, &synth_norm, ec, run_seed)?;
                        values.entry("discriminative".into()).or_default().push(ds.score);
                    }
                    MetricKind::Predictive => {
                        for &k in &PREDICTIVE_HORIZONS {
                            let ps = predictive_score(
                                &real_norm,
                                &synth_norm,
                                k,
                                ec,
                                run_seed,
                                Some(&bundle.normalizer),
                            )?;
                            values
                                .entry(format!("predictive_h{k}"))
                                .or_default()
                                .push(ps.mae);
                            if let Some(dn) = ps.mae_denormalized {
                                values
                                    .entry(format!("predictive_h{k}_denorm"))
                                    .or_default()
                                    .push(dn);
                            }
                        }
                    }
                    MetricKind::Dft => {
                        let synth_raw = bundle.normalizer.invert(&synth_norm);
                        let report = distribution_report(real_raw, &synth_raw)?;
                        if let Some(s) = report.spectral {
                            values.entry("ks_frequency".into()).or_default().push(s.ks_frequency);
                            values.entry("ks_amplitude".into()).or_default().push(s.ks_amplitude);
                            values.entry("ks_phase".into()).or_default().push(s.ks_phase);
                        }
                    }
                }
            }
        }
    }
    let metrics_map = values
        .into_iter()
        .map(|(k, v)| (k, MetricSummary::from_values(v)))
        .collect();
    Ok(EvalReport {
        protocol: ProtocolInfo {
            models,
            draws,
            distinct_checkpoints: bundles.len().min(models),
            base_seed,
            parameter_count: crate::nn::count_parameters(bundles[0]),
        },
        metrics: metrics_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_sines, SinesSpec};
    use crate::nn::init_models;

    fn sine_with(freq: f64, t: usize, amp: f64, phase: f64) -> Vec<f64> {
        (0..t)
            .map(|j| amp * (2.0 * std::f64::consts::PI * freq * j as f64 / t as f64 + phase).sin())
            .collect()
    }

    // brute-force DFT summation, independent of the fft crate
    fn dft_oracle(x: &[f64], k: usize) -> (f64, f64) {
        let t = x.len();
        let (mut re, mut im) = (0.0, 0.0);
        for (j, &v) in x.iter().enumerate() {
            let angle = -2.0 * std::f64::consts::PI * (k * j) as f64 / t as f64;
            re += v * angle.cos();
            im += v * angle.sin();
        }
        (re, im)
    }

    #[test]
    fn dominant_component_of_pure_sine() {
        let x = sine_with(5.0, 100, 1.0, 0.0);
        let c = dominant_component(&x).unwrap();
        assert_eq!(c.freq_index, 5);
        assert!((c.amplitude - 1.0).abs() < 1e-6, "amp {}", c.amplitude);
        assert!(
            (c.phase + std::f64::consts::FRAC_PI_2).abs() < 1e-6,
            "phase {}",
            c.phase
        );
        // cross-check the winning bin against the brute-force oracle
        let (re, im) = dft_oracle(&x, 5);
        let amp_oracle = 2.0 * (re * re + im * im).sqrt() / 100.0;
        assert!((c.amplitude - amp_oracle).abs() < 1e-9);
        assert!((c.phase - im.atan2(re)).abs() < 1e-9);
    }

    #[test]
    fn dominant_component_of_cosine() {
        let t = 100;
        let x: Vec<f64> = (0..t)
            .map(|j| 3.0 * (2.0 * std::f64::consts::PI * 2.0 * j as f64 / t as f64).cos())
            .collect();
        let c = dominant_component(&x).unwrap();
        assert_eq!(c.freq_index, 2);
        assert!((c.amplitude - 3.0).abs() < 1e-6);
        assert!(c.phase.abs() < 1e-6);
    }

    #[test]
    fn constant_sequence_has_no_oscillatory_energy() {
        let x = vec![0.42f64; 64];
        let c = dominant_component(&x).unwrap();
        assert!(c.amplitude < 1e-9);
        assert!(c.freq_index >= 1 && c.freq_index < 32);
    }

    #[test]
    fn amplitude_equivariance() {
        let x = sine_with(7.0, 80, 0.9, 1.1);
        let scaled: Vec<f64> = x.iter().map(|v| 2.5 * v).collect();
        let a = dominant_component(&x).unwrap();
        let b = dominant_component(&scaled).unwrap();
        assert_eq!(a.freq_index, b.freq_index);
        assert!((b.amplitude / a.amplitude - 2.5).abs() < 1e-9);
        assert!((a.phase - b.phase).abs() < 1e-9);
    }

    #[test]
    fn ks_statistic_identical_and_disjoint() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(ks_statistic(&a, &a), 0.0);
        let b = vec![10.0, 11.0, 12.0];
        assert_eq!(ks_statistic(&a, &b), 1.0);
    }

    #[test]
    fn ks_statistic_matches_sorted_ecdf_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(3..40);
            let m = rng.gen_range(3..40);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            // oracle: evaluate |F_a - F_b| at every sample point
            let ecdf = |s: &[f64], x: f64| {
                s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64
            };
            let mut oracle = 0.0f64;
            for &x in a.iter().chain(&b) {
                oracle = oracle.max((ecdf(&a, x) - ecdf(&b, x)).abs());
            }
            assert!((ks_statistic(&a, &b) - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn histogram_conserves_counts() {
        let real: Vec<f64> = (0..57).map(|i| i as f64 * 0.1).collect();
        let synth: Vec<f64> = (0..43).map(|i| 1.0 + i as f64 * 0.05).collect();
        let bins = shared_histogram(&real, &synth, 20);
        assert_eq!(bins.iter().map(|b| b.real).sum::<usize>(), 57);
        assert_eq!(bins.iter().map(|b| b.synthetic).sum::<usize>(), 43);
    }

    #[test]
    fn distribution_report_identical_sets_have_zero_ks() {
        let ds: Dataset<f32> = synth_sines(&SinesSpec {
            n: 20,
            t: 32,
            seed: 5,
            ..SinesSpec::default()
        });
        let report = distribution_report(&ds, &ds).unwrap();
        let s = report.spectral.unwrap();
        assert_eq!(s.ks_frequency, 0.0);
        assert_eq!(s.ks_amplitude, 0.0);
        assert_eq!(s.ks_phase, 0.0);
    }

    #[test]
    fn distribution_report_disjoint_frequency_ranges() {
        let low: Dataset<f32> = synth_sines(&SinesSpec {
            n: 30,
            t: 64,
            freq: (1.0, 4.0),
            seed: 6,
            ..SinesSpec::default()
        });
        let high: Dataset<f32> = synth_sines(&SinesSpec {
            n: 30,
            t: 64,
            freq: (6.0, 9.0),
            seed: 7,
            ..SinesSpec::default()
        });
        let report = distribution_report(&low, &high).unwrap();
        assert_eq!(report.spectral.unwrap().ks_frequency, 1.0);
    }

    #[test]
    fn pca_keeps_separated_clusters_separated() {
        // two clusters of short 2-feature sequences
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cluster = |center: f32| -> Vec<Vec<f32>> {
            (0..20)
                .map(|_| {
                    (0..8)
                        .map(|_| center + rng.gen_range(-0.1f32..0.1))
                        .collect()
                })
                .collect()
        };
        let a = Dataset::new(cluster(1.0), 2, vec!["a".into(), "b".into()]);
        let b = Dataset::new(cluster(-1.0), 2, vec!["a".into(), "b".into()]);
        let points = pca_projection(&a, &b);
        assert_eq!(points.len(), 40);
        // silhouette-style check: clusters separated along pc1
        let mean = |label: &str| {
            let pts: Vec<&PcaPoint> = points.iter().filter(|p| p.label == label).collect();
            pts.iter().map(|p| p.pc1).sum::<f64>() / pts.len() as f64
        };
        let (ma, mb) = (mean("real"), mean("synthetic"));
        let spread: f64 = points
            .iter()
            .map(|p| {
                let c = if p.label == "real" { ma } else { mb };
                (p.pc1 - c).abs()
            })
            .sum::<f64>()
            / points.len() as f64;
        assert!(
            (ma - mb).abs() > 2.0 * spread,
            "centroids {ma} vs {mb}, spread {spread}"
        );
    }

    #[test]
    fn discriminative_score_separates_trivially_different_sets() {
        let sines: Dataset<f32> = synth_sines(&SinesSpec {
            n: 40,
            t: 24,
            seed: 8,
            ..SinesSpec::default()
        });
        let norm = Normalizer::fit(&sines).unwrap();
        let real = norm.apply(&sines);
        let zeros = Dataset::new(vec![vec![0.0f32; 24]; 40], 1, vec!["x0".into()]);
        let ec = EvalConfig {
            width: 12,
            depth: 1,
            epochs: 40,
            batch_size: 16,
            patience: None,
            ..EvalConfig::default()
        };
        let out = discriminative_score(&real, &zeros, &ec, 1).unwrap();
        assert!(out.score >= 0.4, "score {}", out.score);
        assert!(out.score <= 0.5);
    }

    #[test]
    fn discriminative_score_near_zero_for_same_distribution() {
        let sines: Dataset<f32> = synth_sines(&SinesSpec {
            n: 80,
            t: 24,
            seed: 9,
            ..SinesSpec::default()
        });
        let norm = Normalizer::fit(&sines).unwrap();
        let all = norm.apply(&sines);
        let half_a = Dataset::new(all.sequences[..40].to_vec(), 1, all.feature_names.clone());
        let half_b = Dataset::new(all.sequences[40..].to_vec(), 1, all.feature_names.clone());
        let ec = EvalConfig {
            width: 12,
            depth: 1,
            epochs: 30,
            batch_size: 16,
            patience: Some(10),
            ..EvalConfig::default()
        };
        let out = discriminative_score(&half_a, &half_b, &ec, 2).unwrap();
        assert!(out.score <= 0.1, "score {}", out.score);
    }

    #[test]
    fn predictive_score_self_consistency_on_sines() {
        let sines: Dataset<f32> = synth_sines(&SinesSpec {
            n: 60,
            t: 24,
            seed: 10,
            ..SinesSpec::default()
        });
        let norm = Normalizer::fit(&sines).unwrap();
        let ds = norm.apply(&sines);
        let ec = EvalConfig {
            width: 24,
            depth: 1,
            epochs: 150,
            batch_size: 60,
            patience: None,
            ..EvalConfig::default()
        };
        let out = predictive_score(&ds, &ds, 1, &ec, 3, Some(&norm)).unwrap();
        assert!(out.mae <= 0.05, "mae {}", out.mae);
        assert!(out.mae_denormalized.unwrap() >= 0.0);
    }

    #[test]
    fn predictive_score_degenerate_synthetic_bounded_below() {
        let sines: Dataset<f32> = synth_sines(&SinesSpec {
            n: 40,
            t: 20,
            seed: 11,
            ..SinesSpec::default()
        });
        let norm = Normalizer::fit(&sines).unwrap();
        let real = norm.apply(&sines);
        // constant synthetic data: the forecaster degenerates to a constant,
        // so real-data MAE is at least the real data's mean absolute value
        // around that constant
        let constant = Dataset::new(vec![vec![0.0f32; 20]; 40], 1, vec!["x0".into()]);
        let ec = EvalConfig {
            width: 12,
            depth: 1,
            epochs: 40,
            batch_size: 20,
            patience: None,
            ..EvalConfig::default()
        };
        let out = predictive_score(&real, &constant, 1, &ec, 4, None).unwrap();
        let mad: f64 = real
            .sequences
            .iter()
            .flat_map(|s| s[1..].iter())
            .map(|&v| (v as f64).abs())
            .sum::<f64>()
            / real.sequences.iter().map(|s| s.len() - 1).sum::<usize>() as f64;
        assert!(
            out.mae >= 0.8 * mad,
            "mae {} should not beat the degenerate bound {mad}",
            out.mae
        );
        assert!(predictive_score(&real, &constant, 25, &ec, 4, None).is_err());
    }

    #[test]
    fn sample_near_degenerate_noise_identical_outputs() {
        let bundle: ModelBundle<f32> = init_models(
            crate::nn::ModelDims {
                data_dim: 1,
                latent_dim: 4,
                noise_dim: 4,
                width: 8,
                depth: 2,
            },
            21,
        );
        let anchor: Vec<f32> = sine_with(3.0, 20, 1.0, 0.0).iter().map(|&v| v as f32).collect();
        let opts = SampleNearOptions {
            noise_std: 0.0,
            count: 5,
            share_generator_noise: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sample_near(&bundle, &anchor, &opts, &mut rng).unwrap();
        assert_eq!(out.trained_epochs, 0);
        for seq in &out.sequences[1..] {
            assert_eq!(seq, &out.sequences[0]);
        }
        // outputs stay in the normalizer's range
        for seq in &out.sequences {
            for &v in seq {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
        assert!(out.anchor_code.iter().all(|z| z.abs() < 1.0));
    }

    #[test]
    fn generate_dataset_matches_requested_lengths() {
        let bundle: ModelBundle<f32> = init_models(
            crate::nn::ModelDims {
                data_dim: 2,
                latent_dim: 4,
                noise_dim: 4,
                width: 8,
                depth: 1,
            },
            22,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = generate_dataset(&bundle, &[5, 3, 5, 7], &mut rng).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(
            (0..4).map(|i| ds.seq_len(i)).collect::<Vec<_>>(),
            vec![5, 3, 5, 7]
        );
    }

    #[test]
    fn protocol_collects_requested_runs() {
        let sines: Dataset<f32> = synth_sines(&SinesSpec {
            n: 16,
            t: 12,
            seed: 12,
            ..SinesSpec::default()
        });
        let mut bundle: ModelBundle<f32> = init_models(
            crate::nn::ModelDims {
                data_dim: 1,
                latent_dim: 4,
                noise_dim: 4,
                width: 8,
                depth: 1,
            },
            23,
        );
        bundle.normalizer = Normalizer::fit(&sines).unwrap();
        let ec = EvalConfig {
            width: 8,
            depth: 1,
            epochs: 3,
            batch_size: 16,
            patience: None,
            ..EvalConfig::default()
        };
        let report = run_protocol(
            &[&bundle],
            &sines,
            &[MetricKind::Discriminative, MetricKind::Dft],
            2,
            3,
            &ec,
            77,
        )
        .unwrap();
        assert_eq!(report.metrics["discriminative"].runs, 6);
        assert_eq!(report.metrics["ks_frequency"].runs, 6);
        // deterministic re-run
        let again = run_protocol(
            &[&bundle],
            &sines,
            &[MetricKind::Discriminative, MetricKind::Dft],
            2,
            3,
            &ec,
            77,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn unknown_metric_is_rejected() {
        assert!(MetricKind::parse("dis").is_ok());
        assert!(MetricKind::parse("pred").is_ok());
        assert!(MetricKind::parse("dft").is_ok());
        assert!(matches!(
            MetricKind::parse("fid"),
            Err(EvalError::UnknownMetric(_))
        ));
    }
}

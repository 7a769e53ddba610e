//! The four networks: seq2seq encoder, non-autoregressive generator,
//! per-timestep feature discriminator, and latent discriminator.
//!
//! Networks are plain parameter collections plus structural indices. Each
//! training step binds the parameters onto a fresh tape as leaves and builds
//! the step's graph from them, so the same forward code serves training
//! (gradients on) and inference (gradients off).

use crate::data::{Normalizer, SeqBatch};
use crate::scalar::Scalar;
use crate::spectral::SpectralNorm;
use crate::tensor::{EngineError, Result, Tape, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One named, trainable tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// A network's parameters, in a fixed registration order.
#[derive(Debug, Clone)]
pub struct Net<F> {
    pub prefix: String,
    pub entries: Vec<ParamEntry<F>>,
}

/// Index of a parameter within its [`Net`].
#[derive(Debug, Clone, Copy)]
pub struct PIdx(usize);

impl<F: Scalar> Net<F> {
    pub fn new(prefix: &str) -> Self {
        Net {
            prefix: prefix.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<F>) -> PIdx {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(ParamEntry {
            name: format!("{}.{}", self.prefix, name),
            shape: shape.to_vec(),
            data,
        });
        PIdx(self.entries.len() - 1)
    }

    pub fn param(&self, idx: PIdx) -> &ParamEntry<F> {
        &self.entries[idx.0]
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Load every parameter onto `tape` as a leaf, in registration order.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Result<BoundNet> {
        let ids = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.data.clone(), &e.shape, trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundNet { ids })
    }

    /// Gradients aligned with `entries` after a backward pass.
    pub fn collect_grads(&self, tape: &Tape<F>, bound: &BoundNet) -> Vec<Option<Vec<F>>> {
        bound
            .ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()))
            .collect()
    }
}

/// Tape leaves for one bound network.
pub struct BoundNet {
    ids: Vec<TensorId>,
}

impl BoundNet {
    pub fn id(&self, idx: PIdx) -> TensorId {
        self.ids[idx.0]
    }
}

fn init_weight<F: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<F> {
    // U(-k, k) with k = 1/sqrt(fan_in); fan_in is the input dimension (rows,
    // since activations multiply from the left: x · W).
    let k = 1.0 / (rows as f64).sqrt();
    (0..rows * cols).map(|_| F::from_f64(rng.gen_range(-k..k))).collect()
}

/// Weight plus bias of a fully connected layer (`x · W + b`).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: PIdx,
    pub b: PIdx,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub(crate) fn init_linear<F: Scalar>(
    net: &mut Net<F>,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut impl Rng,
) -> Linear {
    let w = net.push(
        &format!("{name}.w"),
        &[in_dim, out_dim],
        init_weight(in_dim, out_dim, rng),
    );
    let b = net.push(&format!("{name}.b"), &[out_dim], vec![F::zero(); out_dim]);
    Linear {
        w,
        b,
        in_dim,
        out_dim,
    }
}

pub(crate) fn linear_forward<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundNet,
    layer: &Linear,
    x: TensorId,
) -> Result<TensorId> {
    let wx = tape.matmul(x, bound.id(layer.w))?;
    tape.add_bias(wx, bound.id(layer.b))
}

/// Gate parameters of one recurrent layer:
///   r = σ(x·W_xr + h·W_hr + b_r)
///   z = σ(x·W_xz + h·W_hz + b_z)
///   n = tanh(x·W_xn + r ⊙ (h·W_hn) + b_n)
///   h' = n + z ⊙ (h − n)
#[derive(Debug, Clone, Copy)]
pub struct GruLayer {
    w_xr: PIdx,
    w_hr: PIdx,
    b_r: PIdx,
    w_xz: PIdx,
    w_hz: PIdx,
    b_z: PIdx,
    w_xn: PIdx,
    w_hn: PIdx,
    b_n: PIdx,
    pub in_dim: usize,
    pub hidden: usize,
}

fn init_gru_layer<F: Scalar>(
    net: &mut Net<F>,
    name: &str,
    in_dim: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> GruLayer {
    let mut weight = |suffix: &str, rows: usize| {
        net.push(
            &format!("{name}.{suffix}"),
            &[rows, hidden],
            init_weight(rows, hidden, rng),
        )
    };
    let w_xr = weight("w_xr", in_dim);
    let w_hr = weight("w_hr", hidden);
    let w_xz = weight("w_xz", in_dim);
    let w_hz = weight("w_hz", hidden);
    let w_xn = weight("w_xn", in_dim);
    let w_hn = weight("w_hn", hidden);
    let mut bias = |suffix: &str| {
        net.push(&format!("{name}.{suffix}"), &[hidden], vec![F::zero(); hidden])
    };
    let b_r = bias("b_r");
    let b_z = bias("b_z");
    let b_n = bias("b_n");
    GruLayer {
        w_xr,
        w_hr,
        b_r,
        w_xz,
        w_hz,
        b_z,
        w_xn,
        w_hn,
        b_n,
        in_dim,
        hidden,
    }
}

fn gru_cell<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundNet,
    layer: &GruLayer,
    x: TensorId,
    h: TensorId,
) -> Result<TensorId> {
    let xr = tape.matmul(x, bound.id(layer.w_xr))?;
    let hr = tape.matmul(h, bound.id(layer.w_hr))?;
    let pre_r = tape.add(xr, hr)?;
    let pre_r = tape.add_bias(pre_r, bound.id(layer.b_r))?;
    let r = tape.sigmoid(pre_r);

    let xz = tape.matmul(x, bound.id(layer.w_xz))?;
    let hz = tape.matmul(h, bound.id(layer.w_hz))?;
    let pre_z = tape.add(xz, hz)?;
    let pre_z = tape.add_bias(pre_z, bound.id(layer.b_z))?;
    let z = tape.sigmoid(pre_z);

    let xn = tape.matmul(x, bound.id(layer.w_xn))?;
    let hn = tape.matmul(h, bound.id(layer.w_hn))?;
    let gated = tape.mul(r, hn)?;
    let pre_n = tape.add(xn, gated)?;
    let pre_n = tape.add_bias(pre_n, bound.id(layer.b_n))?;
    let n = tape.tanh(pre_n);

    // h' = n + z ⊙ (h − n)
    let keep = tape.sub(h, n)?;
    let zkeep = tape.mul(z, keep)?;
    tape.add(n, zkeep)
}

/// A stack of recurrent layers applied one timestep at a time.
#[derive(Debug, Clone)]
pub struct GruStack {
    pub layers: Vec<GruLayer>,
    pub in_dim: usize,
    pub hidden: usize,
}

pub(crate) fn init_gru_stack<F: Scalar>(
    net: &mut Net<F>,
    name: &str,
    in_dim: usize,
    hidden: usize,
    depth: usize,
    rng: &mut impl Rng,
) -> GruStack {
    let layers = (0..depth)
        .map(|d| {
            let input = if d == 0 { in_dim } else { hidden };
            init_gru_layer(net, &format!("{name}.{d}"), input, hidden, rng)
        })
        .collect();
    GruStack {
        layers,
        in_dim,
        hidden,
    }
}

/// Running hidden state of a [`GruStack`] over a batch.
pub struct GruState {
    hs: Vec<TensorId>,
}

impl GruStack {
    pub fn start<F: Scalar>(&self, tape: &mut Tape<F>, batch: usize) -> Result<GruState> {
        let hs = self
            .layers
            .iter()
            .map(|_| tape.zeros(&[batch, self.hidden]))
            .collect::<Result<Vec<_>>>()?;
        Ok(GruState { hs })
    }

    /// Advance one timestep. When `mask` is given (a `batch × hidden` pair of
    /// validity and its complement), padded sequences keep their previous
    /// hidden state in every layer.
    pub fn step<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundNet,
        state: &mut GruState,
        x: TensorId,
        mask: Option<(TensorId, TensorId)>,
    ) -> Result<TensorId> {
        debug_assert_eq!(state.hs.len(), self.layers.len());
        let mut input = x;
        for (layer, h) in self.layers.iter().zip(state.hs.iter_mut()) {
            let mut new_h = gru_cell(tape, bound, layer, input, *h)?;
            if let Some((m, inv)) = mask {
                let kept = tape.mul(inv, *h)?;
                let updated = tape.mul(m, new_h)?;
                new_h = tape.add(updated, kept)?;
            }
            *h = new_h;
            input = new_h;
        }
        Ok(input)
    }

    pub fn top_state(&self, state: &GruState) -> TensorId {
        *state.hs.last().expect("stack has layers")
    }

    /// Resume from previously captured hidden values (as constants).
    pub fn start_from<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        values: &[Vec<F>],
        batch: usize,
    ) -> Result<GruState> {
        debug_assert_eq!(values.len(), self.layers.len());
        let hs = values
            .iter()
            .map(|v| tape.constant(v.clone(), &[batch, self.hidden]))
            .collect::<Result<Vec<_>>>()?;
        Ok(GruState { hs })
    }

    /// Current hidden values per layer, copied off the tape.
    pub fn state_values<F: Scalar>(&self, tape: &Tape<F>, state: &GruState) -> Vec<Vec<F>> {
        state.hs.iter().map(|&id| tape.value(id).to_vec()).collect()
    }
}

/// Expand a `batch × 1` validity column into the `(mask, 1-mask)` pair of
/// `batch × hidden` constants used to gate hidden-state updates.
pub(crate) fn mask_pair<F: Scalar>(
    tape: &mut Tape<F>,
    column: &[F],
    hidden: usize,
) -> Result<(TensorId, TensorId)> {
    let b = column.len();
    let mut m = Vec::with_capacity(b * hidden);
    let mut inv = Vec::with_capacity(b * hidden);
    for &v in column {
        let w = F::one() - v;
        for _ in 0..hidden {
            m.push(v);
            inv.push(w);
        }
    }
    let m = tape.constant(m, &[b, hidden])?;
    let inv = tape.constant(inv, &[b, hidden])?;
    Ok((m, inv))
}

/// Per-timestep noise for a batch: `batch × t × dim`, every entry drawn
/// i.i.d. from U(-1, 1).
#[derive(Debug, Clone)]
pub struct NoiseSeq<F> {
    pub data: Vec<F>,
    pub batch: usize,
    pub t: usize,
    pub dim: usize,
}

impl<F: Scalar> NoiseSeq<F> {
    pub fn draw(batch: usize, t: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let data = (0..batch * t * dim)
            .map(|_| F::from_f64(rng.gen_range(-1.0..1.0)))
            .collect();
        NoiseSeq {
            data,
            batch,
            t,
            dim,
        }
    }

    pub fn step_matrix(&self, t: usize) -> Vec<F> {
        let mut out = vec![F::zero(); self.batch * self.dim];
        for i in 0..self.batch {
            let src = (i * self.t + t) * self.dim;
            out[i * self.dim..(i + 1) * self.dim].copy_from_slice(&self.data[src..src + self.dim]);
        }
        out
    }

    /// The noise rows belonging to sequence `i`, usable as a batch-of-one.
    pub fn for_sequence(&self, i: usize, len: usize) -> NoiseSeq<F> {
        let start = i * self.t * self.dim;
        NoiseSeq {
            data: self.data[start..start + len * self.dim].to_vec(),
            batch: 1,
            t: len,
            dim: self.dim,
        }
    }
}

/// Seq2seq encoder: consumes `[x_t ⊕ η_t]` per step, summarizes the sequence
/// in the final top hidden state, and maps it through a tanh head onto
/// `(-1, 1)^latent_dim`.
#[derive(Debug, Clone)]
pub struct Encoder<F> {
    pub net: Net<F>,
    pub gru: GruStack,
    pub head: Linear,
}

/// Non-autoregressive decoder: consumes `[z ⊕ η_t]` at every step (the code
/// repeated), a shared tanh head maps each hidden state to one output step.
#[derive(Debug, Clone)]
pub struct Generator<F> {
    pub net: Net<F>,
    pub gru: GruStack,
    pub head: Linear,
}

/// Per-timestep critic over sequences; the shared output head is spectrally
/// normalized and emits one raw score per step.
#[derive(Debug, Clone)]
pub struct FeatureDisc<F> {
    pub net: Net<F>,
    pub gru: GruStack,
    pub head: Linear,
    pub head_sn: SpectralNorm<F>,
}

/// Feed-forward critic over latent codes; every linear weight is spectrally
/// normalized.
#[derive(Debug, Clone)]
pub struct LatentDisc<F> {
    pub net: Net<F>,
    pub layers: Vec<Linear>,
    pub sn: Vec<SpectralNorm<F>>,
    pub leak: f64,
}

/// Dimensions shared by a [`ModelBundle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub noise_dim: usize,
    pub width: usize,
    pub depth: usize,
}

/// The four trainable networks plus normalizer statistics.
#[derive(Debug, Clone)]
pub struct ModelBundle<F> {
    pub encoder: Encoder<F>,
    pub generator: Generator<F>,
    pub feat_disc: FeatureDisc<F>,
    pub latent_disc: LatentDisc<F>,
    pub normalizer: Normalizer,
    pub dims: ModelDims,
    pub trained_epochs: usize,
}

pub const LATENT_DISC_DEPTH: usize = 3;
pub const LATENT_DISC_LEAK: f64 = 0.2;

/// Deterministically initialize all four networks: weights uniform in
/// `±1/sqrt(fan_in)`, biases zero.
pub fn init_models<F: Scalar>(dims: ModelDims, seed: u64) -> ModelBundle<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;

    let mut enc_net = Net::new("encoder");
    let enc_gru = init_gru_stack(
        &mut enc_net,
        "gru",
        dims.data_dim + dims.noise_dim,
        dims.width,
        dims.depth,
        rng,
    );
    let enc_head = init_linear(&mut enc_net, "head", dims.width, dims.latent_dim, rng);

    let mut gen_net = Net::new("generator");
    let gen_gru = init_gru_stack(
        &mut gen_net,
        "gru",
        dims.latent_dim + dims.noise_dim,
        dims.width,
        dims.depth,
        rng,
    );
    let gen_head = init_linear(&mut gen_net, "head", dims.width, dims.data_dim, rng);

    let mut dx_net = Net::new("feat_disc");
    let dx_gru = init_gru_stack(&mut dx_net, "gru", dims.data_dim, dims.width, dims.depth, rng);
    let dx_head = init_linear(&mut dx_net, "head", dims.width, 1, rng);
    let dx_sn = SpectralNorm::new(dims.width, 1, rng);

    let mut dz_net = Net::new("latent_disc");
    let mut dz_layers = Vec::new();
    let mut dz_sn = Vec::new();
    let mut in_dim = dims.latent_dim;
    for d in 0..LATENT_DISC_DEPTH {
        let layer = init_linear(&mut dz_net, &format!("hidden.{d}"), in_dim, dims.width, rng);
        dz_sn.push(SpectralNorm::new(in_dim, dims.width, rng));
        dz_layers.push(layer);
        in_dim = dims.width;
    }
    let out = init_linear(&mut dz_net, "out", in_dim, 1, rng);
    dz_sn.push(SpectralNorm::new(in_dim, 1, rng));
    dz_layers.push(out);

    ModelBundle {
        encoder: Encoder {
            net: enc_net,
            gru: enc_gru,
            head: enc_head,
        },
        generator: Generator {
            net: gen_net,
            gru: gen_gru,
            head: gen_head,
        },
        feat_disc: FeatureDisc {
            net: dx_net,
            gru: dx_gru,
            head: dx_head,
            head_sn: dx_sn,
        },
        latent_disc: LatentDisc {
            net: dz_net,
            layers: dz_layers,
            sn: dz_sn,
            leak: LATENT_DISC_LEAK,
        },
        normalizer: Normalizer::identity(dims.data_dim),
        dims,
        trained_epochs: 0,
    }
}

/// Total trainable parameter count across the four networks; a pure function
/// of the dimensions.
pub fn count_parameters<F: Scalar>(bundle: &ModelBundle<F>) -> usize {
    bundle.encoder.net.num_params()
        + bundle.generator.net.num_params()
        + bundle.feat_disc.net.num_params()
        + bundle.latent_disc.net.num_params()
}

impl<F: Scalar> Encoder<F> {
    /// Build the encoding graph over a bound parameter set. Returns the
    /// `batch × latent_dim` code tensor.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundNet,
        batch: &SeqBatch<F>,
        noise: &NoiseSeq<F>,
    ) -> Result<TensorId> {
        if noise.t < batch.t_max || noise.batch != batch.batch_size() || noise.dim == 0 {
            return Err(EngineError::Contract(format!(
                "encoder noise covers {}x{} steps but batch needs {}x{}",
                noise.batch,
                noise.t,
                batch.batch_size(),
                batch.t_max
            )));
        }
        let b = batch.batch_size();
        let uniform = batch.uniform_length();
        let mut state = self.gru.start(tape, b)?;
        for t in 0..batch.t_max {
            let x = tape.constant(batch.step_matrix(t), &[b, batch.dim])?;
            let eta = tape.constant(noise.step_matrix(t), &[b, noise.dim])?;
            let input = tape.concat_cols(x, eta)?;
            let mask = if uniform {
                None
            } else {
                Some(mask_pair(tape, &batch.mask_column(t), self.gru.hidden)?)
            };
            self.gru.step(tape, bound, &mut state, input, mask)?;
        }
        let top = self.gru.top_state(&state);
        let pre = linear_forward(tape, bound, &self.head, top)?;
        Ok(tape.tanh(pre))
    }

    /// Encode without gradients, returning one code per sequence.
    pub fn encode(&self, batch: &SeqBatch<F>, noise: &NoiseSeq<F>) -> Result<Vec<Vec<F>>> {
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, false)?;
        let z = self.forward(&mut tape, &bound, batch, noise)?;
        let d = self.head.out_dim;
        Ok(tape.value(z).chunks(d).map(|c| c.to_vec()).collect())
    }
}

impl<F: Scalar> Generator<F> {
    /// Build the generation graph for `t_steps` outputs. `z` is a bound
    /// `batch × latent_dim` tensor; the returned vector holds one
    /// `batch × data_dim` tensor per timestep.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundNet,
        z: TensorId,
        noise: &NoiseSeq<F>,
        t_steps: usize,
    ) -> Result<Vec<TensorId>> {
        if noise.t < t_steps {
            return Err(EngineError::Contract(format!(
                "generator noise covers {} steps but {} requested",
                noise.t, t_steps
            )));
        }
        let b = noise.batch;
        let mut state = self.gru.start(tape, b)?;
        let mut outputs = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            let eta = tape.constant(noise.step_matrix(t), &[b, noise.dim])?;
            let input = tape.concat_cols(z, eta)?;
            let top = self.gru.step(tape, bound, &mut state, input, None)?;
            let pre = linear_forward(tape, bound, &self.head, top)?;
            outputs.push(tape.tanh(pre));
        }
        Ok(outputs)
    }

    /// Generate without gradients: one sequence per code, `t_steps` long,
    /// flattened `t × data_dim`.
    pub fn generate(
        &self,
        codes: &[Vec<F>],
        noise: &NoiseSeq<F>,
        t_steps: usize,
    ) -> Result<Vec<Vec<F>>> {
        let b = codes.len();
        assert!(t_steps >= 1, "t_steps must be positive");
        let d_z = self.gru.in_dim - noise.dim;
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, false)?;
        let flat: Vec<F> = codes.iter().flatten().copied().collect();
        let z = tape.constant(flat, &[b, d_z])?;
        let steps = self.forward(&mut tape, &bound, z, noise, t_steps)?;
        let dim = self.head.out_dim;
        let mut out = vec![Vec::with_capacity(t_steps * dim); b];
        for &step in &steps {
            let vals = tape.value(step);
            for (i, row) in vals.chunks(dim).enumerate() {
                out[i].extend_from_slice(row);
            }
        }
        Ok(out)
    }
}

impl<F: Scalar> FeatureDisc<F> {
    /// Spectral-norm scale for the output head. `power_iters ≥ 1` updates the
    /// persistent vectors in place.
    pub fn head_sigma(&mut self, power_iters: usize) -> f64 {
        let w = self.net.param(self.head.w);
        self.head_sn
            .estimate(&w.data, self.head.in_dim, self.head.out_dim, power_iters)
            .to_f64()
    }

    pub fn head_sigma_frozen(&self) -> f64 {
        let w = self.net.param(self.head.w);
        self.head_sn
            .sigma(&w.data, self.head.in_dim, self.head.out_dim)
            .to_f64()
    }

    /// Build per-timestep scores (`batch × 1` each) over the given input
    /// steps. `sigma` is the current top-singular-value estimate of the head
    /// weight; the head applies `W / max(sigma, floor)`.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundNet,
        steps: &[TensorId],
        sigma: f64,
    ) -> Result<Vec<TensorId>> {
        let b = tape.shape(steps[0])[0];
        let mut state = self.gru.start(tape, b)?;
        let w_norm = tape.scale(bound.id(self.head.w), 1.0 / sigma.max(1e-12));
        let mut scores = Vec::with_capacity(steps.len());
        for &x in steps {
            let top = self.gru.step(tape, bound, &mut state, x, None)?;
            let s = tape.matmul(top, w_norm)?;
            scores.push(tape.add_bias(s, bound.id(self.head.b))?);
        }
        Ok(scores)
    }

    /// Score a batch without gradients: `batch × t_max` raw outputs.
    pub fn score(&self, batch: &SeqBatch<F>) -> Result<Vec<Vec<F>>> {
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, false)?;
        let b = batch.batch_size();
        let steps: Vec<TensorId> = (0..batch.t_max)
            .map(|t| tape.constant(batch.step_matrix(t), &[b, batch.dim]))
            .collect::<Result<_>>()?;
        let sigma = self.head_sigma_frozen();
        let ids = self.forward(&mut tape, &bound, &steps, sigma)?;
        let mut out = vec![Vec::with_capacity(batch.t_max); b];
        for id in ids {
            for (i, &v) in tape.value(id).iter().enumerate() {
                out[i].push(v);
            }
        }
        Ok(out)
    }
}

impl<F: Scalar> LatentDisc<F> {
    /// One sigma per linear layer. `power_iters ≥ 1` updates the persistent
    /// vectors.
    pub fn sigmas(&mut self, power_iters: usize) -> Vec<f64> {
        self.layers
            .iter()
            .zip(self.sn.iter_mut())
            .map(|(layer, sn)| {
                let w = &self.net.entries[layer.w.0];
                sn.estimate(&w.data, layer.in_dim, layer.out_dim, power_iters).to_f64()
            })
            .collect()
    }

    pub fn sigmas_frozen(&self) -> Vec<f64> {
        self.layers
            .iter()
            .zip(self.sn.iter())
            .map(|(layer, sn)| {
                let w = &self.net.entries[layer.w.0];
                sn.sigma(&w.data, layer.in_dim, layer.out_dim).to_f64()
            })
            .collect()
    }

    /// Build the scalar score (`batch × 1`) for a bound code tensor.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundNet,
        z: TensorId,
        sigmas: &[f64],
    ) -> Result<TensorId> {
        debug_assert_eq!(sigmas.len(), self.layers.len());
        let mut a = z;
        for (i, layer) in self.layers.iter().enumerate() {
            let w_norm = tape.scale(bound.id(layer.w), 1.0 / sigmas[i].max(1e-12));
            let pre = tape.matmul(a, w_norm)?;
            let pre = tape.add_bias(pre, bound.id(layer.b))?;
            a = if i + 1 == self.layers.len() {
                pre
            } else {
                tape.leaky_relu(pre, self.leak)
            };
        }
        Ok(a)
    }

    /// Score codes without gradients, one scalar per row.
    pub fn score(&self, codes: &[Vec<F>]) -> Result<Vec<F>> {
        let d = self.layers[0].in_dim;
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, false)?;
        let flat: Vec<F> = codes.iter().flatten().copied().collect();
        let z = tape.constant(flat, &[codes.len(), d])?;
        let sigmas = self.sigmas_frozen();
        let out = self.forward(&mut tape, &bound, z, &sigmas)?;
        Ok(tape.value(out).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dims() -> ModelDims {
        ModelDims {
            data_dim: 1,
            latent_dim: 4,
            noise_dim: 4,
            width: 8,
            depth: 2,
        }
    }

    fn batch_of(seqs: &[Vec<f32>], dim: usize) -> SeqBatch<f32> {
        let refs: Vec<&[f32]> = seqs.iter().map(|s| s.as_slice()).collect();
        SeqBatch::from_sequences(&refs, dim)
    }

    #[test]
    fn init_is_deterministic() {
        let a: ModelBundle<f32> = init_models(toy_dims(), 5);
        let b: ModelBundle<f32> = init_models(toy_dims(), 5);
        for (ea, eb) in a.encoder.net.entries.iter().zip(&b.encoder.net.entries) {
            assert_eq!(ea.data, eb.data);
        }
        for (ea, eb) in a.latent_disc.net.entries.iter().zip(&b.latent_disc.net.entries) {
            assert_eq!(ea.data, eb.data);
        }
        let c: ModelBundle<f32> = init_models(toy_dims(), 6);
        assert_ne!(
            a.encoder.net.entries[0].data,
            c.encoder.net.entries[0].data
        );
    }

    #[test]
    fn count_parameters_is_pure_and_matches_hand_tally() {
        // 1-layer, width-2, D=1, d_z = d_eta = 1 toy bundle.
        let dims = ModelDims {
            data_dim: 1,
            latent_dim: 1,
            noise_dim: 1,
            width: 2,
            depth: 1,
        };
        let bundle: ModelBundle<f32> = init_models(dims, 0);
        // encoder: GRU in=2, h=2: 3·(2·2) + 3·(2·2) + 3·2 = 30; head 2·1+1 = 3
        // generator: same input size (1+1): 30 + head 3 = 33
        // feat disc: GRU in=1: 3·(1·2) + 3·(2·2) + 3·2 = 24; head 2·1+1 = 3
        // latent disc: 1·2+2, 2·2+2, 2·2+2, 2·1+1 = 4 + 6 + 6 + 3 = 19
        let expected = 33 + 33 + 27 + 19;
        assert_eq!(count_parameters(&bundle), expected);
        assert_eq!(count_parameters(&bundle), expected);
    }

    #[test]
    fn encoder_output_in_open_unit_interval() {
        let bundle: ModelBundle<f32> = init_models(toy_dims(), 1);
        let batch = batch_of(&[vec![0.3; 6], vec![-0.5; 6]], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = NoiseSeq::draw(2, 6, 4, &mut rng);
        let codes = bundle.encoder.encode(&batch, &noise).unwrap();
        assert_eq!(codes.len(), 2);
        for code in &codes {
            assert_eq!(code.len(), 4);
            assert!(code.iter().all(|v| v.abs() < 1.0));
        }
        // determinism
        let again = bundle.encoder.encode(&batch, &noise).unwrap();
        assert_eq!(codes, again);
    }

    #[test]
    fn padded_batch_matches_unbatched_encoding() {
        let bundle: ModelBundle<f32> = init_models(toy_dims(), 3);
        let seqs = vec![vec![0.1f32, -0.2, 0.4], vec![0.9, 0.8, -0.3, 0.2, -0.6]];
        let batch = batch_of(&seqs, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = NoiseSeq::draw(2, 5, 4, &mut rng);
        let together = bundle.encoder.encode(&batch, &noise).unwrap();
        for (i, seq) in seqs.iter().enumerate() {
            let single = batch_of(&[seq.clone()], 1);
            let noise_i = noise.for_sequence(i, seq.len());
            let alone = bundle.encoder.encode(&single, &noise_i).unwrap();
            for (a, b) in together[i].iter().zip(&alone[0]) {
                assert!((a - b).abs() < 1e-6, "seq {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn encoder_rejects_short_noise() {
        let bundle: ModelBundle<f32> = init_models(toy_dims(), 3);
        let batch = batch_of(&[vec![0.0f32; 6]], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseSeq::draw(1, 4, 4, &mut rng);
        assert!(bundle.encoder.encode(&batch, &noise).is_err());
    }

    #[test]
    fn generator_emits_requested_length_in_range() {
        let bundle: ModelBundle<f32> = init_models(toy_dims(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = NoiseSeq::draw(3, 100, 4, &mut rng);
        let codes = vec![vec![0.1f32; 4], vec![-0.7; 4], vec![0.9; 4]];
        let out = bundle.generator.generate(&codes, &noise, 100).unwrap();
        assert_eq!(out.len(), 3);
        for seq in &out {
            assert_eq!(seq.len(), 100);
            assert!(seq.iter().all(|v| v.abs() < 1.0));
        }
        // stateless across calls
        let again = bundle.generator.generate(&codes, &noise, 100).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn feature_disc_scores_every_step() {
        let mut bundle: ModelBundle<f32> = init_models(toy_dims(), 5);
        let batch = batch_of(&[vec![0.5f32; 7]], 1);
        let scores = bundle.feat_disc.score(&batch).unwrap();
        assert_eq!(scores[0].len(), 7);
        let again = bundle.feat_disc.score(&batch).unwrap();
        assert_eq!(scores, again);
        // sigma update path also runs
        let s = bundle.feat_disc.head_sigma(5);
        assert!(s > 0.0);
    }

    #[test]
    fn latent_disc_scalar_per_row() {
        let bundle: ModelBundle<f32> = init_models(toy_dims(), 6);
        let scores = bundle
            .latent_disc
            .score(&[vec![0.1f32; 4], vec![0.9; 4]])
            .unwrap();
        assert_eq!(scores.len(), 2);
        let again = bundle
            .latent_disc
            .score(&[vec![0.1f32; 4], vec![0.9; 4]])
            .unwrap();
        assert_eq!(scores, again);
    }
}

//! Datasets: sine-wave synthesis, CSV ingestion, windowing, min-max
//! normalization, and padded/masked batching.

use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unparseable numeric at row {row}, column \"{column}\": `{value}`")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("series of length {len} shorter than window {window}")]
    SeriesTooShort { len: usize, window: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// A collection of variable-length sequences sharing one feature dimension.
/// Sequence `i` stores `lengths[i] × dim` values row-major (time-major).
#[derive(Debug, Clone)]
pub struct Dataset<F> {
    pub sequences: Vec<Vec<F>>,
    pub dim: usize,
    pub feature_names: Vec<String>,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(sequences: Vec<Vec<F>>, dim: usize, feature_names: Vec<String>) -> Self {
        debug_assert!(sequences.iter().all(|s| s.len() % dim == 0));
        Dataset {
            sequences,
            dim,
            feature_names,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self, i: usize) -> usize {
        self.sequences[i].len() / self.dim
    }

    pub fn min_seq_len(&self) -> usize {
        (0..self.len()).map(|i| self.seq_len(i)).min().unwrap_or(0)
    }

    pub fn max_seq_len(&self) -> usize {
        (0..self.len()).map(|i| self.seq_len(i)).max().unwrap_or(0)
    }

    /// Apply `f` to every value, keeping the layout.
    pub fn map_values(&self, mut f: impl FnMut(usize, F) -> F) -> Dataset<F> {
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                let mut out = Vec::with_capacity(s.len());
                for row in s.chunks(self.dim) {
                    for (d, &v) in row.iter().enumerate() {
                        out.push(f(d, v));
                    }
                }
                out
            })
            .collect();
        Dataset {
            sequences,
            dim: self.dim,
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Batch of sequences padded to the batch maximum length, with validity
/// masks. Values outside the mask are zero.
#[derive(Debug, Clone)]
pub struct SeqBatch<F> {
    /// `batch × t_max × dim`, row-major.
    pub values: Vec<F>,
    pub lengths: Vec<usize>,
    pub mask: Vec<bool>,
    pub t_max: usize,
    pub dim: usize,
}

impl<F: Scalar> SeqBatch<F> {
    pub fn from_sequences(sequences: &[&[F]], dim: usize) -> Self {
        let batch = sequences.len();
        let lengths: Vec<usize> = sequences.iter().map(|s| s.len() / dim).collect();
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        let mut values = vec![F::zero(); batch * t_max * dim];
        let mut mask = vec![false; batch * t_max];
        for (i, seq) in sequences.iter().enumerate() {
            let len = lengths[i];
            values[i * t_max * dim..i * t_max * dim + len * dim].copy_from_slice(seq);
            for t in 0..len {
                mask[i * t_max + t] = true;
            }
        }
        SeqBatch {
            values,
            lengths,
            mask,
            t_max,
            dim,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn uniform_length(&self) -> bool {
        self.lengths.iter().all(|&l| l == self.t_max)
    }

    /// The `batch × dim` matrix of values at timestep `t` (zeros where
    /// padded).
    pub fn step_matrix(&self, t: usize) -> Vec<F> {
        let b = self.batch_size();
        let mut out = vec![F::zero(); b * self.dim];
        for i in 0..b {
            let src = (i * self.t_max + t) * self.dim;
            out[i * self.dim..(i + 1) * self.dim].copy_from_slice(&self.values[src..src + self.dim]);
        }
        out
    }

    /// Validity of step `t` per sequence, as a `batch × 1` column of 0/1.
    pub fn mask_column(&self, t: usize) -> Vec<F> {
        (0..self.batch_size())
            .map(|i| {
                if self.mask[i * self.t_max + t] {
                    F::one()
                } else {
                    F::zero()
                }
            })
            .collect()
    }

    /// Values of sequence `i` without padding.
    pub fn sequence(&self, i: usize) -> &[F] {
        let start = i * self.t_max * self.dim;
        &self.values[start..start + self.lengths[i] * self.dim]
    }
}

/// Per-feature affine map from the observed `[min, max]` onto `[-1, 1]`.
/// Degenerate features (max == min) are widened by a tiny span so constants
/// map to 0.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Normalizer {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mins: vec![-1.0; dim],
            maxs: vec![1.0; dim],
        }
    }

    pub fn fit<F: Scalar>(dataset: &Dataset<F>) -> Result<Self, DataError> {
        if dataset.is_empty() {
            return Err(DataError::Empty);
        }
        let dim = dataset.dim;
        let mut mins = vec![f64::INFINITY; dim];
        let mut maxs = vec![f64::NEG_INFINITY; dim];
        for seq in &dataset.sequences {
            for row in seq.chunks(dim) {
                for (d, &v) in row.iter().enumerate() {
                    let x = v.to_f64();
                    mins[d] = mins[d].min(x);
                    maxs[d] = maxs[d].max(x);
                }
            }
        }
        for d in 0..dim {
            if maxs[d] - mins[d] < f64::EPSILON {
                let pad = 1e-6f64.max(mins[d].abs() * 1e-6);
                mins[d] -= pad;
                maxs[d] += pad;
            }
        }
        Ok(Normalizer { mins, maxs })
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    pub fn span(&self, d: usize) -> f64 {
        self.maxs[d] - self.mins[d]
    }

    pub fn apply_value<F: Scalar>(&self, d: usize, v: F) -> F {
        let x = v.to_f64();
        F::from_f64(2.0 * (x - self.mins[d]) / self.span(d) - 1.0)
    }

    pub fn invert_value<F: Scalar>(&self, d: usize, v: F) -> F {
        let y = v.to_f64();
        F::from_f64((y + 1.0) * 0.5 * self.span(d) + self.mins[d])
    }

    pub fn apply<F: Scalar>(&self, dataset: &Dataset<F>) -> Dataset<F> {
        dataset.map_values(|d, v| self.apply_value(d, v))
    }

    pub fn invert<F: Scalar>(&self, dataset: &Dataset<F>) -> Dataset<F> {
        dataset.map_values(|d, v| self.invert_value(d, v))
    }
}

/// Parameters of the synthetic sine dataset: per-sequence amplitude,
/// frequency (cycles over the unit interval spanned by the sequence), and
/// phase are drawn uniformly from the configured ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinesSpec {
    pub n: usize,
    pub t: usize,
    pub amp: (f64, f64),
    pub freq: (f64, f64),
    pub phase: (f64, f64),
    pub seed: u64,
}

impl Default for SinesSpec {
    fn default() -> Self {
        SinesSpec {
            n: 500,
            t: 100,
            amp: (0.5, 1.5),
            freq: (1.0, 10.0),
            phase: (-std::f64::consts::PI, std::f64::consts::PI),
            seed: 0,
        }
    }
}

fn uniform(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.gen_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Sequence `i` is `A·sin(2π f t_j + φ)` sampled at `t_j = j / T`.
pub fn synth_sines<F: Scalar>(spec: &SinesSpec) -> Dataset<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sequences = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let a = uniform(&mut rng, spec.amp);
        let f = uniform(&mut rng, spec.freq);
        let phi = uniform(&mut rng, spec.phase);
        let seq: Vec<F> = (0..spec.t)
            .map(|j| {
                let tj = j as f64 / spec.t as f64;
                F::from_f64(a * (2.0 * std::f64::consts::PI * f * tj + phi).sin())
            })
            .collect();
        sequences.push(seq);
    }
    Dataset::new(sequences, 1, vec!["x0".to_string()])
}

/// Column selection for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub id_column: Option<String>,
}

/// Load a header-ful CSV. Rows are grouped by the id column when present
/// (group order follows first appearance); otherwise the whole file is one
/// sequence.
pub fn load_csv<F: Scalar>(path: &Path, schema: &CsvSchema) -> Result<Dataset<F>, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col_index = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let feature_idx: Vec<usize> = schema
        .feature_columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_, _>>()?;
    let id_idx = schema.id_column.as_deref().map(col_index).transpose()?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: Vec<Vec<F>> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_no + 1; // 1-based data row, header excluded
        let key = match id_idx {
            Some(i) => record.get(i).unwrap_or("").to_string(),
            None => String::new(),
        };
        let group = match order.iter().position(|k| *k == key) {
            Some(g) => g,
            None => {
                order.push(key);
                groups.push(Vec::new());
                groups.len() - 1
            }
        };
        for (&ci, name) in feature_idx.iter().zip(&schema.feature_columns) {
            let cell = record.get(ci).unwrap_or("");
            let value: f64 = cell.trim().parse().map_err(|_| DataError::BadCell {
                row,
                column: name.clone(),
                value: cell.to_string(),
            })?;
            groups[group].push(F::from_f64(value));
        }
    }
    if groups.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(Dataset::new(
        groups,
        schema.feature_columns.len(),
        schema.feature_columns.clone(),
    ))
}

/// Cut every sequence into overlapping windows of `t` steps at the given
/// stride. Errors if any sequence is shorter than `t`.
pub fn slice_windows<F: Scalar>(
    dataset: &Dataset<F>,
    t: usize,
    stride: usize,
) -> Result<Dataset<F>, DataError> {
    assert!(t >= 1 && stride >= 1);
    let dim = dataset.dim;
    let mut windows = Vec::new();
    for seq in &dataset.sequences {
        let len = seq.len() / dim;
        if len < t {
            return Err(DataError::SeriesTooShort { len, window: t });
        }
        let count = (len - t) / stride + 1;
        for w in 0..count {
            let start = w * stride * dim;
            windows.push(seq[start..start + t * dim].to_vec());
        }
    }
    Ok(Dataset::new(windows, dim, dataset.feature_names.clone()))
}

/// Shuffled batches for one epoch: every sequence appears exactly once,
/// padded to each batch's own maximum length.
pub fn epoch_batches<F: Scalar>(
    dataset: &Dataset<F>,
    batch_size: usize,
    seed: u64,
) -> Vec<SeqBatch<F>> {
    assert!(batch_size >= 1);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices
        .chunks(batch_size)
        .map(|chunk| {
            let seqs: Vec<&[F]> = chunk.iter().map(|&i| dataset.sequences[i].as_slice()).collect();
            SeqBatch::from_sequences(&seqs, dataset.dim)
        })
        .collect()
}

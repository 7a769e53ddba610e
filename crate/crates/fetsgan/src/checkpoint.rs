//! Flat binary checkpoint format.
//!
//! Layout (all integers little-endian `u32`):
//!   magic `FETS` | version | tensor count |
//!   per tensor: name length, UTF-8 name, rank, dims, raw `f32` LE values |
//!   JSON length, UTF-8 JSON blob (config, normalizer, provenance)
//!
//! The tensor list covers every trainable parameter of the four networks plus
//! the persistent spectral-norm vectors, in a fixed order, so a save → load →
//! save round trip is byte-identical.

use crate::data::Normalizer;
use crate::nn::{init_models, ModelBundle, ModelDims};
use crate::scalar::Scalar;
use crate::spectral::SpectralNorm;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FETS";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes: expected `FETS`")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("tensor `{name}`: shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint tensor `{0}` is not part of the model")]
    UnknownTensor(String),
    #[error("model tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
    #[error("invalid UTF-8 in {0}")]
    Utf8(&'static str),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
}

/// Everything a checkpoint persists.
pub struct Checkpoint {
    pub bundle: ModelBundle<f32>,
    pub config: TrainConfig,
    pub feature_names: Vec<String>,
    /// Full resolved run configuration, when trained through the CLI.
    pub run_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    normalizer: Normalizer,
    data_dim: usize,
    feature_names: Vec<String>,
    trained_epochs: usize,
    run_config: Option<serde_json::Value>,
}

fn named_tensors(bundle: &ModelBundle<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for net in [
        &bundle.encoder.net,
        &bundle.generator.net,
        &bundle.feat_disc.net,
        &bundle.latent_disc.net,
    ] {
        for e in &net.entries {
            out.push((e.name.clone(), e.shape.clone(), e.data.clone()));
        }
    }
    let mut sn_entry = |name: String, v: &Vec<f32>| {
        out.push((name, vec![v.len()], v.clone()));
    };
    sn_entry("feat_disc.head.sn_u".into(), &bundle.feat_disc.head_sn.u);
    sn_entry("feat_disc.head.sn_v".into(), &bundle.feat_disc.head_sn.v);
    for (i, sn) in bundle.latent_disc.sn.iter().enumerate() {
        sn_entry(format!("latent_disc.sn.{i}.u"), &sn.u);
        sn_entry(format!("latent_disc.sn.{i}.v"), &sn.v);
    }
    out
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let tensors = named_tensors(&ckpt.bundle);
    let meta = Meta {
        config: ckpt.config.clone(),
        normalizer: ckpt.bundle.normalizer.clone(),
        data_dim: ckpt.bundle.dims.data_dim,
        feature_names: ckpt.feature_names.clone(),
        trained_epochs: ckpt.bundle.trained_epochs,
        run_config: ckpt.run_config.clone(),
    };
    let json = serde_json::to_vec(&meta)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in &tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|_| CheckpointError::Truncated(what))
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, "tensor name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "tensor name")?;
        let name =
            String::from_utf8(name_bytes).map_err(|_| CheckpointError::Utf8("tensor name"))?;
        let rank = read_u32(&mut r, "tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "tensor dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        read_exact(&mut r, &mut raw, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, shape, data));
    }
    let json_len = read_u32(&mut r, "metadata length")? as usize;
    let mut json = vec![0u8; json_len];
    read_exact(&mut r, &mut json, "metadata")?;
    let meta: Meta = serde_json::from_slice(&json)?;

    // Rebuild the structure from the config, then fill every tensor from the
    // file, requiring exact name and shape agreement in both directions.
    let dims = ModelDims {
        data_dim: meta.data_dim,
        latent_dim: meta.config.latent_dim,
        noise_dim: meta.config.noise_dim,
        width: meta.config.hidden_width,
        depth: meta.config.depth,
    };
    let mut bundle: ModelBundle<f32> = init_models(dims, meta.config.seed);
    bundle.normalizer = meta.normalizer;
    bundle.trained_epochs = meta.trained_epochs;

    let mut remaining: std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)> = tensors
        .into_iter()
        .map(|(name, shape, data)| (name, (shape, data)))
        .collect();

    {
        let mut fill = |name: &str, shape: &[usize], dst: &mut Vec<f32>| {
            match remaining.remove(name) {
                Some((found_shape, data)) => {
                    if found_shape != shape {
                        return Err(CheckpointError::ShapeMismatch {
                            name: name.to_string(),
                            found: found_shape,
                            expected: shape.to_vec(),
                        });
                    }
                    *dst = data;
                    Ok(())
                }
                None => Err(CheckpointError::MissingTensor(name.to_string())),
            }
        };
        for net in [
            &mut bundle.encoder.net,
            &mut bundle.generator.net,
            &mut bundle.feat_disc.net,
            &mut bundle.latent_disc.net,
        ] {
            for e in &mut net.entries {
                let (name, shape) = (e.name.clone(), e.shape.clone());
                fill(&name, &shape, &mut e.data)?;
            }
        }
        let mut fill_sn = |name: String, sn_vec: &mut Vec<f32>| {
            let shape = vec![sn_vec.len()];
            fill(&name, &shape, sn_vec)
        };
        fill_sn("feat_disc.head.sn_u".into(), &mut bundle.feat_disc.head_sn.u)?;
        fill_sn("feat_disc.head.sn_v".into(), &mut bundle.feat_disc.head_sn.v)?;
        for i in 0..bundle.latent_disc.sn.len() {
            fill_sn(format!("latent_disc.sn.{i}.u"), &mut bundle.latent_disc.sn[i].u)?;
            fill_sn(format!("latent_disc.sn.{i}.v"), &mut bundle.latent_disc.sn[i].v)?;
        }
    }
    if let Some((name, _)) = remaining.into_iter().next() {
        return Err(CheckpointError::UnknownTensor(name));
    }

    Ok(Checkpoint {
        bundle,
        config: meta.config,
        feature_names: meta.feature_names,
        run_config: meta.run_config,
    })
}

/// Cast a bundle's parameters to another precision (used by tests that run
/// the graph at `f64`).
pub fn cast_bundle<A: Scalar, B: Scalar>(src: &ModelBundle<A>) -> ModelBundle<B> {
    let dims = src.dims;
    let mut dst: ModelBundle<B> = init_models(dims, 0);
    let convert = |entries_src: &Vec<crate::nn::ParamEntry<A>>,
                   entries_dst: &mut Vec<crate::nn::ParamEntry<B>>| {
        for (s, d) in entries_src.iter().zip(entries_dst.iter_mut()) {
            d.data = s.data.iter().map(|&v| B::from_f64(v.to_f64())).collect();
        }
    };
    convert(&src.encoder.net.entries, &mut dst.encoder.net.entries);
    convert(&src.generator.net.entries, &mut dst.generator.net.entries);
    convert(&src.feat_disc.net.entries, &mut dst.feat_disc.net.entries);
    convert(&src.latent_disc.net.entries, &mut dst.latent_disc.net.entries);
    let cast_vec = |v: &Vec<A>| -> Vec<B> { v.iter().map(|&x| B::from_f64(x.to_f64())).collect() };
    dst.feat_disc.head_sn = SpectralNorm::from_parts(
        cast_vec(&src.feat_disc.head_sn.u),
        cast_vec(&src.feat_disc.head_sn.v),
    );
    for (i, sn) in src.latent_disc.sn.iter().enumerate() {
        dst.latent_disc.sn[i] = SpectralNorm::from_parts(cast_vec(&sn.u), cast_vec(&sn.v));
    }
    dst.normalizer = src.normalizer.clone();
    dst.trained_epochs = src.trained_epochs;
    dst
}

//! Checkpoint format: a directory holding `manifest.json` (format version,
//! step, meta, per-tensor table with offsets and checksums) and a single
//! little-endian `weights.bin` blob. Loads are verified tensor by tensor
//! and fail naming the offender.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::trainer::TrainState;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub byte_len: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainMeta {
    pub global_step: u64,
    pub disc_step: u64,
    pub gen_opt_step: u64,
    pub disc_opt_step: u64,
    pub config: RunConfig,
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
}

/// Accumulates tensors into a blob + table.
pub struct BlobWriter {
    buf: Vec<u8>,
    tensors: BTreeMap<String, TensorEntry>,
}

impl Default for BlobWriter {
    fn default() -> Self {
        Self::new()
    }
}

impl BlobWriter {
    pub fn new() -> Self {
        BlobWriter {
            buf: Vec::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn push<E: Element>(&mut self, name: &str, t: &Tensor<E>) {
        let bytes = t.to_le_bytes();
        let entry = TensorEntry {
            dtype: E::DTYPE.name().to_string(),
            shape: t.shape().to_vec(),
            offset: self.buf.len(),
            byte_len: bytes.len(),
            sha256: hex_digest(&bytes),
        };
        self.buf.extend_from_slice(&bytes);
        self.tensors.insert(name.to_string(), entry);
    }

    pub fn push_slice<E: Element>(&mut self, name: &str, data: &[E], shape: &[usize]) {
        let t = Tensor::<E>::new(data.to_vec(), shape).expect("shape matches slice");
        self.push(name, &t);
    }

    pub fn finish(self, dir: &Path, step: u64, meta: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            step,
            meta,
            tensors: self.tensors,
        };
        std::fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        std::fs::write(dir.join(WEIGHTS_FILE), &self.buf)?;
        Ok(())
    }
}

/// Verifying reader over a checkpoint directory.
pub struct BlobReader {
    pub manifest: Manifest,
    blob: Vec<u8>,
}

impl BlobReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let data = std::fs::read(&manifest_path).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {}", manifest_path.display(), e))
        })?;
        let manifest: Manifest = serde_json::from_slice(&data)
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {}", e)))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {})",
                manifest.format_version, FORMAT_VERSION
            )));
        }
        let blob = std::fs::read(dir.join(WEIGHTS_FILE))
            .map_err(|e| Error::Checkpoint(format!("cannot read weights blob: {}", e)))?;
        Ok(BlobReader { manifest, blob })
    }

    pub fn tensor<E: Element>(&self, name: &str) -> Result<Tensor<E>> {
        let entry = self.manifest.tensors.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("tensor '{}' missing from manifest", name))
        })?;
        if entry.dtype != E::DTYPE.name() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has dtype {}, expected {}",
                name,
                entry.dtype,
                E::DTYPE.name()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if numel * E::DTYPE.size_bytes() != entry.byte_len {
            return Err(Error::Checkpoint(format!(
                "tensor '{}': manifest shape {:?} disagrees with byte length {}",
                name, entry.shape, entry.byte_len
            )));
        }
        let end = entry.offset + entry.byte_len;
        if end > self.blob.len() {
            return Err(Error::Checkpoint(format!(
                "truncated blob: tensor '{}' wants bytes {}..{} of {}",
                name,
                entry.offset,
                end,
                self.blob.len()
            )));
        }
        let bytes = &self.blob[entry.offset..end];
        if hex_digest(bytes) != entry.sha256 {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch for tensor '{}'",
                name
            )));
        }
        Tensor::from_le_bytes(bytes, &entry.shape)
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.manifest.meta.clone())?)
    }
}

/// Serialize the full training state (networks, both optimizers, counters,
/// config snapshot).
pub fn save<E: Element>(state: &TrainState<E>, dir: &Path) -> Result<()> {
    let mut w = BlobWriter::new();
    for (name, t) in state.denoiser.params() {
        w.push(&name, t);
    }
    for (name, t) in state.projection.params() {
        w.push(&name, t);
    }
    for (name, t) in state.discriminator.params() {
        w.push(&name, t);
    }
    for (name, t) in state.encoder.params() {
        w.push(&name, t);
    }
    for (name, m, v) in state.gen_opt.moments() {
        w.push_slice(&format!("opt_gen.{}.m", name), m, &[m.len()]);
        w.push_slice(&format!("opt_gen.{}.v", name), v, &[v.len()]);
    }
    for (name, m, v) in state.disc_opt.moments() {
        w.push_slice(&format!("opt_disc.{}.m", name), m, &[m.len()]);
        w.push_slice(&format!("opt_disc.{}.v", name), v, &[v.len()]);
    }
    let meta = TrainMeta {
        global_step: state.global_step,
        disc_step: state.disc_step,
        gen_opt_step: state.gen_opt.step_count(),
        disc_opt_step: state.disc_opt.step_count(),
        config: state.cfg.clone(),
    };
    w.finish(dir, state.global_step, serde_json::to_value(meta)?)
}

/// Rebuild a training state bit-exactly from a checkpoint directory.
pub fn load<E: Element>(dir: &Path) -> Result<TrainState<E>>
where
    StandardNormal: Distribution<E>,
{
    let reader = BlobReader::open(dir)?;
    let meta: TrainMeta = reader.meta()?;
    let mut state = TrainState::<E>::new(meta.config)?;

    for (name, t) in state.denoiser.params_mut() {
        *t = reader.tensor(&name)?;
    }
    for (name, t) in state.projection.params_mut() {
        *t = reader.tensor(&name)?;
    }
    for (name, t) in state.discriminator.params_mut() {
        *t = reader.tensor(&name)?;
    }
    for (name, t) in state.encoder.params_mut() {
        *t = reader.tensor(&name)?;
    }

    let gen_names: Vec<String> = state
        .denoiser
        .params()
        .into_iter()
        .map(|(n, _)| n)
        .chain(state.projection.params().into_iter().map(|(n, _)| n))
        .collect();
    let mut gen_moments = Vec::new();
    for name in &gen_names {
        let m = reader.tensor::<E>(&format!("opt_gen.{}.m", name))?;
        let v = reader.tensor::<E>(&format!("opt_gen.{}.v", name))?;
        gen_moments.push((name.clone(), m.data().to_vec(), v.data().to_vec()));
    }
    state.gen_opt.restore(meta.gen_opt_step, gen_moments)?;

    let disc_names: Vec<String> = state
        .discriminator
        .params()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut disc_moments = Vec::new();
    for name in &disc_names {
        let m = reader.tensor::<E>(&format!("opt_disc.{}.m", name))?;
        let v = reader.tensor::<E>(&format!("opt_disc.{}.v", name))?;
        disc_moments.push((name.clone(), m.data().to_vec(), v.data().to_vec()));
    }
    state.disc_opt.restore(meta.disc_opt_step, disc_moments)?;

    state.global_step = meta.global_step;
    state.disc_step = meta.disc_step;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::tensor::bit_equal;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::toy();
        cfg.dataset.latent = (2, 4, 4);
        cfg.dataset.classes = 2;
        cfg.model.layers = 2;
        cfg.model.hidden_dim = 16;
        cfg.model.heads = 2;
        cfg.model.alignment_depth = 1;
        cfg.model.encoder_dim = 8;
        cfg.model.encoder_layers = 1;
        cfg.model.encoder_heads = 2;
        cfg.model.disc_width = 4;
        cfg.train.batch_size = 4;
        cfg
    }

    fn expect_err<T>(r: crate::error::Result<T>) -> crate::error::Error {
        match r {
            Err(e) => e,
            Ok(_) => panic!("expected an error"),
        }
    }

    fn states_bit_equal(a: &TrainState<f64>, b: &TrainState<f64>) -> bool {
        let pa = a.denoiser.params();
        let pb = b.denoiser.params();
        pa.iter().zip(&pb).all(|((_, x), (_, y))| bit_equal(x, y))
            && a.global_step == b.global_step
            && a.disc_step == b.disc_step
            && a.gen_opt
                .moments()
                .iter()
                .zip(b.gen_opt.moments())
                .all(|((_, m1, v1), (_, m2, v2))| **m1 == m2[..] && **v1 == v2[..])
    }

    #[test]
    fn round_trip_bit_exact() {
        let mut state = TrainState::<f64>::new(tiny_cfg()).unwrap();
        for _ in 0..7 {
            state.train_step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let loaded = load::<f64>(dir.path()).unwrap();
        assert!(states_bit_equal(&state, &loaded));
    }

    #[test]
    fn corrupt_byte_names_tensor() {
        let state = TrainState::<f64>::new(tiny_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let blob_path = dir.path().join(WEIGHTS_FILE);
        let mut blob = std::fs::read(&blob_path).unwrap();
        blob[10] ^= 0xff;
        std::fs::write(&blob_path, &blob).unwrap();
        let err = expect_err(load::<f64>(dir.path()));
        let msg = format!("{}", err);
        assert!(
            msg.contains("checksum mismatch for tensor '"),
            "unexpected error: {}",
            msg
        );
    }

    #[test]
    fn truncated_blob_detected() {
        let state = TrainState::<f64>::new(tiny_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let blob_path = dir.path().join(WEIGHTS_FILE);
        let blob = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &blob[..blob.len() / 2]).unwrap();
        let err = expect_err(load::<f64>(dir.path()));
        assert!(format!("{}", err).contains("truncated"));
    }

    #[test]
    fn version_mismatch_rejected() {
        let state = TrainState::<f64>::new(tiny_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 999");
        std::fs::write(&mpath, text).unwrap();
        let err = expect_err(load::<f64>(dir.path()));
        assert!(format!("{}", err).contains("format_version"));
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let state = TrainState::<f32>::new(tiny_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let err = expect_err(load::<f64>(dir.path()));
        assert!(format!("{}", err).contains("dtype"));
    }
}

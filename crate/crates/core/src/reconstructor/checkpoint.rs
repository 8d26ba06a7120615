//! Parameter checkpoints: `manifest.txt` (header plus one line per tensor:
//! name, shape, byte offset, element count) and `params.bin` holding
//! little-endian `f32` values in manifest order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::ReconstructorModel;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};
use crate::spa::StageConfig;

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";
const FORMAT: &str = "@format performer-checkpoint 1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
}

pub fn save<T: Scalar>(dir: &Path, header: &CheckpointHeader, store: &ParamStore<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    writeln!(manifest, "{FORMAT}").unwrap();
    writeln!(manifest, "@kind {}", header.kind).unwrap();
    writeln!(manifest, "@config_hash {}", header.config_hash).unwrap();
    writeln!(manifest, "@seed {}", header.seed).unwrap();
    let mut blob = Vec::with_capacity(store.numel() * 4);
    for (name, t) in store.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(manifest, "{name} {} {} {}", shape.join("x"), blob.len(), t.len()).unwrap();
        for &v in t.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    fs::write(dir.join(BLOB), blob)?;
    Ok(())
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Input(format!("malformed checkpoint: {}", detail.into()))
}

pub fn load<T: Scalar>(dir: &Path) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let blob = fs::read(dir.join(BLOB))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(FORMAT) {
        return Err(corrupt("unknown format line"));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| corrupt(format!("missing @{key}")))?;
        line.strip_prefix(&format!("@{key} "))
            .map(str::to_string)
            .ok_or_else(|| corrupt(format!("expected @{key}, found `{line}`")))
    };
    let kind = field("kind")?;
    let config_hash = field("config_hash")?;
    let seed = field("seed")?.parse().map_err(|_| corrupt("seed is not an integer"))?;
    let mut store = ParamStore::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, offset, count] = parts[..] else {
            return Err(corrupt(format!("bad parameter line `{line}`")));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| corrupt(format!("bad shape in `{line}`")))?;
        let offset: usize = offset.parse().map_err(|_| corrupt(format!("bad offset in `{line}`")))?;
        let count: usize = count.parse().map_err(|_| corrupt(format!("bad count in `{line}`")))?;
        let bytes = blob
            .get(offset..offset + 4 * count)
            .ok_or_else(|| corrupt(format!("`{name}` runs past the end of {BLOB}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        store.insert(name, Tensor::new(&shape, data)?)?;
    }
    Ok((
        CheckpointHeader {
            kind,
            config_hash,
            seed,
        },
        store,
    ))
}

/// Loads a checkpoint after checking its kind and configuration hash.
pub fn load_matching<T: Scalar>(dir: &Path, kind: &str, config_hash: &str) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let (header, store) = load(dir)?;
    if header.kind != kind {
        return Err(Error::Config(format!("checkpoint holds a {} model, expected {kind}", header.kind)));
    }
    if header.config_hash != config_hash {
        return Err(Error::Config(format!(
            "checkpoint config hash {} does not match {config_hash}",
            header.config_hash
        )));
    }
    Ok((header, store))
}

pub const RECONSTRUCTOR_KIND: &str = "reconstructor";

impl<T: Scalar> ReconstructorModel<T> {
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        let header = CheckpointHeader {
            kind: RECONSTRUCTOR_KIND.into(),
            config_hash: self.config().hash(),
            seed,
        };
        save(dir, &header, self.params())
    }

    pub fn load(dir: &Path, config: &StageConfig) -> Result<(Self, u64)> {
        let (header, store) = load_matching(dir, RECONSTRUCTOR_KIND, &config.hash())?;
        Ok((Self::from_params(config.clone(), store)?, header.seed))
    }
}

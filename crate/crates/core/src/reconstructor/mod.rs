//! PPG-to-ECG reconstruction: hierarchical shifted-patch encoder, learned-query
//! decoder with per-stage cross-attention, training loop, attention maps, checkpoints.

pub mod blocks;
pub mod checkpoint;
mod check;
mod model;
mod train;

use std::io::Write;
use std::path::Path;

pub use blocks::{AttnTag, Part};
pub use check::{model_gradcheck, PROBE_PARAMS};
pub use model::{Forward, ReconstructorModel};
pub use train::{train_reconstructor, TrainReport, TrainSchedule};

use crate::error::Result;
use crate::numerics::{Scalar, Tensor};

/// Attention weights of one head, rows over queries.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T = f32> {
    pub part: Part,
    pub stage_index: usize,
    pub block_index: usize,
    pub head_index: usize,
    pub weights: Tensor<T>,
}

/// Writes maps as `part,stage,block,head,query,key,weight` rows.
pub fn write_attention_csv<T: Scalar>(path: &Path, maps: &[AttentionMap<T>]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "part,stage,block,head,query,key,weight")?;
    for m in maps {
        let (nq, nk) = m.weights.dims2();
        for q in 0..nq {
            for k in 0..nk {
                writeln!(
                    out,
                    "{},{},{},{},{q},{k},{}",
                    m.part.as_str(),
                    m.stage_index,
                    m.block_index,
                    m.head_index,
                    m.weights.get(&[q, k])
                )?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

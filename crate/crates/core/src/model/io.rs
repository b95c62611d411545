use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, LmConfig, TensorSpec};
use crate::autograd::Mat;
use crate::container::{self, RecordBuf, RecordCursor};
use crate::error::{Error, Result};
use crate::quantize::QuantizerModel;

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    count: usize,
    config: LmConfig,
    quantizer: QuantizerModel,
    step: usize,
    metrics: BTreeMap<String, f64>,
    tensors: Vec<TensorSpec>,
}

/// Manifest (config, bottleneck, metrics, tensor shapes) in the header, one
/// row-major f64 record per tensor.
pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let records: Vec<RecordBuf> = ck
        .params
        .iter()
        .map(|p| {
            let mut r = RecordBuf::new();
            r.f64s(&p.iter().copied().collect::<Vec<_>>());
            r
        })
        .collect();
    let manifest = Manifest {
        kind: "checkpoint".into(),
        count: records.len(),
        config: ck.config.clone(),
        quantizer: ck.quantizer.clone(),
        step: ck.step,
        metrics: ck.metrics.clone(),
        tensors: ck.tensor_specs().to_vec(),
    };
    container::write_container(path, &manifest, records)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (m, records): (Manifest, _) = container::read_container(path)?;
    container::check_kind(&m.kind, "checkpoint", m.count, records.len())?;
    if m.tensors.len() != records.len() {
        return Err(Error::parse(
            "line 2",
            "tensor list does not match record count",
        ));
    }
    let params = m
        .tensors
        .iter()
        .zip(&records)
        .enumerate()
        .map(|(i, (spec, bytes))| {
            let mut c = RecordCursor::new(bytes, i);
            let data = c.f64s()?;
            c.finish()?;
            Mat::from_shape_vec((spec.rows, spec.cols), data).map_err(|_| {
                Error::parse(
                    format!("record {i}"),
                    format!("tensor {} has wrong length", spec.name),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ck = Checkpoint::from_parts(m.config, m.quantizer, params, m.step, m.metrics)?;
    if ck.tensor_specs() != m.tensors.as_slice() {
        return Err(Error::parse(
            "line 2",
            "tensor names do not match the configured architecture",
        ));
    }
    Ok(ck)
}

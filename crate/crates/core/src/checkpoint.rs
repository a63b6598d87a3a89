//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! loaded model evaluates bit-identically to the one that was saved.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EnergyModel, FourierEncoder, Head, ModelMeta, SirenLayer, CHECKPOINT_VERSION};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    meta: ModelMeta,
    params: Params,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    layers: Vec<Affine>,
    head: Affine,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Affine {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

fn rows(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn flatten(matrix: Vec<Vec<f64>>, cols: usize, what: &str) -> Result<(usize, Vec<f64>)> {
    let n_rows = matrix.len();
    let mut out = Vec::with_capacity(n_rows * cols);
    for (i, r) in matrix.into_iter().enumerate() {
        if r.len() != cols {
            return Err(Error::Validation(format!(
                "{what} row {i} has {} columns, expected {cols}",
                r.len()
            )));
        }
        out.extend(r);
    }
    Ok((n_rows, out))
}

pub fn to_json(model: &EnergyModel) -> String {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        meta: model.meta.clone(),
        params: Params {
            b: rows(&model.encoder.b, model.encoder.d),
            layers: model
                .layers
                .iter()
                .map(|l| Affine {
                    w: rows(&l.w, l.inputs),
                    b: l.b.clone(),
                })
                .collect(),
            head: Affine {
                w: vec![model.head.w.clone()],
                b: vec![model.head.b],
            },
        },
    };
    let mut s = serde_json::to_string(&file).expect("checkpoint serialization cannot fail");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> Result<EnergyModel> {
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => Error::Validation(e.to_string()),
        _ => Error::Parse {
            line: e.line(),
            message: e.to_string(),
        },
    })?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let meta = file.meta;
    let d = meta.d;
    if d == 0 {
        return Err(Error::Validation("meta.d must be ≥ 1".into()));
    }
    let cols = file.params.b.first().map_or(0, Vec::len);
    if cols != d {
        return Err(Error::Validation(format!(
            "meta.d = {d} but the frequency matrix has {cols} columns"
        )));
    }
    let (m, b) = flatten(file.params.b, d, "B")?;
    let encoder = FourierEncoder::new(m, d, b).map_err(|e| Error::Validation(e.to_string()))?;
    let mut layers = Vec::with_capacity(file.params.layers.len());
    let mut fan_in = 2 * m;
    for (i, l) in file.params.layers.into_iter().enumerate() {
        let (outputs, w) = flatten(l.w, fan_in, &format!("layer {i} W"))?;
        layers.push(SirenLayer {
            inputs: fan_in,
            outputs,
            w,
            b: l.b,
            omega0: meta.omega0,
        });
        fan_in = outputs;
    }
    let (head_rows, head_w) = flatten(file.params.head.w, fan_in, "head W")?;
    if head_rows != 1 || file.params.head.b.len() != 1 {
        return Err(Error::Validation("head must map to a single scalar".into()));
    }
    let model = EnergyModel {
        meta,
        encoder,
        layers,
        head: Head {
            w: head_w,
            b: file.params.head.b[0],
        },
    };
    model.validate()?;
    Ok(model)
}

pub fn save_checkpoint(model: &EnergyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EnergyModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

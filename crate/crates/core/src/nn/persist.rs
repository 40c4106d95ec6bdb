//! Binary model files: `ARUMODEL` magic, format version, a JSON header with
//! the architecture, then every weight and bias as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InitScheme, Layer, LayerSpec, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ARUMODEL";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: [usize; 3],
    num_classes: usize,
    init_seed: u64,
    layers: Vec<(LayerSpec, InitScheme)>,
}

fn malformed(message: impl Into<String>) -> Error {
    Error::Format {
        what: "model file",
        message: message.into(),
    }
}

pub fn to_bytes(model: &ModelState) -> Vec<u8> {
    let header = Header {
        input_shape: model.input_shape,
        num_classes: model.num_classes,
        init_seed: model.init_seed,
        layers: model.layers.iter().map(|l| (l.spec.clone(), l.init.clone())).collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(24 + header.len() + model.num_parameters() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for l in &model.layers {
        for v in l.weight.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(malformed("missing ARUMODEL magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| malformed("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| malformed(e.to_string()))?;
    let mut floats = bytes[20 + hlen..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut take = |shape: Vec<usize>| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = floats.by_ref().take(n).collect();
        if data.len() != n {
            return Err(malformed("truncated parameters"));
        }
        Tensor::new(shape, data)
    };
    let mut layers = Vec::with_capacity(header.layers.len());
    for (spec, init) in header.layers {
        let weight = take(spec.weight_shape())?;
        let bias = take(vec![spec.outputs()])?;
        layers.push(Layer {
            spec,
            init,
            weight,
            bias,
        });
    }
    if floats.next().is_some() || (bytes.len() - 20 - hlen) % 4 != 0 {
        return Err(malformed("trailing bytes after parameters"));
    }
    Ok(ModelState {
        input_shape: header.input_shape,
        num_classes: header.num_classes,
        init_seed: header.init_seed,
        layers,
    })
}

pub fn save(model: &ModelState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = build_model(5, [3, 16, 16], 11).unwrap();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn rejects_corruption() {
        let m = build_model(2, [1, 8, 8], 0).unwrap();
        let bytes = to_bytes(&m);
        assert!(from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(from_bytes(b"not a model at all!!").is_err());
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0, 0, 0, 0]);
        assert!(from_bytes(&longer).is_err());
    }
}

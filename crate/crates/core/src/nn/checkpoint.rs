//! Model checkpoints: a `manifest.json` describing the layer stack plus one
//! little-endian f64 blob per parameter tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::{Layer, MemConv2d, MemLinear, Model};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerEntry {
    Linear { shape: [usize; 2], weight: String, bias: String },
    Conv2d { shape: [usize; 4], stride: usize, padding: usize, weight: String, bias: String },
    Relu,
    MaxPool2,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    layers: Vec<LayerEntry>,
}

fn write_blob(dir: &Path, name: &str, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(name), bytes)?;
    Ok(())
}

fn read_blob(dir: &Path, name: &str, expected: usize) -> Result<Vec<f64>> {
    if name.contains(['/', '\\']) || name.contains("..") {
        return Err(Error::Parse(format!("blob name {name:?} escapes the checkpoint")));
    }
    let bytes = fs::read(dir.join(name))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Parse(format!("{name}: {} bytes, expected {}", bytes.len(), expected * 8)));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes the model's master weights; layer configurations are not saved.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let (w, b) = (format!("layer{i}.weight.f64"), format!("layer{i}.bias.f64"));
        layers.push(match layer {
            Layer::Linear(l) => {
                write_blob(dir, &w, l.weight().data())?;
                write_blob(dir, &b, l.bias())?;
                LayerEntry::Linear {
                    shape: [l.weight().rows(), l.weight().cols()],
                    weight: w,
                    bias: b,
                }
            }
            Layer::Conv2d(c) => {
                let (o, ch, kh, kw) = c.weight().dims4()?;
                write_blob(dir, &w, c.weight().data())?;
                write_blob(dir, &b, c.bias())?;
                LayerEntry::Conv2d {
                    shape: [o, ch, kh, kw],
                    stride: c.stride,
                    padding: c.padding,
                    weight: w,
                    bias: b,
                }
            }
            Layer::Relu => LayerEntry::Relu,
            Layer::MaxPool2 => LayerEntry::MaxPool2,
            Layer::Flatten => LayerEntry::Flatten,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        layers,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Restores a model saved by [`save_checkpoint`]; all layers start digital.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let mut layers = Vec::new();
    for entry in manifest.layers {
        layers.push(match entry {
            LayerEntry::Linear { shape, weight, bias } => {
                let w = read_blob(dir, &weight, shape[0] * shape[1])?;
                let b = read_blob(dir, &bias, shape[1])?;
                Layer::Linear(MemLinear::from_parts(Matrix::from_vec(shape[0], shape[1], w)?, b)?)
            }
            LayerEntry::Conv2d {
                shape,
                stride,
                padding,
                weight,
                bias,
            } => {
                let w = read_blob(dir, &weight, shape.iter().product())?;
                let b = read_blob(dir, &bias, shape[0])?;
                Layer::Conv2d(MemConv2d::from_parts(Tensor::new(shape.to_vec(), w)?, b, stride, padding)?)
            }
            LayerEntry::Relu => Layer::Relu,
            LayerEntry::MaxPool2 => Layer::MaxPool2,
            LayerEntry::Flatten => Layer::Flatten,
        });
    }
    Ok(Model { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(m: &Model) -> Vec<Vec<f64>> {
        m.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Linear(x) => vec![x.weight().data().to_vec(), x.bias().to_vec()],
                Layer::Conv2d(x) => vec![x.weight().data().to_vec(), x.bias().to_vec()],
                _ => vec![],
            })
            .collect()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::desk_cnn(7);
        if let Layer::Linear(l) = &mut m.layers[9] {
            l.params_mut().1[3] = 0.1 + 0.2;
        }
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(params(&m), params(&back));
        assert_eq!(back.layers.len(), 10);
        assert!(!back.has_hardware());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&Model::mlp(&[3, 2], 1), dir.path()).unwrap();
        fs::write(dir.path().join("layer0.weight.f64"), [0u8; 8]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn manifest_version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&Model::mlp(&[3, 2], 1), dir.path()).unwrap();
        let p = dir.path().join("manifest.json");
        let text = fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 9");
        fs::write(&p, text).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}

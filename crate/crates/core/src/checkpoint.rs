//! Binary checkpoints.
//!
//! Layout: the magic bytes, a little-endian `u64` header length, a JSON
//! header, then raw little-endian `f64` values for every parameter in
//! manifest order, then the gate. When masks are present each masked matrix
//! follows as a bit-packed binary mask (LSB first) and, if it has one, its
//! real mask as `f64` values. `φ` and targets live in the header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use tickets_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSpec, Parameter, ParameterRegistry};
use crate::pruning::{MaskHyper, MaskSet, MatrixMask, ThresholdScheme};
use crate::train::ModelState;

pub const MAGIC: &[u8; 8] = b"TICKETS\0";
pub const FORMAT_VERSION: u32 = 1;

/// What produced the checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Pretrained,
    Finetuned,
    Compressed,
    Refined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MaskEntry {
    name: String,
    shape: Vec<usize>,
    phi: f64,
    target: f64,
    has_real: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MaskHeader {
    hyper: MaskHyper,
    scheme: ThresholdScheme,
    entries: Vec<MaskEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    stage: Stage,
    config: ModelConfig,
    manifest: Vec<ParamSpec>,
    gate_shape: Vec<usize>,
    masks: Option<MaskHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub state: ModelState,
    pub masks: Option<MaskSet>,
}

impl Checkpoint {
    pub fn new(stage: Stage, state: ModelState, masks: Option<MaskSet>) -> Self {
        Self { stage, state, masks }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let registry = &self.state.registry;
        let config = registry.config().clone();
        let manifest = config.manifest();
        let masks = self.masks.as_ref().map(|m| MaskHeader {
            hyper: m.hyper.clone(),
            scheme: m.scheme,
            entries: m
                .iter()
                .map(|(name, mask)| MaskEntry {
                    name: name.clone(),
                    shape: mask.shape.clone(),
                    phi: mask.phi,
                    target: mask.target,
                    has_real: mask.real.is_some(),
                })
                .collect(),
        });
        let header = Header {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            config,
            manifest,
            gate_shape: self.state.gate.shape().to_vec(),
            masks,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for spec in &header.manifest {
            write_f64s(&mut w, registry.get(&spec.name)?.value.data())?;
        }
        write_f64s(&mut w, self.state.gate.data())?;
        if let Some(m) = &self.masks {
            for (_, mask) in m.iter() {
                w.write_all(&pack_bits(&mask.binary))?;
                if let Some(real) = &mask.real {
                    write_f64s(&mut w, real)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                header.format_version
            )));
        }
        if header.manifest != header.config.manifest() {
            return Err(Error::Format("manifest does not match the model config".into()));
        }
        let mut params = IndexMap::new();
        for spec in &header.manifest {
            let data = read_f64s(&mut r, spec.numel())?;
            let value = Tensor::new(spec.shape.clone(), data)?;
            params.insert(
                spec.name.clone(),
                Parameter {
                    value,
                    tag: spec.tag,
                    kind: spec.kind,
                    prunable: spec.prunable,
                },
            );
        }
        let registry = ParameterRegistry::from_parts(header.config.clone(), params)?;
        let gate_len = header.gate_shape.iter().product();
        let gate = Tensor::new(header.gate_shape.clone(), read_f64s(&mut r, gate_len)?)?;
        let masks = match header.masks {
            None => None,
            Some(mh) => {
                let mut masks = IndexMap::new();
                for e in mh.entries {
                    let n: usize = e.shape.iter().product();
                    let mut bytes = vec![0u8; n.div_ceil(8)];
                    r.read_exact(&mut bytes)?;
                    let binary = unpack_bits(&bytes, n);
                    let real = if e.has_real { Some(read_f64s(&mut r, n)?) } else { None };
                    masks.insert(
                        e.name,
                        MatrixMask {
                            shape: e.shape,
                            binary,
                            real,
                            phi: e.phi,
                            target: e.target,
                        },
                    );
                }
                let set = MaskSet {
                    masks,
                    hyper: mh.hyper,
                    scheme: mh.scheme,
                };
                set.check_against(&registry)?;
                Some(set)
            }
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            stage: header.stage,
            state: ModelState { registry, gate },
            masks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(fs::File::open(path)?))
    }
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::pruning::{init_real_mask, omp};
    use crate::sparsity::SparsityConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ffn: 16,
            heads: 2,
            language_layers: 1,
            visual_layers: 1,
            cross_layers: 1,
            vocab_size: 12,
            visual_feature_dim: 4,
            answer_count: 6,
            pooled_dim: 8,
            max_question_len: 4,
            visual_objects: 3,
        }
    }

    fn roundtrip(ck: &Checkpoint) -> Checkpoint {
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        Checkpoint::read_from(buf.as_slice()).unwrap()
    }

    #[test]
    fn bits_pack_lsb_first() {
        let bits = [true, false, false, true, false, false, false, false, true];
        assert_eq!(pack_bits(&bits), vec![0b0000_1001, 0b1]);
        assert_eq!(unpack_bits(&pack_bits(&bits), bits.len()), bits);
    }

    #[test]
    fn weights_only_roundtrip() {
        let mut state = ModelState::new(build_model(&small(), 3).unwrap());
        state.gate.data_mut()[2] = -0.125;
        let ck = Checkpoint::new(Stage::Pretrained, state, None);
        assert_eq!(roundtrip(&ck), ck);
    }

    #[test]
    fn masks_roundtrip_with_and_without_real_part() {
        let reg = build_model(&small(), 4).unwrap();
        let targets = SparsityConfig::uniform(0.5).targets(&reg, None).unwrap();
        let omp_masks = omp(&reg, &targets).unwrap();
        let trained = init_real_mask(&reg, &targets, &MaskHyper::default(), ThresholdScheme::PerMatrix).unwrap();
        for masks in [omp_masks, trained] {
            let ck = Checkpoint::new(Stage::Compressed, ModelState::new(reg.clone()), Some(masks));
            assert_eq!(roundtrip(&ck), ck);
        }
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let ck = Checkpoint::new(Stage::Init, ModelState::new(build_model(&small(), 1).unwrap()), None);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(extra.as_slice()).is_err());
        buf[0] = b'X';
        assert!(Checkpoint::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = Checkpoint::new(Stage::Finetuned, ModelState::new(build_model(&small(), 2).unwrap()), None);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}

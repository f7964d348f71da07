//! Versioned little-endian tensor container for model parameters and
//! prototype banks.
//!
//! Layout: magic `FGHC`, `u32` version, `u32` tensor count, then per tensor
//! a `u32` name length, the UTF-8 name, `u64` rows, `u64` cols, a `u8`
//! trainable flag and `rows * cols` `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Extractor, ModelParams, Param};
use crate::numkit::Matrix;
use crate::prototypes::PrototypeBank;

const MAGIC: &[u8; 4] = b"FGHC";
pub const VERSION: u32 = 1;
const PROTO_MEANS: &str = "proto.means";
const PROTO_COUNTS: &str = "proto.counts";
const EXTRACTOR_KEY: &str = "meta.extractor";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[Tensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.value.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.value.cols() as u64).to_le_bytes())?;
        w.write_all(&[t.trainable as u8])?;
        for v in t.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<Tensor>> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rows = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let cols = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let trainable = read_array::<1, _>(&mut r)?[0] != 0;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        out.push(Tensor {
            name,
            value: Matrix::from_vec(rows, cols, data)?,
            trainable,
        });
    }
    Ok(out)
}

fn extractor_tensor(e: &Extractor) -> Result<Tensor> {
    let bytes = serde_json::to_vec(e)?;
    Ok(Tensor {
        name: EXTRACTOR_KEY.into(),
        value: Matrix::from_vec(1, bytes.len(), bytes.into_iter().map(f64::from).collect())?,
        trainable: false,
    })
}

pub fn params_to_tensors(params: &ModelParams) -> Result<Vec<Tensor>> {
    let mut out = vec![extractor_tensor(&params.extractor())?];
    out.extend(params.iter().map(|p| Tensor {
        name: p.name.clone(),
        value: p.value.clone(),
        trainable: p.trainable,
    }));
    Ok(out)
}

pub fn params_from_tensors(tensors: Vec<Tensor>) -> Result<ModelParams> {
    let mut extractor = None;
    let mut entries = Vec::new();
    for t in tensors {
        if t.name == EXTRACTOR_KEY {
            let bytes: Vec<u8> = t.value.data().iter().map(|&v| v as u8).collect();
            extractor = Some(serde_json::from_slice::<Extractor>(&bytes)?);
        } else if !t.name.starts_with("proto.") {
            entries.push(Param {
                name: t.name,
                value: t.value,
                trainable: t.trainable,
            });
        }
    }
    let extractor = extractor.ok_or_else(|| Error::Format("checkpoint has no extractor record".into()))?;
    ModelParams::new(extractor, entries)
}

pub fn bank_to_tensors(bank: &PrototypeBank) -> Result<Vec<Tensor>> {
    let counts = bank.counts().iter().map(|&c| c as f64).collect();
    Ok(vec![
        Tensor {
            name: PROTO_MEANS.into(),
            value: bank.means().clone(),
            trainable: false,
        },
        Tensor {
            name: PROTO_COUNTS.into(),
            value: Matrix::from_vec(1, bank.num_classes(), counts)?,
            trainable: false,
        },
    ])
}

pub fn bank_from_tensors(tensors: &[Tensor]) -> Result<Option<PrototypeBank>> {
    let find = |n: &str| tensors.iter().find(|t| t.name == n);
    match (find(PROTO_MEANS), find(PROTO_COUNTS)) {
        (Some(m), Some(c)) => {
            let counts = c.value.data().iter().map(|&v| v as u64).collect();
            PrototypeBank::from_parts(m.value.clone(), counts).map(Some)
        }
        (None, None) => Ok(None),
        _ => Err(Error::Format("checkpoint has only half of a prototype bank".into())),
    }
}

pub fn save(path: &Path, params: &ModelParams, bank: Option<&PrototypeBank>) -> Result<()> {
    let mut tensors = params_to_tensors(params)?;
    if let Some(b) = bank {
        tensors.extend(bank_to_tensors(b)?);
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensors(file, &tensors)
}

pub fn load(path: &Path) -> Result<(ModelParams, Option<PrototypeBank>)> {
    let tensors = read_tensors(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let bank = bank_from_tensors(&tensors)?;
    Ok((params_from_tensors(tensors)?, bank))
}

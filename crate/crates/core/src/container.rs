//! Portable tensor container.
//!
//! A file is the 4-byte magic `COWT`, one version byte, then zero or more
//! blocks. Each block is a UTF-8 header line `name dtype dim0 dim1 ...\n`
//! followed by the raw little-endian element data. Supported dtypes are
//! `f32`, `f64` and `u8`. The format has no alignment, compression or
//! index; it is meant to be readable from any language in a few lines.

use std::fs;
use std::path::Path;

use crate::{CowError, Real, Result, Tensor};

pub const MAGIC: [u8; 4] = *b"COWT";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Block {
    fn dtype(&self) -> &'static str {
        match self {
            Block::F32(_) => "f32",
            Block::F64(_) => "f64",
            Block::U8 { .. } => "u8",
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Block::F32(t) => t.shape(),
            Block::F64(t) => t.shape(),
            Block::U8 { shape, .. } => shape,
        }
    }
}

/// An ordered, name-addressed collection of tensor blocks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    blocks: Vec<(String, Block)>,
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(|c| c.is_whitespace()) {
        return Err(CowError::InvalidArgument(format!(
            "block name {name:?} must be non-empty and contain no whitespace"
        )));
    }
    Ok(())
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|(n, _)| n.as_str())
    }

    pub fn push(&mut self, name: &str, block: Block) -> Result<()> {
        check_name(name)?;
        if self.get(name).is_some() {
            return Err(CowError::InvalidArgument(format!("duplicate block name {name:?}")));
        }
        self.blocks.push((name.to_string(), block));
        Ok(())
    }

    pub fn push_f64(&mut self, name: &str, t: &Tensor<f64>) -> Result<()> {
        self.push(name, Block::F64(t.clone()))
    }

    pub fn push_u8(&mut self, name: &str, shape: &[usize], data: Vec<u8>) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CowError::Shape(format!(
                "u8 block {name:?}: shape {shape:?} wants {numel} bytes, got {}",
                data.len()
            )));
        }
        self.push(name, Block::U8 { shape: shape.to_vec(), data })
    }

    /// Stores a generic tensor as f64 (exact for f32 and f64 inputs).
    pub fn push_real<T: Real>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        let data: Vec<f64> = t.data().iter().map(|v| v.to_f64().expect("real fits f64")).collect();
        self.push(name, Block::F64(Tensor::new(t.shape(), data)?))
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }

    pub fn get_f64(&self, name: &str) -> Result<&Tensor<f64>> {
        match self.get(name) {
            Some(Block::F64(t)) => Ok(t),
            Some(b) => Err(CowError::Validation(format!(
                "block {name:?} has dtype {} where f64 was expected",
                b.dtype()
            ))),
            None => Err(CowError::Validation(format!("missing block {name:?}"))),
        }
    }

    pub fn get_u8(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.get(name) {
            Some(Block::U8 { shape, data }) => Ok((shape, data)),
            Some(b) => Err(CowError::Validation(format!(
                "block {name:?} has dtype {} where u8 was expected",
                b.dtype()
            ))),
            None => Err(CowError::Validation(format!("missing block {name:?}"))),
        }
    }

    /// Reads an f64 block back into the requested scalar type.
    pub fn get_real<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let t = self.get_f64(name)?;
        let data: Vec<T> = t
            .data()
            .iter()
            .map(|&v| T::from_f64(v).ok_or_else(|| CowError::Numeric(format!("block {name:?}: {v} does not fit target type"))))
            .collect::<Result<_>>()?;
        Tensor::new(t.shape(), data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        for (name, block) in &self.blocks {
            let dims: Vec<String> = block.shape().iter().map(|d| d.to_string()).collect();
            let header = format!("{name} {} {}\n", block.dtype(), dims.join(" "));
            out.extend_from_slice(header.as_bytes());
            match block {
                Block::F32(t) => {
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Block::F64(t) => {
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Block::U8 { data, .. } => out.extend_from_slice(data),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: String| CowError::Parse { offset: offset as u64, message };
        if bytes.len() < 5 {
            return Err(parse(0, "file too short for magic and version".into()));
        }
        if bytes[0..4] != MAGIC {
            return Err(parse(0, format!("bad magic {:?}, expected {:?}", &bytes[0..4], MAGIC)));
        }
        if bytes[4] != VERSION {
            return Err(CowError::Version(bytes[4]));
        }
        let mut pos = 5usize;
        let mut container = Container::new();
        while pos < bytes.len() {
            let header_start = pos;
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| parse(header_start, "unterminated block header".into()))?;
            let header = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|e| parse(header_start, format!("header is not UTF-8: {e}")))?;
            pos += nl + 1;

            let mut fields = header.split_whitespace();
            let name = fields
                .next()
                .ok_or_else(|| parse(header_start, "empty block header".into()))?
                .to_string();
            let dtype = fields
                .next()
                .ok_or_else(|| parse(header_start, format!("block {name:?}: missing dtype")))?;
            let shape: Vec<usize> = fields
                .map(|f| {
                    f.parse::<usize>()
                        .map_err(|e| parse(header_start, format!("block {name:?}: bad dimension {f:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if shape.is_empty() {
                return Err(parse(header_start, format!("block {name:?}: missing shape")));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| parse(header_start, format!("block {name:?}: shape overflows")))?;
            let elem_size = match dtype {
                "f32" => 4,
                "f64" => 8,
                "u8" => 1,
                other => return Err(parse(header_start, format!("block {name:?}: unknown dtype {other:?}"))),
            };
            let byte_len = numel
                .checked_mul(elem_size)
                .ok_or_else(|| parse(header_start, format!("block {name:?}: size overflows")))?;
            if bytes.len() - pos < byte_len {
                return Err(parse(
                    pos,
                    format!(
                        "block {name:?}: truncated data, need {byte_len} bytes but only {} remain",
                        bytes.len() - pos
                    ),
                ));
            }
            let raw = &bytes[pos..pos + byte_len];
            let block = match dtype {
                "f32" => {
                    let data: Vec<f32> =
                        raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Block::F32(Tensor::new(&shape, data)?)
                }
                "f64" => {
                    let data: Vec<f64> =
                        raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Block::F64(Tensor::new(&shape, data)?)
                }
                _ => Block::U8 { shape: shape.clone(), data: raw.to_vec() },
            };
            pos += byte_len;
            container
                .push(&name, block)
                .map_err(|e| parse(header_start, format!("{e}")))?;
        }
        Ok(container)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

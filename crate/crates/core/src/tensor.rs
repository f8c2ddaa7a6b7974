//! Named dense tensors: the unit of exchange between clients and server.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Partition of model tensors. DP thresholds are computed per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Decoder,
    Shared,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Encoder, Group::Decoder, Group::Shared];

    /// Group membership is a function of the name prefix only.
    pub fn of(name: &str) -> Group {
        if name.starts_with("enc.") {
            Group::Encoder
        } else if name.starts_with("dec.") {
            Group::Decoder
        } else {
            Group::Shared
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::Shared => "shared",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named, shaped, row-major dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T = f32> {
    name: String,
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> NamedTensor<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let name = name.into();
        if shape.contains(&0) {
            return Err(Error::InvalidTensor {
                name,
                reason: format!("non-positive extent in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::InvalidTensor {
                name,
                reason: format!("shape {shape:?} holds {numel} values, got {}", values.len()),
            });
        }
        Ok(NamedTensor { name, shape, values })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(name, shape, vec![T::zero(); numel])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn group(&self) -> Group {
        Group::of(&self.name)
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    /// First non-finite element, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                name: self.name.clone(),
                index,
            }),
            None => Ok(()),
        }
    }

    /// Sum of absolute values, accumulated in f64 in ascending index order.
    pub fn l1_norm(&self) -> Result<f64> {
        self.check_finite()?;
        Ok(self.values.iter().map(|v| v.as_f64().abs()).sum())
    }

    fn ensure_compatible(&self, other: &Self, check_name: bool) -> Result<()> {
        if (check_name && self.name != other.name) || self.shape != other.shape {
            return Err(Error::TensorMismatch {
                left: self.name.clone(),
                left_shape: self.shape.clone(),
                right: other.name.clone(),
                right_shape: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise `self - other`; the result keeps `self`'s name and shape.
    pub fn diff(&self, other: &Self) -> Result<Self> {
        self.ensure_compatible(other, true)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(NamedTensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            values,
        })
    }

    /// `self + weight * t`, computed in f64 and stored back in `T`.
    pub fn weighted_accumulate(&self, weight: f64, t: &Self) -> Result<Self> {
        self.ensure_compatible(t, false)?;
        if !weight.is_finite() {
            return Err(Error::InvalidTensor {
                name: self.name.clone(),
                reason: format!("non-finite accumulation weight {weight}"),
            });
        }
        let values = self
            .values
            .iter()
            .zip(&t.values)
            .map(|(&a, &b)| T::of(a.as_f64() + weight * b.as_f64()))
            .collect();
        Ok(NamedTensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            values,
        })
    }

    pub fn cast<U: Scalar>(&self) -> NamedTensor<U> {
        NamedTensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    /// Bytes taken by this tensor's binary record.
    pub fn record_len(&self) -> usize {
        record_len(&self.name, &self.shape)
    }

    /// Binary record: name length (u32 LE), UTF-8 name, rank (u32 LE),
    /// extents (u32 LE each), values (f32 LE).
    pub fn write_record<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.name.len() as u32).to_le_bytes())?;
        w.write_all(self.name.as_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }
}

impl NamedTensor<f32> {
    /// Reads one record written by [`NamedTensor::write_record`].
    /// Returns `Ok(None)` at a clean end of stream.
    pub fn read_record<R: Read>(r: &mut R) -> Result<Option<Self>> {
        let mut word = [0u8; 4];
        match r.read_exact(&mut word) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(Error::Checkpoint(e.to_string())),
        }
        let truncated = |e: std::io::Error| Error::Checkpoint(format!("truncated record: {e}"));
        let name_len = u32::from_le_bytes(word) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        r.read_exact(&mut word).map_err(truncated)?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word).map_err(truncated)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(truncated)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        NamedTensor::new(name, shape, values).map(Some)
    }
}

/// Serialized size of a record with the given name and shape.
pub fn record_len(name: &str, shape: &[usize]) -> usize {
    4 + name.len() + 4 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

/// Header bytes of a record (everything except the values).
pub fn record_header_len(name: &str, rank: usize) -> usize {
    4 + name.len() + 4 + 4 * rank
}

/// Per-tensor change between two checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub name: String,
    pub norm: f64,
    pub param_count: usize,
    pub group: Group,
}

impl DeltaRecord {
    pub fn between<T: Scalar>(current: &NamedTensor<T>, previous: &NamedTensor<T>) -> Result<Self> {
        let d = current.diff(previous)?;
        Ok(DeltaRecord {
            name: current.name.clone(),
            norm: d.l1_norm()?,
            param_count: current.param_count(),
            group: current.group(),
        })
    }
}

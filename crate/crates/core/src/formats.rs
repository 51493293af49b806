//! Point clouds and the two little-endian binary file formats.
//!
//! PCF v1 (point cloud):
//!
//! ```text
//! "PCF1" | u32 n | u32 c | i32 label (-1 = none) | n*c f32, row-major
//! ```
//!
//! ECW v1 (weights):
//!
//! ```text
//! "ECW1" | u32 tensor_count
//!        | per tensor: u16 name_len | name (UTF-8) | u8 rank | rank * u32 dims | f32 payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::WeightStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PCF_MAGIC: [u8; 4] = *b"PCF1";
pub const ECW_MAGIC: [u8; 4] = *b"ECW1";
/// Labels index the 40 object categories.
pub const NUM_LABELS: u32 = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    /// `[n×c]` coordinates.
    pub features: Tensor,
    pub label: Option<u32>,
}

impl PointCloud {
    pub fn new(features: Tensor, label: Option<u32>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Format(format!("point cloud must be [n, c], got {:?}", features.shape())));
        }
        if features.dim(0) < 2 {
            return Err(Error::TooFewPoints);
        }
        if !features.is_finite() {
            return Err(Error::Format("non-finite coordinate".into()));
        }
        if let Some(l) = label {
            if l >= NUM_LABELS {
                return Err(Error::Format(format!("label {l} outside [0, {NUM_LABELS})")));
            }
        }
        Ok(PointCloud { features, label })
    }

    pub fn num_points(&self) -> usize {
        self.features.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.features.dim(1)
    }

    /// Rows reordered so that row `p` is the old row `perm[p]`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        let c = self.dim();
        let features = Tensor::from_fn(&[self.num_points(), c], |f| self.features.data()[perm[f / c] * c + f % c]);
        PointCloud {
            features,
            label: self.label,
        }
    }
}

/// Centres the cloud on its centroid and divides every coordinate by the
/// largest absolute coordinate, so all values land in `[-1, 1]` with the
/// aspect ratio preserved.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud> {
    let (n, c) = (cloud.num_points(), cloud.dim());
    let data = cloud.features.data();
    let mut centroid = vec![0.0f64; c];
    for row in data.chunks(c) {
        for (m, &v) in centroid.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    let centroid: Vec<f32> = centroid.iter().map(|s| (s / n as f64) as f32).collect();
    let mut out: Vec<f32> = data
        .chunks(c)
        .flat_map(|row| row.iter().zip(&centroid).map(|(v, m)| v - m))
        .collect();
    let scale = out.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::DegenerateCloud);
    }
    for v in &mut out {
        *v /= scale;
    }
    PointCloud::new(Tensor::new(vec![n, c], out)?, cloud.label)
}

/// `n` points uniform in `[-1, 1)³`.
pub fn synth_cloud(n: usize, rng: &mut Rng) -> PointCloud {
    PointCloud {
        features: Tensor::from_fn(&[n, 3], |_| rng.uniform(-1.0, 1.0)),
        label: None,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(len)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn header<const N: usize>(&mut self) -> Result<[u8; N]> {
        self.take(N).map(|s| s.try_into().unwrap()).ok_or(Error::TruncatedHeader)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.header::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.header()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.header()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.header()?))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        if self.buf.len() < 4 {
            // Distinguish an empty or stub file from a foreign one.
            if expected.starts_with(self.buf) {
                return Err(Error::TruncatedHeader);
            }
            return Err(Error::BadMagic {
                expected,
                found: self.buf.to_vec(),
            });
        }
        let found = self.header::<4>()?;
        if found != expected {
            return Err(Error::BadMagic {
                expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let raw = self.take(bytes).ok_or(Error::TruncatedPayload {
            expected: bytes,
            found: self.remaining(),
        })?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            extra => Err(Error::Format(format!("{extra} trailing bytes"))),
        }
    }
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_pcf(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + cloud.features.byte_len());
    out.extend_from_slice(&PCF_MAGIC);
    out.extend_from_slice(&(cloud.num_points() as u32).to_le_bytes());
    out.extend_from_slice(&(cloud.dim() as u32).to_le_bytes());
    let label = cloud.label.map_or(-1, |l| l as i32);
    out.extend_from_slice(&label.to_le_bytes());
    put_f32s(&mut out, cloud.features.data());
    out
}

pub fn decode_pcf(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(PCF_MAGIC)?;
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let label = match r.i32()? {
        -1 => None,
        l if l >= 0 => Some(l as u32),
        l => return Err(Error::Format(format!("invalid label {l}"))),
    };
    if n == 0 || c == 0 {
        return Err(Error::Format(format!("empty cloud shape [{n}, {c}]")));
    }
    let count = n
        .checked_mul(c)
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let data = r.f32s(count)?;
    r.finish()?;
    PointCloud::new(Tensor::new(vec![n, c], data)?, label)
}

pub fn write_pcf(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    Ok(fs::write(path, encode_pcf(cloud))?)
}

pub fn read_pcf(path: impl AsRef<Path>) -> Result<PointCloud> {
    decode_pcf(&fs::read(path)?)
}

pub fn encode_ecw(weights: &WeightStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&ECW_MAGIC);
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, t) in weights.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large for {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_ecw(bytes: &[u8]) -> Result<WeightStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(ECW_MAGIC)?;
    let count = r.u32()?;
    let mut store = WeightStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.take(name_len).ok_or(Error::TruncatedHeader)?;
        let name = std::str::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        if rank == 0 {
            return Err(Error::Format(format!("tensor {name} has rank 0")));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape.contains(&0) {
            return Err(Error::Format(format!("tensor {name} has a zero dimension {shape:?}")));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data = r.f32s(count)?;
        if store.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;
    Ok(store)
}

pub fn write_ecw(path: impl AsRef<Path>, weights: &WeightStore) -> Result<()> {
    Ok(fs::write(path, encode_ecw(weights)?)?)
}

pub fn read_ecw(path: impl AsRef<Path>) -> Result<WeightStore> {
    decode_ecw(&fs::read(path)?)
}

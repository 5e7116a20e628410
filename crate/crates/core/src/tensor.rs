//! Dense row-major `f64` tensors and the MGT1 binary container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{dim_err, Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
///
/// A rank-0 tensor (empty shape) holds exactly one value and is used for scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Parameter(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {numel} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() requires a single element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(dim_err("reshape", &self.shape, shape));
        }
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copy of the `index`-th slice along the leading axis.
    pub fn slice_outer(&self, index: usize) -> Result<Self> {
        let (&outer, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::Contract("slice_outer on a scalar".into()))?;
        if index >= outer {
            return Err(Error::Contract(format!(
                "index {index} out of range for leading extent {outer}"
            )));
        }
        let inner: usize = rest.iter().product();
        Self::new(
            rest.to_vec(),
            self.data[index * inner..(index + 1) * inner].to_vec(),
        )
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(dim_err("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    /// Encode as an MGT1 byte stream.
    pub fn write_mgt<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MGT_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            let e = u32::try_from(e)
                .map_err(|_| Error::Format(format!("extent {e} does not fit in u32")))?;
            w.write_all(&e.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Decode an MGT1 byte stream; trailing bytes are rejected.
    pub fn read_mgt<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated MGT1 header".into()))?;
        if &magic != MGT_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {magic:?}, expected `MGT1`"
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Format(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("payload shorter than shape {shape:?}")))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after MGT1 payload".into()));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_mgt(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::read_mgt(BufReader::new(f))
    }
}

pub const MGT_MAGIC: &[u8; 4] = b"MGT1";

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated MGT1 header".into()))?;
    Ok(u32::from_le_bytes(b))
}

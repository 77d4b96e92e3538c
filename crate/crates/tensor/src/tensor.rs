use std::fmt;
use std::io::{Read, Write};

use crate::error::{dim_err, Result, TensorError};
use crate::real::Real;

/// Dense row-major tensor. Image-like data uses N, C, H, W order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Unpacks a rank-4 shape as (n, c, h, w).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => dim_err(format!("expected rank-4 tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return dim_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return dim_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Contiguous channel range `[start, start+len)` of a rank-4 tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if start + len > c {
            return dim_err(format!("channel slice {start}+{len} exceeds {c}"));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Ok(Self {
            shape: vec![n, len, h, w],
            data,
        })
    }

    /// Writes the debug dump format: `TNSR`, u32 version, u32 rank, u64 dims, f32 data.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(b"TNSR")?;
        out.write_all(&1u32.to_le_bytes())?;
        out.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut input: R, name: &str) -> Result<Self> {
        let mut offset = 0u64;
        let mut take = |buf: &mut [u8], what: &str| -> Result<u64> {
            input.read_exact(buf).map_err(|_| TensorError::Parse {
                file: name.to_string(),
                offset,
                msg: format!("truncated while reading {what}"),
            })?;
            let at = offset;
            offset += buf.len() as u64;
            Ok(at)
        };
        let mut magic = [0u8; 4];
        let at = take(&mut magic, "magic")?;
        if &magic != b"TNSR" {
            return Err(TensorError::Parse {
                file: name.to_string(),
                offset: at,
                msg: "bad magic".into(),
            });
        }
        let mut word = [0u8; 4];
        let at = take(&mut word, "version")?;
        if u32::from_le_bytes(word) != 1 {
            return Err(TensorError::Parse {
                file: name.to_string(),
                offset: at,
                msg: format!("unsupported version {}", u32::from_le_bytes(word)),
            });
        }
        take(&mut word, "rank")?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut dword = [0u8; 8];
        for _ in 0..rank {
            take(&mut dword, "dims")?;
            shape.push(u64::from_le_bytes(dword) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            take(&mut word, "data")?;
            data.push(T::lit(f32::from_le_bytes(word) as f64));
        }
        Tensor::new(shape, data)
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn dump_round_trip() {
        let t = Tensor::<f32>::from_fn(&[1, 2, 3, 2], |i| i as f32 * 0.5 - 1.0);
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TNSR");
        assert_eq!(buf.len(), 4 + 4 + 4 + 4 * 8 + 12 * 4);
        let back = Tensor::<f32>::read_dump(&buf[..], "mem").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_dump_reports_offset() {
        let t = Tensor::<f32>::zeros(&[3]);
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        match Tensor::<f32>::read_dump(&buf[..], "x.tnsr") {
            Err(TensorError::Parse { file, offset, .. }) => {
                assert_eq!(file, "x.tnsr");
                assert_eq!(offset, 20 + 8);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

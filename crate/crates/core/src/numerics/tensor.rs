//! Dense row-major fp32 tensor. Clones are cheap (shared storage); mutation
//! copies on write, so values already captured by an autodiff graph never
//! change underneath it.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::{next_normal, next_uniform, SeedRng};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Default for Tensor {
    fn default() -> Tensor {
        Tensor::zeros(&[0])
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(data.len(), n, "data length {} != shape product {}", data.len(), n);
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![0.0; n]) }
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; n]) }
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(vec![1], vec![value])
    }

    pub fn randn(shape: &[usize], std: f32, rng: &mut SeedRng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| next_normal(rng) * std).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut SeedRng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| next_uniform(rng, lo, hi)).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.len(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor { shape, data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|v| v * c)
    }

    /// In-place accumulate; used by gradient accumulation in a fixed order.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += *s;
        }
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Row-major offset of a 2-D index.
    pub fn at2(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Serialize: u32 LE rank, u32 LE extents, then fp32 LE values.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.len() * 4);
        for v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|e| Error::io("tensor header", e))?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            r.read_exact(&mut b4).map_err(|e| Error::io("tensor extents", e))?;
            let e = u32::from_le_bytes(b4) as usize;
            if e == 0 {
                return Err(Error::Format("zero extent in tensor header".into()));
            }
            count = count
                .checked_mul(e)
                .ok_or_else(|| Error::Format("tensor extent overflow".into()))?;
            shape.push(e);
        }
        if count > (1 << 30) {
            return Err(Error::Format(format!("tensor payload too large ({count} values)")));
        }
        let mut payload = vec![0u8; count * 4];
        r.read_exact(&mut payload).map_err(|e| Error::io("tensor payload", e))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)
            .map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Tensor> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
        let mut r = std::io::BufReader::new(f);
        Tensor::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn roundtrip_serialization_is_bit_exact() {
        let mut rng = stream(3, "ser");
        let t = Tensor::randn(&[3, 5, 2], 1.0, &mut rng);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(t.shape(), back.shape());
        for (a, b) in t.data().iter().zip(back.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout_matches_contract() {
        let t = Tensor::from_vec(vec![2, 3], vec![0.0; 6]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 2 * 4 + 6 * 4);
        assert_eq!(&buf[0..4], &2u32.to_le_bytes());
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Tensor::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn copy_on_write_leaves_clones_untouched(){
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]);
        let mut b = a.clone();
        b.data_mut()[0] = 9.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 9.0);
    }
}

//! Dense row-major tensors and the blob format used by checkpoints.

use std::fmt;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type for tensors. Implemented for `f32` (training) and `f64`
/// (gradient and oracle verification).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn c(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose shape is known to match; panics otherwise.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged or empty rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::c(x)).collect())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::c(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Copies rows `idx` of a matrix view into a new `[idx.len(), cols]` tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_parts(vec![idx.len(), c], data)
    }
}

/// Unit-normalizes a vector. Fails on a zero vector.
pub fn l2_normalize<T: Real>(v: &[T]) -> Result<Vec<T>> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm <= T::zero() || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}

/// `c[m,n] = a[m,k] * b[k,n]` on flat row-major slices.
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_bt_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn matmul_at_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out = &mut c[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

// Blob stream: name (u64 length + UTF-8), rank (u64), extents (u64 each),
// data (f32 each), all little-endian.

pub fn write_blob<W: Write, T: Real>(w: &mut W, name: &str, t: &Tensor<T>) -> Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &x in t.data() {
        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated tensor blob".into())
    } else {
        Error::Io(e)
    }
}

const MAX_NAME: u64 = 1 << 16;
const MAX_RANK: u64 = 8;
const MAX_ELEMS: u64 = 1 << 32;

pub fn read_blob<R: Read, T: Real>(r: &mut R) -> Result<(String, Tensor<T>)> {
    let name_len = read_u64(r)?;
    if name_len > MAX_NAME {
        return Err(Error::Format(format!("blob name length {name_len} too large")));
    }
    let mut name = vec![0u8; name_len as usize];
    r.read_exact(&mut name).map_err(truncated)?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("blob name is not UTF-8".into()))?;
    let rank = read_u64(r)?;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("blob {name}: rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut n: u64 = 1;
    for _ in 0..rank {
        let e = read_u64(r)?;
        n = n.saturating_mul(e);
        shape.push(e as usize);
    }
    if n > MAX_ELEMS {
        return Err(Error::Format(format!("blob {name}: {n} elements too large")));
    }
    let mut raw = vec![0u8; n as usize * 4];
    r.read_exact(&mut raw).map_err(truncated)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| T::c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("blob {name}: {e}")))?;
    Ok((name, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn normalize_three_four_five() {
        let v = l2_normalize(&[3.0f64, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert!(matches!(l2_normalize(&[0.0f64, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn unit_vector_is_fixed_point() {
        let v = l2_normalize(&[0.0f64, 1.0, 0.0]).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn matmul_kernels_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        matmul_into(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // b^T stored as 2x3
        let bt = [1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0; 4];
        matmul_bt_into(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        // a^T (3x2) * a (2x3) via the transposed kernel
        let mut g = [0.0; 9];
        matmul_at_into(&a, &a, &mut g, 2, 3, 3);
        assert_eq!(g[0], 1.0 + 16.0);
        assert_eq!(g[4], 4.0 + 25.0);
    }

    #[test]
    fn blob_round_trip() {
        let t = Tensor::<f32>::new(vec![2, 2], vec![1.5, -2.0, 0.25, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_blob(&mut buf, "w", &t).unwrap();
        assert_eq!(buf.len(), 8 + 1 + 8 + 16 + 16);
        let (name, back) = read_blob::<_, f32>(&mut buf.as_slice()).unwrap();
        assert_eq!(name, "w");
        assert_eq!(back, t);
        assert!(read_blob::<_, f32>(&mut &buf[..buf.len() - 1]).is_err());
    }
}

//! Dense row-major tensors of 64-bit reals. The complex variant stores
//! interleaved (re, im) pairs in the same flat buffer.

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Dtype {
    Real,
    Complex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: Dtype,
    data: Vec<f64>,
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), dtype: Dtype::Real, data: vec![0.0; product(shape)] }
    }

    pub fn zeros_complex(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), dtype: Dtype::Complex, data: vec![0.0; 2 * product(shape)] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        Tensor { shape: shape.to_vec(), dtype: Dtype::Real, data: vec![v; product(shape)] }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], dtype: Dtype::Real, data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if data.len() != product(shape) {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), dtype: Dtype::Real, data })
    }

    /// Complex tensor from an interleaved (re, im, re, im, ...) buffer.
    pub fn from_vec_complex(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if data.len() != 2 * product(shape) {
            return Err(Error::Shape(format!(
                "interleaved length {} does not match complex shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), dtype: Dtype::Complex, data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for i in 0..t.numel() {
            t.data[i] = f(&idx);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut CounterRng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            *v = std * rng.normal();
        }
        t
    }

    /// Complex tensor with i.i.d. normal real and imaginary parts.
    pub fn randn_complex(shape: &[usize], std: f64, rng: &mut CounterRng) -> Tensor {
        let mut t = Tensor::zeros_complex(shape);
        for v in t.data.iter_mut() {
            *v = std * rng.normal();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn is_real(&self) -> bool {
        self.dtype == Dtype::Real
    }

    /// Logical element count (complex elements count once).
    pub fn numel(&self) -> usize {
        product(&self.shape)
    }

    /// Flat storage: real values, or interleaved (re, im) pairs.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for ax in (0..self.shape.len().saturating_sub(1)).rev() {
            s[ax] = s[ax + 1] * self.shape[ax + 1];
        }
        s
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert!(self.is_real());
        let strides = self.strides();
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        if product(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        let mut t = self.clone();
        t.shape = shape.to_vec();
        Ok(t)
    }

    fn check_same(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape || self.dtype != other.dtype {
            return Err(Error::Shape(format!(
                "{op}: {:?}/{:?} vs {:?}/{:?}",
                self.shape, self.dtype, other.shape, other.dtype
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "add")?;
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "sub")?;
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        Ok(out)
    }

    /// Elementwise product of real tensors.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "mul")?;
        if !self.is_real() {
            return Err(Error::Shape("mul expects real tensors".into()));
        }
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
        Ok(out)
    }

    /// Multiply all stored values (real or complex) by a real scalar.
    pub fn scale(&self, k: f64) -> Tensor {
        let mut out = self.clone();
        for a in out.data.iter_mut() {
            *a *= k;
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        debug_assert!(self.is_real());
        let mut out = self.clone();
        for a in out.data.iter_mut() {
            *a = f(*a);
        }
        out
    }

    pub fn conj(&self) -> Tensor {
        let mut out = self.clone();
        if out.dtype == Dtype::Complex {
            for pair in out.data.chunks_exact_mut(2) {
                pair[1] = -pair[1];
            }
        }
        out
    }

    pub fn to_complex(&self) -> Tensor {
        match self.dtype {
            Dtype::Complex => self.clone(),
            Dtype::Real => {
                let mut data = vec![0.0; 2 * self.numel()];
                for (i, v) in self.data.iter().enumerate() {
                    data[2 * i] = *v;
                }
                Tensor { shape: self.shape.clone(), dtype: Dtype::Complex, data }
            }
        }
    }

    pub fn real_part(&self) -> Tensor {
        match self.dtype {
            Dtype::Real => self.clone(),
            Dtype::Complex => {
                let data: Vec<f64> = self.data.chunks_exact(2).map(|p| p[0]).collect();
                Tensor { shape: self.shape.clone(), dtype: Dtype::Real, data }
            }
        }
    }

    pub fn sum(&self) -> f64 {
        debug_assert!(self.is_real());
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// Sum of squared stored values; for complex tensors this is the sum of
    /// squared moduli.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// ||a - b|| / ||b||, the relative L2 error against reference `b`.
    pub fn rel_l2(&self, reference: &Tensor) -> Result<f64> {
        self.check_same(reference, "rel_l2")?;
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let denom = reference.sq_norm().sqrt();
        if denom == 0.0 {
            return Ok(if diff == 0.0 { 0.0 } else { f64::INFINITY });
        }
        Ok(diff.sqrt() / denom)
    }
}

#[derive(Serialize, Deserialize)]
struct PayloadHeader {
    shape: Vec<usize>,
    dtype: String,
}

impl Tensor {
    /// Write in the interchange format: one-line JSON header
    /// `{"shape":[...],"dtype":"f32"}`, a newline, then the row-major values
    /// as little-endian 32-bit floats. Complex tensors are not serializable
    /// directly; view them as real with a trailing axis of 2 first.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if !self.is_real() {
            return Err(Error::Shape(
                "serialize complex tensors via as_real_pairs()".into(),
            ));
        }
        let header = PayloadHeader { shape: self.shape.clone(), dtype: "f32".into() };
        let mut line = serde_json::to_string(&header)?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
            if line.len() > 1 << 16 {
                return Err(Error::Shape("tensor header too long".into()));
            }
        }
        let header: PayloadHeader = serde_json::from_slice(&line)?;
        if header.dtype != "f32" {
            return Err(Error::Shape(format!("unsupported dtype {:?}", header.dtype)));
        }
        let n = product(&header.shape);
        let mut buf = vec![0u8; 4 * n];
        r.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(Tensor { shape: header.shape, dtype: Dtype::Real, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let mut f = std::fs::File::open(path)?;
        Tensor::read_from(&mut f)
    }

    /// Complex tensor viewed as real with a trailing (re, im) axis of 2.
    pub fn as_real_pairs(&self) -> Result<Tensor> {
        if self.is_real() {
            return Err(Error::Shape("as_real_pairs expects a complex tensor".into()));
        }
        let mut shape = self.shape.clone();
        shape.push(2);
        Ok(Tensor { shape, dtype: Dtype::Real, data: self.data.clone() })
    }

    /// Inverse of `as_real_pairs`.
    pub fn from_real_pairs(t: &Tensor) -> Result<Tensor> {
        if !t.is_real() || t.shape.last() != Some(&2) {
            return Err(Error::Shape(
                "from_real_pairs expects a real tensor with trailing axis 2".into(),
            ));
        }
        let shape = t.shape[..t.shape.len() - 1].to_vec();
        Ok(Tensor { shape, dtype: Dtype::Complex, data: t.data.clone() })
    }
}

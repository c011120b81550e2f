//! Dense 5-D feature maps in fixed `(b, t, c, h, w)` row-major order.

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::KernelError;

/// Floating-point element type a tensor can hold.
///
/// `f32` is the working precision. `f64` exists so equivalence checks can be
/// run with a much tighter tolerance.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: Dtype;

    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite literal")
    }

    fn widen(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn cast_f32(v: f32) -> Self;

    fn write_le(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn cast_f32(v: f32) -> Self {
        v
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn cast_f32(v: f32) -> Self {
        f64::from(v)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_of(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => f.write_str("f32"),
            Dtype::F64 => f.write_str("f64"),
        }
    }
}

/// Extents of a 5-D feature map: batch, frames, channels, rows, columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape5 {
    pub b: usize,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub fn new(b: usize, t: usize, c: usize, h: usize, w: usize) -> Result<Self, KernelError> {
        let shape = Shape5 { b, t, c, h, w };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.dims().contains(&0) {
            return Err(KernelError::InvalidShape(format!("zero extent in {self}")));
        }
        self.dims()
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| KernelError::InvalidShape(format!("element count of {self} overflows")))?;
        Ok(())
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.b, self.t, self.c, self.h, self.w]
    }

    pub fn numel(&self) -> usize {
        self.b * self.t * self.c * self.h * self.w
    }

    /// Length of the merged batch×frames axis.
    pub fn bt(&self) -> usize {
        self.b * self.t
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn with_b(self, b: usize) -> Self {
        Shape5 { b, ..self }
    }

    pub fn with_t(self, t: usize) -> Self {
        Shape5 { t, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape5 { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape5 { h, w, ..self }
    }

    pub fn offset(&self, b: usize, t: usize, c: usize, h: usize, w: usize) -> usize {
        (((b * self.t + t) * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}, {}]", self.b, self.t, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape5,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape5) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.numel()] }
    }

    pub fn full(shape: Shape5, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self, KernelError> {
        if data.len() != shape.numel() {
            return Err(KernelError::ShapeMismatch(format!(
                "{} elements for shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape5, mut f: impl FnMut([usize; 5]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.b {
            for t in 0..shape.t {
                for c in 0..shape.c {
                    for h in 0..shape.h {
                        for w in 0..shape.w {
                            data.push(f([b, t, c, h, w]));
                        }
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Seeded standard-normal tensor.
    pub fn randn(shape: Shape5, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel())
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor { shape, data }
    }

    /// Seeded tensor with entries uniform in `[-1, 1)`.
    pub fn rand_uniform(shape: Shape5, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel()).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn nbytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }

    pub fn at(&self, idx: [usize; 5]) -> T {
        self.data[self.shape.offset(idx[0], idx[1], idx[2], idx[3], idx[4])]
    }

    pub fn set(&mut self, idx: [usize; 5], value: T) {
        let off = self.shape.offset(idx[0], idx[1], idx[2], idx[3], idx[4]);
        self.data[off] = value;
    }

    /// Reinterpret the buffer under a new shape, reusing its allocation when
    /// capacity allows. Contents are unspecified afterwards.
    pub(crate) fn reshape_for_write(&mut self, shape: Shape5) {
        self.shape = shape;
        self.data.resize(shape.numel(), T::zero());
    }

    pub(crate) fn empty_with_capacity(elems: usize) -> Self {
        Tensor {
            shape: Shape5 { b: 1, t: 1, c: 1, h: 1, w: 1 },
            data: Vec::with_capacity(elems.max(1)),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// `self - scale * other`, elementwise.
    pub fn sub_scaled(&mut self, other: &Tensor<T>, scale: T) -> Result<(), KernelError> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a - scale * b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Tensor<T>) -> Result<(), KernelError> {
        if self.shape != other.shape {
            return Err(KernelError::ShapeMismatch(format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::of(v.widen())).collect() }
    }

    /// Frames `[start, start + len)` of every batch entry.
    pub fn narrow_t(&self, start: usize, len: usize) -> Result<Self, KernelError> {
        if len == 0 || start + len > self.shape.t {
            return Err(KernelError::ShapeMismatch(format!(
                "frame window {start}+{len} outside t={}",
                self.shape.t
            )));
        }
        let shape = self.shape.with_t(len);
        let fl = self.shape.frame_len();
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..self.shape.b {
            let base = (b * self.shape.t + start) * fl;
            data.extend_from_slice(&self.data[base..base + len * fl]);
        }
        Ok(Tensor { shape, data })
    }

    /// Write `part` into frames `[start, start + part.t)`.
    pub fn write_t(&mut self, start: usize, part: &Tensor<T>) -> Result<(), KernelError> {
        let ps = part.shape;
        if ps.b != self.shape.b
            || ps.c != self.shape.c
            || ps.h != self.shape.h
            || ps.w != self.shape.w
            || start + ps.t > self.shape.t
        {
            return Err(KernelError::ShapeMismatch(format!(
                "cannot place {ps} at frame {start} of {}",
                self.shape
            )));
        }
        let fl = ps.frame_len();
        for b in 0..ps.b {
            let dst = (b * self.shape.t + start) * fl;
            let src = b * ps.t * fl;
            self.data[dst..dst + ps.t * fl].copy_from_slice(&part.data[src..src + ps.t * fl]);
        }
        Ok(())
    }

    /// Concatenate along the batch axis.
    pub fn cat_b(parts: &[&Tensor<T>]) -> Result<Self, KernelError> {
        let first = parts.first().ok_or_else(|| KernelError::ShapeMismatch("empty batch concat".into()))?;
        let mut shape = first.shape;
        shape.b = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.with_b(1) != first.shape.with_b(1) {
                return Err(KernelError::ShapeMismatch(format!("{} vs {}", p.shape, first.shape)));
            }
            shape.b += p.shape.b;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape, data })
    }

    /// Batch entries `[start, start + len)`.
    pub fn narrow_b(&self, start: usize, len: usize) -> Result<Self, KernelError> {
        if len == 0 || start + len > self.shape.b {
            return Err(KernelError::ShapeMismatch(format!(
                "batch window {start}+{len} outside b={}",
                self.shape.b
            )));
        }
        let per = self.shape.t * self.shape.frame_len();
        Ok(Tensor {
            shape: self.shape.with_b(len),
            data: self.data[start * per..(start + len) * per].to_vec(),
        })
    }

    /// SHA-256 over the little-endian element bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(self.nbytes());
        for &v in &self.data {
            v.write_le(&mut bytes);
        }
        let mut hasher = Sha256::new();
        hasher.update(format!("{}:{}", T::DTYPE, self.shape).as_bytes());
        hasher.update(&bytes);
        hex::encode(hasher.finalize())
    }
}

/// Cosine similarity of two tensors over their flattened elements.
pub fn cosine_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, KernelError> {
    a.expect_same_shape(b)?;
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x.widen(), y.widen());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(KernelError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Largest elementwise absolute difference.
pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, KernelError> {
    a.expect_same_shape(b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .fold(0.0f64, |m, (&x, &y)| m.max((x.widen() - y.widen()).abs())))
}

/// Max absolute difference normalised by the reference's largest magnitude.
///
/// Elementwise relative error is unstable near zero crossings, so the
/// reference's infinity norm is the denominator.
pub fn max_rel_error<T: Scalar>(candidate: &Tensor<T>, reference: &Tensor<T>) -> Result<f64, KernelError> {
    let diff = max_abs_diff(candidate, reference)?;
    let scale = reference.max_abs().widen();
    if scale == 0.0 {
        return Ok(diff);
    }
    Ok(diff / scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(b: usize, t: usize, c: usize, h: usize, w: usize) -> Shape5 {
        Shape5::new(b, t, c, h, w).unwrap()
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(Shape5::new(1, 0, 1, 1, 1).is_err());
        assert!(Shape5::new(usize::MAX, 2, 2, 1, 1).is_err());
    }

    #[test]
    fn offsets_are_row_major() {
        let s = shape(2, 3, 4, 5, 6);
        assert_eq!(s.offset(0, 0, 0, 0, 1), 1);
        assert_eq!(s.offset(0, 0, 0, 1, 0), 6);
        assert_eq!(s.offset(0, 0, 1, 0, 0), 30);
        assert_eq!(s.offset(0, 1, 0, 0, 0), 120);
        assert_eq!(s.offset(1, 0, 0, 0, 0), 360);
    }

    #[test]
    fn cosine_of_self_and_negation() {
        let x = Tensor::<f64>::randn(shape(1, 2, 3, 4, 4), 7);
        assert!((cosine_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&x, &x.neg()).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_orthogonal_one_hots() {
        let s = shape(1, 1, 2, 2, 2);
        let mut e1 = Tensor::<f32>::zeros(s);
        let mut e2 = Tensor::<f32>::zeros(s);
        e1.set([0, 0, 0, 0, 0], 1.0);
        e2.set([0, 0, 1, 1, 1], 1.0);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
    }

    #[test]
    fn cosine_rejects_zero_tensor() {
        let s = shape(1, 1, 1, 2, 2);
        let z = Tensor::<f32>::zeros(s);
        let x = Tensor::<f32>::full(s, 1.0);
        assert!(matches!(cosine_similarity(&z, &x), Err(KernelError::ZeroNorm)));
        assert!(matches!(cosine_similarity(&x, &z), Err(KernelError::ZeroNorm)));
    }

    #[test]
    fn frame_window_round_trip() {
        let x = Tensor::<f32>::randn(shape(2, 5, 3, 2, 2), 1);
        let mut y = Tensor::zeros(x.shape());
        y.write_t(0, &x.narrow_t(0, 2).unwrap()).unwrap();
        y.write_t(2, &x.narrow_t(2, 3).unwrap()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn checksum_tracks_content() {
        let x = Tensor::<f32>::randn(shape(1, 2, 2, 2, 2), 3);
        let mut y = x.clone();
        assert_eq!(x.checksum(), y.checksum());
        y.set([0, 1, 1, 1, 1], 0.5);
        assert_ne!(x.checksum(), y.checksum());
    }
}

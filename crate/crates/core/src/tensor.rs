//! Dense row-major `f64` tensor and its JSON file format.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(
                "tensor",
                format!("zero-sized dimension in {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities.
    pub fn new_finite(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Tensor::new(shape, data)?;
        if !t.is_finite() {
            return Err(Error::NonFinite("tensor data".into()));
        }
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "zero-sized dimension in {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(&mut f).collect()).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
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

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of trailing-axis rows, i.e. `numel / last_dim`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    /// Row `i` of the tensor viewed as `[rows, last_dim]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim(
                "transpose",
                format!("expected rank 2, got {:?}", self.shape),
            ));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Columns `start..start+len` of the tensor viewed as `[rows, last_dim]`.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = self.last_dim();
        if start + len > c || len == 0 {
            return Err(Error::dim(
                "narrow_last",
                format!("range {start}..{} outside last dim {c}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(self.rows() * len);
        for r in 0..self.rows() {
            data.extend_from_slice(&self.data[r * c + start..r * c + start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Tensor::new(shape, data)
    }

    /// Concatenates along the trailing axis; all leading shapes must agree.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_last", "nothing to concatenate"))?;
        let lead = &first.shape[..first.rank() - 1];
        for p in parts {
            if &p.shape[..p.rank() - 1] != lead {
                return Err(Error::shape("concat_last", &first.shape, &p.shape));
            }
        }
        let rows = first.rows();
        let total: usize = parts.iter().map(|p| p.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::new(shape, data)
    }

    /// Sub-tensor `start..start+len` along the leading axis.
    pub fn narrow_first(&self, start: usize, len: usize) -> Result<Tensor> {
        let d0 = self.shape[0];
        if start + len > d0 || len == 0 {
            return Err(Error::dim(
                "narrow_first",
                format!("range {start}..{} outside leading dim {d0}", start + len),
            ));
        }
        let inner = self.numel() / d0;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor::new(
            shape,
            self.data[start * inner..(start + len) * inner].to_vec(),
        )
    }

    /// Concatenates along the leading axis.
    pub fn concat_first(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_first", "nothing to concatenate"))?;
        let tail = &first.shape[1..];
        let mut d0 = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape("concat_first", &first.shape, &p.shape));
            }
            d0 += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = d0;
        Tensor::new(shape, data)
    }

    /// Serializes as `{"shape":[...],"data":[...]}` with 17 significant digits.
    pub fn to_json(&self) -> Result<String> {
        if !self.is_finite() {
            return Err(Error::NonFinite("tensor being serialized".into()));
        }
        let mut s = String::with_capacity(16 + self.data.len() * 24);
        s.push_str("{\"shape\":[");
        for (i, d) in self.shape.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{d}").unwrap();
        }
        s.push_str("],\"data\":[");
        for (i, v) in self.data.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{v:.16e}").unwrap();
        }
        s.push_str("]}");
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Tensor> {
        #[derive(Deserialize)]
        struct Raw {
            shape: Vec<usize>,
            data: Vec<f64>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        Tensor::new(raw.shape, raw.data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new_finite(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn narrow_and_concat_are_inverse() {
        let t = Tensor::from_fn(&[3, 5], |i| i as f64);
        let a = t.narrow_last(0, 2).unwrap();
        let b = t.narrow_last(2, 3).unwrap();
        assert_eq!(Tensor::concat_last(&[&a, &b]).unwrap(), t);
        assert_eq!(a.data(), &[0., 1., 5., 6., 10., 11.]);
    }

    #[test]
    fn transpose_swaps_axes() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let tt = t.transpose().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn json_layout() {
        let t = Tensor::new(vec![1, 2], vec![0.1, -2.0]).unwrap();
        let s = t.to_json().unwrap();
        assert!(s.starts_with("{\"shape\":[1,2],\"data\":["));
        assert!(s.contains("1.0000000000000001e-1"));
        assert!(Tensor::new(vec![1], vec![f64::INFINITY])
            .unwrap()
            .to_json()
            .is_err());
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(
            data in proptest::collection::vec(-1e300f64..1e300, 1..40)
        ) {
            let n = data.len();
            let t = Tensor::new(vec![n], data).unwrap();
            let back = Tensor::from_json(&t.to_json().unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense column-major matrix used for Hessians, Fisher matrices and Jacobians.
pub type Matrix = DMatrix<f64>;

/// Dense row-major array of 64-bit reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                expected: format!("{expected} elements for shape {shape:?}"),
                got: format!("{} elements", data.len()),
            });
        }
        check_finite(&data)?;
        Ok(Tensor { data, shape })
    }

    /// A single sample (rank-1 tensor).
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(data, vec![n])
    }

    /// An N×d batch from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::arg("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(data, vec![rows.len(), d])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { data: vec![0.0; n], shape }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of samples: 1 for a rank-1 tensor, the leading extent otherwise.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Width of one sample.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols().max(1))
    }
}

/// One named parameter block of a [`WeightVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Segment { name: name.into(), shape }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector plus the layer layout it was cut from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl WeightVector {
    pub fn new(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let total: usize = layout.iter().map(Segment::len).sum();
        if total != values.len() {
            return Err(Error::Shape {
                expected: format!("{total} values for layout"),
                got: format!("{}", values.len()),
            });
        }
        if values.is_empty() {
            return Err(Error::arg("weight vector must have k > 0"));
        }
        check_finite(&values)?;
        Ok(WeightVector { values, layout })
    }

    /// Unstructured vector with a single segment named `w`.
    pub fn flat(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        WeightVector::new(values, vec![Segment::new("w", vec![n])])
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        WeightVector::new(values, self.layout.clone())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Offset range of the segment called `name`.
    pub fn segment_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for seg in &self.layout {
            if seg.name == name {
                return Some(start..start + seg.len());
            }
            start += seg.len();
        }
        None
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segment_range(name).map(|r| &self.values[r])
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

pub(crate) fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::arg(format!("non-finite entry {} at index {i}", v[i]))),
        None => Ok(()),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

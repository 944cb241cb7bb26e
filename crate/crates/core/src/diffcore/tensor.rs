//! Dense row-major tensors of 64-bit reals.

use super::DiffError;

/// A dense multi-dimensional array of `f64`, stored row-major.
///
/// Dimension sizes of zero are permitted so that degenerate schemas
/// (e.g. a cohort with no intervention channels) flow through the same
/// code paths as everything else.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` has exactly `shape.product()` values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(DiffError::InvalidTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// A single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    /// A `[rows, cols]` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DiffError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// The `rows x rows` identity matrix.
    pub fn identity(rows: usize) -> Self {
        let mut t = Tensor::zeros(&[rows, rows]);
        for i in 0..rows {
            t.data[i * rows + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when the tensor holds exactly one value (broadcastable as a scalar).
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64, DiffError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(DiffError::NonScalar {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Applies `f` elementwise, returning a new tensor of the same shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element at `[i, j]` of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }
}

pub(crate) fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    if shape.len() == 2 {
        Some((shape[0], shape[1]))
    } else {
        None
    }
}

/// Row-major matrix product `[m,k] x [k,n] -> [m,n]`.
pub(crate) fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
    let (m, k) = rows_cols(a.shape()).ok_or_else(|| DiffError::shape("matmul", a, b))?;
    let (k2, n) = rows_cols(b.shape()).ok_or_else(|| DiffError::shape("matmul", a, b))?;
    if k != k2 {
        return Err(DiffError::shape("matmul", a, b));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// How the operands of an elementwise binary op line up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    /// Identical shapes.
    None,
    /// Left operand is a single value applied against every right element.
    LeftScalar,
    /// Right operand is a single value applied against every left element.
    RightScalar,
}

pub(crate) fn broadcast_kind(a: &Tensor, b: &Tensor, op: &'static str) -> Result<Broadcast, DiffError> {
    if a.shape() == b.shape() {
        Ok(Broadcast::None)
    } else if b.is_scalar() {
        // When both are single-element the left operand's shape wins.
        Ok(Broadcast::RightScalar)
    } else if a.is_scalar() {
        Ok(Broadcast::LeftScalar)
    } else {
        Err(DiffError::shape(op, a, b))
    }
}

pub(crate) fn zip_values(
    a: &Tensor,
    b: &Tensor,
    kind: Broadcast,
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    match kind {
        Broadcast::None => Tensor {
            shape: a.shape().to_vec(),
            data: a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        },
        Broadcast::LeftScalar => {
            let s = a.data()[0];
            Tensor {
                shape: b.shape().to_vec(),
                data: b.data().iter().map(|&y| f(s, y)).collect(),
            }
        }
        Broadcast::RightScalar => {
            let s = b.data()[0];
            Tensor {
                shape: a.shape().to_vec(),
                data: a.data().iter().map(|&x| f(x, s)).collect(),
            }
        }
    }
}

/// Shape of `concat(a, b)` along the last axis.
pub(crate) fn concat_shape(a: &Tensor, b: &Tensor) -> Result<Vec<usize>, DiffError> {
    let sa = a.shape();
    let sb = b.shape();
    if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(DiffError::shape("concat", a, b));
    }
    let mut out = sa.to_vec();
    *out.last_mut().unwrap() = sa[sa.len() - 1] + sb[sb.len() - 1];
    Ok(out)
}

pub(crate) fn concat_values(a: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
    let shape = concat_shape(a, b)?;
    let wa = *a.shape().last().unwrap();
    let wb = *b.shape().last().unwrap();
    let rows: usize = a.shape()[..a.shape().len() - 1].iter().product();
    let mut data = Vec::with_capacity(rows * (wa + wb));
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * wa..(r + 1) * wa]);
        data.extend_from_slice(&b.data()[r * wb..(r + 1) * wb]);
    }
    Tensor::new(shape, data)
}

pub(crate) fn slice_values(a: &Tensor, start: usize, len: usize) -> Result<Tensor, DiffError> {
    let sa = a.shape();
    if sa.is_empty() {
        return Err(DiffError::InvalidSlice {
            shape: sa.to_vec(),
            start,
            len,
        });
    }
    let width = *sa.last().unwrap();
    if start + len > width {
        return Err(DiffError::InvalidSlice {
            shape: sa.to_vec(),
            start,
            len,
        });
    }
    let rows: usize = sa[..sa.len() - 1].iter().product();
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = len;
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * width + start..r * width + start + len]);
    }
    Tensor::new(shape, data)
}

//! Dense row-major `f64` arrays and the forward kernels behind every tape
//! operation. Nothing in here knows about differentiation.

use std::fmt;

use crate::error::{Error, Result};

/// A dense, row-major block of 64-bit floats.
///
/// A rank-0 array (empty shape) holds exactly one value.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Array")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D array from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Array::new(vec![rows.len(), cols], data)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut a = Self::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of rows of a 2-D array.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns of a 2-D array.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn reshaped(&self, shape: &[usize]) -> Result<Array> {
        Array::new(shape.to_vec(), self.data.clone())
    }

    /// Selects the given rows of a 2-D array.
    pub fn select_rows(&self, idx: &[usize]) -> Array {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Array { shape, data }
    }
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// Trailing-dimension broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {a:?} and {b:?} are not broadcast-compatible"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` laid against a (possibly higher-rank) `target`, with
/// zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let offset = target.len() - shape.len();
    let mut strides = vec![0; target.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Walks every index of `shape` in row-major order, yielding the linear
/// offset into each strided operand.
fn for_each_strided(shape: &[usize], strides: &[&[usize]], mut f: impl FnMut(usize, &[usize])) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offs = vec![0usize; strides.len()];
    for linear in 0..total {
        f(linear, &offs);
        // increment the multi-index
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            for (o, s) in offs.iter_mut().zip(strides) {
                *o += s[d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(strides) {
                *o -= s[d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn zip_broadcast(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Array {
            shape: a.shape.clone(),
            data,
        });
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let mut data = vec![0.0; shape.iter().product()];
    for_each_strided(&shape, &[&sa, &sb], |i, o| {
        data[i] = f(a.data[o[0]], b.data[o[1]]);
    });
    Ok(Array { shape, data })
}

pub(crate) fn broadcast_to(a: &Array, shape: &[usize]) -> Result<Array> {
    if a.shape == shape {
        return Ok(a.clone());
    }
    let full = broadcast_shape(&a.shape, shape)?;
    if full != shape {
        return Err(Error::dim(format!(
            "cannot broadcast {:?} to {shape:?}",
            a.shape
        )));
    }
    let sa = broadcast_strides(&a.shape, shape);
    let mut data = vec![0.0; shape.iter().product()];
    for_each_strided(shape, &[&sa], |i, o| data[i] = a.data[o[0]]);
    Ok(Array {
        shape: shape.to_vec(),
        data,
    })
}

/// Sums a broadcast result back down to `shape`; the adjoint of
/// [`broadcast_to`].
pub(crate) fn sum_to(a: &Array, shape: &[usize]) -> Result<Array> {
    if a.shape == shape {
        return Ok(a.clone());
    }
    let full = broadcast_shape(shape, &a.shape)?;
    if full != a.shape {
        return Err(Error::dim(format!(
            "cannot reduce {:?} to {shape:?}",
            a.shape
        )));
    }
    let st = broadcast_strides(shape, &a.shape);
    let mut data = vec![0.0; shape.iter().product()];
    for_each_strided(&a.shape, &[&st], |i, o| data[o[0]] += a.data[i]);
    Ok(Array {
        shape: shape.to_vec(),
        data,
    })
}

// ---------------------------------------------------------------------------
// Linear algebra and structural kernels
// ---------------------------------------------------------------------------

pub(crate) fn matmul(a: &Array, b: &Array) -> Result<Array> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim(format!(
            "matmul needs 2-D operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut data = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the pointers cover m*k, k*n and m*n contiguous row-major
        // values, matching the strides passed.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                k as isize,
                1,
                b.data.as_ptr(),
                n as isize,
                1,
                0.0,
                data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(Array {
        shape: vec![m, n],
        data,
    })
}

pub(crate) fn transpose(a: &Array) -> Result<Array> {
    if a.rank() != 2 {
        return Err(Error::dim(format!("transpose needs 2-D, got {:?}", a.shape)));
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Array {
        shape: vec![c, r],
        data,
    })
}

/// (outer, extent, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

pub(crate) fn sum_axis(a: &Array, axis: usize, keepdim: bool) -> Result<Array> {
    check_axis(&a.shape, axis)?;
    let (outer, n, inner) = split_axis(&a.shape, axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let base = (o * n + k) * inner;
            for i in 0..inner {
                data[o * inner + i] += a.data[base + i];
            }
        }
    }
    let mut shape = a.shape.clone();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Ok(Array { shape, data })
}

pub(crate) fn softmax_last(a: &Array) -> Result<Array> {
    if a.rank() == 0 {
        return Err(Error::dim("softmax needs at least one axis"));
    }
    let k = *a.shape.last().unwrap();
    let mut data = a.data.clone();
    for row in data.chunks_mut(k.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(Array {
        shape: a.shape.clone(),
        data,
    })
}

pub(crate) fn concat(parts: &[&Array], axis: usize) -> Result<Array> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat of zero tensors"))?;
    check_axis(&first.shape, axis)?;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !ok {
            return Err(Error::dim(format!(
                "cannot concat {:?} with {:?} along axis {axis}",
                first.shape, p.shape
            )));
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let (outer, _, inner) = split_axis(&first.shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Array { shape, data })
}

pub(crate) fn slice(a: &Array, axis: usize, start: usize, end: usize) -> Result<Array> {
    check_axis(&a.shape, axis)?;
    if start > end || end > a.shape[axis] {
        return Err(Error::dim(format!(
            "slice {start}..{end} out of range for axis {axis} of {:?}",
            a.shape
        )));
    }
    let (outer, n, inner) = split_axis(&a.shape, axis);
    let mut data = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * n * inner;
        data.extend_from_slice(&a.data[base + start * inner..base + end * inner]);
    }
    let mut shape = a.shape.clone();
    shape[axis] = end - start;
    Ok(Array { shape, data })
}

/// Zero padding along one axis; the adjoint of [`slice`].
pub(crate) fn pad(a: &Array, axis: usize, before: usize, after: usize) -> Result<Array> {
    check_axis(&a.shape, axis)?;
    let (outer, n, inner) = split_axis(&a.shape, axis);
    let total = before + n + after;
    let mut data = vec![0.0; outer * total * inner];
    for o in 0..outer {
        let dst = (o * total + before) * inner;
        data[dst..dst + n * inner].copy_from_slice(&a.data[o * n * inner..(o + 1) * n * inner]);
    }
    let mut shape = a.shape.clone();
    shape[axis] = total;
    Ok(Array { shape, data })
}

//! Weight tensors and the filter-as-data-point view.
//!
//! A conv layer's weight has shape `(c_out, c_in, h, w)`. Flattening turns it
//! into a [`FilterMatrix`] with one row per filter, so that filters can be
//! compared as points in `c_in * h * w` (+1 with bias) dimensional space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a 4-D weight tensor, outermost dimension first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub c_out: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(c_out: usize, c_in: usize, h: usize, w: usize) -> Self {
        Self { c_out, c_in, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c_out * self.filter_len()
    }

    /// Number of weights in one filter, `c_in * h * w`.
    pub fn filter_len(&self) -> usize {
        self.c_in * self.kernel_area()
    }

    pub fn kernel_area(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.h, self.w]
    }

    fn check(&self) -> Result<()> {
        if self.c_out == 0 || self.c_in == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::dim(format!(
                "all dimensions must be positive, got {:?}",
                self.dims()
            )));
        }
        Ok(())
    }
}

/// A named 4-D weight tensor stored row-major in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor4D {
    name: String,
    shape: Shape4,
    data: Vec<f64>,
}

impl WeightTensor4D {
    pub fn new(name: impl Into<String>, shape: Shape4, data: Vec<f64>) -> Result<Self> {
        shape.check()?;
        if data.len() != shape.numel() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} values, got {}",
                shape.dims(),
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            shape,
            data,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Weights of filter `i` in row-major `(c_in, h, w)` order.
    pub fn filter(&self, i: usize) -> &[f64] {
        let len = self.shape.filter_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// The `(h, w)` kernel slice connecting input channel `c` to filter `i`.
    pub fn kernel(&self, i: usize, c: usize) -> &[f64] {
        let area = self.shape.kernel_area();
        let start = i * self.shape.filter_len() + c * area;
        &self.data[start..start + area]
    }
}

/// One layer's filters as rows of a dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    has_bias: bool,
}

impl FilterMatrix {
    /// Builds a matrix from raw rows. `has_bias` marks the last column as the
    /// filter bias.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>, has_bias: bool) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim("filter matrix needs at least one row and column"));
        }
        if has_bias && cols < 2 {
            return Err(Error::dim("a biased filter matrix needs at least two columns"));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            has_bias,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn has_bias(&self) -> bool {
        self.has_bias
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols)
    }

    /// Inverse of [`flatten`]: rebuilds the tensor (named `name`) and splits
    /// off the bias column when present.
    pub fn unflatten(
        &self,
        name: impl Into<String>,
        shape: Shape4,
    ) -> Result<(WeightTensor4D, Option<Vec<f64>>)> {
        shape.check()?;
        let weight_cols = self.cols - usize::from(self.has_bias);
        if shape.c_out != self.rows || shape.filter_len() != weight_cols {
            return Err(Error::dim(format!(
                "{}x{} matrix (bias: {}) does not unflatten to {:?}",
                self.rows,
                self.cols,
                self.has_bias,
                shape.dims()
            )));
        }
        if !self.has_bias {
            return Ok((WeightTensor4D::new(name, shape, self.data.clone())?, None));
        }
        let mut data = Vec::with_capacity(shape.numel());
        let mut bias = Vec::with_capacity(self.rows);
        for row in self.iter_rows() {
            data.extend_from_slice(&row[..weight_cols]);
            bias.push(row[weight_cols]);
        }
        Ok((WeightTensor4D::new(name, shape, data)?, Some(bias)))
    }
}

/// Reshapes `(c_out, c_in, h, w)` into `c_out` rows, appending each filter's
/// bias as the last column when `bias` is given.
pub fn flatten(t: &WeightTensor4D, bias: Option<&[f64]>) -> Result<FilterMatrix> {
    let shape = t.shape();
    let Some(bias) = bias else {
        return FilterMatrix::from_rows(shape.c_out, shape.filter_len(), t.data.clone(), false);
    };
    if bias.len() != shape.c_out {
        return Err(Error::dim(format!(
            "`{}` has {} filters but {} bias values",
            t.name,
            shape.c_out,
            bias.len()
        )));
    }
    let cols = shape.filter_len() + 1;
    let mut data = Vec::with_capacity(shape.c_out * cols);
    for (i, b) in bias.iter().enumerate() {
        data.extend_from_slice(t.filter(i));
        data.push(*b);
    }
    FilterMatrix::from_rows(shape.c_out, cols, data, true)
}

//! Layout operations: reshape, permute, concat, slice, row gather, broadcast.

use super::ops::axis_split;
use super::{numel, GradFn, Result, Tensor, TensorError};

/// Row index that [`Tensor::gather_rows`] fills with zeros.
pub const PAD_INDEX: usize = usize::MAX;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every output element (row-major), the source offset in the input.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    let mut index = Vec::with_capacity(total);
    if total == 0 {
        return index;
    }
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        index.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    index
}

struct ReshapeGrad;
impl GradFn for ReshapeGrad {
    fn backward(&self, _: &[Tensor], _: &[f64], g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

/// Output element `i` was read from input element `index[i]`.
struct ScatterGrad {
    index: Vec<usize>,
    input_len: usize,
}
impl GradFn for ScatterGrad {
    fn backward(&self, _: &[Tensor], _: &[f64], g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; self.input_len];
        for (&src, &gv) in self.index.iter().zip(g) {
            dx[src] += gv;
        }
        vec![Some(dx)]
    }
}

struct GatherRowsGrad {
    rows: Vec<usize>,
    row_len: usize,
    input_len: usize,
}
impl GradFn for GatherRowsGrad {
    fn backward(&self, _: &[Tensor], _: &[f64], g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; self.input_len];
        let l = self.row_len;
        for (i, &r) in self.rows.iter().enumerate() {
            if r == PAD_INDEX {
                continue;
            }
            dx[r * l..(r + 1) * l]
                .iter_mut()
                .zip(&g[i * l..(i + 1) * l])
                .for_each(|(d, v)| *d += v);
        }
        vec![Some(dx)]
    }
}

struct ConcatGrad {
    outer: usize,
    inner: usize,
    lens: Vec<usize>,
}
impl GradFn for ConcatGrad {
    fn backward(
        &self,
        _: &[Tensor],
        _: &[f64],
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.lens.iter().sum();
        let mut start = 0;
        let mut out = Vec::with_capacity(self.lens.len());
        for (&len, &need) in self.lens.iter().zip(needs) {
            if need {
                let chunk = len * self.inner;
                let mut d = Vec::with_capacity(self.outer * chunk);
                for o in 0..self.outer {
                    let base = (o * total + start) * self.inner;
                    d.extend_from_slice(&g[base..base + chunk]);
                }
                out.push(Some(d));
            } else {
                out.push(None);
            }
            start += len;
        }
        out
    }
}

struct SliceGrad {
    outer: usize,
    len: usize,
    inner: usize,
    start: usize,
    end: usize,
}
impl GradFn for SliceGrad {
    fn backward(&self, _: &[Tensor], _: &[f64], g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let width = (self.end - self.start) * self.inner;
        let mut dx = vec![0.0; self.outer * self.len * self.inner];
        for o in 0..self.outer {
            let dst = (o * self.len + self.start) * self.inner;
            dx[dst..dst + width].copy_from_slice(&g[o * width..(o + 1) * width]);
        }
        vec![Some(dx)]
    }
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            &[self],
            ReshapeGrad,
        ))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank
            && perm
                .iter()
                .all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {rank}"),
            });
        }
        let index = permute_index(self.shape(), perm);
        let x = self.data();
        let data = index.iter().map(|&i| x[i]).collect();
        let shape = perm.iter().map(|&p| self.shape()[p]).collect();
        let grad = ScatterGrad {
            index,
            input_len: self.numel(),
        };
        Ok(Tensor::from_op("permute", shape, data, &[self], grad))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose_last",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        if axis >= first.rank() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.rank(),
            });
        }
        for t in tensors {
            let ok = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &len) in tensors.iter().zip(&lens) {
                data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            "concat",
            shape,
            data,
            tensors,
            ConcatGrad { outer, inner, lens },
        ))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        if start > end || end > len {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} outside axis of extent {len}"),
            });
        }
        let width = (end - start) * inner;
        let x = self.data();
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&x[base..base + width]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        let grad = SliceGrad {
            outer,
            len,
            inner,
            start,
            end,
        };
        Ok(Tensor::from_op("slice", shape, data, &[self], grad))
    }

    /// Selects rows along axis 0; [`PAD_INDEX`] produces a zero row.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(TensorError::InvalidAxis {
                op: "gather_rows",
                axis: 0,
                rank: 0,
            });
        }
        let n_rows = self.shape()[0];
        let row_len = self.numel() / n_rows.max(1);
        if let Some(&bad) = rows.iter().find(|&&r| r != PAD_INDEX && r >= n_rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {n_rows} rows"),
            });
        }
        let x = self.data();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            if r == PAD_INDEX {
                data.extend(std::iter::repeat_n(0.0, row_len));
            } else {
                data.extend_from_slice(&x[r * row_len..(r + 1) * row_len]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        let grad = GatherRowsGrad {
            rows: rows.to_vec(),
            row_len,
            input_len: self.numel(),
        };
        Ok(Tensor::from_op("gather_rows", shape, data, &[self], grad))
    }

    /// Repeats size-1 axes up to `shape` (ranks must agree).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let ok = shape.len() == self.rank()
            && self
                .shape()
                .iter()
                .zip(shape)
                .all(|(&a, &b)| a == b || a == 1);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let in_strides = strides(self.shape());
        let src_strides: Vec<usize> = self
            .shape()
            .iter()
            .zip(&in_strides)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        let total = numel(shape);
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; shape.len()];
        let mut offset = 0usize;
        for _ in 0..total {
            index.push(offset);
            for d in (0..shape.len()).rev() {
                counter[d] += 1;
                offset += src_strides[d];
                if counter[d] < shape[d] {
                    break;
                }
                offset -= src_strides[d] * shape[d];
                counter[d] = 0;
            }
        }
        let x = self.data();
        let data = index.iter().map(|&i| x[i]).collect();
        let grad = ScatterGrad {
            index,
            input_len: self.numel(),
        };
        Ok(Tensor::from_op(
            "broadcast_to",
            shape.to_vec(),
            data,
            &[self],
            grad,
        ))
    }
}

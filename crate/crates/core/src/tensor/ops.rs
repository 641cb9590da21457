//! Element-wise arithmetic and reductions.

use super::{GradFn, Result, Tensor, TensorError};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

struct AddGrad;
impl GradFn for AddGrad {
    fn backward(
        &self,
        _: &[Tensor],
        _: &[f64],
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
    }
}

struct SubGrad;
impl GradFn for SubGrad {
    fn backward(
        &self,
        _: &[Tensor],
        _: &[f64],
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.iter().map(|v| -v).collect()),
        ]
    }
}

struct MulGrad;
impl GradFn for MulGrad {
    fn backward(
        &self,
        inputs: &[Tensor],
        _: &[f64],
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        vec![
            needs[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
            needs[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
        ]
    }
}

struct DivGrad;
impl GradFn for DivGrad {
    fn backward(
        &self,
        inputs: &[Tensor],
        out: &[f64],
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let b = inputs[1].data();
        vec![
            needs[0].then(|| g.iter().zip(b).map(|(g, b)| g / b).collect()),
            needs[1].then(|| {
                g.iter()
                    .zip(b)
                    .zip(out)
                    .map(|((g, b), y)| -g * y / b)
                    .collect()
            }),
        ]
    }
}

struct ScaleGrad(f64);
impl GradFn for ScaleGrad {
    fn backward(&self, _: &[Tensor], _: &[f64], g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

struct ExpGrad;
impl GradFn for ExpGrad {
    fn backward(&self, _: &[Tensor], out: &[f64], g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().zip(out).map(|(g, y)| g * y).collect())]
    }
}

struct LnGrad;
impl GradFn for LnGrad {
    fn backward(
        &self,
        inputs: &[Tensor],
        _: &[f64],
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(g.iter().zip(x).map(|(g, x)| g / x).collect())]
    }
}

struct ClampGrad {
    lo: f64,
    hi: f64,
}
impl GradFn for ClampGrad {
    fn backward(
        &self,
        inputs: &[Tensor],
        _: &[f64],
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(
            g.iter()
                .zip(x)
                .map(|(g, &x)| if x < self.lo || x > self.hi { 0.0 } else { *g })
                .collect(),
        )]
    }
}

struct SumGrad;
impl GradFn for SumGrad {
    fn backward(
        &self,
        inputs: &[Tensor],
        _: &[f64],
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0]; inputs[0].numel()])]
    }
}

struct SumAxisGrad {
    outer: usize,
    len: usize,
    inner: usize,
}
impl GradFn for SumAxisGrad {
    fn backward(&self, _: &[Tensor], _: &[f64], g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; self.outer * self.len * self.inner];
        for o in 0..self.outer {
            for l in 0..self.len {
                let dst = (o * self.len + l) * self.inner;
                dx[dst..dst + self.inner].copy_from_slice(&g[o * self.inner..(o + 1) * self.inner]);
            }
        }
        vec![Some(dx)]
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            &[self, other],
            AddGrad,
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            &[self, other],
            SubGrad,
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            &[self, other],
            MulGrad,
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a / b)
            .collect();
        Ok(Tensor::from_op(
            "div",
            self.shape().to_vec(),
            data,
            &[self, other],
            DivGrad,
        ))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * s).collect();
        Tensor::from_op(
            "mul_scalar",
            self.shape().to_vec(),
            data,
            &[self],
            ScaleGrad(s),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|a| a + s).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            &[self],
            ScaleGrad(1.0),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.exp()).collect();
        Tensor::from_op("exp", self.shape().to_vec(), data, &[self], ExpGrad)
    }

    pub fn ln(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.ln()).collect();
        Tensor::from_op("ln", self.shape().to_vec(), data, &[self], LnGrad)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the input was clipped.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data().iter().map(|a| a.clamp(lo, hi)).collect();
        Tensor::from_op(
            "clamp",
            self.shape().to_vec(),
            data,
            &[self],
            ClampGrad { lo, hi },
        )
    }

    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op("sum", Vec::new(), vec![s], &[self], SumGrad)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums out one axis (the axis is removed from the shape).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                op: "sum_axis",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            "sum_axis",
            shape,
            out,
            &[self],
            SumAxisGrad { outer, len, inner },
        ))
    }
}

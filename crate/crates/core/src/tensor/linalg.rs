//! Batched matrix products and the affine map used by every projection.

use rayon::prelude::*;

use super::{GradFn, Result, Tensor, TensorError};

/// Below this many multiply-adds the kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// c[m,n] += a[m,k] · b[k,n]
fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let row = |(i, ci): (usize, &mut [f64])| {
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            ci.iter_mut().zip(bp).for_each(|(c, b)| *c += aip * b);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let row = |(i, ci): (usize, &mut [f64])| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, cij) in ci.iter_mut().enumerate() {
            let bj = &b[j * k..(j + 1) * k];
            *cij += ai.iter().zip(bj).map(|(x, y)| x * y).sum::<f64>();
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n], reduced over m in ascending order.
fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let row = |(p, cp): (usize, &mut [f64])| {
        for i in 0..m {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let bi = &b[i * n..(i + 1) * n];
            cp.iter_mut().zip(bi).for_each(|(c, b)| *c += aip * b);
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

#[derive(Clone, Copy)]
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

struct MatmulGrad(MatmulDims);
impl GradFn for MatmulGrad {
    fn backward(
        &self,
        inputs: &[Tensor],
        _: &[f64],
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let MatmulDims {
            batch,
            m,
            k,
            n,
            a_batched,
            b_batched,
        } = self.0;
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let da = needs[0].then(|| {
            let mut da = vec![0.0; inputs[0].numel()];
            for t in 0..batch {
                let dst = if a_batched {
                    &mut da[t * m * k..(t + 1) * m * k]
                } else {
                    &mut da[..]
                };
                let bt = if b_batched {
                    &b[t * k * n..(t + 1) * k * n]
                } else {
                    b
                };
                mm_nt(&g[t * m * n..(t + 1) * m * n], bt, dst, m, n, k);
            }
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![0.0; inputs[1].numel()];
            for t in 0..batch {
                let dst = if b_batched {
                    &mut db[t * k * n..(t + 1) * k * n]
                } else {
                    &mut db[..]
                };
                let at = if a_batched {
                    &a[t * m * k..(t + 1) * m * k]
                } else {
                    a
                };
                mm_tn(at, &g[t * m * n..(t + 1) * m * n], dst, m, k, n);
            }
            db
        });
        vec![da, db]
    }
}

struct LinearGrad {
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}
impl GradFn for LinearGrad {
    fn backward(
        &self,
        inputs: &[Tensor],
        _: &[f64],
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let Self {
            rows,
            fan_in,
            fan_out,
        } = *self;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; rows * fan_in];
            mm_nt(g, w, &mut dx, rows, fan_out, fan_in);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; fan_in * fan_out];
            mm_tn(x, g, &mut dw, rows, fan_in, fan_out);
            dw
        });
        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| {
                let mut db = vec![0.0; fan_out];
                for r in g.chunks(fan_out) {
                    db.iter_mut().zip(r).for_each(|(d, v)| *d += v);
                }
                db
            }));
        }
        out
    }
}

impl Tensor {
    /// Contracted product over the last axis of `self` and the second-to-last
    /// of `other`. Leading batch extents must match, or one side may be a
    /// plain matrix shared across the batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 {
            return Err(mismatch());
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let a_batch = &self.shape()[..ra - 2];
        let b_batch = &other.shape()[..rb - 2];
        let batch_shape = match (a_batch.is_empty(), b_batch.is_empty()) {
            (_, true) => a_batch.to_vec(),
            (true, false) => b_batch.to_vec(),
            (false, false) if a_batch == b_batch => a_batch.to_vec(),
            _ => return Err(mismatch()),
        };
        let batch: usize = batch_shape.iter().product();
        let dims = MatmulDims {
            batch,
            m,
            k,
            n,
            a_batched: !a_batch.is_empty(),
            b_batched: !b_batch.is_empty(),
        };
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; batch * m * n];
        let one = |(t, ct): (usize, &mut [f64])| {
            let at = if dims.a_batched {
                &a[t * m * k..(t + 1) * m * k]
            } else {
                a
            };
            let bt = if dims.b_batched {
                &b[t * k * n..(t + 1) * k * n]
            } else {
                b
            };
            mm_nn(at, bt, ct, m, k, n);
        };
        if batch > 1 && batch * m * k * n >= PAR_THRESHOLD && m * n > 0 {
            out.par_chunks_mut(m * n).enumerate().for_each(one);
        } else if m * n > 0 {
            out.chunks_mut(m * n).enumerate().for_each(one);
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        Ok(Tensor::from_op(
            "matmul",
            shape,
            out,
            &[self, other],
            MatmulGrad(dims),
        ))
    }

    /// `x · W + b` over the last axis; `W` is stored `[fan_in, fan_out]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let mismatch = |rhs: &Tensor| TensorError::ShapeMismatch {
            op: "linear",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if weight.rank() != 2 || self.rank() == 0 {
            return Err(mismatch(weight));
        }
        let fan_in = *self.shape().last().unwrap_or(&0);
        let (w_in, fan_out) = (weight.shape()[0], weight.shape()[1]);
        if w_in != fan_in {
            return Err(mismatch(weight));
        }
        if let Some(b) = bias {
            if b.shape() != [fan_out] {
                return Err(mismatch(b));
            }
        }
        let rows = self.numel() / fan_in.max(1);
        let mut out = match bias {
            Some(b) => b.data().repeat(rows),
            None => vec![0.0; rows * fan_out],
        };
        mm_nn(self.data(), weight.data(), &mut out, rows, fan_in, fan_out);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let grad = LinearGrad {
            rows,
            fan_in,
            fan_out,
        };
        Ok(match bias {
            Some(b) => Tensor::from_op("linear", shape, out, &[self, weight, b], grad),
            None => Tensor::from_op("linear", shape, out, &[self, weight], grad),
        })
    }
}

//! Neural-network primitives with fused backward rules.

use rayon::prelude::*;

use super::ops::axis_split;
use super::{GradFn, Result, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

struct SoftmaxGrad {
    outer: usize,
    len: usize,
    inner: usize,
}
impl GradFn for SoftmaxGrad {
    fn backward(&self, _: &[Tensor], y: &[f64], g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let Self { outer, len, inner } = *self;
        let mut dx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                for l in 0..len {
                    dx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

struct LayerNormGrad {
    width: usize,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}
impl GradFn for LayerNormGrad {
    fn backward(
        &self,
        inputs: &[Tensor],
        _: &[f64],
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let w = self.width;
        let gamma = inputs[1].data();
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            for (r, (dxr, gr)) in dx.chunks_mut(w).zip(g.chunks(w)).enumerate() {
                let xh = &self.xhat[r * w..(r + 1) * w];
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..w {
                    let d = gr[j] * gamma[j];
                    mean_d += d;
                    mean_dx += d * xh[j];
                }
                mean_d /= w as f64;
                mean_dx /= w as f64;
                for j in 0..w {
                    dxr[j] = self.rstd[r] * (gr[j] * gamma[j] - mean_d - xh[j] * mean_dx);
                }
            }
            dx
        });
        let dgamma = needs[1].then(|| {
            let mut d = vec![0.0; w];
            for (gr, xh) in g.chunks(w).zip(self.xhat.chunks(w)) {
                for j in 0..w {
                    d[j] += gr[j] * xh[j];
                }
            }
            d
        });
        let dbeta = needs[2].then(|| {
            let mut d = vec![0.0; w];
            for gr in g.chunks(w) {
                d.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
            }
            d
        });
        vec![dx, dgamma, dbeta]
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_prime(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

struct GeluGrad;
impl GradFn for GeluGrad {
    fn backward(
        &self,
        inputs: &[Tensor],
        _: &[f64],
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(
            g.iter().zip(x).map(|(g, &x)| g * gelu_prime(x)).collect(),
        )]
    }
}

/// Geometry of a `[B, D, H, W, C]` volume batch.
#[derive(Clone, Copy)]
struct Vol5 {
    batch: usize,
    d: usize,
    h: usize,
    w: usize,
    c: usize,
}

impl Vol5 {
    fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Neighbor voxel index at offset (dz,dy,dx) ∈ {-1,0,1}³, if inside.
    #[inline]
    fn neighbor(&self, z: usize, y: usize, x: usize, off: usize) -> Option<usize> {
        let dz = (off / 9) as isize - 1;
        let dy = ((off / 3) % 3) as isize - 1;
        let dx = (off % 3) as isize - 1;
        let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
        if nz < 0
            || ny < 0
            || nx < 0
            || nz >= self.d as isize
            || ny >= self.h as isize
            || nx >= self.w as isize
        {
            return None;
        }
        Some((nz as usize * self.h + ny as usize) * self.w + nx as usize)
    }
}

struct DepthwiseConvGrad(Vol5);
impl GradFn for DepthwiseConvGrad {
    fn backward(
        &self,
        inputs: &[Tensor],
        _: &[f64],
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let v = self.0;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let c = v.c;
        let sp = v.spatial();
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        for b in 0..v.batch {
            let base = b * sp;
            for z in 0..v.d {
                for y in 0..v.h {
                    for xx in 0..v.w {
                        let p = (z * v.h + y) * v.w + xx;
                        let gp = &g[(base + p) * c..(base + p + 1) * c];
                        for off in 0..27 {
                            let Some(q) = v.neighbor(z, y, xx, off) else {
                                continue;
                            };
                            let wo = &w[off * c..(off + 1) * c];
                            if let Some(dx) = dx.as_mut() {
                                let dq = &mut dx[(base + q) * c..(base + q + 1) * c];
                                for ch in 0..c {
                                    dq[ch] += gp[ch] * wo[ch];
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                let xq = &x[(base + q) * c..(base + q + 1) * c];
                                let dwo = &mut dw[off * c..(off + 1) * c];
                                for ch in 0..c {
                                    dwo[ch] += gp[ch] * xq[ch];
                                }
                            }
                        }
                    }
                }
            }
        }
        let db = needs[2].then(|| {
            let mut db = vec![0.0; c];
            for gr in g.chunks(c) {
                db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
            }
            db
        });
        vec![dx, dw, db]
    }
}

impl Tensor {
    /// Numerically stable softmax along `axis` (max-subtracted, 64-bit sums).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        if inner == 1 {
            let row = |(xr, yr): (&[f64], &mut [f64])| {
                let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (y, &x) in yr.iter_mut().zip(xr) {
                    *y = (x - max).exp();
                    sum += *y;
                }
                yr.iter_mut().for_each(|y| *y /= sum);
            };
            if x.len() >= 1 << 14 {
                x.par_chunks(len).zip(y.par_chunks_mut(len)).for_each(row);
            } else {
                x.chunks(len).zip(y.chunks_mut(len)).for_each(row);
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for l in 0..len {
                        let e = (x[at(l)] - max).exp();
                        y[at(l)] = e;
                        sum += e;
                    }
                    for l in 0..len {
                        y[at(l)] /= sum;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            y,
            &[self],
            SoftmaxGrad { outer, len, inner },
        ))
    }

    /// Normalizes each vector along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let w = *self.shape().last().ok_or(TensorError::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        for p in [gamma, beta] {
            if p.shape() != [w] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let x = self.data();
        let rows = x.len() / w.max(1);
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        let (gm, bt) = (gamma.data(), beta.data());
        for r in 0..rows {
            let xr = &x[r * w..(r + 1) * w];
            let mean = xr.iter().sum::<f64>() / w as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..w {
                let h = (xr[j] - mean) * s;
                xhat[r * w + j] = h;
                y[r * w + j] = h * gm[j] + bt[j];
            }
        }
        let grad = LayerNormGrad {
            width: w,
            xhat,
            rstd,
        };
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            y,
            &[self, gamma, beta],
            grad,
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| gelu(x)).collect();
        Tensor::from_op("gelu", self.shape().to_vec(), data, &[self], GeluGrad)
    }

    /// Per-channel 3×3×3 convolution with zero padding on `[B, D, H, W, C]`.
    /// `weight` is `[27, C]` with kernel offsets in (z, y, x) row-major order.
    pub fn depthwise_conv3d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 5 {
            return Err(TensorError::Invalid {
                op: "depthwise_conv3d",
                msg: format!("expected [B, D, H, W, C], got {:?}", self.shape()),
            });
        }
        let s = self.shape();
        let v = Vol5 {
            batch: s[0],
            d: s[1],
            h: s[2],
            w: s[3],
            c: s[4],
        };
        if weight.shape() != [27, v.c] || bias.shape() != [v.c] {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv3d",
                lhs: s.to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (x, w, bias_d) = (self.data(), weight.data(), bias.data());
        let c = v.c;
        let sp = v.spatial();
        let mut y = vec![0.0; x.len()];
        for b in 0..v.batch {
            let base = b * sp;
            for z in 0..v.d {
                for yy in 0..v.h {
                    for xx in 0..v.w {
                        let p = (z * v.h + yy) * v.w + xx;
                        let out = &mut y[(base + p) * c..(base + p + 1) * c];
                        out.copy_from_slice(bias_d);
                        for off in 0..27 {
                            let Some(q) = v.neighbor(z, yy, xx, off) else {
                                continue;
                            };
                            let xq = &x[(base + q) * c..(base + q + 1) * c];
                            let wo = &w[off * c..(off + 1) * c];
                            for ch in 0..c {
                                out[ch] += wo[ch] * xq[ch];
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            "depthwise_conv3d",
            s.to_vec(),
            y,
            &[self, weight, bias],
            DepthwiseConvGrad(v),
        ))
    }
}

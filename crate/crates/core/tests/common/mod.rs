//! Scalar reference implementations shared by the integration tests.

#![allow(dead_code)]

pub mod checks;

use crswin_core::params::{ParamId, ParamStore};
use crswin_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Dims3 = [usize; 3];

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::new(rand_vec(rng, shape.iter().product(), scale), shape).unwrap()
}

/// Overwrites every parameter with uniform noise so that zero-initialized
/// tables and unit norms are exercised too.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.data_mut(id).iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Single-head attention on row-major `[T, d]` matrices, by loops.
pub fn oracle_self_attention(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let mut s: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        softmax_in_place(&mut s);
        for j in 0..t {
            for c in 0..d {
                out[i * d + c] += s[j] * v[j * d + c];
            }
        }
    }
    out
}

/// `x·W + b` for row-major `[n, fin]` and `W: [fin, fout]`.
pub fn oracle_linear(x: &[f64], w: &[f64], b: &[f64], fin: usize, fout: usize) -> Vec<f64> {
    let n = x.len() / fin;
    let mut out = vec![0.0; n * fout];
    for r in 0..n {
        for o in 0..fout {
            let mut s = b[o];
            for i in 0..fin {
                s += x[r * fin + i] * w[i * fout + o];
            }
            out[r * fout + o] = s;
        }
    }
    out
}

fn flat(p: Dims3, g: Dims3) -> usize {
    (p[0] * g[1] + p[1]) * g[2] + p[2]
}

fn positions(g: Dims3) -> Vec<Dims3> {
    let mut v = Vec::new();
    for a in 0..g[0] {
        for b in 0..g[1] {
            for c in 0..g[2] {
                v.push([a, b, c]);
            }
        }
    }
    v
}

/// Whether two shifted-frame positions were neighbours with the same offset
/// before the cyclic shift, i.e. no wrap-around separates them.
pub fn wrap_free(p: Dims3, q: Dims3, shift: Dims3, grid: Dims3) -> bool {
    (0..3).all(|a| {
        let op = (p[a] + shift[a]) % grid[a];
        let oq = (q[a] + shift[a]) % grid[a];
        op as isize - oq as isize == p[a] as isize - q[a] as isize
    })
}

pub struct WmsaParams<'a> {
    pub wqkv: &'a [f64],
    pub bqkv: &'a [f64],
    pub wout: &'a [f64],
    pub bout: &'a [f64],
    /// `[(2w−1)³ rows, heads]`
    pub table: &'a [f64],
}

/// Shifted-window multi-head attention on a `[D, H, W, C]` grid, by loops.
///
/// The grid is rolled so position `q` holds source `q + shift`; windows tile
/// the rolled grid; pairs separated by a wrap are excluded; the result is
/// rolled back.
pub fn oracle_wmsa(
    x: &[f64],
    grid: Dims3,
    c: usize,
    heads: usize,
    window: Dims3,
    shift: Dims3,
    p: &WmsaParams,
) -> Vec<f64> {
    let n = grid.iter().product::<usize>();
    let qkv = oracle_linear(x, p.wqkv, p.bqkv, c, 3 * c);
    let dh = c / heads;
    let span = window.map(|w| 2 * w - 1);
    let src = |q: Dims3| -> usize { flat([0, 1, 2].map(|a| (q[a] + shift[a]) % grid[a]), grid) };
    let mut merged = vec![0.0; n * c];
    for q in positions(grid) {
        let win = [0, 1, 2].map(|a| q[a] / window[a]);
        let members: Vec<Dims3> = positions(window)
            .into_iter()
            .map(|o| [0, 1, 2].map(|a| win[a] * window[a] + o[a]))
            .filter(|&m| wrap_free(q, m, shift, grid))
            .collect();
        let qi = src(q);
        for h in 0..heads {
            let mut scores: Vec<f64> = members
                .iter()
                .map(|&m| {
                    let mj = src(m);
                    let dot: f64 = (0..dh)
                        .map(|e| qkv[qi * 3 * c + h * dh + e] * qkv[mj * 3 * c + c + h * dh + e])
                        .sum();
                    let r =
                        [0, 1, 2].map(|a| (q[a] % window[a]) + window[a] - 1 - (m[a] % window[a]));
                    let row = (r[0] * span[1] + r[1]) * span[2] + r[2];
                    dot / (dh as f64).sqrt() + p.table[row * heads + h]
                })
                .collect();
            softmax_in_place(&mut scores);
            for (s, &m) in scores.iter().zip(&members) {
                let mj = src(m);
                for e in 0..dh {
                    merged[qi * c + h * dh + e] += s * qkv[mj * 3 * c + 2 * c + h * dh + e];
                }
            }
        }
    }
    oracle_linear(&merged, p.wout, p.bout, c, c)
}

pub struct CswParams<'a> {
    pub wqkv: &'a [f64],
    pub bqkv: &'a [f64],
    pub wout: &'a [f64],
    pub bout: &'a [f64],
    /// Per axis group: `[27, C/3]` kernel and `[C/3]` bias.
    pub lepe: [(&'a [f64], &'a [f64]); 3],
}

/// Cross-shaped attention on a `[D, H, W, C]` grid, by loops: channel third
/// `g` attends within slabs `sw` thick along axis `g` and adds a zero-padded
/// 3×3×3 depthwise correlation of its values restricted to the slab.
pub fn oracle_cswmsa(
    x: &[f64],
    grid: Dims3,
    c: usize,
    heads: usize,
    sw: usize,
    p: &CswParams,
) -> Vec<f64> {
    let n = grid.iter().product::<usize>();
    let qkv = oracle_linear(x, p.wqkv, p.bqkv, c, 3 * c);
    let cg = c / 3;
    let hg = heads / 3;
    let dh = c / heads;
    let mut merged = vec![0.0; n * c];
    for g in 0..3 {
        let width = sw.min(grid[g]);
        let (kw, kb) = p.lepe[g];
        for q in positions(grid) {
            let slab = q[g] / width;
            let members: Vec<Dims3> = positions(grid)
                .into_iter()
                .filter(|m| m[g] / width == slab)
                .collect();
            let qi = flat(q, grid);
            for h in 0..hg {
                let base = g * cg + h * dh;
                let mut scores: Vec<f64> = members
                    .iter()
                    .map(|&m| {
                        let mj = flat(m, grid);
                        (0..dh)
                            .map(|e| qkv[qi * 3 * c + base + e] * qkv[mj * 3 * c + c + base + e])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                softmax_in_place(&mut scores);
                for (s, &m) in scores.iter().zip(&members) {
                    let mj = flat(m, grid);
                    for e in 0..dh {
                        merged[qi * c + base + e] += s * qkv[mj * 3 * c + 2 * c + base + e];
                    }
                }
            }
            for ch in 0..cg {
                let mut acc = kb[ch];
                for off in 0..27 {
                    let o = [off / 9, (off / 3) % 3, off % 3].map(|v| v as isize - 1);
                    let r = [0, 1, 2].map(|a| q[a] as isize + o[a]);
                    if (0..3).any(|a| r[a] < 0 || r[a] >= grid[a] as isize) {
                        continue;
                    }
                    let r = r.map(|v| v as usize);
                    if r[g] / width != slab {
                        continue;
                    }
                    acc += kw[off * cg + ch] * qkv[flat(r, grid) * 3 * c + 2 * c + g * cg + ch];
                }
                merged[qi * c + g * cg + ch] += acc;
            }
        }
    }
    oracle_linear(&merged, p.wout, p.bout, c, c)
}

// ---------- metrics ----------

/// Dice by counting; both empty gives 1.
pub fn brute_dice(p: &[bool], g: &[bool]) -> f64 {
    let inter = p.iter().zip(g).filter(|(a, b)| **a && **b).count() as f64;
    let s = (p.iter().filter(|x| **x).count() + g.iter().filter(|x| **x).count()) as f64;
    if s == 0.0 {
        1.0
    } else {
        2.0 * inter / s
    }
}

/// Foreground voxels with at least one 6-neighbour that is background or
/// outside the grid.
pub fn brute_surface(m: &[bool], d: Dims3) -> Vec<Dims3> {
    let mut out = Vec::new();
    for p in positions(d) {
        if !m[flat(p, d)] {
            continue;
        }
        let mut edge = false;
        for a in 0..3 {
            for s in [-1isize, 1] {
                let r = p[a] as isize + s;
                if r < 0 || r >= d[a] as isize {
                    edge = true;
                } else {
                    let mut q = p;
                    q[a] = r as usize;
                    if !m[flat(q, d)] {
                        edge = true;
                    }
                }
            }
        }
        if edge {
            out.push(p);
        }
    }
    out
}

fn physical(a: Dims3, b: Dims3, sp: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| ((a[i] as f64 - b[i] as f64) * sp[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Linear-interpolated percentile on a sorted copy (`q` in 0..=100).
pub fn brute_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// HD95 over the pooled surface-to-surface distances of both directions,
/// by exhaustive pair search.
pub fn brute_hd95(p: &[bool], g: &[bool], d: Dims3, sp: [f64; 3]) -> f64 {
    let pe = p.iter().any(|x| *x);
    let ge = g.iter().any(|x| *x);
    match (pe, ge) {
        (false, false) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let dist_to = |src: &[Dims3], tgt: &[Dims3]| -> Vec<f64> {
        src.iter()
            .map(|&a| {
                tgt.iter()
                    .map(|&b| physical(a, b, sp))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let (sp_, sg) = (brute_surface(p, d), brute_surface(g, d));
    let mut pooled = dist_to(&sp_, &sg);
    pooled.extend(dist_to(&sg, &sp_));
    brute_percentile(&pooled, 95.0)
}

/// `(sensitivity, specificity)`; an undefined ratio reads 1.
pub fn brute_sens_spec(p: &[bool], g: &[bool]) -> (f64, f64) {
    let (mut tp, mut fp, mut tn, mut fne) = (0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        match (a, b) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fne += 1.0,
        }
    }
    let sens = if tp + fne == 0.0 {
        1.0
    } else {
        tp / (tp + fne)
    };
    let spec = if tn + fp == 0.0 { 1.0 } else { tn / (tn + fp) };
    (sens, spec)
}

// ---------- finite differences ----------

/// Worst relative error `|a − n| / max(|a|, |n|, floor)` between analytic
/// gradients and central differences at the given flat coordinates of a
/// parameter vector.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

//! Randomized checks shared by the module tests and the acceptance suite.
//! Each returns the measured quantity and leaves the threshold to the caller.

use crswin_core::attention::{self_attention, CrossShapedAttention};
use crswin_core::losses::{
    ce_loss, dice_loss_with, kl_div, objective, one_hot, random_probs, total_loss,
    vat_perturbation, VatAnchor, VatConfig,
};
use crswin_core::model::{ForwardCtx, SegmentationNet, SwinBlock, VoxelLinear};
use crswin_core::params::{ParamRegistry, ParamStore};
use crswin_core::tensor::Tensor;
use crswin_core::windowing::{
    cyclic_shift, inverse_cyclic_shift, patch_partition, patch_unpartition, shift_attention_mask,
    stripe_partition, stripe_reverse, window_partition, window_reverse, WindowLayout,
};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

fn pick_divisor(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let ds = divisors(n);
    ds[rng.random_range(0..ds.len())]
}

// ---------- attention ----------

pub fn sa_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(1..=12);
    let d = rng.random_range(1..=8);
    let q = rand_vec(&mut rng, t * d, 2.0);
    let k = rand_vec(&mut rng, t * d, 2.0);
    let v = rand_vec(&mut rng, t * d, 2.0);
    let mk = |x: &Vec<f64>| Tensor::new(x.clone(), &[1, t, d]).unwrap();
    let got = self_attention(&mk(&q), &mk(&k), &mk(&v)).unwrap();
    max_abs_diff(got.data(), &oracle_self_attention(&q, &k, &v, t, d))
}

/// Shifted-window attention of a random block on a grid ≤ 4³.
pub fn wmsa_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let grid: Dims3 = std::array::from_fn(|_| rng.random_range(1..=4));
    let window = grid.map(|g| pick_divisor(&mut rng, g));
    let shift = window.map(|w| {
        if w > 1 && rng.random_bool(0.7) {
            rng.random_range(1..w)
        } else {
            0
        }
    });
    let heads = [1, 2, 3][rng.random_range(0..3)];
    let c = heads * rng.random_range(1..=3);
    let layout = WindowLayout::block(grid, window, shift).unwrap();
    let mut reg = ParamRegistry::new();
    let block = SwinBlock::new(&mut reg, "b", c, heads, 2 * c, layout).unwrap();
    let mut store = ParamStore::initialize(reg.specs(), &mut rng);
    randomize(&mut store, &mut rng, 0.8);
    let x = rand_tensor(&mut rng, &[grid[0], grid[1], grid[2], c], 1.5);
    let got = block.attention(&store.bind(false), &x).unwrap();
    let a = &block.attn;
    let params = WmsaParams {
        wqkv: &store.get(a.qkv.weight).data,
        bqkv: &store.get(a.qkv.bias).data,
        wout: &store.get(a.out.weight).data,
        bout: &store.get(a.out.bias).data,
        table: &store.get(a.bias_table).data,
    };
    max_abs_diff(
        got.data(),
        &oracle_wmsa(x.data(), grid, c, heads, window, shift, &params),
    )
}

/// Cross-shaped attention with LePE on a grid ≤ 4³.
pub fn cswmsa_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let grid: Dims3 = std::array::from_fn(|_| rng.random_range(1..=4));
    let heads = [3, 6][rng.random_range(0..2)];
    let c = heads * rng.random_range(1..=2);
    let widths: Vec<usize> = (1..=4)
        .filter(|s| grid.iter().all(|&g| g % (*s).min(g) == 0))
        .collect();
    let sw = widths[rng.random_range(0..widths.len())];
    let mut reg = ParamRegistry::new();
    let attn = CrossShapedAttention::new(&mut reg, "a", c, heads, sw).unwrap();
    let mut store = ParamStore::initialize(reg.specs(), &mut rng);
    randomize(&mut store, &mut rng, 0.8);
    let x = rand_tensor(&mut rng, &[grid[0], grid[1], grid[2], c], 1.5);
    let got = attn.forward(&store.bind(false), &x).unwrap();
    let d = |id| store.get(id).data.as_slice();
    let params = CswParams {
        wqkv: d(attn.qkv.weight),
        bqkv: d(attn.qkv.bias),
        wout: d(attn.out.weight),
        bout: d(attn.out.bias),
        lepe: [0, 1, 2].map(|g| (d(attn.lepe[g].weight), d(attn.lepe[g].bias))),
    };
    max_abs_diff(
        got.data(),
        &oracle_cswmsa(x.data(), grid, c, heads, sw, &params),
    )
}

/// Largest attention mass any query of a random shifted configuration puts
/// on keys that are not its neighbours in the unshifted volume.
pub fn shift_mask_leak(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let window = [2usize, 2, 2].map(|w| w * rng.random_range(1..=2));
    let grid = window.map(|w| w * rng.random_range(2..=3));
    let shift = window.map(|w| rng.random_range(1..w));
    let layout = WindowLayout::block(grid, window, shift).unwrap();
    let (heads, c) = (2, 4);
    let mut reg = ParamRegistry::new();
    let block = SwinBlock::new(&mut reg, "b", c, heads, 8, layout.clone()).unwrap();
    let mut store = ParamStore::initialize(reg.specs(), &mut rng);
    randomize(&mut store, &mut rng, 3.0);
    let x = rand_tensor(&mut rng, &[grid[0], grid[1], grid[2], c], 3.0);
    let windows = window_partition(
        &cyclic_shift(&x, shift.map(|s| -(s as isize))).unwrap(),
        &layout,
    )
    .unwrap();
    let mask = shift_attention_mask(&layout);
    let maps = block
        .attn
        .attention_maps(&store.bind(false), &windows, Some(&mask))
        .unwrap();
    let t = layout.tokens_per_window();
    let slots = layout.slot_coords();
    let mut worst = 0.0f64;
    for w in 0..layout.num_windows() {
        for h in 0..heads {
            for i in 0..t {
                let leaked: f64 = (0..t)
                    .filter(|&j| !wrap_free(slots[w * t + i], slots[w * t + j], shift, grid))
                    .map(|j| maps.data()[((w * heads + h) * t + i) * t + j])
                    .sum();
                worst = worst.max(leaked);
            }
        }
    }
    worst
}

// ---------- layout ----------

/// One random shape through every partition/reverse pair; panics with the
/// failing transform on any mismatch.
pub fn roundtrip_case(rng: &mut ChaCha8Rng, case: usize) {
    let g: Dims3 = std::array::from_fn(|_| rng.random_range(1..=8));
    let c = rng.random_range(1..=4);
    let x = rand_tensor(rng, &[g[0], g[1], g[2], c], 10.0);

    let w = g.map(|n| pick_divisor(rng, n));
    let s = w.map(|wi| rng.random_range(0..wi));
    let layout = WindowLayout::block(g, w, s).unwrap();
    let back = window_reverse(&window_partition(&x, &layout).unwrap(), &layout).unwrap();
    assert_eq!(back.data(), x.data(), "case {case} window");

    let wp: Dims3 = std::array::from_fn(|_| rng.random_range(1..=5));
    let padded = WindowLayout::block_padded(g, wp, [0; 3]).unwrap();
    let back = window_reverse(&window_partition(&x, &padded).unwrap(), &padded).unwrap();
    assert_eq!(back.data(), x.data(), "case {case} padded window");

    let axis = rng.random_range(0..3);
    let sw = pick_divisor(rng, g[axis]);
    let (stripes, sl) = stripe_partition(&x, axis, sw).unwrap();
    assert_eq!(
        stripes.shape(),
        &[
            g[axis] / sw,
            g.iter().product::<usize>() / (g[axis] / sw),
            c
        ]
    );
    assert_eq!(
        stripe_reverse(&stripes, &sl).unwrap().data(),
        x.data(),
        "case {case} stripe"
    );

    let off: [isize; 3] =
        std::array::from_fn(|a| rng.random_range(-(g[a] as i64) * 2..=(g[a] as i64) * 2) as isize);
    let back = inverse_cyclic_shift(&cyclic_shift(&x, off).unwrap(), off).unwrap();
    assert_eq!(back.data(), x.data(), "case {case} shift");

    let mut perm = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut inv = [0usize; 4];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let back = x.permute(&perm).unwrap().permute(&inv).unwrap();
    assert_eq!(back.data(), x.data(), "case {case} permute");
    assert_eq!(back.shape(), x.shape());

    let k = g.map(|n| pick_divisor(rng, n));
    let vol = rand_tensor(rng, &[c, g[0], g[1], g[2]], 5.0);
    let tokens = patch_partition(&vol, k).unwrap();
    let map = patch_unpartition(&tokens, k, c).unwrap();
    assert_eq!(
        map.permute(&[3, 0, 1, 2]).unwrap().data(),
        vol.data(),
        "case {case} patch"
    );
}

// ---------- losses ----------

const CIN: usize = 4;
const K: usize = 3;

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..k) as u8).collect()
}

/// Largest deviation among dice(Y, Y) = −1, ce(Y, Y) = 0, KL(Y‖Y) = 0 and
/// KL(P‖P) = 0 on random labels.
pub fn loss_identity_residual(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims: Dims3 = std::array::from_fn(|_| rng.random_range(1..=5));
    let k = rng.random_range(2..=4);
    let y = one_hot(&labels(&mut rng, dims.iter().product(), k), k, dims).unwrap();
    let p = random_probs(k, dims, &mut rng);
    [
        (dice_loss_with(&y, &y, 0.0, true).unwrap().item() + 1.0).abs(),
        ce_loss(&y, &y).unwrap().item().abs(),
        kl_div(&y, &y).unwrap().item().abs(),
        kl_div(&p, &p).unwrap().item().abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// `|total − dice − ce − λ·vat|` for a random toy problem and λ.
pub fn decomposition_residual(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = VoxelLinear::new(CIN, K, 0.7);
    let store = net.init_params(seed);
    let dims: Dims3 = std::array::from_fn(|_| rng.random_range(1..=4));
    let x = rand_tensor(&mut rng, &[CIN, dims[0], dims[1], dims[2]], 1.0);
    let y = one_hot(&labels(&mut rng, dims.iter().product(), K), K, dims).unwrap();
    let lambda = rng.random_range(0.1..3.0);
    let anchor = if rng.random_bool(0.5) {
        VatAnchor::Label
    } else {
        VatAnchor::Prediction
    };
    let cfg = VatConfig {
        lambda,
        anchor,
        ..VatConfig::default()
    };
    let (terms, r) = total_loss(
        &net,
        &store,
        &store.bind(true),
        &x,
        &y,
        &cfg,
        &mut ForwardCtx::eval(),
        &mut rng,
    )
    .unwrap();
    assert!(r.is_some() && terms.vat.is_some());
    let rep = terms.report();
    assert_eq!(rep.lambda, lambda);
    let plain = objective(
        &net,
        &store.bind(true),
        &x,
        &y,
        None,
        None,
        &VatConfig::disabled(),
        &mut ForwardCtx::eval(),
    )
    .unwrap()
    .report();
    assert_eq!((plain.vat, plain.lambda), (0.0, 0.0));
    (rep.total - rep.dice - rep.ce - lambda * rep.vat)
        .abs()
        .max((plain.total - plain.dice - plain.ce).abs())
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

/// Label anchor, one power step: the perturbation must follow the closed-form
/// gradient of `KL(y ‖ softmax(W·(x + ξ·d0) + b))`, with `d0` replayed from a
/// clone of the generator. Returns `(|‖r‖ − ε|, cosine)`.
pub fn vat_label_toy(seed: u64) -> (f64, f64) {
    const V: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = VoxelLinear::new(CIN, K, 1.0);
    let store = net.init_params(seed + 1000);
    let x = rand_vec(&mut rng, CIN * V, 1.0);
    let y = one_hot(&labels(&mut rng, V, K), K, [2, 2, 2]).unwrap();
    let cfg = VatConfig::default();
    let mut replay = rng.clone();
    let d0: Vec<f64> = (0..CIN * V)
        .map(|_| StandardNormal.sample(&mut replay))
        .collect();
    let n0 = norm(&d0);
    let xt = Tensor::new(x.clone(), &[CIN, 2, 2, 2]).unwrap();
    let r = vat_perturbation(&net, &store, &xt, &y, &cfg, &mut rng).unwrap();

    // d/dx_v KL(y ‖ p(x)) = W (p_v − y_v) / V
    let shifted: Vec<f64> = x
        .iter()
        .zip(&d0)
        .map(|(a, d)| a + cfg.xi * d / n0)
        .collect();
    let st = Tensor::new(shifted, &[CIN, 2, 2, 2]).unwrap();
    let p = net
        .logits(&store.bind(false), &st, &mut ForwardCtx::eval())
        .unwrap()
        .softmax(0)
        .unwrap()
        .to_vec();
    let w = &store.get(net.weight).data;
    let mut g = vec![0.0; CIN * V];
    for v in 0..V {
        for c in 0..CIN {
            g[c * V + v] = (0..K)
                .map(|k| w[c * K + k] * (p[k * V + v] - y.data()[k * V + v]))
                .sum::<f64>()
                / V as f64;
        }
    }
    ((norm(r.data()) - cfg.epsilon).abs(), cosine(r.data(), &g))
}

/// Prediction anchor, many power steps at small ξ: the perturbation must
/// align with the top eigenvector of the curvature of `KL(p(x) ‖ p(x + r))`
/// at `r = 0`. Returns `None` when the toy's spectrum has no usable gap.
pub fn vat_prediction_toy(seed: u64) -> Option<(f64, f64)> {
    // two voxels keep the spectrum sparse enough to resolve
    const V: usize = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = VoxelLinear::new(CIN, K, 1.0);
    let store = net.init_params(seed + 1000);
    let x = rand_vec(&mut rng, CIN * V, 1.0);
    let y = one_hot(&labels(&mut rng, V, K), K, [1, 1, V]).unwrap();
    let cfg = VatConfig {
        xi: 1e-4,
        n_power: 60,
        anchor: VatAnchor::Prediction,
        ..VatConfig::default()
    };
    let xt = Tensor::new(x, &[CIN, 1, 1, V]).unwrap();
    let r = vat_perturbation(&net, &store, &xt, &y, &cfg, &mut rng).unwrap();

    // per voxel W (diag p − p pᵀ) Wᵀ / V
    let p = net
        .logits(&store.bind(false), &xt, &mut ForwardCtx::eval())
        .unwrap()
        .softmax(0)
        .unwrap()
        .to_vec();
    let w = &store.get(net.weight).data;
    let n = CIN * V;
    let mut h = DMatrix::<f64>::zeros(n, n);
    for v in 0..V {
        for a in 0..CIN {
            for b in 0..CIN {
                let mut s = 0.0;
                for i in 0..K {
                    for j in 0..K {
                        let f =
                            if i == j { p[i * V + v] } else { 0.0 } - p[i * V + v] * p[j * V + v];
                        s += w[a * K + i] * f * w[b * K + j];
                    }
                }
                h[(a * V + v, b * V + v)] = s / V as f64;
            }
        }
    }
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    if eig.eigenvalues[order[1]] / eig.eigenvalues[order[0]] > 0.8 {
        return None;
    }
    let top: Vec<f64> = eig.eigenvectors.column(order[0]).iter().copied().collect();
    Some((
        (norm(r.data()) - cfg.epsilon).abs(),
        cosine(r.data(), &top).abs(),
    ))
}

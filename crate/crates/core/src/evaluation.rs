//! Overlap and boundary metrics over the nested tumor regions, and box-plot
//! summaries.
//!
//! Empty-set conventions:
//! * Dice: both empty → 1.
//! * HD95: both empty → 0; exactly one empty → `f64::INFINITY`.
//! * Sensitivity (empty ground truth) and specificity (no negatives) are
//!   reported as 1 with the matching flag set.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volume_io::{remap_labels, LabelAlphabet, LabelMask, RemapDirection};
use crate::windowing::Dims3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("grid mismatch: {0:?} vs {1:?}")]
    Grid(Dims3, Dims3),
    #[error("mask has {len} voxels, grid {dims:?} needs {}", dims.iter().product::<usize>())]
    Length { len: usize, dims: Dims3 },
    #[error("label {0} is outside the external alphabet")]
    Label(u8),
    #[error("box-plot statistics need at least one value")]
    Empty,
    #[error("box-plot statistics need finite values, got {0}")]
    NonFinite(f64),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Et,
    Tc,
    Wt,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Et, Region::Tc, Region::Wt];

    pub fn name(self) -> &'static str {
        match self {
            Region::Et => "ET",
            Region::Tc => "TC",
            Region::Wt => "WT",
        }
    }

    /// Member labels in the external alphabet.
    pub fn labels(self) -> &'static [u8] {
        match self {
            Region::Et => &[4],
            Region::Tc => &[1, 4],
            Region::Wt => &[1, 2, 4],
        }
    }

    pub fn contains(self, label: u8) -> bool {
        self.labels().contains(&label)
    }

    pub fn binarize(self, mask: &LabelMask) -> Vec<bool> {
        mask.labels.iter().map(|&l| self.contains(l)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HdMode {
    /// Percentile of both directed distance sets pooled together.
    #[default]
    Pooled,
    /// Percentile per direction, then the larger of the two.
    MaxOfDirected,
}

fn check(a: &[bool], b: &[bool], dims: Dims3) -> Result<()> {
    let n = dims.iter().product::<usize>();
    for m in [a, b] {
        if m.len() != n {
            return Err(EvalError::Length { len: m.len(), dims });
        }
    }
    Ok(())
}

pub fn dice_coefficient(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(EvalError::Length {
            len: pred.len(),
            dims: [1, 1, gt.len()],
        });
    }
    let (mut inter, mut sum) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        sum += usize::from(p) + usize::from(g);
    }
    Ok(if sum == 0 {
        1.0
    } else {
        2.0 * inter as f64 / sum as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn count(pred: &[bool], gt: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// `(value, undefined)`: TP/(TP+FN), 1 when there are no positives.
    pub fn sensitivity(&self) -> (f64, bool) {
        match self.tp + self.fn_ {
            0 => (1.0, true),
            d => (self.tp as f64 / d as f64, false),
        }
    }

    /// `(value, undefined)`: TN/(TN+FP), 1 when there are no negatives.
    pub fn specificity(&self) -> (f64, bool) {
        match self.tn + self.fp {
            0 => (1.0, true),
            d => (self.tn as f64 / d as f64, false),
        }
    }
}

pub fn sensitivity_specificity(pred: &[bool], gt: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(EvalError::Length {
            len: pred.len(),
            dims: [1, 1, gt.len()],
        });
    }
    let c = Confusion::count(pred, gt);
    Ok((c.sensitivity().0, c.specificity().0))
}

/// Voxels of the set with at least one 6-neighbour outside it (the grid
/// border counts as outside).
pub fn surface(mask: &[bool], dims: Dims3) -> Vec<bool> {
    let [d, h, w] = dims;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = idx(z, y, x);
                if !mask[i] {
                    continue;
                }
                out[i] = z == 0
                    || z + 1 == d
                    || y == 0
                    || y + 1 == h
                    || x == 0
                    || x + 1 == w
                    || !mask[idx(z - 1, y, x)]
                    || !mask[idx(z + 1, y, x)]
                    || !mask[idx(z, y - 1, x)]
                    || !mask[idx(z, y + 1, x)]
                    || !mask[idx(z, y, x - 1)]
                    || !mask[idx(z, y, x + 1)];
            }
        }
    }
    out
}

/// Squared distance transform of one line: `out[p] = min_q f[q] + (s·(p−q))²`.
fn edt_line(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let pos = |q: usize| q as f64 * s;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut inter;
        loop {
            match v.last() {
                None => {
                    inter = f64::NEG_INFINITY;
                    break;
                }
                Some(&r) => {
                    let (xq, xr) = (pos(q), pos(r));
                    inter = ((f[q] + xq * xq) - (f[r] + xr * xr)) / (2.0 * (xq - xr));
                    if inter <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        break;
                    }
                }
            }
        }
        v.push(q);
        z.push(inter);
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let x = pos(p);
        while z[k + 1] < x {
            k += 1;
        }
        let dx = x - pos(v[k]);
        *o = f[v[k]] + dx * dx;
    }
}

/// Exact Euclidean distance (in mm) from every voxel centre to the nearest
/// voxel of `mask`; infinite when the mask is empty.
pub fn distance_to_set(mask: &[bool], dims: Dims3, spacing: [f64; 3]) -> Vec<f64> {
    let mut g: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    let stride = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let len = dims[axis];
        let mut line = vec![0.0; len];
        let mut res = vec![0.0; len];
        for start in 0..g.len() {
            if (start / stride[axis]) % len != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = g[start + i * stride[axis]];
            }
            edt_line(&line, spacing[axis], &mut res);
            for (i, r) in res.iter().enumerate() {
                g[start + i * stride[axis]] = *r;
            }
        }
    }
    g.into_iter().map(f64::sqrt).collect()
}

/// Linear-interpolation percentile of unsorted values (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, q)
}

fn percentile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if hi == lo {
        v[lo]
    } else {
        v[lo] + (v[hi] - v[lo]) * frac
    }
}

/// Distances from each surface voxel of `from` to the surface of `to`.
pub fn directed_surface_distances(
    from: &[bool],
    to: &[bool],
    dims: Dims3,
    spacing: [f64; 3],
) -> Vec<f64> {
    let dist = distance_to_set(&surface(to, dims), dims, spacing);
    surface(from, dims)
        .iter()
        .zip(&dist)
        .filter(|(s, _)| **s)
        .map(|(_, d)| *d)
        .collect()
}

pub fn hd95_with(
    pred: &[bool],
    gt: &[bool],
    dims: Dims3,
    spacing: [f64; 3],
    mode: HdMode,
) -> Result<f64> {
    check(pred, gt, dims)?;
    let (ep, eg) = (!pred.iter().any(|&b| b), !gt.iter().any(|&b| b));
    if ep && eg {
        return Ok(0.0);
    }
    if ep || eg {
        return Ok(f64::INFINITY);
    }
    let a = directed_surface_distances(pred, gt, dims, spacing);
    let b = directed_surface_distances(gt, pred, dims, spacing);
    Ok(match mode {
        HdMode::Pooled => {
            let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
            percentile(&pooled, 95.0)
        }
        HdMode::MaxOfDirected => percentile(&a, 95.0).max(percentile(&b, 95.0)),
    })
}

pub fn hd95(pred: &[bool], gt: &[bool], dims: Dims3, spacing: [f64; 3]) -> Result<f64> {
    hd95_with(pred, gt, dims, spacing, HdMode::Pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub dice: f64,
    pub hd95: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub empty_gt: bool,
    pub empty_pred: bool,
    pub sensitivity_undefined: bool,
    pub specificity_undefined: bool,
}

impl RegionMetrics {
    pub fn compute(pred: &[bool], gt: &[bool], dims: Dims3, spacing: [f64; 3]) -> Result<Self> {
        check(pred, gt, dims)?;
        let c = Confusion::count(pred, gt);
        let (sensitivity, sensitivity_undefined) = c.sensitivity();
        let (specificity, specificity_undefined) = c.specificity();
        Ok(Self {
            dice: dice_coefficient(pred, gt)?,
            hd95: hd95(pred, gt, dims, spacing)?,
            sensitivity,
            specificity,
            empty_gt: c.tp + c.fn_ == 0,
            empty_pred: c.tp + c.fp == 0,
            sensitivity_undefined,
            specificity_undefined,
        })
    }

    pub fn flags(&self) -> String {
        let names = [
            (self.empty_gt, "empty_gt"),
            (self.empty_pred, "empty_pred"),
            (self.sensitivity_undefined, "sens_undefined"),
            (self.specificity_undefined, "spec_undefined"),
        ];
        names
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join(";")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    /// In [`Region::ALL`] order.
    pub regions: [RegionMetrics; 3],
}

impl CaseMetrics {
    pub fn region(&self, r: Region) -> &RegionMetrics {
        &self.regions[Region::ALL.iter().position(|&x| x == r).unwrap()]
    }
}

fn external(mask: &LabelMask) -> Result<LabelMask> {
    let m = match mask.alphabet {
        LabelAlphabet::External => mask.clone(),
        LabelAlphabet::Internal => {
            remap_labels(mask, RemapDirection::ToExternal).map_err(|_| EvalError::Label(u8::MAX))?
        }
    };
    if let Some(&l) = m
        .labels
        .iter()
        .find(|&&l| !LabelAlphabet::External.contains(l))
    {
        return Err(EvalError::Label(l));
    }
    Ok(m)
}

/// Per-region metrics; internal-alphabet masks are mapped to external first.
pub fn evaluate_case(
    case_id: &str,
    pred: &LabelMask,
    gt: &LabelMask,
    spacing: [f64; 3],
) -> Result<CaseMetrics> {
    if pred.dims != gt.dims {
        return Err(EvalError::Grid(pred.dims, gt.dims));
    }
    let (p, g) = (external(pred)?, external(gt)?);
    let dims = gt.dims;
    let compute =
        |r: Region| RegionMetrics::compute(&r.binarize(&p), &r.binarize(&g), dims, spacing);
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        regions: [
            compute(Region::Et)?,
            compute(Region::Tc)?,
            compute(Region::Wt)?,
        ],
    })
}

/// Cases in parallel; results ordered by case id.
pub fn evaluate_cases(
    cases: &[(String, LabelMask, LabelMask, [f64; 3])],
) -> Result<Vec<CaseMetrics>> {
    let mut out = cases
        .par_iter()
        .map(|(id, p, g, s)| evaluate_case(id, p, g, *s))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Most extreme values inside the Tukey fences.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

pub fn boxplot_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(&v) = values.iter().find(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite(v));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (
        percentile_sorted(&v, 25.0),
        percentile_sorted(&v, 50.0),
        percentile_sorted(&v, 75.0),
    );
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v
        .iter()
        .copied()
        .filter(|x| (lo..=hi).contains(x))
        .collect();
    Ok(BoxStats {
        min: v[0],
        q1,
        median,
        q3,
        max: v[v.len() - 1],
        whisker_low: inside.first().copied().unwrap_or(q1),
        whisker_high: inside.last().copied().unwrap_or(q3),
        outliers: v
            .iter()
            .copied()
            .filter(|x| !(lo..=hi).contains(x))
            .collect(),
    })
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

pub const METRICS_CSV_HEADER: &str = "case_id,region,dice,hd95,sensitivity,specificity,flags";

pub fn metrics_csv(cases: &[CaseMetrics]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for c in cases {
        for (r, m) in Region::ALL.iter().zip(&c.regions) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.case_id,
                r.name(),
                fmt_num(m.dice),
                fmt_num(m.hd95),
                fmt_num(m.sensitivity),
                fmt_num(m.specificity),
                m.flags()
            );
        }
    }
    s
}

/// Box-plot rows per region and metric. Infinite distances and flagged
/// undefined values are left out and counted in `excluded`.
pub fn boxplot_csv(cases: &[CaseMetrics]) -> String {
    let mut s = String::from(
        "region,metric,n,excluded,min,q1,median,q3,max,whisker_low,whisker_high,outliers\n",
    );
    type Getter = fn(&RegionMetrics) -> Option<f64>;
    let metrics: [(&str, Getter); 4] = [
        ("dice", |m| Some(m.dice)),
        ("hd95", |m| m.hd95.is_finite().then_some(m.hd95)),
        ("sensitivity", |m| {
            (!m.sensitivity_undefined).then_some(m.sensitivity)
        }),
        ("specificity", |m| {
            (!m.specificity_undefined).then_some(m.specificity)
        }),
    ];
    for (ri, r) in Region::ALL.iter().enumerate() {
        for (name, get) in metrics {
            let vals: Vec<f64> = cases.iter().filter_map(|c| get(&c.regions[ri])).collect();
            let excluded = cases.len() - vals.len();
            match boxplot_stats(&vals) {
                Ok(b) => {
                    let outliers: Vec<String> = b.outliers.iter().map(|v| fmt_num(*v)).collect();
                    let _ = writeln!(
                        s,
                        "{},{name},{},{excluded},{},{},{},{},{},{},{},{}",
                        r.name(),
                        vals.len(),
                        fmt_num(b.min),
                        fmt_num(b.q1),
                        fmt_num(b.median),
                        fmt_num(b.q3),
                        fmt_num(b.max),
                        fmt_num(b.whisker_low),
                        fmt_num(b.whisker_high),
                        outliers.join(";")
                    );
                }
                Err(_) => {
                    let _ = writeln!(s, "{},{name},0,{excluded},,,,,,,,", r.name());
                }
            }
        }
    }
    s
}

/// `ET: HD 14.81, Dice 81.71, Sens 82.38, Spec 99.98` (overlap metrics in percent).
pub fn format_region_row(region: Region, m: &RegionMetrics) -> String {
    let hd = if m.hd95.is_finite() {
        format!("{:.2}", m.hd95)
    } else {
        "inf".into()
    };
    format!(
        "{}: HD {hd}, Dice {:.2}, Sens {:.2}, Spec {:.2}",
        region.name(),
        100.0 * m.dice,
        100.0 * m.sensitivity,
        100.0 * m.specificity
    )
}

/// Mean of each metric per region over cases (infinite HD95 skipped).
pub fn summary_rows(cases: &[CaseMetrics]) -> Vec<String> {
    Region::ALL
        .iter()
        .enumerate()
        .map(|(ri, r)| {
            let mean = |f: &dyn Fn(&RegionMetrics) -> f64| {
                let v: Vec<f64> = cases
                    .iter()
                    .map(|c| f(&c.regions[ri]))
                    .filter(|x| x.is_finite())
                    .collect();
                if v.is_empty() {
                    f64::INFINITY
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            let m = RegionMetrics {
                dice: mean(&|m| m.dice),
                hd95: mean(&|m| m.hd95),
                sensitivity: mean(&|m| m.sensitivity),
                specificity: mean(&|m| m.specificity),
                empty_gt: false,
                empty_pred: false,
                sensitivity_undefined: false,
                specificity_undefined: false,
            };
            format_region_row(*r, &m)
        })
        .collect()
}

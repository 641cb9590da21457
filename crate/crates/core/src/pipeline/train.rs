//! The training loop: seeded split, per-step Adam with polynomial decay,
//! periodic validation, best-checkpoint tracking and a per-step loss log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::infer::{argmax_classes, classes_to_mask, volume_tensor};
use super::optim::{poly_lr, Adam};
use super::preprocess::preprocess;
use super::{PipelineError, Result, TrainConfig};
use crate::evaluation::{dice_coefficient, Region};
use crate::losses::{one_hot, total_loss, LossReport};
use crate::model::{save_checkpoint, CrSwin2Vt, ForwardCtx, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::volume_io::{remap_labels, LabelAlphabet, LabelMask, RemapDirection, Volume};

#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub mask: LabelMask,
}

/// Seeded shuffle, then the first `round(n·fraction)` cases (at least one)
/// train and the rest validate.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64 * fraction).round() as usize).clamp(n.min(1), n);
    let val = idx.split_off(k);
    (idx, val)
}

/// Dense class ids for a `classes`-way head: the internal labels for four
/// classes, whole tumor vs background for two.
pub fn training_labels(mask: &LabelMask, classes: usize) -> Result<Vec<u8>> {
    let internal = match mask.alphabet {
        LabelAlphabet::Internal => mask.clone(),
        LabelAlphabet::External => remap_labels(mask, RemapDirection::ToInternal)?,
    };
    match classes {
        4 => Ok(internal.labels),
        2 => Ok(internal.labels.iter().map(|&l| u8::from(l != 0)).collect()),
        k => Err(PipelineError::Config(format!(
            "no label mapping for {k} classes"
        ))),
    }
}

/// A case ready for the network: normalized, cropped input and one-hot target.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub id: String,
    pub input: Vec<f64>,
    pub input_shape: [usize; 4],
    pub onehot: Vec<f64>,
    pub mask: LabelMask,
}

impl PreparedCase {
    pub fn input_tensor(&self) -> Tensor {
        Tensor::new(self.input.clone(), &self.input_shape).expect("prepared shape")
    }

    pub fn onehot_tensor(&self, classes: usize) -> Tensor {
        let [_, d, h, w] = self.input_shape;
        Tensor::new(self.onehot.clone(), &[classes, d, h, w]).expect("prepared shape")
    }
}

pub fn prepare_case(case: &Case, cfg: &TrainConfig) -> Result<PreparedCase> {
    let m = &cfg.model;
    if case.volume.num_channels() != m.in_channels {
        return Err(PipelineError::Shape(format!(
            "{}: {} channels, model expects {}",
            case.id,
            case.volume.num_channels(),
            m.in_channels
        )));
    }
    let pre = preprocess(
        &case.volume,
        Some(&case.mask),
        cfg.clip_range(),
        cfg.crop_size,
    );
    let mask = pre.mask.expect("mask given");
    let labels = training_labels(&mask, m.num_classes)?;
    let onehot = one_hot(&labels, m.num_classes, cfg.crop_size)?.to_vec();
    let input = volume_tensor(&pre.volume);
    let [d, h, w] = cfg.crop_size;
    Ok(PreparedCase {
        id: case.id.clone(),
        input: input.to_vec(),
        input_shape: [m.in_channels, d, h, w],
        onehot,
        mask,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub dice: f64,
    pub ce: f64,
    pub vat: f64,
    pub lambda: f64,
    pub total: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,epoch,lr,dice,ce,vat,lambda,total";

impl StepLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:e},{:.9},{:.9},{:.9},{},{:.9}",
            self.step, self.epoch, self.lr, self.dice, self.ce, self.vat, self.lambda, self.total
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub best_params: ParamStore,
    pub log: Vec<StepLog>,
    /// `(epoch, mean foreground Dice)` per validation.
    pub validation: Vec<(usize, f64)>,
    pub best_dice: f64,
    pub best_epoch: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Mean Dice over the regions the head can express (WT only for two classes).
pub fn foreground_dice(model: &CrSwin2Vt, params: &ParamStore, case: &PreparedCase) -> Result<f64> {
    let cfg = model.config();
    let logits = model.predict(params, &case.input_tensor())?;
    let probs = logits.softmax(0)?;
    let pred = classes_to_mask(
        &argmax_classes(probs.data(), cfg.num_classes),
        cfg.num_classes,
        case.mask.dims,
    )?;
    let gt = match case.mask.alphabet {
        LabelAlphabet::External => case.mask.clone(),
        LabelAlphabet::Internal => remap_labels(&case.mask, RemapDirection::ToExternal)?,
    };
    let regions: &[Region] = if cfg.num_classes == 2 {
        &[Region::Wt]
    } else {
        &Region::ALL
    };
    let mut sum = 0.0;
    for r in regions {
        sum += dice_coefficient(&r.binarize(&pred), &r.binarize(&gt))?;
    }
    Ok(sum / regions.len() as f64)
}

/// Trains from `init` (or a seeded initialization). With `out_dir`, writes
/// `loss_log.csv`, `best.crck`, `final.crck` and periodic checkpoints.
pub fn train(
    cases: &[Case],
    cfg: &TrainConfig,
    init: Option<ParamStore>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let model = CrSwin2Vt::new(cfg.model.clone())?;
    let mut params = match init {
        Some(p) if p.matches(model.param_specs()) => p,
        Some(_) => return Err(PipelineError::Model(crate::model::ModelError::ParamLayout)),
        None => model.init_params(cfg.seed),
    };
    let (train_idx, val_idx) = split_indices(cases.len(), cfg.split_fraction, cfg.seed);
    let prepared: Vec<PreparedCase> = cases
        .iter()
        .map(|c| prepare_case(c, cfg))
        .collect::<Result<_>>()?;
    let val_set: Vec<usize> = if val_idx.is_empty() {
        log::warn!("no held-out cases; validating on the training set");
        train_idx.clone()
    } else {
        val_idx.clone()
    };
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = BufWriter::new(File::create(dir.join("loss_log.csv"))?);
            writeln!(f, "{LOSS_LOG_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut vat_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut adam = Adam::new(&params);
    let mut log = Vec::with_capacity(total_steps);
    let mut validation = Vec::new();
    let (mut best_dice, mut best_epoch, mut best_params) = (f64::NEG_INFINITY, 0, params.clone());
    let mut step = 0;
    let k = cfg.model.num_classes;
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            let lr = poly_lr(step, total_steps, cfg.lr, cfg.poly_power);
            let mut grads: Vec<Vec<f64>> = params
                .entries()
                .iter()
                .map(|e| vec![0.0; e.data.len()])
                .collect();
            let mut reports: Vec<LossReport> = Vec::with_capacity(batch.len());
            for &ci in batch {
                let case = &prepared[ci];
                let bound = params.bind(true);
                let mut ctx = if cfg.model.drop_rate > 0.0 {
                    ForwardCtx::train(
                        cfg.model.drop_rate,
                        ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut drop_rng)),
                    )
                } else {
                    ForwardCtx::eval()
                };
                let (terms, _) = total_loss(
                    &model,
                    &params,
                    &bound,
                    &case.input_tensor(),
                    &case.onehot_tensor(k),
                    &cfg.vat,
                    &mut ctx,
                    &mut vat_rng,
                )?;
                let report = terms.report();
                if !report.total.is_finite() {
                    return Err(PipelineError::NonFinite {
                        step,
                        detail: format!("case {}: {report:?}", case.id),
                    });
                }
                terms.total.backward()?;
                for (g, b) in grads.iter_mut().zip(bound.grads()) {
                    g.iter_mut().zip(b).for_each(|(a, x)| *a += x);
                }
                reports.push(report);
            }
            let scale = 1.0 / batch.len() as f64;
            grads
                .iter_mut()
                .for_each(|g| g.iter_mut().for_each(|x| *x *= scale));
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(PipelineError::NonFinite {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            adam.update(&mut params, &grads, lr)?;
            let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() * scale;
            let entry = StepLog {
                step,
                epoch,
                lr,
                dice: mean(|r| r.dice),
                ce: mean(|r| r.ce),
                vat: mean(|r| r.vat),
                lambda: reports[0].lambda,
                total: mean(|r| r.total),
            };
            log::debug!("{}", entry.csv_line());
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", entry.csv_line())?;
            }
            log.push(entry);
            step += 1;
        }
        if let Some(f) = log_file.as_mut() {
            f.flush()?;
        }
        let last = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.validate_every == 0 || last {
            let mut sum = 0.0;
            for &vi in &val_set {
                sum += foreground_dice(&model, &params, &prepared[vi])?;
            }
            let dice = sum / val_set.len() as f64;
            log::info!("epoch {epoch}: validation Dice {dice:.4}");
            validation.push((epoch, dice));
            if dice > best_dice {
                best_dice = dice;
                best_epoch = epoch;
                best_params = params.clone();
                if let Some(dir) = out_dir {
                    save_checkpoint(&dir.join("best.crck"), &cfg.model, &params)?;
                }
            }
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(
                    &dir.join(format!("epoch_{:04}.crck", epoch + 1)),
                    &cfg.model,
                    &params,
                )?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("final.crck"), &cfg.model, &params)?;
        std::fs::write(dir.join("train_config.toml"), cfg.to_toml())?;
    }
    let ids = |v: &[usize]| v.iter().map(|&i| cases[i].id.clone()).collect();
    Ok(TrainOutcome {
        params,
        best_params,
        log,
        validation,
        best_dice,
        best_epoch,
        train_ids: ids(&train_idx),
        val_ids: ids(&val_idx),
    })
}

/// Convenience for callers holding only a model config.
pub fn model_for(cfg: &ModelConfig) -> Result<CrSwin2Vt> {
    Ok(CrSwin2Vt::new(cfg.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_seeded_and_sized() {
        let (a, b) = split_indices(10, 0.8, 4);
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split_indices(10, 0.8, 4), (a.clone(), b));
        let mut all = a;
        all.extend(split_indices(10, 0.8, 4).1);
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(1, 0.8, 0), (vec![0], vec![]));
    }
}

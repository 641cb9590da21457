//! `crswin` command line: synthetic data, training, inference, evaluation
//! and slice export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crswin_core::evaluation::{boxplot_csv, evaluate_cases, metrics_csv, summary_rows, EvalError};
use crswin_core::model::{read_checkpoint, CrSwin2Vt};
use crswin_core::pipeline::{
    case_id, classes_to_mask, discover_cases, export_slices, load_case, load_mask,
    normalize_intensities, save_mask, sliding_window_infer, train, Case, PatchWeighting,
    PipelineError, SliceAxis, TrainConfig,
};
use crswin_core::volume_io::{generate_synthetic, write_raw, DEFAULT_DIFFICULTY};

#[derive(Parser)]
#[command(
    name = "crswin",
    version,
    about = "Volumetric brain tumor segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic four-modality cases as .crsv files.
    Gen(GenArgs),
    /// Train on a directory of cases.
    Train(TrainArgs),
    /// Segment one case with a checkpoint.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Write color-coded slices as PPM images.
    ExportSlices(ExportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seed: u64,
    /// Grid as D,H,W.
    #[arg(long, value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long)]
    out: PathBuf,
    /// Number of cases; seeds run from `seed` upwards.
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Noise standard deviation relative to the intensity scale.
    #[arg(long, default_value_t = DEFAULT_DIFFICULTY)]
    difficulty: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML file with training config fields; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Use the full-size model and 128³ crops.
    #[arg(long)]
    paper_config: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A .crsv case or a NIfTI case directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output mask (.nii).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    /// Weight patch centres higher when averaging overlapping patches.
    #[arg(long)]
    gaussian: bool,
    /// Skip percentile clipping before min-max scaling.
    #[arg(long)]
    no_clip: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted masks (.nii or .crsv).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of reference masks, .crsv cases or NIfTI case directories.
    #[arg(long)]
    gt: PathBuf,
    /// Per-case metrics CSV; box-plot statistics go next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, default_value = "z")]
    axis: String,
    /// Slice indices, comma separated; slices with labels when omitted.
    #[arg(long, value_delimiter = ',')]
    slices: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected D,H,W, got {s:?}"));
    }
    let mut dims = [0; 3];
    for (d, p) in dims.iter_mut().zip(parts) {
        *d = p.parse().map_err(|_| format!("bad dimension {p:?}"))?;
    }
    Ok(dims)
}

fn exit_code(err: &PipelineError) -> u8 {
    match err {
        PipelineError::NonFinite { .. }
        | PipelineError::Tensor(_)
        | PipelineError::Eval(EvalError::NonFinite(_)) => 3,
        _ => 2,
    }
}

fn run_gen(a: GenArgs) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&a.out)?;
    for seed in a.seed..a.seed + a.count {
        let (volume, mask) = generate_synthetic(seed, a.dims, a.difficulty)?;
        let path = a.out.join(format!("{}.crsv", volume.id));
        write_raw(&path, &volume, &mask)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<(), PipelineError> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if a.paper_config {
        let paper = TrainConfig::paper();
        cfg.model = paper.model;
        cfg.crop_size = paper.crop_size;
    }
    let mut cases = Vec::new();
    for path in discover_cases(&a.data)? {
        let (volume, mask) = load_case(&path)?;
        let mask = mask
            .ok_or_else(|| PipelineError::Config(format!("{}: no segmentation", path.display())))?;
        cases.push(Case {
            id: case_id(&path),
            volume,
            mask,
        });
    }
    let outcome = train(&cases, &cfg, None, Some(&a.out))?;
    println!(
        "trained {} steps on {} cases; best validation Dice {:.4} at epoch {}",
        outcome.log.len(),
        outcome.train_ids.len(),
        outcome.best_dice,
        outcome.best_epoch + 1
    );
    println!("checkpoint: {}", a.out.join("best.crck").display());
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<(), PipelineError> {
    let ck = read_checkpoint(&a.ckpt)?;
    let net = CrSwin2Vt::new(ck.config.clone())?;
    let (volume, _) = load_case(&a.input)?;
    let clip = (!a.no_clip).then_some([0.5, 99.5]);
    let (norm, _) = normalize_intensities(&volume, clip);
    let weighting = if a.gaussian {
        PatchWeighting::Gaussian
    } else {
        PatchWeighting::Uniform
    };
    let out = sliding_window_infer(
        &net,
        &ck.params,
        &norm,
        ck.config.input_dims,
        a.overlap,
        weighting,
    )?;
    let mask = classes_to_mask(&out.classes_map, out.classes, out.dims)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_mask(&a.out, &mask, volume.spacing)?;
    println!("{}", a.out.display());
    Ok(())
}

/// Mask id from a file name, without a trailing `_seg` or `_pred`.
fn mask_id(path: &Path) -> String {
    let id = case_id(path);
    for suffix in ["_seg", "_pred"] {
        if let Some(s) = id.strip_suffix(suffix) {
            return s.to_string();
        }
    }
    id
}

fn mask_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, PipelineError> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let ext = p.extension().map(|e| e.to_string_lossy().to_lowercase());
        if p.is_file() && matches!(ext.as_deref(), Some("nii") | Some("crsv")) {
            out.insert(mask_id(&p), p);
        }
    }
    for p in discover_cases(dir)? {
        out.entry(case_id(&p)).or_insert(p);
    }
    Ok(out)
}

fn run_eval(a: EvalArgs) -> Result<(), PipelineError> {
    let preds = mask_files(&a.pred)?;
    let gts = mask_files(&a.gt)?;
    if preds.is_empty() {
        return Err(PipelineError::Config(format!(
            "no masks in {}",
            a.pred.display()
        )));
    }
    let mut cases = Vec::with_capacity(preds.len());
    for (id, p) in &preds {
        let g = gts
            .get(id)
            .ok_or_else(|| PipelineError::Config(format!("no reference mask for case {id}")))?;
        let (pred, _) = load_mask(p)?;
        let (gt, spacing) = load_mask(g)?;
        cases.push((id.clone(), pred, gt, spacing));
    }
    let metrics = evaluate_cases(&cases)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.out, metrics_csv(&metrics))?;
    let stem = a
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "metrics".into());
    let box_path = a.out.with_file_name(format!("{stem}_boxplot.csv"));
    std::fs::write(&box_path, boxplot_csv(&metrics))?;
    for row in summary_rows(&metrics) {
        println!("{row}");
    }
    Ok(())
}

fn run_export(a: ExportArgs) -> Result<(), PipelineError> {
    let axis = SliceAxis::parse(&a.axis)?;
    let (volume, _) = load_case(&a.input)?;
    let (pred, _) = load_mask(&a.pred)?;
    let gt = a.gt.as_deref().map(load_mask).transpose()?.map(|(m, _)| m);
    for p in export_slices(
        &volume,
        &pred,
        gt.as_ref(),
        axis,
        a.slices.as_deref(),
        &a.out,
    )? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::ExportSlices(a) => run_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Case discovery and loading: CRSV files, or directories of per-modality
//! NIfTI files named `<id>_t1.nii`, `<id>_t1ce.nii`, `<id>_t2.nii`,
//! `<id>_flair.nii` and optionally `<id>_seg.nii`.

use std::path::{Path, PathBuf};

use super::{PipelineError, Result};
use crate::volume_io::{
    load_nifti_case, read_nifti, read_raw, write_nifti, LabelAlphabet, LabelMask, NiftiDatatype,
    NiftiImage, Volume, MODALITIES,
};

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn nifti_member(dir: &Path, suffix: &str) -> Result<Option<PathBuf>> {
    let want = format!("_{suffix}.nii");
    let mut found = None;
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if name.ends_with(&want) {
            found = Some(p);
        }
    }
    Ok(found)
}

fn is_nifti_case(dir: &Path) -> bool {
    dir.is_dir() && matches!(nifti_member(dir, "flair"), Ok(Some(_)))
}

/// Case files and NIfTI case directories under `dir`, sorted by path.
pub fn discover_cases(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if (p.is_file() && has_ext(&p, "crsv")) || is_nifti_case(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Case id from its path: the file stem, or the directory name.
pub fn case_id(path: &Path) -> String {
    if path.is_dir() {
        path.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    } else {
        file_stem(path)
    }
}

pub fn load_case(path: &Path) -> Result<(Volume, Option<LabelMask>)> {
    if path.is_dir() {
        let mut files = Vec::with_capacity(4);
        for m in MODALITIES {
            files.push(nifti_member(path, m)?.ok_or_else(|| {
                PipelineError::Config(format!("{}: missing *_{m}.nii", path.display()))
            })?);
        }
        let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
        let seg = nifti_member(path, "seg")?;
        return Ok(load_nifti_case(&case_id(path), &refs, seg.as_deref())?);
    }
    if has_ext(path, "crsv") {
        let (v, m) = read_raw(path)?;
        return Ok((v, Some(m)));
    }
    Err(PipelineError::Config(format!(
        "{}: expected a .crsv file or a NIfTI case directory",
        path.display()
    )))
}

/// Label mask from a `.nii` segmentation or the mask part of a `.crsv` case.
pub fn load_mask(path: &Path) -> Result<(LabelMask, [f64; 3])> {
    if has_ext(path, "nii") {
        let img = read_nifti(path)?;
        return Ok((img.to_label_mask(LabelAlphabet::External)?, img.spacing()));
    }
    if has_ext(path, "crsv") {
        let (v, m) = read_raw(path)?;
        return Ok((m, v.spacing));
    }
    if path.is_dir() {
        if let Some(seg) = nifti_member(path, "seg")? {
            return load_mask(&seg);
        }
    }
    Err(PipelineError::Config(format!(
        "{}: expected a .nii or .crsv mask",
        path.display()
    )))
}

/// Writes a mask as an 8-bit NIfTI label image.
pub fn save_mask(path: &Path, mask: &LabelMask, spacing: [f64; 3]) -> Result<()> {
    let raw = mask.labels.iter().map(|&l| l as f64).collect();
    let img = NiftiImage::from_values(mask.dims, spacing, NiftiDatatype::U8, raw)?;
    write_nifti(path, &img)?;
    Ok(())
}

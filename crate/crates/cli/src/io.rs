//! File access for the commands. Every error carries the offending path.

use std::path::{Path, PathBuf};

use fishdet_core::evaluation::parse_ground_truth;
use fishdet_core::postprocess::parse_detections;
use fishdet_core::{DetectionSet, Error, GroundTruthSet, ImageTensor, Manifest};
use rayon::prelude::*;

use crate::error::{CliError, CliResult};

pub fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::at(path, e.into()))
}

/// Writes to `path`, or stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::at(p, e.into())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn detections(path: &Path) -> CliResult<Vec<DetectionSet>> {
    let tag = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_detections(&read(path)?, &tag).map_err(|e| CliError::at(path, e))
}

pub fn ground_truth(path: &Path) -> CliResult<Vec<GroundTruthSet>> {
    parse_ground_truth(&read(path)?).map_err(|e| CliError::at(path, e))
}

pub fn manifest(records: &Path, annotations: Option<&Path>) -> CliResult<Manifest> {
    let records_src = read(records)?;
    let bare = Manifest::parse(&records_src, None).map_err(|e| CliError::at(records, e))?;
    match annotations {
        None => Ok(bare),
        Some(a) => Manifest::parse(&records_src, Some(&read(a)?)).map_err(|e| CliError::at(a, e)),
    }
}

pub fn save_manifest(m: &Manifest, records: Option<&Path>, annotations: Option<&Path>) -> CliResult<()> {
    emit(records, &m.records_text())?;
    if let Some(a) = annotations {
        emit(Some(a), &m.annotations_text())?;
    }
    Ok(())
}

/// Loads an RGB image as `[0, 1]` values. Files ending in `.tensor` are read
/// as tensor text instead.
pub fn image(path: &Path) -> CliResult<ImageTensor> {
    if path.extension().is_some_and(|e| e == "tensor") {
        return ImageTensor::from_text(&read(path)?).map_err(|e| CliError::at(path, e));
    }
    let img = image::open(path)
        .map_err(|e| CliError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(ImageTensor::new(h, w, 3, data)?)
}

pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads an image list: one image per line, either `path` (id is the file
/// stem) or `image_id path`. Relative paths resolve against the list's
/// directory.
pub fn image_list(path: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (line, f) in fishdet_core::text::records(&read(path)?) {
        let (id, p) = match f.as_slice() {
            [p] => (
                Path::new(p).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                *p,
            ),
            [id, p] => (id.to_string(), *p),
            _ => {
                let e = Error::Parse {
                    line,
                    message: format!("expected `path` or `image_id path`, got {} fields", f.len()),
                };
                return Err(CliError::at(path, e));
            }
        };
        out.push((id, resolve(base, p)));
    }
    Ok(out)
}

/// Loads many images in parallel, keeping input order.
pub fn images(entries: &[(String, PathBuf)]) -> CliResult<Vec<(String, ImageTensor)>> {
    entries.par_iter().map(|(id, p)| Ok((id.clone(), image(p)?))).collect()
}

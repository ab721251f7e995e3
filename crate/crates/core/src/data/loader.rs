//! Class-per-directory image loading and the dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{validation_err, Error, Result};

use super::image::{resize_bilinear, to_model_channels};
use super::pnm::PnmImage;
use super::{Dataset, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    /// Images are resized to `size × size`.
    pub size: usize,
    /// Grayscale is replicated to this many channels.
    pub channels: usize,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Reads, resizes and normalizes one image file.
pub fn load_image(path: &Path, opts: LoadOptions) -> Result<crate::tensor::Tensor> {
    let gray = PnmImage::read(path)?.to_gray();
    let resized = resize_bilinear(&gray, opts.size, opts.size)?;
    Ok(to_model_channels(&resized.normalized(), opts.channels))
}

/// Loads `root/<class>/<image>` files. Class names are the sorted
/// subdirectory names; non-image files are skipped with a warning.
pub fn load_dataset_dir(root: &Path, opts: LoadOptions) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Path(root.to_path_buf()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(validation_err!("{} has no class subdirectories", root.display()));
    }
    let mut class_names = Vec::new();
    let mut jobs: Vec<(usize, PathBuf, String)> = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| validation_err!("class directory {} is not valid UTF-8", dir.display()))?
            .to_string();
        let mut found = 0;
        for file in sorted_entries(dir)? {
            if !file.is_file() {
                continue;
            }
            if !is_image(&file) {
                log::warn!("skipping non-image file {}", file.display());
                continue;
            }
            let fname = file.file_name().unwrap().to_string_lossy().into_owned();
            jobs.push((label, file, format!("{name}/{fname}")));
            found += 1;
        }
        if found == 0 {
            return Err(validation_err!("class directory {} contains no images", dir.display()));
        }
        class_names.push(name);
    }

    let loaded: Vec<std::result::Result<Sample, (PathBuf, String)>> = jobs
        .into_par_iter()
        .map(|(label, path, source_id)| match load_image(&path, opts) {
            Ok(image) => Ok(Sample { image, label, source_id }),
            Err(e) => Err((path, e.to_string())),
        })
        .collect();
    let mut samples = Vec::with_capacity(loaded.len());
    let mut failures = Vec::new();
    for item in loaded {
        match item {
            Ok(s) => samples.push(s),
            Err(f) => failures.push(f),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Load(failures));
    }
    Ok(Dataset::new(samples, class_names, 0))
}

/// One manifest line: `path,class,split`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub class: String,
    pub split: String,
}

pub const MANIFEST_HEADER: &str = "path,class,split";

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        for field in [&r.path, &r.class, &r.split] {
            if field.contains([',', '\n', '\r']) {
                return Err(validation_err!("manifest field `{field}` contains a separator"));
            }
        }
        out.push_str(&format!("{},{},{}\n", r.path, r.class, r.split));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("{} does not start with `{MANIFEST_HEADER}`", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let parts: Vec<&str> = line.split(',').collect();
            match parts.as_slice() {
                [p, c, s] => {
                    Ok(ManifestRecord { path: p.to_string(), class: c.to_string(), split: s.to_string() })
                }
                _ => Err(Error::Format(format!("manifest line {} malformed: `{line}`", i + 2))),
            }
        })
        .collect()
}

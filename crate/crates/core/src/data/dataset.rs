use std::collections::BTreeSet;
use std::path::Path;

use super::ppm::{is_image_file, read_image};
use super::ImagePair;
use crate::error::{HitError, Result};
use crate::scalar::Scalar;

fn image_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && is_image_file(&path) {
            if let Some(n) = path.file_name().and_then(|n| n.to_str()) {
                names.insert(n.to_owned());
            }
        }
    }
    Ok(names)
}

/// Loads `dir/degraded/*` and `dir/clean/*` paired by file name, in name order.
/// Files present on only one side are reported as orphans.
pub fn load_paired<T: Scalar>(dir: &Path) -> Result<Vec<(String, ImagePair<T>)>> {
    let (deg_dir, clean_dir) = (dir.join("degraded"), dir.join("clean"));
    let deg = image_names(&deg_dir)?;
    let clean = image_names(&clean_dir)?;
    let orphans: Vec<String> = deg
        .symmetric_difference(&clean)
        .map(|n| {
            let side = if deg.contains(n) { "degraded" } else { "clean" };
            format!("{side}/{n}")
        })
        .collect();
    if !orphans.is_empty() {
        return Err(HitError::Unpaired(orphans));
    }
    deg.into_iter()
        .map(|n| {
            let pair = ImagePair::new(read_image(&deg_dir.join(&n))?, read_image(&clean_dir.join(&n))?)?;
            Ok((n, pair))
        })
        .collect()
}

/// Loads every image in `dir` in name order.
pub fn load_images<T: Scalar>(dir: &Path) -> Result<Vec<(String, crate::tensor::Tensor<T>)>> {
    image_names(dir)?
        .into_iter()
        .map(|n| Ok((n.clone(), read_image(&dir.join(&n))?)))
        .collect()
}

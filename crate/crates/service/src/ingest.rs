//! Reading images from disk and turning class folders into labelled features.

use std::path::{Path, PathBuf};

use pilesort_core::features::{extract_features, ExtractorSpec, FeatureVector, ImageRecord};
use pilesort_core::fewshot::LabeledFeatures;
use pilesort_core::Exec;
use walkdir::WalkDir;

use crate::error::{Result, ServiceError};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes a PNG or JPEG file into an RGB record.
pub fn load_image(path: &Path, id: impl Into<String>) -> Result<ImageRecord> {
    let img = image::open(path).map_err(|e| ServiceError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decoded_to_record(img, id)
}

/// Decodes an in-memory PNG or JPEG.
pub fn decode_image(bytes: &[u8], id: impl Into<String>) -> Result<ImageRecord> {
    let id = id.into();
    let img = image::load_from_memory(bytes).map_err(|e| ServiceError::Image {
        path: PathBuf::from(&id),
        message: e.to_string(),
    })?;
    decoded_to_record(img, id)
}

fn decoded_to_record(img: image::DynamicImage, id: impl Into<String>) -> Result<ImageRecord> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(ImageRecord::new(id, w as usize, h as usize, rgb.into_raw())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub data: LabeledFeatures,
    /// Files successfully read.
    pub files: usize,
    pub skipped: Vec<SkippedFile>,
}

/// Image files directly inside `dir`, sorted by name.
fn images_in(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .min_depth(1)
        .max_depth(1)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && is_image_path(e.path()))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    files
}

/// Every directory under `root` (itself included) that directly holds
/// image files, keyed by its `/`-joined path relative to `root`.
pub fn class_folders(root: &Path) -> Result<Vec<(String, Vec<PathBuf>)>> {
    if !root.is_dir() {
        return Err(ServiceError::BadRequest(format!("{} is not a directory", root.display())));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| ServiceError::BadRequest(format!("cannot walk {}: {e}", root.display())))?;
        if !entry.file_type().is_dir() {
            continue;
        }
        let files = images_in(entry.path());
        if files.is_empty() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
        let name = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        out.push((if name.is_empty() { ".".to_string() } else { name }, files));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Reads a folder-per-class dataset. Nested layouts such as
/// `alphabet/character/*.png` make each leaf folder one class. Unreadable
/// files are skipped and reported; a dataset without any readable class is
/// an error.
pub fn ingest_dataset(root: &Path, extractor: ExtractorSpec, exec: Exec) -> Result<IngestReport> {
    let folders = class_folders(root)?;
    let jobs: Vec<(usize, &PathBuf)> = folders
        .iter()
        .enumerate()
        .flat_map(|(c, (_, files))| files.iter().map(move |f| (c, f)))
        .collect();
    let decoded = exec.map_slice(&jobs, |(_, path)| -> Result<FeatureVector> {
        let img = load_image(path, path.to_string_lossy())?;
        Ok(extract_features(&img, extractor)?)
    });
    let mut classes: Vec<(String, Vec<FeatureVector>)> = folders.iter().map(|(n, _)| (n.clone(), Vec::new())).collect();
    let mut skipped = Vec::new();
    let mut files = 0;
    for ((c, path), res) in jobs.iter().zip(decoded) {
        match res {
            Ok(f) => {
                classes[*c].1.push(f);
                files += 1;
            }
            Err(e) => {
                tracing::warn!("skipping {}: {e}", path.display());
                skipped.push(SkippedFile {
                    path: (*path).clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    classes.retain(|(_, v)| !v.is_empty());
    if classes.is_empty() {
        return Err(ServiceError::BadRequest(format!(
            "no classes with readable images under {}",
            root.display()
        )));
    }
    Ok(IngestReport {
        data: LabeledFeatures { classes },
        files,
        skipped,
    })
}

/// Loads every image under `root` (recursively, sorted by relative path),
/// using the relative path as the image id.
pub fn load_image_tree(root: &Path, exec: Exec) -> Result<(Vec<ImageRecord>, Vec<SkippedFile>)> {
    let mut paths = Vec::new();
    for (_, files) in class_folders(root)? {
        paths.extend(files);
    }
    paths.sort();
    let loaded = exec.map_slice(&paths, |p| {
        let id = p
            .strip_prefix(root)
            .unwrap_or(p)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        load_image(p, id)
    });
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for (p, r) in paths.iter().zip(loaded) {
        match r {
            Ok(img) => images.push(img),
            Err(e) => {
                tracing::warn!("skipping {}: {e}", p.display());
                skipped.push(SkippedFile {
                    path: p.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok((images, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32, v: u8) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::from_pixel(w, h, image::Rgb([v, v, v])).save(path).unwrap();
    }

    #[test]
    fn two_folders_two_images() {
        let dir = tempfile::tempdir().unwrap();
        for (c, v) in [("cats", 10), ("dogs", 200)] {
            for i in 0..2 {
                write_png(&dir.path().join(c).join(format!("{i}.png")), 20, 18, v);
            }
        }
        let r = ingest_dataset(dir.path(), ExtractorSpec::GrayPool16, Exec::Serial).unwrap();
        assert_eq!(r.data.classes.len(), 2);
        assert_eq!(r.data.classes[0].0, "cats");
        assert!(r.data.classes.iter().all(|(_, v)| v.len() == 2 && v[0].len() == 256));
        assert!(r.skipped.is_empty());
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest_dataset(dir.path(), ExtractorSpec::GrayPool16, Exec::Serial).is_err());
        assert!(ingest_dataset(&dir.path().join("missing"), ExtractorSpec::GrayPool16, Exec::Serial).is_err());
    }

    #[test]
    fn unreadable_files_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a/0.png"), 8, 8, 1);
        std::fs::write(dir.path().join("a/1.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("a/notes.txt"), b"ignored").unwrap();
        let r = ingest_dataset(dir.path(), ExtractorSpec::GrayPool16, Exec::Parallel).unwrap();
        assert_eq!(r.files, 1);
        assert_eq!(r.skipped.len(), 1);
        assert!(r.skipped[0].path.ends_with("a/1.png"));
    }

    #[test]
    fn nested_layout_uses_leaf_folders() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("Latin/character02/b.png"), 8, 8, 1);
        write_png(&dir.path().join("Latin/character01/a.png"), 8, 8, 1);
        write_png(&dir.path().join("Greek/character01/a.PNG"), 8, 8, 1);
        let names: Vec<String> = class_folders(dir.path()).unwrap().into_iter().map(|c| c.0).collect();
        assert_eq!(names, ["Greek/character01", "Latin/character01", "Latin/character02"]);
        let (imgs, _) = load_image_tree(dir.path(), Exec::Serial).unwrap();
        let ids: Vec<&str> = imgs.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["Greek/character01/a.PNG", "Latin/character01/a.png", "Latin/character02/b.png"]);
    }
}

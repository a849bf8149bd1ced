use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{assign_splits, DotAnnotation, ImageSample, SynthConfig};
use crate::error::{Error, Result};

/// On-disk dataset layout: `root/images/<id>.<png|tif>` plus
/// `root/annotations/<id>.json`, a JSON list of `{x, y}` records in pixel
/// coordinates. All four public cell datasets convert to this form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetLayout {
    /// Seed for the deterministic 10:9:1 train:test:val assignment.
    pub split_seed: u64,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self { split_seed: 0 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotPoint {
    x: f64,
    y: f64,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

/// Loads every image/annotation pair under `root` and assigns splits.
pub fn load_dataset(root: &Path, layout: &DatasetLayout) -> Result<Vec<ImageSample>> {
    let images_dir = root.join("images");
    let annotations_dir = root.join("annotations");
    if !images_dir.is_dir() {
        log::warn!("dataset root {} has no images/ directory; returning empty dataset", root.display());
        return Ok(Vec::new());
    }

    // id -> image path, sorted for deterministic order
    let mut image_paths: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(&images_dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_lowercase();
        if IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                image_paths.insert(stem.to_string(), path.clone());
            }
        }
    }
    if image_paths.is_empty() {
        log::warn!("no images found under {}", images_dir.display());
        return Ok(Vec::new());
    }

    let missing: Vec<PathBuf> = image_paths
        .keys()
        .map(|id| annotations_dir.join(format!("{id}.json")))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingAnnotations(missing));
    }

    let ids: Vec<String> = image_paths.keys().cloned().collect();
    let splits = assign_splits(&ids, layout.split_seed);

    let mut samples = Vec::with_capacity(ids.len());
    for (id, split) in ids.iter().zip(splits) {
        let annot_path = annotations_dir.join(format!("{id}.json"));
        let text = fs::read_to_string(&annot_path)?;
        let points: Vec<AnnotPoint> = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: annot_path.clone(),
            detail: format!("line {}, column {}: {}", e.line(), e.column(), e),
        })?;
        let dots = DotAnnotation::new(points.into_iter().map(|p| (p.x, p.y)).collect());
        let image = read_image(&image_paths[id])?;
        samples.push(ImageSample::new(image, dots, id.clone(), split)?);
    }
    Ok(samples)
}

fn read_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let array = match img {
        image::DynamicImage::ImageLuma8(buf) => {
            Array3::from_shape_fn((h, w, 1), |(r, c, _)| buf.get_pixel(c as u32, r as u32)[0] as f32 / 255.0)
        }
        image::DynamicImage::ImageLuma16(buf) => {
            Array3::from_shape_fn((h, w, 1), |(r, c, _)| buf.get_pixel(c as u32, r as u32)[0] as f32 / 65535.0)
        }
        other => {
            let rgb = other.to_rgb8();
            Array3::from_shape_fn((h, w, 3), |(r, c, ch)| rgb.get_pixel(c as u32, r as u32)[ch] as f32 / 255.0)
        }
    };
    Ok(array)
}

fn write_image(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (h, w, channels) = image.dim();
    match channels {
        1 => {
            let buf = image::ImageBuffer::from_fn(w as u32, h as u32, |c, r| {
                let v = (image[[r as usize, c as usize, 0]].clamp(0.0, 1.0) * 65535.0).round() as u16;
                image::Luma([v])
            });
            image::DynamicImage::ImageLuma16(buf).save(path)?;
        }
        3 => {
            let buf = image::ImageBuffer::from_fn(w as u32, h as u32, |c, r| {
                let px = |ch: usize| {
                    (image[[r as usize, c as usize, ch]].clamp(0.0, 1.0) * 255.0).round() as u8
                };
                image::Rgb([px(0), px(1), px(2)])
            });
            buf.save(path)?;
        }
        n => return Err(Error::Shape(format!("cannot write image with {n} channels"))),
    }
    Ok(())
}

/// Manifest written next to a saved dataset: the generating config (when
/// synthetic) plus content hashes of every file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub synth_config: Option<SynthConfig>,
    pub num_samples: usize,
    /// sha256 of each file, keyed by path relative to the dataset root.
    pub file_hashes: BTreeMap<String, String>,
    /// sha256 over the sorted (path, hash) pairs.
    pub content_hash: String,
}

/// Writes samples in the standard layout and returns the manifest.
pub fn save_dataset(
    samples: &[ImageSample],
    root: &Path,
    synth_config: Option<&SynthConfig>,
) -> Result<DatasetManifest> {
    let images_dir = root.join("images");
    let annotations_dir = root.join("annotations");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&annotations_dir)?;

    let mut file_hashes = BTreeMap::new();
    for sample in samples {
        let image_rel = format!("images/{}.png", sample.source_id);
        let annot_rel = format!("annotations/{}.json", sample.source_id);
        write_image(&root.join(&image_rel), &sample.image)?;
        let points: Vec<AnnotPoint> = sample
            .dots
            .points()
            .iter()
            .map(|&(x, y)| AnnotPoint { x, y })
            .collect();
        fs::write(root.join(&annot_rel), serde_json::to_string_pretty(&points)?)?;
        file_hashes.insert(image_rel.clone(), hash_file(&root.join(&image_rel))?);
        file_hashes.insert(annot_rel.clone(), hash_file(&root.join(&annot_rel))?);
    }

    let content_hash = combine_hashes(&file_hashes);
    let manifest = DatasetManifest {
        synth_config: synth_config.cloned(),
        num_samples: samples.len(),
        file_hashes,
        content_hash,
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn combine_hashes(file_hashes: &BTreeMap<String, String>) -> String {
    let mut hasher = Sha256::new();
    for (path, hash) in file_hashes {
        hasher.update(path.as_bytes());
        hasher.update(hash.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Content hash of an on-disk dataset, for run manifests.
pub fn dataset_content_hash(root: &Path) -> Result<String> {
    let mut file_hashes = BTreeMap::new();
    for sub in ["images", "annotations"] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            continue;
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        paths.sort();
        for path in paths {
            if path.is_file() {
                let rel = format!("{}/{}", sub, path.file_name().unwrap().to_string_lossy());
                file_hashes.insert(rel, hash_file(&path)?);
            }
        }
    }
    Ok(combine_hashes(&file_hashes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Split};

    #[test]
    fn empty_root_returns_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let samples = load_dataset(dir.path(), &DatasetLayout::default()).unwrap();
        assert!(samples.is_empty());
    }

    #[test]
    fn round_trip_preserves_counts_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig { num_images: 20, image_size: (32, 32), seed: 11, ..Default::default() };
        let samples = generate_synthetic(&config).unwrap();
        save_dataset(&samples, dir.path(), Some(&config)).unwrap();

        let layout = DatasetLayout { split_seed: 11 };
        let loaded = load_dataset(dir.path(), &layout).unwrap();
        assert_eq!(loaded.len(), 20);
        let train = loaded.iter().filter(|s| s.split == Split::Train).count();
        let test = loaded.iter().filter(|s| s.split == Split::Test).count();
        let val = loaded.iter().filter(|s| s.split == Split::Val).count();
        assert_eq!((train, test, val), (10, 9, 1));
        for (orig, back) in samples.iter().zip(&loaded) {
            assert_eq!(orig.source_id, back.source_id);
            assert_eq!(orig.dots.count(), back.dots.count());
        }
    }

    #[test]
    fn split_assignment_is_stable_across_loads() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig { num_images: 10, image_size: (16, 16), seed: 4, ..Default::default() };
        save_dataset(&generate_synthetic(&config).unwrap(), dir.path(), None).unwrap();
        let layout = DatasetLayout { split_seed: 99 };
        let a = load_dataset(dir.path(), &layout).unwrap();
        let b = load_dataset(dir.path(), &layout).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.split, sb.split);
        }
    }

    #[test]
    fn missing_annotation_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig { num_images: 3, image_size: (16, 16), seed: 1, ..Default::default() };
        save_dataset(&generate_synthetic(&config).unwrap(), dir.path(), None).unwrap();
        fs::remove_file(dir.path().join("annotations/synth_00001.json")).unwrap();
        let err = load_dataset(dir.path(), &DatasetLayout::default()).unwrap_err();
        match err {
            Error::MissingAnnotations(files) => {
                assert_eq!(files.len(), 1);
                assert!(files[0].ends_with("synth_00001.json"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unparseable_annotation_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig { num_images: 1, image_size: (16, 16), seed: 1, ..Default::default() };
        save_dataset(&generate_synthetic(&config).unwrap(), dir.path(), None).unwrap();
        fs::write(dir.path().join("annotations/synth_00000.json"), "[{\"x\": }]").unwrap();
        let err = load_dataset(dir.path(), &DatasetLayout::default()).unwrap_err();
        match err {
            Error::Parse { file, detail } => {
                assert!(file.ends_with("synth_00000.json"));
                assert!(detail.contains("line"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn saving_twice_reproduces_content_hash() {
        let config = SynthConfig { num_images: 4, image_size: (24, 24), seed: 8, ..Default::default() };
        let samples = generate_synthetic(&config).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = save_dataset(&samples, d1.path(), Some(&config)).unwrap();
        let m2 = save_dataset(&samples, d2.path(), Some(&config)).unwrap();
        assert_eq!(m1.content_hash, m2.content_hash);
        assert_eq!(m1.content_hash, dataset_content_hash(d1.path()).unwrap());
    }
}

//! On-disk datasets: PPM images, one annotation file per image, and a TOML
//! manifest with SHA-256 checksums of every file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{format_annotations, parse_annotations, Image, SceneSample, ALPHABET};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationFormat {
    Quad,
    Polygon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub annotation: String,
    pub image_sha256: String,
    pub annotation_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Directory holding the listed files, relative to the manifest.
    pub root: String,
    pub format: AnnotationFormat,
    pub alphabet: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        if let Some(c) = self.alphabet.chars().find(|c| !seen.insert(*c)) {
            return Err(Error::Config(format!("alphabet repeats `{c}`")));
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    let dynimg = image::load_from_memory(bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = dynimg.to_rgb8();
    Ok(Image::from_bytes(rgb.width() as usize, rgb.height() as usize, rgb.as_raw()))
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.to_bytes()).expect("buffer size");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes samples under `dir` and returns the manifest stored at
/// `dir/manifest.toml`.
pub fn write_dataset(dir: &Path, samples: &[SceneSample], format: AnnotationFormat, seed: Option<u64>) -> Result<DatasetManifest> {
    for sub in ["images", "annotations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = format!("images/{}.ppm", s.sample_id);
        let annotation = format!("annotations/{}.txt", s.sample_id);
        let img_bytes = encode_ppm(&s.image);
        let ann_bytes = format_annotations(&s.instances, format)?.into_bytes();
        write_file(&dir.join(&image), &img_bytes)?;
        write_file(&dir.join(&annotation), &ann_bytes)?;
        entries.push(ManifestEntry {
            image,
            annotation,
            image_sha256: sha256_hex(&img_bytes),
            annotation_sha256: sha256_hex(&ann_bytes),
        });
    }
    let manifest = DatasetManifest {
        root: ".".into(),
        format,
        alphabet: ALPHABET.into(),
        seed,
        entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    m.validate()?;
    Ok(m)
}

/// Loads a dataset from a manifest file or a directory containing one,
/// verifying every checksum.
pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<SceneSample>)> {
    let manifest_path: PathBuf = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let manifest = read_manifest(&manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.root);
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let img_path = root.join(&e.image);
        let ann_path = root.join(&e.annotation);
        let img_bytes = read_file(&img_path)?;
        let ann_bytes = read_file(&ann_path)?;
        for (p, bytes, want) in [(&img_path, &img_bytes, &e.image_sha256), (&ann_path, &ann_bytes, &e.annotation_sha256)] {
            if &sha256_hex(bytes) != want {
                return Err(Error::Dataset {
                    path: p.clone(),
                    message: "checksum mismatch".into(),
                });
            }
        }
        let text = String::from_utf8(ann_bytes).map_err(|e| Error::Dataset {
            path: ann_path.clone(),
            message: e.to_string(),
        })?;
        let instances = parse_annotations(&text, manifest.format).map_err(|e| Error::Dataset {
            path: ann_path.clone(),
            message: e.to_string(),
        })?;
        let sample_id = Path::new(&e.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        samples.push(SceneSample {
            image: decode_image(&img_bytes, &img_path)?,
            instances,
            sample_id,
        });
    }
    Ok((manifest, samples))
}

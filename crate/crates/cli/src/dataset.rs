//! Synthetic corpus generation, manifests and loading.
//!
//! A manifest has one whitespace-separated line per case:
//! `id image_path label_path seed`. Paths are relative to the manifest's
//! directory. `seed` is the corpus seed; the case index is encoded in `id`.

use std::fs;
use std::path::{Path, PathBuf};

use rfp_core::data::{gen_one, preprocess, SyntheticSpec, VolumeSample, CLIP_HI, CLIP_LO};
use rfp_core::edge::{generate_reference_edges, CannyParams, EdgeMode};

use crate::error::{CliError, CliResult};
use crate::fsutil::write_atomic;
use crate::volume::{Payload, VolumeFile};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub seed: u64,
}

pub fn read_manifest(path: &Path) -> CliResult<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let [id, image, label, seed] = f[..] else {
            return Err(CliError::format(path, format!("line {}: expected 4 fields", no + 1)));
        };
        let seed = seed
            .parse()
            .map_err(|_| CliError::format(path, format!("line {}: bad seed {seed:?}", no + 1)))?;
        out.push(ManifestEntry {
            id: id.to_string(),
            image: base.join(image),
            label: base.join(label),
            seed,
        });
    }
    Ok(out)
}

fn dir_is_nonempty(dir: &Path) -> CliResult<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(CliError::io(dir, e)),
    }
}

/// Writes cases `offset..offset + count` of the corpus described by `spec`
/// into `dir` and returns the manifest path.
pub fn gen_data(spec: &SyntheticSpec, dir: &Path, count: usize, offset: u64, force: bool) -> CliResult<PathBuf> {
    spec.validate()?;
    if dir_is_nonempty(dir)? && !force {
        return Err(CliError::Refused(format!(
            "{} exists and is not empty (pass --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir.join("images")).map_err(|e| CliError::io(dir, e))?;
    fs::create_dir_all(dir.join("labels")).map_err(|e| CliError::io(dir, e))?;
    let mut manifest = String::new();
    for i in 0..count as u64 {
        let index = offset + i;
        let s = gen_one(spec, index)?;
        let id = format!("case{index:04}");
        let image = format!("images/{id}.rfpv");
        let label = format!("labels/{id}.rfpv");
        VolumeFile::new(s.shape.to_vec(), s.spacing, Payload::F32(s.image))?.write(&dir.join(&image))?;
        VolumeFile::new(s.shape.to_vec(), s.spacing, Payload::U8(s.labels))?.write(&dir.join(&label))?;
        manifest.push_str(&format!("{id} {image} {label} {}\n", spec.seed));
    }
    let path = dir.join(MANIFEST);
    write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}

/// One loaded case: preprocessed image, labels and (optionally) reference edges.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub sample: VolumeSample,
}

/// Loads every case of a manifest. Images are clipped and standardized;
/// edges are derived from the labels when `edges` is given.
pub fn load_cases(
    manifest: &Path,
    num_classes: usize,
    edges: Option<(EdgeMode, &CannyParams)>,
) -> CliResult<Vec<Case>> {
    let mut out = Vec::new();
    for e in read_manifest(manifest)? {
        let img = VolumeFile::read(&e.image)?;
        let shape = img
            .spatial()
            .ok_or_else(|| CliError::format(&e.image, "expected a 3-d volume"))?;
        let spacing = img.spacing;
        let image = img.into_f32(&e.image)?;
        let lab = VolumeFile::read(&e.label)?;
        if lab.dims != shape {
            return Err(CliError::format(&e.label, format!("dims {:?} differ from image {:?}", lab.dims, shape)));
        }
        let labels = lab.into_u8(&e.label)?;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(CliError::format(&e.label, format!("label {bad} outside [0, {num_classes})")));
        }
        let edge_map = match edges {
            Some((mode, canny)) => Some(generate_reference_edges(&labels, shape, num_classes, mode, canny)?.data().to_vec()),
            None => None,
        };
        out.push(Case {
            id: e.id,
            sample: VolumeSample {
                shape,
                spacing,
                image: preprocess(&image, CLIP_LO, CLIP_HI),
                labels,
                edges: edge_map,
            },
        });
    }
    Ok(out)
}

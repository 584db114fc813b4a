//! Task bundle directories.
//!
//! A bundle is a directory holding
//!
//! * `manifest.json` with the task metadata and file references,
//! * `labels.bin`: magic `XLBL`, u16 LE version 1, u8 ndim 3, dims `[n, H, W]`
//!   as u64 LE, then `n*H*W` u8 class indices in row-major order,
//! * `features.bin` (optional): magic `XFTR`, u16 LE version 1, u8 ndim 4,
//!   dims `[n, H, W, C]` as u64 LE, then f32 LE values in row-major order,
//! * optional transfer maps (same `XFTR` layout) listed under `files.transfer`,
//!   each holding this task's model features on another task's images.
//!
//! Writing is deterministic: the same bundle always produces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{FeatureMap, LabelMaskSet, TaskBundle, TaskDescriptor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.bin";
pub const FEATURES_FILE: &str = "features.bin";

const LABELS_MAGIC: &[u8; 4] = b"XLBL";
const FEATURES_MAGIC: &[u8; 4] = b"XFTR";
const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub labels: String,
    pub features: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub transfer: BTreeMap<String, String>,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task_id: String,
    pub roi_class: String,
    pub modality: String,
    pub dataset: String,
    pub partition: Option<String>,
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: Option<usize>,
    #[serde(default = "default_positive_class")]
    pub positive_class: u8,
    #[serde(default)]
    pub extractor: String,
    pub files: ManifestFiles,
}

fn default_positive_class() -> u8 {
    1
}

/// Reads and fully validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<TaskBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::InvalidManifest {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;

    let descriptor = TaskDescriptor::new(
        manifest.task_id.clone(),
        manifest.roi_class.clone(),
        &manifest.modality,
        manifest.dataset.clone(),
    )
    .map_err(|e| Error::InvalidManifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let descriptor = match &manifest.partition {
        Some(p) => descriptor.with_partition(p.clone()),
        None => descriptor,
    };

    let labels_path = resolve(dir, &manifest.files.labels, &manifest_path)?;
    let masks = read_labels(&labels_path)?;
    let dims = masks.dim();
    if dims != (manifest.n_samples, manifest.height, manifest.width) {
        return Err(Error::ShapeMismatch(format!(
            "manifest declares [{},{},{}] but {} holds {:?}",
            manifest.n_samples,
            manifest.height,
            manifest.width,
            labels_path.display(),
            dims
        )));
    }
    let labels = LabelMaskSet::new(manifest.task_id.clone(), masks, manifest.positive_class);

    let features = match &manifest.files.features {
        Some(name) => {
            let path = resolve(dir, name, &manifest_path)?;
            let data = read_features(&path)?;
            check_channels(&manifest, data.dim().3, &path)?;
            Some(FeatureMap {
                data,
                extractor: manifest.extractor.clone(),
            })
        }
        None => None,
    };

    let mut bundle = TaskBundle::new(descriptor, labels, features)?;
    for (target_id, name) in &manifest.files.transfer {
        let path = resolve(dir, name, &manifest_path)?;
        let data = read_features(&path)?;
        check_channels(&manifest, data.dim().3, &path)?;
        bundle = bundle.with_transfer(target_id.clone(), data)?;
    }
    Ok(bundle)
}

fn check_channels(manifest: &Manifest, got: usize, path: &Path) -> Result<()> {
    match manifest.channels {
        Some(c) if c != got => Err(Error::ShapeMismatch(format!(
            "manifest declares {c} channels but {} holds {got}",
            path.display()
        ))),
        _ => Ok(()),
    }
}

fn resolve(dir: &Path, name: &str, manifest_path: &Path) -> Result<PathBuf> {
    let rel = Path::new(name);
    let escapes = rel
        .components()
        .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir));
    if name.is_empty() || escapes {
        return Err(Error::InvalidManifest {
            path: manifest_path.to_path_buf(),
            reason: format!("file reference {name:?} must be relative to the bundle"),
        });
    }
    Ok(dir.join(rel))
}

/// Writes `bundle` into `dir`, creating it if needed.
pub fn write_bundle(bundle: &TaskBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut transfer_files = BTreeMap::new();
    for target_id in bundle.transfer.keys() {
        let name = format!("transfer-{}.bin", sanitize(target_id));
        if transfer_files.values().any(|n| n == &name) {
            return Err(Error::InvalidParams(format!(
                "transfer target ids collide on file name {name}"
            )));
        }
        transfer_files.insert(target_id.clone(), name);
    }

    let (n, h, w) = bundle.labels.shape();
    let manifest = Manifest {
        task_id: bundle.descriptor.task_id.clone(),
        roi_class: bundle.descriptor.roi_class.clone(),
        modality: bundle.descriptor.modality().to_string(),
        dataset: bundle.descriptor.dataset.clone(),
        partition: bundle.descriptor.partition.clone(),
        n_samples: n,
        height: h,
        width: w,
        channels: bundle.channels(),
        positive_class: bundle.labels.positive_class,
        extractor: bundle
            .features
            .as_ref()
            .map(|f| f.extractor.clone())
            .unwrap_or_default(),
        files: ManifestFiles {
            labels: LABELS_FILE.to_string(),
            features: bundle.features.as_ref().map(|_| FEATURES_FILE.to_string()),
            transfer: transfer_files.clone(),
        },
    };

    write_file(&dir.join(LABELS_FILE), &encode_labels(bundle.labels.masks()))?;
    if let Some(f) = &bundle.features {
        write_file(&dir.join(FEATURES_FILE), &encode_features(&f.data))?;
    }
    for (target_id, name) in &transfer_files {
        write_file(&dir.join(name), &encode_features(&bundle.transfer[target_id]))?;
    }
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidParams(e.to_string()))?;
    text.push('\n');
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn header(magic: &[u8; 4], dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * dims.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

pub fn encode_labels(masks: &Array3<u8>) -> Vec<u8> {
    let (n, h, w) = masks.dim();
    let mut out = header(LABELS_MAGIC, &[n, h, w]);
    out.extend(masks.iter().copied());
    out
}

pub fn encode_features(data: &Array4<f32>) -> Vec<u8> {
    let (n, h, w, c) = data.dim();
    let mut out = header(FEATURES_MAGIC, &[n, h, w, c]);
    out.reserve(data.len() * 4);
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses the common header and returns `(dims, payload)`.
fn decode_header<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    ndim: usize,
    elem_size: usize,
    path: &Path,
) -> Result<(Vec<usize>, &'a [u8])> {
    let corrupt = |reason: String| Error::CorruptBinary {
        path: path.to_path_buf(),
        reason,
    };
    let head_len = 7 + 8 * ndim;
    if bytes.len() < head_len {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(corrupt(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    if bytes[6] as usize != ndim {
        return Err(corrupt(format!("ndim {} where {ndim} expected", bytes[6])));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for k in 0..ndim {
        let at = 7 + 8 * k;
        let raw = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"));
        let d = usize::try_from(raw).map_err(|_| corrupt(format!("dimension {raw} too large")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| corrupt("element count overflows".into()))?;
        dims.push(d);
    }
    let payload = &bytes[head_len..];
    let expected = count
        .checked_mul(elem_size)
        .ok_or_else(|| corrupt("payload size overflows".into()))?;
    if payload.len() != expected {
        return Err(corrupt(format!(
            "payload is {} bytes, dims {:?} need {expected}",
            payload.len(),
            dims
        )));
    }
    Ok((dims, payload))
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<Array3<u8>> {
    let (dims, payload) = decode_header(bytes, LABELS_MAGIC, 3, 1, path)?;
    Ok(Array3::from_shape_vec((dims[0], dims[1], dims[2]), payload.to_vec())
        .expect("length checked against dims"))
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Array4<f32>> {
    let (dims, payload) = decode_header(bytes, FEATURES_MAGIC, 4, 4, path)?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(
        Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), values)
            .expect("length checked against dims"),
    )
}

fn read_labels(path: &Path) -> Result<Array3<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes, path)
}

fn read_features(path: &Path) -> Result<Array4<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// Loads every bundle directory directly under `dir`, sorted by directory name.
pub fn load_pool(dir: impl AsRef<Path>) -> Result<Vec<TaskBundle>> {
    let dir = dir.as_ref();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    entries.sort();
    entries.iter().map(load_bundle).collect()
}

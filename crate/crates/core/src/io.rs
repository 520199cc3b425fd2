//! On-disk formats: checkpoints, dataset directories and bank directories.
//!
//! Every format is a JSON manifest next to raw little-endian payloads
//! (`f32` for images and weights, `i16` for label maps). Writing then
//! reading any of them reproduces the in-memory values bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{BankProvenance, SyntheticBank};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelGrid};
use crate::nn::ParamEntry;
use crate::segmentor::{Segmentor, SegmentorConfig};
use crate::shapesworld::{Condition, DataItem, Dataset, Scene, ScribbleMap, WorldConfig};

pub const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config values serialise");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

fn bytes_f32(path: &Path, bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(corrupt(path, "length is not a multiple of 4"));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn check_version(path: &Path, v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(corrupt(path, format!("format version {v}, expected {FORMAT_VERSION}")));
    }
    Ok(())
}

/// Grid values as `f32`; grids hold `f32`-representable values, so this
/// is lossless.
pub fn grid_to_bytes(g: &ImageGrid) -> Vec<u8> {
    f32_bytes(g.data().iter().map(|&v| v as f32))
}

pub fn grid_from_bytes(path: &Path, bytes: &[u8], shape: (usize, usize, usize)) -> Result<ImageGrid> {
    let vals = bytes_f32(path, bytes)?;
    ImageGrid::from_vec(shape.0, shape.1, shape.2, vals.into_iter().map(f64::from).collect())
        .map_err(|e| corrupt(path, e.to_string()))
}

pub fn write_grid(path: &Path, g: &ImageGrid) -> Result<()> {
    write_bytes(path, &grid_to_bytes(g))
}

pub fn read_grid(path: &Path, shape: (usize, usize, usize)) -> Result<ImageGrid> {
    grid_from_bytes(path, &read_bytes(path)?, shape)
}

pub fn write_labels(path: &Path, g: &LabelGrid) -> Result<()> {
    write_bytes(path, &g.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>())
}

pub fn read_labels(path: &Path, shape: (usize, usize)) -> Result<LabelGrid> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 2 != 0 {
        return Err(corrupt(path, "length is not a multiple of 2"));
    }
    let vals = bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
    LabelGrid::from_vec(shape.0, shape.1, vals).map_err(|e| corrupt(path, e.to_string()))
}

// ---------------------------------------------------------------- checkpoints

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Denoiser,
    Segmentor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
    pub blob: String,
    /// SHA-256 of the weight blob.
    pub blob_sha256: String,
    /// Identity of the model: hash of config and blob.
    pub model_hash: String,
}

const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";

fn model_hash(kind: ModelKind, config: &serde_json::Value, blob: &[u8]) -> String {
    hash_json(&(kind, config, hash_bytes(blob)))
}

fn save_model(dir: &Path, kind: ModelKind, config: serde_json::Value, entries: &[ParamEntry], params: &[f32]) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = f32_bytes(params.iter().copied());
    let hash = model_hash(kind, &config, &blob);
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        kind,
        tensors: entries
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                shape: e.shape.clone(),
                dtype: "f32le".into(),
            })
            .collect(),
        config,
        blob: WEIGHTS.into(),
        blob_sha256: hash_bytes(&blob),
        model_hash: hash.clone(),
    };
    write_bytes(&dir.join(WEIGHTS), &blob)?;
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(hash)
}

fn load_model(dir: &Path, kind: ModelKind) -> Result<(CheckpointManifest, Vec<f32>)> {
    let mpath = dir.join(MANIFEST);
    let manifest: CheckpointManifest = read_json(&mpath)?;
    check_version(&mpath, manifest.format_version)?;
    if manifest.kind != kind {
        return Err(corrupt(&mpath, format!("checkpoint holds a {:?}, expected {kind:?}", manifest.kind)));
    }
    let bpath = dir.join(&manifest.blob);
    let blob = read_bytes(&bpath)?;
    if hash_bytes(&blob) != manifest.blob_sha256 {
        return Err(corrupt(&bpath, "weight blob does not match its recorded hash"));
    }
    let params = bytes_f32(&bpath, &blob)?;
    let declared: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if declared != params.len() {
        return Err(corrupt(&bpath, format!("manifest declares {declared} values, blob has {}", params.len())));
    }
    Ok((manifest, params))
}

fn check_layout(path: &Path, manifest: &CheckpointManifest, entries: &[ParamEntry]) -> Result<()> {
    let same = manifest.tensors.len() == entries.len()
        && manifest.tensors.iter().zip(entries).all(|(t, e)| t.name == e.name && t.shape == e.shape);
    if !same {
        return Err(corrupt(path, "tensor table does not match the configured architecture"));
    }
    Ok(())
}

/// Identity hash of a denoiser as it would be recorded in a checkpoint.
pub fn denoiser_hash(d: &Denoiser) -> String {
    let config = serde_json::to_value(d.config()).expect("config serialises");
    model_hash(ModelKind::Denoiser, &config, &f32_bytes(d.params().iter().copied()))
}

/// Writes `manifest.json` and `weights.bin` into `dir`; returns the model hash.
pub fn save_denoiser(dir: &Path, d: &Denoiser) -> Result<String> {
    let config = serde_json::to_value(d.config()).map_err(|e| Error::json(dir, e))?;
    save_model(dir, ModelKind::Denoiser, config, d.layout().entries(), d.params())
}

pub fn load_denoiser(dir: &Path) -> Result<(Denoiser, String)> {
    let (manifest, params) = load_model(dir, ModelKind::Denoiser)?;
    let mpath = dir.join(MANIFEST);
    let config: DenoiserConfig = serde_json::from_value(manifest.config.clone()).map_err(|e| Error::json(&mpath, e))?;
    let d = Denoiser::from_params(config, params)?;
    check_layout(&mpath, &manifest, d.layout().entries())?;
    Ok((d, manifest.model_hash))
}

pub fn save_segmentor(dir: &Path, s: &Segmentor) -> Result<String> {
    let config = serde_json::to_value(s.config()).map_err(|e| Error::json(dir, e))?;
    save_model(dir, ModelKind::Segmentor, config, s.layout().entries(), s.params())
}

pub fn load_segmentor(dir: &Path) -> Result<(Segmentor, String)> {
    let (manifest, params) = load_model(dir, ModelKind::Segmentor)?;
    let mpath = dir.join(MANIFEST);
    let config: SegmentorConfig = serde_json::from_value(manifest.config.clone()).map_err(|e| Error::json(&mpath, e))?;
    let s = Segmentor::from_params(config, params)?;
    check_layout(&mpath, &manifest, s.layout().entries())?;
    Ok((s, manifest.model_hash))
}

// ------------------------------------------------------------------- datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRecord {
    pub image: String,
    pub mask: String,
    pub scribbles: String,
    pub condition: String,
    pub class_set: Vec<bool>,
    pub class_set_vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub count: usize,
    pub seed: u64,
    pub config_hash: String,
    pub world: WorldConfig,
    pub items: Vec<ItemRecord>,
}

const INDEX: &str = "index.json";

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let items_dir = dir.join("items");
    fs::create_dir_all(&items_dir).map_err(|e| Error::io(&items_dir, e))?;
    let mut records = Vec::with_capacity(ds.len());
    for (i, it) in ds.items.iter().enumerate() {
        let rec = ItemRecord {
            image: format!("items/{i:05}.image.f32"),
            mask: format!("items/{i:05}.mask.i16"),
            scribbles: format!("items/{i:05}.scribbles.i16"),
            condition: format!("items/{i:05}.condition.f32"),
            class_set: it.scene.class_set.clone(),
            class_set_vector: it.condition.class_set_vector.clone(),
        };
        write_grid(&dir.join(&rec.image), &it.scene.image)?;
        write_labels(&dir.join(&rec.mask), &it.scene.full_mask)?;
        write_labels(&dir.join(&rec.scribbles), &it.scribbles.labels)?;
        write_grid(&dir.join(&rec.condition), &it.condition.scribble_channels)?;
        records.push(rec);
    }
    let index = DatasetIndex {
        format_version: FORMAT_VERSION,
        count: ds.len(),
        seed: ds.seed,
        config_hash: hash_json(&ds.world),
        world: ds.world.clone(),
        items: records,
    };
    write_json(&dir.join(INDEX), &index)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let ipath = dir.join(INDEX);
    let index: DatasetIndex = read_json(&ipath)?;
    check_version(&ipath, index.format_version)?;
    if index.count != index.items.len() {
        return Err(corrupt(&ipath, format!("count {} but {} item records", index.count, index.items.len())));
    }
    if hash_json(&index.world) != index.config_hash {
        return Err(corrupt(&ipath, "world config does not match its recorded hash"));
    }
    let w = &index.world;
    let (h, wd) = (w.height, w.width);
    let items = index
        .items
        .iter()
        .map(|rec| {
            let image = read_grid(&dir.join(&rec.image), (3, h, wd))?;
            let full_mask = read_labels(&dir.join(&rec.mask), (h, wd))?;
            let labels = read_labels(&dir.join(&rec.scribbles), (h, wd))?;
            let channels = read_grid(&dir.join(&rec.condition), (w.condition_channels(), h, wd))?;
            Ok(DataItem {
                scene: Scene {
                    image,
                    full_mask,
                    class_set: rec.class_set.clone(),
                },
                scribbles: ScribbleMap::from_labels(labels),
                condition: Condition::new(channels, rec.class_set_vector.clone())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        world: index.world,
        seed: index.seed,
        items,
    })
}

// ---------------------------------------------------------------------- banks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankEntryRecord {
    pub image_id: usize,
    pub lambda: f64,
    pub file: String,
    /// Index of the grid within `file`.
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankManifest {
    pub format_version: u32,
    pub provenance: BankProvenance,
    pub lambdas: Vec<f64>,
    pub num_images: usize,
    pub shape: (usize, usize, usize),
    pub entries: Vec<BankEntryRecord>,
    pub content_sha256: String,
}

const BANK: &str = "bank.json";

fn bank_content_hash(files: &[Vec<u8>]) -> String {
    let mut h = Sha256::new();
    for f in files {
        h.update((f.len() as u64).to_le_bytes());
        h.update(f);
    }
    hex::encode(h.finalize())
}

/// One `lambda_<k>.f32` file per encode ratio, images in id order.
pub fn save_bank(dir: &Path, bank: &SyntheticBank) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shape = bank.columns().first().and_then(|c| c.first()).map_or((0, 0, 0), ImageGrid::shape);
    let mut entries = Vec::with_capacity(bank.len());
    let mut files = Vec::with_capacity(bank.lambdas().len());
    for (k, (&lambda, col)) in bank.lambdas().iter().zip(bank.columns()).enumerate() {
        let name = format!("lambda_{k}.f32");
        let bytes: Vec<u8> = col.iter().flat_map(grid_to_bytes).collect();
        write_bytes(&dir.join(&name), &bytes)?;
        files.push(bytes);
        entries.extend((0..col.len()).map(|i| BankEntryRecord {
            image_id: i,
            lambda,
            file: name.clone(),
            slot: i,
        }));
    }
    let manifest = BankManifest {
        format_version: FORMAT_VERSION,
        provenance: bank.provenance().clone(),
        lambdas: bank.lambdas().to_vec(),
        num_images: bank.num_images(),
        shape,
        entries,
        content_sha256: bank_content_hash(&files),
    };
    write_json(&dir.join(BANK), &manifest)
}

/// Loads a bank; incomplete banks, corrupted payloads and (when
/// `expected_denoiser` is given) banks from a different denoiser are errors.
pub fn load_bank(dir: &Path, expected_denoiser: Option<&str>) -> Result<SyntheticBank> {
    let mpath = dir.join(BANK);
    let m: BankManifest = read_json(&mpath)?;
    check_version(&mpath, m.format_version)?;
    if let Some(exp) = expected_denoiser {
        if m.provenance.denoiser_hash != exp {
            return Err(Error::ProvenanceMismatch {
                expected: exp.to_string(),
                found: m.provenance.denoiser_hash.clone(),
            });
        }
    }
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    for (k, _) in m.lambdas.iter().enumerate() {
        let name = format!("lambda_{k}.f32");
        let bytes = read_bytes(&dir.join(&name))?;
        files.push((name, bytes));
    }
    let raw: Vec<Vec<u8>> = files.iter().map(|(_, b)| b.clone()).collect();
    if bank_content_hash(&raw) != m.content_sha256 {
        return Err(corrupt(&mpath, "bank payload does not match its recorded hash"));
    }
    let per = m.shape.0 * m.shape.1 * m.shape.2 * 4;
    let mut entries: Vec<Vec<Option<ImageGrid>>> = vec![vec![None; m.num_images]; m.lambdas.len()];
    for e in &m.entries {
        let k = m
            .lambdas
            .iter()
            .position(|&l| l == e.lambda)
            .ok_or_else(|| corrupt(&mpath, format!("entry at unlisted lambda {}", e.lambda)))?;
        let (name, bytes) = files
            .iter()
            .find(|(n, _)| *n == e.file)
            .ok_or_else(|| corrupt(&mpath, format!("entry refers to unknown file {}", e.file)))?;
        let chunk = bytes
            .get(e.slot * per..(e.slot + 1) * per)
            .ok_or_else(|| corrupt(&dir.join(name), format!("slot {} beyond end of file", e.slot)))?;
        let slot = entries[k]
            .get_mut(e.image_id)
            .ok_or_else(|| corrupt(&mpath, format!("image id {} out of range", e.image_id)))?;
        *slot = Some(grid_from_bytes(&dir.join(name), chunk, m.shape)?);
    }
    let mut cols = Vec::with_capacity(entries.len());
    for (k, col) in entries.into_iter().enumerate() {
        let mut out = Vec::with_capacity(col.len());
        for (i, g) in col.into_iter().enumerate() {
            out.push(g.ok_or(Error::MissingBankEntry {
                image_id: i,
                lambda: m.lambdas[k],
            })?);
        }
        cols.push(out);
    }
    SyntheticBank::from_parts(m.lambdas, cols, m.provenance)
}

/// Path helper for stage outputs under an experiment directory.
pub fn stage_dir(root: &Path, stage: &str) -> PathBuf {
    root.join(stage)
}

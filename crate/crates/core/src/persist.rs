//! On-disk formats: datasets (raw f32 images, run-length encoded masks and a
//! JSON manifest), binary checkpoints, JSON-lines logs, score tables, run
//! directories and the report emitter.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{
    AnnotationSet, AnnotationTag, ClassCatalog, ClassId, Image, Mask, MaskChannel, Provenance, Scan,
};
use crate::error::{Error, Result};
use crate::experiment::{report_csv, BaseRecord, ExperimentConfig, ExperimentReport, RoundRecord};
use crate::model::{label_of, ArchConfig, ModelParams, PartitionLabel, Tensor};
use crate::selection::ScanScore;
use crate::train::{AdamState, MomentState};

pub const FORMAT_VERSION: &str = "1.0";
const SUPPORTED_MAJOR: &str = "1";

fn check_version(path: &Path, version: &str) -> Result<()> {
    let major = version.split('.').next().unwrap_or("");
    if major != SUPPORTED_MAJOR {
        return Err(Error::format(
            path,
            format!("unsupported format_version {version:?}"),
        ));
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| Error::format(path, e.to_string()))
}

// ---------------------------------------------------------------- masks

const RLE_MAGIC: &[u8; 4] = b"RLE1";

/// Value of the first pixel and the lengths of alternating runs in
/// row-major order.
pub fn rle_runs(mask: &Mask) -> (u8, Vec<u32>) {
    let data = mask.as_slice();
    let first = data.first().copied().unwrap_or(0);
    let mut runs = Vec::new();
    let mut current = first;
    let mut len = 0u32;
    for &v in data {
        if v == current {
            len += 1;
        } else {
            runs.push(len);
            current = v;
            len = 1;
        }
    }
    if len > 0 {
        runs.push(len);
    }
    (first, runs)
}

/// `RLE1`, height, width, run count (u32 LE each), first value byte, runs.
pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let (first, runs) = rle_runs(mask);
    let mut out = Vec::with_capacity(17 + 4 * runs.len());
    out.extend_from_slice(RLE_MAGIC);
    out.extend_from_slice(&(mask.height() as u32).to_le_bytes());
    out.extend_from_slice(&(mask.width() as u32).to_le_bytes());
    out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
    out.push(first);
    for r in runs {
        out.extend_from_slice(&r.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn decode_mask(bytes: &[u8]) -> std::result::Result<Mask, String> {
    if bytes.get(..4) != Some(RLE_MAGIC.as_slice()) {
        return Err("bad mask magic".into());
    }
    let (Some(h), Some(w), Some(count), Some(&first)) = (
        u32_at(bytes, 4),
        u32_at(bytes, 8),
        u32_at(bytes, 12),
        bytes.get(16),
    ) else {
        return Err("truncated mask header".into());
    };
    if first > 1 {
        return Err(format!("non-binary first value {first}"));
    }
    let count = count as usize;
    if bytes.len() != 17 + 4 * count {
        return Err(format!(
            "expected {} bytes, found {}",
            17 + 4 * count,
            bytes.len()
        ));
    }
    let total = h as usize * w as usize;
    let mut data = Vec::with_capacity(total);
    let mut value = first;
    for i in 0..count {
        let run = u32_at(bytes, 17 + 4 * i).expect("length checked") as usize;
        if run == 0 || data.len() + run > total {
            return Err("run lengths do not match the grid".into());
        }
        data.extend(std::iter::repeat(value).take(run));
        value ^= 1;
    }
    if data.len() != total {
        return Err(format!("runs cover {} of {total} pixels", data.len()));
    }
    Mask::from_vec(h as usize, w as usize, data).map_err(|e| e.to_string())
}

// --------------------------------------------------------------- images

pub fn encode_image(image: &Image) -> Vec<u8> {
    image
        .as_slice()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

pub fn decode_image(
    bytes: &[u8],
    height: usize,
    width: usize,
) -> std::result::Result<Image, String> {
    if bytes.len() != 4 * height * width {
        return Err(format!(
            "expected {} bytes, found {}",
            4 * height * width,
            bytes.len()
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Image::from_vec(height, width, data).map_err(|e| e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub format_version: String,
    pub scan_id: String,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub seed: u64,
}

// -------------------------------------------------------------- dataset

/// Annotation set a mask channel belongs to.
pub const GROUND_TRUTH_SET: &str = "ground_truth";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub set: String,
    pub class_id: ClassId,
    pub provenance: Provenance,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub scan_id: String,
    pub seed: u64,
    pub image: String,
    pub image_sidecar: String,
    pub image_sha256: String,
    pub channels: Vec<ChannelEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub height: usize,
    pub width: usize,
    pub catalog: ClassCatalog,
    pub scans: Vec<ScanEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn set_name(tag: Option<AnnotationTag>) -> &'static str {
    tag.map_or(GROUND_TRUTH_SET, AnnotationTag::as_str)
}

fn parse_set(name: &str) -> Option<Option<AnnotationTag>> {
    if name == GROUND_TRUTH_SET {
        return Some(None);
    }
    AnnotationTag::ALL
        .into_iter()
        .find(|t| t.as_str() == name)
        .map(Some)
}

/// Writes `scans` under `dir`; paths in the manifest are relative to it.
pub fn save_dataset(dir: &Path, catalog: &ClassCatalog, scans: &[Scan]) -> Result<DatasetManifest> {
    let Some(first) = scans.first() else {
        return Err(Error::Contract("cannot save an empty dataset".into()));
    };
    let (height, width) = first.dims();
    let mut entries = Vec::with_capacity(scans.len());
    for scan in scans {
        if scan.dims() != (height, width) {
            return Err(Error::Shape(format!(
                "scan {} has a different grid size",
                scan.scan_id
            )));
        }
        let image_rel = format!("images/{}.f32", scan.scan_id);
        let sidecar_rel = format!("images/{}.json", scan.scan_id);
        let image_bytes = encode_image(&scan.image);
        write(&dir.join(&image_rel), &image_bytes)?;
        write_json(
            &dir.join(&sidecar_rel),
            &ImageSidecar {
                format_version: FORMAT_VERSION.into(),
                scan_id: scan.scan_id.clone(),
                height,
                width,
                dtype: "f32le".into(),
                seed: scan.seed,
            },
        )?;
        let sets = std::iter::once((None, &scan.ground_truth))
            .chain(scan.annotations.iter().map(|(t, s)| (Some(*t), s)));
        let mut channels = Vec::new();
        for (tag, set) in sets {
            for ch in set.channels() {
                let rel = format!(
                    "masks/{}/{}_{}.rle",
                    scan.scan_id,
                    set_name(tag),
                    ch.class_id
                );
                let bytes = encode_mask(&ch.mask);
                write(&dir.join(&rel), &bytes)?;
                channels.push(ChannelEntry {
                    set: set_name(tag).into(),
                    class_id: ch.class_id,
                    provenance: ch.provenance,
                    path: rel,
                    sha256: sha256_hex(&bytes),
                });
            }
        }
        entries.push(ScanEntry {
            scan_id: scan.scan_id.clone(),
            seed: scan.seed,
            image: image_rel,
            image_sidecar: sidecar_rel,
            image_sha256: sha256_hex(&image_bytes),
            channels,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION.into(),
        height,
        width,
        catalog: catalog.clone(),
        scans: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads a dataset saved by [`save_dataset`]. With `verify`, every file's
/// digest is checked against the manifest.
pub fn load_dataset(dir: &Path, verify: bool) -> Result<(DatasetManifest, Vec<Scan>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    check_version(&manifest_path, &manifest.format_version)?;
    let mut scans = Vec::with_capacity(manifest.scans.len());
    for entry in &manifest.scans {
        let bad = |path: &Path, what: String| {
            Error::format(path, format!("scan {}: {what}", entry.scan_id))
        };
        let image_path = dir.join(&entry.image);
        let bytes = read(&image_path)?;
        if verify && sha256_hex(&bytes) != entry.image_sha256 {
            return Err(bad(&image_path, "image digest mismatch".into()));
        }
        let sidecar_path = dir.join(&entry.image_sidecar);
        let sidecar: ImageSidecar = read_json(&sidecar_path)?;
        check_version(&sidecar_path, &sidecar.format_version)?;
        if (sidecar.height, sidecar.width) != (manifest.height, manifest.width)
            || sidecar.dtype != "f32le"
        {
            return Err(bad(
                &sidecar_path,
                "sidecar disagrees with the manifest".into(),
            ));
        }
        let image = decode_image(&bytes, manifest.height, manifest.width)
            .map_err(|e| bad(&image_path, e))?;
        let mut ground_truth = AnnotationSet::new();
        let mut annotations: BTreeMap<AnnotationTag, AnnotationSet> = BTreeMap::new();
        for ch in &entry.channels {
            let path = dir.join(&ch.path);
            let bytes = read(&path)?;
            if verify && sha256_hex(&bytes) != ch.sha256 {
                return Err(bad(&path, "mask digest mismatch".into()));
            }
            let mask = decode_mask(&bytes).map_err(|e| bad(&path, e))?;
            if mask.dims() != (manifest.height, manifest.width) {
                return Err(bad(
                    &path,
                    "mask grid size differs from the manifest".into(),
                ));
            }
            let channel = MaskChannel {
                class_id: ch.class_id,
                mask,
                provenance: ch.provenance,
            };
            match parse_set(&ch.set) {
                Some(None) => ground_truth.insert(channel),
                Some(Some(tag)) => annotations.entry(tag).or_default().insert(channel),
                None => return Err(bad(&path, format!("unknown annotation set {:?}", ch.set))),
            }
        }
        scans.push(Scan {
            scan_id: entry.scan_id.clone(),
            image,
            ground_truth,
            annotations,
            seed: entry.seed,
        });
    }
    Ok((manifest, scans))
}

// ----------------------------------------------------------- checkpoint

const CHECKPOINT_MAGIC: &[u8; 8] = b"CTUNECKP";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingProvenance {
    pub config_digest: String,
    pub epoch: usize,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    pub provenance: TrainingProvenance,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            optimizer: None,
            provenance: TrainingProvenance::default(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    partition: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    step: u64,
    m_offset: usize,
    v_offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: String,
    arch: ArchConfig,
    catalog: ClassCatalog,
    provenance: TrainingProvenance,
    tensors: Vec<TensorEntry>,
    optimizer: Option<Vec<MomentEntry>>,
    payload_values: usize,
}

/// Layout: magic, u64 header length, JSON header, then every value as
/// f64 little-endian at the offsets named in the header.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut payload: Vec<f64> = Vec::new();
    let tensors = ckpt
        .params
        .tensors()
        .iter()
        .map(|(name, t)| {
            let offset = payload.len();
            payload.extend_from_slice(&t.data);
            TensorEntry {
                name: name.clone(),
                partition: label_of(name)
                    .expect("parameter names are labelled")
                    .to_string(),
                shape: t.shape.clone(),
                offset,
                len: t.len(),
            }
        })
        .collect();
    let optimizer = ckpt.optimizer.as_ref().map(|state| {
        state
            .moments
            .iter()
            .map(|(name, ms)| {
                let m_offset = payload.len();
                payload.extend_from_slice(&ms.m);
                let v_offset = payload.len();
                payload.extend_from_slice(&ms.v);
                MomentEntry {
                    name: name.clone(),
                    step: ms.step,
                    m_offset,
                    v_offset,
                    len: ms.m.len(),
                }
            })
            .collect()
    });
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION.into(),
        arch: ckpt.params.arch.clone(),
        catalog: ckpt.params.catalog.clone(),
        provenance: ckpt.provenance.clone(),
        tensors,
        optimizer,
        payload_values: payload.len(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 8 * payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let fail = |d: String| Error::format(path, d);
    if bytes.get(..8) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(fail("not a checkpoint file".into()));
    }
    let header_len = bytes
        .get(8..16)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| fail("truncated header".into()))?;
    let header_bytes = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| fail("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| fail(e.to_string()))?;
    check_version(path, &header.format_version)?;
    let payload_bytes = &bytes[16 + header_len..];
    if payload_bytes.len() != 8 * header.payload_values {
        return Err(fail(format!(
            "payload holds {} bytes, header announces {} values",
            payload_bytes.len(),
            header.payload_values
        )));
    }
    let payload: Vec<f64> = payload_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let slice = |offset: usize, len: usize, name: &str| {
        payload
            .get(offset..offset + len)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| fail(format!("{name}: payload range out of bounds")))
    };
    let mut tensors = BTreeMap::new();
    for t in &header.tensors {
        let label: PartitionLabel = t
            .partition
            .parse()
            .map_err(|_| fail(format!("{}: bad partition label {:?}", t.name, t.partition)))?;
        let expected = label_of(&t.name)?;
        if label != expected {
            return Err(Error::Structural(format!(
                "tensor {} is labelled {label}, expected {expected}",
                t.name
            )));
        }
        let tensor = Tensor {
            shape: t.shape.clone(),
            data: slice(t.offset, t.len, &t.name)?,
        };
        if tensors.insert(t.name.clone(), tensor).is_some() {
            return Err(Error::Structural(format!(
                "tensor {} appears twice",
                t.name
            )));
        }
    }
    let params = ModelParams::from_tensors(header.arch, header.catalog, tensors)?;
    let optimizer = match header.optimizer {
        None => None,
        Some(entries) => {
            let mut state = AdamState::default();
            for e in entries {
                let ms = MomentState {
                    step: e.step,
                    m: slice(e.m_offset, e.len, &e.name)?,
                    v: slice(e.v_offset, e.len, &e.name)?,
                };
                state.moments.insert(e.name, ms);
            }
            Some(state)
        }
    };
    Ok(Checkpoint {
        params,
        optimizer,
        provenance: header.provenance,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(path, &read(path)?)
}

/// Loads a checkpoint into a known architecture and catalog; tensors that do
/// not fit are reported as a structural error.
pub fn load_checkpoint_for(
    path: &Path,
    arch: &ArchConfig,
    catalog: &ClassCatalog,
) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.params.arch == *arch && ckpt.params.catalog == *catalog {
        return Ok(ckpt);
    }
    let params =
        ModelParams::from_tensors(arch.clone(), catalog.clone(), ckpt.params.tensors().clone())?;
    Ok(Checkpoint { params, ..ckpt })
}

// ----------------------------------------------------------- embeddings

/// Replaces class embeddings with vectors read from a JSON object mapping
/// class names to arrays of `embedding_dim` numbers. Classes not listed keep
/// their current embedding.
pub fn load_embeddings(path: &Path, params: &mut ModelParams) -> Result<usize> {
    let table: BTreeMap<String, Vec<f64>> = read_json(path)?;
    let dim = params.arch.embedding_dim;
    let mut replaced = 0;
    for (name, vector) in table {
        let k = params.catalog.id_of(&name)?;
        if vector.len() != dim || vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                path,
                format!("{name}: expected {dim} finite values"),
            ));
        }
        let tensor = params
            .tensor_mut(&crate::model::head_name(k, "embedding"))
            .expect("every class has an embedding");
        tensor.data = vector;
        replaced += 1;
    }
    Ok(replaced)
}

// ----------------------------------------------------------------- logs

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    format_version: String,
}

/// One JSON value per line, preceded by a `{"format_version": …}` line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = serde_json::to_string(&JsonlHeader {
        format_version: FORMAT_VERSION.into(),
    })
    .expect("header serializes");
    out.push('\n');
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::format(path, e.to_string()))?);
        out.push('\n');
    }
    write(path, out.as_bytes())
}

pub fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    if !path.exists() {
        return write_jsonl(path, std::slice::from_ref(item));
    }
    let mut file = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(item).map_err(|e| Error::format(path, e.to_string()))?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty log"))?
        .map_err(|e| Error::io(path, e))?;
    let header: JsonlHeader =
        serde_json::from_str(&header).map_err(|e| Error::format(path, e.to_string()))?;
    check_version(path, &header.format_version)?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))?,
        );
    }
    Ok(out)
}

// --------------------------------------------------------------- scores

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    scan_id: String,
    u: f64,
    c: f64,
    o: f64,
    importance: f64,
}

#[derive(Serialize)]
struct RoundScoreRow<'a> {
    scan_id: &'a str,
    u: f64,
    c: f64,
    o: f64,
    importance: f64,
    regime: &'a str,
    round: usize,
}

fn version_comment() -> String {
    format!("# format_version {FORMAT_VERSION}\n")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    file.write_all(version_comment().as_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// `scan_id,u,c,o,importance`, one row per scan.
pub fn write_scores_csv(path: &Path, scores: &[ScanScore]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for s in scores {
        w.serialize(ScoreRow {
            scan_id: s.scan_id.clone(),
            u: s.uncertainty,
            c: s.consistency,
            o: s.overlap,
            importance: s.importance,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Scores of every round, with `regime` and `round` columns appended.
pub fn write_round_scores_csv(path: &Path, rounds: &[RoundRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rounds {
        for s in &r.scores {
            w.serialize(RoundScoreRow {
                scan_id: &s.scan_id,
                u: s.uncertainty,
                c: s.consistency,
                o: s.overlap,
                importance: s.importance,
                regime: &r.regime,
                round: r.round_index,
            })
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the first five columns of a score table; extra columns are ignored.
pub fn read_scores_csv(path: &Path) -> Result<Vec<ScanScore>> {
    let bytes = read(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(bytes.as_slice());
    reader
        .deserialize::<ScoreRow>()
        .map(|row| {
            let row = row.map_err(|e| csv_error(path, e))?;
            Ok(ScanScore {
                scan_id: row.scan_id,
                uncertainty: row.u,
                consistency: row.c,
                overlap: row.o,
                importance: row.importance,
            })
        })
        .collect()
}

// ----------------------------------------------------------------- runs

pub const LOCK_FILE: &str = ".lock";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const SCORES_FILE: &str = "scores.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: String,
    pub config_digest: String,
    pub catalog: ClassCatalog,
    pub base: BaseRecord,
}

pub fn checkpoint_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("{key}.ckpt"))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml(&text)
}

/// Writes every artifact of an experiment into `dir`.
pub fn write_run(dir: &Path, config: &ExperimentConfig, report: &ExperimentReport) -> Result<()> {
    write(&dir.join(CONFIG_FILE), config.to_toml().as_bytes())?;
    write_json(
        &dir.join(SUMMARY_FILE),
        &RunSummary {
            format_version: FORMAT_VERSION.into(),
            config_digest: report.config_digest.clone(),
            catalog: report.catalog.clone(),
            base: report.base.clone(),
        },
    )?;
    write_jsonl(&dir.join(HISTORY_FILE), &report.base.history.epochs)?;
    write_jsonl(&dir.join(ROUNDS_FILE), &report.rounds)?;
    write_round_scores_csv(&dir.join(SCORES_FILE), &report.rounds)?;
    write(&dir.join(REPORT_FILE), report.csv().as_bytes())?;
    for (key, params) in &report.checkpoints {
        let ckpt = Checkpoint {
            params: params.clone(),
            optimizer: None,
            provenance: TrainingProvenance {
                config_digest: report.config_digest.clone(),
                epoch: epochs_for(report, key),
                note: key.clone(),
            },
        };
        save_checkpoint(&checkpoint_path(dir, key), &ckpt)?;
    }
    Ok(())
}

fn epochs_for(report: &ExperimentReport, key: &str) -> usize {
    report
        .rounds
        .iter()
        .find(|r| r.checkpoint_out == key)
        .map_or(report.base.history.epochs.len(), |r| r.epochs)
}

/// The logs of one run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLogs {
    pub name: String,
    pub summary: RunSummary,
    pub rounds: Vec<RoundRecord>,
}

pub fn load_run(dir: &Path) -> Result<RunLogs> {
    let summary_path = dir.join(SUMMARY_FILE);
    let summary: RunSummary = read_json(&summary_path)?;
    check_version(&summary_path, &summary.format_version)?;
    let rounds = read_jsonl(&dir.join(ROUNDS_FILE))?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunLogs {
        name,
        summary,
        rounds,
    })
}

// --------------------------------------------------------------- report

/// Per-class DSC after every tuning epoch (`curves.csv`).
pub fn epoch_curves_csv(runs: &[RunLogs]) -> String {
    let mut out = String::from("run,regime,round,epoch,class,class_name,dsc\n");
    for run in runs {
        for r in &run.rounds {
            for e in &r.history.epochs {
                for (k, v) in &e.class_dsc {
                    let name = run.summary.catalog.name_of(*k).unwrap_or("?");
                    out.push_str(&format!(
                        "{},{},{},{},{k},{name},{v:.6}\n",
                        run.name, r.regime, r.round_index, e.epoch
                    ));
                }
            }
        }
    }
    out
}

/// Per-class DSC before the first round and after each round
/// (`trajectory.csv`).
pub fn trajectory_csv(runs: &[RunLogs]) -> String {
    let mut out = String::from("run,regime,round,class,class_name,dsc\n");
    for run in runs {
        for (regime, points) in trajectories(run) {
            for (round, dsc) in points {
                for (k, v) in dsc {
                    let name = run.summary.catalog.name_of(k).unwrap_or("?");
                    out.push_str(&format!(
                        "{},{regime},{round},{k},{name},{v:.6}\n",
                        run.name
                    ));
                }
            }
        }
    }
    out
}

type Trajectory = Vec<(usize, BTreeMap<ClassId, f64>)>;

fn trajectories(run: &RunLogs) -> BTreeMap<String, Trajectory> {
    let mut out: BTreeMap<String, Trajectory> = BTreeMap::new();
    for r in run.rounds.iter().filter(|r| r.error.is_none()) {
        let points = out
            .entry(r.regime.clone())
            .or_insert_with(|| vec![(0, run.summary.base.dsc.clone())]);
        points.push((r.round_index, r.dsc_after.clone()));
    }
    out
}

fn mean_of(dsc: &BTreeMap<ClassId, f64>, classes: &[ClassId]) -> f64 {
    crate::experiment::mean_over(dsc, classes)
}

const PALETTE: [&str; 9] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#17becf",
];

/// A minimal SVG line chart with a fixed [0, 1] y axis.
pub fn line_chart_svg(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 180.0, 40.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0));
    let (x_min, x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    let (x_min, x_max) = if x_min.is_finite() && x_max > x_min {
        (x_min, x_max)
    } else {
        (0.0, 1.0)
    };
    let px = |x: f64| left + (x - x_min) / (x_max - x_min) * plot_w;
    let py = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * plot_h;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        escape(title)
    );
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        s.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"#ddd\"/>\n<text x=\"{2}\" y=\"{3:.1}\" text-anchor=\"end\">{y:.1}</text>\n",
            py(y),
            left + plot_w,
            left - 6.0,
            py(y) + 4.0
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{0}\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w
    ));
    s.push_str(&format!(
        "<text x=\"{left}\" y=\"{0}\">{x_min}</text>\n<text x=\"{1}\" y=\"{0}\" text-anchor=\"end\">{x_max}</text>\n<text x=\"{2}\" y=\"{3}\" text-anchor=\"middle\">{4}</text>\n",
        top + plot_h + 16.0,
        left + plot_w,
        left + plot_w / 2.0,
        h - 12.0,
        escape(x_label)
    ));
    s.push_str(&format!(
        "<text transform=\"translate(16 {0}) rotate(-90)\" text-anchor=\"middle\">DSC</text>\n",
        top + plot_h / 2.0
    ));
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
        for &(x, y) in points {
            s.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        s.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{3}\" y=\"{4}\">{5}</text>\n",
            left + plot_w + 12.0,
            ly,
            left + plot_w + 32.0,
            left + plot_w + 38.0,
            ly + 4.0,
            escape(name)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Writes `curves.csv`, `trajectory.csv` and SVG charts for `runs` into
/// `out`. The output depends only on the logs.
pub fn write_report(out: &Path, runs: &[RunLogs]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |name: String, text: String| -> Result<()> {
        let path = out.join(name);
        write(&path, text.as_bytes())?;
        written.push(path);
        Ok(())
    };
    emit("curves.csv".into(), epoch_curves_csv(runs))?;
    emit("trajectory.csv".into(), trajectory_csv(runs))?;
    for run in runs {
        let catalog = &run.summary.catalog;
        emit(
            format!("{}_report.csv", run.name),
            report_csv(catalog, &run.summary.base, &run.rounds),
        )?;
        let traj = trajectories(run);
        for (group, classes) in [
            ("new", catalog.new_classes()),
            ("old", catalog.old_classes()),
        ] {
            if classes.is_empty() || traj.is_empty() {
                continue;
            }
            let series: Vec<_> = traj
                .iter()
                .map(|(regime, points)| {
                    let pts = points
                        .iter()
                        .map(|(r, d)| (*r as f64, mean_of(d, classes)))
                        .collect();
                    (regime.clone(), pts)
                })
                .collect();
            emit(
                format!("{}_rounds_{group}.svg", run.name),
                line_chart_svg(
                    &format!("{}: mean {group}-class DSC by round", run.name),
                    "round",
                    &series,
                ),
            )?;
        }
        let regimes: Vec<&str> = traj.keys().map(String::as_str).collect();
        for regime in regimes {
            let mut per_class: BTreeMap<ClassId, Vec<(f64, f64)>> = BTreeMap::new();
            let mut offset = 0usize;
            for r in run.rounds.iter().filter(|r| r.regime == regime) {
                for e in &r.history.epochs {
                    for (k, v) in &e.class_dsc {
                        per_class
                            .entry(*k)
                            .or_default()
                            .push(((offset + e.epoch + 1) as f64, *v));
                    }
                }
                offset += r.history.epochs.len();
            }
            if per_class.is_empty() {
                continue;
            }
            let series: Vec<_> = per_class
                .into_iter()
                .map(|(k, pts)| (catalog.name_of(k).unwrap_or("?").to_string(), pts))
                .collect();
            emit(
                format!("{}_{regime}_epochs.svg", run.name),
                line_chart_svg(
                    &format!("{}: {regime} per-class DSC", run.name),
                    "tuning epoch",
                    &series,
                ),
            )?;
        }
    }
    Ok(written)
}

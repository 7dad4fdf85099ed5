//! On-disk store for raw attribution maps.
//!
//! A run directory holds `manifest.json` plus, per record, a metadata
//! document `records/<id>.json` and a payload `records/<id>.f32` of
//! little-endian `f32` values in row-major `h×w` order. The manifest lists
//! every record with its raw extrema and the pooled extrema of the run, so
//! dataset-scope rendering needs no payload scan.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::detector::{Detection, NeuronAddress, Target};
use crate::error::{Error, Result};
use crate::gradcam::{AttributionMap, CamMode, TargetTransform};
use crate::normalize::Extrema;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_DIR: &str = "records";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub id: String,
    pub image_id: String,
    /// Source image, as resolvable at render time.
    pub image_path: PathBuf,
    pub detection_index: usize,
    pub detection: Detection,
    pub target: Target,
    pub neuron: NeuronAddress,
    pub target_layer: usize,
    /// `(h, w)`
    pub map_shape: (usize, usize),
    pub raw_min: f32,
    pub raw_max: f32,
    #[serde(skip)]
    pub payload: Vec<f32>,
}

impl ExplanationRecord {
    pub fn from_map(
        image_id: &str,
        image_path: &Path,
        detection_index: usize,
        detection: &Detection,
        map: &AttributionMap,
    ) -> Self {
        ExplanationRecord {
            id: record_id(image_id, detection_index, map.target),
            image_id: image_id.to_string(),
            image_path: image_path.to_path_buf(),
            detection_index,
            detection: detection.clone(),
            target: map.target,
            neuron: map.neuron,
            target_layer: map.target_layer,
            map_shape: (map.height(), map.width()),
            raw_min: map.raw_min,
            raw_max: map.raw_max,
            payload: map.values.data().to_vec(),
        }
    }

    pub fn to_map(&self) -> Result<AttributionMap> {
        let values = Tensor::new(vec![1, self.map_shape.0, self.map_shape.1], self.payload.clone())?;
        AttributionMap::new(values, self.target, self.neuron, self.target_layer, Some(self.detection_index))
    }

    pub fn extrema(&self) -> Extrema {
        Extrema {
            min: self.raw_min,
            max: self.raw_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_id(&self.id)?;
        let (h, w) = self.map_shape;
        if self.payload.len() != h * w {
            return Err(Error::Store(format!(
                "record {}: payload holds {} values, map shape {h}×{w} needs {}",
                self.id,
                self.payload.len(),
                h * w
            )));
        }
        self.check_extrema()
    }

    fn check_extrema(&self) -> Result<()> {
        match Extrema::of(&self.payload) {
            Some(e) if e.min == self.raw_min && e.max == self.raw_max => Ok(()),
            found => Err(Error::Store(format!(
                "record {}: stored extrema [{}, {}] disagree with payload extrema {:?}",
                self.id, self.raw_min, self.raw_max, found
            ))),
        }
    }
}

/// `<image_id>-d<index>-<obj|cls<k>>`
pub fn record_id(image_id: &str, detection_index: usize, target: Target) -> String {
    format!("{image_id}-d{detection_index:03}-{}", target.tag())
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Store(format!("record id `{id}` must be non-empty ASCII [A-Za-z0-9._-]")))
    }
}

/// Settings shared by every record of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub cam_mode: CamMode,
    pub target_transform: TargetTransform,
    pub input_width: usize,
    pub input_height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_id: String,
    pub target: Target,
    /// Paths relative to the run directory.
    pub metadata: String,
    pub blob: String,
    pub raw_min: f32,
    pub raw_max: f32,
}

impl ManifestEntry {
    pub fn extrema(&self) -> Extrema {
        Extrema {
            min: self.raw_min,
            max: self.raw_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub created_unix_ms: u64,
    pub run: RunInfo,
    pub records: Vec<ManifestEntry>,
    /// `None` for an empty run.
    pub global_extrema: Option<Extrema>,
}

/// Single writer of a run directory.
#[derive(Debug)]
pub struct RunWriter {
    dir: PathBuf,
    info: RunInfo,
    entries: Vec<ManifestEntry>,
    ids: HashSet<String>,
}

impl RunWriter {
    pub fn create(dir: impl Into<PathBuf>, info: RunInfo) -> Result<Self> {
        let dir = dir.into();
        let records = dir.join(RECORDS_DIR);
        fs::create_dir_all(&records).map_err(|e| Error::io(&records, e))?;
        Ok(RunWriter {
            dir,
            info,
            entries: Vec::new(),
            ids: HashSet::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_record(&mut self, record: &ExplanationRecord) -> Result<String> {
        record.validate()?;
        if self.ids.contains(&record.id) {
            return Err(Error::Store(format!("duplicate record id `{}`", record.id)));
        }
        let metadata = format!("{RECORDS_DIR}/{}.json", record.id);
        let blob = format!("{RECORDS_DIR}/{}.f32", record.id);
        write_json(&self.dir.join(&metadata), record)?;
        let mut bytes = Vec::with_capacity(record.payload.len() * 4);
        for v in &record.payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let blob_path = self.dir.join(&blob);
        fs::write(&blob_path, bytes).map_err(|e| Error::io(&blob_path, e))?;

        self.ids.insert(record.id.clone());
        self.entries.push(ManifestEntry {
            id: record.id.clone(),
            image_id: record.image_id.clone(),
            target: record.target,
            metadata,
            blob,
            raw_min: record.raw_min,
            raw_max: record.raw_max,
        });
        Ok(record.id.clone())
    }

    /// Writes the manifest, entries sorted by id, and returns it.
    pub fn finish(mut self) -> Result<Manifest> {
        self.entries.sort_by(|a, b| a.id.cmp(&b.id));
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            created_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            run: self.info,
            global_extrema: Extrema::pool(self.entries.iter().map(ManifestEntry::extrema)),
            records: self.entries,
        };
        write_json(&self.dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

/// Appends `record` to `sink`, returning its id.
pub fn write_record(record: &ExplanationRecord, sink: &mut RunWriter) -> Result<String> {
    sink.write_record(record)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a run lazily: the manifest up front, records one at a time.
#[derive(Debug, Clone)]
pub struct RunReader {
    dir: PathBuf,
    manifest: Manifest,
}

impl RunReader {
    /// Accepts the manifest file or the run directory containing it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let manifest: Manifest = read_json(&manifest_path)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Store(format!(
                "unsupported manifest format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(RunReader { dir, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn global_extrema(&self) -> Option<Extrema> {
        self.manifest.global_extrema
    }

    /// Loads one record. With `verify`, stored extrema are checked against
    /// the payload and the manifest entry.
    pub fn read_record(&self, entry: &ManifestEntry, verify: bool) -> Result<ExplanationRecord> {
        let mut record: ExplanationRecord = read_json(&self.dir.join(&entry.metadata))?;
        let blob_path = self.dir.join(&entry.blob);
        let bytes = fs::read(&blob_path)
            .map_err(|e| Error::Store(format!("record {}: cannot read blob {}: {e}", entry.id, blob_path.display())))?;
        if !bytes.len().is_multiple_of(4) {
            return Err(Error::Store(format!("record {}: blob is not a whole number of floats", entry.id)));
        }
        record.payload = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let (h, w) = record.map_shape;
        if record.payload.len() != h * w {
            return Err(Error::Store(format!(
                "record {}: blob holds {} values, expected {}",
                entry.id,
                record.payload.len(),
                h * w
            )));
        }
        if verify {
            record.check_extrema()?;
            if record.id != entry.id || record.extrema() != entry.extrema() {
                return Err(Error::Store(format!("record {}: metadata disagrees with the manifest entry", entry.id)));
            }
        }
        Ok(record)
    }

    pub fn records(&self, verify: bool) -> impl Iterator<Item = Result<ExplanationRecord>> + '_ {
        self.manifest.records.iter().map(move |e| self.read_record(e, verify))
    }
}

/// Loads every record of a run along with the pooled extrema.
pub fn read_run(manifest_path: impl AsRef<Path>, verify: bool) -> Result<(Vec<ExplanationRecord>, Option<Extrema>)> {
    let reader = RunReader::open(manifest_path)?;
    let records = reader.records(verify).collect::<Result<Vec<_>>>()?;
    if verify {
        let pooled = Extrema::pool(records.iter().map(ExplanationRecord::extrema));
        if pooled != reader.global_extrema() {
            return Err(Error::Store(format!(
                "manifest global extrema {:?} disagree with records {pooled:?}",
                reader.global_extrema()
            )));
        }
    }
    Ok((records, reader.global_extrema()))
}

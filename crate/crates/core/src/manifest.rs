//! On-disk artifacts: clip and face manifests, the binary embedding store,
//! filter reports, cluster assignments and split manifests.
//!
//! Manifests are JSON Lines. Unknown fields are ignored; missing required
//! fields are hard errors. Every parse error carries the 1-based line number.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"LFAEMB01";
const EMBEDDING_HEADER_LEN: usize = 8 + 8 + 4;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: invalid field \"{field}\": {message}")]
    Invalid {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: duplicate clip_id \"{clip_id}\"")]
    DuplicateClip { line: usize, clip_id: String },
    #[error("line {line}: unknown clip \"{clip_id}\"")]
    UnknownClip { line: usize, clip_id: String },
    #[error("embedding store: bad magic")]
    BadMagic,
    #[error("embedding store: truncated ({expected} bytes expected, {actual} present)")]
    Truncated { expected: u64, actual: u64 },
    #[error("embedding store: dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("embedding store: non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
}

impl ManifestError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        ManifestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

type Result<T> = std::result::Result<T, ManifestError>;

/// One video clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
    pub fps: f64,
}

impl ClipRecord {
    fn validate(&self, line: usize) -> Result<()> {
        let invalid = |field, message: &str| ManifestError::Invalid {
            line,
            field,
            message: message.to_string(),
        };
        if self.clip_id.is_empty() {
            return Err(invalid("clip_id", "must be non-empty"));
        }
        if self.width == 0 {
            return Err(invalid("width", "must be > 0"));
        }
        if self.height == 0 {
            return Err(invalid("height", "must be > 0"));
        }
        if self.frame_count == 0 {
            return Err(invalid("frame_count", "must be >= 1"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(invalid("fps", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Normalized face box `(x, y, w, h)`, each a fraction of the frame size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn check(&self) -> std::result::Result<(), String> {
        let all = [self.x, self.y, self.w, self.h];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if self.x < 0.0 || self.y < 0.0 {
            return Err(format!("origin ({}, {}) outside [0,1]", self.x, self.y));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(format!("size ({}, {}) must be positive", self.w, self.h));
        }
        if self.x + self.w > 1.0 {
            return Err(format!("x+w = {} exceeds 1", self.x + self.w));
        }
        if self.y + self.h > 1.0 {
            return Err(format!("y+h = {} exceeds 1", self.y + self.h));
        }
        Ok(())
    }
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// One detected face in one frame. Angles are in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceObservation {
    pub clip_id: String,
    pub frame_index: u32,
    pub bbox: BBox,
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_row: Option<u64>,
}

impl FaceObservation {
    pub fn angles(&self) -> [f64; 3] {
        [self.pitch, self.yaw, self.roll]
    }

    fn validate(&self, line: usize, clip: &ClipRecord) -> Result<()> {
        self.bbox.check().map_err(|message| ManifestError::Invalid {
            line,
            field: "bbox",
            message,
        })?;
        for (field, v) in [("pitch", self.pitch), ("yaw", self.yaw), ("roll", self.roll)] {
            if !(v.is_finite() && (-180.0..=180.0).contains(&v)) {
                return Err(ManifestError::Invalid {
                    line,
                    field,
                    message: format!("{v} outside [-180, 180] degrees"),
                });
            }
        }
        if self.frame_index >= clip.frame_count {
            return Err(ManifestError::Invalid {
                line,
                field: "frame_index",
                message: format!(
                    "{} >= frame_count {} of clip \"{}\"",
                    self.frame_index, clip.frame_count, clip.clip_id
                ),
            });
        }
        Ok(())
    }
}

/// Why a clip was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reason {
    FaceCount,
    FaceProportion,
    PoseDiversity,
    IdentityConsistency,
    MissingData,
}

impl Reason {
    pub const ALL: [Reason; 5] = [
        Reason::FaceCount,
        Reason::FaceProportion,
        Reason::PoseDiversity,
        Reason::IdentityConsistency,
        Reason::MissingData,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Reason::FaceCount => "FACE_COUNT",
            Reason::FaceProportion => "FACE_PROPORTION",
            Reason::PoseDiversity => "POSE_DIVERSITY",
            Reason::IdentityConsistency => "IDENTITY_CONSISTENCY",
            Reason::MissingData => "MISSING_DATA",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_face_proportion: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_variation_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_similarity: Option<f64>,
}

/// Per-clip verdict. `accepted` holds exactly when `reasons` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub clip_id: String,
    pub accepted: bool,
    pub reasons: Vec<Reason>,
    pub metrics: FilterMetrics,
}

impl FilterDecision {
    /// Builds a decision whose verdict follows from `reasons`; reasons are
    /// sorted and deduplicated.
    pub fn new(clip_id: impl Into<String>, mut reasons: Vec<Reason>, metrics: FilterMetrics) -> Self {
        reasons.sort();
        reasons.dedup();
        Self {
            clip_id: clip_id.into(),
            accepted: reasons.is_empty(),
            reasons,
            metrics,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| ManifestError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| ManifestError::io(path, e))
}

/// Iterates non-blank lines of a JSON Lines stream, deserializing each one.
fn read_jsonl<T, R>(reader: R, path: &Path, mut each: impl FnMut(usize, T) -> Result<()>) -> Result<()>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| ManifestError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| ManifestError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        each(line_no, record)?;
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(items: impl IntoIterator<Item = T>, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    for item in items {
        serde_json::to_writer(&mut out, &item).map_err(|e| ManifestError::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| ManifestError::io(path, e))?;
    }
    out.flush().map_err(|e| ManifestError::io(path, e))
}

pub fn read_clip_manifest<R: BufRead>(reader: R) -> Result<Vec<ClipRecord>> {
    let mut seen = HashSet::new();
    let mut clips = Vec::new();
    read_jsonl(reader, Path::new("<clips>"), |line, clip: ClipRecord| {
        clip.validate(line)?;
        if !seen.insert(clip.clip_id.clone()) {
            return Err(ManifestError::DuplicateClip {
                line,
                clip_id: clip.clip_id,
            });
        }
        clips.push(clip);
        Ok(())
    })?;
    Ok(clips)
}

/// Parses `clips.jsonl`, returning records in file order.
pub fn parse_clip_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    read_clip_manifest(open(path)?).map_err(|e| with_path(e, path))
}

pub fn read_face_manifest<R: BufRead>(reader: R, clips: &[ClipRecord]) -> Result<Vec<FaceObservation>> {
    let by_id: HashMap<&str, &ClipRecord> = clips.iter().map(|c| (c.clip_id.as_str(), c)).collect();
    let mut faces = Vec::new();
    read_jsonl(reader, Path::new("<faces>"), |line, face: FaceObservation| {
        let clip = by_id
            .get(face.clip_id.as_str())
            .ok_or_else(|| ManifestError::UnknownClip {
                line,
                clip_id: face.clip_id.clone(),
            })?;
        face.validate(line, clip)?;
        faces.push(face);
        Ok(())
    })?;
    Ok(faces)
}

/// Parses `faces.jsonl` against an already-parsed clip manifest.
pub fn parse_face_manifest(path: &Path, clips: &[ClipRecord]) -> Result<Vec<FaceObservation>> {
    read_face_manifest(open(path)?, clips).map_err(|e| with_path(e, path))
}

fn with_path(e: ManifestError, path: &Path) -> ManifestError {
    match e {
        ManifestError::Io { source, .. } => ManifestError::io(path, source),
        other => other,
    }
}

/// Groups observations by clip, each group stably ordered by frame index.
pub fn group_by_clip(faces: &[FaceObservation]) -> BTreeMap<&str, Vec<&FaceObservation>> {
    let mut groups: BTreeMap<&str, Vec<&FaceObservation>> = BTreeMap::new();
    for face in faces {
        groups.entry(face.clip_id.as_str()).or_default().push(face);
    }
    for group in groups.values_mut() {
        group.sort_by_key(|f| f.frame_index);
    }
    groups
}

pub fn write_clip_manifest(clips: &[ClipRecord], path: &Path) -> Result<()> {
    write_jsonl(clips, path)
}

pub fn write_face_manifest(faces: &[FaceObservation], path: &Path) -> Result<()> {
    write_jsonl(faces, path)
}

/// Dense `rows × dim` matrix of `f32` embeddings, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim < 2 {
            return Err(ManifestError::DimensionMismatch(format!("dim {dim} < 2")));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(ManifestError::DimensionMismatch(format!(
                "{} values is not a multiple of dim {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(ManifestError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(ManifestError::DimensionMismatch(format!(
                    "row {i} has {} values, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    /// Empty store of the given width.
    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, i: usize) -> Option<&[f32]> {
        (i < self.rows()).then(|| self.row(i))
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != EMBEDDING_MAGIC {
            return Err(ManifestError::BadMagic);
        }
        if bytes.len() < EMBEDDING_HEADER_LEN {
            return Err(ManifestError::Truncated {
                expected: EMBEDDING_HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
        let dim = u32::from_le_bytes(bytes[16..20].try_into().expect("4-byte slice")) as u64;
        let payload = &bytes[EMBEDDING_HEADER_LEN..];
        let expected = rows
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| ManifestError::DimensionMismatch(format!("{rows} x {dim} overflows")))?;
        let actual = payload.len() as u64;
        if actual < expected {
            return Err(ManifestError::Truncated {
                expected: expected + EMBEDDING_HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        if actual > expected {
            return Err(ManifestError::DimensionMismatch(format!(
                "header declares {rows} x {dim} but payload holds {actual} bytes"
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Self::new(dim as usize, data)
    }
}

/// Reads `embeddings.bin`.
pub fn load_embedding_store(path: &Path) -> Result<EmbeddingStore> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| ManifestError::io(path, e))?;
    EmbeddingStore::from_bytes(&bytes)
}

pub fn write_embedding_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(&store.to_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| ManifestError::io(path, e))
}

/// Writes `report.jsonl`, one decision per line sorted by clip id.
pub fn write_report(decisions: &[FilterDecision], path: &Path) -> Result<()> {
    let mut sorted: Vec<&FilterDecision> = decisions.iter().collect();
    sorted.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    write_jsonl(sorted, path)
}

pub fn read_report(path: &Path) -> Result<Vec<FilterDecision>> {
    let mut decisions = Vec::new();
    read_jsonl(open(path)?, path, |line, d: FilterDecision| {
        if d.accepted != d.reasons.is_empty() {
            return Err(ManifestError::Invalid {
                line,
                field: "accepted",
                message: "must be true exactly when reasons is empty".into(),
            });
        }
        decisions.push(d);
        Ok(())
    })?;
    Ok(decisions)
}

/// One line of `clusters.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub sample_id: u64,
    pub cluster_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<u32>,
}

pub fn write_clusters(records: &[ClusterRecord], path: &Path) -> Result<()> {
    write_jsonl(records, path)
}

pub fn read_clusters(path: &Path) -> Result<Vec<ClusterRecord>> {
    let mut records = Vec::new();
    read_jsonl(open(path)?, path, |_, r: ClusterRecord| {
        records.push(r);
        Ok(())
    })?;
    Ok(records)
}

/// Writes any serializable value as pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| ManifestError::io(path, e.into()))?;
    out.write_all(b"\n")
        .and_then(|_| out.flush())
        .map_err(|e| ManifestError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| ManifestError::Malformed {
        line: e.line(),
        message: e.to_string(),
    })
}

//! Stage composition: filter → cluster → split, plus corpus statistics.
//!
//! The CLI is a thin wrapper around these functions, so running the stages
//! through the binary and through the library produces identical files.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClusterAssignment, ClusterConfig, SplitManifest};
use crate::consistency::{consistency_gate, GateConfig};
use crate::constraints::{evaluate_track, sample_frames, ClipFaceTrack, ConstraintConfig};
use crate::index::{IndexParams, IvfPqIndex};
use crate::manifest::{
    group_by_clip, ClipRecord, ClusterRecord, EmbeddingStore, FaceObservation, FilterDecision, ManifestError, Reason,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub constraints: ConstraintConfig,
    pub gate: GateConfig,
    pub cluster: ClusterConfig,
    pub index: IndexParams,
    /// Cluster individual frames instead of per-clip mean embeddings.
    pub per_frame: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl PipelineConfig {
    /// Defaults with `seed` threaded into every stochastic stage.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            constraints: ConstraintConfig::default(),
            gate: GateConfig::default(),
            cluster: ClusterConfig {
                seed,
                ..Default::default()
            },
            index: IndexParams {
                seed,
                ..Default::default()
            },
            per_frame: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.constraints.validate()?;
        self.cluster.validate()?;
        if !self.gate.threshold.is_finite() || self.gate.threshold.abs() > 1.0 {
            return Err(Error::Config(format!(
                "identity threshold {} outside [-1, 1]",
                self.gate.threshold
            )));
        }
        Ok(())
    }
}

/// Embedding rows of the sampled single-face frames, in frame order, plus
/// the number of such frames without an embedding.
fn track_rows(track: &ClipFaceTrack<'_>, store: &EmbeddingStore) -> Result<(Vec<(u32, usize)>, usize)> {
    let mut rows = Vec::new();
    let mut skipped = 0;
    for frame in &track.frames {
        let Some(face) = frame.single_face() else { continue };
        match face.embedding_row {
            Some(r) if (r as usize) < store.rows() => rows.push((frame.frame_index, r as usize)),
            Some(r) => {
                return Err(ManifestError::DimensionMismatch(format!(
                    "clip \"{}\" frame {} references embedding row {r}, store has {} rows",
                    track.clip_id,
                    frame.frame_index,
                    store.rows()
                ))
                .into())
            }
            None => skipped += 1,
        }
    }
    Ok((rows, skipped))
}

/// Facial constraints followed by the identity gate, for one clip.
pub fn filter_clip(
    clip: &ClipRecord,
    faces: &[&FaceObservation],
    store: &EmbeddingStore,
    constraints: &ConstraintConfig,
    gate: &GateConfig,
) -> Result<FilterDecision> {
    let track = sample_frames(clip, faces.iter().copied(), constraints.sample_stride);
    let decision = evaluate_track(&track, constraints);
    let (rows, skipped) = track_rows(&track, store)?;
    if skipped > 0 {
        tracing::debug!(clip = %clip.clip_id, skipped, "sampled frames without embeddings");
    }
    let rows: Vec<usize> = rows.into_iter().map(|(_, r)| r).collect();
    let report = consistency_gate(&clip.clip_id, &rows, store, gate)?;
    let mut reasons = decision.reasons;
    let mut metrics = decision.metrics;
    metrics.mean_similarity = report.mean_similarity;
    match report.mean_similarity {
        None => reasons.push(Reason::MissingData),
        Some(_) if !report.retained => reasons.push(Reason::IdentityConsistency),
        Some(_) => {}
    }
    Ok(FilterDecision::new(clip.clip_id.clone(), reasons, metrics))
}

/// Filters every clip in parallel; decisions come back sorted by `clip_id`.
pub fn filter_corpus(
    clips: &[ClipRecord],
    faces: &[FaceObservation],
    store: &EmbeddingStore,
    cfg: &PipelineConfig,
) -> Result<Vec<FilterDecision>> {
    cfg.validate()?;
    let by_clip = group_by_clip(faces);
    let mut order: Vec<&ClipRecord> = clips.iter().collect();
    order.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let empty = Vec::new();
    order
        .par_iter()
        .map(|clip| {
            let obs = by_clip.get(clip.clip_id.as_str()).unwrap_or(&empty);
            filter_clip(clip, obs, store, &cfg.constraints, &cfg.gate)
        })
        .collect()
}

/// One clustering sample: a clip (mean embedding) or a single frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub clip_id: String,
    pub frame_index: Option<u32>,
}

/// Builds the clustering input from the accepted clips of `report`, in
/// `clip_id` order. Per clip, the sample is the renormalized mean of its
/// frame embeddings; with `per_frame`, each embedded frame is a sample.
pub fn clustering_samples(
    report: &[FilterDecision],
    clips: &[ClipRecord],
    faces: &[FaceObservation],
    store: &EmbeddingStore,
    cfg: &PipelineConfig,
) -> Result<(EmbeddingStore, Vec<SampleRef>)> {
    let by_id: BTreeMap<&str, &ClipRecord> = clips.iter().map(|c| (c.clip_id.as_str(), c)).collect();
    let by_clip = group_by_clip(faces);
    let accepted: BTreeSet<&str> = report
        .iter()
        .filter(|d| d.accepted)
        .map(|d| d.clip_id.as_str())
        .collect();
    let dim = store.dim();
    let empty = Vec::new();
    let mut data = Vec::new();
    let mut samples = Vec::new();
    for clip_id in accepted {
        let clip = by_id
            .get(clip_id)
            .ok_or_else(|| Error::Config(format!("report clip \"{clip_id}\" is not in the clip manifest")))?;
        let obs = by_clip.get(clip_id).unwrap_or(&empty);
        let track = sample_frames(clip, obs.iter().copied(), cfg.constraints.sample_stride);
        let (rows, _) = track_rows(&track, store)?;
        if rows.is_empty() {
            return Err(Error::Config(format!("accepted clip \"{clip_id}\" has no embeddings")));
        }
        if cfg.per_frame {
            for (frame, r) in rows {
                data.extend_from_slice(store.row(r));
                samples.push(SampleRef {
                    clip_id: clip_id.to_string(),
                    frame_index: Some(frame),
                });
            }
        } else {
            let mut mean = vec![0.0f64; dim];
            for &(_, r) in &rows {
                for (m, &v) in mean.iter_mut().zip(store.row(r)) {
                    *m += f64::from(v);
                }
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Config(format!("clip \"{clip_id}\" has a zero mean embedding")));
            }
            data.extend(mean.iter().map(|v| (v / norm) as f32));
            samples.push(SampleRef {
                clip_id: clip_id.to_string(),
                frame_index: None,
            });
        }
    }
    Ok((EmbeddingStore::new(dim, data)?, samples))
}

#[derive(Debug, Clone)]
pub struct ClusterOutput {
    pub index: IvfPqIndex,
    pub assignment: ClusterAssignment,
    pub records: Vec<ClusterRecord>,
}

/// Builds the index over `samples` and runs the two-pass clustering.
pub fn cluster_samples(store: &EmbeddingStore, samples: &[SampleRef], cfg: &PipelineConfig) -> Result<ClusterOutput> {
    let index = IvfPqIndex::build(store, &cfg.index)?;
    let assignment = clustering::cluster(store, &index, &cfg.cluster)?;
    let records = samples
        .iter()
        .zip(&assignment.labels)
        .enumerate()
        .map(|(i, (s, &c))| ClusterRecord {
            sample_id: i as u64,
            cluster_id: c as u64,
            clip_id: Some(s.clip_id.clone()),
            frame_index: s.frame_index,
        })
        .collect();
    Ok(ClusterOutput {
        index,
        assignment,
        records,
    })
}

/// Reassembles an assignment from `clusters.jsonl` records (any order).
pub fn assignment_from_records(records: &[ClusterRecord]) -> Result<ClusterAssignment> {
    let mut sorted: Vec<&ClusterRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.sample_id);
    for (i, r) in sorted.iter().enumerate() {
        if r.sample_id != i as u64 {
            return Err(Error::Config(format!(
                "sample ids must be 0..{}; found {} at position {i}",
                records.len(),
                r.sample_id
            )));
        }
    }
    let groups: Vec<usize> = sorted.iter().map(|r| r.cluster_id as usize).collect();
    Ok(ClusterAssignment::canonical(&groups))
}

pub fn split(records: &[ClusterRecord], test_fraction: f64, seed: u64) -> Result<SplitManifest> {
    let assignment = assignment_from_records(records)?;
    Ok(clustering::split_identities(&assignment, test_fraction, seed)?)
}

/// Width of the angle-variation histogram buckets, in degrees.
pub const ANGLE_BUCKET_DEG: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_clips_in: usize,
    pub n_clips_out: usize,
    /// Rejected clips keyed by their first reason code.
    pub rejections: BTreeMap<String, usize>,
    /// Clips per 10° bucket of angle variation, keyed by the bucket's lower
    /// edge; clips without a pose metric are counted under `"none"`.
    pub angle_variation: BTreeMap<String, usize>,
    /// Number of clusters of each size; empty without cluster input.
    pub cluster_sizes: BTreeMap<usize, usize>,
    pub n_clusters: usize,
}

impl CorpusStats {
    pub fn from_report(report: &[FilterDecision], clusters: Option<&[ClusterRecord]>) -> Result<Self> {
        let mut rejections = BTreeMap::new();
        let mut angle_variation = BTreeMap::new();
        for d in report {
            if let Some(first) = d.reasons.first() {
                *rejections.entry(first.code().to_string()).or_insert(0) += 1;
            }
            let key = match d.metrics.angle_variation_deg {
                Some(v) => format!("{:03}", ((v / ANGLE_BUCKET_DEG).floor() * ANGLE_BUCKET_DEG) as i64),
                None => "none".to_string(),
            };
            *angle_variation.entry(key).or_insert(0) += 1;
        }
        let mut cluster_sizes = BTreeMap::new();
        let mut n_clusters = 0;
        if let Some(records) = clusters {
            let assignment = assignment_from_records(records)?;
            n_clusters = assignment.n_clusters;
            for size in assignment.sizes() {
                *cluster_sizes.entry(size).or_insert(0) += 1;
            }
        }
        Ok(Self {
            n_clips_in: report.len(),
            n_clips_out: report.iter().filter(|d| d.accepted).count(),
            rejections,
            angle_variation,
            cluster_sizes,
            n_clusters,
        })
    }
}

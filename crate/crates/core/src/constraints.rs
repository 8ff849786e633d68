//! Facial constraint filtering: frame subsampling, then the face count, face
//! proportion and pose diversity checks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{ClipRecord, FaceObservation, FilterDecision, FilterMetrics, Reason};

#[derive(Debug, Error, PartialEq)]
pub enum ConstraintError {
    #[error("clip \"{0}\" has no sampled frame with exactly one face")]
    EmptyTrack(String),
    #[error("invalid constraint config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    pub sample_stride: u32,
    pub min_face_proportion: f64,
    pub min_angle_variation: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            sample_stride: 3,
            min_face_proportion: 0.10,
            min_angle_variation: 30.0,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<(), ConstraintError> {
        if self.sample_stride < 1 {
            return Err(ConstraintError::InvalidConfig("sample_stride must be >= 1".into()));
        }
        if !(self.min_face_proportion > 0.0 && self.min_face_proportion < 1.0) {
            return Err(ConstraintError::InvalidConfig(
                "min_face_proportion must lie in (0, 1)".into(),
            ));
        }
        if !(self.min_angle_variation >= 0.0 && self.min_angle_variation.is_finite()) {
            return Err(ConstraintError::InvalidConfig(
                "min_angle_variation must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledFrame<'a> {
    pub frame_index: u32,
    pub faces: Vec<&'a FaceObservation>,
}

impl SampledFrame<'_> {
    /// The face of a single-face frame.
    pub fn single_face(&self) -> Option<&FaceObservation> {
        match self.faces.as_slice() {
            [face] => Some(face),
            _ => None,
        }
    }
}

/// Sampled frames of one clip, in increasing frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFaceTrack<'a> {
    pub clip_id: String,
    pub frames: Vec<SampledFrame<'a>>,
}

impl<'a> ClipFaceTrack<'a> {
    /// Faces of frames that hold exactly one face.
    pub fn single_faces(&self) -> impl Iterator<Item = &FaceObservation> + '_ {
        self.frames.iter().filter_map(SampledFrame::single_face)
    }
}

/// Keeps frames `0, stride, 2·stride, ...`. Sampled frames with no
/// observation appear with an empty face list; observations on other frames
/// are dropped.
pub fn sample_frames<'a>(
    clip: &ClipRecord,
    observations: impl IntoIterator<Item = &'a FaceObservation>,
    stride: u32,
) -> ClipFaceTrack<'a> {
    let stride = stride.max(1);
    let mut frames: Vec<SampledFrame<'a>> = (0..clip.frame_count)
        .step_by(stride as usize)
        .map(|frame_index| SampledFrame {
            frame_index,
            faces: Vec::new(),
        })
        .collect();
    for obs in observations {
        if obs.clip_id == clip.clip_id && obs.frame_index % stride == 0 {
            if let Some(frame) = frames.get_mut((obs.frame_index / stride) as usize) {
                frame.faces.push(obs);
            }
        }
    }
    ClipFaceTrack {
        clip_id: clip.clip_id.clone(),
        frames,
    }
}

/// Passes iff the track is non-empty and every sampled frame has exactly one face.
pub fn check_face_count(track: &ClipFaceTrack<'_>) -> bool {
    !track.frames.is_empty() && track.frames.iter().all(|f| f.faces.len() == 1)
}

/// Mean face-box area over the single-face sampled frames.
pub fn face_proportion(track: &ClipFaceTrack<'_>) -> Result<f64, ConstraintError> {
    let (sum, n) = track
        .single_faces()
        .fold((0.0, 0usize), |(s, n), f| (s + f.bbox.area(), n + 1));
    if n == 0 {
        return Err(ConstraintError::EmptyTrack(track.clip_id.clone()));
    }
    Ok(sum / n as f64)
}

/// Largest per-axis range (max − min) of pitch, yaw and roll over the
/// single-face sampled frames, in degrees.
pub fn angle_variation(track: &ClipFaceTrack<'_>) -> Result<f64, ConstraintError> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut any = false;
    for face in track.single_faces() {
        any = true;
        for (axis, v) in face.angles().into_iter().enumerate() {
            lo[axis] = lo[axis].min(v);
            hi[axis] = hi[axis].max(v);
        }
    }
    if !any {
        return Err(ConstraintError::EmptyTrack(track.clip_id.clone()));
    }
    Ok((0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max))
}

/// Applies the three facial constraints. Every evaluable constraint is run so
/// the decision lists all failures. When no sampled frame has exactly one face
/// the proportion and pose metrics are unavailable and `MISSING_DATA` is added.
pub fn evaluate_clip<'a>(
    clip: &ClipRecord,
    observations: impl IntoIterator<Item = &'a FaceObservation>,
    cfg: &ConstraintConfig,
) -> FilterDecision {
    let track = sample_frames(clip, observations, cfg.sample_stride);
    evaluate_track(&track, cfg)
}

pub fn evaluate_track(track: &ClipFaceTrack<'_>, cfg: &ConstraintConfig) -> FilterDecision {
    let mut reasons = Vec::new();
    let mut metrics = FilterMetrics::default();
    if !check_face_count(track) {
        reasons.push(Reason::FaceCount);
    }
    match face_proportion(track) {
        Ok(p) => {
            metrics.mean_face_proportion = Some(p);
            if p < cfg.min_face_proportion {
                reasons.push(Reason::FaceProportion);
            }
        }
        Err(_) => reasons.push(Reason::MissingData),
    }
    if let Ok(v) = angle_variation(track) {
        metrics.angle_variation_deg = Some(v);
        if v < cfg.min_angle_variation {
            reasons.push(Reason::PoseDiversity);
        }
    }
    FilterDecision::new(track.clip_id.clone(), reasons, metrics)
}

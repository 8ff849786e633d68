//! Seeded synthetic corpora with planted filter violations and known
//! identities. Every label in [`ClipTruth`] follows from the generation plan,
//! not from running the filters, so the corpus can serve as an oracle.
//!
//! Violations are planted against the default thresholds (stride 3, face
//! proportion 0.10, angle variation 30°, identity threshold 0.6) with wide
//! margins on both sides.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::manifest::{self, BBox, ClipRecord, EmbeddingStore, FaceObservation, ManifestError, Reason};

/// Probability of planting each violation in a clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationRates {
    pub face_count: f64,
    pub face_proportion: f64,
    pub pose_diversity: f64,
    pub identity_consistency: f64,
    pub missing_data: f64,
}

impl Default for ViolationRates {
    fn default() -> Self {
        Self {
            face_count: 0.10,
            face_proportion: 0.10,
            pose_diversity: 0.15,
            identity_consistency: 0.10,
            missing_data: 0.05,
        }
    }
}

impl ViolationRates {
    pub fn none() -> Self {
        Self {
            face_count: 0.0,
            face_proportion: 0.0,
            pose_diversity: 0.0,
            identity_consistency: 0.0,
            missing_data: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub clips_per_identity: usize,
    pub dim: usize,
    pub seed: u64,
    pub rates: ViolationRates,
    pub min_frames: u32,
    pub max_frames: u32,
    /// Norm of the per-frame noise added to a unit identity vector; within-
    /// identity cosine is about `1 / (1 + noise²)`.
    pub noise: f64,
    /// Probability that a clip also carries stray faces on unsampled frames.
    pub stray_face_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 10,
            clips_per_identity: 10,
            dim: 128,
            seed: 0,
            rates: ViolationRates::default(),
            min_frames: 30,
            max_frames: 90,
            noise: 0.3,
            stray_face_rate: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.dim == 0 {
            return Err("dim must be >= 1".into());
        }
        // Face-count violations sit strictly between the first and last
        // sampled frames, so at least three sampled frames are needed.
        if self.min_frames < 7 || self.min_frames > self.max_frames {
            return Err("need 7 <= min_frames <= max_frames".into());
        }
        let r = &self.rates;
        for p in [
            r.face_count,
            r.face_proportion,
            r.pose_diversity,
            r.identity_consistency,
            r.missing_data,
            self.stray_face_rate,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("rate {p} outside [0, 1]"));
            }
        }
        if !(self.noise >= 0.0 && self.noise < 0.5) {
            return Err("noise must lie in [0, 0.5)".into());
        }
        if self.rates.identity_consistency > 0.0 && self.n_identities < 2 {
            return Err("identity violations need at least two identities".into());
        }
        Ok(())
    }
}

/// Ground truth for one generated clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipTruth {
    pub clip_id: String,
    pub identity: u64,
    pub accepted: bool,
    /// Expected reason codes, sorted.
    pub reasons: Vec<Reason>,
    /// Planted pose range in degrees over the sampled single-face frames.
    pub angle_variation_deg: f64,
    /// Identity whose embeddings were mixed into the clip, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impostor: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub clips: Vec<ClipRecord>,
    pub faces: Vec<FaceObservation>,
    pub store: EmbeddingStore,
    pub truth: Vec<ClipTruth>,
}

pub const CLIPS_FILE: &str = "clips.jsonl";
pub const FACES_FILE: &str = "faces.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const TRUTH_FILE: &str = "truth.jsonl";

impl Corpus {
    /// Writes `clips.jsonl`, `faces.jsonl`, `embeddings.bin` and `truth.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<(), ManifestError> {
        std::fs::create_dir_all(dir).map_err(|e| ManifestError::io(dir, e))?;
        manifest::write_clip_manifest(&self.clips, &dir.join(CLIPS_FILE))?;
        manifest::write_face_manifest(&self.faces, &dir.join(FACES_FILE))?;
        manifest::write_embedding_store(&self.store, &dir.join(EMBEDDINGS_FILE))?;
        write_truth(&self.truth, &dir.join(TRUTH_FILE))
    }
}

pub fn write_truth(truth: &[ClipTruth], path: &Path) -> Result<(), ManifestError> {
    let mut text = String::new();
    for t in truth {
        text.push_str(&serde_json::to_string(t).expect("truth records serialize"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| ManifestError::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<Vec<ClipTruth>, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|e| ManifestError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ManifestError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Unit identity vectors, mutually orthogonal while `n <= dim`.
fn identity_bases(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut bases: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = gaussian(dim, rng);
        if i < dim {
            for b in &bases {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        unit(&mut v);
        bases.push(v);
    }
    bases
}

fn frame_embedding(base: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut n = gaussian(base.len(), rng);
    unit(&mut n);
    base.iter().zip(&n).map(|(b, e)| (b + noise * e) as f32).collect()
}

struct Plan {
    face_count: bool,
    face_proportion: bool,
    pose_diversity: bool,
    identity: bool,
    missing: bool,
}

impl Plan {
    fn reasons(&self) -> Vec<Reason> {
        let mut r = Vec::new();
        if self.face_count {
            r.push(Reason::FaceCount);
        }
        if self.face_proportion {
            r.push(Reason::FaceProportion);
        }
        if self.pose_diversity {
            r.push(Reason::PoseDiversity);
        }
        if self.identity {
            r.push(Reason::IdentityConsistency);
        }
        if self.missing {
            r.push(Reason::MissingData);
        }
        r
    }
}

fn face(clip_id: &str, frame: u32, area: f64, angles: [f64; 3], rng: &mut ChaCha8Rng) -> FaceObservation {
    let aspect: f64 = rng.gen_range(0.8..1.25);
    let w = (area * aspect).sqrt().min(1.0);
    let h = (area / w).min(1.0);
    FaceObservation {
        clip_id: clip_id.to_string(),
        frame_index: frame,
        bbox: BBox::new(rng.gen_range(0.0..=1.0 - w), rng.gen_range(0.0..=1.0 - h), w, h),
        pitch: angles[0],
        yaw: angles[1],
        roll: angles[2],
        embedding_row: None,
    }
}

/// Generates a corpus. Identical configurations give identical corpora.
pub fn generate(cfg: &SynthConfig) -> Result<Corpus, String> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bases = identity_bases(cfg.n_identities, cfg.dim, &mut rng);
    let mut clips = Vec::new();
    let mut faces = Vec::new();
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut truth = Vec::new();
    let rates = cfg.rates;

    for identity in 0..cfg.n_identities {
        for k in 0..cfg.clips_per_identity {
            let clip_id = format!("id{identity:04}_clip{k:04}");
            let frame_count = rng.gen_range(cfg.min_frames..=cfg.max_frames);
            clips.push(ClipRecord {
                clip_id: clip_id.clone(),
                width: 1280,
                height: 720,
                frame_count,
                fps: 25.0,
            });

            let missing = rng.gen_bool(rates.missing_data);
            let plan = Plan {
                face_count: rng.gen_bool(rates.face_count),
                face_proportion: rng.gen_bool(rates.face_proportion),
                pose_diversity: rng.gen_bool(rates.pose_diversity),
                // A mixed-identity clip is only observable with embeddings.
                identity: !missing && rng.gen_bool(rates.identity_consistency),
                missing,
            };

            let sampled: Vec<u32> = (0..frame_count).step_by(3).collect();
            let last = sampled.len() - 1;
            // Face-count damage lands strictly inside so the pose extremes survive.
            let damaged = plan.face_count.then(|| rng.gen_range(1..last));

            let (range, other_axes) = if plan.pose_diversity {
                (rng.gen_range(2.0..20.0), 0.5)
            } else {
                (rng.gen_range(40.0..120.0), 10.0)
            };
            let yaw_lo: f64 = rng.gen_range(-45.0..-20.0);
            let pitch0: f64 = rng.gen_range(-15.0..15.0);
            let roll0: f64 = rng.gen_range(-10.0..10.0);
            let other = other_axes * range / 120.0;
            let (area_lo, area_hi) = if plan.face_proportion {
                (0.01, 0.07)
            } else {
                (0.14, 0.45)
            };

            let impostor = plan.identity.then(|| {
                let j = rng.gen_range(0..cfg.n_identities - 1);
                (if j >= identity { j + 1 } else { j }) as u64
            });

            let mut embedded = 0usize;
            for (s, &frame) in sampled.iter().enumerate() {
                if Some(s) == damaged {
                    // Either no face at all, or two faces; neither carries an embedding.
                    if rng.gen_bool(0.5) {
                        for _ in 0..2 {
                            let angles = [pitch0, yaw_lo + range / 2.0, roll0];
                            faces.push(face(&clip_id, frame, rng.gen_range(area_lo..area_hi), angles, &mut rng));
                        }
                    }
                    continue;
                }
                let yaw = match s {
                    0 => yaw_lo,
                    s if s == last => yaw_lo + range,
                    _ => yaw_lo + rng.gen_range(0.0..=range),
                };
                let angles = [
                    pitch0 + rng.gen_range(0.0..=other),
                    yaw,
                    roll0 + rng.gen_range(0.0..=other),
                ];
                let mut obs = face(&clip_id, frame, rng.gen_range(area_lo..area_hi), angles, &mut rng);
                let wants_row = if plan.missing {
                    embedded == 0 && rng.gen_bool(0.5)
                } else {
                    embedded < 2 || rng.gen_bool(0.9)
                };
                if wants_row {
                    let base = match impostor {
                        Some(j) if embedded % 2 == 1 => &bases[j as usize],
                        _ => &bases[identity],
                    };
                    obs.embedding_row = Some(rows.len() as u64);
                    rows.push(frame_embedding(base, cfg.noise, &mut rng));
                    embedded += 1;
                }
                faces.push(obs);
            }

            if rng.gen_bool(cfg.stray_face_rate) {
                // Crowded, tiny, frontal faces between sampled frames must be ignored.
                for frame in (1..frame_count).filter(|f| f % 3 != 0).take(2) {
                    for _ in 0..3 {
                        faces.push(face(&clip_id, frame, 0.001, [0.0, 0.0, 0.0], &mut rng));
                    }
                }
            }

            let reasons = plan.reasons();
            truth.push(ClipTruth {
                clip_id,
                identity: identity as u64,
                accepted: reasons.is_empty(),
                reasons,
                angle_variation_deg: range,
                impostor,
            });
        }
    }

    faces.sort_by(|a, b| (&a.clip_id, a.frame_index).cmp(&(&b.clip_id, b.frame_index)));
    // Shuffle clip order so consumers cannot rely on manifest order.
    clips.shuffle(&mut rng);
    let store = EmbeddingStore::from_rows(cfg.dim, &rows).map_err(|e| e.to_string())?;
    Ok(Corpus {
        clips,
        faces,
        store,
        truth,
    })
}

/// Mixture of `clusters` Gaussian clusters in `dim` dimensions whose
/// within-cluster variation lives in a random rank-`rank` subspace with
/// per-coordinate standard deviation `spread` (centres are standard normal). Rows are unit-normalized;
/// returns the store and each row's cluster.
pub fn gaussian_mixture(
    n: usize,
    dim: usize,
    clusters: usize,
    rank: usize,
    spread: f64,
    seed: u64,
) -> (EmbeddingStore, Vec<usize>) {
    assert!(dim > 0 && clusters > 0 && rank > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..clusters).map(|_| gaussian(dim, &mut rng)).collect();
    let scale = spread / (rank as f64).sqrt();
    let bases: Vec<Vec<Vec<f64>>> = (0..clusters)
        .map(|_| (0..rank).map(|_| gaussian(dim, &mut rng)).collect())
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = rng.gen_range(0..clusters);
        let z: Vec<f64> = (0..rank).map(|_| rng.sample(StandardNormal)).collect();
        let mut x = centres[c].clone();
        for (zj, b) in z.iter().zip(&bases[c]) {
            for (xi, bi) in x.iter_mut().zip(b) {
                *xi += scale * zj * bi;
            }
        }
        unit(&mut x);
        data.extend(x.iter().map(|&v| v as f32));
        labels.push(c);
    }
    let store = EmbeddingStore::new(dim, data).expect("dim > 0 and data sized to n·dim");
    (store, labels)
}

//! Dataset model, deterministic synthetic "breakfast-like" generation, and
//! stratified splitting.
//!
//! The synthetic generator stands in for real video features: each action id
//! gets a fixed centroid on the unit sphere, each recipe a fixed canonical
//! transcript of 3-6 distinct non-background actions, and a video is the
//! concatenation of noisy per-segment frame blocks. Background (id 0)
//! segments are inserted per video with a configurable probability; the
//! grammar keeps the background-free canonical transcripts.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::align::{Grammar, Transcript};
use crate::tensor::Matrix;
use crate::{ActionId, RecipeId};

/// One video: per-frame features plus video-level labels. `frame_labels`
/// exist for evaluation only and are never read during training.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// T x D matrix of per-frame features.
    pub features: Matrix,
    pub recipe: RecipeId,
    /// Sorted distinct action ids occurring in the transcript (background
    /// included when present).
    pub action_set: Vec<ActionId>,
    pub transcript: Transcript,
    /// Ground-truth action id per frame, length T.
    pub frame_labels: Vec<ActionId>,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feat_dim: usize,
    /// Total number of action classes, background id 0 included.
    pub num_actions: usize,
    pub num_recipes: usize,
    pub videos: Vec<VideoSample>,
    pub grammar: Grammar,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataError {
    InvalidConfig { reason: &'static str },
    /// Canonical transcripts need up to 6 distinct actions plus background.
    TooFewActions { num_actions: usize, required: usize },
    BadTrainFraction { fraction: f64 },
    TooFewVideos { recipe: RecipeId, count: usize },
    Invalid { video: String, reason: &'static str },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::InvalidConfig { reason } => write!(f, "invalid config: {reason}"),
            DataError::TooFewActions { num_actions, required } => write!(
                f,
                "num_actions = {num_actions} too small, need at least {required} \
                 (6 transcript actions plus background)"
            ),
            DataError::BadTrainFraction { fraction } => {
                write!(f, "train fraction {fraction} not strictly between 0 and 1")
            }
            DataError::TooFewVideos { recipe, count } => write!(
                f,
                "recipe {recipe} has {count} videos, need at least 3 to stratify a split"
            ),
            DataError::Invalid { video, reason } => write!(f, "video {video}: {reason}"),
        }
    }
}

impl core::error::Error for DataError {}

/// Canonical transcripts contain between 3 and 6 distinct actions.
const MIN_TRANSCRIPT_ACTIONS: usize = 3;
const MAX_TRANSCRIPT_ACTIONS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_recipes: usize,
    /// Action classes including background id 0.
    pub num_actions: usize,
    pub feat_dim: usize,
    pub videos_per_recipe: usize,
    pub min_segment_frames: usize,
    pub max_segment_frames: usize,
    pub noise_std: f64,
    /// Probability of inserting a background segment at each boundary slot.
    pub background_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            num_recipes: 10,
            num_actions: 48,
            feat_dim: 16,
            videos_per_recipe: 10,
            min_segment_frames: 5,
            max_segment_frames: 15,
            noise_std: 0.05,
            background_prob: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DataError> {
        if self.num_actions < MAX_TRANSCRIPT_ACTIONS + 1 {
            return Err(DataError::TooFewActions {
                num_actions: self.num_actions,
                required: MAX_TRANSCRIPT_ACTIONS + 1,
            });
        }
        if self.num_recipes == 0 {
            return Err(DataError::InvalidConfig { reason: "num_recipes must be >= 1" });
        }
        if self.feat_dim == 0 {
            return Err(DataError::InvalidConfig { reason: "feat_dim must be >= 1" });
        }
        if self.videos_per_recipe == 0 {
            return Err(DataError::InvalidConfig { reason: "videos_per_recipe must be >= 1" });
        }
        if self.min_segment_frames == 0 || self.min_segment_frames > self.max_segment_frames {
            return Err(DataError::InvalidConfig {
                reason: "segment frame bounds must satisfy 1 <= min <= max",
            });
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DataError::InvalidConfig { reason: "noise_std must be finite and >= 0" });
        }
        if !(0.0..=1.0).contains(&self.background_prob) {
            return Err(DataError::InvalidConfig { reason: "background_prob must be in [0, 1]" });
        }
        if self.num_actions > u16::MAX as usize || self.num_recipes > u16::MAX as usize {
            return Err(DataError::InvalidConfig { reason: "class counts must fit in u16" });
        }
        Ok(())
    }
}

/// Deterministic synthetic dataset: byte-identical output for equal configs.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset, DataError> {
    synth_generate_full(cfg).map(|(ds, _)| ds)
}

/// Generator internals exposed for the class-separability check: also
/// returns the per-action centroids the frames were emitted from.
pub(crate) fn synth_generate_full(cfg: &SynthConfig) -> Result<(Dataset, Vec<Vec<f64>>), DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // One unit-sphere centroid per action class, background included.
    let mut centroids = Vec::with_capacity(cfg.num_actions);
    for _ in 0..cfg.num_actions {
        centroids.push(unit_vector(&mut rng, cfg.feat_dim));
    }

    // One canonical transcript per recipe: 3-6 distinct non-background actions.
    let mut grammar = Grammar::new();
    let mut canonical: Vec<Transcript> = Vec::with_capacity(cfg.num_recipes);
    let mut pool: Vec<ActionId> = (1..cfg.num_actions as ActionId).collect();
    for recipe in 0..cfg.num_recipes {
        let len = rng.random_range(MIN_TRANSCRIPT_ACTIONS..=MAX_TRANSCRIPT_ACTIONS);
        pool.shuffle(&mut rng);
        let transcript: Transcript = pool[..len].to_vec();
        grammar.add(recipe as RecipeId, transcript.clone());
        canonical.push(transcript);
    }

    let mut videos = Vec::with_capacity(cfg.num_recipes * cfg.videos_per_recipe);
    for recipe in 0..cfg.num_recipes {
        for v in 0..cfg.videos_per_recipe {
            let base = &canonical[recipe];
            // Optional background segment at each of the L+1 boundary slots.
            let mut transcript: Transcript = Vec::with_capacity(2 * base.len() + 1);
            for &action in base {
                if rng.random::<f64>() < cfg.background_prob {
                    transcript.push(0);
                }
                transcript.push(action);
            }
            if rng.random::<f64>() < cfg.background_prob {
                transcript.push(0);
            }

            let mut frame_labels: Vec<ActionId> = Vec::new();
            let mut rows: Vec<f64> = Vec::new();
            for &action in &transcript {
                let len = rng.random_range(cfg.min_segment_frames..=cfg.max_segment_frames);
                let centroid = &centroids[action as usize];
                for _ in 0..len {
                    for &c in centroid {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        rows.push(c + cfg.noise_std * noise);
                    }
                    frame_labels.push(action);
                }
            }
            let frames = frame_labels.len();
            let features = Matrix::from_vec(frames, cfg.feat_dim, rows)
                .expect("generated features are finite by construction");

            let mut action_set: Vec<ActionId> = transcript.clone();
            action_set.sort_unstable();
            action_set.dedup();

            videos.push(VideoSample {
                id: format!("r{recipe:02}_v{v:03}"),
                features,
                recipe: recipe as RecipeId,
                action_set,
                transcript,
                frame_labels,
            });
        }
    }

    let ds = Dataset {
        feat_dim: cfg.feat_dim,
        num_actions: cfg.num_actions,
        num_recipes: cfg.num_recipes,
        videos,
        grammar,
    };
    Ok((ds, centroids))
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Deterministic stratified split.
///
/// Per recipe, a seeded shuffle selects `round(fraction * n)` training
/// videos (clamped so at least two remain); the leftovers are pooled in
/// recipe order and assigned alternately to val and test, halving the
/// remaining mass. The three parts are disjoint and cover the input.
pub fn split(
    ds: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadTrainFraction { fraction: train_fraction });
    }
    let mut by_recipe: BTreeMap<RecipeId, Vec<usize>> = BTreeMap::new();
    for (i, v) in ds.videos.iter().enumerate() {
        by_recipe.entry(v.recipe).or_default().push(i);
    }
    for (&recipe, indices) in &by_recipe {
        if indices.len() < 3 {
            return Err(DataError::TooFewVideos { recipe, count: indices.len() });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx: Vec<usize> = Vec::new();
    let mut rest: Vec<usize> = Vec::new();
    for (_, indices) in &by_recipe {
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng);
        let n = shuffled.len();
        let want = libm::round(train_fraction * n as f64) as usize;
        let take = want.clamp(1, n - 2);
        train_idx.extend_from_slice(&shuffled[..take]);
        rest.extend_from_slice(&shuffled[take..]);
    }
    let mut val_idx: Vec<usize> = Vec::new();
    let mut test_idx: Vec<usize> = Vec::new();
    for (k, idx) in rest.into_iter().enumerate() {
        if k % 2 == 0 {
            val_idx.push(idx);
        } else {
            test_idx.push(idx);
        }
    }

    let subset = |mut indices: Vec<usize>| -> Dataset {
        indices.sort_unstable();
        Dataset {
            feat_dim: ds.feat_dim,
            num_actions: ds.num_actions,
            num_recipes: ds.num_recipes,
            videos: indices.into_iter().map(|i| ds.videos[i].clone()).collect(),
            grammar: ds.grammar.clone(),
        }
    };
    Ok((subset(train_idx), subset(val_idx), subset(test_idx)))
}

impl Dataset {
    pub fn find_video(&self, id: &str) -> Option<&VideoSample> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Checks every dataset invariant: shared feature dimension, ids within
    /// range, transcript actions inside the action set, and frame labels
    /// consistent with the transcript order.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.feat_dim == 0 || self.num_actions == 0 || self.num_recipes == 0 {
            return Err(DataError::InvalidConfig { reason: "dataset dims must be >= 1" });
        }
        for v in &self.videos {
            let fail = |reason| Err(DataError::Invalid { video: v.id.clone(), reason });
            if v.features.cols() != self.feat_dim {
                return fail("feature dimension differs from dataset feat_dim");
            }
            if (v.recipe as usize) >= self.num_recipes {
                return fail("recipe id out of range");
            }
            if v.transcript.is_empty() {
                return fail("empty transcript");
            }
            if v.transcript.iter().any(|&a| (a as usize) >= self.num_actions) {
                return fail("transcript action out of range");
            }
            if v.frame_labels.len() != v.features.rows() {
                return fail("frame label count differs from frame count");
            }
            if !v.transcript.iter().all(|a| v.action_set.binary_search(a).is_ok()) {
                return fail("transcript action missing from action_set");
            }
            if !labels_follow_transcript(&v.frame_labels, &v.transcript) {
                return fail("frame labels are not a segmentation of the transcript");
            }
        }
        for (recipe, transcripts) in self.grammar.iter() {
            if (recipe as usize) >= self.num_recipes {
                return Err(DataError::InvalidConfig { reason: "grammar recipe out of range" });
            }
            for t in transcripts {
                if t.is_empty() {
                    return Err(DataError::InvalidConfig { reason: "grammar transcript empty" });
                }
                if t.iter().any(|&a| (a as usize) >= self.num_actions) {
                    return Err(DataError::InvalidConfig {
                        reason: "grammar transcript action out of range",
                    });
                }
            }
        }
        Ok(())
    }
}

/// True when `labels` can be produced by expanding each transcript entry
/// into at least one frame, in order. Handles consecutive duplicate
/// transcript entries by requiring each label run to be long enough to
/// cover them.
fn labels_follow_transcript(labels: &[ActionId], transcript: &[ActionId]) -> bool {
    if labels.is_empty() || transcript.is_empty() {
        return false;
    }
    // Collapse both into (id, multiplicity/run length) sequences.
    let mut label_runs: Vec<(ActionId, usize)> = Vec::new();
    for &l in labels {
        match label_runs.last_mut() {
            Some((id, n)) if *id == l => *n += 1,
            _ => label_runs.push((l, 1)),
        }
    }
    let mut transcript_runs: Vec<(ActionId, usize)> = Vec::new();
    for &a in transcript {
        match transcript_runs.last_mut() {
            Some((id, n)) if *id == a => *n += 1,
            _ => transcript_runs.push((a, 1)),
        }
    }
    label_runs.len() == transcript_runs.len()
        && label_runs
            .iter()
            .zip(&transcript_runs)
            .all(|((lid, frames), (tid, mult))| lid == tid && frames >= mult)
}

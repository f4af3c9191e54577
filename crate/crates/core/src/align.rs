//! Transcript-constrained Viterbi alignment over per-frame action
//! log-probabilities, grammar search over candidate transcripts, and the
//! framewise cross-entropy loss of the weak-supervision baseline.
//!
//! Scores stay in log space throughout so long videos cannot underflow.
//! There is no duration model: an alignment is scored purely by the sum of
//! the selected frame log-probabilities.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::tensor::Matrix;
use crate::{ActionId, RecipeId};

/// Ordered sequence of action ids a video is known to contain, without
/// frame boundaries. Length must be at least 1.
pub type Transcript = Vec<ActionId>;

/// Candidate transcripts per recipe, iterated in ascending recipe id so
/// grammar search is deterministic.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Grammar {
    transcripts: BTreeMap<RecipeId, Vec<Transcript>>,
}

impl Grammar {
    pub fn new() -> Grammar {
        Grammar::default()
    }

    pub fn add(&mut self, recipe: RecipeId, transcript: Transcript) {
        self.transcripts.entry(recipe).or_default().push(transcript);
    }

    pub fn is_empty(&self) -> bool {
        self.transcripts.is_empty()
    }

    /// Recipes in ascending id order.
    pub fn recipes(&self) -> impl Iterator<Item = RecipeId> + '_ {
        self.transcripts.keys().copied()
    }

    pub fn transcripts_for(&self, recipe: RecipeId) -> &[Transcript] {
        self.transcripts.get(&recipe).map_or(&[], Vec::as_slice)
    }

    /// (recipe, transcripts) pairs in ascending recipe id order.
    pub fn iter(&self) -> impl Iterator<Item = (RecipeId, &[Transcript])> + '_ {
        self.transcripts.iter().map(|(r, ts)| (*r, ts.as_slice()))
    }
}

/// A monotone assignment of a transcript to frames: `frame_labels[t]` is the
/// action id of frame `t`, segments appear in transcript order and each
/// transcript entry covers at least one frame. `log_score` is the maximized
/// sum of selected frame log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub frame_labels: Vec<ActionId>,
    pub log_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AlignError {
    EmptyTranscript,
    /// Transcript is longer than the video: no segmentation exists.
    Infeasible { frames: usize, segments: usize },
    ActionOutOfRange { action: ActionId, num_actions: usize },
    /// Grammar contains no transcript that fits in the video.
    NoFeasibleTranscript,
    /// exp of a frame's row does not sum to 1 within 1e-9.
    UnnormalizedRow { frame: usize, sum: f64 },
    LabelLengthMismatch { expected: usize, actual: usize },
    LabelOutOfRange { frame: usize, action: ActionId, num_actions: usize },
}

impl fmt::Display for AlignError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignError::EmptyTranscript => write!(f, "transcript is empty"),
            AlignError::Infeasible { frames, segments } => write!(
                f,
                "infeasible alignment: {segments} transcript entries cannot cover {frames} frames"
            ),
            AlignError::ActionOutOfRange { action, num_actions } => {
                write!(f, "action id {action} out of range (num_actions = {num_actions})")
            }
            AlignError::NoFeasibleTranscript => {
                write!(f, "grammar contains no feasible transcript for this video")
            }
            AlignError::UnnormalizedRow { frame, sum } => write!(
                f,
                "frame {frame}: exp(log-probs) sums to {sum}, expected 1 within 1e-9"
            ),
            AlignError::LabelLengthMismatch { expected, actual } => {
                write!(f, "label length {actual} does not match {expected} frames")
            }
            AlignError::LabelOutOfRange { frame, action, num_actions } => write!(
                f,
                "frame {frame}: label {action} out of range (num_actions = {num_actions})"
            ),
        }
    }
}

impl core::error::Error for AlignError {}

/// Best monotone segmentation of `transcript` over the video.
///
/// Maximizes the summed frame log-probability over all ways of expanding the
/// transcript into `T` frames with every entry covering at least one frame.
/// The DP runs backward over (frame, transcript position); the path is then
/// reconstructed forward, preferring "stay" on ties so segment boundaries
/// fall as late as possible. This makes the output unique and testable.
pub fn viterbi_align(
    frame_log_probs: &Matrix,
    transcript: &[ActionId],
) -> Result<Alignment, AlignError> {
    let frames = frame_log_probs.rows();
    let num_actions = frame_log_probs.cols();
    let segments = transcript.len();
    if segments == 0 {
        return Err(AlignError::EmptyTranscript);
    }
    if let Some(&action) = transcript.iter().find(|&&a| (a as usize) >= num_actions) {
        return Err(AlignError::ActionOutOfRange { action, num_actions });
    }
    if frames < segments {
        return Err(AlignError::Infeasible { frames, segments });
    }

    // dp[t, l] = best score of frames t.. given frame t lies in segment l.
    // Feasible states need l <= t (segments 0..l fit before t) and
    // segments-1-l <= frames-1-t (the rest fits after).
    let mut dp = alloc::vec![f64::NEG_INFINITY; frames * segments];
    for t in (0..frames).rev() {
        let l_min = (segments - 1).saturating_sub(frames - 1 - t);
        let l_max = t.min(segments - 1);
        for l in l_min..=l_max {
            let emit = frame_log_probs.get(t, transcript[l] as usize);
            let tail = if t + 1 == frames {
                0.0
            } else {
                let stay = dp[(t + 1) * segments + l];
                let advance = if l + 1 < segments {
                    dp[(t + 1) * segments + l + 1]
                } else {
                    f64::NEG_INFINITY
                };
                f64::max(stay, advance)
            };
            dp[t * segments + l] = emit + tail;
        }
    }

    let mut frame_labels = Vec::with_capacity(frames);
    let mut l = 0;
    frame_labels.push(transcript[0]);
    for t in 0..frames - 1 {
        let stay = dp[(t + 1) * segments + l];
        let advance = if l + 1 < segments {
            dp[(t + 1) * segments + l + 1]
        } else {
            f64::NEG_INFINITY
        };
        if advance > stay {
            l += 1;
        }
        frame_labels.push(transcript[l]);
    }
    debug_assert_eq!(l, segments - 1, "alignment must end in the final segment");

    Ok(Alignment { frame_labels, log_score: dp[0] })
}

/// Searches every transcript of every recipe and returns the alignment with
/// the highest log score. Ties break toward the lowest recipe id, then the
/// earliest transcript index.
pub fn best_transcript(
    frame_log_probs: &Matrix,
    grammar: &Grammar,
) -> Result<(RecipeId, Transcript, Alignment), AlignError> {
    let frames = frame_log_probs.rows();
    let mut best: Option<(RecipeId, &Transcript, Alignment)> = None;
    for (recipe, transcripts) in grammar.iter() {
        for transcript in transcripts {
            if transcript.is_empty() {
                return Err(AlignError::EmptyTranscript);
            }
            if transcript.len() > frames {
                continue;
            }
            let alignment = viterbi_align(frame_log_probs, transcript)?;
            let better = match &best {
                None => true,
                Some((_, _, incumbent)) => alignment.log_score > incumbent.log_score,
            };
            if better {
                best = Some((recipe, transcript, alignment));
            }
        }
    }
    best.map(|(r, t, a)| (r, t.clone(), a)).ok_or(AlignError::NoFeasibleTranscript)
}

/// Mean negative log-probability of the given per-frame labels.
///
/// Rows must be normalized log-probabilities: exp of each row has to sum to
/// 1 within 1e-9.
pub fn framewise_ce(frame_log_probs: &Matrix, labels: &[ActionId]) -> Result<f64, AlignError> {
    let frames = frame_log_probs.rows();
    let num_actions = frame_log_probs.cols();
    if labels.len() != frames {
        return Err(AlignError::LabelLengthMismatch { expected: frames, actual: labels.len() });
    }
    for (frame, &action) in labels.iter().enumerate() {
        if (action as usize) >= num_actions {
            return Err(AlignError::LabelOutOfRange { frame, action, num_actions });
        }
    }
    for t in 0..frames {
        let sum: f64 = frame_log_probs.row(t).iter().map(|&x| libm::exp(x)).sum();
        if crate::tensor::abs(sum - 1.0) > 1e-9 {
            return Err(AlignError::UnnormalizedRow { frame: t, sum });
        }
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(t, &a)| frame_log_probs.get(t, a as usize))
        .sum();
    Ok(-total / frames as f64)
}

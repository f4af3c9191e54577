//! Evaluation metrics: recipe accuracy, frame-level action accuracy,
//! frame-level macro action F1, and the attention-quality score
//!
//! ```text
//! Score_v = (1/A) * sum_i (1/T) * l_i . P(a_i)
//! ```
//!
//! where `l_i` is the one-hot frame vector of annotated action `a_i` and
//! `P(a_i)` its temporal attention row. The 1/T factor makes the raw score
//! length-dependent, so the normalized variant `score * T` is reported as a
//! secondary column for cross-video comparison.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::Dataset;
use crate::net::{self, Mode, NetError};
use crate::optim::Checkpoint;
use crate::tensor::Matrix;
use crate::{ActionId, RecipeId};

#[derive(Clone, Debug, PartialEq)]
pub enum MetricsError {
    LengthMismatch { left: usize, right: usize },
    Empty,
    VideoLengthMismatch { video: usize, pred: usize, truth: usize },
    LabelOutOfRange { video: usize, frame: usize, action: ActionId, num_actions: usize },
    /// No non-background class occurs in either predictions or truths.
    NoClassesPresent,
    /// Attention row count does not match the annotated action count.
    AttentionRows { expected: usize, actual: usize },
    AttentionFrames { expected: usize, actual: usize },
    NoAnnotatedActions { video: String },
    DimsMismatch { field: &'static str, checkpoint: usize, dataset: usize },
    Net(NetError),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::LengthMismatch { left, right } => {
                write!(f, "prediction/truth length mismatch: {left} vs {right}")
            }
            MetricsError::Empty => write!(f, "empty inputs"),
            MetricsError::VideoLengthMismatch { video, pred, truth } => {
                write!(f, "video {video}: {pred} predicted frames vs {truth} true frames")
            }
            MetricsError::LabelOutOfRange { video, frame, action, num_actions } => write!(
                f,
                "video {video} frame {frame}: label {action} out of range \
                 (num_actions = {num_actions})"
            ),
            MetricsError::NoClassesPresent => {
                write!(f, "no non-background class present in predictions or truths")
            }
            MetricsError::AttentionRows { expected, actual } => {
                write!(f, "attention has {actual} rows, expected {expected} annotated actions")
            }
            MetricsError::AttentionFrames { expected, actual } => {
                write!(f, "attention has {actual} columns, expected {expected} frames")
            }
            MetricsError::NoAnnotatedActions { video } => {
                write!(f, "video {video} has no annotated non-background actions")
            }
            MetricsError::DimsMismatch { field, checkpoint, dataset } => write!(
                f,
                "checkpoint/dataset mismatch on {field}: {checkpoint} vs {dataset}"
            ),
            MetricsError::Net(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for MetricsError {}

impl From<NetError> for MetricsError {
    fn from(e: NetError) -> MetricsError {
        MetricsError::Net(e)
    }
}

/// Attention-quality scores for one video: raw (1/T-scaled, in [0, 1/T])
/// and normalized (raw times T, in [0, 1]).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoAttentionScore {
    pub id: String,
    pub score: f64,
    pub score_norm: f64,
}

/// Aggregate evaluation over one dataset split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub recipe_accuracy: f64,
    pub frame_action_accuracy: f64,
    pub action_f1: f64,
    pub mean_attention_score: f64,
    pub mean_attention_score_norm: f64,
    pub per_video_scores: Vec<VideoAttentionScore>,
}

/// Fraction of exact recipe matches.
pub fn recipe_accuracy(
    predictions: &[RecipeId],
    truths: &[RecipeId],
) -> Result<f64, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Micro-averaged frame accuracy: one count per frame, pooled over videos.
pub fn frame_action_accuracy(
    pred_labels: &[Vec<ActionId>],
    true_labels: &[Vec<ActionId>],
) -> Result<f64, MetricsError> {
    if pred_labels.len() != true_labels.len() {
        return Err(MetricsError::LengthMismatch {
            left: pred_labels.len(),
            right: true_labels.len(),
        });
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (video, (pred, truth)) in pred_labels.iter().zip(true_labels).enumerate() {
        if pred.len() != truth.len() {
            return Err(MetricsError::VideoLengthMismatch {
                video,
                pred: pred.len(),
                truth: truth.len(),
            });
        }
        hits += pred.iter().zip(truth).filter(|(p, t)| p == t).count();
        total += pred.len();
    }
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(hits as f64 / total as f64)
}

/// Frame-level macro F1 over action classes, frames pooled across videos.
///
/// Background (id 0) participates in accuracy but is excluded here. Classes
/// absent from both predictions and truths are excluded from the macro
/// average; a class that is never predicted but does occur scores 0.
pub fn action_f1(
    pred_labels: &[Vec<ActionId>],
    true_labels: &[Vec<ActionId>],
    num_actions: usize,
) -> Result<f64, MetricsError> {
    if pred_labels.len() != true_labels.len() {
        return Err(MetricsError::LengthMismatch {
            left: pred_labels.len(),
            right: true_labels.len(),
        });
    }
    let mut tp = vec![0usize; num_actions];
    let mut fp = vec![0usize; num_actions];
    let mut fn_ = vec![0usize; num_actions];
    for (video, (pred, truth)) in pred_labels.iter().zip(true_labels).enumerate() {
        if pred.len() != truth.len() {
            return Err(MetricsError::VideoLengthMismatch {
                video,
                pred: pred.len(),
                truth: truth.len(),
            });
        }
        for (frame, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            for (name, action) in [("pred", p), ("truth", t)] {
                if (action as usize) >= num_actions {
                    let _ = name;
                    return Err(MetricsError::LabelOutOfRange {
                        video,
                        frame,
                        action,
                        num_actions,
                    });
                }
            }
            if p == t {
                tp[p as usize] += 1;
            } else {
                fp[p as usize] += 1;
                fn_[t as usize] += 1;
            }
        }
    }
    let mut sum = 0.0;
    let mut included = 0usize;
    for class in 1..num_actions {
        let present = tp[class] + fp[class] + fn_[class];
        if present == 0 {
            continue;
        }
        included += 1;
        let denom = 2 * tp[class] + fp[class] + fn_[class];
        if denom > 0 {
            sum += 2.0 * tp[class] as f64 / denom as f64;
        }
    }
    if included == 0 {
        return Err(MetricsError::NoClassesPresent);
    }
    Ok(sum / included as f64)
}

/// Sorted distinct non-background action ids occurring in the frame labels:
/// the actions a video is considered annotated with.
pub fn annotated_actions(frame_labels: &[ActionId]) -> Vec<ActionId> {
    let mut out: Vec<ActionId> = frame_labels.iter().copied().filter(|&a| a != 0).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Attention-quality score of one video.
///
/// Row i of `attention` must be the temporal attention distribution of the
/// i-th annotated action (ascending id order, see [`annotated_actions`]).
/// Returns the average over annotated actions of (1/T) times the attention
/// mass on that action's true frames; the maximum is 1/T, reached when every
/// row puts all mass on its own frames.
pub fn attention_score(
    attention: &Matrix,
    frame_labels: &[ActionId],
) -> Result<f64, MetricsError> {
    let actions = annotated_actions(frame_labels);
    if actions.is_empty() {
        return Err(MetricsError::NoAnnotatedActions { video: String::new() });
    }
    if attention.rows() != actions.len() {
        return Err(MetricsError::AttentionRows {
            expected: actions.len(),
            actual: attention.rows(),
        });
    }
    if attention.cols() != frame_labels.len() {
        return Err(MetricsError::AttentionFrames {
            expected: frame_labels.len(),
            actual: attention.cols(),
        });
    }
    let frames = frame_labels.len();
    let mut sum = 0.0;
    for (i, &action) in actions.iter().enumerate() {
        let row = attention.row(i);
        let mass: f64 = frame_labels
            .iter()
            .zip(row)
            .filter(|(&l, _)| l == action)
            .map(|(_, &p)| p)
            .sum();
        sum += mass / frames as f64;
    }
    Ok(sum / actions.len() as f64)
}

/// Selects the annotated-action rows of a full A x T attention map, in
/// ascending annotated id order. Shared by evaluation and the heatmap
/// export so both agree on row meaning.
pub fn annotated_attention_rows(
    attention: &Matrix,
    frame_labels: &[ActionId],
) -> Option<Matrix> {
    let actions = annotated_actions(frame_labels);
    if actions.is_empty() {
        return None;
    }
    let mut out = Matrix::zeros(actions.len(), attention.cols());
    for (i, &action) in actions.iter().enumerate() {
        out.row_mut(i).copy_from_slice(attention.row(action as usize));
    }
    Some(out)
}

/// Evaluates model parameters on a dataset split in eval mode.
///
/// Recipe prediction is the argmax of `recipe_probs`; the per-frame action
/// prediction is the argmax over actions of the frame score row.
pub fn evaluate_params(
    params: &net::ModelParams,
    split: &Dataset,
) -> Result<EvalReport, MetricsError> {
    if split.videos.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut recipe_preds = Vec::with_capacity(split.videos.len());
    let mut recipe_truths = Vec::with_capacity(split.videos.len());
    let mut frame_preds: Vec<Vec<ActionId>> = Vec::with_capacity(split.videos.len());
    let mut frame_truths: Vec<Vec<ActionId>> = Vec::with_capacity(split.videos.len());
    let mut per_video_scores = Vec::with_capacity(split.videos.len());
    let mut score_sum = 0.0;
    let mut score_norm_sum = 0.0;

    for video in &split.videos {
        let out = net::forward(video, params, Mode::Eval)?;
        recipe_preds.push(argmax(&out.recipe_probs) as RecipeId);
        recipe_truths.push(video.recipe);

        let frames = video.num_frames();
        let mut labels = Vec::with_capacity(frames);
        for t in 0..frames {
            labels.push(argmax(out.frame_scores.row(t)) as ActionId);
        }
        frame_preds.push(labels);
        frame_truths.push(video.frame_labels.clone());

        let rows = annotated_attention_rows(&out.attention, &video.frame_labels)
            .ok_or_else(|| MetricsError::NoAnnotatedActions { video: video.id.clone() })?;
        let score = attention_score(&rows, &video.frame_labels)?;
        let score_norm = score * frames as f64;
        score_sum += score;
        score_norm_sum += score_norm;
        per_video_scores.push(VideoAttentionScore { id: video.id.clone(), score, score_norm });
    }

    let n = split.videos.len() as f64;
    Ok(EvalReport {
        recipe_accuracy: recipe_accuracy(&recipe_preds, &recipe_truths)?,
        frame_action_accuracy: frame_action_accuracy(&frame_preds, &frame_truths)?,
        action_f1: action_f1(&frame_preds, &frame_truths, split.num_actions)?,
        mean_attention_score: score_sum / n,
        mean_attention_score_norm: score_norm_sum / n,
        per_video_scores,
    })
}

/// Evaluates a checkpoint on a dataset split after checking that the
/// checkpoint dimensions match the dataset.
pub fn evaluate(checkpoint: &Checkpoint, split: &Dataset) -> Result<EvalReport, MetricsError> {
    let dims = checkpoint.params.dims;
    let checks = [
        ("feat_dim", dims.feat_dim, split.feat_dim),
        ("num_actions", dims.num_actions, split.num_actions),
        ("num_recipes", dims.num_recipes, split.num_recipes),
    ];
    for (field, ckpt, ds) in checks {
        if ckpt != ds {
            return Err(MetricsError::DimsMismatch { field, checkpoint: ckpt, dataset: ds });
        }
    }
    evaluate_params(&checkpoint.params, split)
}

/// First index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

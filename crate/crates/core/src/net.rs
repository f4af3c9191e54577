//! The recipe/action classifier: a single-layer GRU over frame features, an
//! action attention layer producing one temporal attention distribution per
//! action, attention-weighted pooling into per-action features, and a recipe
//! attention head over those features.
//!
//! Training supervision is video level only: recipe cross-entropy, an
//! action-presence BCE over max-pooled frame scores, and an optional
//! diversity penalty `||P P^T - I||_F^2` that discourages different actions
//! from attending to the same frames. The backward pass is written by hand
//! and is checked coordinate-by-coordinate against central finite
//! differences (see `tensor::grad_check` and the acceptance suite).
//!
//! GRU recurrence, from h_0 = 0:
//!
//! ```text
//! z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
//! r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
//! c_t = tanh(W_h x_t + U_h (r_t . h_{t-1}) + b_h)
//! h_t = (1 - z_t) . h_{t-1} + z_t . c_t
//! ```
//!
//! Inverted dropout is applied to each h_t on the output stream only (the
//! recurrence always sees the clean h_t); in eval mode dropout is a no-op,
//! so inference needs no rescaling.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::VideoSample;
use crate::tensor::{abs, log_sum_exp, softmax_in_place, Matrix, TensorError};
use crate::{ActionId, RecipeId};

/// Network dimensions. `hidden` defaults to 64.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub feat_dim: usize,
    pub hidden: usize,
    pub num_actions: usize,
    pub num_recipes: usize,
}

impl ModelDims {
    pub const DEFAULT_HIDDEN: usize = 64;

    pub fn new(feat_dim: usize, num_actions: usize, num_recipes: usize) -> ModelDims {
        ModelDims { feat_dim, hidden: Self::DEFAULT_HIDDEN, num_actions, num_recipes }
    }

    pub fn with_hidden(mut self, hidden: usize) -> ModelDims {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.feat_dim == 0 || self.hidden == 0 || self.num_actions == 0 || self.num_recipes == 0
        {
            return Err(NetError::BadDims);
        }
        Ok(())
    }
}

/// All learnable weights. The field order below is the canonical flat order
/// used by `to_flat`/`from_flat` and by the checkpoint format.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// GRU input weights, H x D each.
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    /// GRU recurrent weights, H x H each.
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_h: Matrix,
    /// GRU gate biases, 1 x H each.
    pub b_z: Matrix,
    pub b_r: Matrix,
    pub b_h: Matrix,
    /// Action attention weights A x H and bias 1 x A.
    pub w_a: Matrix,
    pub b_a: Matrix,
    /// Recipe attention vector 1 x H.
    pub w_q: Matrix,
    /// Recipe output weights R x H and bias 1 x R.
    pub w_o: Matrix,
    pub b_o: Matrix,
}

/// Per-parameter gradients, same shapes as [`ModelParams`].
pub type Gradients = ModelParams;

pub const PARAM_FIELDS: [&str; 14] = [
    "w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h", "w_a", "b_a", "w_q", "w_o",
    "b_o",
];

fn field_shape(name: &str, dims: &ModelDims) -> (usize, usize) {
    let (d, h, a, r) = (dims.feat_dim, dims.hidden, dims.num_actions, dims.num_recipes);
    match name {
        "w_z" | "w_r" | "w_h" => (h, d),
        "u_z" | "u_r" | "u_h" => (h, h),
        "b_z" | "b_r" | "b_h" => (1, h),
        "w_a" => (a, h),
        "b_a" => (1, a),
        "w_q" => (1, h),
        "w_o" => (r, h),
        "b_o" => (1, r),
        _ => unreachable!("unknown parameter field {name}"),
    }
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> ModelParams {
        let shape = |name| {
            let (r, c) = field_shape(name, &dims);
            Matrix::zeros(r, c)
        };
        ModelParams {
            dims,
            w_z: shape("w_z"),
            w_r: shape("w_r"),
            w_h: shape("w_h"),
            u_z: shape("u_z"),
            u_r: shape("u_r"),
            u_h: shape("u_h"),
            b_z: shape("b_z"),
            b_r: shape("b_r"),
            b_h: shape("b_h"),
            w_a: shape("w_a"),
            b_a: shape("b_a"),
            w_q: shape("w_q"),
            w_o: shape("w_o"),
            b_o: shape("b_o"),
        }
    }

    /// Tensors in canonical order.
    pub fn named_tensors(&self) -> [(&'static str, &Matrix); 14] {
        [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_h", &self.w_h),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_h", &self.u_h),
            ("b_z", &self.b_z),
            ("b_r", &self.b_r),
            ("b_h", &self.b_h),
            ("w_a", &self.w_a),
            ("b_a", &self.b_a),
            ("w_q", &self.w_q),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 14] {
        [
            ("w_z", &mut self.w_z),
            ("w_r", &mut self.w_r),
            ("w_h", &mut self.w_h),
            ("u_z", &mut self.u_z),
            ("u_r", &mut self.u_r),
            ("u_h", &mut self.u_h),
            ("b_z", &mut self.b_z),
            ("b_r", &mut self.b_r),
            ("b_h", &mut self.b_h),
            ("w_a", &mut self.w_a),
            ("b_a", &mut self.b_a),
            ("w_q", &mut self.w_q),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
        ]
    }

    pub fn param_count(dims: &ModelDims) -> usize {
        PARAM_FIELDS
            .iter()
            .map(|name| {
                let (r, c) = field_shape(name, dims);
                r * c
            })
            .sum()
    }

    /// (name, flat index range) per tensor, in canonical order.
    pub fn param_groups(dims: &ModelDims) -> Vec<(&'static str, Range<usize>)> {
        let mut out = Vec::with_capacity(PARAM_FIELDS.len());
        let mut offset = 0;
        for name in PARAM_FIELDS {
            let (r, c) = field_shape(name, dims);
            out.push((name, offset..offset + r * c));
            offset += r * c;
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::param_count(&self.dims));
        for (_, tensor) in self.named_tensors() {
            out.extend_from_slice(tensor.as_slice());
        }
        out
    }

    pub fn from_flat(dims: ModelDims, flat: &[f64]) -> Result<ModelParams, NetError> {
        let expected = Self::param_count(&dims);
        if flat.len() != expected {
            return Err(NetError::FlatLength { expected, actual: flat.len() });
        }
        let mut params = ModelParams::zeros(dims);
        let mut offset = 0;
        for (_, tensor) in params.named_tensors_mut() {
            let n = tensor.as_slice().len();
            tensor.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(params)
    }

    /// `self += other`, used for gradient accumulation over a batch. The
    /// reduction order across samples is the caller's responsibility.
    pub fn accumulate(&mut self, other: &ModelParams) {
        assert_eq!(self.dims, other.dims, "accumulate dims mismatch");
        let other_tensors = other.named_tensors();
        for (i, (_, tensor)) in self.named_tensors_mut().into_iter().enumerate() {
            tensor.add_scaled(other_tensors[i].1, 1.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, tensor) in self.named_tensors_mut() {
            tensor.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// Deterministic initialization: every weight matrix is uniform in
/// [-s, s] with s = sqrt(1 / fan_in); biases are exactly zero.
pub fn init_params(dims: ModelDims, seed: u64) -> ModelParams {
    dims.validate().expect("init_params requires valid dims");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(dims);
    for (name, tensor) in params.named_tensors_mut() {
        if name.starts_with('b') {
            continue;
        }
        let fan_in = tensor.cols();
        let s = libm::sqrt(1.0 / fan_in as f64);
        for v in tensor.as_mut_slice() {
            *v = rng.random_range(-s..=s);
        }
    }
    params
}

/// Every coordinate (biases included) uniform in [-scale, scale].
///
/// Gradient-checking harnesses use this instead of [`init_params`]: at the
/// near-symmetric init point several adjoints almost cancel and land below
/// the finite-difference noise floor, which says nothing about correctness.
pub fn random_params(dims: ModelDims, seed: u64, scale: f64) -> ModelParams {
    dims.validate().expect("random_params requires valid dims");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ModelParams::param_count(&dims);
    let flat: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    ModelParams::from_flat(dims, &flat).expect("length matches by construction")
}

/// Forward/backward execution mode. Train mode carries the dropout rate and
/// the RNG that draws the masks; eval mode is deterministic and needs
/// neither.
pub enum Mode<'a> {
    Eval,
    Train { dropout_p: f64, rng: &'a mut dyn RngCore },
}

/// Everything the forward pass produces for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// T x H GRU outputs (post-dropout in train mode).
    pub hidden_states: Matrix,
    /// T x A pre-softmax per-frame action scores.
    pub frame_scores: Matrix,
    /// A x T temporal attention; row a is a distribution over frames.
    pub attention: Matrix,
    /// A x H attention-weighted action features.
    pub action_features: Matrix,
    /// Per-action MIL presence logits (max over frames of the score column).
    pub presence_logits: Vec<f64>,
    pub recipe_logits: Vec<f64>,
    pub recipe_probs: Vec<f64>,
}

/// Output of [`pool_and_recipe`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoolOutput {
    pub action_features: Matrix,
    pub presence_logits: Vec<f64>,
    pub recipe_logits: Vec<f64>,
    pub recipe_probs: Vec<f64>,
}

/// Video-level training labels: the recipe and the set of actions known to
/// occur. Frame labels are never consulted here. `action_set` must be
/// sorted.
#[derive(Clone, Copy, Debug)]
pub struct VideoLabels<'a> {
    pub recipe: RecipeId,
    pub action_set: &'a [ActionId],
}

impl<'a> VideoLabels<'a> {
    pub fn of(sample: &'a VideoSample) -> VideoLabels<'a> {
        VideoLabels { recipe: sample.recipe, action_set: &sample.action_set }
    }
}

/// Loss terms. The invariant `total = recipe_ce + lambda_act * action_bce +
/// lambda_div * diversity` holds exactly, and every term is nonnegative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recipe_ce: f64,
    pub action_bce: f64,
    pub diversity: f64,
    pub lambda_act: f64,
    pub lambda_div: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NetError {
    BadDims,
    Shape { op: &'static str, expected: usize, actual: usize },
    BadDropout { p: f64 },
    RecipeOutOfRange { recipe: RecipeId, num_recipes: usize },
    ActionOutOfRange { action: ActionId, num_actions: usize },
    NonFinite { location: &'static str },
    FlatLength { expected: usize, actual: usize },
    Tensor(TensorError),
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetError::BadDims => write!(f, "model dims must all be >= 1"),
            NetError::Shape { op, expected, actual } => {
                write!(f, "{op}: dimension mismatch, expected {expected}, got {actual}")
            }
            NetError::BadDropout { p } => write!(f, "dropout rate {p} not in [0, 1)"),
            NetError::RecipeOutOfRange { recipe, num_recipes } => {
                write!(f, "recipe label {recipe} out of range (num_recipes = {num_recipes})")
            }
            NetError::ActionOutOfRange { action, num_actions } => {
                write!(f, "action label {action} out of range (num_actions = {num_actions})")
            }
            NetError::NonFinite { location } => {
                write!(f, "non-finite value produced at {location}")
            }
            NetError::FlatLength { expected, actual } => {
                write!(f, "flat parameter vector length {actual}, expected {expected}")
            }
            NetError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for NetError {}

impl From<TensorError> for NetError {
    fn from(e: TensorError) -> NetError {
        NetError::Tensor(e)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn check_finite(values: &[f64], location: &'static str) -> Result<(), NetError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NetError::NonFinite { location })
    }
}

struct GruCache {
    /// T x H clean hidden states (pre-dropout), fed to the recurrence.
    hs_clean: Matrix,
    /// T x H output hidden states (post-dropout in train mode).
    hs: Matrix,
    /// T x H keep masks (entries 0/1); `None` in eval mode or at p = 0.
    masks: Option<Matrix>,
    inv_keep: f64,
    z: Matrix,
    r: Matrix,
    hcand: Matrix,
}

fn gru_run(
    features: &Matrix,
    params: &ModelParams,
    mode: Mode<'_>,
    h0: Option<&[f64]>,
) -> Result<GruCache, NetError> {
    let dims = params.dims;
    if features.cols() != dims.feat_dim {
        return Err(NetError::Shape {
            op: "gru_forward",
            expected: dims.feat_dim,
            actual: features.cols(),
        });
    }
    let (dropout_p, mut rng) = match mode {
        Mode::Eval => (0.0, None),
        Mode::Train { dropout_p, rng } => {
            if !(0.0..1.0).contains(&dropout_p) {
                return Err(NetError::BadDropout { p: dropout_p });
            }
            (dropout_p, Some(rng))
        }
    };
    let t_len = features.rows();
    let h = dims.hidden;
    let inv_keep = 1.0 / (1.0 - dropout_p);

    let mut hs_clean = Matrix::zeros(t_len, h);
    let mut hs = Matrix::zeros(t_len, h);
    let mut z_all = Matrix::zeros(t_len, h);
    let mut r_all = Matrix::zeros(t_len, h);
    let mut c_all = Matrix::zeros(t_len, h);
    let mut masks = if dropout_p > 0.0 { Some(Matrix::zeros(t_len, h)) } else { None };

    let zero_h0 = vec![0.0; h];
    let h_prev: Vec<f64> = h0.map_or(zero_h0, <[f64]>::to_vec);
    assert_eq!(h_prev.len(), h, "h0 length mismatch");
    let mut h_prev = h_prev;

    for t in 0..t_len {
        let x = features.row(t);

        let mut az = params.w_z.matvec(x);
        let uz = params.u_z.matvec(&h_prev);
        let bz = params.b_z.row(0);
        for i in 0..h {
            az[i] = sigmoid(az[i] + uz[i] + bz[i]);
        }
        let z = az;

        let mut ar = params.w_r.matvec(x);
        let ur = params.u_r.matvec(&h_prev);
        let br = params.b_r.row(0);
        for i in 0..h {
            ar[i] = sigmoid(ar[i] + ur[i] + br[i]);
        }
        let r = ar;

        let rh: Vec<f64> = (0..h).map(|i| r[i] * h_prev[i]).collect();
        let mut ah = params.w_h.matvec(x);
        let uh = params.u_h.matvec(&rh);
        let bh = params.b_h.row(0);
        for i in 0..h {
            ah[i] = libm::tanh(ah[i] + uh[i] + bh[i]);
        }
        let c = ah;

        let mut h_t = vec![0.0; h];
        for i in 0..h {
            h_t[i] = (1.0 - z[i]) * h_prev[i] + z[i] * c[i];
        }

        z_all.row_mut(t).copy_from_slice(&z);
        r_all.row_mut(t).copy_from_slice(&r);
        c_all.row_mut(t).copy_from_slice(&c);
        hs_clean.row_mut(t).copy_from_slice(&h_t);

        if let Some(mask_mat) = masks.as_mut() {
            let rng = rng.as_mut().expect("train mode carries an rng");
            for i in 0..h {
                let keep = if rng.random::<f64>() < dropout_p { 0.0 } else { 1.0 };
                mask_mat.set(t, i, keep);
                hs.set(t, i, h_t[i] * keep * inv_keep);
            }
        } else {
            hs.row_mut(t).copy_from_slice(&h_t);
        }

        h_prev = h_t;
    }

    check_finite(hs.as_slice(), "gru_hidden_states")?;
    Ok(GruCache { hs_clean, hs, masks, inv_keep, z: z_all, r: r_all, hcand: c_all })
}

/// Runs the GRU over a T x D feature sequence, returning the T x H hidden
/// state sequence. In train mode inverted dropout is applied to each output
/// state; in eval mode dropout is a no-op.
pub fn gru_forward(
    features: &Matrix,
    params: &ModelParams,
    mode: Mode<'_>,
) -> Result<Matrix, NetError> {
    gru_run(features, params, mode, None).map(|cache| cache.hs)
}

#[cfg(test)]
fn gru_forward_from(
    features: &Matrix,
    params: &ModelParams,
    mode: Mode<'_>,
    h0: &[f64],
) -> Result<Matrix, NetError> {
    gru_run(features, params, mode, Some(h0)).map(|cache| cache.hs)
}

/// Per-frame action scores E[t, a] = (W_a h_t + b_a)_a.
fn frame_score_matrix(hidden_states: &Matrix, params: &ModelParams) -> Result<Matrix, NetError> {
    let h = params.dims.hidden;
    if hidden_states.cols() != h {
        return Err(NetError::Shape {
            op: "action_attention",
            expected: h,
            actual: hidden_states.cols(),
        });
    }
    let t_len = hidden_states.rows();
    let a_len = params.dims.num_actions;
    let mut scores = Matrix::zeros(t_len, a_len);
    for t in 0..t_len {
        let e = params.w_a.matvec(hidden_states.row(t));
        let b = params.b_a.row(0);
        let row = scores.row_mut(t);
        for a in 0..a_len {
            row[a] = e[a] + b[a];
        }
    }
    Ok(scores)
}

/// Softmax over time of each score column: row a of the result is the
/// temporal attention distribution of action a.
fn attention_from_scores(frame_scores: &Matrix) -> Matrix {
    let t_len = frame_scores.rows();
    let a_len = frame_scores.cols();
    let mut attention = Matrix::zeros(a_len, t_len);
    let mut column = vec![0.0; t_len];
    for a in 0..a_len {
        for t in 0..t_len {
            column[t] = frame_scores.get(t, a);
        }
        softmax_in_place(&mut column);
        attention.row_mut(a).copy_from_slice(&column);
    }
    attention
}

/// Action attention layer: returns the T x A pre-softmax frame scores and
/// the A x T row-stochastic temporal attention map.
pub fn action_attention(
    hidden_states: &Matrix,
    params: &ModelParams,
) -> Result<(Matrix, Matrix), NetError> {
    let frame_scores = frame_score_matrix(hidden_states, params)?;
    check_finite(frame_scores.as_slice(), "frame_scores")?;
    let attention = attention_from_scores(&frame_scores);
    Ok((frame_scores, attention))
}

fn pool_from_scores(
    attention: &Matrix,
    hidden_states: &Matrix,
    frame_scores: &Matrix,
    params: &ModelParams,
) -> Result<(PoolOutput, Vec<usize>, Vec<f64>, Vec<f64>), NetError> {
    let a_len = params.dims.num_actions;
    let t_len = hidden_states.rows();
    if attention.rows() != a_len || attention.cols() != t_len {
        return Err(NetError::Shape {
            op: "pool_and_recipe",
            expected: a_len * t_len,
            actual: attention.rows() * attention.cols(),
        });
    }

    // F = P * H: one weighted sum of hidden states per action.
    let action_features = attention.matmul(hidden_states)?;

    // MIL max-pool over time; remember the argmax frame for the backward
    // pass (first maximum wins so the route is deterministic).
    let mut presence_logits = vec![0.0; a_len];
    let mut presence_argmax = vec![0usize; a_len];
    for a in 0..a_len {
        let mut best = frame_scores.get(0, a);
        let mut best_t = 0;
        for t in 1..t_len {
            let v = frame_scores.get(t, a);
            if v > best {
                best = v;
                best_t = t;
            }
        }
        presence_logits[a] = best;
        presence_argmax[a] = best_t;
    }

    // Recipe attention over action features.
    let wq = params.w_q.row(0);
    let mut attn_weights = vec![0.0; a_len];
    for a in 0..a_len {
        attn_weights[a] = action_features.row(a).iter().zip(wq).map(|(x, w)| x * w).sum::<f64>();
    }
    softmax_in_place(&mut attn_weights);

    let h = params.dims.hidden;
    let mut video_feature = vec![0.0; h];
    for a in 0..a_len {
        let row = action_features.row(a);
        for i in 0..h {
            video_feature[i] += attn_weights[a] * row[i];
        }
    }

    let mut recipe_logits = params.w_o.matvec(&video_feature);
    let bo = params.b_o.row(0);
    for (l, b) in recipe_logits.iter_mut().zip(bo) {
        *l += b;
    }
    check_finite(&recipe_logits, "recipe_logits")?;
    let mut recipe_probs = recipe_logits.clone();
    softmax_in_place(&mut recipe_probs);

    let pool = PoolOutput { action_features, presence_logits, recipe_logits, recipe_probs };
    Ok((pool, presence_argmax, attn_weights, video_feature))
}

/// Pools hidden states with the attention map and runs the recipe head.
///
/// `presence_logits[a]` is the max over frames of the per-frame score of
/// action a; the recipe head softmax-weights the action features with
/// `w_q`, producing one video feature that `w_o` maps to recipe logits.
pub fn pool_and_recipe(
    attention: &Matrix,
    hidden_states: &Matrix,
    params: &ModelParams,
) -> Result<PoolOutput, NetError> {
    let frame_scores = frame_score_matrix(hidden_states, params)?;
    check_finite(frame_scores.as_slice(), "frame_scores")?;
    pool_from_scores(attention, hidden_states, &frame_scores, params).map(|(pool, ..)| pool)
}

struct ForwardCache {
    gru: GruCache,
    frame_scores: Matrix,
    attention: Matrix,
    action_features: Matrix,
    presence_logits: Vec<f64>,
    presence_argmax: Vec<usize>,
    attn_weights: Vec<f64>,
    video_feature: Vec<f64>,
    recipe_logits: Vec<f64>,
    recipe_probs: Vec<f64>,
}

fn forward_cached(
    features: &Matrix,
    params: &ModelParams,
    mode: Mode<'_>,
) -> Result<ForwardCache, NetError> {
    let gru = gru_run(features, params, mode, None)?;
    let frame_scores = frame_score_matrix(&gru.hs, params)?;
    check_finite(frame_scores.as_slice(), "frame_scores")?;
    let attention = attention_from_scores(&frame_scores);
    let (pool, presence_argmax, attn_weights, video_feature) =
        pool_from_scores(&attention, &gru.hs, &frame_scores, params)?;
    Ok(ForwardCache {
        gru,
        frame_scores,
        attention,
        action_features: pool.action_features,
        presence_logits: pool.presence_logits,
        presence_argmax,
        attn_weights,
        video_feature,
        recipe_logits: pool.recipe_logits,
        recipe_probs: pool.recipe_probs,
    })
}

/// Full forward pass: GRU, action attention, pooling, recipe head.
///
/// Eval mode is a pure function of (sample, params); two calls return
/// bit-identical outputs. Train mode with dropout 0 matches eval exactly.
pub fn forward(
    sample: &VideoSample,
    params: &ModelParams,
    mode: Mode<'_>,
) -> Result<ModelOutput, NetError> {
    let cache = forward_cached(&sample.features, params, mode)?;
    Ok(ModelOutput {
        hidden_states: cache.gru.hs,
        frame_scores: cache.frame_scores,
        attention: cache.attention,
        action_features: cache.action_features,
        presence_logits: cache.presence_logits,
        recipe_logits: cache.recipe_logits,
        recipe_probs: cache.recipe_probs,
    })
}

/// Gradient seeds produced alongside the loss.
struct LossGrads {
    /// d loss / d recipe_logits.
    d_recipe_logits: Vec<f64>,
    /// d loss / d presence_logits.
    d_presence: Vec<f64>,
    /// d loss / d attention from the diversity term (None when lambda_div = 0).
    d_attention_div: Option<Matrix>,
}

fn loss_terms(
    recipe_logits: &[f64],
    presence_logits: &[f64],
    attention: &Matrix,
    labels: &VideoLabels<'_>,
    lambda_act: f64,
    lambda_div: f64,
) -> Result<(LossBreakdown, LossGrads), NetError> {
    let num_recipes = recipe_logits.len();
    let num_actions = presence_logits.len();
    if (labels.recipe as usize) >= num_recipes {
        return Err(NetError::RecipeOutOfRange { recipe: labels.recipe, num_recipes });
    }
    if let Some(&action) = labels.action_set.iter().find(|&&a| (a as usize) >= num_actions) {
        return Err(NetError::ActionOutOfRange { action, num_actions });
    }

    // Recipe cross-entropy from logits, so a hard-zero probability can
    // never produce an infinite loss.
    let r = labels.recipe as usize;
    let recipe_ce = log_sum_exp(recipe_logits) - recipe_logits[r];
    let mut d_recipe_logits = recipe_logits.to_vec();
    softmax_in_place(&mut d_recipe_logits);
    d_recipe_logits[r] -= 1.0;

    // Mean binary cross-entropy of sigmoid presence scores against the
    // action set, in the numerically stable logits form.
    let mut action_bce = 0.0;
    let mut d_presence = vec![0.0; num_actions];
    let inv_a = 1.0 / num_actions as f64;
    for a in 0..num_actions {
        let u = presence_logits[a];
        let y = if labels.action_set.binary_search(&(a as ActionId)).is_ok() { 1.0 } else { 0.0 };
        action_bce += f64::max(u, 0.0) - u * y + libm::log1p(libm::exp(-abs(u)));
        d_presence[a] = lambda_act * inv_a * (sigmoid(u) - y);
    }
    action_bce *= inv_a;

    // Diversity penalty ||P P^T - I||_F^2. Gradient: 4 (P P^T - I) P.
    let mut diversity = 0.0;
    let mut d_attention_div = None;
    let gram = attention.matmul_nt(attention)?;
    let a_len = attention.rows();
    let mut centered = gram;
    for i in 0..a_len {
        for j in 0..a_len {
            let v = centered.get(i, j) - if i == j { 1.0 } else { 0.0 };
            centered.set(i, j, v);
            diversity += v * v;
        }
    }
    if lambda_div != 0.0 {
        let mut d = centered.matmul(attention)?;
        d.scale(4.0 * lambda_div);
        d_attention_div = Some(d);
    }

    let total = recipe_ce + lambda_act * action_bce + lambda_div * diversity;
    if !total.is_finite() {
        return Err(NetError::NonFinite { location: "loss" });
    }
    let breakdown =
        LossBreakdown { total, recipe_ce, action_bce, diversity, lambda_act, lambda_div };
    Ok((breakdown, LossGrads { d_recipe_logits, d_presence, d_attention_div }))
}

/// Loss on a forward output: recipe cross-entropy, action-presence BCE and
/// the attention diversity penalty, combined as
/// `total = recipe_ce + lambda_act * action_bce + lambda_div * diversity`.
pub fn compute_loss(
    out: &ModelOutput,
    labels: &VideoLabels<'_>,
    lambda_act: f64,
    lambda_div: f64,
) -> Result<LossBreakdown, NetError> {
    loss_terms(
        &out.recipe_logits,
        &out.presence_logits,
        &out.attention,
        labels,
        lambda_act,
        lambda_div,
    )
    .map(|(breakdown, _)| breakdown)
}

/// Forward plus exact reverse-mode differentiation of the total loss with
/// respect to every parameter. In train mode the dropout masks drawn during
/// the internal forward pass are reused on the way back.
pub fn backward(
    sample: &VideoSample,
    params: &ModelParams,
    labels: &VideoLabels<'_>,
    lambda_act: f64,
    lambda_div: f64,
    mode: Mode<'_>,
) -> Result<(LossBreakdown, Gradients), NetError> {
    let features = &sample.features;
    let cache = forward_cached(features, params, mode)?;
    let (breakdown, seeds) = loss_terms(
        &cache.recipe_logits,
        &cache.presence_logits,
        &cache.attention,
        labels,
        lambda_act,
        lambda_div,
    )?;

    let dims = params.dims;
    let (h, a_len, t_len) = (dims.hidden, dims.num_actions, features.rows());
    let mut grads = Gradients::zeros(dims);

    // Recipe head: logits = W_o g + b_o.
    let d_logits = &seeds.d_recipe_logits;
    grads.w_o.add_scaled_outer(d_logits, &cache.video_feature, 1.0);
    for (g, d) in grads.b_o.row_mut(0).iter_mut().zip(d_logits) {
        *g += d;
    }
    let d_video = params.w_o.matvec_t(d_logits);

    // Recipe attention: g = sum_a alpha_a F_a, alpha = softmax(F w_q).
    let alpha = &cache.attn_weights;
    let mut d_alpha = vec![0.0; a_len];
    let mut d_features = Matrix::zeros(a_len, h);
    for a in 0..a_len {
        let f_row = cache.action_features.row(a);
        d_alpha[a] = f_row.iter().zip(&d_video).map(|(x, d)| x * d).sum::<f64>();
        let d_row = d_features.row_mut(a);
        for i in 0..h {
            d_row[i] += alpha[a] * d_video[i];
        }
    }
    let d_attn_scores = softmax_vjp(alpha, &d_alpha);
    let wq = params.w_q.row(0).to_vec();
    for a in 0..a_len {
        let f_row = cache.action_features.row(a);
        let gq = grads.w_q.row_mut(0);
        for i in 0..h {
            gq[i] += d_attn_scores[a] * f_row[i];
        }
        let d_row = d_features.row_mut(a);
        for i in 0..h {
            d_row[i] += d_attn_scores[a] * wq[i];
        }
    }

    // d loss / d E accumulates the max-pool presence route and the per-action
    // temporal softmax route; d loss / d P the pooling and diversity routes.
    let mut d_frame_scores = Matrix::zeros(t_len, a_len);
    for a in 0..a_len {
        let t_star = cache.presence_argmax[a];
        let v = d_frame_scores.get(t_star, a) + seeds.d_presence[a];
        d_frame_scores.set(t_star, a, v);
    }

    let mut d_attention = d_features.matmul_nt(&cache.gru.hs)?;
    if let Some(div) = seeds.d_attention_div {
        d_attention.add_scaled(&div, 1.0);
    }
    let mut d_hidden = cache.attention.matmul_tn(&d_features)?;

    for a in 0..a_len {
        let p_row = cache.attention.row(a);
        let d_row = d_attention.row(a);
        let d_col = softmax_vjp(p_row, d_row);
        for t in 0..t_len {
            let v = d_frame_scores.get(t, a) + d_col[t];
            d_frame_scores.set(t, a, v);
        }
    }

    // E_t = W_a h_t + b_a.
    for t in 0..t_len {
        let de = d_frame_scores.row(t).to_vec();
        grads.w_a.add_scaled_outer(&de, cache.gru.hs.row(t), 1.0);
        let ba = grads.b_a.row_mut(0);
        for a in 0..a_len {
            ba[a] += de[a];
        }
        let dh = params.w_a.matvec_t(&de);
        let row = d_hidden.row_mut(t);
        for i in 0..h {
            row[i] += dh[i];
        }
    }

    // Dropout sits on the output stream only; the recurrence saw clean
    // states. Backprop through time.
    let mut carry = vec![0.0; h];
    let zero_prev = vec![0.0; h];
    for t in (0..t_len).rev() {
        let mut dh: Vec<f64> = d_hidden.row(t).to_vec();
        if let Some(masks) = &cache.gru.masks {
            let mask = masks.row(t);
            for i in 0..h {
                dh[i] *= mask[i] * cache.gru.inv_keep;
            }
        }
        for i in 0..h {
            dh[i] += carry[i];
        }

        let z = cache.gru.z.row(t);
        let r = cache.gru.r.row(t);
        let c = cache.gru.hcand.row(t);
        let h_prev: &[f64] = if t == 0 { &zero_prev } else { cache.gru.hs_clean.row(t - 1) };
        let x = features.row(t);

        let mut d_prev = vec![0.0; h];
        let mut d_ah = vec![0.0; h];
        let mut d_az = vec![0.0; h];
        for i in 0..h {
            let dz = dh[i] * (c[i] - h_prev[i]);
            let dc = dh[i] * z[i];
            d_prev[i] = dh[i] * (1.0 - z[i]);
            d_ah[i] = dc * (1.0 - c[i] * c[i]);
            d_az[i] = dz * z[i] * (1.0 - z[i]);
        }

        grads.w_h.add_scaled_outer(&d_ah, x, 1.0);
        let rh: Vec<f64> = (0..h).map(|i| r[i] * h_prev[i]).collect();
        grads.u_h.add_scaled_outer(&d_ah, &rh, 1.0);
        for (g, d) in grads.b_h.row_mut(0).iter_mut().zip(&d_ah) {
            *g += d;
        }
        let d_rh = params.u_h.matvec_t(&d_ah);
        let mut d_ar = vec![0.0; h];
        for i in 0..h {
            let dr = d_rh[i] * h_prev[i];
            d_prev[i] += d_rh[i] * r[i];
            d_ar[i] = dr * r[i] * (1.0 - r[i]);
        }

        grads.w_z.add_scaled_outer(&d_az, x, 1.0);
        grads.u_z.add_scaled_outer(&d_az, h_prev, 1.0);
        for (g, d) in grads.b_z.row_mut(0).iter_mut().zip(&d_az) {
            *g += d;
        }
        let uz_back = params.u_z.matvec_t(&d_az);

        grads.w_r.add_scaled_outer(&d_ar, x, 1.0);
        grads.u_r.add_scaled_outer(&d_ar, h_prev, 1.0);
        for (g, d) in grads.b_r.row_mut(0).iter_mut().zip(&d_ar) {
            *g += d;
        }
        let ur_back = params.u_r.matvec_t(&d_ar);

        for i in 0..h {
            d_prev[i] += uz_back[i] + ur_back[i];
        }
        carry = d_prev;
    }

    if !grads.is_finite() {
        return Err(NetError::NonFinite { location: "gradients" });
    }
    Ok((breakdown, grads))
}

/// VJP of softmax: given output s and upstream ds, returns
/// s . (ds - <s, ds>).
fn softmax_vjp(s: &[f64], ds: &[f64]) -> Vec<f64> {
    let dot: f64 = s.iter().zip(ds).map(|(a, b)| a * b).sum();
    s.iter().zip(ds).map(|(a, b)| a * (b - dot)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use alloc::string::ToString;

    fn tiny_dims() -> ModelDims {
        ModelDims { feat_dim: 3, hidden: 5, num_actions: 3, num_recipes: 2 }
    }

    fn random_sample(dims: &ModelDims, t_len: usize, seed: u64) -> VideoSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> =
            (0..t_len * dims.feat_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let features = Matrix::from_vec(t_len, dims.feat_dim, data).unwrap();
        let recipe = rng.random_range(0..dims.num_recipes) as RecipeId;
        let mut action_set: Vec<ActionId> = (0..dims.num_actions as ActionId)
            .filter(|_| rng.random::<f64>() < 0.6)
            .collect();
        if action_set.is_empty() {
            action_set.push(0);
        }
        let frame_labels = vec![action_set[0]; t_len];
        VideoSample {
            id: "test".to_string(),
            features,
            recipe,
            action_set: action_set.clone(),
            transcript: vec![action_set[0]],
            frame_labels,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let dims = tiny_dims();
        let a = init_params(dims, 1);
        let b = init_params(dims, 1);
        assert_eq!(a, b);
        let c = init_params(dims, 2);
        assert_ne!(a, c);
    }

    #[test]
    fn init_biases_zero_and_weights_bounded() {
        let dims = tiny_dims();
        let p = init_params(dims, 3);
        for (name, tensor) in p.named_tensors() {
            if name.starts_with('b') {
                assert!(tensor.as_slice().iter().all(|&v| v == 0.0), "{name} not zero");
            } else {
                let s = libm::sqrt(1.0 / tensor.cols() as f64);
                assert!(
                    tensor.as_slice().iter().all(|&v| v >= -s && v <= s),
                    "{name} outside [-s, s]"
                );
                assert!(tensor.as_slice().iter().any(|&v| v != 0.0), "{name} all zero");
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let dims = tiny_dims();
        let p = init_params(dims, 9);
        let flat = p.to_flat();
        assert_eq!(flat.len(), ModelParams::param_count(&dims));
        let q = ModelParams::from_flat(dims, &flat).unwrap();
        assert_eq!(p, q);
        assert!(matches!(
            ModelParams::from_flat(dims, &flat[1..]),
            Err(NetError::FlatLength { .. })
        ));
    }

    #[test]
    fn gru_zero_params_zero_states() {
        let dims = tiny_dims();
        let params = ModelParams::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f64> = (0..4 * dims.feat_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Matrix::from_vec(4, dims.feat_dim, data).unwrap();
        let hs = gru_forward(&x, &params, Mode::Eval).unwrap();
        assert!(hs.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_zero_params_decays_initial_state() {
        // With all parameters zero, z = 0.5 and the candidate is 0, so each
        // step halves the hidden state: h_t = 0.5^t * v.
        let dims = tiny_dims();
        let params = ModelParams::zeros(dims);
        let x = Matrix::zeros(3, dims.feat_dim);
        let v: Vec<f64> = (0..dims.hidden).map(|i| (i + 1) as f64).collect();
        let hs = gru_forward_from(&x, &params, Mode::Eval, &v).unwrap();
        for t in 0..3 {
            let scale = libm::pow(0.5, (t + 1) as f64);
            for i in 0..dims.hidden {
                assert!((hs.get(t, i) - scale * v[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gru_matches_straight_line_recurrence() {
        // Independent re-implementation of the three recurrence equations
        // with plain index loops.
        let dims = tiny_dims();
        let params = init_params(dims, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let data: Vec<f64> = (0..3 * dims.feat_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Matrix::from_vec(3, dims.feat_dim, data).unwrap();
        let hs = gru_forward(&x, &params, Mode::Eval).unwrap();

        let h = dims.hidden;
        let d = dims.feat_dim;
        let mut h_prev = vec![0.0; h];
        for t in 0..3 {
            // Gates for the whole layer first, then the candidate.
            let mut z = vec![0.0; h];
            let mut r = vec![0.0; h];
            for i in 0..h {
                let mut az = 0.0;
                let mut ar = 0.0;
                for k in 0..d {
                    az += params.w_z.get(i, k) * x.get(t, k);
                    ar += params.w_r.get(i, k) * x.get(t, k);
                }
                for k in 0..h {
                    az += params.u_z.get(i, k) * h_prev[k];
                    ar += params.u_r.get(i, k) * h_prev[k];
                }
                az += params.b_z.get(0, i);
                ar += params.b_r.get(0, i);
                z[i] = 1.0 / (1.0 + libm::exp(-az));
                r[i] = 1.0 / (1.0 + libm::exp(-ar));
            }
            let mut h_t = vec![0.0; h];
            for i in 0..h {
                let mut ah = 0.0;
                for k in 0..d {
                    ah += params.w_h.get(i, k) * x.get(t, k);
                }
                for k in 0..h {
                    ah += params.u_h.get(i, k) * (r[k] * h_prev[k]);
                }
                ah += params.b_h.get(0, i);
                let c = libm::tanh(ah);
                h_t[i] = (1.0 - z[i]) * h_prev[i] + z[i] * c;
            }
            for i in 0..h {
                assert!(
                    (hs.get(t, i) - h_t[i]).abs() < 1e-12,
                    "t={t} i={i}: {} vs {}",
                    hs.get(t, i),
                    h_t[i]
                );
            }
            h_prev = h_t;
        }
    }

    #[test]
    fn gru_rejects_feature_dim_mismatch() {
        let dims = tiny_dims();
        let params = ModelParams::zeros(dims);
        let x = Matrix::zeros(2, dims.feat_dim + 1);
        assert!(matches!(
            gru_forward(&x, &params, Mode::Eval),
            Err(NetError::Shape { op: "gru_forward", .. })
        ));
    }

    #[test]
    fn gru_rejects_bad_dropout() {
        let dims = tiny_dims();
        let params = ModelParams::zeros(dims);
        let x = Matrix::zeros(2, dims.feat_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            gru_forward(&x, &params, Mode::Train { dropout_p: 1.0, rng: &mut rng }),
            Err(NetError::BadDropout { .. })
        ));
    }

    #[test]
    fn attention_single_frame_rows_are_one() {
        let dims = tiny_dims();
        let params = init_params(dims, 4);
        let hs = Matrix::from_vec(1, dims.hidden, vec![0.3; dims.hidden]).unwrap();
        let (_, attention) = action_attention(&hs, &params).unwrap();
        assert_eq!(attention.shape(), (dims.num_actions, 1));
        for a in 0..dims.num_actions {
            assert_eq!(attention.get(a, 0), 1.0);
        }
    }

    #[test]
    fn attention_uniform_for_zero_weights() {
        let dims = tiny_dims();
        let mut params = init_params(dims, 4);
        params.w_a = Matrix::zeros(dims.num_actions, dims.hidden);
        params.b_a = Matrix::zeros(1, dims.num_actions);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..5 * dims.hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hs = Matrix::from_vec(5, dims.hidden, data).unwrap();
        let (_, attention) = action_attention(&hs, &params).unwrap();
        for a in 0..dims.num_actions {
            for t in 0..5 {
                assert!((attention.get(a, t) - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_column_shift_invariance() {
        let dims = tiny_dims();
        let params = init_params(dims, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..4 * dims.hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hs = Matrix::from_vec(4, dims.hidden, data).unwrap();
        let (scores, attention) = action_attention(&hs, &params).unwrap();
        // Shift one score column by a constant and re-softmax.
        let mut shifted = scores.clone();
        for t in 0..4 {
            shifted.set(t, 1, shifted.get(t, 1) + 37.5);
        }
        let again = attention_from_scores(&shifted);
        for t in 0..4 {
            assert!((again.get(1, t) - attention.get(1, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_one_hot_attention_selects_frames() {
        let dims = tiny_dims();
        let params = init_params(dims, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let data: Vec<f64> = (0..4 * dims.hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hs = Matrix::from_vec(4, dims.hidden, data).unwrap();
        let t_star = 2;
        let mut attention = Matrix::zeros(dims.num_actions, 4);
        for a in 0..dims.num_actions {
            attention.set(a, t_star, 1.0);
        }
        let pool = pool_and_recipe(&attention, &hs, &params).unwrap();
        for a in 0..dims.num_actions {
            assert_eq!(pool.action_features.row(a), hs.row(t_star));
        }
    }

    #[test]
    fn pool_matches_straight_line_oracle() {
        // Independent recomputation of F, presence, alpha, g and the logits.
        let dims = ModelDims { feat_dim: 3, hidden: 5, num_actions: 3, num_recipes: 2 };
        let params = init_params(dims, 30);
        let sample = random_sample(&dims, 4, 31);
        let hs = gru_forward(&sample.features, &params, Mode::Eval).unwrap();
        let (scores, attention) = action_attention(&hs, &params).unwrap();
        let pool = pool_and_recipe(&attention, &hs, &params).unwrap();

        let (h, a_len, t_len) = (dims.hidden, dims.num_actions, 4);
        for a in 0..a_len {
            for i in 0..h {
                let mut f = 0.0;
                for t in 0..t_len {
                    f += attention.get(a, t) * hs.get(t, i);
                }
                assert!((pool.action_features.get(a, i) - f).abs() < 1e-12);
            }
            let mut best = f64::NEG_INFINITY;
            for t in 0..t_len {
                best = f64::max(best, scores.get(t, a));
            }
            assert_eq!(pool.presence_logits[a], best);
        }
        let mut s = vec![0.0; a_len];
        for a in 0..a_len {
            for i in 0..h {
                s[a] += pool.action_features.get(a, i) * params.w_q.get(0, i);
            }
        }
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = s.iter().map(|v| libm::exp(v - max)).collect();
        let norm: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.iter().map(|e| e / norm).collect();
        let mut g = vec![0.0; h];
        for a in 0..a_len {
            for i in 0..h {
                g[i] += alpha[a] * pool.action_features.get(a, i);
            }
        }
        for rcp in 0..dims.num_recipes {
            let mut logit = params.b_o.get(0, rcp);
            for i in 0..h {
                logit += params.w_o.get(rcp, i) * g[i];
            }
            assert!((pool.recipe_logits[rcp] - logit).abs() < 1e-12);
        }
        let sum: f64 = pool.recipe_probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_equals_composition_of_public_ops() {
        let dims = tiny_dims();
        let params = init_params(dims, 40);
        let sample = random_sample(&dims, 6, 41);
        let out = forward(&sample, &params, Mode::Eval).unwrap();
        let hs = gru_forward(&sample.features, &params, Mode::Eval).unwrap();
        let (scores, attention) = action_attention(&hs, &params).unwrap();
        let pool = pool_and_recipe(&attention, &hs, &params).unwrap();
        assert_eq!(out.hidden_states, hs);
        assert_eq!(out.frame_scores, scores);
        assert_eq!(out.attention, attention);
        assert_eq!(out.action_features, pool.action_features);
        assert_eq!(out.presence_logits, pool.presence_logits);
        assert_eq!(out.recipe_logits, pool.recipe_logits);
        assert_eq!(out.recipe_probs, pool.recipe_probs);
    }

    #[test]
    fn forward_eval_is_bit_deterministic() {
        let dims = tiny_dims();
        let params = init_params(dims, 50);
        let sample = random_sample(&dims, 5, 51);
        let a = forward(&sample, &params, Mode::Eval).unwrap();
        let b = forward(&sample, &params, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_train_p0_equals_eval() {
        let dims = tiny_dims();
        let params = init_params(dims, 52);
        let sample = random_sample(&dims, 5, 53);
        let eval = forward(&sample, &params, Mode::Eval).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let train =
            forward(&sample, &params, Mode::Train { dropout_p: 0.0, rng: &mut rng }).unwrap();
        assert_eq!(eval, train);
    }

    #[test]
    fn forward_train_dropout_scales_survivors() {
        let dims = tiny_dims();
        let params = init_params(dims, 54);
        let sample = random_sample(&dims, 5, 55);
        let eval = forward(&sample, &params, Mode::Eval).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let train =
            forward(&sample, &params, Mode::Train { dropout_p: 0.5, rng: &mut rng }).unwrap();
        assert_ne!(eval.hidden_states, train.hidden_states);
        // Surviving units are scaled by 1/(1-p); dropped ones are exactly 0.
        let mut zeros = 0;
        for t in 0..5 {
            for i in 0..dims.hidden {
                let v = train.hidden_states.get(t, i);
                if v == 0.0 {
                    zeros += 1;
                } else {
                    assert!((v - 2.0 * eval.hidden_states.get(t, i)).abs() < 1e-12);
                }
            }
        }
        assert!(zeros > 0);
    }

    #[test]
    fn forward_normalization_invariants() {
        let dims = tiny_dims();
        for seed in 0..20u64 {
            let params = init_params(dims, seed);
            let sample = random_sample(&dims, 7, seed + 1000);
            let out = forward(&sample, &params, Mode::Eval).unwrap();
            for a in 0..dims.num_actions {
                let sum: f64 = out.attention.row(a).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9);
            }
            let sum: f64 = out.recipe_probs.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn scaling_action_weights_preserves_attention_argmax() {
        let dims = tiny_dims();
        let params = init_params(dims, 60);
        let sample = random_sample(&dims, 8, 61);
        let out = forward(&sample, &params, Mode::Eval).unwrap();
        let mut scaled = params.clone();
        scaled.w_a.scale(3.0);
        let out2 = forward(&sample, &scaled, Mode::Eval).unwrap();
        let argmax = |row: &[f64]| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        };
        for a in 0..dims.num_actions {
            assert_eq!(argmax(out.attention.row(a)), argmax(out2.attention.row(a)));
        }
    }

    fn perfect_prediction_setup() -> (ModelDims, ModelParams, VideoSample) {
        // Saturated logits make every loss term exactly zero: b_o picks the
        // true recipe with margin 2000, b_a matches the action set.
        let dims = tiny_dims();
        let mut params = ModelParams::zeros(dims);
        let sample = random_sample(&dims, 4, 70);
        for rcp in 0..dims.num_recipes {
            let v = if rcp == sample.recipe as usize { 1000.0 } else { -1000.0 };
            params.b_o.set(0, rcp, v);
        }
        for a in 0..dims.num_actions {
            let inside = sample.action_set.binary_search(&(a as ActionId)).is_ok();
            params.b_a.set(0, a, if inside { 1000.0 } else { -1000.0 });
        }
        (dims, params, sample)
    }

    #[test]
    fn loss_zero_at_perfect_prediction() {
        let (_, params, sample) = perfect_prediction_setup();
        let labels = VideoLabels::of(&sample);
        let out = forward(&sample, &params, Mode::Eval).unwrap();
        assert_eq!(out.recipe_probs[sample.recipe as usize], 1.0);
        let loss = compute_loss(&out, &labels, 1.0, 0.0).unwrap();
        assert_eq!(loss.total, 0.0);
        assert_eq!(loss.recipe_ce, 0.0);
        assert_eq!(loss.action_bce, 0.0);
    }

    #[test]
    fn gradients_zero_at_perfect_prediction() {
        let (_, params, sample) = perfect_prediction_setup();
        let labels = VideoLabels::of(&sample);
        let (loss, grads) = backward(&sample, &params, &labels, 1.0, 0.0, Mode::Eval).unwrap();
        assert_eq!(loss.total, 0.0);
        for (name, tensor) in grads.named_tensors() {
            assert!(tensor.as_slice().iter().all(|&v| v == 0.0), "{name} gradient not zero");
        }
    }

    #[test]
    fn loss_uniform_recipe_probs_is_ln_r() {
        let dims = tiny_dims();
        let params = ModelParams::zeros(dims);
        let sample = random_sample(&dims, 4, 71);
        let labels = VideoLabels::of(&sample);
        // Zero parameters give identical recipe logits, hence uniform probs.
        let out = forward(&sample, &params, Mode::Eval).unwrap();
        for p in &out.recipe_probs {
            assert!((p - 1.0 / dims.num_recipes as f64).abs() < 1e-12);
        }
        let loss = compute_loss(&out, &labels, 0.0, 0.0).unwrap();
        assert!((loss.recipe_ce - libm::log(dims.num_recipes as f64)).abs() < 1e-12);
        assert_eq!(loss.total, loss.recipe_ce);
    }

    #[test]
    fn diversity_arithmetic_cases() {
        let labels = VideoLabels { recipe: 0, action_set: &[0] };
        let mut out = ModelOutput {
            hidden_states: Matrix::zeros(2, 2),
            frame_scores: Matrix::zeros(2, 2),
            attention: Matrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
            action_features: Matrix::zeros(2, 2),
            presence_logits: vec![0.0, 0.0],
            recipe_logits: vec![0.0, 0.0],
            recipe_probs: vec![0.5, 0.5],
        };
        // Both rows focused on the same frame: P P^T - I = [[0,1],[1,0]].
        let loss = compute_loss(&out, &labels, 0.0, 1.0).unwrap();
        assert_eq!(loss.diversity, 2.0);
        // Orthogonal one-hot rows: penalty vanishes.
        out.attention = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = compute_loss(&out, &labels, 0.0, 1.0).unwrap();
        assert_eq!(loss.diversity, 0.0);
    }

    #[test]
    fn loss_breakdown_total_formula_exact() {
        let dims = tiny_dims();
        let params = init_params(dims, 80);
        let sample = random_sample(&dims, 5, 81);
        let labels = VideoLabels::of(&sample);
        let out = forward(&sample, &params, Mode::Eval).unwrap();
        let loss = compute_loss(&out, &labels, 0.7, 0.3).unwrap();
        assert_eq!(
            loss.total,
            loss.recipe_ce + loss.lambda_act * loss.action_bce + loss.lambda_div * loss.diversity
        );
        assert!(loss.recipe_ce >= 0.0 && loss.action_bce >= 0.0 && loss.diversity >= 0.0);
    }

    #[test]
    fn loss_rejects_out_of_range_labels() {
        let dims = tiny_dims();
        let params = init_params(dims, 82);
        let sample = random_sample(&dims, 3, 83);
        let out = forward(&sample, &params, Mode::Eval).unwrap();
        let bad_recipe = VideoLabels { recipe: 7, action_set: &[0] };
        assert!(matches!(
            compute_loss(&out, &bad_recipe, 1.0, 0.0),
            Err(NetError::RecipeOutOfRange { recipe: 7, .. })
        ));
        let bad_action = VideoLabels { recipe: 0, action_set: &[9] };
        assert!(matches!(
            compute_loss(&out, &bad_action, 1.0, 0.0),
            Err(NetError::ActionOutOfRange { action: 9, .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        // T=4, D=3, H=5, A=3, R=2 instance with every loss term active.
        let dims = ModelDims { feat_dim: 3, hidden: 5, num_actions: 3, num_recipes: 2 };
        let params = random_params(dims, 90, 1.0);
        let sample = random_sample(&dims, 4, 91);
        let (lambda_act, lambda_div) = (1.0, 0.5);

        let loss_fn = |flat: &[f64]| {
            let p = ModelParams::from_flat(dims, flat).unwrap();
            let out = forward(&sample, &p, Mode::Eval).unwrap();
            compute_loss(&out, &VideoLabels::of(&sample), lambda_act, lambda_div).unwrap().total
        };
        let grad_fn = |flat: &[f64]| {
            let p = ModelParams::from_flat(dims, flat).unwrap();
            backward(&sample, &p, &VideoLabels::of(&sample), lambda_act, lambda_div, Mode::Eval)
                .unwrap()
                .1
                .to_flat()
        };
        let report = grad_check(loss_fn, grad_fn, &params.to_flat(), 1e-5, 1e-4);
        assert!(
            report.passed,
            "max rel err {} at flat index {}",
            report.max_relative_error, report.worst_parameter_index
        );
    }

    #[test]
    fn backward_gradcheck_across_seeds() {
        for seed in 0..5u64 {
            let dims = ModelDims { feat_dim: 2, hidden: 4, num_actions: 3, num_recipes: 2 };
            let params = random_params(dims, seed, 1.0);
            let sample = random_sample(&dims, 5, seed + 500);
            let loss_fn = |flat: &[f64]| {
                let p = ModelParams::from_flat(dims, flat).unwrap();
                let out = forward(&sample, &p, Mode::Eval).unwrap();
                compute_loss(&out, &VideoLabels::of(&sample), 0.8, 0.2).unwrap().total
            };
            let grad_fn = |flat: &[f64]| {
                let p = ModelParams::from_flat(dims, flat).unwrap();
                backward(&sample, &p, &VideoLabels::of(&sample), 0.8, 0.2, Mode::Eval)
                    .unwrap()
                    .1
                    .to_flat()
            };
            let report = grad_check(loss_fn, grad_fn, &params.to_flat(), 1e-5, 1e-4);
            assert!(report.passed, "seed {seed}: max rel err {}", report.max_relative_error);
        }
    }

    #[test]
    fn backward_dead_path_gradient_is_zero() {
        // Recipe `dead` has its logit pushed to -2000 by the bias, so its
        // softmax probability underflows to exactly zero and the W_o row of
        // that recipe sits on a dead path.
        let dims = tiny_dims();
        let mut params = init_params(dims, 95);
        let sample = random_sample(&dims, 4, 96);
        let dead = usize::from(sample.recipe == 0);
        params.b_o.set(0, dead, -2000.0);
        let labels = VideoLabels::of(&sample);
        let (_, grads) = backward(&sample, &params, &labels, 0.0, 0.0, Mode::Eval).unwrap();
        assert!(grads.w_o.row(dead).iter().all(|&v| v == 0.0));
        assert_eq!(grads.b_o.get(0, dead), 0.0);
    }

    #[test]
    fn backward_loss_matches_forward_loss_bitwise() {
        let dims = tiny_dims();
        let params = init_params(dims, 97);
        let sample = random_sample(&dims, 6, 98);
        let labels = VideoLabels::of(&sample);
        let out = forward(&sample, &params, Mode::Eval).unwrap();
        let direct = compute_loss(&out, &labels, 1.0, 0.25).unwrap();
        let (via_backward, _) = backward(&sample, &params, &labels, 1.0, 0.25, Mode::Eval).unwrap();
        assert_eq!(direct, via_backward);
    }

    #[test]
    fn backward_with_dropout_is_seed_deterministic() {
        let dims = tiny_dims();
        let params = init_params(dims, 99);
        let sample = random_sample(&dims, 5, 100);
        let labels = VideoLabels::of(&sample);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            backward(
                &sample,
                &params,
                &labels,
                1.0,
                0.0,
                Mode::Train { dropout_p: 0.4, rng: &mut rng },
            )
            .unwrap()
        };
        let (l1, g1) = run(3);
        let (l2, g2) = run(3);
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        let (_, g_eval) = backward(&sample, &params, &labels, 1.0, 0.0, Mode::Eval).unwrap();
        assert_ne!(g1, g_eval);
    }
}


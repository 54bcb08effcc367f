//! Incident-context spatial fusion: masked cross-attention between the
//! last-step sensor hidden states and the encoded incidents, plus the two
//! simpler fusion baselines (`mlp` pooling and `imp` message passing).
//!
//! The attention weight matrix `alpha` is `[M × N]` — one column per sensor,
//! normalized over the incident axis. Connectivity is a hard constraint:
//! disconnected pairs carry exactly zero weight after *both* softmaxes, and a
//! sensor with no connected incident receives an exactly-zero context row.

use rand::Rng;

use crate::config::ModelSection;
use crate::data::RelationTensor;
use crate::error::{CoreError, Result};
use crate::params::{xavier_uniform, Bound, ParamStore};
use crate::tape::{Tape, Val};
use crate::tensor::{Tensor, NEG_INF};

/// LayerNorm stabilizer shared by every fusion head.
pub const LN_EPS: f64 = 1e-5;

/// Hidden width of the per-pair scoring perceptron.
pub const PAIR_MLP_HIDDEN: usize = 32;

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

pub fn register_fusion_params(ps: &mut ParamStore, rng: &mut impl Rng, m: &ModelSection) {
    ps.insert("icsf.w_q", xavier_uniform(rng, m.d_h, m.d_k));
    ps.insert("icsf.w_k", xavier_uniform(rng, m.d_e, m.d_k));
    ps.insert("icsf.w_v", xavier_uniform(rng, m.d_e, m.d_v));
    let pair_in = 1 + m.d_s + 3;
    ps.insert("icsf.alpha.w1", xavier_uniform(rng, pair_in, PAIR_MLP_HIDDEN));
    ps.insert("icsf.alpha.b1", Tensor::zeros(vec![PAIR_MLP_HIDDEN]));
    ps.insert("icsf.alpha.w2", xavier_uniform(rng, PAIR_MLP_HIDDEN, 1));
    ps.insert("icsf.alpha.b2", Tensor::zeros(vec![1]));
    if m.d_v != m.d_h {
        ps.insert("icsf.proj.w", xavier_uniform(rng, m.d_v, m.d_h));
    }
    ps.insert("icsf.ln.gain", Tensor::full(vec![m.d_h], 1.0));
    ps.insert("icsf.ln.bias", Tensor::zeros(vec![m.d_h]));
}

pub fn register_fuse_mlp_params(ps: &mut ParamStore, rng: &mut impl Rng, m: &ModelSection) {
    let in_w = m.d_h + m.d_s + m.d_e;
    ps.insert("fusemlp.w1", xavier_uniform(rng, in_w, m.d_h));
    ps.insert("fusemlp.b1", Tensor::zeros(vec![m.d_h]));
    ps.insert("fusemlp.w2", xavier_uniform(rng, m.d_h, m.d_h));
    ps.insert("fusemlp.b2", Tensor::zeros(vec![m.d_h]));
    ps.insert("fusemlp.ln.gain", Tensor::full(vec![m.d_h], 1.0));
    ps.insert("fusemlp.ln.bias", Tensor::zeros(vec![m.d_h]));
}

pub fn register_fuse_imp_params(ps: &mut ParamStore, rng: &mut impl Rng, m: &ModelSection) {
    ps.insert("imp.init.w", xavier_uniform(rng, m.d_e, m.d_h));
    ps.insert("imp.init.b", Tensor::zeros(vec![m.d_h]));
    ps.insert("imp.inc.w", xavier_uniform(rng, 2 * m.d_h, m.d_h));
    ps.insert("imp.inc.b", Tensor::zeros(vec![m.d_h]));
    ps.insert("imp.sen.w", xavier_uniform(rng, 2 * m.d_h, m.d_h));
    ps.insert("imp.sen.b", Tensor::zeros(vec![m.d_h]));
    ps.insert("imp.ln.gain", Tensor::full(vec![m.d_h], 1.0));
    ps.insert("imp.ln.bias", Tensor::zeros(vec![m.d_h]));
}

// ---------------------------------------------------------------------------
// attention pipeline
// ---------------------------------------------------------------------------

/// Q = H_t·W_Q, K = I·W_K, V = I·W_V.
pub fn project_qkv(tape: &mut Tape, p: &Bound, h_t: Val, i_enc: Val) -> Result<(Val, Val, Val)> {
    let q = tape.matmul(h_t, p.val("icsf.w_q"))?;
    let k = tape.matmul(i_enc, p.val("icsf.w_k"))?;
    let v = tape.matmul(i_enc, p.val("icsf.w_v"))?;
    Ok((q, k, v))
}

/// Scaled affinity scores `K·Qᵀ/√d_k`, one row per incident.
pub fn semantic_scores(tape: &mut Tape, q: Val, k: Val) -> Result<Val> {
    let d_k = tape.shape_of(q)[1];
    if d_k == 0 {
        return Err(CoreError::shape("semantic_scores", "d_k is zero".to_string()));
    }
    let qt = tape.transpose(q)?;
    let kq = tape.matmul(k, qt)?;
    Ok(tape.scale(kq, 1.0 / (d_k as f64).sqrt()))
}

/// Replaces disconnected entries with the −∞ sentinel. `connected` is flat
/// over `[M × N]`, incident-major.
pub fn apply_mask(tape: &mut Tape, scores: Val, connected: &[bool]) -> Result<Val> {
    tape.mask_fill(scores, connected.to_vec(), NEG_INF)
}

/// Softmax over the incident axis; fully-masked sensor columns come out as
/// exact zeros.
pub fn preliminary_weights(tape: &mut Tape, masked_scores: Val) -> Result<Val> {
    tape.softmax_axis(masked_scores, 0)
}

/// Builds the `[M·N × (1 + d_s + 3)]` per-pair feature block consumed by the
/// scoring perceptrons: preliminary weight, sensor encoding, relation row.
/// Ablations replace the sensor or relation block with zeros.
fn pair_feature_block(
    tape: &mut Tape,
    prelim: Val,
    s_enc: Val,
    d_slice: &RelationTensor,
    use_s: bool,
    use_d: bool,
) -> Result<Val> {
    let m = tape.shape_of(prelim)[0];
    let n = tape.shape_of(prelim)[1];
    let d_s = tape.shape_of(s_enc)[1];
    let col = tape.reshape(prelim, vec![m * n, 1])?;
    let s_block = if use_s {
        tape.tile_rows(s_enc, m)?
    } else {
        tape.constant(Tensor::zeros(vec![m * n, d_s]))
    };
    let d_block = if use_d {
        tape.constant(d_slice.pair_features())
    } else {
        tape.constant(Tensor::zeros(vec![m * n, 3]))
    };
    tape.concat_cols(&[col, s_block, d_block])
}

/// Context-aware re-weighting: per-pair perceptron logits, re-masked, then a
/// second softmax over incidents.
#[allow(clippy::too_many_arguments)]
pub fn fuse_context_weights(
    tape: &mut Tape,
    p: &Bound,
    prelim: Val,
    s_enc: Val,
    d_slice: &RelationTensor,
    connected: &[bool],
    use_s: bool,
    use_d: bool,
) -> Result<Val> {
    let m = tape.shape_of(prelim)[0];
    let n = tape.shape_of(prelim)[1];
    let x = pair_feature_block(tape, prelim, s_enc, d_slice, use_s, use_d)?;
    let h = tape.linear(x, p.val("icsf.alpha.w1"), p.val("icsf.alpha.b1"))?;
    let h = tape.relu(h);
    let logits = tape.linear(h, p.val("icsf.alpha.w2"), p.val("icsf.alpha.b2"))?;
    let logits = tape.reshape(logits, vec![m, n])?;
    let masked = tape.mask_fill(logits, connected.to_vec(), NEG_INF)?;
    tape.softmax_axis(masked, 0)
}

/// C = alphaᵀ·V.
pub fn aggregate_context(tape: &mut Tape, alpha: Val, v: Val) -> Result<Val> {
    let at = tape.transpose(alpha)?;
    tape.matmul(at, v)
}

/// H′_t = LayerNorm(H_t + C), with C linearly projected first when d_v ≠ d_h.
pub fn residual_fuse(tape: &mut Tape, p: &Bound, h_t: Val, c: Val) -> Result<Val> {
    let d_h = tape.shape_of(h_t)[1];
    let c = if tape.shape_of(c)[1] != d_h {
        tape.matmul(c, p.val("icsf.proj.w"))?
    } else {
        c
    };
    let sum = tape.add(h_t, c)?;
    tape.layer_norm(sum, p.val("icsf.ln.gain"), p.val("icsf.ln.bias"), LN_EPS)
}

/// Runs the full attention pipeline on the last-step hidden state.
#[allow(clippy::too_many_arguments)]
pub fn icsf_fuse_step(
    tape: &mut Tape,
    p: &Bound,
    h_t: Val,
    i_enc: Val,
    s_enc: Val,
    d_slice: &RelationTensor,
    connected: &[bool],
    use_s: bool,
    use_d: bool,
) -> Result<Val> {
    let (q, k, v) = project_qkv(tape, p, h_t, i_enc)?;
    let scores = semantic_scores(tape, q, k)?;
    let masked = apply_mask(tape, scores, connected)?;
    let prelim = preliminary_weights(tape, masked)?;
    let alpha = fuse_context_weights(tape, p, prelim, s_enc, d_slice, connected, use_s, use_d)?;
    let c = aggregate_context(tape, alpha, v)?;
    residual_fuse(tape, p, h_t, c)
}

/// Replaces only the final step of the hidden series by its fused version.
/// With zero incidents the series is returned untouched (identity bypass).
#[allow(clippy::too_many_arguments)]
pub fn icsf_forward(
    tape: &mut Tape,
    p: &Bound,
    h_series: &[Val],
    i_enc: Val,
    s_enc: Val,
    d_slice: &RelationTensor,
    connected: &[bool],
    use_s: bool,
    use_d: bool,
) -> Result<Vec<Val>> {
    let m = tape.shape_of(i_enc)[0];
    let mut out = h_series.to_vec();
    if m == 0 || out.is_empty() {
        return Ok(out);
    }
    let last = *out.last().unwrap();
    let fused = icsf_fuse_step(tape, p, last, i_enc, s_enc, d_slice, connected, use_s, use_d)?;
    *out.last_mut().unwrap() = fused;
    Ok(out)
}

// ---------------------------------------------------------------------------
// baselines
// ---------------------------------------------------------------------------

/// Mean-pool matrix `[N × M]`: row j averages the incidents connected to
/// sensor j; rows without neighbors stay zero.
fn mean_pool_matrix(connected: &[bool], m: usize, n: usize) -> Tensor {
    let mut w = vec![0.0; n * m];
    for j in 0..n {
        let count = (0..m).filter(|&k| connected[k * n + j]).count();
        if count == 0 {
            continue;
        }
        for k in 0..m {
            if connected[k * n + j] {
                w[j * m + k] = 1.0 / count as f64;
            }
        }
    }
    Tensor::new(vec![n, m], w).expect("pool matrix shape")
}

/// Pooled-concat baseline: mean of connected incident encodings, concatenated
/// with the hidden and sensor rows, through a two-layer perceptron, fused
/// residually. M = 0 bypasses.
pub fn fuse_mlp(
    tape: &mut Tape,
    p: &Bound,
    h_t: Val,
    i_enc: Val,
    s_enc: Val,
    connected: &[bool],
) -> Result<Val> {
    let m = tape.shape_of(i_enc)[0];
    if m == 0 {
        return Ok(h_t);
    }
    let n = tape.shape_of(h_t)[0];
    let pool = tape.constant(mean_pool_matrix(connected, m, n));
    let pooled = tape.matmul(pool, i_enc)?;
    let x = tape.concat_cols(&[h_t, s_enc, pooled])?;
    let h = tape.linear(x, p.val("fusemlp.w1"), p.val("fusemlp.b1"))?;
    let h = tape.relu(h);
    let c = tape.linear(h, p.val("fusemlp.w2"), p.val("fusemlp.b2"))?;
    let sum = tape.add(h_t, c)?;
    tape.layer_norm(sum, p.val("fusemlp.ln.gain"), p.val("fusemlp.ln.bias"), LN_EPS)
}

/// Road-score message weights `[M × N]`, zero on disconnected pairs.
fn message_weights(d_slice: &RelationTensor, connected: &[bool]) -> Tensor {
    let m = d_slice.incident_count();
    let n = d_slice.sensor_count();
    let mut w = vec![0.0; m * n];
    for k in 0..m {
        for j in 0..n {
            if connected[k * n + j] {
                w[k * n + j] = d_slice.get(k, j, crate::data::CH_ROAD);
            }
        }
    }
    Tensor::new(vec![m, n], w).expect("message weight shape")
}

/// 0/1 row gate broadcast to `[rows × d]`.
fn row_gate(active: &[bool], d: usize) -> Tensor {
    let mut w = vec![0.0; active.len() * d];
    for (i, &a) in active.iter().enumerate() {
        if a {
            w[i * d..(i + 1) * d].fill(1.0);
        }
    }
    Tensor::new(vec![active.len(), d], w).expect("gate shape")
}

/// Bipartite message-passing baseline. Each round updates incident states
/// from road-score-weighted sensor messages, then sensor states from incident
/// messages; nodes without connected neighbors are gated out so they pass
/// through unchanged (pre-norm). The accumulated sensor delta is fused as a
/// residual. M = 0 bypasses.
#[allow(clippy::too_many_arguments)]
pub fn fuse_imp(
    tape: &mut Tape,
    p: &Bound,
    h_t: Val,
    i_enc: Val,
    d_slice: &RelationTensor,
    connected: &[bool],
    rounds: usize,
) -> Result<Val> {
    let m = tape.shape_of(i_enc)[0];
    if m == 0 {
        return Ok(h_t);
    }
    let n = tape.shape_of(h_t)[0];
    let d_h = tape.shape_of(h_t)[1];

    let weights = tape.constant(message_weights(d_slice, connected));
    let weights_t = tape.transpose(weights)?;
    let inc_active: Vec<bool> = (0..m)
        .map(|k| (0..n).any(|j| connected[k * n + j]))
        .collect();
    let sen_active: Vec<bool> = (0..n)
        .map(|j| (0..m).any(|k| connected[k * n + j]))
        .collect();
    let inc_gate = tape.constant(row_gate(&inc_active, d_h));
    let sen_gate = tape.constant(row_gate(&sen_active, d_h));

    let e0 = tape.linear(i_enc, p.val("imp.init.w"), p.val("imp.init.b"))?;
    let mut e = tape.relu(e0);
    let mut s = h_t;
    for _ in 0..rounds.max(1) {
        let msg_to_inc = tape.matmul(weights, s)?;
        let inc_in = tape.concat_cols(&[e, msg_to_inc])?;
        let inc_up = tape.linear(inc_in, p.val("imp.inc.w"), p.val("imp.inc.b"))?;
        let inc_up = tape.relu(inc_up);
        let inc_up = tape.mul_elem(inc_up, inc_gate)?;
        e = tape.add(e, inc_up)?;

        let msg_to_sen = tape.matmul(weights_t, e)?;
        let sen_in = tape.concat_cols(&[s, msg_to_sen])?;
        let sen_up = tape.linear(sen_in, p.val("imp.sen.w"), p.val("imp.sen.b"))?;
        let sen_up = tape.relu(sen_up);
        let sen_up = tape.mul_elem(sen_up, sen_gate)?;
        s = tape.add(s, sen_up)?;
    }
    // s already carries h_t plus the accumulated updates
    tape.layer_norm(s, p.val("imp.ln.gain"), p.val("imp.ln.bias"), LN_EPS)
}

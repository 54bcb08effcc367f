//! Temporal incident impact decay: a per-node initial incident context,
//! modulated by a Gaussian profile over the forecast horizon, added to the
//! backbone forecast before the prediction head.
//!
//! The decay indexes the horizon from τ = 1 (first forecast step); incident
//! effects at the anchor step itself are the fusion module's job.

use rand::Rng;

use crate::config::ModelSection;
use crate::data::RelationTensor;
use crate::error::{CoreError, Result};
use crate::params::{xavier_uniform, Bound, ParamStore};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

/// Hidden width of the pair-context perceptron.
pub const CTX_MLP_HIDDEN: usize = 32;

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

pub fn register_tiid_params(ps: &mut ParamStore, rng: &mut impl Rng, m: &ModelSection) {
    let pair_in = m.d_k + m.d_s + 3;
    ps.insert("tiid.ctx.w1", xavier_uniform(rng, pair_in, CTX_MLP_HIDDEN));
    ps.insert("tiid.ctx.b1", Tensor::zeros(vec![CTX_MLP_HIDDEN]));
    ps.insert("tiid.ctx.w2", xavier_uniform(rng, CTX_MLP_HIDDEN, m.d_v));
    ps.insert("tiid.ctx.b2", Tensor::zeros(vec![m.d_v]));
    ps.insert("tiid.w_c", xavier_uniform(rng, m.d_v, m.d_out));
    ps.insert("tiid.out.w1", xavier_uniform(rng, m.d_out, m.d_out));
    ps.insert("tiid.out.b1", Tensor::zeros(vec![m.d_out]));
    ps.insert("tiid.out.w2", xavier_uniform(rng, m.d_out, 1));
    ps.insert("tiid.out.b2", Tensor::zeros(vec![1]));
}

// ---------------------------------------------------------------------------
// decay profile
// ---------------------------------------------------------------------------

/// Gaussian decay weights `ω_τ = exp(−τ²/(2σ_t²))` for τ ∈ 1..=T_p.
/// Strictly decreasing over the horizon; all entries in (0, 1) for finite
/// positive σ_t (underflowing to exact zero for tiny σ_t).
pub fn decay_weights(t_p: usize, sigma_t: f64) -> Result<Vec<f64>> {
    if !(sigma_t > 0.0) {
        return Err(CoreError::config(format!(
            "sigma_t must be positive, got {sigma_t}"
        )));
    }
    if t_p == 0 {
        return Err(CoreError::config("forecast horizon must be at least 1"));
    }
    Ok((1..=t_p)
        .map(|tau| {
            let t = tau as f64;
            (-t * t / (2.0 * sigma_t * sigma_t)).exp()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// context generation
// ---------------------------------------------------------------------------

/// 0/1 gate expanding a flat pair mask to `[M·N, d]`.
fn pair_gate(connected: &[bool], d: usize) -> Tensor {
    let mut data = vec![0.0; connected.len() * d];
    for (i, &c) in connected.iter().enumerate() {
        if c {
            data[i * d..(i + 1) * d].fill(1.0);
        }
    }
    Tensor::new(vec![connected.len(), d], data).expect("gate shape")
}

/// Initial incident context `[N × d_v]`: per connected pair, a perceptron
/// over `[K_k ‖ S_j ‖ D_kj]`, summed over the incidents connected to each
/// sensor. Rows of sensors with no connected incident are exactly zero;
/// M = 0 produces an all-zero tensor.
#[allow(clippy::too_many_arguments)]
pub fn initial_context(
    tape: &mut Tape,
    p: &Bound,
    k_mat: Val,
    s_enc: Val,
    d_slice: &RelationTensor,
    connected: &[bool],
    use_s: bool,
    use_d: bool,
) -> Result<Val> {
    let m = tape.shape_of(k_mat)[0];
    let n = tape.shape_of(s_enc)[0];
    let d_v = tape.shape_of(p.val("tiid.ctx.w2"))[1];
    if m == 0 {
        return Ok(tape.constant(Tensor::zeros(vec![n, d_v])));
    }
    let d_s = tape.shape_of(s_enc)[1];

    // pair rows in incident-major order k·N + j
    let k_idx: Vec<usize> = (0..m).flat_map(|k| std::iter::repeat(k).take(n)).collect();
    let k_block = tape.gather_rows(k_mat, k_idx)?;
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
    let x = tape.concat_cols(&[k_block, s_block, d_block])?;
    let h = tape.linear(x, p.val("tiid.ctx.w1"), p.val("tiid.ctx.b1"))?;
    let h = tape.relu(h);
    let pair_ctx = tape.linear(h, p.val("tiid.ctx.w2"), p.val("tiid.ctx.b2"))?;
    let gate = tape.constant(pair_gate(connected, d_v));
    let gated = tape.mul_elem(pair_ctx, gate)?;
    tape.sum_rows_strided(gated, m)
}

/// Broadcast product `C_temp[τ] = ω_τ · (C_init·W_c)`, flattened to the
/// backbone's `[N × T_p·d_out]` layout (horizon varies fastest per row).
pub fn temporal_impact(tape: &mut Tape, p: &Bound, c_init: Val, omega: &[f64]) -> Result<Val> {
    let base = tape.matmul(c_init, p.val("tiid.w_c"))?;
    let parts: Vec<Val> = omega.iter().map(|&w| tape.scale(base, w)).collect();
    tape.concat_cols(&parts)
}

/// Prediction head: a two-layer perceptron applied per (node, step) to
/// `H_pred + C_temp`, producing one channel. Output is time-major
/// `[T_p·N × 1]` so it aligns with target tensors.
pub fn predict(tape: &mut Tape, p: &Bound, h_pred: Val, c_temp: Option<Val>) -> Result<Val> {
    let shape = tape.shape_of(h_pred).to_vec();
    let n = shape[0];
    let combined = match c_temp {
        Some(c) => tape.add(h_pred, c)?,
        None => h_pred,
    };
    let d_out = tape.shape_of(p.val("tiid.out.w1"))[0];
    let t_p = shape[1] / d_out;
    // rows become (node, step) pairs, node-major
    let per_step = tape.reshape(combined, vec![n * t_p, d_out])?;
    let h = tape.linear(per_step, p.val("tiid.out.w1"), p.val("tiid.out.b1"))?;
    let h = tape.relu(h);
    let y = tape.linear(h, p.val("tiid.out.w2"), p.val("tiid.out.b2"))?;
    // reorder to time-major rows τ·N + j
    let perm: Vec<usize> = (0..t_p * n)
        .map(|r| {
            let tau = r / n;
            let j = r % n;
            j * t_p + tau
        })
        .collect();
    tape.permute_rows(y, perm)
}

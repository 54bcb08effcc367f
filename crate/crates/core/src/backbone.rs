//! Decoupled spatio-temporal backbone: multi-graph diffusion over a static,
//! an adaptive, and a dynamic adjacency, residual decoupling blocks, and
//! per-layer forecast heads whose outputs accumulate into the prediction.
//!
//! Layout conventions: hidden series are `Vec<Val>` of `[N × d_h]` step
//! matrices (time-major); forecast parts are `[N × T_p·d_out]` with the
//! horizon varying fastest, so heads can stay single linear maps.

use rand::Rng;

use crate::config::ModelSection;
use crate::error::Result;
use crate::params::{embedding_normal, xavier_uniform, Bound, ParamStore};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

/// The three adjacency matrices used simultaneously by the diffusion step.
#[derive(Debug, Clone, Copy)]
pub struct AdjacencySet {
    pub a_static: Val,
    pub a_ada: Val,
    pub a_dyn: Val,
}

/// Per-layer intermediates, kept for invariant checks and tests.
pub struct BlockTrace {
    pub h_in: Vec<Val>,
    pub h_ext: Vec<Val>,
    pub h_res: Vec<Val>,
    pub h_inh: Vec<Val>,
    pub f_ext: Val,
    pub f_inh: Val,
}

const ADJ_KEYS: [&str; 3] = ["stat", "ada", "dyn"];

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

pub fn register_backbone_params(
    ps: &mut ParamStore,
    rng: &mut impl Rng,
    m: &ModelSection,
    n: usize,
) {
    ps.insert("bb.e_u", embedding_normal(rng, n, m.d_emb));
    ps.insert("bb.e_d", embedding_normal(rng, n, m.d_emb));
    let d_dyn = m.d_dyn();
    ps.insert("bb.dyn.w_q", xavier_uniform(rng, d_dyn, m.d_k));
    ps.insert("bb.dyn.w_k", xavier_uniform(rng, d_dyn, m.d_k));

    let head_out = m.t_p * m.d_out;
    let d_attn = m.d_attn();
    for l in 0..m.layers {
        ps.insert(format!("bb.l{l}.ext.w0"), xavier_uniform(rng, m.d_h, m.d_h));
        for key in ADJ_KEYS {
            for p in 1..=m.diffusion_order {
                ps.insert(
                    format!("bb.l{l}.ext.{key}{p}"),
                    xavier_uniform(rng, m.d_h, m.d_h),
                );
            }
        }
        ps.insert(format!("bb.l{l}.ext.b"), Tensor::zeros(vec![m.d_h]));
        ps.insert(
            format!("bb.l{l}.ext.head.w"),
            xavier_uniform(rng, m.d_h, head_out),
        );
        ps.insert(format!("bb.l{l}.ext.head.b"), Tensor::zeros(vec![head_out]));

        for gate in ["z", "r", "h"] {
            ps.insert(
                format!("bb.l{l}.gru.w_{gate}"),
                xavier_uniform(rng, 2 * m.d_h, m.d_h),
            );
            ps.insert(format!("bb.l{l}.gru.b_{gate}"), Tensor::zeros(vec![m.d_h]));
        }
        ps.insert(
            format!("bb.l{l}.att.w_q"),
            xavier_uniform(rng, m.d_h, d_attn),
        );
        ps.insert(
            format!("bb.l{l}.att.w_k"),
            xavier_uniform(rng, m.d_h, d_attn),
        );
        ps.insert(
            format!("bb.l{l}.inh.head.w"),
            xavier_uniform(rng, m.d_h, head_out),
        );
        ps.insert(format!("bb.l{l}.inh.head.b"), Tensor::zeros(vec![head_out]));
    }
}

// ---------------------------------------------------------------------------
// adjacencies
// ---------------------------------------------------------------------------

/// Row-stochastic adaptive adjacency `softmax(ReLU(E_u·E_dᵀ))`.
pub fn adaptive_adjacency(tape: &mut Tape, e_u: Val, e_d: Val) -> Result<Val> {
    let e_dt = tape.transpose(e_d)?;
    let scores = tape.matmul(e_u, e_dt)?;
    let scores = tape.relu(scores);
    tape.softmax_axis(scores, 1)
}

/// Row-stochastic dynamic adjacency from per-node state+timestamp features:
/// `softmax((E·W_Q)(E·W_K)ᵀ / √d_dyn)` where d_dyn is the feature width.
pub fn dynamic_adjacency(tape: &mut Tape, p: &Bound, e_dyn: Val) -> Result<Val> {
    let d_dyn = tape.shape_of(e_dyn)[1];
    let q = tape.matmul(e_dyn, p.val("bb.dyn.w_q"))?;
    let k = tape.matmul(e_dyn, p.val("bb.dyn.w_k"))?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_dyn as f64).sqrt());
    tape.softmax_axis(scores, 1)
}

// ---------------------------------------------------------------------------
// diffusion convolution
// ---------------------------------------------------------------------------

/// `Z = H·W₀ + Σ_{A} Σ_{p=1..P} Aᵖ·H·W_{A,p} + b`, summed over the three
/// adjacencies with independent weights per power.
pub fn multigraph_conv(
    tape: &mut Tape,
    p: &Bound,
    h_step: Val,
    adj: &AdjacencySet,
    layer: usize,
    order: usize,
) -> Result<Val> {
    let w0 = p.val(&format!("bb.l{layer}.ext.w0"));
    let mut z = tape.matmul(h_step, w0)?;
    for (key, a) in ADJ_KEYS
        .iter()
        .zip([adj.a_static, adj.a_ada, adj.a_dyn])
    {
        let mut cur = h_step;
        for pow in 1..=order {
            cur = tape.matmul(a, cur)?;
            let w = p.val(&format!("bb.l{layer}.ext.{key}{pow}"));
            let term = tape.matmul(cur, w)?;
            z = tape.add(z, term)?;
        }
    }
    let b = p.val(&format!("bb.l{layer}.ext.b"));
    tape.add_bias_row(z, b)
}

// ---------------------------------------------------------------------------
// decoupling components
// ---------------------------------------------------------------------------

/// Diffuses every step and reads the forecast part off the last step.
pub fn external_influence(
    tape: &mut Tape,
    p: &Bound,
    h_in: &[Val],
    adj: &AdjacencySet,
    layer: usize,
    order: usize,
) -> Result<(Vec<Val>, Val)> {
    let mut h_ext = Vec::with_capacity(h_in.len());
    for &step in h_in {
        h_ext.push(multigraph_conv(tape, p, step, adj, layer, order)?);
    }
    let last = *h_ext.last().expect("nonempty series");
    let f = tape.linear(
        last,
        p.val(&format!("bb.l{layer}.ext.head.w")),
        p.val(&format!("bb.l{layer}.ext.head.b")),
    )?;
    Ok((h_ext, f))
}

/// One gated recurrent step: `h′ = (1−z)∘h + z∘h̃`.
fn gru_step(tape: &mut Tape, p: &Bound, layer: usize, x: Val, h: Val, ones: Val) -> Result<Val> {
    let xh = tape.concat_cols(&[x, h])?;
    let z = tape.linear(
        xh,
        p.val(&format!("bb.l{layer}.gru.w_z")),
        p.val(&format!("bb.l{layer}.gru.b_z")),
    )?;
    let z = tape.sigmoid(z);
    let r = tape.linear(
        xh,
        p.val(&format!("bb.l{layer}.gru.w_r")),
        p.val(&format!("bb.l{layer}.gru.b_r")),
    )?;
    let r = tape.sigmoid(r);
    let rh = tape.mul_elem(r, h)?;
    let xrh = tape.concat_cols(&[x, rh])?;
    let cand = tape.linear(
        xrh,
        p.val(&format!("bb.l{layer}.gru.w_h")),
        p.val(&format!("bb.l{layer}.gru.b_h")),
    )?;
    let cand = tape.tanh(cand);
    let keep = tape.sub(ones, z)?;
    let kept = tape.mul_elem(keep, h)?;
    let new = tape.mul_elem(z, cand)?;
    tape.add(kept, new)
}

/// Recurrent scan plus temporal self-attention per node. Returns the
/// attended sequence (time-major steps) and the forecast part read off the
/// final attended state. Attention mixes the scan outputs directly (no value
/// projection), so a single-step sequence passes through exactly.
pub fn inherent_trend(
    tape: &mut Tape,
    p: &Bound,
    h_res: &[Val],
    layer: usize,
) -> Result<(Vec<Val>, Val)> {
    let t_h = h_res.len();
    let n = tape.shape_of(h_res[0])[0];
    let d_h = tape.shape_of(h_res[0])[1];

    // recurrent scan over time
    let mut h = tape.constant(Tensor::zeros(vec![n, d_h]));
    let ones = tape.constant(Tensor::full(vec![n, d_h], 1.0));
    let mut scan = Vec::with_capacity(t_h);
    for &x in h_res {
        h = gru_step(tape, p, layer, x, h, ones)?;
        scan.push(h);
    }

    // per-node attention over the scan outputs
    let stacked = tape.concat_rows(&scan)?; // [(T_h·N) × d_h], row t·N + j
    let w_q = p.val(&format!("bb.l{layer}.att.w_q"));
    let w_k = p.val(&format!("bb.l{layer}.att.w_k"));
    let d_attn = tape.shape_of(w_q)[1];
    let mut per_node = Vec::with_capacity(n);
    for j in 0..n {
        let rows: Vec<usize> = (0..t_h).map(|t| t * n + j).collect();
        let g = tape.gather_rows(stacked, rows)?; // [T_h × d_h]
        let q = tape.matmul(g, w_q)?;
        let k = tape.matmul(g, w_k)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (d_attn as f64).sqrt());
        let a = tape.softmax_axis(scores, 1)?;
        per_node.push(tape.matmul(a, g)?); // [T_h × d_h]
    }
    let attended = tape.concat_rows(&per_node)?; // [(N·T_h) × d_h], row j·T_h + t

    let mut h_inh = Vec::with_capacity(t_h);
    for t in 0..t_h {
        let rows: Vec<usize> = (0..n).map(|j| j * t_h + t).collect();
        h_inh.push(tape.gather_rows(attended, rows)?);
    }
    let final_rows: Vec<usize> = (0..n).map(|j| j * t_h + (t_h - 1)).collect();
    let final_state = tape.gather_rows(attended, final_rows)?;
    let f = tape.linear(
        final_state,
        p.val(&format!("bb.l{layer}.inh.head.w")),
        p.val(&format!("bb.l{layer}.inh.head.b")),
    )?;
    Ok((h_inh, f))
}

// ---------------------------------------------------------------------------
// full backbone
// ---------------------------------------------------------------------------

/// Runs all decoupling blocks, returning per-layer traces. The residual
/// identities `h_res = h_in − h_ext` and `h_next = h_res − h_inh` hold
/// exactly by construction; tests assert them on the recorded traces.
pub fn backbone_blocks(
    tape: &mut Tape,
    p: &Bound,
    h_prime: &[Val],
    adj: &AdjacencySet,
    layers: usize,
    order: usize,
) -> Result<Vec<BlockTrace>> {
    let mut h_in: Vec<Val> = h_prime.to_vec();
    let mut traces = Vec::with_capacity(layers);
    for layer in 0..layers {
        let (h_ext, f_ext) = external_influence(tape, p, &h_in, adj, layer, order)?;
        let mut h_res = Vec::with_capacity(h_in.len());
        for (&a, &b) in h_in.iter().zip(&h_ext) {
            h_res.push(tape.sub(a, b)?);
        }
        let (h_inh, f_inh) = inherent_trend(tape, p, &h_res, layer)?;
        let mut h_next = Vec::with_capacity(h_res.len());
        for (&a, &b) in h_res.iter().zip(&h_inh) {
            h_next.push(tape.sub(a, b)?);
        }
        traces.push(BlockTrace {
            h_in,
            h_ext,
            h_res,
            h_inh,
            f_ext,
            f_inh,
        });
        h_in = h_next;
    }
    Ok(traces)
}

/// Accumulated forecast `[N × T_p·d_out]`: the sum of both components'
/// forecast parts over all layers.
pub fn backbone_forward(
    tape: &mut Tape,
    p: &Bound,
    h_prime: &[Val],
    adj: &AdjacencySet,
    layers: usize,
    order: usize,
) -> Result<Val> {
    let traces = backbone_blocks(tape, p, h_prime, adj, layers, order)?;
    let mut total: Option<Val> = None;
    for tr in &traces {
        let part = tape.add(tr.f_ext, tr.f_inh)?;
        total = Some(match total {
            Some(t) => tape.add(t, part)?,
            None => part,
        });
    }
    Ok(total.expect("layers >= 1"))
}

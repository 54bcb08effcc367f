//! Naive per-pair reference implementations of the fusion pipeline, written
//! as plain scalar loops with no shared code with the tape ops. Tests and the
//! acceptance suite cross-check the vectorized versions against these.

use crate::data::{RelationTensor, CH_ROAD};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// out[i][j] = Σ_k a[i][k]·b[k][j], plain loops.
fn matmul_loops(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(b.shape()[0], k, "inner dims");
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a.at(i, t) * b.at(t, j);
            }
            *out.at_mut(i, j) = acc;
        }
    }
    out
}

/// Two-layer perceptron on a single feature vector, scalar loops.
fn mlp_scalar(input: &[f64], w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> f64 {
    let hidden = w1.shape()[1];
    let mut h = vec![0.0; hidden];
    for (u, hu) in h.iter_mut().enumerate() {
        let mut acc = b1.data()[u];
        for (i, x) in input.iter().enumerate() {
            acc += x * w1.at(i, u);
        }
        *hu = relu(acc);
    }
    let mut out = b2.data()[0];
    for (u, hu) in h.iter().enumerate() {
        out += hu * w2.at(u, 0);
    }
    out
}

/// Softmax over the connected entries of one sensor column; disconnected
/// entries come out exactly zero, fully-disconnected columns all-zero.
fn column_softmax(logits: &[f64], connected: &[bool]) -> Vec<f64> {
    let m = logits.len();
    let mut out = vec![0.0; m];
    let mut max = f64::NEG_INFINITY;
    for k in 0..m {
        if connected[k] && logits[k] > max {
            max = logits[k];
        }
    }
    if max == f64::NEG_INFINITY {
        return out;
    }
    let mut sum = 0.0;
    for k in 0..m {
        if connected[k] {
            out[k] = (logits[k] - max).exp();
            sum += out[k];
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// Row-wise layer normalization, scalar loops.
fn layer_norm_loops(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(vec![rows, d]);
    for i in 0..rows {
        let mut mean = 0.0;
        for j in 0..d {
            mean += x.at(i, j);
        }
        mean /= d as f64;
        let mut var = 0.0;
        for j in 0..d {
            let dev = x.at(i, j) - mean;
            var += dev * dev;
        }
        var /= d as f64;
        let denom = (var + eps).sqrt();
        for j in 0..d {
            *out.at_mut(i, j) =
                (x.at(i, j) - mean) / denom * gain.data()[j] + bias.data()[j];
        }
    }
    out
}

/// Per-pair loop version of the incident-context fusion step. Returns the
/// `[M × N]` attention weights and the fused `[N × d_h]` hidden state.
#[allow(clippy::too_many_arguments)]
pub fn icsf_reference(
    h_t: &Tensor,
    i_enc: &Tensor,
    s_enc: &Tensor,
    d_slice: &RelationTensor,
    connected: &[bool],
    ps: &ParamStore,
    use_s: bool,
    use_d: bool,
) -> (Tensor, Tensor) {
    let n = h_t.shape()[0];
    let m = i_enc.shape()[0];
    if m == 0 {
        return (Tensor::zeros(vec![0, n]), h_t.clone());
    }
    let w_q = ps.get("icsf.w_q").unwrap();
    let w_k = ps.get("icsf.w_k").unwrap();
    let w_v = ps.get("icsf.w_v").unwrap();
    let d_k = w_q.shape()[1];
    let d_s = s_enc.shape()[1];

    let q = matmul_loops(h_t, w_q);
    let k_mat = matmul_loops(i_enc, w_k);
    let v = matmul_loops(i_enc, w_v);

    // preliminary weights: per-column softmax of scaled scores
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut prelim = Tensor::zeros(vec![m, n]);
    for j in 0..n {
        let mut col_scores = vec![0.0; m];
        let mut col_conn = vec![false; m];
        for k in 0..m {
            let mut dot = 0.0;
            for a in 0..d_k {
                dot += k_mat.at(k, a) * q.at(j, a);
            }
            col_scores[k] = dot * scale;
            col_conn[k] = connected[k * n + j];
        }
        for (k, w) in column_softmax(&col_scores, &col_conn).into_iter().enumerate() {
            *prelim.at_mut(k, j) = w;
        }
    }

    // context-aware rescoring through the pair perceptron
    let w1 = ps.get("icsf.alpha.w1").unwrap();
    let b1 = ps.get("icsf.alpha.b1").unwrap();
    let w2 = ps.get("icsf.alpha.w2").unwrap();
    let b2 = ps.get("icsf.alpha.b2").unwrap();
    let mut alpha = Tensor::zeros(vec![m, n]);
    for j in 0..n {
        let mut logits = vec![0.0; m];
        let mut col_conn = vec![false; m];
        for k in 0..m {
            let mut input = Vec::with_capacity(1 + d_s + 3);
            input.push(prelim.at(k, j));
            for c in 0..d_s {
                input.push(if use_s { s_enc.at(j, c) } else { 0.0 });
            }
            for ch in 0..3 {
                input.push(if use_d { d_slice.get(k, j, ch) } else { 0.0 });
            }
            logits[k] = mlp_scalar(&input, w1, b1, w2, b2);
            col_conn[k] = connected[k * n + j];
        }
        for (k, w) in column_softmax(&logits, &col_conn).into_iter().enumerate() {
            *alpha.at_mut(k, j) = w;
        }
    }

    // aggregate, project if widths differ, then residual layer norm
    let d_v = v.shape()[1];
    let mut c = Tensor::zeros(vec![n, d_v]);
    for j in 0..n {
        for a in 0..d_v {
            let mut acc = 0.0;
            for k in 0..m {
                acc += alpha.at(k, j) * v.at(k, a);
            }
            *c.at_mut(j, a) = acc;
        }
    }
    let c = match ps.get("icsf.proj.w") {
        Some(proj) if d_v != h_t.shape()[1] => matmul_loops(&c, proj),
        _ => c,
    };
    let d_h = h_t.shape()[1];
    let mut sum = Tensor::zeros(vec![n, d_h]);
    for j in 0..n {
        for a in 0..d_h {
            *sum.at_mut(j, a) = h_t.at(j, a) + c.at(j, a);
        }
    }
    let fused = layer_norm_loops(
        &sum,
        ps.get("icsf.ln.gain").unwrap(),
        ps.get("icsf.ln.bias").unwrap(),
        crate::fusion::LN_EPS,
    );
    (alpha, fused)
}

/// Per-pair loop version of the bipartite message-passing baseline.
pub fn imp_reference(
    h_t: &Tensor,
    i_enc: &Tensor,
    d_slice: &RelationTensor,
    connected: &[bool],
    rounds: usize,
    ps: &ParamStore,
) -> Tensor {
    let n = h_t.shape()[0];
    let m = i_enc.shape()[0];
    if m == 0 {
        return h_t.clone();
    }
    let d_h = h_t.shape()[1];
    let w_init = ps.get("imp.init.w").unwrap();
    let b_init = ps.get("imp.init.b").unwrap();
    let w_inc = ps.get("imp.inc.w").unwrap();
    let b_inc = ps.get("imp.inc.b").unwrap();
    let w_sen = ps.get("imp.sen.w").unwrap();
    let b_sen = ps.get("imp.sen.b").unwrap();

    let mut e = Tensor::zeros(vec![m, d_h]);
    for k in 0..m {
        for a in 0..d_h {
            let mut acc = b_init.data()[a];
            for c in 0..i_enc.shape()[1] {
                acc += i_enc.at(k, c) * w_init.at(c, a);
            }
            *e.at_mut(k, a) = relu(acc);
        }
    }
    let weight = |k: usize, j: usize| -> f64 {
        if connected[k * n + j] {
            d_slice.get(k, j, CH_ROAD)
        } else {
            0.0
        }
    };
    let inc_active: Vec<bool> = (0..m).map(|k| (0..n).any(|j| connected[k * n + j])).collect();
    let sen_active: Vec<bool> = (0..n).map(|j| (0..m).any(|k| connected[k * n + j])).collect();

    let mut s = h_t.clone();
    for _ in 0..rounds.max(1) {
        let mut e_next = e.clone();
        for k in 0..m {
            if !inc_active[k] {
                continue;
            }
            let mut input = vec![0.0; 2 * d_h];
            for a in 0..d_h {
                input[a] = e.at(k, a);
                let mut msg = 0.0;
                for j in 0..n {
                    msg += weight(k, j) * s.at(j, a);
                }
                input[d_h + a] = msg;
            }
            for a in 0..d_h {
                let mut acc = b_inc.data()[a];
                for (i, x) in input.iter().enumerate() {
                    acc += x * w_inc.at(i, a);
                }
                *e_next.at_mut(k, a) += relu(acc);
            }
        }
        e = e_next;

        let mut s_next = s.clone();
        for j in 0..n {
            if !sen_active[j] {
                continue;
            }
            let mut input = vec![0.0; 2 * d_h];
            for a in 0..d_h {
                input[a] = s.at(j, a);
                let mut msg = 0.0;
                for k in 0..m {
                    msg += weight(k, j) * e.at(k, a);
                }
                input[d_h + a] = msg;
            }
            for a in 0..d_h {
                let mut acc = b_sen.data()[a];
                for (i, x) in input.iter().enumerate() {
                    acc += x * w_sen.at(i, a);
                }
                *s_next.at_mut(j, a) += relu(acc);
            }
        }
        s = s_next;
    }
    layer_norm_loops(
        &s,
        ps.get("imp.ln.gain").unwrap(),
        ps.get("imp.ln.bias").unwrap(),
        crate::fusion::LN_EPS,
    )
}

/// Per-pair loop version of the initial incident context: for each connected
/// pair a two-layer perceptron over `[K_k ‖ S_j ‖ D_kj]`, accumulated into the
/// row of the sensor it touches. Disconnected pairs contribute nothing.
pub fn initial_context_reference(
    k_mat: &Tensor,
    s_enc: &Tensor,
    d_slice: &RelationTensor,
    connected: &[bool],
    ps: &ParamStore,
    use_s: bool,
    use_d: bool,
) -> Tensor {
    let m = k_mat.shape()[0];
    let n = s_enc.shape()[0];
    let w1 = ps.get("tiid.ctx.w1").unwrap();
    let b1 = ps.get("tiid.ctx.b1").unwrap();
    let w2 = ps.get("tiid.ctx.w2").unwrap();
    let b2 = ps.get("tiid.ctx.b2").unwrap();
    let d_v = w2.shape()[1];
    let mut out = Tensor::zeros(vec![n, d_v]);
    let d_k = k_mat.shape()[1];
    let d_s = s_enc.shape()[1];
    let hidden = w1.shape()[1];
    for j in 0..n {
        for k in 0..m {
            if !connected[k * n + j] {
                continue;
            }
            let mut input = Vec::with_capacity(d_k + d_s + 3);
            for a in 0..d_k {
                input.push(k_mat.at(k, a));
            }
            for c in 0..d_s {
                input.push(if use_s { s_enc.at(j, c) } else { 0.0 });
            }
            for ch in 0..3 {
                input.push(if use_d { d_slice.get(k, j, ch) } else { 0.0 });
            }
            let mut h = vec![0.0; hidden];
            for (u, hu) in h.iter_mut().enumerate() {
                let mut acc = b1.data()[u];
                for (i, x) in input.iter().enumerate() {
                    acc += x * w1.at(i, u);
                }
                *hu = relu(acc);
            }
            for a in 0..d_v {
                let mut acc = b2.data()[a];
                for (u, hu) in h.iter().enumerate() {
                    acc += hu * w2.at(u, a);
                }
                *out.at_mut(j, a) += acc;
            }
        }
    }
    out
}

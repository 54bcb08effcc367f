//! End-to-end forward pass: encoders, anchor-step incident fusion, the
//! decoupled spatio-temporal backbone, and the decaying incident context
//! added before the prediction head. One tape per instance.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::backbone::{
    adaptive_adjacency, backbone_forward, dynamic_adjacency, register_backbone_params,
    AdjacencySet,
};
use crate::config::{FusionMode, ModelSection};
use crate::data::{ForecastInstance, RelationTensor, SensorVocab, CH_FLOW};
use crate::encoder::{
    day_of_week_index, encode_incidents, encode_sensors, project_traffic, register_encoder_params,
    time_of_day_slot, timestamp_embeddings, IncidentFeatures, SensorFeatures,
};
use crate::error::{CoreError, Result};
use crate::fusion::{
    fuse_imp, fuse_mlp, icsf_forward, register_fuse_imp_params, register_fuse_mlp_params,
    register_fusion_params,
};
use crate::io::NormStats;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;
use crate::tiid::{decay_weights, initial_context, predict, register_tiid_params, temporal_impact};

/// Inputs fixed for a whole region: encoded sensor attributes and the
/// row-normalized static adjacency.
#[derive(Debug, Clone)]
pub struct StaticInputs {
    pub sensor_feats: SensorFeatures,
    /// `[N × N]`, row-normalized.
    pub a_static: Tensor,
}

impl StaticInputs {
    pub fn sensor_count(&self) -> usize {
        self.sensor_feats.sensor_count()
    }
}

/// One forecast window, standardized and flattened, ready for the tape.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    /// `T_h` matrices `[N × C]`; flow standardized, missing values imputed
    /// with the (standardized) mean, calendar channels raw.
    pub steps: Vec<Tensor>,
    /// `[T_p·N × 1]` standardized targets, time-major rows `τ·N + j`;
    /// masked entries are zero-filled.
    pub target_std: Tensor,
    /// `[T_p·N × 1]` raw targets with NaN kept for missing values.
    pub target_raw: Tensor,
    /// Finite-target mask over the flattened rows.
    pub mask: Vec<bool>,
    pub incident_feats: IncidentFeatures,
    pub d_slice: RelationTensor,
    pub connected: Vec<bool>,
    pub tod_slot: usize,
    pub dow: usize,
}

impl PreparedInstance {
    pub fn prepare(
        inst: &ForecastInstance,
        stats: &NormStats,
        kappa: f64,
    ) -> Result<PreparedInstance> {
        let shape = inst.history.shape();
        let (t_h, n, c) = (shape[0], shape[1], shape[2]);
        let mut steps = Vec::with_capacity(t_h);
        for t in 0..t_h {
            let mut data = Vec::with_capacity(n * c);
            for node in 0..n {
                for ch in 0..c {
                    let v = inst.history.data()[(t * n + node) * c + ch];
                    data.push(if ch == CH_FLOW {
                        if v.is_finite() {
                            stats.flow.standardize(v)
                        } else {
                            0.0
                        }
                    } else {
                        v
                    });
                }
            }
            steps.push(Tensor::new(vec![n, c], data)?);
        }

        let t_p = inst.target.shape()[0];
        let raw = inst.target.data();
        let mask: Vec<bool> = raw.iter().map(|v| v.is_finite()).collect();
        let target_std: Vec<f64> = raw
            .iter()
            .map(|&v| if v.is_finite() { stats.flow.standardize(v) } else { 0.0 })
            .collect();
        Ok(PreparedInstance {
            steps,
            target_std: Tensor::new(vec![t_p * n, 1], target_std)?,
            target_raw: Tensor::new(vec![t_p * n, 1], raw.to_vec())?,
            mask,
            incident_feats: IncidentFeatures::prepare(&inst.incidents, t_h)?,
            d_slice: inst.d_slice.clone(),
            connected: inst.d_slice.connected_mask(kappa),
            tod_slot: time_of_day_slot(inst.anchor_time),
            dow: day_of_week_index(inst.anchor_time),
        })
    }

    pub fn incident_count(&self) -> usize {
        self.incident_feats.incident_count()
    }
}

/// Registers every parameter group in a fixed order so a seed fully
/// determines the initial weights. All fusion implementations are always
/// registered; variants that skip one leave its weights untouched.
pub fn init_params(
    section: &ModelSection,
    vocab: &SensorVocab,
    n: usize,
    c_in: usize,
    seed: u64,
) -> ParamStore {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    register_encoder_params(&mut ps, &mut rng, section, vocab, c_in);
    register_fusion_params(&mut ps, &mut rng, section);
    register_fuse_mlp_params(&mut ps, &mut rng, section);
    register_fuse_imp_params(&mut ps, &mut rng, section);
    register_backbone_params(&mut ps, &mut rng, section, n);
    register_tiid_params(&mut ps, &mut rng, section);
    ps
}

/// Flips the switch named by an ablation variant.
pub fn apply_variant(section: &ModelSection, variant: &str) -> Result<ModelSection> {
    let mut s = section.clone();
    match variant {
        "full" => {}
        "no_icsf" => s.icsf = false,
        "no_tiid" => s.tiid = false,
        "no_s" => s.use_s = false,
        "no_d" => s.use_d = false,
        "no_i" => s.use_i = false,
        other => {
            return Err(CoreError::config(format!(
                "unknown ablation variant {other:?}"
            )))
        }
    }
    Ok(s)
}

pub struct ModelOutput {
    /// `[T_p·N × 1]` standardized prediction, time-major rows.
    pub prediction: Val,
    /// Scalar masked mean absolute error against the standardized target.
    pub loss: Val,
}

/// Runs one instance through the whole model on the given tape.
pub fn forward(
    tape: &mut Tape,
    p: &Bound,
    section: &ModelSection,
    statics: &StaticInputs,
    inst: &PreparedInstance,
) -> Result<ModelOutput> {
    let n = statics.sensor_count();
    let m = inst.incident_count();

    let step_vals: Vec<Val> = inst
        .steps
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let s_enc = encode_sensors(tape, p, &statics.sensor_feats)?;
    let i_enc = encode_incidents(tape, p, &inst.incident_feats, section.use_i)?;
    let mut h_series = project_traffic(tape, p, &step_vals)?;

    if section.icsf && m > 0 {
        match section.fusion {
            FusionMode::Icsf => {
                h_series = icsf_forward(
                    tape,
                    p,
                    &h_series,
                    i_enc,
                    s_enc,
                    &inst.d_slice,
                    &inst.connected,
                    section.use_s,
                    section.use_d,
                )?;
            }
            FusionMode::Mlp => {
                let last = *h_series.last().expect("T_h >= 1");
                let fused = fuse_mlp(tape, p, last, i_enc, s_enc, &inst.connected)?;
                *h_series.last_mut().unwrap() = fused;
            }
            FusionMode::Imp => {
                let last = *h_series.last().expect("T_h >= 1");
                let fused = fuse_imp(
                    tape,
                    p,
                    last,
                    i_enc,
                    &inst.d_slice,
                    &inst.connected,
                    section.imp_rounds,
                )?;
                *h_series.last_mut().unwrap() = fused;
            }
        }
    }

    // dynamic-state embedding: fused anchor hidden plus timestamp rows
    let (tod, dow) = timestamp_embeddings(tape, p, inst.tod_slot, inst.dow)?;
    let tod_rows = tape.tile_rows(tod, n)?;
    let dow_rows = tape.tile_rows(dow, n)?;
    let h_last = *h_series.last().expect("T_h >= 1");
    let e_dyn = tape.concat_cols(&[h_last, tod_rows, dow_rows])?;

    let adj = AdjacencySet {
        a_static: tape.constant(statics.a_static.clone()),
        a_ada: adaptive_adjacency(tape, p.val("bb.e_u"), p.val("bb.e_d"))?,
        a_dyn: dynamic_adjacency(tape, p, e_dyn)?,
    };
    let h_pred = backbone_forward(
        tape,
        p,
        &h_series,
        &adj,
        section.layers,
        section.diffusion_order,
    )?;

    let prediction = if section.tiid && m > 0 {
        let k_mat = tape.matmul(i_enc, p.val("icsf.w_k"))?;
        let c_init = initial_context(
            tape,
            p,
            k_mat,
            s_enc,
            &inst.d_slice,
            &inst.connected,
            section.use_s,
            section.use_d,
        )?;
        let omega = decay_weights(section.t_p, section.sigma_t)?;
        let c_temp = temporal_impact(tape, p, c_init, &omega)?;
        predict(tape, p, h_pred, Some(c_temp))?
    } else {
        predict(tape, p, h_pred, None)?
    };

    let loss = tape.masked_mae(prediction, &inst.target_std, &inst.mask)?;
    Ok(ModelOutput { prediction, loss })
}

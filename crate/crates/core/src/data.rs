//! Road graph, sensor/incident records, relation tensor, temporal alignment,
//! windowing, and chronological splits.
//!
//! Everything here is a pure builder over immutable inputs: ingestion (in
//! [`crate::io`]) produces records, these functions assemble them into the
//! tensors the model consumes.

use std::collections::BTreeMap;

use chrono::{DateTime, Datelike, Timelike, Utc};
use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const MILES_TO_KM: f64 = 1.609344;
/// Mean Earth radius in km, used by the haversine distance.
pub const EARTH_RADIUS_KM: f64 = 6371.0;
/// Fixed sampling step of the traffic series.
pub const STEP_SECONDS: u32 = 300;

// ---------------------------------------------------------------------------
// incident taxonomy
// ---------------------------------------------------------------------------

/// The six incident categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IncidentType {
    Hazard,
    Accident,
    Breakdown,
    Weather,
    Other,
    Police,
}

pub const INCIDENT_TYPES: [IncidentType; 6] = [
    IncidentType::Hazard,
    IncidentType::Accident,
    IncidentType::Breakdown,
    IncidentType::Weather,
    IncidentType::Other,
    IncidentType::Police,
];

impl IncidentType {
    pub fn as_str(self) -> &'static str {
        match self {
            IncidentType::Hazard => "Hazard",
            IncidentType::Accident => "Accident",
            IncidentType::Breakdown => "Breakdown",
            IncidentType::Weather => "Weather",
            IncidentType::Other => "Other",
            IncidentType::Police => "Police",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        INCIDENT_TYPES.iter().copied().find(|t| t.as_str() == s)
    }

    /// Stable index into the 6-row type embedding table.
    pub fn index(self) -> usize {
        INCIDENT_TYPES
            .iter()
            .position(|&t| t == self)
            .expect("type is in table")
    }
}

/// The frozen 30-entry description vocabulary: five descriptions per
/// category, category-major. Index into this list is the row of the
/// description embedding table.
pub const INCIDENT_DESCRIPTIONS: [(&str, IncidentType); 30] = [
    ("Traffic Hazard", IncidentType::Hazard),
    ("Debris on Road", IncidentType::Hazard),
    ("Animal on Road", IncidentType::Hazard),
    ("Object on Road", IncidentType::Hazard),
    ("Pedestrian on Road", IncidentType::Hazard),
    ("Traffic Collision", IncidentType::Accident),
    ("Multi-Vehicle Collision", IncidentType::Accident),
    ("Hit and Run", IncidentType::Accident),
    ("Overturned Vehicle", IncidentType::Accident),
    ("Collision with Injury", IncidentType::Accident),
    ("Disabled Vehicle", IncidentType::Breakdown),
    ("Flat Tire", IncidentType::Breakdown),
    ("Mechanical Failure", IncidentType::Breakdown),
    ("Out of Gas", IncidentType::Breakdown),
    ("Stalled Vehicle", IncidentType::Breakdown),
    ("Fog", IncidentType::Weather),
    ("High Wind", IncidentType::Weather),
    ("Heavy Rain", IncidentType::Weather),
    ("Snow on Road", IncidentType::Weather),
    ("Ice on Road", IncidentType::Weather),
    ("Roadwork", IncidentType::Other),
    ("Lane Closure", IncidentType::Other),
    ("Special Event", IncidentType::Other),
    ("Vehicle Fire", IncidentType::Other),
    ("Sigalert", IncidentType::Other),
    ("Police Activity", IncidentType::Police),
    ("Traffic Break", IncidentType::Police),
    ("Traffic Advisory", IncidentType::Police),
    ("Escort", IncidentType::Police),
    ("Road Investigation", IncidentType::Police),
];

/// Index of a description in the frozen vocabulary.
pub fn description_index(desc: &str) -> Option<usize> {
    INCIDENT_DESCRIPTIONS.iter().position(|(d, _)| *d == desc)
}

/// Descriptions belonging to one category, as vocabulary indices.
pub fn descriptions_for(ty: IncidentType) -> Vec<usize> {
    INCIDENT_DESCRIPTIONS
        .iter()
        .enumerate()
        .filter(|(_, (_, t))| *t == ty)
        .map(|(i, _)| i)
        .collect()
}

// ---------------------------------------------------------------------------
// records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorMeta {
    pub id: String,
    /// s1, e.g. "Mainline"
    pub sensor_type: String,
    /// s2, e.g. "Asphalt"
    pub surface: String,
    /// s3, e.g. "Commercial"
    pub roadway_use: String,
    /// s4, meters
    pub lane_width: f64,
    /// s5, km/h
    pub design_speed: u32,
    pub latitude: f64,
    pub longitude: f64,
    pub freeway: String,
    /// s9, miles along the freeway
    pub abs_pm: f64,
}

impl SensorMeta {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude) || !(-180.0..=180.0).contains(&self.longitude)
        {
            return Err(CoreError::ingest(
                "sensors",
                format!(
                    "sensor {}: coordinates ({}, {}) out of range",
                    self.id, self.latitude, self.longitude
                ),
            ));
        }
        if self.lane_width <= 0.0 || self.design_speed == 0 || self.abs_pm < 0.0 {
            return Err(CoreError::ingest(
                "sensors",
                format!("sensor {}: non-positive physical attribute", self.id),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub id: String,
    pub timestamp: DateTime<Utc>,
    /// e1: window offset within the history the incident is attached to;
    /// assembly sets it to `T_h − 1` ("most recent step").
    pub relative_position: usize,
    pub incident_type: IncidentType,
    /// e2: one of the 30 frozen descriptions.
    pub description: String,
    pub holiday: bool,
    pub latitude: f64,
    pub longitude: f64,
    pub abs_pm: f64,
    pub freeway: String,
}

// ---------------------------------------------------------------------------
// vocabularies
// ---------------------------------------------------------------------------

/// Order-of-first-appearance categorical vocabulary, frozen after ingestion.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Vocab {
    values: IndexSet<String>,
}

impl Vocab {
    pub fn from_values<'a>(values: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = IndexSet::new();
        for s in values {
            v.insert(s.to_string());
        }
        Vocab { values: v }
    }

    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.values.get_index_of(value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.values.iter().map(|s| s.as_str())
    }
}

/// The three sensor categorical vocabularies, discovered at ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorVocab {
    pub sensor_type: Vocab,
    pub surface: Vocab,
    pub roadway_use: Vocab,
}

impl SensorVocab {
    pub fn discover(sensors: &[SensorMeta]) -> Self {
        SensorVocab {
            sensor_type: Vocab::from_values(sensors.iter().map(|s| s.sensor_type.as_str())),
            surface: Vocab::from_values(sensors.iter().map(|s| s.surface.as_str())),
            roadway_use: Vocab::from_values(sensors.iter().map(|s| s.roadway_use.as_str())),
        }
    }
}

// ---------------------------------------------------------------------------
// road graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RoadGraph {
    pub sensor_ids: Vec<String>,
    /// Symmetric kernel weights in [0,1], zero diagonal.
    pub adjacency: Tensor,
}

impl RoadGraph {
    pub fn node_count(&self) -> usize {
        self.sensor_ids.len()
    }

    /// Number of undirected edges with nonzero weight.
    pub fn edge_count(&self) -> usize {
        let n = self.node_count();
        let mut edges = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adjacency.at(i, j) > 0.0 {
                    edges += 1;
                }
            }
        }
        edges
    }

    /// Row-normalized copy of the adjacency for diffusion steps; all-zero
    /// rows stay zero.
    pub fn row_normalized(&self) -> Tensor {
        let n = self.node_count();
        let mut out = self.adjacency.clone();
        for i in 0..n {
            let row_sum: f64 = (0..n).map(|j| out.at(i, j)).sum();
            if row_sum > 0.0 {
                for j in 0..n {
                    *out.at_mut(i, j) /= row_sum;
                }
            }
        }
        out
    }
}

/// Gaussian-kernel adjacency over along-freeway postmile distance.
///
/// `A[i][j] = exp(−d²/bandwidth²)` where `d = |ΔPM|` in km, kept only when
/// the sensors share a freeway and the weight exceeds `threshold`.
pub fn build_adjacency(
    sensors: &[SensorMeta],
    bandwidth_km: f64,
    threshold: f64,
) -> Result<RoadGraph> {
    if sensors.len() < 2 {
        return Err(CoreError::config(format!(
            "adjacency needs at least 2 sensors, got {}",
            sensors.len()
        )));
    }
    if bandwidth_km <= 0.0 {
        return Err(CoreError::config(format!(
            "adjacency bandwidth must be positive, got {bandwidth_km}"
        )));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(CoreError::config(format!(
            "adjacency threshold must lie in [0,1), got {threshold}"
        )));
    }
    let mut seen = IndexSet::new();
    for s in sensors {
        if !seen.insert(s.id.as_str()) {
            return Err(CoreError::ingest(
                "sensors",
                format!("duplicate sensor id {}", s.id),
            ));
        }
    }
    let n = sensors.len();
    let mut a = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            if sensors[i].freeway != sensors[j].freeway {
                continue;
            }
            let d_km = (sensors[i].abs_pm - sensors[j].abs_pm).abs() * MILES_TO_KM;
            let w = (-(d_km * d_km) / (bandwidth_km * bandwidth_km)).exp();
            if w > threshold {
                *a.at_mut(i, j) = w;
                *a.at_mut(j, i) = w;
            }
        }
    }
    Ok(RoadGraph {
        sensor_ids: sensors.iter().map(|s| s.id.clone()).collect(),
        adjacency: a,
    })
}

// ---------------------------------------------------------------------------
// relation tensor
// ---------------------------------------------------------------------------

/// Per-(incident, sensor) spatial relation: Euclidean proximity,
/// road-network proximity, and the upstream bit.
#[derive(Debug, Clone)]
pub struct RelationTensor {
    /// Shape `[M, N, 3]`.
    d: Tensor,
}

pub const CH_EUCLIDEAN: usize = 0;
pub const CH_ROAD: usize = 1;
pub const CH_UPSTREAM: usize = 2;

impl RelationTensor {
    /// Wraps an explicit `[M, N, 3]` tensor.
    pub fn from_tensor(d: Tensor) -> Result<RelationTensor> {
        if d.rank() != 3 || d.shape()[2] != 3 {
            return Err(CoreError::shape(
                "relation_tensor",
                format!("expected [M, N, 3], got {:?}", d.shape()),
            ));
        }
        Ok(RelationTensor { d })
    }

    pub fn incident_count(&self) -> usize {
        self.d.shape()[0]
    }

    pub fn sensor_count(&self) -> usize {
        self.d.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.d
    }

    pub fn get(&self, k: usize, j: usize, channel: usize) -> f64 {
        let n = self.sensor_count();
        self.d.data()[(k * n + j) * 3 + channel]
    }

    /// Connectivity predicate: road proximity at least `kappa`.
    pub fn connected(&self, k: usize, j: usize, kappa: f64) -> bool {
        self.get(k, j, CH_ROAD) >= kappa
    }

    /// Flat incident-major connectivity mask of length `M·N`
    /// (entry `k·N + j`).
    pub fn connected_mask(&self, kappa: f64) -> Vec<bool> {
        let (m, n) = (self.incident_count(), self.sensor_count());
        let mut mask = Vec::with_capacity(m * n);
        for k in 0..m {
            for j in 0..n {
                mask.push(self.connected(k, j, kappa));
            }
        }
        mask
    }

    /// The `[M·N, 3]` per-pair feature matrix in incident-major order, as
    /// fed to the fusion scoring networks.
    pub fn pair_features(&self) -> Tensor {
        self.d
            .clone()
            .reshaped(vec![self.incident_count() * self.sensor_count(), 3])
            .expect("M*N*3 elements")
    }

    /// Restriction to a subset of incidents (rows), preserving order.
    pub fn select_incidents(&self, rows: &[usize]) -> RelationTensor {
        let n = self.sensor_count();
        let mut data = Vec::with_capacity(rows.len() * n * 3);
        for &k in rows {
            let start = k * n * 3;
            data.extend_from_slice(&self.d.data()[start..start + n * 3]);
        }
        RelationTensor {
            d: Tensor::new(vec![rows.len(), n, 3], data).expect("consistent slice"),
        }
    }

    pub fn empty(n: usize) -> RelationTensor {
        RelationTensor {
            d: Tensor::zeros(vec![0, n, 3]),
        }
    }
}

/// Great-circle distance in km.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().asin()
}

/// Builds the `[M×N×3]` relation tensor between incidents and sensors.
///
/// Channel 0: `exp(−d_euc²/σ_euc²)` over haversine distance. Channel 1:
/// `exp(−d_road²/σ_road²)` over along-freeway `|ΔPM|` when freeways match,
/// else 0. Channel 2: 1 iff the incident's postmile is strictly greater
/// than the sensor's.
pub fn build_relation_tensor(
    incidents: &[IncidentRecord],
    sensors: &[SensorMeta],
    bandwidths: (f64, f64),
) -> Result<RelationTensor> {
    let (sigma_euc, sigma_road) = bandwidths;
    if sigma_euc <= 0.0 || sigma_road <= 0.0 {
        return Err(CoreError::config(format!(
            "relation bandwidths must be positive, got ({sigma_euc}, {sigma_road})"
        )));
    }
    let (m, n) = (incidents.len(), sensors.len());
    let mut data = Vec::with_capacity(m * n * 3);
    for inc in incidents {
        for s in sensors {
            let d_euc = haversine_km(inc.latitude, inc.longitude, s.latitude, s.longitude);
            let euc = (-(d_euc * d_euc) / (sigma_euc * sigma_euc)).exp();
            let road = if inc.freeway == s.freeway {
                let d_road = (inc.abs_pm - s.abs_pm).abs() * MILES_TO_KM;
                (-(d_road * d_road) / (sigma_road * sigma_road)).exp()
            } else {
                0.0
            };
            let upstream = if inc.freeway == s.freeway && inc.abs_pm > s.abs_pm {
                1.0
            } else {
                0.0
            };
            data.extend_from_slice(&[euc, road, upstream]);
        }
    }
    Ok(RelationTensor {
        d: Tensor::new(vec![m, n, 3], data)?,
    })
}

/// Population standard deviation, `None` for fewer than 2 values.
pub fn population_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(var.sqrt())
}

// ---------------------------------------------------------------------------
// traffic series
// ---------------------------------------------------------------------------

/// Channel indices of the engineered series.
pub const CH_FLOW: usize = 0;
pub const CH_TOD: usize = 1;
pub const CH_DOW: usize = 2;

#[derive(Debug, Clone)]
pub struct TrafficSeries {
    /// `[T, N, C]`, missing values are quiet NaN.
    pub x: Tensor,
    pub start: DateTime<Utc>,
    pub step_seconds: u32,
    pub sensor_ids: Vec<String>,
}

impl TrafficSeries {
    pub fn t(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn c(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn at(&self, t: usize, node: usize, channel: usize) -> f64 {
        let (n, c) = (self.n(), self.c());
        self.x.data()[(t * n + node) * c + channel]
    }

    pub fn timestamp_of(&self, window: usize) -> DateTime<Utc> {
        self.start + chrono::Duration::seconds(window as i64 * self.step_seconds as i64)
    }

    /// Engineers the calendar channels from a raw flow-only series:
    /// channel 1 = fraction of the day elapsed, channel 2 = day of week
    /// with Monday = 0.
    pub fn with_calendar_channels(&self) -> Result<TrafficSeries> {
        if self.c() != 1 {
            return Err(CoreError::config(format!(
                "calendar engineering expects a flow-only series, got {} channels",
                self.c()
            )));
        }
        let (t_len, n) = (self.t(), self.n());
        let mut data = Vec::with_capacity(t_len * n * 3);
        for t in 0..t_len {
            let ts = self.timestamp_of(t);
            let tod = f64::from(ts.num_seconds_from_midnight()) / 86_400.0;
            let dow = f64::from(ts.weekday().num_days_from_monday());
            for node in 0..n {
                data.push(self.at(t, node, 0));
                data.push(tod);
                data.push(dow);
            }
        }
        Ok(TrafficSeries {
            x: Tensor::new(vec![t_len, n, 3], data)?,
            start: self.start,
            step_seconds: self.step_seconds,
            sensor_ids: self.sensor_ids.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// temporal alignment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct AlignedIncidents {
    /// window index → indices into the incident list
    pub by_window: BTreeMap<usize, Vec<usize>>,
    /// incidents outside the series range
    pub dropped: usize,
}

/// Maps each incident to the 5-minute window containing its timestamp.
/// Incidents outside `[start, start + T·step)` are dropped and counted.
pub fn align_incidents(incidents: &[IncidentRecord], series: &TrafficSeries) -> AlignedIncidents {
    let mut out = AlignedIncidents::default();
    let step = i64::from(series.step_seconds);
    let horizon = series.t() as i64 * step;
    for (idx, inc) in incidents.iter().enumerate() {
        let offset = (inc.timestamp - series.start).num_seconds();
        if offset < 0 || offset >= horizon {
            out.dropped += 1;
            continue;
        }
        let window = (offset / step) as usize;
        out.by_window.entry(window).or_default().push(idx);
    }
    out
}

// ---------------------------------------------------------------------------
// forecast instances
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ForecastInstance {
    /// `[T_h, N, C]` — raw (unstandardized) inputs; NaN marks missing flow.
    pub history: Tensor,
    /// `[T_p, N, 1]` raw flow targets; NaN marks missing.
    pub target: Tensor,
    /// Incidents aligned to the last history step, `relative_position`
    /// already set.
    pub incidents: Vec<IncidentRecord>,
    /// Relation rows for exactly those incidents.
    pub d_slice: RelationTensor,
    /// Timestamp of the last history step.
    pub anchor_time: DateTime<Utc>,
    /// Window index of the last history step.
    pub anchor_index: usize,
}

impl ForecastInstance {
    pub fn incident_count(&self) -> usize {
        self.incidents.len()
    }

    /// Mask of finite target entries, flat over `[T_p, N]`.
    pub fn target_mask(&self) -> Vec<bool> {
        self.target.data().iter().map(|v| v.is_finite()).collect()
    }
}

/// Cuts the series into sliding (history, target) windows. One instance per
/// anchor `t ∈ [T_h−1, T−T_p−1]`; incidents aligned to window `t` are
/// attached with `relative_position = T_h−1`.
pub fn make_instances(
    series: &TrafficSeries,
    incidents: &[IncidentRecord],
    aligned: &AlignedIncidents,
    d_full: &RelationTensor,
    t_h: usize,
    t_p: usize,
) -> Result<Vec<ForecastInstance>> {
    if t_h == 0 || t_p == 0 {
        return Err(CoreError::config("window lengths must be positive".to_string()));
    }
    if series.t() < t_h + t_p {
        return Err(CoreError::config(format!(
            "series has {} steps, need at least T_h + T_p = {}",
            series.t(),
            t_h + t_p
        )));
    }
    let (n, c) = (series.n(), series.c());
    let mut out = Vec::with_capacity(series.t() - t_h - t_p + 1);
    for anchor in (t_h - 1)..=(series.t() - t_p - 1) {
        let h_start = (anchor + 1 - t_h) * n * c;
        let h_end = (anchor + 1) * n * c;
        let history = Tensor::new(
            vec![t_h, n, c],
            series.x.data()[h_start..h_end].to_vec(),
        )?;
        let mut target_data = Vec::with_capacity(t_p * n);
        for t in (anchor + 1)..=(anchor + t_p) {
            for node in 0..n {
                target_data.push(series.at(t, node, CH_FLOW));
            }
        }
        let target = Tensor::new(vec![t_p, n, 1], target_data)?;
        let rows = aligned.by_window.get(&anchor).cloned().unwrap_or_default();
        let attached: Vec<IncidentRecord> = rows
            .iter()
            .map(|&k| {
                let mut rec = incidents[k].clone();
                rec.relative_position = t_h - 1;
                rec
            })
            .collect();
        let d_slice = d_full.select_incidents(&rows);
        out.push(ForecastInstance {
            history,
            target,
            incidents: attached,
            d_slice,
            anchor_time: series.timestamp_of(anchor),
            anchor_index: anchor,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct SplitOutcome {
    pub train: Vec<ForecastInstance>,
    pub val: Vec<ForecastInstance>,
    pub test: Vec<ForecastInstance>,
    /// Boundary instances dropped from the ends of (train, val) because
    /// their targets overlapped the next split's history windows.
    pub dropped: (usize, usize),
}

/// Contiguous chronological partition with leakage trimming.
///
/// Validation and test sizes are `max(1, round(ratio · n))` with train
/// taking the remainder, so every split is nonempty whenever possible.
/// Train (resp. val) instances whose target windows overlap the first val
/// (resp. test) instance's history windows are dropped and counted.
pub fn split_chronological(
    instances: Vec<ForecastInstance>,
    ratios: (f64, f64, f64),
    t_h: usize,
    t_p: usize,
) -> Result<SplitOutcome> {
    let (r_train, r_val, r_test) = ratios;
    let sum = r_train + r_val + r_test;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CoreError::config(format!(
            "split ratios must sum to 1, got {sum}"
        )));
    }
    if r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 {
        return Err(CoreError::config(format!(
            "all three split ratios must be positive, got ({r_train}, {r_val}, {r_test})"
        )));
    }
    let n = instances.len();
    let n_val = ((r_val * n as f64).round() as usize).max(1);
    let n_test = ((r_test * n as f64).round() as usize).max(1);
    if n_val + n_test >= n {
        return Err(CoreError::config(format!(
            "{n} instances are too few for three nonempty splits"
        )));
    }

    let mut instances = instances;
    let test = instances.split_off(n - n_test);
    let mut val = instances.split_off(n - n_test - n_val);
    let mut train = instances;

    // Trim leakage: an instance with anchor t uses targets over
    // (t, t + T_p]; the next split's first instance reads history over
    // [t' − T_h + 1, t']. Overlap iff t + T_p > t' − T_h.
    let trim = |side: &mut Vec<ForecastInstance>, next_first_anchor: usize| -> usize {
        let before = side.len();
        side.retain(|inst| {
            inst.anchor_index + t_p <= next_first_anchor.saturating_sub(t_h)
        });
        before - side.len()
    };
    let dropped_train = match val.first() {
        Some(first) => trim(&mut train, first.anchor_index),
        None => 0,
    };
    let dropped_val = match test.first() {
        Some(first) => trim(&mut val, first.anchor_index),
        None => 0,
    };
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::config(
            "boundary trimming emptied a split; provide more data".to_string(),
        ));
    }
    Ok(SplitOutcome {
        train,
        val,
        test,
        dropped: (dropped_train, dropped_val),
    })
}

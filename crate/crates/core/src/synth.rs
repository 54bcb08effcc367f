//! Synthetic freeway corridor: sensors on a line, a daily flow profile with
//! weekend damping, and seeded incidents that carve localized, linearly
//! recovering dips into the flow. The ground-truth impact fraction per
//! (window, sensor) is returned alongside the series.

use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::config::SynthSection;
use crate::data::{
    descriptions_for, IncidentRecord, SensorMeta, TrafficSeries, INCIDENT_DESCRIPTIONS,
    INCIDENT_TYPES, MILES_TO_KM, STEP_SECONDS,
};
use crate::error::{CoreError, Result};
use crate::io::path_str;
use crate::tensor::Tensor;

/// Windows per day at the fixed 5-minute step.
pub const WINDOWS_PER_DAY: usize = 86_400 / STEP_SECONDS as usize;
/// Weekend flows are damped to this fraction of the weekday profile.
pub const WEEKEND_FACTOR: f64 = 0.7;
/// Residual impact fraction for sensors past the incident location.
pub const DOWNSTREAM_FACTOR: f64 = 0.2;

const CORRIDOR_FREEWAY: &str = "SYN-1";
const BASE_LAT: f64 = 34.0;
const BASE_LON: f64 = -118.0;

/// Degrees of longitude per km travelled east at the corridor latitude.
fn lon_deg_per_km() -> f64 {
    1.0 / (crate::data::EARTH_RADIUS_KM * BASE_LAT.to_radians().cos() * 1.0f64.to_radians())
}

fn lon_of_pm(abs_pm: f64) -> f64 {
    BASE_LON + abs_pm * MILES_TO_KM * lon_deg_per_km()
}

pub struct SynthData {
    pub sensors: Vec<SensorMeta>,
    pub incidents: Vec<IncidentRecord>,
    /// Flow-only series `[T, N, 1]`.
    pub series: TrafficSeries,
    /// Ground-truth impact fraction `[T, N]`, already clamped to `[0, 1]`.
    pub impacts: Tensor,
}

/// Corridor start: a Monday at midnight, so weekday effects line up with
/// day indices (days 5 and 6 of each week are the damped weekend).
pub fn corridor_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 4, 0, 0, 0).unwrap()
}

/// Noise-free flow for one sensor at one timestamp: a daily profile that
/// peaks at noon and vanishes at midnight, damped on weekends, with a mild
/// per-node level gradient.
pub fn baseline_flow(cfg: &SynthSection, ts: DateTime<Utc>, node: usize) -> f64 {
    use chrono::{Datelike, Timelike};
    let tod = f64::from(ts.num_seconds_from_midnight()) / 86_400.0;
    let daily = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * tod).cos());
    let weekend = ts.weekday().num_days_from_monday() >= 5;
    let wf = if weekend { WEEKEND_FACTOR } else { 1.0 };
    let node_factor = 1.0 + 0.01 * node as f64;
    cfg.base_amplitude * daily * wf * node_factor
}

/// Fractional flow reduction one incident causes at one sensor,
/// `steps_since` windows after onset. Sensors at or before the incident's
/// postmile take the full hit; sensors past it keep a small residual.
pub fn unit_impact(
    cfg: &SynthSection,
    type_idx: usize,
    desc_slot: usize,
    commercial: bool,
    distance_km: f64,
    past_incident: bool,
    steps_since: usize,
) -> f64 {
    if steps_since >= cfg.recovery_steps {
        return 0.0;
    }
    let ramp = 1.0 - steps_since as f64 / cfg.recovery_steps as f64;
    let spread = cfg.spatial_spread_km;
    let spatial = (-(distance_km * distance_km) / (spread * spread)).exp();
    let gate = if past_incident { DOWNSTREAM_FACTOR } else { 1.0 };
    let susceptibility = if commercial {
        cfg.susceptibility_commercial
    } else {
        cfg.susceptibility_residential
    };
    cfg.impact_peak
        * cfg.type_weights[type_idx]
        * cfg.desc_weights[desc_slot]
        * susceptibility
        * spatial
        * gate
        * ramp
}

fn make_sensors(cfg: &SynthSection) -> Vec<SensorMeta> {
    (0..cfg.nodes)
        .map(|i| {
            let abs_pm = i as f64;
            SensorMeta {
                id: format!("syn-{i:03}"),
                sensor_type: "Mainline".to_string(),
                surface: if i % 3 == 0 { "Concrete" } else { "Asphalt" }.to_string(),
                roadway_use: if i % 2 == 0 { "Commercial" } else { "Residential" }.to_string(),
                lane_width: 3.4 + 0.1 * (i % 5) as f64,
                design_speed: if i % 4 == 0 { 100 } else { 110 },
                latitude: BASE_LAT,
                longitude: lon_of_pm(abs_pm),
                freeway: CORRIDOR_FREEWAY.to_string(),
                abs_pm,
            }
        })
        .collect()
}

fn draw_incidents(cfg: &SynthSection, rng: &mut ChaCha12Rng) -> Result<Vec<IncidentRecord>> {
    let mut out = Vec::new();
    if cfg.incidents_per_day <= 0.0 {
        return Ok(out);
    }
    let poisson = Poisson::new(cfg.incidents_per_day)
        .map_err(|e| CoreError::config(format!("incident rate: {e}")))?;
    let start = corridor_start();
    let max_pm = (cfg.nodes - 1) as f64;
    for day in 0..cfg.days {
        let count = poisson.sample(rng) as usize;
        for _ in 0..count {
            let window = rng.random_range(0..WINDOWS_PER_DAY);
            let ts = start
                + chrono::Duration::seconds(
                    ((day * WINDOWS_PER_DAY + window) * STEP_SECONDS as usize) as i64,
                );
            let abs_pm = if max_pm > 0.0 {
                rng.random_range(0.0..max_pm)
            } else {
                0.0
            };
            let type_idx = rng.random_range(0..INCIDENT_TYPES.len());
            let ty = INCIDENT_TYPES[type_idx];
            let slot = rng.random_range(0..5);
            let desc = INCIDENT_DESCRIPTIONS[descriptions_for(ty)[slot]].0;
            out.push(IncidentRecord {
                id: String::new(),
                timestamp: ts,
                relative_position: 0,
                incident_type: ty,
                description: desc.to_string(),
                holiday: false,
                latitude: BASE_LAT,
                longitude: lon_of_pm(abs_pm),
                abs_pm,
                freeway: CORRIDOR_FREEWAY.to_string(),
            });
        }
    }
    out.sort_by_key(|inc| inc.timestamp);
    for (i, inc) in out.iter_mut().enumerate() {
        inc.id = format!("syn-e{i:04}");
    }
    Ok(out)
}

/// Slot of a description within its category.
fn desc_slot(inc: &IncidentRecord) -> usize {
    descriptions_for(inc.incident_type)
        .iter()
        .position(|&i| INCIDENT_DESCRIPTIONS[i].0 == inc.description)
        .expect("generated description is in the vocabulary")
}

fn accumulate_impacts(
    cfg: &SynthSection,
    sensors: &[SensorMeta],
    incidents: &[IncidentRecord],
    t_total: usize,
) -> Tensor {
    let n = sensors.len();
    let mut impacts = Tensor::zeros(vec![t_total, n]);
    let start = corridor_start();
    for inc in incidents {
        let w0 = ((inc.timestamp - start).num_seconds() / i64::from(STEP_SECONDS)) as usize;
        let type_idx = inc.incident_type.index();
        let slot = desc_slot(inc);
        for (j, s) in sensors.iter().enumerate() {
            let d_km = (inc.abs_pm - s.abs_pm).abs() * MILES_TO_KM;
            let past = s.abs_pm > inc.abs_pm;
            let commercial = s.roadway_use == "Commercial";
            for w in w0..t_total.min(w0 + cfg.recovery_steps) {
                let u = unit_impact(cfg, type_idx, slot, commercial, d_km, past, w - w0);
                *impacts.at_mut(w, j) += u;
            }
        }
    }
    for v in impacts.data_mut() {
        *v = v.min(1.0);
    }
    impacts
}

/// Generates the full corridor dataset for a config; the same config always
/// produces the same bytes.
pub fn generate(cfg: &SynthSection) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let sensors = make_sensors(cfg);
    let incidents = draw_incidents(cfg, &mut rng)?;
    let t_total = cfg.days * WINDOWS_PER_DAY;
    let n = cfg.nodes;
    let impacts = accumulate_impacts(cfg, &sensors, &incidents, t_total);

    let start = corridor_start();
    let noise = if cfg.noise_frac > 0.0 {
        Some(
            Normal::new(0.0, cfg.noise_frac * cfg.base_amplitude)
                .map_err(|e| CoreError::config(format!("noise: {e}")))?,
        )
    } else {
        None
    };
    let mut data = Vec::with_capacity(t_total * n);
    for t in 0..t_total {
        let ts = start + chrono::Duration::seconds((t * STEP_SECONDS as usize) as i64);
        for node in 0..n {
            let clean = baseline_flow(cfg, ts, node) * (1.0 - impacts.at(t, node));
            let noisy = match &noise {
                Some(dist) => clean + dist.sample(&mut rng),
                None => clean,
            };
            data.push(noisy.max(0.0));
        }
    }
    Ok(SynthData {
        series: TrafficSeries {
            x: Tensor::new(vec![t_total, n, 1], data)?,
            start,
            step_seconds: STEP_SECONDS,
            sensor_ids: sensors.iter().map(|s| s.id.clone()).collect(),
        },
        sensors,
        incidents,
        impacts,
    })
}

/// Writes the nonzero ground-truth impacts as `window,sensor,impact` rows.
pub fn write_impacts_csv(path: &Path, impacts: &Tensor) -> Result<()> {
    let p = path_str(path);
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(&p, e))?;
    let mut w = csv::Writer::from_writer(file);
    let fail = |e: csv::Error| CoreError::ingest(&p, e.to_string());
    w.write_record(["window", "sensor", "impact"]).map_err(fail)?;
    let (t_total, n) = (impacts.shape()[0], impacts.shape()[1]);
    for t in 0..t_total {
        for j in 0..n {
            let v = impacts.at(t, j);
            if v > 0.0 {
                w.write_record(&[t.to_string(), j.to_string(), format!("{v:.9}")])
                    .map_err(fail)?;
            }
        }
    }
    w.flush().map_err(|e| CoreError::io(&p, e))?;
    Ok(())
}

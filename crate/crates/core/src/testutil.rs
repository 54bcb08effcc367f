//! Shared miniature fixtures for unit tests: a 3-sensor corridor with one
//! incident, small dimensions, and round-number standardization stats.

use chrono::{TimeZone, Utc};

use crate::config::ModelSection;
use crate::data::{
    ForecastInstance, IncidentRecord, IncidentType, RelationTensor, SensorMeta, SensorVocab, Vocab,
};
use crate::encoder::SensorFeatures;
use crate::io::{MeanStd, NormStats};
use crate::model::StaticInputs;
use crate::tensor::Tensor;

pub(crate) fn tiny_section() -> ModelSection {
    ModelSection {
        t_h: 4,
        t_p: 3,
        d_h: 6,
        d_k: 4,
        d_v: 6,
        d_s: 3,
        d_e: 5,
        d_emb: 2,
        d_out: 4,
        d_sensor_cat: 2,
        d_incident_type: 2,
        d_incident_desc: 3,
        layers: 2,
        diffusion_order: 1,
        ..ModelSection::default()
    }
}

pub(crate) fn tiny_vocab() -> SensorVocab {
    SensorVocab {
        sensor_type: Vocab::from_values(["Mainline"]),
        surface: Vocab::from_values(["Asphalt"]),
        roadway_use: Vocab::from_values(["Commercial", "Residential"]),
    }
}

pub(crate) fn tiny_stats() -> NormStats {
    NormStats {
        flow: MeanStd { mean: 50.0, std: 10.0 },
        lane_width: MeanStd { mean: 3.7, std: 1.0 },
        design_speed: MeanStd { mean: 100.0, std: 10.0 },
    }
}

pub(crate) fn tiny_statics(n: usize) -> StaticInputs {
    let sensors: Vec<SensorMeta> = (0..n)
        .map(|i| SensorMeta {
            id: format!("s{i}"),
            sensor_type: "Mainline".to_string(),
            surface: "Asphalt".to_string(),
            roadway_use: if i % 2 == 0 { "Commercial" } else { "Residential" }.to_string(),
            lane_width: 3.7,
            design_speed: 105,
            latitude: 34.0,
            longitude: -118.0 + 0.01 * i as f64,
            freeway: "I-405".to_string(),
            abs_pm: i as f64,
        })
        .collect();
    let feats = SensorFeatures::prepare(&sensors, &tiny_vocab(), &tiny_stats()).unwrap();
    let mut a = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            if i.abs_diff(j) == 1 {
                *a.at_mut(i, j) = 0.5;
            }
        }
    }
    StaticInputs {
        sensor_feats: feats,
        a_static: a,
    }
}

/// One window over `n` sensors: a ramping history, targets continuing the
/// ramp, optionally a single accident near postmile 1.2.
pub(crate) fn tiny_instance(n: usize, with_incident: bool) -> ForecastInstance {
    let t_h = 4;
    let t_p = 3;
    let mut history = Vec::with_capacity(t_h * n * 3);
    for t in 0..t_h {
        for node in 0..n {
            history.push(40.0 + (t * n + node) as f64);
            history.push(0.25 + 0.01 * t as f64);
            history.push(2.0);
        }
    }
    let target: Vec<f64> = (0..t_p * n).map(|i| 45.0 + i as f64).collect();
    let anchor = Utc.with_ymd_and_hms(2024, 3, 6, 8, 0, 0).unwrap();
    let (incidents, d_slice) = if with_incident {
        let inc = IncidentRecord {
            id: "e0".to_string(),
            timestamp: anchor,
            relative_position: t_h - 1,
            incident_type: IncidentType::Accident,
            description: "Traffic Collision".to_string(),
            holiday: false,
            latitude: 34.0,
            longitude: -118.0,
            abs_pm: 1.2,
            freeway: "I-405".to_string(),
        };
        let mut d = Vec::with_capacity(n * 3);
        for j in 0..n {
            let road = (-((1.2 - j as f64) as f64).powi(2)).exp();
            d.extend_from_slice(&[road, road, if 1.2 > j as f64 { 1.0 } else { 0.0 }]);
        }
        (
            vec![inc],
            RelationTensor::from_tensor(Tensor::new(vec![1, n, 3], d).unwrap()).unwrap(),
        )
    } else {
        (vec![], RelationTensor::empty(n))
    };
    ForecastInstance {
        history: Tensor::new(vec![t_h, n, 3], history).unwrap(),
        target: Tensor::new(vec![t_p, n, 1], target).unwrap(),
        incidents,
        d_slice,
        anchor_time: anchor,
        anchor_index: t_h - 1,
    }
}

//! File formats: CSV schemas, the traffic tensor container, the parameter
//! container, and the JSON artifacts.
//!
//! Containers share one framing: 8 magic bytes, a little-endian u32 header
//! length, a JSON header, then a flat little-endian f32 payload. Missing
//! traffic values are stored as quiet NaN.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::data::{
    description_index, IncidentRecord, IncidentType, SensorMeta, TrafficSeries, STEP_SECONDS,
};
use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const TRAFFIC_MAGIC: &[u8; 8] = b"IGSTF001";
pub const PARAMS_MAGIC: &[u8; 8] = b"IGSTP001";

pub(crate) fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CoreError::io(path_str(path), e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| CoreError::io(path_str(path), e))
}

// ---------------------------------------------------------------------------
// sensors.csv
// ---------------------------------------------------------------------------

const SENSOR_HEADER: [&str; 10] = [
    "id",
    "type",
    "surface",
    "roadway_use",
    "lane_width",
    "design_speed",
    "latitude",
    "longitude",
    "freeway",
    "abs_pm",
];

pub fn read_sensors_csv(path: &Path) -> Result<Vec<SensorMeta>> {
    let p = path_str(path);
    let mut rdr = csv::Reader::from_reader(open(path)?);
    check_header(&p, &mut rdr, &SENSOR_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2; // 1-based, after header
        let rec = rec.map_err(|e| CoreError::ingest(&p, format!("row {row}: {e}")))?;
        if rec.len() != SENSOR_HEADER.len() {
            return Err(CoreError::ingest(
                &p,
                format!("row {row}: expected {} columns, got {}", SENSOR_HEADER.len(), rec.len()),
            ));
        }
        let field = |idx: usize| rec.get(idx).unwrap_or("").trim();
        let parse_f64 = |idx: usize, name: &str| -> Result<f64> {
            field(idx).parse().map_err(|_| {
                CoreError::ingest(&p, format!("row {row}: bad {name} {:?}", field(idx)))
            })
        };
        let sensor = SensorMeta {
            id: field(0).to_string(),
            sensor_type: field(1).to_string(),
            surface: field(2).to_string(),
            roadway_use: field(3).to_string(),
            lane_width: parse_f64(4, "lane_width")?,
            design_speed: field(5).parse().map_err(|_| {
                CoreError::ingest(&p, format!("row {row}: bad design_speed {:?}", field(5)))
            })?,
            latitude: parse_f64(6, "latitude")?,
            longitude: parse_f64(7, "longitude")?,
            freeway: field(8).to_string(),
            abs_pm: parse_f64(9, "abs_pm")?,
        };
        sensor
            .validate()
            .map_err(|e| CoreError::ingest(&p, format!("row {row}: {e}")))?;
        out.push(sensor);
    }
    Ok(out)
}

pub fn write_sensors_csv(path: &Path, sensors: &[SensorMeta]) -> Result<()> {
    let p = path_str(path);
    let mut w = csv::Writer::from_writer(create(path)?);
    let fail = |e: csv::Error| CoreError::ingest(&p, e.to_string());
    w.write_record(SENSOR_HEADER).map_err(fail)?;
    for s in sensors {
        w.write_record(&[
            s.id.clone(),
            s.sensor_type.clone(),
            s.surface.clone(),
            s.roadway_use.clone(),
            s.lane_width.to_string(),
            s.design_speed.to_string(),
            s.latitude.to_string(),
            s.longitude.to_string(),
            s.freeway.clone(),
            s.abs_pm.to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| CoreError::io(&p, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// incidents.csv
// ---------------------------------------------------------------------------

const INCIDENT_HEADER: [&str; 9] = [
    "id",
    "timestamp",
    "type",
    "description",
    "holiday",
    "latitude",
    "longitude",
    "abs_pm",
    "freeway",
];

pub fn read_incidents_csv(path: &Path) -> Result<Vec<IncidentRecord>> {
    let p = path_str(path);
    let mut rdr = csv::Reader::from_reader(open(path)?);
    check_header(&p, &mut rdr, &INCIDENT_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| CoreError::ingest(&p, format!("row {row}: {e}")))?;
        if rec.len() != INCIDENT_HEADER.len() {
            return Err(CoreError::ingest(
                &p,
                format!("row {row}: expected {} columns, got {}", INCIDENT_HEADER.len(), rec.len()),
            ));
        }
        let field = |idx: usize| rec.get(idx).unwrap_or("").trim();
        let timestamp = DateTime::parse_from_rfc3339(field(1))
            .map_err(|e| {
                CoreError::ingest(&p, format!("row {row}: bad timestamp {:?}: {e}", field(1)))
            })?
            .with_timezone(&Utc);
        let incident_type = IncidentType::parse(field(2)).ok_or_else(|| {
            CoreError::ingest(&p, format!("row {row}: unknown incident type {:?}", field(2)))
        })?;
        let description = field(3).to_string();
        match description_index(&description) {
            Some(idx) => {
                // the frozen vocabulary ties each description to its category
                if crate::data::INCIDENT_DESCRIPTIONS[idx].1 != incident_type {
                    return Err(CoreError::ingest(
                        &p,
                        format!(
                            "row {row}: description {description:?} does not belong to type {}",
                            incident_type.as_str()
                        ),
                    ));
                }
            }
            None => {
                return Err(CoreError::ingest(
                    &p,
                    format!("row {row}: description {description:?} not in the 30-entry vocabulary"),
                ))
            }
        }
        let holiday = match field(4) {
            "0" => false,
            "1" => true,
            other => {
                return Err(CoreError::ingest(
                    &p,
                    format!("row {row}: holiday must be 0 or 1, got {other:?}"),
                ))
            }
        };
        let parse_f64 = |idx: usize, name: &str| -> Result<f64> {
            field(idx).parse().map_err(|_| {
                CoreError::ingest(&p, format!("row {row}: bad {name} {:?}", field(idx)))
            })
        };
        out.push(IncidentRecord {
            id: field(0).to_string(),
            timestamp,
            relative_position: 0,
            incident_type,
            description,
            holiday,
            latitude: parse_f64(5, "latitude")?,
            longitude: parse_f64(6, "longitude")?,
            abs_pm: parse_f64(7, "abs_pm")?,
            freeway: field(8).to_string(),
        });
    }
    Ok(out)
}

pub fn write_incidents_csv(path: &Path, incidents: &[IncidentRecord]) -> Result<()> {
    let p = path_str(path);
    let mut w = csv::Writer::from_writer(create(path)?);
    let fail = |e: csv::Error| CoreError::ingest(&p, e.to_string());
    w.write_record(INCIDENT_HEADER).map_err(fail)?;
    for inc in incidents {
        w.write_record(&[
            inc.id.clone(),
            inc.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
            inc.incident_type.as_str().to_string(),
            inc.description.clone(),
            if inc.holiday { "1" } else { "0" }.to_string(),
            inc.latitude.to_string(),
            inc.longitude.to_string(),
            inc.abs_pm.to_string(),
            inc.freeway.clone(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| CoreError::io(&p, e))?;
    Ok(())
}

fn check_header<R: Read>(path: &str, rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let headers = rdr
        .headers()
        .map_err(|e| CoreError::ingest(path, format!("header: {e}")))?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(CoreError::ingest(
            path,
            format!("header {:?} does not match expected {:?}", got.join(","), expected.join(",")),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// traffic tensor container
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TrafficHeader {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "C")]
    c: usize,
    start: String,
    step_seconds: u32,
    sensor_ids: Vec<String>,
}

pub fn write_traffic_container(path: &Path, series: &TrafficSeries) -> Result<()> {
    let p = path_str(path);
    let header = TrafficHeader {
        t: series.t(),
        n: series.n(),
        c: series.c(),
        start: series.start.to_rfc3339_opts(SecondsFormat::Secs, true),
        step_seconds: series.step_seconds,
        sensor_ids: series.sensor_ids.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CoreError::ingest(&p, format!("header encode: {e}")))?;
    let mut w = BufWriter::new(create(path)?);
    let io_err = |e: std::io::Error| CoreError::io(&p, e);
    w.write_all(TRAFFIC_MAGIC).map_err(io_err)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;
    for &v in series.x.data() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_traffic_container(path: &Path) -> Result<TrafficSeries> {
    let p = path_str(path);
    let mut r = BufReader::new(open(path)?);
    let header: TrafficHeader = read_container_header(&p, &mut r, TRAFFIC_MAGIC)?;
    let numel = header.t * header.n * header.c;
    let data = read_f32_payload(&p, &mut r, numel)?;
    if header.sensor_ids.len() != header.n {
        return Err(CoreError::ingest(
            &p,
            format!(
                "header lists {} sensor ids for N={}",
                header.sensor_ids.len(),
                header.n
            ),
        ));
    }
    let start = DateTime::parse_from_rfc3339(&header.start)
        .map_err(|e| CoreError::ingest(&p, format!("bad start timestamp: {e}")))?
        .with_timezone(&Utc);
    Ok(TrafficSeries {
        x: Tensor::new(vec![header.t, header.n, header.c], data)?,
        start,
        step_seconds: header.step_seconds,
        sensor_ids: header.sensor_ids,
    })
}

fn read_container_header<T: for<'de> Deserialize<'de>, R: Read>(
    path: &str,
    r: &mut R,
    magic: &[u8; 8],
) -> Result<T> {
    let mut got_magic = [0u8; 8];
    r.read_exact(&mut got_magic)
        .map_err(|e| CoreError::io(path, e))?;
    if &got_magic != magic {
        return Err(CoreError::ingest(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got_magic),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|e| CoreError::io(path, e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|e| CoreError::io(path, e))?;
    serde_json::from_slice(&header_bytes)
        .map_err(|e| CoreError::ingest(path, format!("header decode: {e}")))
}

fn read_f32_payload<R: Read>(path: &str, r: &mut R, numel: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| CoreError::io(path, e))?;
    if bytes.len() != numel * 4 {
        return Err(CoreError::ingest(
            path,
            format!("payload holds {} bytes, expected {}", bytes.len(), numel * 4),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

// ---------------------------------------------------------------------------
// long-form CSV ingestion
// ---------------------------------------------------------------------------

/// Converts long-form `timestamp,sensor_id,flow` rows into a series on the
/// fixed 300 s grid. Sensors appear in order of first appearance; grid
/// cells with no row are missing (NaN). Timestamps must sit exactly on the
/// grid implied by the earliest row.
pub fn read_long_csv(path: &Path) -> Result<TrafficSeries> {
    let p = path_str(path);
    let mut rdr = csv::Reader::from_reader(open(path)?);
    check_header(&p, &mut rdr, &["timestamp", "sensor_id", "flow"])?;
    let mut rows: Vec<(DateTime<Utc>, String, f64)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| CoreError::ingest(&p, format!("row {row}: {e}")))?;
        let ts = DateTime::parse_from_rfc3339(rec.get(0).unwrap_or("").trim())
            .map_err(|e| CoreError::ingest(&p, format!("row {row}: bad timestamp: {e}")))?
            .with_timezone(&Utc);
        let id = rec.get(1).unwrap_or("").trim().to_string();
        let flow_str = rec.get(2).unwrap_or("").trim();
        let flow: f64 = if flow_str.is_empty() {
            f64::NAN
        } else {
            flow_str.parse().map_err(|_| {
                CoreError::ingest(&p, format!("row {row}: bad flow {flow_str:?}"))
            })?
        };
        rows.push((ts, id, flow));
    }
    if rows.is_empty() {
        return Err(CoreError::ingest(&p, "no data rows".to_string()));
    }
    let start = rows.iter().map(|(ts, _, _)| *ts).min().expect("nonempty");
    let end = rows.iter().map(|(ts, _, _)| *ts).max().expect("nonempty");
    let span = (end - start).num_seconds();
    let step = i64::from(STEP_SECONDS);
    let t_len = (span / step) as usize + 1;
    let mut sensor_ids: Vec<String> = Vec::new();
    for (_, id, _) in &rows {
        if !sensor_ids.iter().any(|s| s == id) {
            sensor_ids.push(id.clone());
        }
    }
    let n = sensor_ids.len();
    let mut data = vec![f64::NAN; t_len * n];
    for (ts, id, flow) in &rows {
        let offset = (*ts - start).num_seconds();
        if offset % step != 0 {
            return Err(CoreError::ingest(
                &p,
                format!("timestamp {ts} is not on the {STEP_SECONDS} s grid starting {start}"),
            ));
        }
        let t = (offset / step) as usize;
        let node = sensor_ids.iter().position(|s| s == id).expect("inserted above");
        data[t * n + node] = *flow;
    }
    Ok(TrafficSeries {
        x: Tensor::new(vec![t_len, n, 1], data)?,
        start,
        step_seconds: STEP_SECONDS,
        sensor_ids,
    })
}

// ---------------------------------------------------------------------------
// parameter container
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ParamsHeader {
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_params(path: &Path, params: &ParamStore) -> Result<()> {
    let p = path_str(path);
    let header = ParamsHeader {
        params: params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CoreError::ingest(&p, format!("header encode: {e}")))?;
    let mut w = BufWriter::new(create(path)?);
    let io_err = |e: std::io::Error| CoreError::io(&p, e);
    w.write_all(PARAMS_MAGIC).map_err(io_err)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;
    for (_, t) in params.iter() {
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ParamStore> {
    let p = path_str(path);
    let mut r = BufReader::new(open(path)?);
    let header: ParamsHeader = read_container_header(&p, &mut r, PARAMS_MAGIC)?;
    let total: usize = header
        .params
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    let data = read_f32_payload(&p, &mut r, total)?;
    let mut store = ParamStore::new();
    let mut offset = 0;
    for entry in header.params {
        let numel: usize = entry.shape.iter().product();
        let t = Tensor::new(entry.shape, data[offset..offset + numel].to_vec())?;
        store.insert(entry.name, t);
        offset += numel;
    }
    Ok(store)
}

// ---------------------------------------------------------------------------
// JSON artifacts
// ---------------------------------------------------------------------------

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let p = path_str(path);
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CoreError::ingest(&p, format!("encode: {e}")))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| CoreError::io(&p, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let p = path_str(path);
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(&p, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CoreError::ingest(&p, format!("decode: {e}")))
}

/// Mean/std pair for affine standardization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Fit over finite entries only; degenerate spread falls back to 1 so
    /// standardization stays invertible.
    pub fn fit(values: impl Iterator<Item = f64>) -> MeanStd {
        let finite: Vec<f64> = values.filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return MeanStd { mean: 0.0, std: 1.0 };
        }
        let n = finite.len() as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        MeanStd {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        }
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn destandardize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Per-feature standardization statistics persisted as `norm_stats.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub flow: MeanStd,
    pub lane_width: MeanStd,
    pub design_speed: MeanStd,
}

/// Frozen vocabularies persisted as `vocab.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabFile {
    pub sensor_type: Vec<String>,
    pub sensor_surface: Vec<String>,
    pub sensor_roadway_use: Vec<String>,
    pub incident_type: Vec<String>,
    pub incident_description: Vec<String>,
}

// ---------------------------------------------------------------------------
// metrics.csv
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub variant: String,
    /// "3", "6", "12", or "average"
    pub horizon: String,
    pub mae: f64,
    pub rmse: f64,
    /// percent
    pub mape: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let p = path_str(path);
    let mut w = csv::Writer::from_writer(create(path)?);
    let fail = |e: csv::Error| CoreError::ingest(&p, e.to_string());
    w.write_record(["variant", "horizon", "mae", "rmse", "mape"])
        .map_err(fail)?;
    for row in rows {
        w.write_record(&[
            row.variant.clone(),
            row.horizon.clone(),
            format!("{:.6}", row.mae),
            format!("{:.6}", row.rmse),
            format!("{:.6}", row.mape),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| CoreError::io(&p, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use tempfile::tempdir;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2023, 1, 2, 0, 0, 0).unwrap()
    }

    fn sample_sensor() -> SensorMeta {
        SensorMeta {
            id: "717046".to_string(),
            sensor_type: "Mainline".to_string(),
            surface: "Asphalt".to_string(),
            roadway_use: "Commercial".to_string(),
            lane_width: 3.7,
            design_speed: 105,
            latitude: 34.0522,
            longitude: -118.2437,
            freeway: "I-405".to_string(),
            abs_pm: 23.15,
        }
    }

    #[test]
    fn sensors_csv_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("sensors.csv");
        let sensors = vec![sample_sensor()];
        write_sensors_csv(&path, &sensors).unwrap();
        let back = read_sensors_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].id, "717046");
        assert_eq!(back[0].abs_pm, 23.15);
        assert_eq!(back[0].design_speed, 105);
    }

    #[test]
    fn sensors_csv_rejects_wrong_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("sensors.csv");
        std::fs::write(&path, "id,nope\n1,2\n").unwrap();
        let msg = read_sensors_csv(&path).unwrap_err().to_string();
        assert!(msg.contains("header"), "got: {msg}");
    }

    #[test]
    fn sensors_csv_names_bad_row() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("sensors.csv");
        std::fs::write(
            &path,
            "id,type,surface,roadway_use,lane_width,design_speed,latitude,longitude,freeway,abs_pm\n\
             a,Mainline,Asphalt,Commercial,3.7,105,34.0,-118.0,I-405,1.0\n\
             b,Mainline,Asphalt,Commercial,oops,105,34.0,-118.0,I-405,2.0\n",
        )
        .unwrap();
        let msg = read_sensors_csv(&path).unwrap_err().to_string();
        assert!(msg.contains("row 3") && msg.contains("lane_width"), "got: {msg}");
    }

    #[test]
    fn incidents_csv_round_trip_and_vocabulary() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("incidents.csv");
        let incidents = vec![IncidentRecord {
            id: "e1".to_string(),
            timestamp: t0(),
            relative_position: 0,
            incident_type: IncidentType::Accident,
            description: "Traffic Collision".to_string(),
            holiday: false,
            latitude: 34.0592,
            longitude: -118.4452,
            abs_pm: 25.50,
            freeway: "I-405".to_string(),
        }];
        write_incidents_csv(&path, &incidents).unwrap();
        let back = read_incidents_csv(&path).unwrap();
        assert_eq!(back[0].incident_type, IncidentType::Accident);
        assert_eq!(back[0].timestamp, t0());
        assert_eq!(back[0].abs_pm, 25.50);
    }

    #[test]
    fn incidents_csv_rejects_unknown_description() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("incidents.csv");
        std::fs::write(
            &path,
            "id,timestamp,type,description,holiday,latitude,longitude,abs_pm,freeway\n\
             e1,2023-01-02T00:00:00Z,Accident,Mystery Event,0,34.0,-118.0,1.0,I-405\n",
        )
        .unwrap();
        let msg = read_incidents_csv(&path).unwrap_err().to_string();
        assert!(msg.contains("row 2") && msg.contains("vocabulary"), "got: {msg}");
    }

    #[test]
    fn incidents_csv_rejects_bad_timestamp() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("incidents.csv");
        std::fs::write(
            &path,
            "id,timestamp,type,description,holiday,latitude,longitude,abs_pm,freeway\n\
             e1,yesterday,Accident,Traffic Collision,0,34.0,-118.0,1.0,I-405\n",
        )
        .unwrap();
        let msg = read_incidents_csv(&path).unwrap_err().to_string();
        assert!(msg.contains("row 2") && msg.contains("timestamp"), "got: {msg}");
    }

    #[test]
    fn traffic_container_round_trip_preserves_nan() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("series.bin");
        let mut data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        data[3] = f64::NAN;
        let series = TrafficSeries {
            x: Tensor::new(vec![3, 2, 1], data).unwrap(),
            start: t0(),
            step_seconds: 300,
            sensor_ids: vec!["a".to_string(), "b".to_string()],
        };
        write_traffic_container(&path, &series).unwrap();
        let back = read_traffic_container(&path).unwrap();
        assert_eq!(back.t(), 3);
        assert_eq!(back.sensor_ids, series.sensor_ids);
        assert_eq!(back.at(0, 0, 0), 1.0);
        assert!(back.at(1, 1, 0).is_nan());
        assert_eq!(back.start, t0());
    }

    #[test]
    fn traffic_container_rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("series.bin");
        std::fs::write(&path, b"WRONG000\x00\x00\x00\x00").unwrap();
        let msg = read_traffic_container(&path).unwrap_err().to_string();
        assert!(msg.contains("magic"), "got: {msg}");
    }

    #[test]
    fn traffic_container_rejects_truncated_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("series.bin");
        let series = TrafficSeries {
            x: Tensor::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap(),
            start: t0(),
            step_seconds: 300,
            sensor_ids: vec!["a".to_string()],
        };
        write_traffic_container(&path, &series).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_traffic_container(&path).is_err());
    }

    #[test]
    fn long_form_csv_builds_grid_with_gaps() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("long.csv");
        std::fs::write(
            &path,
            "timestamp,sensor_id,flow\n\
             2023-01-02T00:00:00Z,a,10.5\n\
             2023-01-02T00:00:00Z,b,20.0\n\
             2023-01-02T00:05:00Z,a,11.0\n\
             2023-01-02T00:10:00Z,b,21.0\n",
        )
        .unwrap();
        let series = read_long_csv(&path).unwrap();
        assert_eq!(series.t(), 3);
        assert_eq!(series.sensor_ids, vec!["a", "b"]);
        assert_eq!(series.at(0, 0, 0), 10.5);
        assert_eq!(series.at(1, 0, 0), 11.0);
        assert!(series.at(1, 1, 0).is_nan(), "gap must be missing");
        assert_eq!(series.at(2, 1, 0), 21.0);
    }

    #[test]
    fn long_form_csv_rejects_off_grid_timestamp() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("long.csv");
        std::fs::write(
            &path,
            "timestamp,sensor_id,flow\n\
             2023-01-02T00:00:00Z,a,1.0\n\
             2023-01-02T00:03:21Z,a,2.0\n",
        )
        .unwrap();
        let msg = read_long_csv(&path).unwrap_err().to_string();
        assert!(msg.contains("grid"), "got: {msg}");
    }

    #[test]
    fn params_container_round_trip_preserves_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let mut ps = ParamStore::new();
        ps.insert("z.w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        ps.insert("a.b", Tensor::new(vec![3], vec![-1.0, 0.5, 2.25]).unwrap());
        write_params(&path, &ps).unwrap();
        let back = read_params(&path).unwrap();
        let names: Vec<&str> = back.names().collect();
        assert_eq!(names, vec!["z.w", "a.b"]);
        assert_eq!(back.get("a.b").unwrap().data(), &[-1.0, 0.5, 2.25]);
        assert_eq!(back.get("z.w").unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn params_writes_are_deterministic() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::new(vec![2], vec![0.123456789, -9.87]).unwrap());
        write_params(&p1, &ps).unwrap();
        write_params(&p2, &ps).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mean_std_fit_ignores_nan_and_degenerate_spread() {
        let ms = MeanStd::fit([2.0, f64::NAN, 4.0].into_iter());
        assert_eq!(ms.mean, 3.0);
        assert_eq!(ms.std, 1.0); // population std of {2,4} is 1
        let flat = MeanStd::fit([5.0, 5.0].into_iter());
        assert_eq!(flat.std, 1.0);
        assert_eq!(flat.standardize(5.0), 0.0);
        assert_eq!(flat.destandardize(0.0), 5.0);
    }

    #[test]
    fn metrics_csv_has_contract_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(
            &path,
            &[MetricsRow {
                variant: "full".to_string(),
                horizon: "3".to_string(),
                mae: 1.0,
                rmse: 2.0,
                mape: 3.0,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("variant,horizon,mae,rmse,mape\n"));
        assert!(text.contains("full,3,1.000000,2.000000,3.000000"));
    }
}

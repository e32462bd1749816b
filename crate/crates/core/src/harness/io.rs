//! Readers and writers for every artifact the pipeline exchanges:
//! position labels (CSV), channel measurements (flat binary + JSON
//! sidecar), feature matrices (CSV), scalers and GP models (JSON), track
//! logs and prediction fields (CSV).
//!
//! All floats are written in shortest-roundtrip decimal form, so reading a
//! file back reproduces the exact values and equal inputs produce
//! byte-identical files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{Cir, DatasetRecord};
use crate::features::{FeatureId, ScalerParams, PROPAGATION_FEATURES};
use crate::geom::Pose;
use crate::gpr::GridPoint;
use crate::harness::HarnessError;

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), source: e }
}

fn parse_err(path: &Path, message: impl Into<String>) -> HarnessError {
    HarnessError::Parse { path: path.display().to_string(), message: message.into() }
}

// --- positions ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PositionRow {
    k: usize,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

pub fn write_positions_csv(path: &Path, poses: &[Pose]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    for p in poses {
        w.serialize(PositionRow { k: p.timestep, x: p.x, y: p.y, vx: p.vx, vy: p.vy })
            .map_err(|e| parse_err(path, e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_positions_csv(path: &Path) -> Result<Vec<Pose>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    let mut poses = Vec::new();
    for row in r.deserialize() {
        let row: PositionRow = row.map_err(|e| parse_err(path, e.to_string()))?;
        poses.push(Pose { timestep: row.k, x: row.x, y: row.y, vx: row.vx, vy: row.vy });
    }
    Ok(poses)
}

// --- channel measurements -----------------------------------------------

/// Sidecar describing a flat binary measurement file: `length` samples per
/// response, `anchors` responses per timestep, `count` responses total,
/// stored timestep-major as little-endian f32 (re, im) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmMeta {
    pub length: usize,
    pub anchors: usize,
    pub count: usize,
    pub sample_interval: f64,
    pub seed: u64,
}

pub fn write_cm_dataset(
    bin_path: &Path,
    meta_path: &Path,
    records: &[DatasetRecord],
    sample_interval: f64,
    seed: u64,
) -> Result<CmMeta, HarnessError> {
    let anchors = records.first().map_or(0, |r| r.measurements.len());
    let length = records
        .first()
        .and_then(|r| r.measurements.first())
        .map_or(0, |c| c.samples.len());
    let mut buf = Vec::with_capacity(records.len() * anchors * length * 8);
    for rec in records {
        if rec.measurements.len() != anchors {
            return Err(parse_err(bin_path, "ragged anchor count across records"));
        }
        for cir in &rec.measurements {
            if cir.samples.len() != length {
                return Err(parse_err(bin_path, "ragged sample count across responses"));
            }
            for s in &cir.samples {
                buf.extend_from_slice(&(s.re as f32).to_le_bytes());
                buf.extend_from_slice(&(s.im as f32).to_le_bytes());
            }
        }
    }
    std::fs::File::create(bin_path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| io_err(bin_path, e))?;
    let meta = CmMeta {
        length,
        anchors,
        count: records.len() * anchors,
        sample_interval,
        seed,
    };
    write_json(meta_path, &meta)?;
    Ok(meta)
}

/// Reads measurements back grouped per timestep. Timestep and anchor ids
/// are reassigned from file order.
pub fn read_cm_dataset(
    bin_path: &Path,
    meta_path: &Path,
) -> Result<(Vec<Vec<Cir>>, CmMeta), HarnessError> {
    let meta: CmMeta = read_json(meta_path)?;
    if meta.anchors == 0 || meta.length == 0 || meta.count % meta.anchors != 0 {
        return Err(parse_err(meta_path, format!("inconsistent sidecar {meta:?}")));
    }
    let mut buf = Vec::new();
    std::fs::File::open(bin_path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| io_err(bin_path, e))?;
    let expect = meta.count * meta.length * 8;
    if buf.len() != expect {
        return Err(parse_err(
            bin_path,
            format!("file holds {} bytes, sidecar implies {expect}", buf.len()),
        ));
    }
    let timesteps = meta.count / meta.anchors;
    let mut out = Vec::with_capacity(timesteps);
    let mut off = 0;
    for k in 0..timesteps {
        let mut per_anchor = Vec::with_capacity(meta.anchors);
        for j in 0..meta.anchors {
            let mut samples = Vec::with_capacity(meta.length);
            for _ in 0..meta.length {
                let re = f32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
                let im = f32::from_le_bytes(buf[off + 4..off + 8].try_into().unwrap());
                samples.push(Complex64::new(re as f64, im as f64));
                off += 8;
            }
            per_anchor.push(Cir { samples, anchor_id: j, timestep: k });
        }
        out.push(per_anchor);
    }
    Ok((out, meta))
}

// --- feature matrices ---------------------------------------------------

/// One (timestep, anchor) feature record in raw (unscaled) units.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub k: usize,
    pub anchor_id: usize,
    pub eps0: bool,
    pub beta0: f64,
    /// LOS range estimate in meters; absent for NLOS rows.
    pub range: Option<f64>,
    /// Values in canonical column order: propagation features, then latents.
    pub values: Vec<(FeatureId, f64)>,
}

/// Canonical value-column order: the eight propagation features followed
/// by `ae0..ae{latent_dim-1}`.
pub fn feature_columns(latent_dim: usize) -> Vec<FeatureId> {
    let mut cols = PROPAGATION_FEATURES.to_vec();
    for i in 0..latent_dim {
        cols.push(FeatureId::Latent(i as u8));
    }
    cols
}

pub fn write_features_csv(
    path: &Path,
    rows: &[FeatureRow],
    latent_dim: usize,
) -> Result<(), HarnessError> {
    let cols = feature_columns(latent_dim);
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    let mut header = vec![
        "k".to_string(),
        "anchor_id".to_string(),
        "eps0".to_string(),
        "beta0".to_string(),
        "range".to_string(),
    ];
    header.extend(cols.iter().map(|c| c.to_string()));
    w.write_record(&header).map_err(|e| parse_err(path, e.to_string()))?;
    for row in rows {
        let mut rec = vec![
            row.k.to_string(),
            row.anchor_id.to_string(),
            u8::from(row.eps0).to_string(),
            row.beta0.to_string(),
            row.range.map_or_else(String::new, |r| r.to_string()),
        ];
        for col in &cols {
            let v = row
                .values
                .iter()
                .find(|(id, _)| id == col)
                .map(|(_, v)| *v)
                .ok_or_else(|| parse_err(path, format!("row k={} misses column {col}", row.k)))?;
            rec.push(v.to_string());
        }
        w.write_record(&rec).map_err(|e| parse_err(path, e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    let header = r.headers().map_err(|e| parse_err(path, e.to_string()))?.clone();
    let fixed = ["k", "anchor_id", "eps0", "beta0", "range"];
    if header.len() < fixed.len() || header.iter().take(5).ne(fixed) {
        return Err(parse_err(path, format!("unexpected header {header:?}")));
    }
    let cols: Vec<FeatureId> = header
        .iter()
        .skip(fixed.len())
        .map(|name| {
            name.parse::<FeatureId>()
                .map_err(|_| parse_err(path, format!("unknown feature column {name:?}")))
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| parse_err(path, e.to_string()))?;
        let field = |i: usize| -> Result<&str, HarnessError> {
            record.get(i).ok_or_else(|| parse_err(path, "short record"))
        };
        let parse_f = |s: &str| -> Result<f64, HarnessError> {
            s.parse().map_err(|_| parse_err(path, format!("bad float {s:?}")))
        };
        let range_field = field(4)?;
        let mut values = Vec::with_capacity(cols.len());
        for (i, col) in cols.iter().enumerate() {
            values.push((*col, parse_f(field(5 + i)?)?));
        }
        rows.push(FeatureRow {
            k: field(0)?.parse().map_err(|_| parse_err(path, "bad timestep"))?,
            anchor_id: field(1)?.parse().map_err(|_| parse_err(path, "bad anchor id"))?,
            eps0: field(2)? == "1",
            beta0: parse_f(field(3)?)?,
            range: if range_field.is_empty() { None } else { Some(parse_f(range_field)?) },
            values,
        });
    }
    Ok(rows)
}

// --- scalers and models -------------------------------------------------

/// Stable string key for a (anchor, feature) pair: `"<anchor>:<feature>"`.
pub fn scaler_key(anchor_id: usize, feature: FeatureId) -> String {
    format!("{anchor_id}:{feature}")
}

pub fn parse_scaler_key(key: &str) -> Result<(usize, FeatureId), HarnessError> {
    let (a, f) = key.split_once(':').ok_or_else(|| {
        HarnessError::Config(format!("scaler key {key:?} is not anchor:feature"))
    })?;
    let anchor = a
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad anchor in scaler key {key:?}")))?;
    let feature = f
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad feature in scaler key {key:?}")))?;
    Ok((anchor, feature))
}

pub fn write_scalers_json(
    path: &Path,
    scalers: &BTreeMap<(usize, FeatureId), ScalerParams>,
) -> Result<(), HarnessError> {
    let map: BTreeMap<String, ScalerParams> =
        scalers.iter().map(|(&(a, f), s)| (scaler_key(a, f), *s)).collect();
    write_json(path, &map)
}

pub fn read_scalers_json(
    path: &Path,
) -> Result<BTreeMap<(usize, FeatureId), ScalerParams>, HarnessError> {
    let map: BTreeMap<String, ScalerParams> = read_json(path)?;
    map.into_iter()
        .map(|(k, v)| parse_scaler_key(&k).map(|key| (key, v)))
        .collect()
}

/// File name for one GP model: `gp_a<anchor>_<feature>.json`.
pub fn gp_model_filename(anchor_id: usize, feature: FeatureId) -> String {
    format!("gp_a{anchor_id}_{feature}.json")
}

// --- track logs ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub k: usize,
    pub est_x: f64,
    pub est_y: f64,
    pub true_x: f64,
    pub true_y: f64,
    pub ape: f64,
    pub n_los_anchors: usize,
    pub coasting_flag: u8,
}

pub fn write_track_csv(path: &Path, rows: &[TrackRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| parse_err(path, e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_track_csv(path: &Path) -> Result<Vec<TrackRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| parse_err(path, e.to_string())))
        .collect()
}

// --- prediction fields --------------------------------------------------

/// Writes a prediction field as `x,y,mu,sigma`; with `fp_flags` an extra
/// `fingerprint` 0/1 column marks grid cells nearest to a training point.
pub fn write_grid_csv(
    path: &Path,
    grid: &[GridPoint],
    fp_flags: Option<&[bool]>,
) -> Result<(), HarnessError> {
    if let Some(flags) = fp_flags {
        if flags.len() != grid.len() {
            return Err(parse_err(path, "flag count differs from grid size"));
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    let mut header = vec!["x", "y", "mu", "sigma"];
    if fp_flags.is_some() {
        header.push("fingerprint");
    }
    w.write_record(&header).map_err(|e| parse_err(path, e.to_string()))?;
    for (i, cell) in grid.iter().enumerate() {
        let mut rec = vec![
            cell.x.to_string(),
            cell.y.to_string(),
            cell.mu.to_string(),
            cell.sigma.to_string(),
        ];
        if let Some(flags) = fp_flags {
            rec.push(u8::from(flags[i]).to_string());
        }
        w.write_record(&rec).map_err(|e| parse_err(path, e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

// --- generic JSON -------------------------------------------------------

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| parse_err(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

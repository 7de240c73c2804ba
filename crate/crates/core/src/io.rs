//! File formats: raw volumes with JSON sidecars, echo-series and field
//! manifests, run configuration, reports, metric tables and PGM slice renders.
//!
//! A volume `name` is stored as two files:
//!
//! * `name.json`: header with `format`, `dims`, `voxel_size_mm`, `unit`,
//!   `dtype` and optional `orientation` and `description`
//! * `name.raw`: payload in x-fastest order (`x + nx * (y + ny * z)`),
//!   little-endian. `f32le` is one IEEE-754 binary32 per voxel, `cf32le` is
//!   an interleaved (re, im) binary32 pair, `u8` is one byte (0 or 1) per voxel.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::echo::{AcquisitionParams, EchoSeries};
use crate::error::{Error, Result};
use crate::inversion::InversionParams;
use crate::phantom::PhantomSpec;
use crate::separation::GeneralParams;
use crate::studies::{StudyId, StudyOutput, StudyReport, StudySections};
use crate::volume::{Axis, ComplexVolume, GridSpec, Mask, Orientation, ScalarVolume, Unit};

pub const VOLUME_FORMAT: &str = "chisep-volume/1";
pub const ECHO_FORMAT: &str = "chisep-echoes/1";
pub const FIELD_SET_FORMAT: &str = "chisep-fields/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32le,
    Cf32le,
    U8,
}

impl Dtype {
    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Dtype::F32le => 4,
            Dtype::Cf32le => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub format: String,
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub unit: Unit,
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<Orientation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl VolumeHeader {
    pub fn new(grid: &GridSpec, unit: Unit, dtype: Dtype) -> Self {
        VolumeHeader {
            format: VOLUME_FORMAT.to_string(),
            dims: grid.dims,
            voxel_size_mm: grid.voxel_size,
            unit,
            dtype,
            orientation: None,
            description: None,
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.dims, self.voxel_size_mm)
    }
}

/// Header and payload paths for a volume given either file or the bare stem.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json" | "raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("json"), with("raw"))
}

/// Write via a temporary file in the destination directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

fn write_header_and_payload(path: &Path, header: &VolumeHeader, payload: &[u8]) -> Result<()> {
    let (h, p) = volume_paths(path);
    write_atomic(&p, payload)?;
    write_json(&h, header)
}

fn read_header_and_payload(path: &Path, expect: &[Dtype]) -> Result<(VolumeHeader, Vec<u8>)> {
    let (h, p) = volume_paths(path);
    let header: VolumeHeader = read_json(&h)?;
    if header.format != VOLUME_FORMAT {
        return Err(Error::format(&h, format!("bad magic {:?}, expected {VOLUME_FORMAT:?}", header.format)));
    }
    if !expect.contains(&header.dtype) {
        return Err(Error::format(&h, format!("dtype {:?} is not one of {expect:?}", header.dtype)));
    }
    let grid = header.grid().map_err(|e| Error::format(&h, e.to_string()))?;
    let payload = read_bytes(&p)?;
    let expected = grid.len() * header.dtype.bytes_per_voxel();
    if payload.len() != expected {
        return Err(Error::SizeMismatch { path: p, expected, actual: payload.len() });
    }
    Ok((header, payload))
}

pub fn encode_f32(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn decode_f32(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    bytes
        .chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(Error::format(path, format!("non-finite value at voxel {i}")))
            }
        })
        .collect()
}

pub fn write_volume(path: &Path, v: &ScalarVolume, orientation: Option<Orientation>, description: Option<&str>) -> Result<()> {
    let mut header = VolumeHeader::new(v.grid(), v.unit(), Dtype::F32le);
    header.orientation = orientation;
    header.description = description.map(str::to_string);
    write_header_and_payload(path, &header, &encode_f32(v.data()))
}

pub fn read_volume(path: &Path) -> Result<(ScalarVolume, VolumeHeader)> {
    let (header, payload) = read_header_and_payload(path, &[Dtype::F32le])?;
    let data = decode_f32(&volume_paths(path).1, &payload)?;
    Ok((ScalarVolume::new(header.grid()?, header.unit, data)?, header))
}

pub fn write_mask(path: &Path, m: &Mask, description: Option<&str>) -> Result<()> {
    let mut header = VolumeHeader::new(m.grid(), Unit::Dimensionless, Dtype::U8);
    header.description = description.map(str::to_string);
    let payload: Vec<u8> = m.data().iter().map(|&b| b as u8).collect();
    write_header_and_payload(path, &header, &payload)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let (header, payload) = read_header_and_payload(path, &[Dtype::U8])?;
    let raw = volume_paths(path).1;
    let data = payload
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::format(&raw, format!("mask value {b} at voxel {i}, expected 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::new(header.grid()?, data)
}

pub fn write_complex(path: &Path, v: &ComplexVolume, description: Option<&str>) -> Result<()> {
    let mut header = VolumeHeader::new(v.grid(), Unit::Dimensionless, Dtype::Cf32le);
    header.description = description.map(str::to_string);
    let payload: Vec<u8> = v
        .data()
        .iter()
        .flat_map(|c| {
            let mut b = [0u8; 8];
            b[..4].copy_from_slice(&(c.re as f32).to_le_bytes());
            b[4..].copy_from_slice(&(c.im as f32).to_le_bytes());
            b
        })
        .collect();
    write_header_and_payload(path, &header, &payload)
}

pub fn read_complex(path: &Path) -> Result<ComplexVolume> {
    let (header, payload) = read_header_and_payload(path, &[Dtype::Cf32le])?;
    let parts = decode_f32(&volume_paths(path).1, &payload)?;
    let data = parts.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
    ComplexVolume::new(header.grid()?, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoManifest {
    pub format: String,
    pub te_ms: Vec<f64>,
    /// Echo volumes relative to the manifest directory.
    pub echoes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_snr_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquisition: Option<AcquisitionParams>,
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Writes `echo_NNN.{json,raw}` and `manifest.json` into `dir`; returns the manifest path.
pub fn write_echo_series(dir: &Path, e: &EchoSeries) -> Result<PathBuf> {
    let mut echoes = Vec::new();
    for (k, (v, te)) in e.volumes.iter().zip(&e.te_ms).enumerate() {
        let name = format!("echo_{k:03}");
        write_complex(&dir.join(&name), v, Some(&format!("TE {te} ms")))?;
        echoes.push(format!("{name}.json"));
    }
    let low_snr_mask = match &e.low_snr {
        Some(m) => {
            write_mask(&dir.join("low_snr"), m, Some("voxels zeroed by reference division"))?;
            Some("low_snr.json".to_string())
        }
        None => None,
    };
    let manifest = EchoManifest {
        format: ECHO_FORMAT.to_string(),
        te_ms: e.te_ms.clone(),
        echoes,
        low_snr_mask,
        acquisition: e.params.clone(),
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn read_echo_series(manifest: &Path) -> Result<EchoSeries> {
    let m: EchoManifest = read_json(manifest)?;
    if m.format != ECHO_FORMAT {
        return Err(Error::format(manifest, format!("bad magic {:?}, expected {ECHO_FORMAT:?}", m.format)));
    }
    let base = base_dir(manifest);
    let volumes = m.echoes.iter().map(|f| read_complex(&base.join(f))).collect::<Result<Vec<_>>>()?;
    let mut series = EchoSeries::new(m.te_ms, volumes)?;
    series.params = m.acquisition;
    series.low_snr = m.low_snr_mask.map(|f| read_mask(&base.join(f))).transpose()?;
    Ok(series)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldEntry {
    pub orientation: Orientation,
    pub file: String,
}

/// A set of total-field maps with their B0 orientations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldManifest {
    pub format: String,
    pub fields: Vec<FieldEntry>,
}

impl FieldManifest {
    pub fn new(fields: Vec<FieldEntry>) -> Self {
        FieldManifest { format: FIELD_SET_FORMAT.to_string(), fields }
    }
}

pub fn write_field_manifest(path: &Path, m: &FieldManifest) -> Result<()> {
    write_json(path, m)
}

/// Reads every listed field; returns `(orientation, field)` pairs.
pub fn read_field_manifest(path: &Path) -> Result<Vec<(Orientation, ScalarVolume)>> {
    let m: FieldManifest = read_json(path)?;
    if m.format != FIELD_SET_FORMAT {
        return Err(Error::format(path, format!("bad magic {:?}, expected {FIELD_SET_FORMAT:?}", m.format)));
    }
    let base = base_dir(path);
    m.fields.iter().map(|e| Ok((e.orientation, read_volume(&base.join(&e.file))?.0))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationMethodChoice {
    Orthogonal,
    General,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparationConfig {
    pub method: SeparationMethodChoice,
    pub orthogonality_tolerance_deg: f64,
    pub general: GeneralParams,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            method: SeparationMethodChoice::Orthogonal,
            orthogonality_tolerance_deg: crate::separation::ORTHOGONALITY_TOLERANCE_DEG,
            general: GeneralParams::default(),
        }
    }
}

/// Top-level run configuration. Unknown keys are rejected at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub study: Option<StudyId>,
    pub output_dir: Option<PathBuf>,
    pub phantom: Option<PhantomSpec>,
    pub acquisition: Option<AcquisitionParams>,
    pub separation: SeparationConfig,
    pub inversion: InversionParams,
    pub studies: StudySections,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.phantom {
            p.grid.validate()?;
        }
        if let Some(a) = &self.acquisition {
            a.validate()?;
        }
        self.inversion.validate()?;
        let s = &self.separation;
        if !(s.orthogonality_tolerance_deg >= 0.0 && s.general.reg_epsilon >= 0.0 && s.general.singular_value_floor >= 0.0) {
            return Err(Error::Config(format!("separation parameters must be non-negative: {s:?}")));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    c.validate()?;
    Ok(c)
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// SHA-256 of the compact JSON encoding (keys sorted).
pub fn config_hash(value: &serde_json::Value) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

pub fn write_report(path: &Path, r: &StudyReport) -> Result<()> {
    write_json(path, r)
}

pub fn read_report(path: &Path) -> Result<StudyReport> {
    read_json(path)
}

/// One row per metric: name, value, check, provenance, pass.
pub fn metrics_csv(r: &StudyReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["name", "value", "check", "provenance", "pass"])?;
    for m in &r.metrics {
        let pass = match m.pass {
            Some(true) => "pass",
            Some(false) => "fail",
            None => "",
        };
        let prov = serde_json::to_value(m.provenance)?;
        w.write_record([
            m.name.as_str(),
            &format!("{:e}", m.value),
            &m.check.to_string(),
            prov.as_str().unwrap_or_default(),
            pass,
        ])?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn write_metrics_csv(path: &Path, r: &StudyReport) -> Result<()> {
    write_atomic(path, &metrics_csv(r)?)
}

/// Writes `report.json`, `metrics.csv`, every volume under `volumes/` and a
/// central axial render of each under `renders/`. Artifact paths (relative to
/// `dir`) are recorded in the report before it is written.
pub fn write_study_output(dir: &Path, out: &mut StudyOutput) -> Result<()> {
    let mut artifacts = Vec::new();
    for (name, v) in &out.volumes {
        write_volume(&dir.join("volumes").join(name), v, None, Some(name))?;
        let slice = v.grid().dims[2] / 2;
        write_atomic(&dir.join("renders").join(format!("{name}.pgm")), &render_pgm(v, Axis::Z, slice, None)?)?;
        artifacts.extend([format!("volumes/{name}.json"), format!("volumes/{name}.raw"), format!("renders/{name}.pgm")]);
    }
    artifacts.push("metrics.csv".to_string());
    out.report.artifacts = artifacts;
    write_metrics_csv(&dir.join("metrics.csv"), &out.report)?;
    write_report(&dir.join("report.json"), &out.report)
}

/// 8-bit binary PGM of one slice perpendicular to `axis`. Values map
/// linearly from `window` (default: slice min/max) onto 0..=255; a flat
/// slice without a window renders mid-gray.
pub fn render_pgm(v: &ScalarVolume, axis: Axis, slice: usize, window: Option<(f64, f64)>) -> Result<Vec<u8>> {
    let grid = v.grid();
    let depth = grid.dims[axis.index()];
    if slice >= depth {
        return Err(Error::InvalidArgument(format!("slice {slice} out of range 0..{depth} along {axis}")));
    }
    let (a, b) = axis.plane();
    let (w, h) = (grid.dims[a.index()], grid.dims[b.index()]);
    let mut values = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let mut c = [0usize; 3];
            c[axis.index()] = slice;
            c[a.index()] = col;
            c[b.index()] = row;
            values.push(v.get(c[0], c[1], c[2]));
        }
    }
    let (lo, hi) = match window {
        Some((lo, hi)) => {
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(Error::InvalidArgument(format!("window must satisfy lo < hi, got {lo},{hi}")));
            }
            (lo, hi)
        }
        None => values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &x| (l.min(x), u.max(x))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(
        |&x| {
            if hi > lo {
                (255.0 * ((x - lo) / (hi - lo)).clamp(0.0, 1.0)).round() as u8
            } else {
                128
            }
        },
    ));
    Ok(out)
}

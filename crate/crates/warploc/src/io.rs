//! Dataset manifests, model checkpoints, run configuration, PNG images,
//! and the warp visualization panel.
//!
//! Manifests are JSON-Lines with one record per image; coordinates are
//! unified to planar meters at load time (geographic input is converted by a
//! local equirectangular projection about the dataset centroid, so all
//! downstream thresholds are metric). Checkpoints are a self-describing
//! binary container with a JSON tensor table; the save/load round trip is
//! bit-exact. All file writes go through write-temp-then-rename.

use std::fs;
use std::path::{Path, PathBuf};

use image::ImageEncoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{from_normalized, warp_image, GeometryError};
use crate::regressor::WarpPrediction;
use crate::retrieval::{GeoImage, Position, EARTH_RADIUS_M};
use crate::tensor::{Dtype, ParameterSet, Scalar, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GWCK";
pub const CHECKPOINT_VERSION: u16 = 1;
/// Pixel gap between panels of the visualization grid.
pub const VIZ_GUTTER: usize = 8;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("manifest mixes planar and geographic records")]
    MixedCoordinateKinds,
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u16),
    #[error("corrupt checkpoint offsets: {0}")]
    CorruptOffsets(String),
    #[error("duplicate tensor name in checkpoint: {0}")]
    TensorNameCollision(String),
    #[error("checkpoint payload is {got}, loader expects {want}")]
    DtypeMismatch { want: Dtype, got: Dtype },
    #[error("line {line}: unknown config key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("failed to write {path}: {msg}")]
    WriteError { path: PathBuf, msg: String },
    #[error("image decode failed for {path}: {msg}")]
    BadImage { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Writes bytes via a sibling temp file and an atomic rename, so readers
/// never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{stem}.tmp{}", std::process::id()));
    let write = |p: &Path, b: &[u8]| -> Result<(), IoError> {
        fs::write(p, b).map_err(|e| IoError::WriteError {
            path: p.to_path_buf(),
            msg: e.to_string(),
        })
    };
    write(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| IoError::WriteError {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainQuery,
    TrainGallery,
    TestQuery,
    TestGallery,
}

/// One manifest line. A record carries exactly one coordinate kind:
/// planar meters (`x_m`/`y_m`) or geographic degrees (`lat`/`lon`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    pub split: Split,
}

enum CoordKind {
    Planar,
    Geographic,
}

impl ManifestRecord {
    fn coord_kind(&self, line: usize) -> Result<CoordKind, IoError> {
        let planar = (self.x_m.is_some(), self.y_m.is_some());
        let geo = (self.lat.is_some(), self.lon.is_some());
        match (planar, geo) {
            ((true, true), (false, false)) => Ok(CoordKind::Planar),
            ((false, false), (true, true)) => Ok(CoordKind::Geographic),
            _ => Err(IoError::ParseError {
                line,
                msg: format!(
                    "record `{}` must carry exactly one coordinate kind \
                     (x_m/y_m or lat/lon)",
                    self.path
                ),
            }),
        }
    }
}

/// Parses a JSON-Lines manifest into records, validating each record's
/// coordinate kind. Blank lines are skipped.
pub fn read_manifest_records(path: &Path) -> Result<Vec<ManifestRecord>, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(raw).map_err(|e| IoError::ParseError {
                line,
                msg: e.to_string(),
            })?;
        rec.coord_kind(line)?;
        out.push(rec);
    }
    Ok(out)
}

/// Serializes records as JSON-Lines, one record per line, atomically.
pub fn write_manifest_records(path: &Path, records: &[ManifestRecord]) -> Result<(), IoError> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("manifest record serializes"));
        buf.push('\n');
    }
    atomic_write(path, buf.as_bytes())
}

/// In-memory dataset grouped by split, all coordinates in planar meters.
#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar> {
    pub train_queries: Vec<GeoImage<S>>,
    pub train_gallery: Vec<GeoImage<S>>,
    pub test_queries: Vec<GeoImage<S>>,
    pub test_gallery: Vec<GeoImage<S>>,
}

impl<S: Scalar> Default for Dataset<S> {
    fn default() -> Self {
        Self {
            train_queries: Vec::new(),
            train_gallery: Vec::new(),
            test_queries: Vec::new(),
            test_gallery: Vec::new(),
        }
    }
}

impl<S: Scalar> Dataset<S> {
    pub fn total(&self) -> usize {
        self.train_queries.len()
            + self.train_gallery.len()
            + self.test_queries.len()
            + self.test_gallery.len()
    }
}

/// Loads a manifest and its images. Geographic records are converted to
/// planar meters by a local equirectangular projection about the dataset
/// centroid; mixing coordinate kinds across records is an error. Image
/// paths are resolved relative to the manifest's directory and must exist.
pub fn load_manifest<S: Scalar>(path: &Path) -> Result<Dataset<S>, IoError> {
    let records = read_manifest_records(path)?;
    let mut dataset = Dataset::default();
    if records.is_empty() {
        return Ok(dataset);
    }

    let mut kinds = records.iter().enumerate().map(|(i, r)| {
        r.coord_kind(i + 1).expect("validated during read")
    });
    let geographic = matches!(kinds.next().expect("non-empty"), CoordKind::Geographic);
    if kinds.any(|k| matches!(k, CoordKind::Geographic) != geographic) {
        return Err(IoError::MixedCoordinateKinds);
    }

    // centroid of geographic records, for the local projection
    let (mut lat0, mut lon0) = (0.0f64, 0.0f64);
    if geographic {
        for r in &records {
            lat0 += r.lat.expect("geographic record");
            lon0 += r.lon.expect("geographic record");
        }
        lat0 /= records.len() as f64;
        lon0 /= records.len() as f64;
    }
    let cos_lat0 = lat0.to_radians().cos();

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    for r in &records {
        let img_path = dir.join(&r.path);
        if !img_path.exists() {
            return Err(IoError::MissingFile(img_path));
        }
        let image = read_png::<S>(&img_path)?;
        let pos = if geographic {
            Position::Planar {
                x: EARTH_RADIUS_M
                    * (r.lon.expect("geographic") - lon0).to_radians()
                    * cos_lat0,
                y: EARTH_RADIUS_M * (r.lat.expect("geographic") - lat0).to_radians(),
            }
        } else {
            Position::Planar {
                x: r.x_m.expect("planar record"),
                y: r.y_m.expect("planar record"),
            }
        };
        let geo = GeoImage {
            id: r.path.clone(),
            image,
            pos,
        };
        match r.split {
            Split::TrainQuery => dataset.train_queries.push(geo),
            Split::TrainGallery => dataset.train_gallery.push(geo),
            Split::TestQuery => dataset.test_queries.push(geo),
            Split::TestGallery => dataset.test_gallery.push(geo),
        }
    }
    Ok(dataset)
}

// -------------------------------------------------------------------- png

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a [3,H,W] tensor with values in [0,1] as an 8-bit RGB PNG.
pub fn write_png<S: Scalar>(img: &Tensor<S>, path: &Path) -> Result<(), IoError> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(TensorError::ShapeMismatch(format!(
            "write_png: want [3,H,W], got {shape:?}"
        ))
        .into());
    }
    let (h, w) = (shape[1], shape[2]);
    let bytes = rgb_bytes(img);
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(&bytes, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| IoError::WriteError {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    atomic_write(path, &buf)
}

/// Decodes a PNG into a [3,H,W] tensor with values in [0,1].
pub fn read_png<S: Scalar>(path: &Path) -> Result<Tensor<S>, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    let rgb = image::open(path)
        .map_err(|e| IoError::BadImage {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut data = vec![S::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = S::from_f64(raw[(y * w + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

fn rgb_bytes<S: Scalar>(img: &Tensor<S>) -> Vec<u8> {
    let shape = img.shape();
    let (h, w) = (shape[1], shape[2]);
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(quantize(d[(c * h + y) * w + x].into_f64()));
            }
        }
    }
    bytes
}

// ------------------------------------------------------------- checkpoint

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_kind: String,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

/// Serializes parameters into the checkpoint container: magic, version,
/// header length, JSON tensor table, then contiguous little-endian payload
/// in parameter insertion order. The write is atomic.
pub fn save_checkpoint<S: Scalar>(
    params: &ParameterSet<S>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), IoError> {
    let mut entries = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    for (name, t) in params.iter() {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes_vec());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: S::DTYPE,
            offset,
            byte_len: payload.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        tensors: entries,
        meta: meta.clone(),
    })
    .expect("checkpoint header serializes");

    let mut bytes = Vec::with_capacity(10 + header.len() + payload.len());
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    atomic_write(path, &bytes)
}

/// Reads a checkpoint back, validating magic, version, name uniqueness,
/// dtype, and that tensor extents are in-bounds and non-overlapping.
pub fn load_checkpoint<S: Scalar>(
    path: &Path,
) -> Result<(ParameterSet<S>, CheckpointMeta), IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() < 10 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(IoError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(IoError::VersionUnsupported(version));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let payload_start = 10 + header_len;
    if payload_start > bytes.len() {
        return Err(IoError::CorruptOffsets(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[10..payload_start])
        .map_err(|e| IoError::CorruptOffsets(format!("header json: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut seen: Vec<&str> = Vec::new();
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for e in &header.tensors {
        if seen.contains(&e.name.as_str()) {
            return Err(IoError::TensorNameCollision(e.name.clone()));
        }
        seen.push(&e.name);
        if e.dtype != S::DTYPE {
            return Err(IoError::DtypeMismatch {
                want: S::DTYPE,
                got: e.dtype,
            });
        }
        let numel: u64 = e.shape.iter().map(|d| *d as u64).product();
        let want_len = numel
            .checked_mul(S::byte_width() as u64)
            .ok_or_else(|| IoError::CorruptOffsets(format!("{}: shape overflow", e.name)))?;
        if e.byte_len != want_len {
            return Err(IoError::CorruptOffsets(format!(
                "{}: byte_len {} does not match shape {:?}",
                e.name, e.byte_len, e.shape
            )));
        }
        let end = e
            .offset
            .checked_add(e.byte_len)
            .ok_or_else(|| IoError::CorruptOffsets(format!("{}: offset overflow", e.name)))?;
        if end > payload.len() as u64 {
            return Err(IoError::CorruptOffsets(format!(
                "{}: extent {}..{} exceeds payload size {}",
                e.name,
                e.offset,
                end,
                payload.len()
            )));
        }
        spans.push((e.offset, end, &e.name));
    }
    spans.sort();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(IoError::CorruptOffsets(format!(
                "tensors {} and {} overlap",
                pair[0].2, pair[1].2
            )));
        }
    }

    let mut params = ParameterSet::new();
    for e in &header.tensors {
        let (start, end) = (e.offset as usize, (e.offset + e.byte_len) as usize);
        let data: Vec<S> = payload[start..end]
            .chunks_exact(S::byte_width())
            .map(S::from_le_slice)
            .collect();
        let tensor = Tensor::new(&e.shape, data)?;
        params.insert(&e.name, tensor)?;
    }
    Ok((params, header.meta))
}

// ------------------------------------------------------------- run config

/// Plain-text key=value run configuration. Missing keys take the published
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Crop aggressiveness for self-supervised quad sampling.
    pub k: f64,
    pub lambda_ss: f64,
    pub lambda_fw: f64,
    pub lambda_cons: f64,
    /// Geographic mining radius, meters.
    pub t_geo_m: f64,
    /// Descriptor-distance mining threshold (squared L2).
    pub t_feat: f64,
    /// Shortlist length for re-ranking.
    pub shortlist_top: usize,
    /// Consistency-branch transform count (1 = identity only, 2 = + flip).
    pub n_transforms: usize,
    pub iterations: usize,
    pub batch_ss: usize,
    pub batch_ws: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global descriptor width.
    pub descriptor_dim: usize,
    /// Dense feature grid side length.
    pub feature_grid: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 0.6,
            lambda_ss: 1.0,
            lambda_fw: 10.0,
            lambda_cons: 0.1,
            t_geo_m: 25.0,
            t_feat: 1.2,
            shortlist_top: 5,
            n_transforms: 2,
            iterations: 50_000,
            batch_ss: 16,
            batch_ws: 16,
            lr: 1e-4,
            seed: 0,
            descriptor_dim: crate::encoder::FEATURE_CHANNELS,
            feature_grid: crate::encoder::FEATURE_GRID_SIZE,
        }
    }
}

impl RunConfig {
    /// Canonical text form; parsing it back reproduces the config.
    pub fn to_text(&self) -> String {
        format!(
            "k={}\nlambda_ss={}\nlambda_fw={}\nlambda_cons={}\nt_geo_m={}\nt_feat={}\n\
             shortlist_top={}\nn_transforms={}\niterations={}\nbatch_ss={}\nbatch_ws={}\n\
             lr={}\nseed={}\ndescriptor_dim={}\nfeature_grid={}\n",
            self.k,
            self.lambda_ss,
            self.lambda_fw,
            self.lambda_cons,
            self.t_geo_m,
            self.t_feat,
            self.shortlist_top,
            self.n_transforms,
            self.iterations,
            self.batch_ss,
            self.batch_ws,
            self.lr,
            self.seed,
            self.descriptor_dim,
            self.feature_grid
        )
    }

    /// SHA-256 hex of the canonical text; stored in checkpoint metadata.
    pub fn hash(&self) -> String {
        use sha2::Digest;
        let mut h = sha2::Sha256::new();
        h.update(self.to_text().as_bytes());
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_train_config(&self) -> crate::training::TrainConfig {
        let taus = match self.n_transforms {
            1 => vec![crate::training::TransformTau::Identity],
            _ => crate::training::default_taus(),
        };
        crate::training::TrainConfig {
            k: self.k,
            lambda_ss: self.lambda_ss,
            lambda_fw: self.lambda_fw,
            lambda_cons: self.lambda_cons,
            t_geo_m: self.t_geo_m,
            t_feat: self.t_feat,
            iterations: self.iterations,
            batch_ss: self.batch_ss,
            batch_ws: self.batch_ws,
            taus,
            lr: self.lr,
            seed: self.seed,
        }
    }
}

/// Parses `key=value` lines; `#` comments and blank lines are skipped.
pub fn parse_run_config(text: &str) -> Result<RunConfig, IoError> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let (key, value) = s.split_once('=').ok_or_else(|| IoError::ParseError {
            line,
            msg: format!("expected key=value, got `{s}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |msg: String| IoError::ParseError { line, msg };
        macro_rules! set {
            ($field:ident, $ty:ty) => {
                cfg.$field = value
                    .parse::<$ty>()
                    .map_err(|e| bad(format!("{key}: {e}")))?
            };
        }
        match key {
            "k" => set!(k, f64),
            "lambda_ss" => set!(lambda_ss, f64),
            "lambda_fw" => set!(lambda_fw, f64),
            "lambda_cons" => set!(lambda_cons, f64),
            "t_geo_m" => set!(t_geo_m, f64),
            "t_feat" => set!(t_feat, f64),
            "shortlist_top" => set!(shortlist_top, usize),
            "n_transforms" => {
                set!(n_transforms, usize);
                if !(1..=2).contains(&cfg.n_transforms) {
                    return Err(bad(format!(
                        "n_transforms must be 1 or 2, got {}",
                        cfg.n_transforms
                    )));
                }
            }
            "iterations" => set!(iterations, usize),
            "batch_ss" => set!(batch_ss, usize),
            "batch_ws" => set!(batch_ws, usize),
            "lr" => set!(lr, f64),
            "seed" => set!(seed, u64),
            "descriptor_dim" => set!(descriptor_dim, usize),
            "feature_grid" => set!(feature_grid, usize),
            _ => {
                return Err(IoError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
    }
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    parse_run_config(&fs::read_to_string(path)?)
}

// ----------------------------------------------------------- visualization

/// Paints one image into the canvas with its top-left corner at (y0, x0).
fn blit(canvas: &mut [u8], cw: usize, y0: usize, x0: usize, img: &[u8], h: usize, w: usize) {
    for y in 0..h {
        for x in 0..w {
            let dst = ((y0 + y) * cw + x0 + x) * 3;
            let src = (y * w + x) * 3;
            canvas[dst..dst + 3].copy_from_slice(&img[src..src + 3]);
        }
    }
}

/// Draws a line segment in panel-local continuous coordinates.
fn draw_segment(
    canvas: &mut [u8],
    cw: usize,
    ch: usize,
    y0: usize,
    x0: usize,
    a: (f64, f64),
    b: (f64, f64),
    color: [u8; 3],
) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize * 2).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        let (px, py) = ((x - 0.5).round(), (y - 0.5).round());
        if px < 0.0 || py < 0.0 {
            continue;
        }
        let (xi, yi) = (x0 + px as usize, y0 + py as usize);
        if xi >= cw || yi >= ch {
            continue;
        }
        let dst = (yi * cw + xi) * 3;
        canvas[dst..dst + 3].copy_from_slice(&color);
    }
}

/// Emits the 2x2 diagnostic panel: the two originals with their predicted
/// source quads overdrawn on top, and the rectified warps below. The canvas
/// is 2x(max input dims) per axis plus a fixed 8-px gutter; pixels are a
/// pure function of the inputs, so re-emission is byte-identical.
pub fn emit_warp_visualization<S: Scalar>(
    i_q: &Tensor<S>,
    i_p: &Tensor<S>,
    prediction: &WarpPrediction,
    out_path: &Path,
) -> Result<(), IoError> {
    for (name, img) in [("query", i_q), ("pair", i_p)] {
        let s = img.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "visualization {name} image: want [3,H,W], got {s:?}"
            ))
            .into());
        }
    }
    let (hq, wq) = (i_q.shape()[1], i_q.shape()[2]);
    let (hp, wp) = (i_p.shape()[1], i_p.shape()[2]);
    let quad_q = from_normalized(&prediction.t_q, wq as f64, hq as f64);
    let quad_p = from_normalized(&prediction.t_p, wp as f64, hp as f64);
    let warped_q = warp_image(i_q, &quad_q, (hq, wq))?;
    let warped_p = warp_image(i_p, &quad_p, (hp, wp))?;

    let (ph, pw) = (hq.max(hp), wq.max(wp));
    let (ch, cw) = (2 * ph + VIZ_GUTTER, 2 * pw + VIZ_GUTTER);
    let mut canvas = vec![24u8; ch * cw * 3];

    blit(&mut canvas, cw, 0, 0, &rgb_bytes(i_q), hq, wq);
    blit(&mut canvas, cw, 0, pw + VIZ_GUTTER, &rgb_bytes(i_p), hp, wp);
    blit(&mut canvas, cw, ph + VIZ_GUTTER, 0, &rgb_bytes(&warped_q), hq, wq);
    blit(
        &mut canvas,
        cw,
        ph + VIZ_GUTTER,
        pw + VIZ_GUTTER,
        &rgb_bytes(&warped_p),
        hp,
        wp,
    );

    const QUAD_COLOR: [u8; 3] = [255, 64, 32];
    for (quad, x_off) in [(&quad_q, 0usize), (&quad_p, pw + VIZ_GUTTER)] {
        for i in 0..4 {
            let a = quad.p[i];
            let b = quad.p[(i + 1) % 4];
            draw_segment(
                &mut canvas,
                cw,
                ch,
                0,
                x_off,
                (a.x, a.y),
                (b.x, b.y),
                QUAD_COLOR,
            );
        }
    }

    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(&canvas, cw as u32, ch as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| IoError::WriteError {
            path: out_path.to_path_buf(),
            msg: e.to_string(),
        })?;
    atomic_write(out_path, &buf)
}

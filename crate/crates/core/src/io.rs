//! On-disk formats: MOTChallenge text records, run configuration,
//! checkpoints, dataset dumps and training logs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::Annotations;
use crate::geometry::BBox;
use crate::losses::LossWeights;
use crate::matching::{GtObject, ObjectId};
use crate::model::{Model, ModelConfig, ModelError, ParamStore};
use crate::qim::LifecycleConfig;
use crate::scalar::Scalar;
use crate::simulator::{Clip, Frame, WorldConfig};
use crate::tensor::Tensor;
use crate::tracker::TrackOutput;
use crate::training::{LogRecord, TrainConfig};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {reason}: {text:?}")]
    Parse { line: usize, text: String, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `contents`, creating parent directories as needed.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), IoError> {
    let wrap = |source| IoError::File {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(wrap)?;
    }
    fs::write(path, contents).map_err(wrap)
}

// ---------------------------------------------------------------------------
// MOTChallenge records

/// One line of a MOTChallenge ground-truth or result file. Boxes are in
/// pixels, measured from the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotLine {
    pub frame: usize,
    pub id: i64,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub conf: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl MotLine {
    pub fn new(frame: usize, id: i64, left: f64, top: f64, width: f64, height: f64, conf: f64) -> Self {
        Self {
            frame,
            id,
            left,
            top,
            width,
            height,
            conf,
            x: -1.0,
            y: -1.0,
            z: -1.0,
        }
    }

    /// Converts a normalized center box to pixels on a square image.
    pub fn from_bbox<T: Scalar>(frame: usize, id: i64, bbox: &BBox<T>, conf: f64, image_size: usize) -> Self {
        let s = image_size as f64;
        let b: BBox<f64> = bbox.cast();
        Self::new(frame, id, (b.cx - b.w / 2.0) * s, (b.cy - b.h / 2.0) * s, b.w * s, b.h * s, conf)
    }

    pub fn bbox(&self, image_size: usize) -> BBox<f64> {
        let s = image_size as f64;
        BBox::new(
            (self.left + self.width / 2.0) / s,
            (self.top + self.height / 2.0) / s,
            self.width / s,
            self.height / s,
        )
    }

    /// Parses one comma-separated line. Fields after `z` are ignored and
    /// missing `x, y, z` default to -1.
    pub fn parse(text: &str, line: usize) -> Result<Self, IoError> {
        let err = |reason: String| IoError::Parse {
            line,
            text: text.to_string(),
            reason,
        };
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        if fields.len() < 7 {
            return Err(err(format!("expected at least 7 fields, found {}", fields.len())));
        }
        let real = |i: usize| -> Result<f64, IoError> {
            let v: f64 = fields[i]
                .parse()
                .map_err(|_| err(format!("field {} is not a number", i + 1)))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(format!("field {} is not finite", i + 1)))
            }
        };
        let frame: usize = fields[0].parse().map_err(|_| err("frame is not a positive integer".into()))?;
        if frame == 0 {
            return Err(err("frame numbers start at 1".into()));
        }
        let id: i64 = fields[1].parse().map_err(|_| err("id is not an integer".into()))?;
        let mut rec = Self::new(frame, id, real(2)?, real(3)?, real(4)?, real(5)?, real(6)?);
        if rec.width < 0.0 || rec.height < 0.0 {
            return Err(err("negative box extent".into()));
        }
        for (i, slot) in [&mut rec.x, &mut rec.y, &mut rec.z].into_iter().enumerate() {
            if fields.len() > 7 + i {
                *slot = real(7 + i)?;
            }
        }
        Ok(rec)
    }

    /// Every real rounded to six significant digits, as written to disk.
    pub fn rounded(&self) -> Self {
        Self {
            left: round_sig(self.left),
            top: round_sig(self.top),
            width: round_sig(self.width),
            height: round_sig(self.height),
            conf: round_sig(self.conf),
            x: round_sig(self.x),
            y: round_sig(self.y),
            z: round_sig(self.z),
            ..*self
        }
    }

    fn to_line(self) -> String {
        let r = self.rounded();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.frame, r.id, r.left, r.top, r.width, r.height, r.conf, r.x, r.y, r.z
        )
    }
}

/// Rounds to six significant decimal digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// Parses a whole file, grouping records by frame in file order. Blank
/// lines are skipped.
pub fn parse_mot(text: &str) -> Result<BTreeMap<usize, Vec<MotLine>>, IoError> {
    let mut out: BTreeMap<usize, Vec<MotLine>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = MotLine::parse(line, i + 1)?;
        out.entry(rec.frame).or_default().push(rec);
    }
    Ok(out)
}

/// Serializes records sorted by frame, then id.
pub fn write_mot(records: &[MotLine]) -> String {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| (a.frame, a.id).cmp(&(b.frame, b.id)));
    let mut s = String::new();
    for r in sorted {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

pub fn read_mot_file(path: &Path) -> Result<BTreeMap<usize, Vec<MotLine>>, IoError> {
    parse_mot(&read_text(path)?).map_err(|e| match e {
        IoError::Parse { line, text, reason } => IoError::Parse {
            line,
            text,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

/// Records with `conf > min_conf`, as normalized boxes.
pub fn mot_to_annotations(records: &BTreeMap<usize, Vec<MotLine>>, image_size: usize, min_conf: f64) -> Annotations {
    let mut a = Annotations::new();
    for (&f, recs) in records {
        for r in recs.iter().filter(|r| r.conf > min_conf) {
            a.push(f, r.id as u64, r.bbox(image_size));
        }
    }
    a
}

pub fn tracks_to_mot<T: Scalar>(tracks: &[TrackOutput<T>], image_size: usize) -> Vec<MotLine> {
    tracks
        .iter()
        .map(|t| MotLine::from_bbox(t.frame, t.track_id.0 as i64, &t.bbox, t.confidence.as_f64(), image_size))
        .collect()
}

/// Ground truth of a clip. The confidence column flags visibility: 1 for
/// visible, 0 for occluded, matching the MOTChallenge "consider" flag.
pub fn clip_to_mot<T: Scalar>(clip: &Clip<T>, image_size: usize) -> Vec<MotLine> {
    let mut out = Vec::new();
    for (i, f) in clip.frames.iter().enumerate() {
        for o in &f.objects {
            let conf = if o.visible { 1.0 } else { 0.0 };
            let mut rec = MotLine::from_bbox(i + 1, o.id.0 as i64, &o.bbox, conf, image_size);
            rec.x = o.class as f64;
            out.push(rec);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub seq_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 16,
            n_val: 4,
            seq_len: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Dataset dump to train on; generated from `world` when absent.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Everything a run needs. `seed` overrides the per-section seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub lifecycle: LifecycleConfig,
    pub eval_iou: f64,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            lifecycle: LifecycleConfig::default(),
            eval_iou: 0.5,
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let mut cfg: Self = serde_json::from_str(text)?;
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_json(&read_text(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn resolve_seeds(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.world.seed = self.seed;
    }

    /// World of the `i`-th training sequence; validation sequences follow
    /// the training ones.
    pub fn world_for(&self, i: usize) -> WorldConfig {
        WorldConfig {
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            ..self.world.clone()
        }
    }

    /// Section checks plus the constraints between sections.
    pub fn validate(&self) -> Result<(), IoError> {
        let c = IoError::Config;
        self.world.validate().map_err(|e| c(e.to_string()))?;
        self.model.validate()?;
        self.train.validate().map_err(c)?;
        self.loss.validate().map_err(c)?;
        self.lifecycle.validate().map_err(c)?;
        if self.world.max_objects > self.model.n_detect_queries {
            return Err(c(format!(
                "world.max_objects ({}) exceeds model.n_detect_queries ({})",
                self.world.max_objects, self.model.n_detect_queries
            )));
        }
        if self.world.image_size != self.model.image_size || self.world.channels != self.model.channels {
            return Err(c(format!(
                "world renders {}x{}x{} images but the model expects {}x{}x{}",
                self.world.image_size,
                self.world.image_size,
                self.world.channels,
                self.model.image_size,
                self.model.image_size,
                self.model.channels
            )));
        }
        if self.data.seq_len == 0 || self.data.n_train == 0 {
            return Err(c("data.seq_len and data.n_train must be positive".into()));
        }
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return Err(c(format!("eval_iou must lie in (0, 1], got {}", self.eval_iou)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "QTCK" | u32 version | u8 dtype | u32 len | model config json
// | u32 n_params | per param: u32 len, name, u32 ndim, u64 dims..., data
// All integers and values little-endian.

const CKPT_MAGIC: &[u8; 4] = b"QTCK";
const CKPT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| IoError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn magic(&mut self, magic: &[u8; 4], what: &str) -> Result<(), IoError> {
        if self.take(4)? != magic {
            return Err(IoError::Format(format!("not a {what} file")));
        }
        Ok(())
    }

    fn done(&self) -> Result<(), IoError> {
        if self.pos != self.bytes.len() {
            return Err(IoError::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// Values stored as either element type, converted to `T`.
fn read_values<T: Scalar>(r: &mut Reader, dtype: u8, n: usize) -> Result<Vec<T>, IoError> {
    if dtype == f32::DTYPE {
        let raw = r.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect())
    } else if dtype == f64::DTYPE {
        let raw = r.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect())
    } else {
        Err(IoError::Format(format!("unknown dtype tag {dtype}")))
    }
}

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut out, CKPT_VERSION);
    out.push(T::DTYPE);
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    put_u32(&mut out, model.params.len() as u32);
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

/// Decodes a checkpoint of either element type into `T`.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Model<T>, IoError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(CKPT_MAGIC, "checkpoint")?;
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(IoError::Format(format!("unsupported checkpoint version {version}")));
    }
    let dtype = r.u8()?;
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| IoError::Format("parameter name is not utf-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().product();
        let data = read_values(&mut r, dtype, numel)?;
        let t = Tensor::new(shape, data).map_err(|e| IoError::Format(e.to_string()))?;
        params.add(name, t);
    }
    r.done()?;
    Ok(Model::from_params(config, params)?)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<(), IoError> {
    write_file(path, encode_checkpoint(model))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>, IoError> {
    decode_checkpoint(&read_bytes(path)?)
}

// ---------------------------------------------------------------------------
// Image sequences
//
// "QTIM" | u32 version | u32 frames | u32 height | u32 width | u32 channels
// | f32 little-endian pixels, frame-major then row-major `[H, W, C]`.

const IMG_MAGIC: &[u8; 4] = b"QTIM";
const IMG_VERSION: u32 = 1;

pub fn encode_images<T: Scalar>(frames: &[Tensor<T>]) -> Result<Vec<u8>, IoError> {
    let shape = frames.first().map_or(vec![0, 0, 0], |f| f.shape().to_vec());
    if shape.len() != 3 || frames.iter().any(|f| f.shape() != shape.as_slice()) {
        return Err(IoError::Format("frames must share one [H, W, C] shape".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(IMG_MAGIC);
    put_u32(&mut out, IMG_VERSION);
    put_u32(&mut out, frames.len() as u32);
    for &d in &shape {
        put_u32(&mut out, d as u32);
    }
    for f in frames {
        for &v in f.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_images<T: Scalar>(bytes: &[u8]) -> Result<Vec<Tensor<T>>, IoError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IMG_MAGIC, "image sequence")?;
    let version = r.u32()?;
    if version != IMG_VERSION {
        return Err(IoError::Format(format!("unsupported image container version {version}")));
    }
    let n = r.u32()? as usize;
    let shape = vec![r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let numel: usize = shape.iter().product();
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let data = read_values(&mut r, f32::DTYPE, numel)?;
        frames.push(Tensor::new(shape.clone(), data).map_err(|e| IoError::Format(e.to_string()))?);
    }
    r.done()?;
    Ok(frames)
}

// ---------------------------------------------------------------------------
// Dataset dumps
//
// <dir>/config.json
// <dir>/seq_000/gt/gt.txt
// <dir>/seq_000/img.bin

pub fn sequence_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("seq_{i:03}"))
}

pub fn write_dataset<T: Scalar>(root: &Path, sequences: &[Clip<T>], cfg: &RunConfig) -> Result<(), IoError> {
    write_file(&root.join("config.json"), cfg.to_json())?;
    for (i, seq) in sequences.iter().enumerate() {
        let dir = sequence_dir(root, i);
        write_file(&dir.join("gt").join("gt.txt"), write_mot(&clip_to_mot(seq, cfg.world.image_size)))?;
        let images: Vec<Tensor<T>> = seq.frames.iter().map(|f| f.image.clone()).collect();
        write_file(&dir.join("img.bin"), encode_images(&images)?)?;
    }
    Ok(())
}

/// Sequence directories under `root`, sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>, IoError> {
    let entries = fs::read_dir(root).map_err(|source| IoError::File {
        path: root.to_path_buf(),
        source,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join("img.bin").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Rebuilds a clip from an image container and its ground truth.
pub fn read_sequence<T: Scalar>(dir: &Path, image_size: usize) -> Result<Clip<T>, IoError> {
    let images: Vec<Tensor<T>> = decode_images(&read_bytes(&dir.join("img.bin"))?)?;
    let gt_path = dir.join("gt").join("gt.txt");
    let gt = if gt_path.is_file() {
        read_mot_file(&gt_path)?
    } else {
        BTreeMap::new()
    };
    if let Some(&last) = gt.keys().next_back() {
        if last > images.len() {
            return Err(IoError::Format(format!(
                "{} refers to frame {last} of {}",
                gt_path.display(),
                images.len()
            )));
        }
    }
    let frames = images
        .into_iter()
        .enumerate()
        .map(|(i, image)| Frame {
            index: i,
            image,
            objects: gt
                .get(&(i + 1))
                .map(|recs| {
                    recs.iter()
                        .map(|r| GtObject {
                            id: ObjectId(r.id as u64),
                            class: if r.x >= 0.0 { r.x as usize } else { 0 },
                            bbox: r.bbox(image_size).cast(),
                            visible: r.conf > 0.0,
                        })
                        .collect()
                })
                .unwrap_or_default(),
        })
        .collect();
    Ok(Clip { frames })
}

pub fn read_dataset<T: Scalar>(root: &Path, image_size: usize) -> Result<Vec<Clip<T>>, IoError> {
    list_sequences(root)?.iter().map(|d| read_sequence(d, image_size)).collect()
}

// ---------------------------------------------------------------------------
// Training log

pub const LOG_HEADER: &str = "iteration,epoch,clip_len,loss,V,grad_norm";

pub fn format_log_record(r: &LogRecord) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.iteration, r.epoch, r.clip_len, r.loss, r.objects, r.grad_norm
    )
}

pub fn parse_log(text: &str) -> Result<Vec<LogRecord>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with("iteration") {
            continue;
        }
        let err = |reason: &str| IoError::Parse {
            line: i + 1,
            text: line.to_string(),
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(err("expected 6 fields"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| err("bad integer"));
        let real = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
        out.push(LogRecord {
            iteration: int(f[0])?,
            epoch: int(f[1])?,
            clip_len: int(f[2])?,
            loss: real(f[3])?,
            objects: int(f[4])?,
            grad_norm: real(f[5])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::simulate_sequence;

    #[test]
    fn parses_reference_line() {
        let r = MotLine::parse("1,3,10.5,20.0,30.0,40.0,0.9,-1,-1,-1", 1).unwrap();
        assert_eq!((r.frame, r.id), (1, 3));
        assert_eq!((r.left, r.top, r.width, r.height, r.conf), (10.5, 20.0, 30.0, 40.0, 0.9));
        assert_eq!((r.x, r.y, r.z), (-1.0, -1.0, -1.0));
    }

    #[test]
    fn short_line_names_line_number() {
        let err = parse_mot("1,2,3,4").unwrap_err();
        assert!(matches!(err, IoError::Parse { line: 1, .. }));
        assert!(err.to_string().contains("line 1"));
        let err = parse_mot("1,1,0,0,1,1,1\n\n0,1,0,0,1,1,1\n").unwrap_err();
        assert!(matches!(err, IoError::Parse { line: 3, .. }));
        assert!(parse_mot("1,1,0,0,-1,1,1").is_err());
        assert!(parse_mot("1,x,0,0,1,1,1").is_err());
    }

    #[test]
    fn trailing_fields_ignored_and_missing_defaulted() {
        let g = parse_mot("2,7,1,2,3,4,1,0,0.5,0,99,100\n2,8,1,2,3,4,0.5\n").unwrap();
        assert_eq!(g[&2].len(), 2);
        assert_eq!(g[&2][0].y, 0.5);
        assert_eq!(g[&2][1].z, -1.0);
    }

    #[test]
    fn writes_sorted_with_six_digits() {
        let recs = [
            MotLine::new(2, 1, 1.0 / 3.0, 0.0, 1.0, 1.0, 1.0),
            MotLine::new(1, 5, 1234567.0, 0.0, 1.0, 1.0, 1.0),
            MotLine::new(1, 2, 10.5, 20.0, 30.0, 40.0, 0.9),
        ];
        let s = write_mot(&recs);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "1,2,10.5,20,30,40,0.9,-1,-1,-1");
        assert_eq!(lines[1], "1,5,1234570,0,1,1,1,-1,-1,-1");
        assert_eq!(lines[2], "2,1,0.333333,0,1,1,1,-1,-1,-1");
    }

    #[test]
    fn pixel_conversion_inverts() {
        let b = BBox::new(0.25, 0.5, 0.1, 0.2);
        let r = MotLine::from_bbox(1, 1, &b, 1.0, 64);
        assert_eq!((r.left, r.top, r.width, r.height), (12.8, 25.6, 6.4, 12.8));
        let back = r.bbox(64);
        assert!((back.cx - 0.25).abs() < 1e-12 && (back.h - 0.2).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_cast() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            n_detect_queries: 3,
            image_size: 16,
            ffn_dim: 8,
            ..ModelConfig::default()
        };
        let m = Model::<f32>::new(cfg).unwrap();
        let bytes = encode_checkpoint(&m);
        let back: Model<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);
        let wide: Model<f64> = decode_checkpoint(&bytes).unwrap();
        let (_, t) = wide.params.iter().next().unwrap();
        assert_eq!(t.data()[0] as f32, m.params.iter().next().unwrap().1.data()[0]);
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint::<f32>(b"nope").is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.world.image_size = 16;
        cfg.model.image_size = 16;
        let seqs: Vec<Clip<f32>> = (0..2).map(|i| simulate_sequence(&cfg.world_for(i), 6).unwrap()).collect();
        write_dataset(dir.path(), &seqs, &cfg).unwrap();
        let back: Vec<Clip<f32>> = read_dataset(dir.path(), 16).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in seqs.iter().zip(&back) {
            assert_eq!(a.len(), b.len());
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                assert_eq!(fa.image, fb.image);
                assert_eq!(fa.objects.len(), fb.objects.len());
                for (oa, ob) in fa.objects.iter().zip(&fb.objects) {
                    assert_eq!((oa.id, oa.visible), (ob.id, ob.visible));
                    assert!((oa.bbox.cx - ob.bbox.cx).abs() < 1e-5);
                }
            }
        }
        let archived = RunConfig::load(&dir.path().join("config.json")).unwrap();
        assert_eq!(archived, cfg);
    }

    #[test]
    fn config_cross_checks() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.world.max_objects = cfg.model.n_detect_queries + 1;
        assert!(cfg.validate().unwrap_err().to_string().contains("n_detect_queries"));
        let mut cfg = RunConfig::default();
        cfg.world.image_size = 32;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let parsed = RunConfig::from_json(r#"{"seed": 7, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!((parsed.train.epochs, parsed.model.seed), (3, 7));
    }

    #[test]
    fn log_round_trip() {
        let r = LogRecord {
            iteration: 3,
            epoch: 1,
            clip_len: 2,
            loss: 0.125,
            objects: 4,
            grad_norm: 1.5,
        };
        let text = format!("{LOG_HEADER}\n{}\n", format_log_record(&r));
        assert_eq!(parse_log(&text).unwrap(), vec![r]);
        assert!(parse_log("1,2,3").is_err());
    }
}

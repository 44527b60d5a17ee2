//! Manifest format, deterministic synthetic corpus generation and frame
//! decoding.
//!
//! A corpus is a directory of lossless PNG frames plus a JSON manifest whose
//! frame paths are relative to the manifest file. The synthetic generator
//! renders a shape translating across a toroidal canvas; the motion direction
//! is the class label. Frames may carry a fading trail behind the shape, which
//! makes the direction partly visible in a single frame.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixels::{Image, CHANNELS};
use crate::rng::{self, tag};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Video,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub kind: RecordKind,
    pub frame_paths: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub height: usize,
    pub width: usize,
}

impl ClipRecord {
    pub fn num_frames(&self) -> usize {
        self.frame_paths.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<ClipRecord>,
    pub num_classes: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
    /// Directory the frame paths are relative to.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn frame_path(&self, record: &ClipRecord, t: usize) -> PathBuf {
        self.root.join(&record.frame_paths[t])
    }

    pub fn videos(&self) -> impl Iterator<Item = (usize, &ClipRecord)> {
        self.records.iter().enumerate().filter(|(_, r)| r.kind == RecordKind::Video)
    }

    pub fn images(&self) -> impl Iterator<Item = (usize, &ClipRecord)> {
        self.records.iter().enumerate().filter(|(_, r)| r.kind == RecordKind::Image)
    }

    /// Structural checks that need no file access.
    pub fn validate_structure(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            match r.kind {
                RecordKind::Image if r.frame_paths.len() != 1 => {
                    return Err(Error::Manifest(format!(
                        "image record {:?} lists {} frames",
                        r.id,
                        r.frame_paths.len()
                    )))
                }
                RecordKind::Video if r.frame_paths.is_empty() => {
                    return Err(Error::Manifest(format!("video record {:?} has no frames", r.id)))
                }
                _ => {}
            }
            if let Some(l) = r.label {
                if l >= self.num_classes {
                    return Err(Error::Manifest(format!(
                        "record {:?} label {l} outside [0, {})",
                        r.id, self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Parses and fully validates a manifest: structure, file existence, decode,
/// and per-record frame size agreement.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: Manifest = serde_json::from_str(&text)?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate_structure()?;
    for r in &manifest.records {
        for t in 0..r.num_frames() {
            let fp = manifest.frame_path(r, t);
            if !fp.exists() {
                return Err(Error::MissingFrame(fp));
            }
            let frame = decode_frame_u8(&fp)?;
            if frame.height != r.height || frame.width != r.width {
                return Err(Error::Manifest(format!(
                    "{} is {}x{} but record {:?} declares {}x{}",
                    fp.display(),
                    frame.height,
                    frame.width,
                    r.id,
                    r.height,
                    r.width
                )));
            }
        }
    }
    Ok(manifest)
}

/// Raw 8-bit RGB frame as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawFrame {
    pub height: usize,
    pub width: usize,
    pub bytes: Vec<u8>,
}

impl RawFrame {
    pub fn to_image<T: Scalar>(&self) -> Image<T> {
        Image::from_u8(self.height, self.width, &self.bytes).expect("consistent frame")
    }
}

fn decode_frame_u8(path: &Path) -> Result<RawFrame> {
    let decode_err = |msg: String| Error::Decode {
        path: path.to_path_buf(),
        msg,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(image::ImageFormat::Png) => {}
        Some(other) => return Err(decode_err(format!("unsupported format {other:?}"))),
        None => return Err(decode_err("unrecognized image format".into())),
    }
    let img = reader.decode().map_err(|e| decode_err(e.to_string()))?.to_rgb8();
    Ok(RawFrame {
        height: img.height() as usize,
        width: img.width() as usize,
        bytes: img.into_raw(),
    })
}

/// Decodes a lossless frame into `[0, 1]` RGB.
pub fn decode_frame<T: Scalar>(path: &Path) -> Result<Image<T>> {
    decode_frame_u8(path).map(|f| f.to_image())
}

/// A manifest with every frame decoded into memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    frames: Vec<Vec<RawFrame>>,
}

impl Corpus {
    pub fn open(path: &Path) -> Result<Self> {
        let manifest = load_manifest(path)?;
        Self::from_manifest(manifest)
    }

    pub fn from_manifest(manifest: Manifest) -> Result<Self> {
        let frames = manifest
            .records
            .iter()
            .map(|r| (0..r.num_frames()).map(|t| decode_frame_u8(&manifest.frame_path(r, t))).collect())
            .collect::<Result<_>>()?;
        Ok(Self { manifest, frames })
    }

    /// Builds a corpus directly from in-memory frames (no files).
    pub fn from_frames(manifest: Manifest, frames: Vec<Vec<RawFrame>>) -> Result<Self> {
        manifest.validate_structure()?;
        if frames.len() != manifest.records.len() {
            return Err(Error::Manifest("frame table does not match records".into()));
        }
        Ok(Self { manifest, frames })
    }

    pub fn records(&self) -> &[ClipRecord] {
        &self.manifest.records
    }

    pub fn raw(&self, record: usize, t: usize) -> &RawFrame {
        &self.frames[record][t]
    }

    pub fn frame<T: Scalar>(&self, record: usize, t: usize) -> Image<T> {
        self.frames[record][t].to_image()
    }

    /// Subset keeping only the listed records, in order.
    pub fn subset(&self, keep: &[usize]) -> Self {
        let mut manifest = self.manifest.clone();
        manifest.records = keep.iter().map(|&i| self.manifest.records[i].clone()).collect();
        Self {
            manifest,
            frames: keep.iter().map(|&i| self.frames[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub fn unit(self) -> (f64, f64) {
        match self {
            Self::Left => (-1.0, 0.0),
            Self::Right => (1.0, 0.0),
            Self::Up => (0.0, -1.0),
            Self::Down => (0.0, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Left => "left",
            Self::Right => "right",
            Self::Up => "up",
            Self::Down => "down",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            "up" => Ok(Self::Up),
            "down" => Ok(Self::Down),
            other => Err(Error::Config(format!("unknown motion class {other:?}"))),
        }
    }
}

/// Parameters of the synthetic moving-shape corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub num_images: usize,
    pub frames_per_video: usize,
    pub canvas: usize,
    pub patch_side: usize,
    pub motion_classes: Vec<Direction>,
    pub seed: u64,
    pub split: Split,
    /// Pixels moved per frame.
    pub speed: f64,
    /// Shapes per frame; all of a video's shapes share its motion.
    pub num_shapes: usize,
    /// Size of an evenly spaced hue palette; 0 draws hues uniformly.
    pub num_colors: usize,
    /// Probability that a shape is a wedge pointing where it moves (a random
    /// class direction for still images).
    pub heading_prob: f64,
    /// Shape side range in pixels.
    pub shape_size: (usize, usize),
    /// Probability that a frame shows the fading trail behind the shape.
    pub trail_prob: f64,
    /// Number of ghost copies in a trail.
    pub trail_len: usize,
    /// Amplitude of per-pixel background noise in `[0, 1]` units.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 64,
            num_images: 32,
            frames_per_video: 16,
            canvas: 32,
            patch_side: 8,
            motion_classes: vec![Direction::Left, Direction::Right, Direction::Up, Direction::Down],
            seed: 7,
            split: Split::Train,
            speed: 2.0,
            num_shapes: 4,
            num_colors: 0,
            heading_prob: 0.0,
            shape_size: (6, 10),
            trail_prob: 0.5,
            trail_len: 3,
            noise: 0.04,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.frames_per_video < 2 {
            errs.push(format!("frames_per_video {} < 2", self.frames_per_video));
        }
        if self.patch_side == 0 || self.canvas % self.patch_side != 0 {
            errs.push(format!(
                "canvas {} not divisible by patch side {}",
                self.canvas, self.patch_side
            ));
        }
        if self.motion_classes.is_empty() {
            errs.push("motion_classes is empty".into());
        }
        let (lo, hi) = self.shape_size;
        if lo == 0 || lo > hi || hi > self.canvas {
            errs.push(format!("shape_size ({lo}, {hi}) invalid for canvas {}", self.canvas));
        }
        if !(0.0..=1.0).contains(&self.trail_prob) {
            errs.push(format!("trail_prob {} outside [0, 1]", self.trail_prob));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            errs.push(format!("noise {} outside [0, 0.5]", self.noise));
        }
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            errs.push(format!("speed {} must be >= 0", self.speed));
        }
        if !(0.0..=1.0).contains(&self.heading_prob) {
            errs.push(format!("heading_prob {} outside [0, 1]", self.heading_prob));
        }
        if self.num_shapes == 0 {
            errs.push("num_shapes must be >= 1".into());
        }
        if self.num_videos + self.num_images == 0 {
            errs.push("corpus would be empty".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Square,
    Disk,
    Diamond,
    /// Wedge whose tip points along the unit vector.
    Wedge(f64, f64),
}

struct Sprite {
    kind: ShapeKind,
    size: f64,
    color: [f64; 3],
}

impl Sprite {
    /// A random sprite; with probability `heading_prob` it is a wedge facing
    /// `heading`.
    fn random(spec: &SynthSpec, heading: (f64, f64), rng: &mut impl Rng) -> Self {
        let kind = if rng.random::<f64>() < spec.heading_prob {
            ShapeKind::Wedge(heading.0, heading.1)
        } else {
            match rng.random_range(0..3) {
                0 => ShapeKind::Square,
                1 => ShapeKind::Disk,
                _ => ShapeKind::Diamond,
            }
        };
        let size = rng.random_range(spec.shape_size.0..=spec.shape_size.1) as f64;
        // bright, saturated colour
        let hue = if spec.num_colors > 0 {
            rng.random_range(0..spec.num_colors) as f64 * 6.0 / spec.num_colors as f64
        } else {
            rng.random::<f64>() * 6.0
        };
        let sector = hue.floor() as usize % 6;
        let f = hue - hue.floor();
        let (hi, lo) = (1.0, 0.25);
        let mid_up = lo + (hi - lo) * f;
        let mid_dn = hi - (hi - lo) * f;
        let color = match sector {
            0 => [hi, mid_up, lo],
            1 => [mid_dn, hi, lo],
            2 => [lo, hi, mid_up],
            3 => [lo, mid_dn, hi],
            4 => [mid_up, lo, hi],
            _ => [hi, lo, mid_dn],
        };
        Self { kind, size, color }
    }

    /// Coverage of the pixel at offset `(dx, dy)` from the shape centre.
    fn covers(&self, dx: f64, dy: f64) -> bool {
        let r = self.size / 2.0;
        match self.kind {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::Wedge(ux, uy) => {
                let along = dx * ux + dy * uy;
                let across = dy * ux - dx * uy;
                along.abs() <= r && across.abs() <= (r - along) / 2.0
            }
        }
    }
}

struct Canvas {
    side: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn background(side: usize, noise: f64, rng: &mut impl Rng) -> Self {
        let mut px = vec![0.1; side * side * CHANNELS];
        if noise > 0.0 {
            for v in &mut px {
                *v += (rng.random::<f64>() * 2.0 - 1.0) * noise;
            }
        }
        Self { side, px }
    }

    /// Blends the sprite centred at `(cx, cy)` with opacity `alpha`, wrapping
    /// around the edges.
    fn draw(&mut self, sprite: &Sprite, cx: f64, cy: f64, alpha: f64) {
        let s = self.side as f64;
        let r = (sprite.size / 2.0).ceil() as i64 + 1;
        let (ix, iy) = (cx.floor() as i64, cy.floor() as i64);
        for oy in -r..=r {
            for ox in -r..=r {
                let (px, py) = (ix + ox, iy + oy);
                let (dx, dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
                if !sprite.covers(dx, dy) {
                    continue;
                }
                let x = px.rem_euclid(self.side as i64) as usize;
                let y = py.rem_euclid(self.side as i64) as usize;
                let base = (y * self.side + x) * CHANNELS;
                for c in 0..CHANNELS {
                    let v = &mut self.px[base + c];
                    *v = *v * (1.0 - alpha) + sprite.color[c] * alpha;
                }
            }
        }
        let _ = s;
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.px
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

fn wrap(v: f64, side: usize) -> f64 {
    v.rem_euclid(side as f64)
}

/// Renders one video's frames and returns `(label, frames)`.
fn render_video(spec: &SynthSpec, index: usize) -> (usize, Vec<Vec<u8>>) {
    let mut rng = rng::stream(spec.seed, &[tag::CORPUS, 0, index as u64]);
    let label = rng.random_range(0..spec.motion_classes.len());
    let (ux, uy) = spec.motion_classes[label].unit();
    let sprites: Vec<(Sprite, f64, f64)> = (0..spec.num_shapes)
        .map(|_| {
            let s = Sprite::random(spec, (ux, uy), &mut rng);
            let x0 = rng.random::<f64>() * spec.canvas as f64;
            let y0 = rng.random::<f64>() * spec.canvas as f64;
            (s, x0, y0)
        })
        .collect();
    let frames = (0..spec.frames_per_video)
        .map(|t| {
            let mut canvas = Canvas::background(spec.canvas, spec.noise, &mut rng);
            let trail = rng.random::<f64>() < spec.trail_prob;
            for (sprite, x0, y0) in &sprites {
                let pos = |k: f64| {
                    (
                        wrap(x0 + ux * spec.speed * k, spec.canvas),
                        wrap(y0 + uy * spec.speed * k, spec.canvas),
                    )
                };
                if trail {
                    for g in (1..=spec.trail_len).rev() {
                        let (gx, gy) = pos(t as f64 - g as f64);
                        canvas.draw(sprite, gx, gy, 0.6f64.powi(g as i32));
                    }
                }
                let (cx, cy) = pos(t as f64);
                canvas.draw(sprite, cx, cy, 1.0);
            }
            canvas.to_bytes()
        })
        .collect();
    (label, frames)
}

fn render_image(spec: &SynthSpec, index: usize) -> Vec<u8> {
    let mut rng = rng::stream(spec.seed, &[tag::CORPUS, 1, index as u64]);
    let sprites: Vec<(Sprite, f64, f64)> = (0..spec.num_shapes)
        .map(|_| {
            let heading = spec.motion_classes[rng.random_range(0..spec.motion_classes.len())].unit();
            let s = Sprite::random(spec, heading, &mut rng);
            let cx = rng.random::<f64>() * spec.canvas as f64;
            let cy = rng.random::<f64>() * spec.canvas as f64;
            (s, cx, cy)
        })
        .collect();
    let mut canvas = Canvas::background(spec.canvas, spec.noise, &mut rng);
    for (sprite, cx, cy) in &sprites {
        canvas.draw(sprite, *cx, *cy, 1.0);
    }
    canvas.to_bytes()
}

fn write_png(path: &Path, side: usize, bytes: Vec<u8>) -> Result<()> {
    let img = image::RgbImage::from_raw(side as u32, side as u32, bytes)
        .ok_or_else(|| Error::Shape("frame buffer size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    })
}

/// Renders the corpus in memory without touching disk.
pub fn synthesize(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut records = Vec::new();
    let mut frames = Vec::new();
    for v in 0..spec.num_videos {
        let (label, video) = render_video(spec, v);
        records.push(video_record(spec, v, label));
        frames.push(
            video
                .into_iter()
                .map(|bytes| RawFrame {
                    height: spec.canvas,
                    width: spec.canvas,
                    bytes,
                })
                .collect(),
        );
    }
    for i in 0..spec.num_images {
        records.push(image_record(spec, i));
        frames.push(vec![RawFrame {
            height: spec.canvas,
            width: spec.canvas,
            bytes: render_image(spec, i),
        }]);
    }
    Corpus::from_frames(synth_manifest(spec, records), frames)
}

fn video_record(spec: &SynthSpec, v: usize, label: usize) -> ClipRecord {
    ClipRecord {
        id: format!("video_{v:05}"),
        kind: RecordKind::Video,
        frame_paths: (0..spec.frames_per_video)
            .map(|t| format!("videos/{v:05}/{t:04}.png"))
            .collect(),
        label: Some(label),
        height: spec.canvas,
        width: spec.canvas,
    }
}

fn image_record(spec: &SynthSpec, i: usize) -> ClipRecord {
    ClipRecord {
        id: format!("image_{i:05}"),
        kind: RecordKind::Image,
        frame_paths: vec![format!("images/{i:05}.png")],
        label: None,
        height: spec.canvas,
        width: spec.canvas,
    }
}

fn synth_manifest(spec: &SynthSpec, records: Vec<ClipRecord>) -> Manifest {
    Manifest {
        records,
        num_classes: spec.motion_classes.len(),
        split: spec.split,
        class_names: spec.motion_classes.iter().map(|d| d.name().to_string()).collect(),
        root: PathBuf::new(),
    }
}

/// File name of the manifest written by [`generate_synthetic`].
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the synthetic corpus (PNG frames + `manifest.json`) under `out_dir`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    for v in 0..spec.num_videos {
        let (label, video) = render_video(spec, v);
        let rec = video_record(spec, v, label);
        let dir = out_dir.join(format!("videos/{v:05}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, bytes) in video.into_iter().enumerate() {
            write_png(&out_dir.join(&rec.frame_paths[t]), spec.canvas, bytes)?;
        }
        records.push(rec);
    }
    if spec.num_images > 0 {
        let dir = out_dir.join("images");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for i in 0..spec.num_images {
        let rec = image_record(spec, i);
        write_png(&out_dir.join(&rec.frame_paths[0]), spec.canvas, render_image(spec, i))?;
        records.push(rec);
    }
    let mut manifest = synth_manifest(spec, records);
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    manifest.root = out_dir.to_path_buf();
    Ok(manifest)
}

/// Builds a manifest over an existing frame tree:
/// `<class>/<clip>/<frame>.png` becomes a video record and
/// `<class>/<image>.png` an image record. Classes are sorted by name.
pub fn pack_directory(src: &Path, split: Split) -> Result<Manifest> {
    let mut classes: Vec<String> = read_dir_sorted(src)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    classes.sort();
    let rel = |p: &Path| -> String {
        p.strip_prefix(src)
            .unwrap_or(p)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    };
    let mut records = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        for entry in read_dir_sorted(&src.join(class))? {
            let stem = entry.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            if entry.is_dir() {
                let frames: Vec<PathBuf> = read_dir_sorted(&entry)?.into_iter().filter(|p| is_png(p)).collect();
                if frames.is_empty() {
                    continue;
                }
                let first = decode_frame_u8(&frames[0])?;
                records.push(ClipRecord {
                    id: format!("{class}/{stem}"),
                    kind: if frames.len() == 1 { RecordKind::Image } else { RecordKind::Video },
                    frame_paths: frames.iter().map(|p| rel(p)).collect(),
                    label: Some(label),
                    height: first.height,
                    width: first.width,
                });
            } else if is_png(&entry) {
                let f = decode_frame_u8(&entry)?;
                records.push(ClipRecord {
                    id: format!("{class}/{stem}"),
                    kind: RecordKind::Image,
                    frame_paths: vec![rel(&entry)],
                    label: Some(label),
                    height: f.height,
                    width: f.width,
                });
            }
        }
    }
    let manifest = Manifest {
        records,
        num_classes: classes.len(),
        split,
        class_names: classes,
        root: src.to_path_buf(),
    };
    manifest.validate_structure()?;
    Ok(manifest)
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_videos: 4,
            num_images: 2,
            frames_per_video: 4,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn solid_frames_decode_to_unit_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let black = dir.path().join("black.png");
        let white = dir.path().join("white.png");
        write_png(&black, 4, vec![0; 48]).unwrap();
        write_png(&white, 4, vec![255; 48]).unwrap();
        let b = decode_frame::<f32>(&black).unwrap();
        let w = decode_frame::<f32>(&white).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
        assert!(w.data().iter().all(|&v| v == 1.0));
        assert_eq!(decode_frame::<f32>(&white).unwrap(), w);
    }

    #[test]
    fn decode_rejects_corrupt_and_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.png");
        fs::write(&junk, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(matches!(decode_frame::<f32>(&junk), Err(Error::Decode { .. })));
        let bmp = dir.path().join("x.bmp");
        fs::write(&bmp, b"BM\x00\x00\x00\x00").unwrap();
        assert!(decode_frame::<f32>(&bmp).is_err());
    }

    #[test]
    fn generation_counts_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            num_videos: 8,
            frames_per_video: 16,
            num_images: 0,
            motion_classes: vec![Direction::Left, Direction::Right],
            ..SynthSpec::default()
        };
        let m = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(m.records.len(), 8);
        assert!(m.records.iter().all(|r| r.kind == RecordKind::Video && r.num_frames() == 16));
        assert!(m.records.iter().all(|r| r.label.unwrap() < 2));
        assert_eq!(m.num_classes, 2);
    }

    #[test]
    fn generation_is_byte_identical_and_loads_back() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_synthetic(&small(), a.path()).unwrap();
        let mb = generate_synthetic(&small(), b.path()).unwrap();
        assert_eq!(ma.records, mb.records);
        for r in &ma.records {
            for p in &r.frame_paths {
                assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap());
            }
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
        let corpus = Corpus::open(&a.path().join(MANIFEST_FILE)).unwrap();
        let mem = synthesize(&small()).unwrap();
        for i in 0..corpus.records().len() {
            assert_eq!(corpus.raw(i, 0), mem.raw(i, 0));
        }
    }

    #[test]
    fn load_reports_missing_frame_and_duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&small(), dir.path()).unwrap();
        let victim = dir.path().join(&m.records[1].frame_paths[2]);
        fs::remove_file(&victim).unwrap();
        let err = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap_err();
        assert!(err.to_string().contains(&m.records[1].frame_paths[2]), "{err}");

        let dir = tempfile::tempdir().unwrap();
        let mut m = generate_synthetic(&small(), dir.path()).unwrap();
        m.records[2].id = m.records[0].id.clone();
        m.write(&dir.path().join(MANIFEST_FILE)).unwrap();
        let err = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap_err();
        assert!(matches!(&err, Error::DuplicateId(id) if id == "video_00000"), "{err}");
    }

    #[test]
    fn spec_validation() {
        let bad = SynthSpec {
            frames_per_video: 1,
            canvas: 30,
            ..SynthSpec::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("frames_per_video") && msg.contains("divisible"), "{msg}");
        assert!(generate_synthetic(&bad, Path::new("/nonexistent/x")).is_err());
    }

    #[test]
    fn distinct_motion_classes_produce_distinct_videos() {
        let spec = SynthSpec {
            num_videos: 12,
            num_images: 0,
            ..small()
        };
        let c = synthesize(&spec).unwrap();
        for i in 0..c.records().len() {
            for j in 0..i {
                if c.records()[i].label != c.records()[j].label {
                    let differs = (0..spec.frames_per_video).any(|t| c.raw(i, t) != c.raw(j, t));
                    assert!(differs);
                }
            }
        }
    }

    #[test]
    fn pack_builds_manifest_from_tree() {
        let dir = tempfile::tempdir().unwrap();
        let clip = dir.path().join("walk/clip1");
        fs::create_dir_all(&clip).unwrap();
        write_png(&clip.join("0.png"), 4, vec![10; 48]).unwrap();
        write_png(&clip.join("1.png"), 4, vec![20; 48]).unwrap();
        fs::create_dir_all(dir.path().join("still")).unwrap();
        write_png(&dir.path().join("still/a.png"), 4, vec![30; 48]).unwrap();
        let m = pack_directory(dir.path(), Split::Train).unwrap();
        assert_eq!(m.num_classes, 2);
        assert_eq!(m.class_names, vec!["still", "walk"]);
        let v = m.records.iter().find(|r| r.kind == RecordKind::Video).unwrap();
        assert_eq!(v.frame_paths, vec!["walk/clip1/0.png", "walk/clip1/1.png"]);
        assert_eq!(v.label, Some(1));
        m.write(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap().records, m.records);
    }
}

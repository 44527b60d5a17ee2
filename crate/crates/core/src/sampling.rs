//! Positive-pair construction: two frames of one video or two augmentations
//! of one image, and mixed batches of both.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClipRecord, Corpus, RecordKind};
use crate::error::{Error, Result};
use crate::pixels::{Image, CHANNELS};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Continuous,
    Distant,
    SameFrame,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPolicy {
    pub mode: SamplingMode,
    /// Maximum gap for continuous sampling.
    pub delta: usize,
    /// Number of equal intervals for distant sampling.
    pub n_intervals: usize,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Distant,
            delta: 4,
            n_intervals: 2,
        }
    }
}

impl SamplingPolicy {
    pub fn same_frame() -> Self {
        Self {
            mode: SamplingMode::SameFrame,
            ..Self::default()
        }
    }

    pub fn continuous(delta: usize) -> Self {
        Self {
            mode: SamplingMode::Continuous,
            delta,
            ..Self::default()
        }
    }

    pub fn distant(n_intervals: usize) -> Self {
        Self {
            mode: SamplingMode::Distant,
            n_intervals,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SamplingMode::Continuous if self.delta < 1 => {
                Err(Error::Config("continuous sampling needs delta >= 1".into()))
            }
            SamplingMode::Distant if self.n_intervals < 2 => {
                Err(Error::Config("distant sampling needs n_intervals >= 2".into()))
            }
            _ => Ok(()),
        }
    }

    /// Shortest video this policy can draw from.
    pub fn min_frames(&self) -> usize {
        match self.mode {
            SamplingMode::SameFrame => 1,
            SamplingMode::Continuous => self.delta + 1,
            SamplingMode::Distant => self.n_intervals,
        }
    }
}

fn require_video(record: &ClipRecord) -> Result<usize> {
    if record.kind != RecordKind::Video {
        return Err(Error::Invalid(format!("record {:?} is not a video", record.id)));
    }
    Ok(record.num_frames())
}

/// `i` uniform over the starts that leave room for the gap, `j` uniform in
/// `(i, i + delta]`. A `delta` of 0 returns `(i, i)`.
pub fn sample_continuous(record: &ClipRecord, delta: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let t = require_video(record)?;
    if t <= delta {
        return Err(Error::Invalid(format!(
            "video {:?} has {t} frames; continuous sampling with delta {delta} needs {}",
            record.id,
            delta + 1
        )));
    }
    let i = rng.random_range(0..t - delta);
    if delta == 0 {
        return Ok((i, i));
    }
    Ok((i, i + rng.random_range(1..=delta)))
}

/// Bounds `[start, end)` of interval `k` out of `n` equal partitions of
/// `[0, t)`.
pub fn interval(t: usize, n: usize, k: usize) -> (usize, usize) {
    (k * t / n, (k + 1) * t / n)
}

/// One frame index drawn uniformly from each of `n` equal intervals.
pub fn sample_distant(record: &ClipRecord, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let t = require_video(record)?;
    if n == 0 || t < n {
        return Err(Error::Invalid(format!(
            "video {:?} has {t} frames; distant sampling needs at least {n}",
            record.id
        )));
    }
    Ok((0..n)
        .map(|k| {
            let (lo, hi) = interval(t, n, k);
            rng.random_range(lo..hi)
        })
        .collect())
}

/// Frame pair under `policy`. With more than two intervals, two distinct
/// intervals are chosen at random and returned in temporal order.
pub fn sample_pair(record: &ClipRecord, policy: &SamplingPolicy, rng: &mut impl Rng) -> Result<(usize, usize)> {
    match policy.mode {
        SamplingMode::SameFrame => {
            let t = require_video(record)?;
            let i = rng.random_range(0..t);
            Ok((i, i))
        }
        SamplingMode::Continuous => sample_continuous(record, policy.delta, rng),
        SamplingMode::Distant => {
            let idx = sample_distant(record, policy.n_intervals, rng)?;
            if idx.len() == 2 {
                return Ok((idx[0], idx[1]));
            }
            let pick = index::sample(rng, idx.len(), 2);
            let (a, b) = (pick.index(0), pick.index(1));
            Ok((idx[a.min(b)], idx[a.max(b)]))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpatialAugment {
    pub enabled: bool,
    pub hflip_prob: f64,
    /// Crop area as a fraction of the source, `[lo, hi]`.
    pub scale: (f64, f64),
    /// Aspect ratio range of the crop.
    pub ratio: (f64, f64),
}

impl Default for SpatialAugment {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip_prob: 0.5,
            scale: (0.5, 1.0),
            ratio: (0.75, 4.0 / 3.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorAugment {
    pub enabled: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for ColorAugment {
    fn default() -> Self {
        Self {
            enabled: true,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub spatial: SpatialAugment,
    pub color: ColorAugment,
    /// Whether video frames also receive colour distortion. Off by default:
    /// frames get spatial augmentation only.
    pub color_on_video: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            spatial: SpatialAugment::default(),
            color: ColorAugment::default(),
            color_on_video: false,
        }
    }
}

impl AugmentPolicy {
    /// No flip, full-frame crop, no colour change.
    pub fn identity() -> Self {
        Self {
            spatial: SpatialAugment {
                enabled: false,
                hflip_prob: 0.0,
                scale: (1.0, 1.0),
                ..SpatialAugment::default()
            },
            color: ColorAugment {
                enabled: false,
                ..ColorAugment::default()
            },
            color_on_video: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.spatial;
        let (lo, hi) = s.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        if !(s.ratio.0 > 0.0 && s.ratio.0 <= s.ratio.1) {
            return Err(Error::Config(format!("crop ratio {:?} invalid", s.ratio)));
        }
        if !(0.0..=1.0).contains(&s.hflip_prob) || !(0.0..=1.0).contains(&self.color.blur_prob) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        let c = &self.color;
        if [c.brightness, c.contrast, c.saturation].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("colour jitter strengths must lie in [0, 1]".into()));
        }
        if !(c.blur_sigma.0 > 0.0 && c.blur_sigma.0 <= c.blur_sigma.1) {
            return Err(Error::Config(format!("blur sigma range {:?} invalid", c.blur_sigma)));
        }
        Ok(())
    }
}

const CROP_RETRIES: usize = 10;

/// Random-resized-crop window `(y0, x0, h, w)`.
fn crop_window(h: usize, w: usize, s: &SpatialAugment, rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    if s.scale == (1.0, 1.0) {
        return (0, 0, h, w);
    }
    let area = (h * w) as f64;
    let (lr0, lr1) = (s.ratio.0.ln(), s.ratio.1.ln());
    for _ in 0..CROP_RETRIES {
        let target = area * rng.random_range(s.scale.0..=s.scale.1);
        let aspect = if lr0 < lr1 { rng.random_range(lr0..lr1).exp() } else { s.ratio.0 };
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y0 = rng.random_range(0..=h - ch);
            let x0 = rng.random_range(0..=w - cw);
            return (y0, x0, ch, cw);
        }
    }
    // central crop at the clamped aspect ratio
    let ar = (w as f64 / h as f64).clamp(s.ratio.0, s.ratio.1);
    let (ch, cw) = if (w as f64 / h as f64) < ar {
        (((w as f64) / ar).round() as usize, w)
    } else {
        (h, ((h as f64) * ar).round() as usize)
    };
    ((h - ch) / 2, (w - cw) / 2, ch.max(1), cw.max(1))
}

fn jitter_colors<T: Scalar>(img: &mut Image<T>, c: &ColorAugment, rng: &mut impl Rng) {
    let factor = |s: f64, rng: &mut dyn rand::RngCore| {
        if s > 0.0 {
            rng.random_range(1.0 - s..=1.0 + s)
        } else {
            1.0
        }
    };
    let b = factor(c.brightness, rng);
    let k = factor(c.contrast, rng);
    let sat = factor(c.saturation, rng);
    let n = img.height() * img.width();
    let px = img.data_mut();
    let luma = |p: &[T]| 0.299 * p[0].as_f64() + 0.587 * p[1].as_f64() + 0.114 * p[2].as_f64();
    let mean_luma = px.chunks(CHANNELS).map(luma).sum::<f64>() / n as f64 * b;
    for p in px.chunks_mut(CHANNELS) {
        let mut v = [p[0].as_f64() * b, p[1].as_f64() * b, p[2].as_f64() * b];
        for x in &mut v {
            *x = (*x - mean_luma) * k + mean_luma;
        }
        let g = 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
        for (dst, x) in p.iter_mut().zip(v) {
            *dst = T::of(((x - g) * sat + g).clamp(0.0, 1.0));
        }
    }
}

fn gaussian_blur<T: Scalar>(img: &Image<T>, sigma: f64) -> Image<T> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = (img.height() as i64, img.width() as i64);
    let pass = |src: &Image<T>, horizontal: bool| {
        let mut out = src.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    let mut acc = 0.0;
                    for (ki, d) in (-radius..=radius).enumerate() {
                        let (yy, xx) = if horizontal {
                            (y, (x + d).clamp(0, w - 1))
                        } else {
                            ((y + d).clamp(0, h - 1), x)
                        };
                        acc += kernel[ki] * src.at(yy as usize, xx as usize, c).as_f64();
                    }
                    out.set(y as usize, x as usize, c, T::of(acc / norm));
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Augments one view and resizes it to `out_side × out_side`. Images get
/// spatial and colour augmentation; video frames get spatial only unless
/// `color_on_video` is set.
pub fn augment<T: Scalar>(
    view: &Image<T>,
    policy: &AugmentPolicy,
    kind: RecordKind,
    out_side: usize,
    rng: &mut impl Rng,
) -> Image<T> {
    let (h, w) = (view.height(), view.width());
    let s = &policy.spatial;
    let mut out = if s.enabled {
        let (y0, x0, ch, cw) = crop_window(h, w, s, rng);
        let cropped = view.resized_crop(y0, x0, ch, cw, out_side, out_side);
        if rng.random::<f64>() < s.hflip_prob {
            cropped.hflip()
        } else {
            cropped
        }
    } else {
        view.resized(out_side, out_side)
    };
    let color = policy.color.enabled && (kind == RecordKind::Image || policy.color_on_video);
    if color {
        jitter_colors(&mut out, &policy.color, rng);
        if rng.random::<f64>() < policy.color.blur_prob {
            let (lo, hi) = policy.color.blur_sigma;
            out = gaussian_blur(&out, rng.random_range(lo..=hi));
        }
    }
    out.clamp_unit();
    out
}

/// Two augmented views of one source.
#[derive(Clone, Debug)]
pub struct ViewPair<T> {
    pub view_a: Image<T>,
    pub view_b: Image<T>,
    pub source_id: String,
    pub source_kind: RecordKind,
    pub frame_indices: Option<(usize, usize)>,
    pub label: Option<usize>,
}

/// Builds the pair for record `r` of `corpus`.
pub fn make_pair<T: Scalar>(
    corpus: &Corpus,
    r: usize,
    sampling: &SamplingPolicy,
    augment_policy: &AugmentPolicy,
    out_side: usize,
    rng: &mut impl Rng,
) -> Result<ViewPair<T>> {
    let rec = &corpus.records()[r];
    let frames = match rec.kind {
        RecordKind::Video => Some(sample_pair(rec, sampling, rng)?),
        RecordKind::Image => None,
    };
    let (ia, ib) = frames.unwrap_or((0, 0));
    let view_a = augment(&corpus.frame(r, ia), augment_policy, rec.kind, out_side, rng);
    let view_b = augment(&corpus.frame(r, ib), augment_policy, rec.kind, out_side, rng);
    Ok(ViewPair {
        view_a,
        view_b,
        source_id: rec.id.clone(),
        source_kind: rec.kind,
        frame_indices: frames,
        label: rec.label,
    })
}

/// Draws `n` distinct indices from `pool` when possible, topping up with
/// replacement otherwise.
fn draw_sources(pool: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out: Vec<usize> = index::sample(rng, pool.len(), n.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect();
    while out.len() < n {
        out.push(pool[rng.random_range(0..pool.len())]);
    }
    out
}

/// `⌊n · image_ratio⌋` image pairs followed by video pairs. Videos too short
/// for the sampling policy are skipped.
pub fn build_batch<T: Scalar>(
    corpus: &Corpus,
    n: usize,
    image_ratio: f64,
    sampling: &SamplingPolicy,
    augment_policy: &AugmentPolicy,
    out_side: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ViewPair<T>>> {
    if corpus.records().is_empty() {
        return Err(Error::Invalid("empty manifest".into()));
    }
    if !(0.0..=1.0).contains(&image_ratio) {
        return Err(Error::Config(format!("image_ratio {image_ratio} outside [0, 1]")));
    }
    let n_img = (n as f64 * image_ratio).floor() as usize;
    let n_vid = n - n_img;
    let images: Vec<usize> = corpus.manifest.images().map(|(i, _)| i).collect();
    let videos: Vec<usize> = corpus
        .manifest
        .videos()
        .filter(|(_, r)| r.num_frames() >= sampling.min_frames())
        .map(|(i, _)| i)
        .collect();
    if n_img > 0 && images.is_empty() {
        return Err(Error::Invalid(format!("batch needs {n_img} image pairs but the manifest has no images")));
    }
    if n_vid > 0 && videos.is_empty() {
        return Err(Error::Invalid(format!(
            "batch needs {n_vid} video pairs but no video has {} frames",
            sampling.min_frames()
        )));
    }
    let mut sources = if n_img > 0 { draw_sources(&images, n_img, rng) } else { Vec::new() };
    if n_vid > 0 {
        sources.extend(draw_sources(&videos, n_vid, rng));
    }
    sources
        .into_iter()
        .map(|r| make_pair(corpus, r, sampling, augment_policy, out_side, rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize, SynthSpec};
    use crate::rng::stream;

    fn video(t: usize) -> ClipRecord {
        ClipRecord {
            id: "v".into(),
            kind: RecordKind::Video,
            frame_paths: (0..t).map(|i| format!("{i}.png")).collect(),
            label: None,
            height: 8,
            width: 8,
        }
    }

    #[test]
    fn same_frame_and_unit_delta() {
        let mut rng = stream(1, &[]);
        let rec = video(10);
        for _ in 0..200 {
            let (i, j) = sample_pair(&rec, &SamplingPolicy::same_frame(), &mut rng).unwrap();
            assert_eq!(i, j);
            let (i, j) = sample_continuous(&rec, 1, &mut rng).unwrap();
            assert_eq!(j, i + 1);
        }
        assert!(sample_continuous(&video(4), 4, &mut rng).is_err());
    }

    #[test]
    fn continuous_gap_is_uniform() {
        let mut rng = stream(2, &[]);
        let rec = video(32);
        let draws = 16_000;
        let mut counts = [0usize; 8];
        for _ in 0..draws {
            let (i, j) = sample_continuous(&rec, 8, &mut rng).unwrap();
            assert!(j > i && j - i <= 8 && j < 32);
            counts[j - i - 1] += 1;
        }
        let expect = draws as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 7 degrees of freedom, p = 0.001
        assert!(chi2 < 24.32, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn distant_partitions() {
        let mut rng = stream(3, &[]);
        for _ in 0..500 {
            let idx = sample_distant(&video(100), 2, &mut rng).unwrap();
            assert!(idx[0] < 50 && (50..100).contains(&idx[1]));
        }
        assert_eq!(sample_distant(&video(2), 2, &mut rng).unwrap(), vec![0, 1]);
        assert!(sample_distant(&video(2), 3, &mut rng).is_err());
        let mut seen = [[false; 8]; 8];
        for _ in 0..5000 {
            let idx = sample_distant(&video(16), 2, &mut rng).unwrap();
            seen[idx[0]][idx[1] - 8] = true;
        }
        assert!(seen.iter().flatten().all(|&s| s));
    }

    #[test]
    fn identity_augment_is_resize() {
        let corpus = synthesize(&SynthSpec {
            num_videos: 1,
            num_images: 1,
            ..SynthSpec::default()
        })
        .unwrap();
        let img = corpus.frame::<f32>(1, 0);
        let mut rng = stream(4, &[]);
        let out = augment(&img, &AugmentPolicy::identity(), RecordKind::Image, 32, &mut rng);
        assert_eq!(out, img.resized(32, 32));
    }

    #[test]
    fn augment_is_deterministic_and_in_range() {
        let corpus = synthesize(&SynthSpec {
            num_videos: 1,
            num_images: 1,
            ..SynthSpec::default()
        })
        .unwrap();
        let img = corpus.frame::<f32>(1, 0);
        let mut policy = AugmentPolicy::default();
        policy.color.blur_prob = 1.0;
        let a = augment(&img, &policy, RecordKind::Image, 24, &mut stream(5, &[]));
        let b = augment(&img, &policy, RecordKind::Image, 24, &mut stream(5, &[]));
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width()), (24, 24));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn colour_only_policy_keeps_geometry() {
        // a single bright pixel stays the brightest pixel after a colour map
        let mut img = Image::<f64>::filled(8, 8, 0.2);
        for c in 0..CHANNELS {
            img.set(3, 5, c, 0.9);
        }
        let mut policy = AugmentPolicy::identity();
        policy.color.enabled = true;
        policy.color.saturation = 0.0;
        policy.color.blur_prob = 0.0;
        policy.color_on_video = true;
        let out = augment(&img, &policy, RecordKind::Video, 8, &mut stream(6, &[]));
        let argmax = (0..64).max_by(|&a, &b| out.data()[a * 3].total_cmp(&out.data()[b * 3])).unwrap();
        assert_eq!(argmax, 3 * 8 + 5);
        let base = out.at(0, 0, 0);
        assert!((0..8).all(|y| (0..8).all(|x| (y, x) == (3, 5) || out.at(y, x, 0) == base)));
    }

    #[test]
    fn batch_mix_follows_ratio() {
        let corpus = synthesize(&SynthSpec {
            num_videos: 6,
            num_images: 6,
            frames_per_video: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let s = SamplingPolicy::default();
        let a = AugmentPolicy::default();
        for (ratio, want_img) in [(0.0, 0), (1.0, 8), (0.5, 4)] {
            let batch = build_batch::<f32>(&corpus, 8, ratio, &s, &a, 32, &mut stream(7, &[])).unwrap();
            let imgs = batch.iter().filter(|p| p.source_kind == RecordKind::Image).count();
            assert_eq!(imgs, want_img);
        }
        let batch = build_batch::<f32>(&corpus, 6, 0.0, &s, &a, 32, &mut stream(7, &[])).unwrap();
        let mut ids: Vec<_> = batch.iter().map(|p| p.source_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        let again = build_batch::<f32>(&corpus, 6, 0.0, &s, &a, 32, &mut stream(7, &[])).unwrap();
        assert!(batch.iter().zip(&again).all(|(x, y)| x.view_a == y.view_a && x.view_b == y.view_b));
    }
}

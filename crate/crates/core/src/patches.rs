//! Patch algebra: patchify/unpatchify, per-sample random masking with a
//! restore permutation, and mask-token insertion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixels::{Image, CHANNELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub image_side: usize,
    pub patch_side: usize,
}

impl PatchConfig {
    pub fn new(image_side: usize, patch_side: usize) -> Result<Self> {
        let cfg = Self {
            image_side,
            patch_side,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image side {} is not a positive multiple of patch side {}",
                self.image_side, self.patch_side
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// Token count `L`.
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * CHANNELS
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Pixels,
    Embeddings,
}

/// A `[N, L', D]` token array, optionally carrying the mask plan of each row.
#[derive(Clone, Debug)]
pub struct TokenBatch<T> {
    pub tokens: Tensor<T>,
    pub kind: TokenKind,
    pub plans: Option<Vec<MaskPlan>>,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }
}

/// Which tokens of one sample survive masking, and how to put them back.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    mask_ratio_millis: u32,
    visible_idx: Vec<usize>,
    masked_idx: Vec<usize>,
    restore_perm: Vec<usize>,
}

/// `round(L · (1 − ratio))`.
pub fn visible_count(num_tokens: usize, mask_ratio: f64) -> usize {
    (num_tokens as f64 * (1.0 - mask_ratio)).round() as usize
}

impl MaskPlan {
    /// Builds a plan from a shuffle order: the first `keep` entries stay visible.
    pub fn from_shuffle(shuffle: Vec<usize>, keep: usize, mask_ratio: f64) -> Result<Self> {
        let l = shuffle.len();
        let mut restore = vec![usize::MAX; l];
        for (pos, &tok) in shuffle.iter().enumerate() {
            if tok >= l || restore[tok] != usize::MAX {
                return Err(Error::Invalid("shuffle order is not a permutation".into()));
            }
            restore[tok] = pos;
        }
        if keep > l {
            return Err(Error::Invalid(format!("cannot keep {keep} of {l} tokens")));
        }
        Ok(Self {
            mask_ratio_millis: (mask_ratio * 1000.0).round() as u32,
            visible_idx: shuffle[..keep].to_vec(),
            masked_idx: shuffle[keep..].to_vec(),
            restore_perm: restore,
        })
    }

    /// Plan that keeps every token in raster order.
    pub fn identity(num_tokens: usize) -> Self {
        Self::from_shuffle((0..num_tokens).collect(), num_tokens, 0.0).expect("identity")
    }

    /// Draws a uniformly random plan by arg-sorting i.i.d. uniform noise.
    pub fn sample(num_tokens: usize, mask_ratio: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&mask_ratio) {
            return Err(Error::Invalid(format!("mask ratio {mask_ratio} outside [0, 1)")));
        }
        let keep = visible_count(num_tokens, mask_ratio);
        if keep == 0 {
            return Err(Error::Invalid(format!(
                "mask ratio {mask_ratio} leaves no visible token out of {num_tokens}"
            )));
        }
        let noise: Vec<f64> = (0..num_tokens).map(|_| rng.random::<f64>()).collect();
        let mut shuffle: Vec<usize> = (0..num_tokens).collect();
        shuffle.sort_by(|&a, &b| noise[a].total_cmp(&noise[b]));
        Self::from_shuffle(shuffle, keep, mask_ratio)
    }

    pub fn len(&self) -> usize {
        self.restore_perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.restore_perm.is_empty()
    }

    pub fn mask_ratio(&self) -> f64 {
        self.mask_ratio_millis as f64 / 1000.0
    }

    /// Kept token indices, in shuffle order.
    pub fn visible_idx(&self) -> &[usize] {
        &self.visible_idx
    }

    pub fn masked_idx(&self) -> &[usize] {
        &self.masked_idx
    }

    /// `restore_perm[k]` is the position of raster token `k` in the shuffled
    /// sequence (visible tokens first, then masked).
    pub fn restore_perm(&self) -> &[usize] {
        &self.restore_perm
    }

    pub fn is_visible(&self, token: usize) -> bool {
        self.restore_perm[token] < self.visible_idx.len()
    }
}

/// Splits an image into `L` raster-ordered patch vectors, each laid out as
/// (row, column, channel).
pub fn patchify_image<T: Scalar>(image: &Image<T>, cfg: &PatchConfig) -> Result<Tensor<T>> {
    if image.height() != cfg.image_side || image.width() != cfg.image_side {
        return Err(Error::Shape(format!(
            "image {}x{} does not match configured side {}",
            image.height(),
            image.width(),
            cfg.image_side
        )));
    }
    let (g, p) = (cfg.grid(), cfg.patch_side);
    let mut out = Tensor::zeros(&[cfg.num_tokens(), cfg.patch_dim()]);
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            let mut k = 0;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..CHANNELS {
                        row[k] = image.at(gy * p + py, gx * p + px, c);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`patchify_image`].
pub fn unpatchify_image<T: Scalar>(tokens: &Tensor<T>, cfg: &PatchConfig) -> Result<Image<T>> {
    if tokens.rows() != cfg.num_tokens() || tokens.cols() != cfg.patch_dim() {
        return Err(Error::Shape(format!(
            "expected [{}, {}] tokens, got {:?}",
            cfg.num_tokens(),
            cfg.patch_dim(),
            tokens.shape()
        )));
    }
    let (g, p) = (cfg.grid(), cfg.patch_side);
    let mut img = Image::filled(cfg.image_side, cfg.image_side, T::zero());
    for gy in 0..g {
        for gx in 0..g {
            let row = tokens.row(gy * g + gx);
            let mut k = 0;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..CHANNELS {
                        img.set(gy * p + py, gx * p + px, c, row[k]);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Patchifies a batch of images into a `[N, L, patch_dim]` pixel batch.
pub fn patchify<T: Scalar>(images: &[Image<T>], cfg: &PatchConfig) -> Result<TokenBatch<T>> {
    let mut data = Vec::with_capacity(images.len() * cfg.num_tokens() * cfg.patch_dim());
    for img in images {
        data.extend(patchify_image(img, cfg)?.into_data());
    }
    Ok(TokenBatch {
        tokens: Tensor::new(vec![images.len(), cfg.num_tokens(), cfg.patch_dim()], data)?,
        kind: TokenKind::Pixels,
        plans: None,
    })
}

pub fn unpatchify<T: Scalar>(batch: &TokenBatch<T>, cfg: &PatchConfig) -> Result<Vec<Image<T>>> {
    let (n, l, d) = (batch.batch(), batch.seq_len(), batch.dim());
    (0..n)
        .map(|i| {
            let rows: Vec<usize> = (i * l..(i + 1) * l).collect();
            let t = batch.tokens.gather_rows(&rows).reshape(&[l, d])?;
            unpatchify_image(&t, cfg)
        })
        .collect()
}

/// Tokenizes a clip of frames: each token concatenates the same spatial patch
/// across time, frame-major.
pub fn patchify_clip<T: Scalar>(frames: &[Image<T>], cfg: &PatchConfig) -> Result<Tensor<T>> {
    if frames.is_empty() {
        return Err(Error::Invalid("empty clip".into()));
    }
    let per: Vec<Tensor<T>> = frames.iter().map(|f| patchify_image(f, cfg)).collect::<Result<_>>()?;
    let (l, p) = (cfg.num_tokens(), cfg.patch_dim());
    let t = frames.len();
    let mut out = Tensor::zeros(&[l, t * p]);
    for k in 0..l {
        let row = out.row_mut(k);
        for (ti, f) in per.iter().enumerate() {
            row[ti * p..(ti + 1) * p].copy_from_slice(f.row(k));
        }
    }
    Ok(out)
}

/// Masks every row of a full-length batch independently.
pub fn random_mask<T: Scalar>(
    tokens: &TokenBatch<T>,
    mask_ratio: f64,
    rng: &mut impl Rng,
) -> Result<(TokenBatch<T>, Vec<MaskPlan>)> {
    if tokens.plans.is_some() {
        return Err(Error::Invalid("token batch is already masked".into()));
    }
    let (n, l, d) = (tokens.batch(), tokens.seq_len(), tokens.dim());
    let plans: Vec<MaskPlan> = (0..n)
        .map(|_| MaskPlan::sample(l, mask_ratio, rng))
        .collect::<Result<_>>()?;
    let keep = plans.first().map_or(0, |p| p.visible_idx().len());
    let idx: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.visible_idx().iter().map(move |&k| i * l + k))
        .collect();
    let visible = tokens.tokens.gather_rows(&idx).reshape(&[n, keep, d])?;
    Ok((
        TokenBatch {
            tokens: visible,
            kind: tokens.kind,
            plans: Some(plans.clone()),
        },
        plans,
    ))
}

/// Row indices that rebuild full raster order from `[visible rows; mask row]`:
/// for sample `i` and token `k`, the entry is either the flat index of its
/// encoded row or `mask_row` when `k` was masked.
pub fn restore_index(plans: &[MaskPlan], mask_row: usize) -> Vec<usize> {
    let mut idx = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        let keep = plan.visible_idx().len();
        for &pos in plan.restore_perm() {
            idx.push(if pos < keep { i * keep + pos } else { mask_row });
        }
    }
    idx
}

/// Inserts `mask_token` at masked positions and returns raster order.
pub fn restore_with_mask_token<T: Scalar>(
    encoded_visible: &TokenBatch<T>,
    plans: &[MaskPlan],
    mask_token: &[T],
) -> Result<TokenBatch<T>> {
    let (n, keep, d) = (encoded_visible.batch(), encoded_visible.seq_len(), encoded_visible.dim());
    if plans.len() != n || plans.iter().any(|p| p.visible_idx().len() != keep) {
        return Err(Error::Shape(format!(
            "{n} encoded rows of {keep} tokens do not match the {} mask plans",
            plans.len()
        )));
    }
    if mask_token.len() != d {
        return Err(Error::Shape(format!("mask token of width {} for {d}-dim tokens", mask_token.len())));
    }
    let l = plans.first().map_or(0, MaskPlan::len);
    let mut src = encoded_visible.tokens.clone().into_data();
    src.extend_from_slice(mask_token);
    let src = Tensor::new(vec![n * keep + 1, d], src)?;
    let full = src
        .gather_rows(&restore_index(plans, n * keep))
        .reshape(&[n, l, d])?;
    Ok(TokenBatch {
        tokens: full,
        kind: encoded_visible.kind,
        plans: None,
    })
}

//! Downstream measurement of an encoder: linear probing, end-to-end
//! finetuning, label-fraction sweeps, multi-view video evaluation and the
//! frame-order ablation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::network::{Model, ModelConfig, ParamKind};
use crate::patches::patchify_clip;
use crate::rng::{self, tag};
use crate::sampling::{augment, AugmentPolicy, ColorAugment, SpatialAugment};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, matmul_tn, Tensor};
use crate::trainer::{warmup_cosine, AdamW, OptimSpec};

/// Rows per forward pass when extracting features.
const CHUNK: usize = 32;
const PROBE_BN_EPS: f64 = 1e-6;
pub const CLASSIFIER_W: &str = "classifier.w";
pub const CLASSIFIER_B: &str = "classifier.b";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    #[default]
    Pooled,
    Cls,
}

/// How a labelled record becomes model inputs: `clips` uniformly spaced
/// temporal windows times `spatial_views` crops. A window holds as many
/// frames as the model's tokenizer spans, `stride` apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewSpec {
    pub clips: usize,
    pub spatial_views: usize,
    pub stride: usize,
}

impl Default for ViewSpec {
    fn default() -> Self {
        Self {
            clips: 1,
            spatial_views: 1,
            stride: 1,
        }
    }
}

impl ViewSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.clips == 0 {
            v.push("clips must be >= 1".into());
        }
        if !matches!(self.spatial_views, 1 | 3) {
            v.push(format!("spatial_views {} must be 1 or 3", self.spatial_views));
        }
        if self.stride == 0 {
            v.push("stride must be >= 1".into());
        }
        v
    }

    pub fn per_record(&self) -> usize {
        self.clips * self.spatial_views
    }

    /// Frames covered by one window of `frames` frames.
    pub fn span(&self, frames: usize) -> usize {
        (frames - 1) * self.stride + 1
    }
}

fn check(v: Vec<String>) -> Result<()> {
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(v.join("; ")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSpec {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub epochs: usize,
    pub feature: FeatureSource,
    pub views: ViewSpec,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 256,
            warmup_epochs: 10.0,
            epochs: 90,
            feature: FeatureSource::Pooled,
            views: ViewSpec {
                clips: 4,
                ..ViewSpec::default()
            },
            seed: 0,
        }
    }
}

impl ProbeSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.views.violations();
        if self.batch_size == 0 {
            v.push("probe batch_size must be >= 1".into());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            v.push(format!(
                "probe warmup_epochs {} must lie in [0, epochs = {})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("probe momentum {} outside [0, 1)", self.momentum));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSpec {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub epochs: usize,
    pub layer_decay: f64,
    pub label_smoothing: f64,
    /// Beta-distribution parameter of mixup; 0 disables it.
    pub mixup_alpha: f64,
    /// Stochastic-depth rate of the last block; earlier blocks scale linearly.
    pub drop_path: f64,
    pub augment: AugmentPolicy,
    pub views: ViewSpec,
    pub seed: u64,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            betas: (0.9, 0.999),
            weight_decay: 0.05,
            batch_size: 16,
            warmup_epochs: 5.0,
            epochs: 50,
            layer_decay: 0.65,
            label_smoothing: 0.1,
            mixup_alpha: 0.8,
            drop_path: 0.1,
            augment: AugmentPolicy {
                spatial: SpatialAugment {
                    hflip_prob: 0.0,
                    ..SpatialAugment::default()
                },
                color: ColorAugment {
                    enabled: false,
                    ..ColorAugment::default()
                },
                color_on_video: false,
            },
            views: ViewSpec::default(),
            seed: 0,
        }
    }
}

impl FinetuneSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.views.violations();
        v.extend(self.optim().violations());
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            v.push(format!("layer_decay {} outside (0, 1]", self.layer_decay));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            v.push(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(self.mixup_alpha >= 0.0) {
            v.push(format!("mixup_alpha {} must be >= 0", self.mixup_alpha));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            v.push(format!("drop_path {} outside [0, 1)", self.drop_path));
        }
        if let Err(e) = self.augment.validate() {
            v.push(e.to_string());
        }
        v
    }

    fn optim(&self) -> OptimSpec {
        OptimSpec {
            base_lr: self.base_lr,
            betas: self.betas,
            weight_decay: self.weight_decay,
            eps: 1e-8,
            batch_size: self.batch_size,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
        }
    }
}

/// Accuracy of one evaluation condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub condition: String,
    pub top1: f64,
    pub top5: f64,
    pub n: usize,
    pub seed: u64,
    pub checkpoint_hash: String,
}

/// `(record, label)` for every labelled record.
fn labelled(corpus: &Corpus) -> Result<Vec<(usize, usize)>> {
    let c = corpus.manifest.num_classes;
    let mut out = Vec::new();
    for (i, r) in corpus.records().iter().enumerate() {
        if let Some(l) = r.label {
            if l >= c {
                return Err(Error::Invalid(format!("record {} has label {l} but only {c} classes", r.id)));
            }
            out.push((i, l));
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid("no labelled records".into()));
    }
    Ok(out)
}

fn class_count(train: &Corpus, val: &Corpus) -> Result<usize> {
    let (a, b) = (train.manifest.num_classes, val.manifest.num_classes);
    if a != b {
        return Err(Error::Invalid(format!("train has {a} classes, evaluation set has {b}")));
    }
    if a == 0 {
        return Err(Error::Invalid("manifest declares no classes".into()));
    }
    Ok(a)
}

/// Start frames of `clips` uniformly spaced windows of length `span`.
pub fn clip_starts(num_frames: usize, span: usize, clips: usize) -> Result<Vec<usize>> {
    if num_frames < span {
        return Err(Error::Invalid(format!(
            "video of {num_frames} frames is shorter than the {span}-frame clip"
        )));
    }
    let room = num_frames - span;
    if clips == 1 {
        return Ok(vec![room / 2]);
    }
    Ok((0..clips)
        .map(|k| ((k * room) as f64 / (clips - 1) as f64).round() as usize)
        .collect())
}

/// Crop windows `(y0, x0, h, w)`: the full frame for one view; for three,
/// squares of 0.875 of the short side at the start, centre and end of the
/// long side (the width when square).
pub fn spatial_crops(h: usize, w: usize, views: usize) -> Result<Vec<(usize, usize, usize, usize)>> {
    match views {
        1 => Ok(vec![(0, 0, h, w)]),
        3 => {
            let s = ((h.min(w) as f64) * 0.875).round().max(1.0) as usize;
            let (cy, cx) = ((h - s) / 2, (w - s) / 2);
            Ok(if h > w {
                vec![(0, cx, s, s), (cy, cx, s, s), (h - s, cx, s, s)]
            } else {
                vec![(cy, 0, s, s), (cy, cx, s, s), (cy, w - s, s, s)]
            })
        }
        v => Err(Error::Config(format!("spatial_views {v} must be 1 or 3"))),
    }
}

/// Token tensors for every view of record `r`. `order[j]` picks which
/// frame of the window fills slot `j` of the clip (identity for ordered
/// playback).
pub fn record_views<T: Scalar>(
    corpus: &Corpus,
    r: usize,
    cfg: &ModelConfig,
    views: &ViewSpec,
    order: &[usize],
) -> Result<Vec<Tensor<T>>> {
    let f = cfg.frames;
    if order.len() != f || order.iter().any(|&j| j >= f) {
        return Err(Error::Invalid(format!("frame order {order:?} for a {f}-frame clip")));
    }
    let rec = &corpus.records()[r];
    let starts = clip_starts(rec.num_frames(), views.span(f), views.clips)?;
    let crops = spatial_crops(rec.height, rec.width, views.spatial_views)?;
    let pc = cfg.patch_config();
    let side = cfg.image_side;
    let mut out = Vec::with_capacity(starts.len() * crops.len());
    for &s in &starts {
        let frames: Vec<_> = (0..f).map(|j| corpus.frame::<T>(r, s + j * views.stride)).collect();
        for &(y0, x0, h, w) in &crops {
            let clip: Vec<_> = order
                .iter()
                .map(|&j| frames[j].resized_crop(y0, x0, h, w, side, side))
                .collect();
            out.push(patchify_clip(&clip, &pc)?);
        }
    }
    Ok(out)
}

/// Frozen forward pass over full token sets: `[views.len(), D]`.
pub fn features<T: Scalar>(model: &Model<T>, views: &[Tensor<T>], source: FeatureSource) -> Result<Tensor<T>> {
    let l = model.cfg.num_tokens();
    let mut data = Vec::new();
    let mut d = 0;
    for chunk in views.chunks(CHUNK) {
        let mut g = Graph::new();
        let b = model.bind(&mut g, |_| false);
        let mut rows = Vec::with_capacity(chunk.len() * l * model.cfg.token_dim());
        for v in chunk {
            rows.extend_from_slice(v.data());
        }
        let tokens = g.constant(Tensor::new(vec![chunk.len() * l, model.cfg.token_dim()], rows)?);
        let positions = vec![(0..l).collect::<Vec<_>>(); chunk.len()];
        let enc = model.encode(&mut g, &b, tokens, &positions, None)?;
        let f = match source {
            FeatureSource::Pooled => model.pool(&mut g, &enc)?,
            FeatureSource::Cls => model.cls(&mut g, &enc)?,
        };
        d = g.value(f).cols();
        data.extend_from_slice(g.value(f).data());
    }
    Tensor::new(vec![views.len(), d], data)
}

/// Per-record features averaged over that record's views.
fn record_features<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    items: &[(usize, usize)],
    views: &ViewSpec,
    source: FeatureSource,
) -> Result<Tensor<T>> {
    let identity: Vec<usize> = (0..model.cfg.frames).collect();
    let k = views.per_record();
    let mut rows = Vec::new();
    let mut d = 0;
    for group in items.chunks(CHUNK) {
        let mut all = Vec::with_capacity(group.len() * k);
        for &(r, _) in group {
            all.extend(record_views(corpus, r, &model.cfg, views, &identity)?);
        }
        let f = features(model, &all, source)?;
        d = f.cols();
        let inv = T::of(1.0 / k as f64);
        for i in 0..group.len() {
            let mut acc = vec![T::zero(); d];
            for v in 0..k {
                for (a, &x) in acc.iter_mut().zip(f.row(i * k + v)) {
                    *a += x * inv;
                }
            }
            rows.extend(acc);
        }
    }
    Tensor::new(vec![items.len(), d], rows)
}

/// Top-1 and top-5 percentages of `logits` rows against `labels`.
pub fn top_k_accuracy(logits: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
    let n = labels.len().max(1) as f64;
    let (mut t1, mut t5) = (0usize, 0usize);
    for (row, &y) in logits.iter().zip(labels) {
        let above = row.iter().filter(|&&v| v > row[y]).count();
        t1 += usize::from(above == 0);
        t5 += usize::from(above < 5);
    }
    (100.0 * t1 as f64 / n, 100.0 * t5 as f64 / n)
}

fn result(condition: impl Into<String>, acc: (f64, f64), n: usize, seed: u64, model: &Model<impl Scalar>) -> EvalResult {
    EvalResult {
        condition: condition.into(),
        top1: acc.0,
        top5: acc.1,
        n,
        seed,
        checkpoint_hash: model.params.checksum(),
    }
}

/// Trains a linear classifier on frozen, batch-normalized features of
/// `train` and reports its accuracy on `val`. The encoder is read only.
pub fn linear_probe<T: Scalar>(model: &Model<T>, train: &Corpus, val: &Corpus, spec: &ProbeSpec) -> Result<EvalResult> {
    check(spec.violations())?;
    let c = class_count(train, val)?;
    let tr = labelled(train)?;
    let va = labelled(val)?;
    let mut xt = record_features(model, train, &tr, &spec.views, spec.feature)?.cast::<f64>();
    let mut xv = record_features(model, val, &va, &spec.views, spec.feature)?.cast::<f64>();
    let (n, d) = (xt.rows(), xt.cols());

    // Normalization without affine terms, from training-set statistics.
    for j in 0..d {
        let mean = (0..n).map(|i| xt.row(i)[j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (xt.row(i)[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + PROBE_BN_EPS).sqrt();
        for x in [&mut xt, &mut xv] {
            for i in 0..x.rows() {
                x.row_mut(i)[j] = (x.row(i)[j] - mean) * inv;
            }
        }
    }

    let mut w = vec![0.0; d * c];
    let mut bias = vec![0.0; c];
    let mut vw = vec![0.0; d * c];
    let mut vb = vec![0.0; c];
    let batch = spec.batch_size.min(n);
    let steps = n.div_ceil(batch);
    let peak = spec.base_lr * spec.batch_size as f64 / 256.0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng::stream(spec.seed, &[tag::PROBE, epoch as u64]));
        for (s, idx) in order.chunks(batch).enumerate() {
            let e = epoch as f64 + s as f64 / steps as f64;
            let lr = warmup_cosine(peak, spec.warmup_epochs, spec.epochs as f64, e);
            let m = idx.len();
            let x = xt.gather_rows(idx);
            let mut logits = Tensor::new(vec![m, c], bias.repeat(m))?;
            matmul_nn(x.data(), &w, logits.data_mut(), m, d, c);
            let targets = Tensor::from_fn(&[m, c], |k| f64::from(u8::from(tr[idx[k / c]].1 == k % c)));
            let (_, gl) = crate::losses::soft_cross_entropy_grad(&logits, &targets)?;
            let mut gw = vec![0.0; d * c];
            matmul_tn(x.data(), gl.data(), &mut gw, m, d, c);
            let mut gb = vec![0.0; c];
            for i in 0..m {
                for (a, &g) in gb.iter_mut().zip(gl.row(i)) {
                    *a += g;
                }
            }
            for ((p, v), g) in w.iter_mut().zip(&mut vw).zip(&gw) {
                *v = spec.momentum * *v + g + spec.weight_decay * *p;
                *p -= lr * *v;
            }
            for ((p, v), g) in bias.iter_mut().zip(&mut vb).zip(&gb) {
                *v = spec.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }

    let m = xv.rows();
    let mut logits = Tensor::new(vec![m, c], bias.repeat(m))?;
    matmul_nn(xv.data(), &w, logits.data_mut(), m, d, c);
    let rows: Vec<Vec<f64>> = (0..m).map(|i| logits.row(i).to_vec()).collect();
    let labels: Vec<usize> = va.iter().map(|&(_, l)| l).collect();
    Ok(result("probe", top_k_accuracy(&rows, &labels), m, spec.seed, model))
}

/// Learning-rate multiplier of every parameter under layer-wise decay: the
/// last block, final norm and classifier get 1, block `i` gets
/// `decay^(depth-1-i)` and the stem `decay^depth`. Parameters outside the
/// encoder get 0.
pub fn layer_lr_scales<T: Scalar>(model: &Model<T>, decay: f64) -> Vec<f64> {
    let depth = model.cfg.encoder.depth;
    model
        .params
        .iter()
        .map(|p| match model.encoder_stage(&p.name) {
            Some(k) => decay.powi((depth - k.min(depth)) as i32),
            None if p.name.starts_with("enc.norm") || p.name.starts_with("classifier.") => 1.0,
            None => 0.0,
        })
        .collect()
}

fn in_finetune(name: &str, model: &Model<impl Scalar>) -> bool {
    model.encoder_stage(name).is_some() || name.starts_with("enc.norm") || name.starts_with("classifier.")
}

/// Appends a zero-initialized classifier over `classes` outputs, replacing
/// any existing one of a different size.
pub fn attach_classifier<T: Scalar>(model: &Model<T>, classes: usize) -> Model<T> {
    let d = model.cfg.encoder.width;
    if model.params.get(CLASSIFIER_B).is_some_and(|b| b.numel() == classes) {
        return model.clone();
    }
    let mut out = Model {
        cfg: model.cfg.clone(),
        params: Default::default(),
    };
    for p in model.params.iter().filter(|p| !p.name.starts_with("classifier.")) {
        out.params.push(p.name.clone(), p.kind, p.value.clone());
    }
    out.params.push(CLASSIFIER_W, ParamKind::Weight, Tensor::zeros(&[d, classes]));
    out.params.push(CLASSIFIER_B, ParamKind::NoDecay, Tensor::zeros(&[classes]));
    out
}

fn classifier_ids<T: Scalar>(model: &Model<T>) -> Result<(usize, usize)> {
    match (model.params.id(CLASSIFIER_W), model.params.id(CLASSIFIER_B)) {
        (Some(w), Some(b)) => Ok((w, b)),
        _ => Err(Error::Checkpoint("model has no classifier; finetune it first".into())),
    }
}

/// Logits of every view: `[views.len(), C]`, pooled features through the
/// classifier.
pub fn view_logits<T: Scalar>(model: &Model<T>, views: &[Tensor<T>]) -> Result<Tensor<f64>> {
    let (wi, bi) = classifier_ids(model)?;
    let f = features(model, views, FeatureSource::Pooled)?.cast::<f64>();
    let w = model.params.entry(wi).value.cast::<f64>();
    let b = model.params.entry(bi).value.cast::<f64>();
    let (n, d, c) = (f.rows(), f.cols(), w.cols());
    let mut out = Tensor::new(vec![n, c], b.data().repeat(n))?;
    matmul_nn(f.data(), w.data(), out.data_mut(), n, d, c);
    Ok(out)
}

/// Per-record logits averaged over its views, for one frame order.
fn record_logits<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    items: &[(usize, usize)],
    views: &ViewSpec,
    order: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let k = views.per_record();
    let mut out = Vec::with_capacity(items.len());
    for group in items.chunks(CHUNK) {
        let mut all = Vec::with_capacity(group.len() * k);
        for &(r, _) in group {
            all.extend(record_views(corpus, r, &model.cfg, views, order)?);
        }
        let l = view_logits(model, &all)?;
        for i in 0..group.len() {
            let mut acc = vec![0.0; l.cols()];
            for v in 0..k {
                for (a, &x) in acc.iter_mut().zip(l.row(i * k + v)) {
                    *a += x / k as f64;
                }
            }
            out.push(acc);
        }
    }
    Ok(out)
}

/// Mean accuracy over several frame orders.
pub fn evaluate_orders<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    views: &ViewSpec,
    orders: &[Vec<usize>],
) -> Result<(f64, f64, usize)> {
    check(views.violations())?;
    if orders.is_empty() {
        return Err(Error::Invalid("no frame orders to evaluate".into()));
    }
    let items = labelled(corpus)?;
    let labels: Vec<usize> = items.iter().map(|&(_, l)| l).collect();
    let (mut t1, mut t5) = (0.0, 0.0);
    for order in orders {
        let (a, b) = top_k_accuracy(&record_logits(model, corpus, &items, views, order)?, &labels);
        t1 += a;
        t5 += b;
    }
    let k = orders.len() as f64;
    Ok((t1 / k, t5 / k, items.len()))
}

/// One randomly cropped, randomly placed training window of record `r`. The
/// same crop is applied to every frame.
fn training_clip<T: Scalar>(
    corpus: &Corpus,
    r: usize,
    cfg: &ModelConfig,
    spec: &FinetuneSpec,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let rec = &corpus.records()[r];
    let span = spec.views.span(cfg.frames);
    if rec.num_frames() < span {
        return Err(Error::Invalid(format!(
            "record {} has {} frames, the clip needs {span}",
            rec.id,
            rec.num_frames()
        )));
    }
    let start = rng.random_range(0..=rec.num_frames() - span);
    let crop_seed: u64 = rng.random();
    let clip: Vec<_> = (0..cfg.frames)
        .map(|j| {
            let frame = corpus.frame::<T>(r, start + j * spec.views.stride);
            let mut same = rand_chacha::ChaCha8Rng::seed_from_u64(crop_seed);
            augment(&frame, &spec.augment, rec.kind, cfg.image_side, &mut same)
        })
        .collect();
    patchify_clip(&clip, &cfg.patch_config())
}

/// A finetuned model (encoder plus classifier) and its validation result.
#[derive(Clone, Debug)]
pub struct Finetuned<T> {
    pub model: Model<T>,
    pub result: EvalResult,
}

/// End-to-end finetuning of the encoder and a linear classifier on pooled
/// features, with layer-wise rate decay, label smoothing, mixup and
/// stochastic depth. Reports accuracy on `val`.
pub fn finetune<T: Scalar>(model: &Model<T>, train: &Corpus, val: &Corpus, spec: &FinetuneSpec) -> Result<Finetuned<T>> {
    check(spec.violations())?;
    let c = class_count(train, val)?;
    let items = labelled(train)?;
    let mut model = attach_classifier(model, c);
    let optim = spec.optim();
    let mut opt = AdamW::new(&model.params);
    let scales = layer_lr_scales(&model, spec.layer_decay);
    let (wi, bi) = classifier_ids(&model)?;
    let depth = model.cfg.encoder.depth;
    let l = model.cfg.num_tokens();
    let dim = model.cfg.token_dim();
    let steps = items.len().div_ceil(spec.batch_size);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0u64;
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng::stream(spec.seed, &[tag::FINETUNE, 0, epoch as u64]));
        for (s, idx) in order.chunks(spec.batch_size).enumerate() {
            let mut rng = rng::stream(spec.seed, &[tag::FINETUNE, 1, step]);
            step += 1;
            let n = idx.len();
            let mut tokens = Vec::with_capacity(n * l * dim);
            for &i in idx {
                tokens.extend(training_clip::<T>(train, items[i].0, &model.cfg, spec, &mut rng)?.into_data());
            }
            let eps = spec.label_smoothing;
            let mut targets: Vec<f64> = idx
                .iter()
                .flat_map(|&i| {
                    let y = items[i].1;
                    (0..c).map(move |k| eps / c as f64 + if y == k { 1.0 - eps } else { 0.0 })
                })
                .collect();
            if spec.mixup_alpha > 0.0 && n > 1 {
                let lam = Beta::new(spec.mixup_alpha, spec.mixup_alpha)
                    .map_err(|e| Error::Config(e.to_string()))?
                    .sample(&mut rng);
                let (tk, tg) = (tokens.clone(), targets.clone());
                let row = l * dim;
                for i in 0..n {
                    let j = n - 1 - i;
                    let lt = T::of(lam);
                    let lo = T::of(1.0 - lam);
                    for k in 0..row {
                        tokens[i * row + k] = lt * tk[i * row + k] + lo * tk[j * row + k];
                    }
                    for k in 0..c {
                        targets[i * c + k] = lam * tg[i * c + k] + (1.0 - lam) * tg[j * c + k];
                    }
                }
            }
            let drop: Vec<Vec<T>> = (0..depth)
                .map(|layer| {
                    let rate = if depth > 1 {
                        spec.drop_path * layer as f64 / (depth - 1) as f64
                    } else {
                        spec.drop_path
                    };
                    (0..n)
                        .map(|_| {
                            if rate > 0.0 && rng.random::<f64>() < rate {
                                T::zero()
                            } else {
                                T::of(1.0 / (1.0 - rate))
                            }
                        })
                        .collect()
                })
                .collect();

            let mut g = Graph::new();
            let b = model.bind(&mut g, |p| in_finetune(&p.name, &model));
            let x = g.constant(Tensor::new(vec![n * l, dim], tokens)?);
            let positions = vec![(0..l).collect::<Vec<_>>(); n];
            let enc = model.encode(&mut g, &b, x, &positions, Some(&drop))?;
            let pooled = model.pool(&mut g, &enc)?;
            let logits = g.linear(pooled, b.var(wi), Some(b.var(bi)))?;
            let loss = g.soft_cross_entropy(logits, &Tensor::new(vec![n, c], targets.iter().map(|&v| T::of(v)).collect())?)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFinite {
                    term: "finetune".into(),
                    detail: format!("epoch {epoch} step {s}"),
                });
            }
            g.backward(loss)?;
            let grads: Vec<Option<Tensor<T>>> = b
                .vars()
                .iter()
                .zip(model.params.iter())
                .map(|(&v, p)| {
                    if p.kind.trainable() && in_finetune(&p.name, &model) {
                        g.grad(v).cloned()
                    } else {
                        None
                    }
                })
                .collect();
            let e = epoch as f64 + s as f64 / steps as f64;
            let lr = warmup_cosine(optim.peak_lr(), spec.warmup_epochs, spec.epochs as f64, e);
            opt.step(&mut model.params, &grads, lr, &optim, Some(&scales));
        }
    }
    let identity: Vec<usize> = (0..model.cfg.frames).collect();
    let (t1, t5, n) = evaluate_orders(&model, val, &spec.views, &[identity])?;
    let result = result("finetune", (t1, t5), n, spec.seed, &model);
    Ok(Finetuned { model, result })
}

/// Stratified subset of the labelled records: `⌊fraction · count⌋` drawn
/// per class, returned in record order.
pub fn stratified_subset(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let items = labelled(corpus)?;
    let mut keep = Vec::new();
    for class in 0..corpus.manifest.num_classes {
        let mut members: Vec<usize> = items.iter().filter(|&&(_, l)| l == class).map(|&(r, _)| r).collect();
        if members.is_empty() {
            continue;
        }
        let k = (fraction * members.len() as f64 + 1e-9).floor() as usize;
        if k == 0 {
            return Err(Error::Invalid(format!(
                "fraction {fraction} leaves no example of class {class} ({} available)",
                members.len()
            )));
        }
        members.shuffle(&mut rng::stream(seed, &[tag::SUBSET, class as u64]));
        keep.extend_from_slice(&members[..k]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// One finetune per label fraction, with mixup disabled.
pub fn semi_supervised_sweep<T: Scalar>(
    model: &Model<T>,
    train: &Corpus,
    val: &Corpus,
    fractions: &[f64],
    spec: &FinetuneSpec,
) -> Result<Vec<EvalResult>> {
    if fractions.is_empty() {
        return Err(Error::Config("no fractions given".into()));
    }
    let spec = FinetuneSpec {
        mixup_alpha: 0.0,
        ..spec.clone()
    };
    let subsets = fractions
        .iter()
        .map(|&f| stratified_subset(train, f, spec.seed))
        .collect::<Result<Vec<_>>>()?;
    fractions
        .iter()
        .zip(subsets)
        .map(|(&f, keep)| {
            let mut r = finetune(model, &train.subset(&keep), val, &spec)?.result;
            r.condition = format!("fraction={f}");
            Ok(r)
        })
        .collect()
}

/// Accuracy with logits averaged over `clips × spatial_views` views per
/// video. Needs a finetuned model.
pub fn multiview_video_eval<T: Scalar>(model: &Model<T>, corpus: &Corpus, views: &ViewSpec, seed: u64) -> Result<EvalResult> {
    let identity: Vec<usize> = (0..model.cfg.frames).collect();
    let (t1, t5, n) = evaluate_orders(model, corpus, views, &[identity])?;
    Ok(result(format!("views={}x{}", views.clips, views.spatial_views), (t1, t5), n, seed, model))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    Ordered,
    Shuffled,
    Repeated,
}

impl FromStr for TemporalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ordered" => Ok(Self::Ordered),
            "shuffled" => Ok(Self::Shuffled),
            "repeated" => Ok(Self::Repeated),
            other => Err(Error::Config(format!("unknown temporal mode {other:?}"))),
        }
    }
}

impl fmt::Display for TemporalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ordered => "ordered",
            Self::Shuffled => "shuffled",
            Self::Repeated => "repeated",
        })
    }
}

/// Frame orders of an ablation: the identity; `n_perms` random
/// permutations; or every single frame repeated across the clip.
pub fn temporal_orders(mode: TemporalMode, frames: usize, n_perms: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if frames < 2 {
        return Err(Error::Invalid(format!(
            "temporal ablation needs clips of at least 2 frames, model spans {frames}"
        )));
    }
    Ok(match mode {
        TemporalMode::Ordered => vec![(0..frames).collect()],
        TemporalMode::Shuffled => {
            if n_perms == 0 {
                return Err(Error::Config("n_perms must be >= 1".into()));
            }
            let mut rng = rng::stream(seed, &[tag::EVAL]);
            (0..n_perms)
                .map(|_| {
                    let mut p: Vec<usize> = (0..frames).collect();
                    p.shuffle(&mut rng);
                    p
                })
                .collect()
        }
        TemporalMode::Repeated => (0..frames).map(|f| vec![f; frames]).collect(),
    })
}

/// Accuracy of a finetuned video model under re-ordered frames.
pub fn temporal_ablation<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    mode: TemporalMode,
    n_perms: usize,
    views: &ViewSpec,
    seed: u64,
) -> Result<EvalResult> {
    let orders = temporal_orders(mode, model.cfg.frames, n_perms, seed)?;
    let (t1, t5, n) = evaluate_orders(model, corpus, views, &orders)?;
    Ok(result(mode.to_string(), (t1, t5), n, seed, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize, Split, SynthSpec};
    use crate::network::{HeadConfig, TransformerConfig};

    fn micro() -> ModelConfig {
        ModelConfig {
            image_side: 16,
            patch_side: 4,
            encoder: TransformerConfig {
                depth: 2,
                heads: 2,
                width: 16,
                mlp_ratio: 2.0,
            },
            decoder: TransformerConfig {
                depth: 1,
                heads: 2,
                width: 8,
                mlp_ratio: 2.0,
            },
            head: HeadConfig {
                hidden: vec![16],
                out_dim: 8,
            },
            ..ModelConfig::default()
        }
    }

    fn data(seed: u64, split: Split) -> Corpus {
        synthesize(&SynthSpec {
            num_videos: 8,
            num_images: 0,
            frames_per_video: 6,
            canvas: 16,
            patch_side: 4,
            shape_size: (3, 5),
            seed,
            split,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn window_and_crop_geometry() {
        assert_eq!(clip_starts(16, 7, 1).unwrap(), vec![4]);
        assert_eq!(clip_starts(16, 4, 3).unwrap(), vec![0, 6, 12]);
        assert!(clip_starts(3, 4, 1).is_err());
        let c = spatial_crops(32, 32, 3).unwrap();
        assert_eq!(c, vec![(2, 0, 28, 28), (2, 2, 28, 28), (2, 4, 28, 28)]);
        assert_eq!(spatial_crops(20, 32, 1).unwrap(), vec![(0, 0, 20, 32)]);
    }

    #[test]
    fn seven_by_three_views() {
        let c = data(1, Split::Val);
        let v = ViewSpec {
            clips: 7,
            spatial_views: 3,
            stride: 1,
        };
        let views = record_views::<f32>(&c, 0, &micro(), &v, &[0]).unwrap();
        assert_eq!(views.len(), 21);
    }

    #[test]
    fn top_k_counts() {
        let logits = vec![vec![0.1, 0.9, 0.0], vec![0.5, 0.2, 0.3]];
        assert_eq!(top_k_accuracy(&logits, &[1, 2]), (50.0, 100.0));
    }

    #[test]
    fn layer_scales_follow_depth() {
        let m = attach_classifier(&Model::<f32>::init(micro(), 0).unwrap(), 4);
        let s = layer_lr_scales(&m, 0.5);
        let get = |n: &str| s[m.params.id(n).unwrap()];
        assert_eq!(get("classifier.w"), 1.0);
        assert_eq!(get("enc.1.qkv.w"), 1.0);
        assert_eq!(get("enc.0.qkv.w"), 0.5);
        assert_eq!(get("patch_embed.w"), 0.25);
        assert_eq!(get("dec.pred.w"), 0.0);
        let flat = layer_lr_scales(&m, 1.0);
        assert!(m.params.iter().zip(&flat).all(|(p, &v)| v == 1.0 || !in_finetune(&p.name, &m)));
    }

    #[test]
    fn probe_is_repeatable_and_read_only() {
        let model = Model::<f32>::init(micro(), 3).unwrap();
        let before = model.params.checksum();
        let spec = ProbeSpec {
            epochs: 5,
            warmup_epochs: 1.0,
            views: ViewSpec {
                clips: 2,
                ..ViewSpec::default()
            },
            ..ProbeSpec::default()
        };
        let (tr, va) = (data(1, Split::Train), data(2, Split::Val));
        let a = linear_probe(&model, &tr, &va, &spec).unwrap();
        let b = linear_probe(&model, &tr, &va, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(model.params.checksum(), before);
        assert!(0.0 <= a.top1 && a.top1 <= a.top5 && a.top5 <= 100.0);
    }

    #[test]
    fn single_class_probe_is_perfect() {
        let model = Model::<f32>::init(micro(), 3).unwrap();
        let mut tr = data(1, Split::Train);
        let mut va = data(2, Split::Val);
        for c in [&mut tr, &mut va] {
            c.manifest.num_classes = 1;
            for r in &mut c.manifest.records {
                r.label = Some(0);
            }
        }
        let spec = ProbeSpec {
            epochs: 2,
            warmup_epochs: 0.0,
            ..ProbeSpec::default()
        };
        assert_eq!(linear_probe(&model, &tr, &va, &spec).unwrap().top1, 100.0);
    }

    #[test]
    fn full_fraction_matches_plain_finetune() {
        let model = Model::<f32>::init(micro(), 3).unwrap();
        let (tr, va) = (data(1, Split::Train), data(2, Split::Val));
        let spec = FinetuneSpec {
            epochs: 2,
            warmup_epochs: 1.0,
            batch_size: 4,
            mixup_alpha: 0.0,
            ..FinetuneSpec::default()
        };
        let plain = finetune(&model, &tr, &va, &spec).unwrap().result;
        let sweep = semi_supervised_sweep(&model, &tr, &va, &[1.0], &spec).unwrap();
        assert_eq!((sweep[0].top1, sweep[0].top5), (plain.top1, plain.top5));
        assert!(stratified_subset(&tr, 0.01, 0).is_err());
    }

    #[test]
    fn identity_permutation_equals_ordered() {
        let base = Model::<f32>::init(micro(), 3).unwrap();
        let video = attach_classifier(&base.inflate_to_video(2).unwrap(), 4);
        let mut video = video;
        let w = video.params.get_mut(CLASSIFIER_W).unwrap();
        *w = Tensor::from_fn(w.shape(), |i| ((i * 7) % 5) as f32 - 2.0);
        let va = data(2, Split::Val);
        let v = ViewSpec::default();
        let ordered = temporal_ablation(&video, &va, TemporalMode::Ordered, 1, &v, 0).unwrap();
        let (t1, _, _) = evaluate_orders(&video, &va, &v, &[vec![0, 1]]).unwrap();
        assert_eq!(t1, ordered.top1);
        assert!(temporal_ablation(&base, &va, TemporalMode::Shuffled, 4, &v, 0).is_err());
        assert_eq!(temporal_orders(TemporalMode::Repeated, 3, 0, 0).unwrap().len(), 3);
    }
}

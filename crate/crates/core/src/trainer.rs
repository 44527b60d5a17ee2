//! Pretraining: learning-rate law, AdamW, the combined-objective train step,
//! checkpointed and resumable runs, and the collapse monitor.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, LambdaSchedule, LossReport, VicRegCoeffs};
use crate::network::{mean_feature_std, Bound, Checkpoint, HeadMode, HeadStats, Model, ModelConfig, Parameters};
use crate::patches::{patchify_image, MaskPlan};
use crate::rng::{self, tag};
use crate::sampling::{build_batch, AugmentPolicy, SamplingPolicy, ViewPair};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Vicmae,
    MaeSimsiam,
    MaeVicreg,
    MaeOnly,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vicmae" => Ok(Self::Vicmae),
            "mae_simsiam" => Ok(Self::MaeSimsiam),
            "mae_vicreg" => Ok(Self::MaeVicreg),
            "mae_only" => Ok(Self::MaeOnly),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vicmae => "vicmae",
            Self::MaeSimsiam => "mae_simsiam",
            Self::MaeVicreg => "mae_vicreg",
            Self::MaeOnly => "mae_only",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimSpec {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub total_epochs: usize,
}

impl Default for OptimSpec {
    fn default() -> Self {
        Self {
            base_lr: 1.5e-4,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            eps: 1e-8,
            batch_size: 32,
            warmup_epochs: 5.0,
            total_epochs: 100,
        }
    }
}

impl OptimSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size < 2 {
            v.push(format!("batch_size {} must be >= 2", self.batch_size));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs as f64) {
            v.push(format!(
                "warmup_epochs {} must lie in [0, total_epochs = {})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            v.push(format!("base_lr {} must be > 0", self.base_lr));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            v.push(format!("betas ({b1}, {b2}) must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        v
    }

    /// `base_lr · batch / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

/// Linear warmup from 0 to the scaled peak, then half-cosine decay to 0.
/// `epoch_fraction` counts epochs elapsed, fractional within an epoch.
pub fn effective_lr(spec: &OptimSpec, epoch_fraction: f64) -> f64 {
    warmup_cosine(spec.peak_lr(), spec.warmup_epochs, spec.total_epochs as f64, epoch_fraction)
}

pub(crate) fn warmup_cosine(peak: f64, warmup: f64, total: f64, e: f64) -> f64 {
    if e < warmup {
        return peak * e / warmup;
    }
    let span = (total - warmup).max(f64::MIN_POSITIVE);
    let t = ((e - warmup) / span).clamp(0.0, 1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Decoupled-weight-decay Adam. Moments exist for trainable parameters only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        let zeros = |p: &crate::network::Param<T>| p.kind.trainable().then(|| Tensor::zeros(p.value.shape()));
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    /// One update. `grads[i]` of `None` leaves parameter `i` untouched;
    /// `lr_scale[i]` multiplies the rate of parameter `i` when given.
    pub fn step(
        &mut self,
        params: &mut Parameters<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
        spec: &OptimSpec,
        lr_scale: Option<&[f64]>,
    ) {
        self.t += 1;
        let (b1, b2) = spec.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        for (i, g) in grads.iter().enumerate() {
            let (Some(g), Some(m), Some(v)) = (g, self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let p = params.entry_mut(i);
            let rate = lr * lr_scale.map_or(1.0, |s| s[i]);
            let decay = if p.kind == crate::network::ParamKind::Weight {
                T::one() - T::of(rate * spec.weight_decay)
            } else {
                T::one()
            };
            let step = T::of(rate / bc1);
            let inv_bc2 = T::of(1.0 / bc2);
            let eps = T::of(spec.eps);
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1t * *mi + (T::one() - b1t) * gi;
                *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
                *w = *w * decay - step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }

    fn export(&self, params: &Parameters<T>, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, p) in params.iter().enumerate() {
            if let (Some(m), Some(v)) = (&self.m[i], &self.v[i]) {
                out.push((format!("adam.m.{}", p.name), m.clone()));
                out.push((format!("adam.v.{}", p.name), v.clone()));
            }
        }
    }

    fn import(params: &Parameters<T>, t: u64, extra: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut opt = Self::new(params);
        opt.t = t;
        let find = |name: String| {
            extra
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))
        };
        for (i, p) in params.iter().enumerate() {
            if opt.m[i].is_some() {
                opt.m[i] = Some(find(format!("adam.m.{}", p.name))?);
                opt.v[i] = Some(find(format!("adam.v.{}", p.name))?);
            }
        }
        Ok(opt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub optim: OptimSpec,
    pub lambda: LambdaSchedule,
    pub sampling: SamplingPolicy,
    pub augment: AugmentPolicy,
    /// Fraction of each batch drawn from image records.
    pub image_ratio: f64,
    pub mask_ratio: f64,
    /// Reconstruct only the first view of each pair.
    pub single_view_recon: bool,
    /// Per-patch normalized reconstruction targets.
    pub norm_pix_loss: bool,
    pub vicreg: VicRegCoeffs,
    /// Write a checkpoint every this many steps (0: final only).
    pub checkpoint_every: u64,
    /// Overrides the `ceil(records / batch)` default.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Vicmae,
            optim: OptimSpec::default(),
            lambda: LambdaSchedule::default(),
            sampling: SamplingPolicy::default(),
            augment: AugmentPolicy::default(),
            image_ratio: 0.25,
            mask_ratio: 0.75,
            single_view_recon: false,
            norm_pix_loss: false,
            vicreg: VicRegCoeffs::default(),
            checkpoint_every: 0,
            steps_per_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.optim.violations();
        for r in [
            self.lambda.validate(),
            self.sampling.validate(),
            self.augment.validate(),
            self.vicreg.validate(),
        ] {
            if let Err(e) = r {
                v.push(e.to_string());
            }
        }
        if !(0.0..=1.0).contains(&self.image_ratio) {
            v.push(format!("image_ratio {} outside [0, 1]", self.image_ratio));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            v.push(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        if self.steps_per_epoch == Some(0) {
            v.push("steps_per_epoch must be >= 1".into());
        }
        v
    }

    pub fn steps_per_epoch(&self, num_records: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| num_records.div_ceil(self.optim.batch_size).max(1))
    }
}

/// Mean over dimensions of the per-dimension standard deviation of pooled
/// features; near zero signals collapse.
pub fn collapse_monitor<T: Scalar>(pooled: &Tensor<T>) -> f64 {
    mean_feature_std(pooled)
}

/// Relative weights of the two loss terms for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    pub recon: f64,
    pub contrastive: f64,
}

/// Forward and backward pass of one batch without touching the weights.
pub struct StepGradients<T> {
    pub report: LossReport,
    pub emb_std: f64,
    /// One entry per parameter; `None` for buffers.
    pub grads: Vec<Option<Tensor<T>>>,
    pub stats: HeadStats<T>,
}

fn patch_targets<T: Scalar>(views: &[&crate::pixels::Image<T>], model: &Model<T>) -> Result<Tensor<T>> {
    let pc = model.cfg.patch_config();
    let mut data = Vec::new();
    for v in views {
        data.extend(patchify_image(v, &pc)?.into_data());
    }
    Tensor::new(vec![views.len() * pc.num_tokens(), pc.patch_dim()], data)
}

/// Global-feature term of the objective.
fn contrastive_term<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    b: &Bound,
    enc: &crate::network::Encoded,
    n: usize,
    cfg: &TrainConfig,
    stats: &mut HeadStats<T>,
) -> Result<Option<(Var, f64)>> {
    let split = |g: &mut Graph<T>, x: Var| -> Result<(Var, Var)> {
        Ok((g.gather_rows(x, (0..n).collect())?, g.gather_rows(x, (n..2 * n).collect())?))
    };
    match cfg.objective {
        Objective::MaeOnly => Ok(None),
        Objective::Vicmae => {
            let pooled = model.pool(g, enc)?;
            let (fa, fb) = split(g, pooled)?;
            let emb_std = collapse_monitor(g.value(fa));
            let (p, s1) = model.project(g, b, fa, HeadMode::Train, true)?;
            let (z, s2) = model.project(g, b, fb, HeadMode::Train, true)?;
            stats.extend(s1);
            stats.extend(s2);
            let inv = model.inv_temperature(g, b);
            let l = g.info_nce(p, z, inv)?;
            Ok(Some((g.scale(l, T::of(model.cfg.loss_scale)), emb_std)))
        }
        Objective::MaeSimsiam => {
            let cls = model.cls(g, enc)?;
            let (fa, fb) = split(g, cls)?;
            let emb_std = collapse_monitor(g.value(fa));
            let (pa, s1) = model.project(g, b, fa, HeadMode::Train, true)?;
            let (pb, s2) = model.project(g, b, fb, HeadMode::Train, true)?;
            stats.extend(s1);
            stats.extend(s2);
            let za = g.l2_normalize(fa);
            let zb = g.l2_normalize(fb);
            let (za, zb) = (g.detach(za), g.detach(zb));
            let lab = g.simsiam(pa, zb)?;
            let lba = g.simsiam(pb, za)?;
            Ok(Some((g.weighted_sum(&[(lab, T::of(0.5)), (lba, T::of(0.5))]), emb_std)))
        }
        Objective::MaeVicreg => {
            let cls = model.cls(g, enc)?;
            let (fa, fb) = split(g, cls)?;
            let emb_std = collapse_monitor(g.value(fa));
            let (p, s1) = model.project(g, b, fa, HeadMode::Train, true)?;
            let (z, s2) = model.project(g, b, fb, HeadMode::Train, true)?;
            stats.extend(s1);
            stats.extend(s2);
            Ok(Some((g.vicreg(p, z, &cfg.vicreg)?, emb_std)))
        }
    }
}

/// Masks both views of every pair, encodes them jointly, reconstructs, adds
/// the global term and back-propagates `recon·w_r + contrastive·w_c`.
pub fn compute_gradients<T: Scalar>(
    model: &Model<T>,
    pairs: &[ViewPair<T>],
    cfg: &TrainConfig,
    weights: TermWeights,
    mask_rng: &mut impl rand::Rng,
) -> Result<StepGradients<T>> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::Invalid(format!("batch of {n} pairs; at least 2 required")));
    }
    if model.cfg.frames != 1 {
        return Err(Error::Config("pretraining expects an image model (frames = 1)".into()));
    }
    let l = model.cfg.num_tokens();
    let views: Vec<_> = pairs.iter().map(|p| &p.view_a).chain(pairs.iter().map(|p| &p.view_b)).collect();
    let target = patch_targets(&views, model)?;
    let plans: Vec<MaskPlan> = (0..2 * n)
        .map(|_| MaskPlan::sample(l, cfg.mask_ratio, mask_rng))
        .collect::<Result<_>>()?;
    let vis: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.visible_idx().iter().map(move |&k| i * l + k))
        .collect();
    let positions: Vec<Vec<usize>> = plans.iter().map(|p| p.visible_idx().to_vec()).collect();

    let mut g = Graph::new();
    let b = model.bind(&mut g, |_| true);
    let tokens = g.constant(target.gather_rows(&vis));
    let enc = model.encode(&mut g, &b, tokens, &positions, None)?;
    let pred = model.decode(&mut g, &b, &enc, &plans)?;
    let target = if cfg.norm_pix_loss {
        losses::normalize_patch_targets(&target)
    } else {
        target
    };
    let mut w = losses::mask_weights::<T>(&plans);
    if cfg.single_view_recon {
        w[n * l..].iter_mut().for_each(|v| *v = T::zero());
    }
    let recon = g.recon_loss(pred, &target, &w)?;

    let mut stats = Vec::new();
    let global = contrastive_term(&mut g, model, &b, &enc, n, cfg, &mut stats)?;
    let (contrastive, emb_std) = match global {
        Some((c, s)) => (Some(c), s),
        None => {
            let pooled = model.pool(&mut g, &enc)?;
            let fa = g.gather_rows(pooled, (0..n).collect())?;
            (None, collapse_monitor(g.value(fa)))
        }
    };
    let c_value = contrastive.map_or(0.0, |c| g.value(c).item().as_f64());
    let report = losses::combined_loss(g.value(recon).item().as_f64(), c_value, weights.contrastive)?;
    let mut terms = vec![(recon, T::of(weights.recon))];
    if let Some(c) = contrastive {
        terms.push((c, T::of(weights.contrastive)));
    }
    let total = g.weighted_sum(&terms);
    if !g.value(total).item().is_finite() {
        return Err(Error::NonFinite {
            term: "total".into(),
            detail: format!("{report:?}"),
        });
    }
    g.backward(total)?;
    let grads = b
        .vars()
        .iter()
        .zip(model.params.iter())
        .map(|(&v, p)| {
            p.kind
                .trainable()
                .then(|| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        })
        .collect();
    Ok(StepGradients {
        report,
        emb_std,
        grads,
        stats,
    })
}

/// One logged row of the metrics file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub recon: f64,
    pub contrastive: f64,
    pub lambda: f64,
    pub total: f64,
    pub emb_std: f64,
    pub lr: f64,
}

/// Model, optimizer and step counter of a run. The batch and mask of step
/// `s` are drawn from streams derived from `(seed, s)`, so the step counter
/// is the whole random state.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub cfg: TrainConfig,
    pub step: u64,
    pub steps_per_epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, num_records: usize) -> Result<Self> {
        validate(&model_cfg, &cfg)?;
        let model = Model::init(model_cfg, cfg.seed)?;
        Ok(Self::from_model(model, cfg, num_records))
    }

    pub fn from_model(model: Model<T>, cfg: TrainConfig, num_records: usize) -> Self {
        let opt = AdamW::new(&model.params);
        let steps_per_epoch = cfg.steps_per_epoch(num_records);
        Self {
            model,
            opt,
            cfg,
            step: 0,
            steps_per_epoch,
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.cfg.optim.total_epochs * self.steps_per_epoch) as u64
    }

    pub fn epoch(&self) -> usize {
        (self.step as usize / self.steps_per_epoch).min(self.cfg.optim.total_epochs.saturating_sub(1))
    }

    pub fn lr(&self) -> f64 {
        effective_lr(&self.cfg.optim, self.step as f64 / self.steps_per_epoch as f64)
    }

    pub fn lambda(&self) -> Result<f64> {
        match self.cfg.objective {
            Objective::MaeOnly => Ok(0.0),
            _ => self.cfg.lambda.at(self.epoch(), self.cfg.optim.total_epochs),
        }
    }

    pub fn batch(&self, corpus: &Corpus) -> Result<Vec<ViewPair<T>>> {
        let mut rng = rng::stream(self.cfg.seed, &[tag::BATCH, self.step]);
        build_batch(
            corpus,
            self.cfg.optim.batch_size,
            self.cfg.image_ratio,
            &self.cfg.sampling,
            &self.cfg.augment,
            self.model.cfg.image_side,
            &mut rng,
        )
    }

    /// Applies one update with the given batch.
    pub fn train_step(&mut self, pairs: &[ViewPair<T>]) -> Result<MetricsRow> {
        let lambda = self.lambda()?;
        let lr = self.lr();
        let mut mask_rng = rng::stream(self.cfg.seed, &[tag::MASK, self.step]);
        let weights = TermWeights {
            recon: 1.0,
            contrastive: lambda,
        };
        let sg = compute_gradients(&self.model, pairs, &self.cfg, weights, &mut mask_rng)?;
        self.opt.step(&mut self.model.params, &sg.grads, lr, &self.cfg.optim, None);
        self.model.update_running_stats(&sg.stats);
        let row = MetricsRow {
            step: self.step + 1,
            epoch: self.epoch(),
            recon: sg.report.recon,
            contrastive: sg.report.contrastive,
            lambda,
            total: sg.report.total,
            emb_std: sg.emb_std,
            lr,
        };
        self.step += 1;
        Ok(row)
    }

    /// Draws the batch for the current step and trains on it.
    pub fn advance(&mut self, corpus: &Corpus) -> Result<MetricsRow> {
        let pairs = self.batch(corpus)?;
        self.train_step(&pairs)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        let mut ck = Checkpoint::new(self.model.clone(), self.step);
        ck.state = serde_json::json!({
            "adam_t": self.opt.t,
            "steps_per_epoch": self.steps_per_epoch,
            "train": serde_json::to_value(&self.cfg)?,
        });
        self.opt.export(&self.model.params, &mut ck.extra);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let t = ck.state["adam_t"].as_u64().ok_or_else(|| bad("missing optimizer step"))?;
        let spe = ck.state["steps_per_epoch"].as_u64().ok_or_else(|| bad("missing steps_per_epoch"))? as usize;
        let cfg: TrainConfig = serde_json::from_value(ck.state["train"].clone())?;
        let opt = AdamW::import(&ck.model.params, t, &ck.extra)?;
        Ok(Self {
            model: ck.model,
            opt,
            cfg,
            step: ck.step,
            steps_per_epoch: spe,
        })
    }
}

/// Checks both configs and reports every violation at once.
pub fn validate(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<()> {
    let mut v = model_cfg.violations();
    v.extend(cfg.violations());
    if matches!(cfg.objective, Objective::MaeSimsiam | Objective::MaeVicreg) && !model_cfg.use_cls_token {
        v.push(format!("objective {} needs use_cls_token", cfg.objective));
    }
    if cfg.objective == Objective::MaeSimsiam && model_cfg.head.out_dim != model_cfg.encoder.width {
        v.push(format!(
            "mae_simsiam compares projected and raw class tokens: head out_dim {} must equal encoder width {}",
            model_cfg.head.out_dim, model_cfg.encoder.width
        ));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(v.join("; ")))
    }
}

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:07}.ckpt")
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps instead of the configured schedule.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub rows: Vec<MetricsRow>,
}

/// Rows of an existing log paired with their original text, so a resumed
/// run rewrites earlier rows byte for byte.
fn read_rows(path: &Path) -> Result<Vec<(MetricsRow, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok((serde_json::from_str(l)?, l.to_string())))
        .collect()
}

/// Runs (or resumes) pretraining, writing periodic checkpoints, a final
/// checkpoint and the metrics log under `out_dir`.
pub fn pretrain<T: Scalar>(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome> {
    if corpus.records().is_empty() {
        return Err(Error::Invalid("empty manifest".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics = out_dir.join(METRICS_FILE);
    let (mut trainer, kept) = match &opts.resume {
        Some(path) => {
            let trainer = Trainer::<T>::from_checkpoint(Checkpoint::load(path)?)?;
            let mut kept = if metrics.exists() { read_rows(&metrics)? } else { Vec::new() };
            kept.retain(|(r, _)| r.step <= trainer.step);
            (trainer, kept)
        }
        None => (Trainer::new(model_cfg.clone(), cfg.clone(), corpus.records().len())?, Vec::new()),
    };
    let end = opts.stop_at.unwrap_or(trainer.total_steps()).min(trainer.total_steps());
    let mut log = fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let mut rows = Vec::with_capacity(kept.len());
    for (r, line) in kept {
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics, e))?;
        rows.push(r);
    }
    while trainer.step < end {
        let row = trainer.advance(corpus)?;
        writeln!(log, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&metrics, e))?;
        rows.push(row);
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && trainer.step % every == 0 {
            trainer.to_checkpoint()?.save(&out_dir.join(checkpoint_name(trainer.step)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics, e))?;
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.to_checkpoint()?.save(&checkpoint)?;
    Ok(PretrainOutcome {
        checkpoint,
        metrics,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize, SynthSpec};
    use crate::network::{HeadConfig, TransformerConfig};

    #[test]
    fn lr_law_anchors() {
        let spec = OptimSpec {
            batch_size: 4096,
            warmup_epochs: 40.0,
            total_epochs: 800,
            ..OptimSpec::default()
        };
        assert!((spec.peak_lr() - 2.4e-3).abs() < 1e-15);
        assert_eq!(effective_lr(&spec, 0.0), 0.0);
        assert!((effective_lr(&spec, 40.0) - 2.4e-3).abs() < 1e-15);
        assert!((effective_lr(&spec, 20.0) - 1.2e-3).abs() < 1e-15);
        assert!(effective_lr(&spec, 800.0).abs() < 1e-15);
    }

    #[test]
    fn monitor_values() {
        let same = Tensor::<f64>::from_fn(&[5, 3], |i| (i % 3) as f64);
        assert_eq!(collapse_monitor(&same), 0.0);
        let mut rng = rng::stream(1, &[]);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let x = Tensor::<f64>::from_fn(&[4000, 8], |_| rand_distr::Distribution::sample(&normal, &mut rng));
        assert!((collapse_monitor(&x) - 1.0).abs() < 0.1);
        let flipped = x.gather_rows(&(0..4000).rev().collect::<Vec<_>>());
        assert!((collapse_monitor(&flipped) - collapse_monitor(&x)).abs() < 1e-12);
    }

    #[test]
    fn adamw_skips_decay_for_exempt_params() {
        let mut p = Parameters::<f64>::new();
        p.push("w", crate::network::ParamKind::Weight, Tensor::filled(&[2], 1.0));
        p.push("b", crate::network::ParamKind::NoDecay, Tensor::filled(&[2], 1.0));
        p.push("pos", crate::network::ParamKind::Buffer, Tensor::filled(&[2], 1.0));
        let mut opt = AdamW::new(&p);
        let zero = Some(Tensor::zeros(&[2]));
        opt.step(&mut p, &[zero.clone(), zero, None], 0.1, &OptimSpec::default(), None);
        assert!((p.get("w").unwrap().data()[0] - (1.0 - 0.1 * 0.05)).abs() < 1e-15);
        assert_eq!(p.get("b").unwrap().data()[0], 1.0);
        assert_eq!(p.get("pos").unwrap().data()[0], 1.0);
    }

    fn micro() -> ModelConfig {
        ModelConfig {
            image_side: 16,
            patch_side: 4,
            encoder: TransformerConfig {
                depth: 1,
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
                hidden: vec![16, 16],
                out_dim: 16,
            },
            ..ModelConfig::default()
        }
    }

    fn corpus() -> Corpus {
        synthesize(&SynthSpec {
            num_videos: 6,
            num_images: 2,
            frames_per_video: 4,
            canvas: 16,
            patch_side: 4,
            shape_size: (3, 5),
            ..SynthSpec::default()
        })
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            optim: OptimSpec {
                batch_size: 4,
                warmup_epochs: 1.0,
                total_epochs: 4,
                ..OptimSpec::default()
            },
            lambda: LambdaSchedule {
                switch_fraction: 0.0,
                ..LambdaSchedule::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn decoder_gets_no_gradient_from_contrastive_term_alone() {
        let c = corpus();
        let t = Trainer::<f64>::new(micro(), cfg(), c.records().len()).unwrap();
        let pairs = t.batch(&c).unwrap();
        let mut rng = rng::stream(0, &[]);
        let only_c = TermWeights {
            recon: 0.0,
            contrastive: 1.0,
        };
        let sg = compute_gradients(&t.model, &pairs, &t.cfg, only_c, &mut rng).unwrap();
        for (p, g) in t.model.params.iter().zip(&sg.grads) {
            let Some(g) = g else { continue };
            let norm = g.l2_norm();
            if p.name.starts_with("dec.") || p.name == "mask_token" {
                assert_eq!(norm, 0.0, "{}", p.name);
            }
        }
        let both = TermWeights {
            recon: 1.0,
            contrastive: 1.0,
        };
        let sg = compute_gradients(&t.model, &pairs, &t.cfg, both, &mut rng::stream(0, &[])).unwrap();
        for (p, g) in t.model.params.iter().zip(&sg.grads) {
            if let Some(g) = g {
                assert!(g.l2_norm() > 0.0, "{} has no gradient", p.name);
            }
        }
        assert!((sg.report.total - (sg.report.recon + sg.report.contrastive)).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_keeps_total_equal_to_recon() {
        let c = corpus();
        let mut cfg = cfg();
        cfg.lambda.switch_fraction = 0.5;
        let mut t = Trainer::<f64>::new(micro(), cfg, c.records().len()).unwrap();
        let row = t.advance(&c).unwrap();
        assert_eq!(row.lambda, 0.0);
        assert!(row.contrastive > 0.0);
        assert_eq!(row.total, row.recon);
    }

    #[test]
    fn steps_are_deterministic_and_resume_exactly() {
        let c = corpus();
        let mut a = Trainer::<f32>::new(micro(), cfg(), c.records().len()).unwrap();
        let mut b = a.clone();
        let ra = a.advance(&c).unwrap();
        let rb = b.advance(&c).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.model.params, b.model.params);

        let bytes = a.to_checkpoint().unwrap().to_bytes().unwrap();
        let mut resumed = Trainer::<f32>::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        for _ in 0..2 {
            assert_eq!(a.advance(&c).unwrap(), resumed.advance(&c).unwrap());
        }
        assert_eq!(a.model.params, resumed.model.params);
        assert_eq!(a.opt, resumed.opt);
    }

    #[test]
    fn simsiam_config_checks() {
        let mut m = micro();
        m.head.out_dim = 8;
        let cfg = TrainConfig {
            objective: Objective::MaeSimsiam,
            ..cfg()
        };
        assert!(validate(&m, &cfg).unwrap_err().to_string().contains("out_dim"));
        m.use_cls_token = false;
        let msg = validate(&m, &cfg).unwrap_err().to_string();
        assert!(msg.contains("use_cls_token") && msg.contains("out_dim"), "{msg}");
    }
}

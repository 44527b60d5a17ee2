//! Vision transformer encoder, lightweight decoder, pooling, projection head,
//! video inflation and the checkpoint archive.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{BatchNormMode, BatchStats, Graph, PoolMethod, Var};
use crate::patches::{MaskPlan, PatchConfig};
use crate::rng::{self, tag};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum of the head's batch norms.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: f64,
}

impl TransformerConfig {
    fn hidden(&self) -> usize {
        ((self.width as f64) * self.mlp_ratio).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Widths of the affine → batch norm → ReLU stages.
    pub hidden: Vec<usize>,
    pub out_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_side: usize,
    /// Frames per tubelet: 1 for an image model, `T` after inflation.
    pub frames: usize,
    pub encoder: TransformerConfig,
    pub decoder: TransformerConfig,
    pub pooling: PoolMethod,
    pub gem_p: f64,
    pub head: HeadConfig,
    pub tau: f64,
    /// Learn `log(1/τ)` instead of keeping τ fixed.
    pub learnable_log_tau: bool,
    /// Multiplier on the contrastive term (2 reproduces the pseudocode).
    pub loss_scale: f64,
    pub use_cls_token: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            patch_side: 8,
            frames: 1,
            encoder: TransformerConfig {
                depth: 4,
                heads: 3,
                width: 192,
                mlp_ratio: 4.0,
            },
            decoder: TransformerConfig {
                depth: 2,
                heads: 3,
                width: 96,
                mlp_ratio: 4.0,
            },
            pooling: PoolMethod::Mean,
            gem_p: 3.0,
            head: HeadConfig {
                hidden: vec![512, 512],
                out_dim: 128,
            },
            tau: 0.1,
            learnable_log_tau: false,
            loss_scale: 1.0,
            use_cls_token: true,
        }
    }
}

impl ModelConfig {
    /// Small enough to train for hundreds of steps in seconds.
    pub fn tiny() -> Self {
        Self {
            image_side: 32,
            patch_side: 8,
            encoder: TransformerConfig {
                depth: 2,
                heads: 2,
                width: 64,
                mlp_ratio: 2.0,
            },
            decoder: TransformerConfig {
                depth: 1,
                heads: 2,
                width: 32,
                mlp_ratio: 2.0,
            },
            head: HeadConfig {
                hidden: vec![128, 128],
                out_dim: 64,
            },
            ..Self::default()
        }
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            image_side: self.image_side,
            patch_side: self.patch_side,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.patch_config().num_tokens()
    }

    /// Width of one input token (all frames of a tubelet).
    pub fn token_dim(&self) -> usize {
        self.patch_config().patch_dim() * self.frames
    }

    /// Every violated constraint, one per entry.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(e) = self.patch_config().validate() {
            v.push(e.to_string());
        }
        if self.frames < 1 {
            v.push("frames must be >= 1".into());
        }
        for (name, t) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            if t.heads == 0 || t.width % t.heads != 0 {
                v.push(format!("{name} width {} not divisible by {} heads", t.width, t.heads));
            }
            if t.width % 2 != 0 {
                v.push(format!("{name} width {} must be even for sine-cosine positions", t.width));
            }
            if t.hidden() == 0 {
                v.push(format!("{name} mlp_ratio {} gives an empty hidden layer", t.mlp_ratio));
            }
        }
        if self.encoder.depth == 0 {
            v.push("encoder depth must be >= 1".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            v.push(format!("tau {} must be > 0", self.tau));
        }
        if !(self.gem_p.is_finite() && self.gem_p >= 1.0) {
            v.push(format!("gem_p {} must be >= 1", self.gem_p));
        }
        if self.head.out_dim == 0 || self.head.hidden.contains(&0) {
            v.push("head widths must be positive".into());
        }
        if !(self.loss_scale.is_finite() && self.loss_scale > 0.0) {
            v.push(format!("loss_scale {} must be > 0", self.loss_scale));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// 1-D sine-cosine code of `pos` over `dim` channels.
fn sincos_1d(pos: f64, dim: usize, out: &mut [f64]) {
    let n_sin = dim.div_ceil(2);
    let n_freq = n_sin.max(1) as f64;
    for (i, o) in out.iter_mut().enumerate().take(dim) {
        let k = if i < n_sin { i } else { i - n_sin };
        let omega = 1.0 / 10000f64.powf(k as f64 / n_freq);
        *o = if i < n_sin { (pos * omega).sin() } else { (pos * omega).cos() };
    }
}

/// Fixed 2-D factorized sine-cosine table for a `√L × √L` grid: the first half
/// of each row encodes the grid row, the second half the grid column.
pub fn sincos_posembed<T: Scalar>(num_tokens: usize, dim: usize) -> Result<Tensor<T>> {
    let side = (num_tokens as f64).sqrt().round() as usize;
    if side * side != num_tokens {
        return Err(Error::Shape(format!("{num_tokens} tokens do not form a square grid")));
    }
    if dim % 2 != 0 || dim == 0 {
        return Err(Error::Shape(format!("position width {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; num_tokens * dim];
    for r in 0..side {
        for c in 0..side {
            let row = &mut out[(r * side + c) * dim..][..dim];
            sincos_1d(r as f64, half, &mut row[..half]);
            sincos_1d(c as f64, half, &mut row[half..]);
        }
    }
    Tensor::new(vec![num_tokens, dim], out.into_iter().map(T::of).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Trainable and weight-decayed.
    Weight,
    /// Trainable, exempt from weight decay (norms, biases, tokens).
    NoDecay,
    /// Fixed table or running statistic.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != Self::Buffer
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Parameters<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Parameters<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, kind, value });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: usize) -> &Param<T> {
        &self.entries[id]
    }

    pub fn entry_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.entries[id]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(move |i| &mut self.entries[i].value)
    }

    fn expect(&self, name: &str) -> &Tensor<T> {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|p| p.kind.trainable()).map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            for &s in p.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            buf.clear();
            p.value.data().iter().for_each(|&v| v.write_le(&mut buf));
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}

fn xavier<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::of(rng.random_range(-a..=a)))
}

fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = Normal::new(0.0, std).expect("std > 0");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = n.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::of(v);
        }
    })
}

fn push_linear<T: Scalar>(p: &mut Parameters<T>, name: &str, i: usize, o: usize, rng: &mut impl Rng) {
    p.push(format!("{name}.w"), ParamKind::Weight, xavier(i, o, rng));
    p.push(format!("{name}.b"), ParamKind::NoDecay, Tensor::zeros(&[o]));
}

fn push_norm<T: Scalar>(p: &mut Parameters<T>, name: &str, d: usize) {
    p.push(format!("{name}.g"), ParamKind::NoDecay, Tensor::filled(&[d], T::one()));
    p.push(format!("{name}.b"), ParamKind::NoDecay, Tensor::zeros(&[d]));
}

fn push_blocks<T: Scalar>(p: &mut Parameters<T>, prefix: &str, t: &TransformerConfig, rng: &mut impl Rng) {
    for i in 0..t.depth {
        let b = format!("{prefix}.{i}");
        push_norm(p, &format!("{b}.ln1"), t.width);
        push_linear(p, &format!("{b}.qkv"), t.width, 3 * t.width, rng);
        push_linear(p, &format!("{b}.proj"), t.width, t.width, rng);
        push_norm(p, &format!("{b}.ln2"), t.width);
        push_linear(p, &format!("{b}.fc1"), t.width, t.hidden(), rng);
        push_linear(p, &format!("{b}.fc2"), t.hidden(), t.width, rng);
    }
}

/// Graph handles for every parameter, parallel to [`Parameters`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Encoder output for `n` samples of `seq` rows each (class token first when
/// present).
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub x: Var,
    pub n: usize,
    pub seq: usize,
    pub cls: bool,
}

impl Encoded {
    pub fn tokens_per_sample(&self) -> usize {
        self.seq - usize::from(self.cls)
    }
}

/// Whether the head's batch norms use batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    Train,
    Eval,
}

/// Batch statistics measured by the head, keyed by stage.
pub type HeadStats<T> = Vec<(usize, BatchStats<T>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: Parameters<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let rng = &mut rng;
        let (e, d) = (cfg.encoder, cfg.decoder);
        let l = cfg.num_tokens();
        let mut p = Parameters::new();
        push_linear(&mut p, "patch_embed", cfg.token_dim(), e.width, rng);
        if cfg.use_cls_token {
            p.push("cls_token", ParamKind::NoDecay, trunc_normal(&[1, e.width], 0.02, rng));
        }
        p.push("enc.pos", ParamKind::Buffer, sincos_posembed(l, e.width)?);
        push_blocks(&mut p, "enc", &e, rng);
        push_norm(&mut p, "enc.norm", e.width);

        push_linear(&mut p, "dec.embed", e.width, d.width, rng);
        p.push("mask_token", ParamKind::NoDecay, trunc_normal(&[1, d.width], 0.02, rng));
        p.push("dec.pos", ParamKind::Buffer, sincos_posembed(l, d.width)?);
        push_blocks(&mut p, "dec", &d, rng);
        push_norm(&mut p, "dec.norm", d.width);
        push_linear(&mut p, "dec.pred", d.width, cfg.token_dim(), rng);

        let mut width = e.width;
        for (k, &h) in cfg.head.hidden.iter().enumerate() {
            push_linear(&mut p, &format!("head.{k}"), width, h, rng);
            push_norm(&mut p, &format!("head.{k}.bn"), h);
            p.push(format!("head.{k}.bn.mean"), ParamKind::Buffer, Tensor::zeros(&[h]));
            p.push(format!("head.{k}.bn.var"), ParamKind::Buffer, Tensor::filled(&[h], T::one()));
            width = h;
        }
        push_linear(&mut p, "head.out", width, cfg.head.out_dim, rng);
        if cfg.learnable_log_tau {
            p.push("log_inv_tau", ParamKind::NoDecay, Tensor::scalar(T::of((1.0 / cfg.tau).ln())));
        }
        Ok(Self { cfg, params: p })
    }

    /// Puts every parameter on the tape. Buffers are constants; trainable
    /// parameters require gradient when `trainable` says so.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&Param<T>) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), p.kind.trainable() && trainable(p)))
            .collect();
        Bound { vars }
    }

    fn v(&self, b: &Bound, name: &str) -> Var {
        b.var(self.params.id(name).unwrap_or_else(|| panic!("missing parameter {name}")))
    }

    fn linear(&self, g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = self.v(b, &format!("{name}.w"));
        let bias = self.v(b, &format!("{name}.b"));
        g.linear(x, w, Some(bias))
    }

    fn norm(&self, g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let gamma = self.v(b, &format!("{name}.g"));
        let beta = self.v(b, &format!("{name}.b"));
        g.layer_norm(x, gamma, beta, T::of(LN_EPS))
    }

    /// Pre-norm block. `drop` holds per-row residual-branch multipliers
    /// (stochastic depth) when given.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        prefix: &str,
        x: Var,
        n: usize,
        seq: usize,
        heads: usize,
        drop: Option<&[T]>,
    ) -> Result<Var> {
        let h = self.norm(g, b, &format!("{prefix}.ln1"), x)?;
        let qkv = self.linear(g, b, &format!("{prefix}.qkv"), h)?;
        let a = g.attention(qkv, n, seq, heads)?;
        let mut o = self.linear(g, b, &format!("{prefix}.proj"), a)?;
        if let Some(f) = drop {
            o = g.scale_rows(o, f.to_vec())?;
        }
        let x = g.add(x, o)?;
        let h = self.norm(g, b, &format!("{prefix}.ln2"), x)?;
        let h = self.linear(g, b, &format!("{prefix}.fc1"), h)?;
        let h = g.gelu(h);
        let mut o = self.linear(g, b, &format!("{prefix}.fc2"), h)?;
        if let Some(f) = drop {
            o = g.scale_rows(o, f.to_vec())?;
        }
        g.add(x, o)
    }

    /// Encodes `n` samples whose kept tokens are stacked row-wise in
    /// `tokens` (`[n · k, token_dim]`), with `positions[i]` the raster index
    /// of each kept token of sample `i`.
    ///
    /// `drop_path[l][i]` is the residual multiplier of block `l` for sample `i`.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        tokens: Var,
        positions: &[Vec<usize>],
        drop_path: Option<&[Vec<T>]>,
    ) -> Result<Encoded> {
        let n = positions.len();
        let k = positions.first().map_or(0, Vec::len);
        if positions.iter().any(|p| p.len() != k) || g.value(tokens).rows() != n * k {
            return Err(Error::Shape(format!(
                "{} token rows for {n} samples of {k} positions",
                g.value(tokens).rows()
            )));
        }
        if g.value(tokens).cols() != self.cfg.token_dim() {
            return Err(Error::Shape(format!(
                "token width {} but the model expects {}",
                g.value(tokens).cols(),
                self.cfg.token_dim()
            )));
        }
        let l = self.cfg.num_tokens();
        if let Some(&bad) = positions.iter().flatten().find(|&&p| p >= l) {
            return Err(Error::Shape(format!("position {bad} outside the {l}-token grid")));
        }
        let x = self.linear(g, b, "patch_embed", tokens)?;
        let pos_table = self.v(b, "enc.pos");
        let pos = g.gather_rows(pos_table, positions.iter().flatten().copied().collect())?;
        let mut x = g.add(x, pos)?;
        let cls = self.cfg.use_cls_token;
        let seq = k + usize::from(cls);
        if cls {
            let token = self.v(b, "cls_token");
            let joined = g.concat_rows(&[x, token])?;
            let mut idx = Vec::with_capacity(n * seq);
            for i in 0..n {
                idx.push(n * k);
                idx.extend(i * k..(i + 1) * k);
            }
            x = g.gather_rows(joined, idx)?;
        }
        let e = self.cfg.encoder;
        for layer in 0..e.depth {
            let rows: Option<Vec<T>> = drop_path.map(|d| {
                d[layer].iter().flat_map(|&f| std::iter::repeat_n(f, seq)).collect()
            });
            x = self.block(g, b, &format!("enc.{layer}"), x, n, seq, e.heads, rows.as_deref())?;
        }
        let x = self.norm(g, b, "enc.norm", x)?;
        Ok(Encoded { x, n, seq, cls })
    }

    /// Predicts every token of every sample from the encoded visible tokens:
    /// `[n · L, token_dim]` in raster order.
    pub fn decode(&self, g: &mut Graph<T>, b: &Bound, enc: &Encoded, plans: &[MaskPlan]) -> Result<Var> {
        let l = self.cfg.num_tokens();
        let k = enc.tokens_per_sample();
        if plans.len() != enc.n || plans.iter().any(|p| p.len() != l || p.visible_idx().len() != k) {
            return Err(Error::Shape(format!(
                "{} plans do not match {} encoded samples of {k} tokens",
                plans.len(),
                enc.n
            )));
        }
        let y = self.linear(g, b, "dec.embed", enc.x)?;
        let mask = self.v(b, "mask_token");
        let joined = g.concat_rows(&[y, mask])?;
        let mask_row = enc.n * enc.seq;
        let off = usize::from(enc.cls);
        let mut idx = Vec::with_capacity(enc.n * l);
        for (i, plan) in plans.iter().enumerate() {
            for &pos in plan.restore_perm() {
                idx.push(if pos < k { i * enc.seq + off + pos } else { mask_row });
            }
        }
        let full = g.gather_rows(joined, idx)?;
        let pos_table = self.v(b, "dec.pos");
        let pos = g.gather_rows(pos_table, (0..enc.n).flat_map(|_| 0..l).collect())?;
        let mut x = g.add(full, pos)?;
        let d = self.cfg.decoder;
        for layer in 0..d.depth {
            x = self.block(g, b, &format!("dec.{layer}"), x, enc.n, l, d.heads, None)?;
        }
        let x = self.norm(g, b, "dec.norm", x)?;
        self.linear(g, b, "dec.pred", x)
    }

    fn patch_rows(&self, g: &mut Graph<T>, enc: &Encoded) -> Result<Var> {
        if !enc.cls {
            return Ok(enc.x);
        }
        let idx = (0..enc.n).flat_map(|i| (i * enc.seq + 1)..((i + 1) * enc.seq)).collect();
        g.gather_rows(enc.x, idx)
    }

    /// Pooled `[n, D]` features over patch tokens (class token excluded).
    pub fn pool(&self, g: &mut Graph<T>, enc: &Encoded) -> Result<Var> {
        self.pool_with(g, enc, self.cfg.pooling, T::of(self.cfg.gem_p))
    }

    pub fn pool_with(&self, g: &mut Graph<T>, enc: &Encoded, method: PoolMethod, gem_p: T) -> Result<Var> {
        let x = self.patch_rows(g, enc)?;
        g.pool(x, enc.tokens_per_sample(), method, gem_p)
    }

    /// Class-token rows `[n, D]`.
    pub fn cls(&self, g: &mut Graph<T>, enc: &Encoded) -> Result<Var> {
        if !enc.cls {
            return Err(Error::Config("model has no class token".into()));
        }
        g.gather_rows(enc.x, (0..enc.n).map(|i| i * enc.seq).collect())
    }

    /// Projection head. Predictor and target share these weights, so the same
    /// function serves both; each call normalizes with its own batch
    /// statistics in training mode. Rows are ℓ2-normalized when `normalize`.
    pub fn project(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        pooled: Var,
        mode: HeadMode,
        normalize: bool,
    ) -> Result<(Var, HeadStats<T>)> {
        let mut x = pooled;
        let mut stats = Vec::new();
        for k in 0..self.cfg.head.hidden.len() {
            x = self.linear(g, b, &format!("head.{k}"), x)?;
            let gamma = self.v(b, &format!("head.{k}.bn.g"));
            let beta = self.v(b, &format!("head.{k}.bn.b"));
            let (y, s) = match mode {
                HeadMode::Train => g.batch_norm(x, Some(gamma), Some(beta), BatchNormMode::Train, T::of(BN_EPS))?,
                HeadMode::Eval => {
                    let mean = self.params.expect(&format!("head.{k}.bn.mean")).data();
                    let var = self.params.expect(&format!("head.{k}.bn.var")).data();
                    g.batch_norm(x, Some(gamma), Some(beta), BatchNormMode::Eval { mean, var }, T::of(BN_EPS))?
                }
            };
            if let Some(s) = s {
                stats.push((k, s));
            }
            x = g.relu(y);
        }
        x = self.linear(g, b, "head.out", x)?;
        if normalize {
            x = g.l2_normalize(x);
        }
        Ok((x, stats))
    }

    /// Folds measured batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &HeadStats<T>) {
        let m = T::of(BN_MOMENTUM);
        for (k, s) in stats {
            for (name, fresh) in [("mean", &s.mean), ("var", &s.var)] {
                let buf = self.params.get_mut(&format!("head.{k}.bn.{name}")).expect("bn buffer");
                for (r, &f) in buf.data_mut().iter_mut().zip(fresh.iter()) {
                    *r = (T::one() - m) * *r + m * f;
                }
            }
        }
    }

    /// Inverse temperature as a graph node: a constant `1/τ`, or `exp` of the
    /// learnable log when enabled.
    pub fn inv_temperature(&self, g: &mut Graph<T>, b: &Bound) -> Var {
        if self.cfg.learnable_log_tau {
            let v = self.v(b, "log_inv_tau");
            g.exp(v)
        } else {
            g.constant(Tensor::scalar(T::of(1.0 / self.cfg.tau)))
        }
    }

    /// Names of trainable parameters in encoder stage order: `Some(0)` is the
    /// stem (patch embedding, class token), `Some(i + 1)` block `i`, `None`
    /// everything else.
    pub fn encoder_stage(&self, name: &str) -> Option<usize> {
        if name.starts_with("patch_embed") || name == "cls_token" || name == "enc.pos" {
            return Some(0);
        }
        let rest = name.strip_prefix("enc.")?;
        let idx: usize = rest.split('.').next()?.parse().ok()?;
        Some(idx + 1)
    }

    /// The same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = Parameters::new();
        for p in self.params.iter() {
            params.push(p.name.clone(), p.kind, p.value.cast());
        }
        Model {
            cfg: self.cfg.clone(),
            params,
        }
    }

    /// Video-capable copy whose tokenizer spans `t` times as many frames. The
    /// patch-embedding kernel is replicated along time and scaled by `1/t`;
    /// attention and every other weight are copied unchanged. The
    /// reconstruction head is tiled so each frame is predicted alike.
    pub fn inflate_to_video(&self, t: usize) -> Result<Self> {
        if t < 1 {
            return Err(Error::Config("inflation length must be >= 1".into()));
        }
        let mut cfg = self.cfg.clone();
        cfg.frames *= t;
        let mut params = Parameters::new();
        let inv = T::one() / T::of(t as f64);
        for p in self.params.iter() {
            let value = match p.name.as_str() {
                "patch_embed.w" => {
                    let src = p.value.map(|v| v * inv);
                    let mut data = Vec::with_capacity(src.numel() * t);
                    for _ in 0..t {
                        data.extend_from_slice(src.data());
                    }
                    Tensor::new(vec![src.rows() * t, src.cols()], data)?
                }
                "dec.pred.w" | "dec.pred.b" => {
                    let (r, c) = (p.value.rows(), p.value.cols());
                    let mut data = Vec::with_capacity(p.value.numel() * t);
                    for i in 0..r {
                        for _ in 0..t {
                            data.extend_from_slice(p.value.row(i));
                        }
                    }
                    let shape = if p.value.shape().len() == 1 { vec![c * t] } else { vec![r, c * t] };
                    Tensor::new(shape, data)?
                }
                _ => p.value.clone(),
            };
            params.push(p.name.clone(), p.kind, value);
        }
        Ok(Self { cfg, params })
    }
}

/// Per-dimension population standard deviation of `x: [N, D]`, averaged over
/// dimensions.
pub fn mean_feature_std<T: Scalar>(x: &Tensor<T>) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    if n == 0 || d == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| x.row(i)[j].as_f64()).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.row(i)[j].as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}

const MAGIC: &[u8; 8] = b"VICMAECK";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<ParamKind>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    dtype: String,
    config: ModelConfig,
    step: u64,
    #[serde(default)]
    state: serde_json::Value,
    params: Vec<TensorEntry>,
    #[serde(default)]
    extra: Vec<TensorEntry>,
}

/// Model, step counter, opaque run state and any extra named tensors (for
/// example optimizer moments).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub step: u64,
    pub state: serde_json::Value,
    pub extra: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Model<T>, step: u64) -> Self {
        Self {
            model,
            step,
            state: serde_json::Value::Null,
            extra: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entry = |name: &str, t: &Tensor<T>, kind| TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            kind,
        };
        let header = Header {
            format: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            config: self.model.cfg.clone(),
            step: self.step,
            state: self.state.clone(),
            params: self.model.params.iter().map(|p| entry(&p.name, &p.value, Some(p.kind))).collect(),
            extra: self.extra.iter().map(|(n, t)| entry(n, t, None)).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self.model.params.iter().map(|p| &p.value).chain(self.extra.iter().map(|(_, t)| t));
        for t in tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", header.format)));
        }
        if header.dtype != T::DTYPE {
            return Err(bad(&format!("archive holds {} values, expected {}", header.dtype, T::DTYPE)));
        }
        header.config.validate()?;
        let mut cursor = 16 + hlen;
        let mut take = |e: &TensorEntry| -> Result<Tensor<T>> {
            let n: usize = e.shape.iter().product();
            let end = cursor + n * T::BYTES;
            let raw = bytes.get(cursor..end).ok_or_else(|| bad(&format!("truncated data for {}", e.name)))?;
            cursor = end;
            Tensor::new(e.shape.clone(), raw.chunks_exact(T::BYTES).map(T::read_le).collect())
        };
        let mut params = Parameters::new();
        for e in &header.params {
            let kind = e.kind.ok_or_else(|| bad(&format!("parameter {} lacks a kind", e.name)))?;
            let t = take(e)?;
            params.push(e.name.clone(), kind, t);
        }
        let extra = header
            .extra
            .iter()
            .map(|e| take(e).map(|t| (e.name.clone(), t)))
            .collect::<Result<Vec<_>>>()?;
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            model: Model {
                cfg: header.config,
                params,
            },
            step: header.step,
            state: header.state,
            extra,
        })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// SHA-256 of a file, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

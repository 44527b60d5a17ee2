use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use vicmae::config::{ExperimentConfig, SEED_ENV};
use vicmae::corpus::{self, Corpus, Split};
use vicmae::evalsuite::{self, EvalResult, FeatureSource, TemporalMode};
use vicmae::graph::PoolMethod;
use vicmae::sampling::{AugmentPolicy, SamplingPolicy};
use vicmae::trainer::{self, Objective, PretrainOptions};
use vicmae::Checkpoint;

#[derive(Parser)]
#[command(name = "vicmae", version, about = "Pretrain and evaluate masked + contrastive video/image encoders")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON experiment config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Override a config key, e.g. `--set train.mask_ratio=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Validate and print the resolved config without touching disk.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic moving-shapes corpus.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Write a manifest for a `<class>/<clip>/<frame>.png` tree.
    Pack {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        objective: Option<Objective>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Pretrain and probe once per value of one axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = ["frame_sep", "pooling", "augment"])]
        axis: String,
        /// Comma-separated cells; defaults to every value of the axis.
        #[arg(long)]
        values: Option<String>,
    },
}

#[derive(Args, Clone)]
struct EvalIo {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    Probe {
        #[command(flatten)]
        io: EvalIo,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Probe the class token instead of pooled tokens.
        #[arg(long)]
        cls: bool,
    },
    Finetune {
        #[command(flatten)]
        io: EvalIo,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Inflate an image checkpoint to clips of this many frames first.
        #[arg(long)]
        inflate: Option<usize>,
    },
    Semi {
        #[command(flatten)]
        io: EvalIo,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        inflate: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    Multiview {
        #[command(flatten)]
        io: EvalIo,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        spatial: Option<usize>,
    },
    Temporal {
        #[command(flatten)]
        io: EvalIo,
        #[arg(long, default_value = "shuffled")]
        mode: TemporalMode,
        #[arg(long)]
        perms: Option<usize>,
    },
}

/// Usage and validation problems exit with 2, everything else with 1.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<vicmae::Error>() {
            Some(vicmae::Error::Config(msg)) => Failure::Usage(msg.clone()),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<vicmae::Error> for Failure {
    fn from(e: vicmae::Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: invalid configuration");
            for line in msg.split("; ") {
                eprintln!("  - {line}");
            }
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn resolve(common: &Common, extra: &[String]) -> Outcome<ExperimentConfig> {
    let value: Value = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => Value::Null,
    };
    let mut overrides = common.set.clone();
    overrides.extend_from_slice(extra);
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = ExperimentConfig::from_value(value, &overrides)
        .map_err(|e| Failure::Usage(e.to_string()))?
        .resolved();
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Failure::Usage(v.join("; ")));
    }
    Ok(cfg)
}

fn print_config(cfg: &ExperimentConfig) -> Outcome {
    println!("{}", serde_json::to_string_pretty(cfg).map_err(anyhow::Error::from)?);
    Ok(())
}

fn pick(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Outcome<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Failure::Usage(format!("--{what} is required (or set paths.{what} in the config)")))
}

fn open(path: &Path) -> Outcome<Corpus> {
    Ok(Corpus::open(path).with_context(|| format!("loading {}", path.display()))?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    println!("{}", path.display());
    Ok(())
}

fn load_model(path: &Path) -> Outcome<vicmae::Model> {
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?.model)
}

fn run(cmd: Cmd) -> Outcome {
    match cmd {
        Cmd::Gen { common, out, split } => {
            let mut cfg = resolve(&common, &[])?;
            cfg.corpus.seed = cfg.seed;
            cfg.corpus.split = split;
            cfg.corpus.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            if common.dry_run {
                return print_config(&cfg);
            }
            corpus::generate_synthetic(&cfg.corpus, &out)?;
            println!("{}", out.join(corpus::MANIFEST_FILE).display());
            Ok(())
        }
        Cmd::Pack { src, out, split } => {
            let mut manifest = corpus::pack_directory(&src, split)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let same = fs::canonicalize(&src).ok() == fs::canonicalize(&out).ok();
            if !same {
                let root = fs::canonicalize(&src).with_context(|| format!("resolving {}", src.display()))?;
                for r in &mut manifest.records {
                    for p in &mut r.frame_paths {
                        *p = root.join(&*p).to_string_lossy().into_owned();
                    }
                }
            }
            let path = out.join(corpus::MANIFEST_FILE);
            manifest.write(&path)?;
            println!("{}", path.display());
            Ok(())
        }
        Cmd::Pretrain {
            common,
            data,
            out,
            objective,
            resume,
            stop_at,
        } => {
            let extra: Vec<String> = objective.map(|o| format!("objective={o}")).into_iter().collect();
            let cfg = resolve(&common, &extra)?;
            if common.dry_run {
                return print_config(&cfg);
            }
            let data = pick(&data, &cfg.paths.data, "data")?;
            let out = pick(&out, &cfg.paths.out, "out")?;
            let corpus = open(&data)?;
            let outcome = trainer::pretrain::<f32>(
                &corpus,
                &cfg.model,
                &cfg.train,
                &out,
                &PretrainOptions { resume, stop_at },
            )?;
            write_json(&out.join("config.json"), &cfg)?;
            println!("{}", outcome.checkpoint.display());
            Ok(())
        }
        Cmd::Eval { cmd } => eval(cmd),
        Cmd::Ablate {
            common,
            data,
            val,
            out,
            axis,
            values,
        } => ablate(&common, data, val, out, &axis, values),
    }
}

fn eval(cmd: EvalCmd) -> Outcome {
    let io = match &cmd {
        EvalCmd::Probe { io, .. }
        | EvalCmd::Finetune { io, .. }
        | EvalCmd::Semi { io, .. }
        | EvalCmd::Multiview { io, .. }
        | EvalCmd::Temporal { io, .. } => io.clone(),
    };
    let cfg = resolve(&io.common, &[])?;
    if io.common.dry_run {
        return print_config(&cfg);
    }
    let data = pick(&io.data, &cfg.paths.data, "data")?;
    let out = pick(&io.out, &cfg.paths.out, "out")?;
    let model = load_model(&io.ckpt)?;
    let train = open(&data)?;
    let val_or = |val: &Option<PathBuf>| -> Outcome<Corpus> {
        match val.clone().or_else(|| cfg.paths.val.clone()) {
            Some(p) => open(&p),
            None => Ok(train.clone()),
        }
    };
    let inflated = |t: Option<usize>| -> Outcome<vicmae::Model> {
        Ok(match t {
            Some(t) => model.inflate_to_video(t)?,
            None => model.clone(),
        })
    };
    match cmd {
        EvalCmd::Probe { val, cls, .. } => {
            let mut spec = cfg.probe.clone();
            if cls {
                spec.feature = FeatureSource::Cls;
            }
            let r = evalsuite::linear_probe(&model, &train, &val_or(&val)?, &spec)?;
            write_json(&out.join("probe.json"), &r)
        }
        EvalCmd::Finetune { val, inflate, .. } => {
            let start = inflated(inflate)?;
            let ft = evalsuite::finetune(&start, &train, &val_or(&val)?, &cfg.finetune)?;
            let ckpt = out.join("finetuned.ckpt");
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            Checkpoint::new(ft.model, 0).save(&ckpt)?;
            write_json(&out.join("finetune.json"), &ft.result)
        }
        EvalCmd::Semi {
            val, inflate, fractions, ..
        } => {
            let start = inflated(inflate)?;
            let fractions = fractions.unwrap_or(cfg.semi.fractions.clone());
            let rs = evalsuite::semi_supervised_sweep(&start, &train, &val_or(&val)?, &fractions, &cfg.finetune)?;
            write_json(&out.join("semi.json"), &rs)
        }
        EvalCmd::Multiview { clips, spatial, .. } => {
            let mut views = cfg.video.views;
            views.clips = clips.unwrap_or(views.clips);
            views.spatial_views = spatial.unwrap_or(views.spatial_views);
            let r = evalsuite::multiview_video_eval(&model, &train, &views, cfg.seed)?;
            write_json(&out.join("multiview.json"), &r)
        }
        EvalCmd::Temporal { mode, perms, .. } => {
            let n = perms.unwrap_or(cfg.video.n_perms);
            let views = evalsuite::ViewSpec::default();
            let r = evalsuite::temporal_ablation(&model, &train, mode, n, &views, cfg.seed)?;
            write_json(&out.join(format!("temporal-{mode}.json")), &r)
        }
    }
}

#[derive(serde::Serialize)]
struct AblationRow {
    axis: String,
    value: String,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<EvalResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn default_values(axis: &str) -> &'static str {
    match axis {
        "frame_sep" => "0,2,4,8,D",
        "pooling" => "gem,max,mean",
        _ => "color,spatial,both",
    }
}

/// Applies one ablation cell to a copy of the base config.
fn cell_config(base: &ExperimentConfig, axis: &str, value: &str) -> Result<ExperimentConfig, String> {
    let mut cfg = base.clone();
    match axis {
        "frame_sep" => {
            cfg.train.sampling = match value {
                "D" | "d" => SamplingPolicy::distant(base.train.sampling.n_intervals.max(2)),
                "0" => SamplingPolicy::same_frame(),
                gap => SamplingPolicy::continuous(gap.parse().map_err(|_| format!("bad frame separation {gap:?}"))?),
            }
        }
        "pooling" => cfg.model.pooling = value.parse::<PoolMethod>().map_err(|e| e.to_string())?,
        _ => {
            let full = base.train.augment;
            let none = AugmentPolicy::identity();
            cfg.train.augment = match value {
                "color" => AugmentPolicy {
                    spatial: none.spatial,
                    ..full
                },
                "spatial" => AugmentPolicy {
                    color: none.color,
                    color_on_video: false,
                    ..full
                },
                "both" => full,
                other => return Err(format!("bad augmentation cell {other:?}")),
            }
        }
    }
    let v = cfg.violations();
    if v.is_empty() {
        Ok(cfg)
    } else {
        Err(v.join("; "))
    }
}

fn ablate(
    common: &Common,
    data: Option<PathBuf>,
    val: Option<PathBuf>,
    out: Option<PathBuf>,
    axis: &str,
    values: Option<String>,
) -> Outcome {
    let base = resolve(common, &[])?;
    let values = values.unwrap_or_else(|| default_values(axis).to_string());
    let cells: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if cells.is_empty() {
        return Err(Failure::Usage("--values lists no cells".into()));
    }
    let configs: Vec<_> = cells.iter().map(|c| cell_config(&base, axis, c)).collect();
    if common.dry_run {
        for (cell, c) in cells.iter().zip(&configs) {
            match c {
                Ok(_) => println!("{axis}={cell}: ok"),
                Err(e) => println!("{axis}={cell}: invalid ({e})"),
            }
        }
        return print_config(&base);
    }
    let data = pick(&data, &base.paths.data, "data")?;
    let out = pick(&out, &base.paths.out, "out")?;
    let train = open(&data)?;
    let val = match val.or_else(|| base.paths.val.clone()) {
        Some(p) => open(&p)?,
        None => train.clone(),
    };
    let mut rows = Vec::new();
    for (cell, c) in cells.iter().zip(configs) {
        let run_cell = |cfg: ExperimentConfig| -> anyhow::Result<EvalResult> {
            let dir = out.join(format!("{axis}-{cell}"));
            let o = trainer::pretrain::<f32>(&train, &cfg.model, &cfg.train, &dir, &PretrainOptions::default())?;
            let model = Checkpoint::load(&o.checkpoint)?.model;
            let mut r = evalsuite::linear_probe(&model, &train, &val, &cfg.probe)?;
            r.condition = format!("{axis}={cell}");
            Ok(r)
        };
        let row = match c.map_err(|e| anyhow!(e)).and_then(run_cell) {
            Ok(r) => AblationRow {
                axis: axis.into(),
                value: cell.clone(),
                status: "ok",
                result: Some(r),
                error: None,
            },
            Err(e) => AblationRow {
                axis: axis.into(),
                value: cell.clone(),
                status: "failed",
                result: None,
                error: Some(format!("{e:#}")),
            },
        };
        match &row.result {
            Some(r) => eprintln!("{axis:>10} {cell:>6}  top1 {:6.2}  top5 {:6.2}", r.top1, r.top5),
            None => eprintln!("{axis:>10} {cell:>6}  FAILED  {}", row.error.as_deref().unwrap_or("")),
        }
        rows.push(row);
    }
    write_json(&out.join(format!("ablation-{axis}.json")), &rows)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} of {} cells failed", rows.len())));
    }
    Ok(())
}

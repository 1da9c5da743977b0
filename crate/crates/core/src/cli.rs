//! Command-line front end. Every command resolves a [`RunConfig`], writes its
//! artifacts atomically and records the resolved config plus a version stamp
//! next to them.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{Preset, RunConfig};
use crate::data::{self, AVClip, MixConfig};
use crate::error::{Error, Result};
use crate::fusenet::FusionModel;
use crate::io;
use crate::localize::{self, HeatmapMode};
use crate::metrics::{self, MetricsRow};
use crate::pretext::{self, AlignDataset};
use crate::separate::{self, PhaseSource, SepDataset, SepModel};
use crate::signal::{self, StftConfig, WavEncoding, Waveform};
use crate::transfer::{self, ActionDataset, ActionModel};

#[derive(Debug, Parser)]
#[command(name = "avfusion", version, about = "Self-supervised audio-visual fusion on synthetic scenes")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Seed for data synthesis, initialization and batch order.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Refuse any nondeterministic shortcut; outputs are then byte-reproducible.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads (computation is single-threaded; recorded for the manifest).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// TOML (or .json) config layered over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Override one key, e.g. `--set pretext.schedule.total_steps=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic clips to disk.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_clips: usize,
        /// Class-balanced action clips plus a `labels.txt` manifest.
        #[arg(long)]
        actions: bool,
    },
    /// Train the alignment model.
    TrainAlign {
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out synchronization accuracy of an alignment checkpoint.
    EvalAlign {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Class activation maps: overlays for one clip, or hit rates on synthetic clips.
    Localize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Scale for `--mode fixed`.
        #[arg(long, default_value_t = 1.0)]
        max: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the on/off-screen separator.
    TrainSep {
        #[arg(long)]
        out: PathBuf,
        /// Alignment checkpoint to initialize from (scratch otherwise).
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Separate a clip's audio into on- and off-screen streams.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        /// Use this clip's audio as the off-screen track and also write references.
        #[arg(long)]
        mix_with: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PhaseArg::Mixture)]
        phase: PhaseArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune an action classifier.
    TrainCls {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// `clip-dir class-id` manifest (synthetic toy actions otherwise).
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Clip-level accuracy of an action classifier.
    EvalCls {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score estimated against reference stems (`fg.wav`, `bg.wav` per item directory).
    Metrics {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        ests: PathBuf,
        /// CSV destination.
        #[arg(long)]
        out: PathBuf,
        /// Resample both sides first (0 keeps the file rate).
        #[arg(long)]
        sample_rate: Option<u32>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    PerImage,
    Fixed,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PhaseArg {
    Predicted,
    Mixture,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainAlign { .. } => "train-align",
            Command::EvalAlign { .. } => "eval-align",
            Command::Localize { .. } => "localize",
            Command::TrainSep { .. } => "train-sep",
            Command::Separate { .. } => "separate",
            Command::TrainCls { .. } => "train-cls",
            Command::EvalCls { .. } => "eval-cls",
            Command::Metrics { .. } => "metrics",
        }
    }
}

/// Version stamp in `git describe` style: the crate version plus the build's
/// describe string when the build provided one.
pub fn version_stamp() -> String {
    match option_env!("AVFUSION_GIT_DESCRIBE") {
        Some(d) => format!("v{}-{}", env!("CARGO_PKG_VERSION"), d),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    version: String,
    command: &'a str,
    seed: u64,
    deterministic: bool,
    threads: usize,
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    deterministic: bool,
    threads: usize,
    command: &'static str,
}

impl Ctx {
    /// `config.toml` (resolved) and `run.json` in `dir`.
    fn record(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_atomic(&dir.join("config.toml"), self.cfg.to_toml()?.as_bytes())?;
        let m = RunManifest { version: version_stamp(), command: self.command, seed: self.seed, deterministic: self.deterministic, threads: self.threads };
        let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Schema(e.to_string()))?;
        io::write_atomic(&dir.join("run.json"), json.as_bytes())
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    if g.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let cfg = RunConfig::load(g.preset, g.config.as_deref(), &g.overrides)?;
    let ctx = Ctx { cfg, seed: g.seed, deterministic: g.deterministic, threads: g.threads, command: cli.command.name() };
    match cli.command {
        Command::GenData { out, n_clips, actions } => gen_data(&ctx, &out, n_clips, actions),
        Command::TrainAlign { out } => train_align(&ctx, &out),
        Command::EvalAlign { checkpoint, out } => eval_align(&ctx, &checkpoint, out.as_deref()),
        Command::Localize { checkpoint, clip, mode, max, out } => {
            let mode = match mode {
                None => ctx.cfg.localize.mode,
                Some(ModeArg::PerImage) => HeatmapMode::PerImage,
                Some(ModeArg::Fixed) => HeatmapMode::Fixed { max },
            };
            localize_cmd(&ctx, &checkpoint, clip.as_deref(), mode, &out)
        }
        Command::TrainSep { out, pretrained } => train_sep(&ctx, &out, pretrained.as_deref()),
        Command::Separate { checkpoint, clip, mix_with, phase, out } => {
            let phase = match phase {
                PhaseArg::Predicted => PhaseSource::Predicted,
                PhaseArg::Mixture => PhaseSource::Mixture,
            };
            separate_cmd(&ctx, &checkpoint, &clip, mix_with.as_deref(), phase, &out)
        }
        Command::TrainCls { out, pretrained, labels } => train_cls(&ctx, &out, pretrained.as_deref(), labels.as_deref()),
        Command::EvalCls { checkpoint, labels, out } => eval_cls(&ctx, &checkpoint, labels.as_deref(), out.as_deref()),
        Command::Metrics { refs, ests, out, sample_rate } => metrics_cmd(&ctx, &refs, &ests, &out, sample_rate),
    }
}

fn gen_data(ctx: &Ctx, out: &Path, n: usize, actions: bool) -> Result<()> {
    ctx.record(out)?;
    let fmt = ctx.cfg.data.frame_format;
    let mut labels = Vec::new();
    for i in 0..n {
        let name = format!("clip_{:05}", i);
        let seed = data::item_seed(ctx.seed, i as u64);
        let clip = if actions {
            let class = i % transfer::TOY_CLASSES.len();
            labels.push((PathBuf::from(&name), class));
            let t = &ctx.cfg.transfer;
            data::make_synthetic_scene(&transfer::class_scene(&t.scene, class, t.clip_frames), seed)?
        } else {
            data::make_synthetic_scene(&ctx.cfg.data.scene, seed)?
        };
        data::save_clip(&out.join(&name), &clip, fmt)?;
    }
    if actions {
        transfer::write_labels(&out.join("labels.txt"), &labels)?;
    }
    println!("wrote {} clips to {}", n, out.display());
    Ok(())
}

fn check_window(ctx: &Ctx) -> Result<()> {
    if ctx.cfg.fusion.frames != ctx.cfg.pretext.window_frames {
        return Err(Error::Incompatible(format!(
            "fused network takes {} frames, alignment windows have {}",
            ctx.cfg.fusion.frames, ctx.cfg.pretext.window_frames
        )));
    }
    Ok(())
}

fn align_csv(acc: &pretext::SyncAccuracy, n: usize) -> String {
    format!("pairs,pointwise,pairwise\n{},{:.6},{:.6}\n", n, acc.pointwise, acc.pairwise)
}

fn train_align(ctx: &Ctx, out: &Path) -> Result<()> {
    check_window(ctx)?;
    ctx.record(out)?;
    let cfg = &ctx.cfg.pretext;
    let ds = AlignDataset::synthesize(cfg, ctx.seed)?;
    let mut model = FusionModel::<f32>::build(&ctx.cfg.fusion, ctx.seed)?;
    let report = pretext::train_pretext(&ds, &mut model, cfg, ctx.seed)?;
    model.save(&out.join("checkpoint"))?;
    pretext::write_curve(&out.join("curve.csv"), &report.curve)?;
    let pairs = pretext::eval_pairs(&ds.eval, cfg, ctx.seed.wrapping_add(1))?;
    let acc = pretext::eval_sync(&model, &pairs)?;
    io::write_atomic(&out.join("metrics.csv"), align_csv(&acc, pairs.len()).as_bytes())?;
    println!("held-out accuracy {:.4} (pairwise {:.4}) after {} steps", acc.pointwise, acc.pairwise, report.curve.len());
    Ok(())
}

/// Held-out clips of [`AlignDataset::synthesize`] without the training half.
fn align_eval_clips(cfg: &pretext::PretextConfig, seed: u64) -> Result<Vec<AVClip>> {
    (cfg.train_clips..cfg.train_clips + cfg.eval_clips).map(|i| data::make_synthetic_scene(&cfg.scene, data::item_seed(seed, i as u64))).collect()
}

fn eval_align(ctx: &Ctx, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let model = FusionModel::<f32>::load(checkpoint)?;
    let cfg = &ctx.cfg.pretext;
    if model.config.frames != cfg.window_frames {
        return Err(Error::Incompatible(format!("checkpoint takes {} frames, windows have {}", model.config.frames, cfg.window_frames)));
    }
    let pairs = pretext::eval_pairs(&align_eval_clips(cfg, ctx.seed)?, cfg, ctx.seed.wrapping_add(1))?;
    let acc = pretext::eval_sync(&model, &pairs)?;
    if let Some(out) = out {
        ctx.record(out)?;
        io::write_atomic(&out.join("metrics.csv"), align_csv(&acc, pairs.len()).as_bytes())?;
    }
    println!("held-out accuracy {:.4} (pairwise {:.4}) on {} pairs", acc.pointwise, acc.pairwise, pairs.len());
    Ok(())
}

fn localize_cmd(ctx: &Ctx, checkpoint: &Path, clip: Option<&Path>, mode: HeatmapMode, out: &Path) -> Result<()> {
    let model = FusionModel::<f32>::load(checkpoint)?;
    let alpha = ctx.cfg.localize.alpha;
    ctx.record(out)?;
    match clip {
        Some(dir) => {
            let clip = data::load_clip(dir)?;
            let cam = localize::cam(&model, &clip.video, &clip.audio)?;
            localize::write_heatmaps(out, &clip.video, &cam, mode, alpha)?;
            println!("wrote {} overlays to {}", clip.video.frames, out.display());
        }
        None => {
            let scene = &ctx.cfg.data.scene;
            let clips = (0..ctx.cfg.localize.clips)
                .map(|i| data::make_synthetic_scene(scene, data::item_seed(ctx.seed, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let r = localize::localization_accuracy(&model, &clips)?;
            let csv = format!(
                "clips,frames,hit_rate,baseline,max_pooling_gap\n{},{},{:.6},{:.6},{:.3e}\n",
                r.clips, r.frames, r.hit_rate, r.baseline, r.max_pooling_gap
            );
            io::write_atomic(&out.join("localization.csv"), csv.as_bytes())?;
            let cam = localize::cam(&model, &clips[0].video, &clips[0].audio)?;
            localize::write_heatmaps(&out.join("clip_00000"), &clips[0].video, &cam, mode, alpha)?;
            println!("argmax in box {:.4} over {} frames (random-cell baseline {:.4})", r.hit_rate, r.frames, r.baseline);
        }
    }
    Ok(())
}

fn train_sep(ctx: &Ctx, out: &Path, pretrained: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg.separation;
    let pre = pretrained.map(FusionModel::<f32>::load).transpose()?;
    let fusion_cfg = pre.as_ref().map(|m| m.config.clone()).unwrap_or_else(|| ctx.cfg.fusion.clone());
    ctx.record(out)?;
    let ds = SepDataset::synthesize(cfg, ctx.seed)?;
    let mut model = separate::init_model(cfg, pre.as_ref(), &fusion_cfg, ctx.seed)?;
    let report = separate::train_separation(&ds, &mut model, cfg, ctx.seed)?;
    model.save(&out.join("checkpoint"))?;
    pretext::write_curve(&out.join("curve.csv"), &report.curve)?;
    let ev = separate::evaluate(&model, &separate::eval_mixtures(&ds.eval, cfg)?, cfg.ablation)?;
    io::write_atomic(&out.join("metrics.csv"), metrics::metrics_csv(&ev.rows).as_bytes())?;
    let summary = format!(
        "onoff,onoff_copy_baseline,sdr_fg,sdr_fg_mixture_baseline,sdr_bg\n{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        ev.onoff, ev.onoff_copy_baseline, ev.sdr_fg, ev.sdr_fg_mixture_baseline, ev.sdr_bg
    );
    io::write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
    println!(
        "on/off {:.4} (copy baseline {:.4}), fg SDR {:.2} dB (mixture baseline {:.2} dB)",
        ev.onoff, ev.onoff_copy_baseline, ev.sdr_fg, ev.sdr_fg_mixture_baseline
    );
    Ok(())
}

fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let tmp = path.with_extension("wav.tmp");
    signal::write_wav(&tmp, w, WavEncoding::Float32)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn separate_cmd(ctx: &Ctx, checkpoint: &Path, clip: &Path, mix_with: Option<&Path>, phase: PhaseSource, out: &Path) -> Result<()> {
    let model = SepModel::<f32>::load(checkpoint)?;
    let clip = data::load_clip(clip)?;
    ctx.record(out)?;
    let mix_cfg = MixConfig { stft: model.config.stft(), power: ctx.cfg.separation.power };
    let mixture = match mix_with {
        Some(other) => {
            let m = data::make_mixture(&clip, &data::load_clip(other)?, &mix_cfg)?;
            let refs = out.join("reference");
            std::fs::create_dir_all(&refs)?;
            write_wav(&refs.join("fg.wav"), &m.fg_wave)?;
            write_wav(&refs.join("bg.wav"), &m.bg_wave)?;
            write_wav(&out.join("mix.wav"), &m.mix_wave)?;
            m.mix_wave
        }
        None => signal::downmix_mono(&clip.audio),
    };
    let mix_spec = signal::stft(&mixture, &model.config.stft())?;
    let sep = model.separate(&mixture, &clip.video)?;
    let (fg, bg) = separate::reconstruct(&sep, &mix_spec, phase)?;
    write_wav(&out.join("fg.wav"), &fg)?;
    write_wav(&out.join("bg.wav"), &bg)?;
    io::save_spectrogram(&out.join("fg.avt"), &sep.fg)?;
    io::save_spectrogram(&out.join("bg.avt"), &sep.bg)?;
    io::save_png(&out.join("spectrograms.png"), &separate::spectrogram_panel(&[&mix_spec, &sep.fg, &sep.bg], model.config.log_eps)?)?;
    println!("wrote fg.wav, bg.wav and spectrograms to {}", out.display());
    Ok(())
}

fn labelled_clips(path: &Path) -> Result<Vec<(AVClip, usize)>> {
    transfer::read_labels(path)?.into_iter().map(|(dir, c)| Ok((data::load_clip(&dir)?, c))).collect()
}

fn train_cls(ctx: &Ctx, out: &Path, pretrained: Option<&Path>, labels: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg.transfer;
    let pre = pretrained.map(FusionModel::<f32>::load).transpose()?;
    let fusion_cfg = pre.as_ref().map(|m| m.config.clone()).unwrap_or_else(|| ctx.cfg.fusion.clone());
    let (train, eval) = match labels {
        Some(p) => (labelled_clips(p)?, Vec::new()),
        None => {
            let ds = ActionDataset::synthesize(cfg, ctx.seed)?;
            (ds.train, ds.eval)
        }
    };
    let classes = train.iter().map(|(_, c)| c + 1).max().unwrap_or(0).max(2);
    ctx.record(out)?;
    let mut model = ActionModel::attach(pre.as_ref(), &fusion_cfg, classes, ctx.seed)?;
    let report = transfer::finetune(&mut model, &train, cfg, ctx.seed)?;
    model.save(&out.join("checkpoint"))?;
    pretext::write_curve(&out.join("curve.csv"), &report.curve)?;
    if !eval.is_empty() {
        let acc = transfer::eval_clips(&model, &eval, cfg.eval_windows)?;
        io::write_atomic(&out.join("metrics.csv"), format!("clips,accuracy\n{},{:.6}\n", eval.len(), acc).as_bytes())?;
        println!("held-out clip accuracy {:.4}", acc);
    }
    Ok(())
}

fn eval_cls(ctx: &Ctx, checkpoint: &Path, labels: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let model = ActionModel::<f32>::load(checkpoint)?;
    let clips = match labels {
        Some(p) => labelled_clips(p)?,
        None => ActionDataset::synthesize(&ctx.cfg.transfer, ctx.seed)?.eval,
    };
    let acc = transfer::eval_clips(&model, &clips, ctx.cfg.transfer.eval_windows)?;
    if let Some(out) = out {
        ctx.record(out)?;
        io::write_atomic(&out.join("metrics.csv"), format!("clips,accuracy\n{},{:.6}\n", clips.len(), acc).as_bytes())?;
    }
    println!("clip accuracy {:.4} on {} clips", acc, clips.len());
    Ok(())
}

/// Item directories holding `fg.wav`: `root` itself, or its sorted subdirectories.
fn stem_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !root.is_dir() {
        return Err(Error::Missing(root.to_path_buf()));
    }
    if root.join("fg.wav").exists() {
        return Ok(vec![(".".into(), root.to_path_buf())]);
    }
    let mut out = Vec::new();
    for e in std::fs::read_dir(root)? {
        let p = e?.path();
        if p.join("fg.wav").exists() {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), p));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Missing(root.join("fg.wav")));
    }
    Ok(out)
}

fn metrics_cmd(ctx: &Ctx, refs: &Path, ests: &Path, out: &Path, sample_rate: Option<u32>) -> Result<()> {
    let m = &ctx.cfg.metrics;
    let rate = sample_rate.unwrap_or(m.resample_hz);
    let load = |p: &Path| -> Result<Waveform> {
        let w = signal::downmix_mono(&signal::read_wav(p)?);
        if rate > 0 && rate != w.sample_rate() {
            signal::resample(&w, rate)
        } else {
            Ok(w)
        }
    };
    let mut rows = Vec::new();
    for (name, dir) in stem_dirs(refs)? {
        let est_dir = if name == "." { ests.to_path_buf() } else { ests.join(&name) };
        let r = [load(&dir.join("fg.wav"))?, load(&dir.join("bg.wav"))?];
        let e = [load(&est_dir.join("fg.wav"))?, load(&est_dir.join("bg.wav"))?];
        let n = r.iter().chain(&e).map(|w| w.len()).min().unwrap();
        let cut = |w: &Waveform| w.slice(0, n);
        let (r, e) = ([cut(&r[0])?, cut(&r[1])?], [cut(&e[0])?, cut(&e[1])?]);
        let stft = StftConfig::new(m.frame_ms, m.hop_ms, r[0].sample_rate());
        let logs = |w: &Waveform| -> Result<Vec<f64>> { Ok(signal::stft(w, &stft)?.magnitude.iter().map(|v| (v + m.log_eps).ln()).collect()) };
        let (rl, el) = ([logs(&r[0])?, logs(&r[1])?], [logs(&e[0])?, logs(&e[1])?]);
        let onoff = metrics::onoff_error([&el[0], &el[1]], [&rl[0], &rl[1]])?;
        let s = metrics::bss_eval([&r[0], &r[1]], [&e[0], &e[1]])?;
        rows.push(MetricsRow { name, onoff, sdr: s[0].sdr, sir: s[0].sir, sar: s[0].sar });
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    io::write_atomic(out, metrics::metrics_csv(&rows).as_bytes())?;
    println!("scored {} items into {}", rows.len(), out.display());
    Ok(())
}

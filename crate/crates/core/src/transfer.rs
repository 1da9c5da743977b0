//! Action recognition on top of the fused network: a linear head on pooled
//! features, fine-tuned end to end, and clip-level evaluation by averaging
//! window logits.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{self, AVClip, Motion, SceneParams, Timbre};
use crate::error::{Error, Result};
use crate::fusenet::{FusionConfig, FusionModel};
use crate::nn::{self, Bound, ParamStore};
use crate::optim::{Optimizer, OptimizerKind, TrainSchedule};
use crate::pretext::CurvePoint;
use crate::tensor::{Real, Tensor};

/// Toy action classes: motion direction × sound timbre.
pub const TOY_CLASSES: [(Motion, Timbre); 4] =
    [(Motion::Horizontal, Timbre::Tone), (Motion::Horizontal, Timbre::Noise), (Motion::Vertical, Timbre::Tone), (Motion::Vertical, Timbre::Noise)];

pub fn class_name(c: usize) -> String {
    let (m, t) = TOY_CLASSES[c];
    format!("{:?}-{:?}", m, t).to_lowercase()
}

/// Scene parameters of toy class `c` with clips of `frames` frames.
pub fn class_scene(base: &SceneParams, c: usize, frames: usize) -> SceneParams {
    let (motion, timbre) = TOY_CLASSES[c];
    SceneParams { frames, motion, timbre, ..base.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub scene: SceneParams,
    /// Length of each labelled clip; the network sees windows of its own length.
    pub clip_frames: usize,
    /// Labelled training clips per class.
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Windows averaged per clip at evaluation.
    pub eval_windows: usize,
    /// Fine-tune with the audio stream zeroed.
    pub ablate_audio: bool,
    pub schedule: TrainSchedule,
}

impl TransferConfig {
    pub fn toy() -> Self {
        TransferConfig {
            scene: SceneParams::toy(),
            clip_frames: 16,
            train_per_class: 6,
            eval_per_class: 25,
            eval_windows: 3,
            ablate_audio: false,
            schedule: TrainSchedule {
                optimizer: OptimizerKind::Adam,
                learning_rate: 1e-3,
                decay_factor: 0.5,
                decay_every: 1000,
                momentum: 0.9,
                batch_size: 8,
                total_steps: 150,
                clip_norm: 5.0,
                weight_decay: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.train_per_class == 0 || self.eval_per_class == 0 || self.eval_windows == 0 {
            return Err(Error::Config("clip counts and eval_windows must be positive".into()));
        }
        Ok(())
    }
}

/// Labelled clips.
#[derive(Debug, Clone)]
pub struct ActionDataset {
    pub train: Vec<(AVClip, usize)>,
    pub eval: Vec<(AVClip, usize)>,
}

impl ActionDataset {
    /// Balanced toy set; training and held-out scenes never share a seed.
    pub fn synthesize(cfg: &TransferConfig, seed: u64) -> Result<Self> {
        let make = |per: usize, offset: u64| -> Result<Vec<(AVClip, usize)>> {
            let mut out = Vec::with_capacity(per * TOY_CLASSES.len());
            for i in 0..per {
                for c in 0..TOY_CLASSES.len() {
                    let idx = offset + (i * TOY_CLASSES.len() + c) as u64;
                    let scene = class_scene(&cfg.scene, c, cfg.clip_frames);
                    out.push((data::make_synthetic_scene(&scene, data::item_seed(seed, idx))?, c));
                }
            }
            Ok(out)
        };
        Ok(ActionDataset { train: make(cfg.train_per_class, 0)?, eval: make(cfg.eval_per_class, 1 << 32)? })
    }
}

/// Reads `clip-dir class-id` lines; relative directories resolve against the manifest's folder.
pub fn read_labels(path: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let root = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (dir, class) = match (parts.next(), parts.next(), parts.next()) {
            (Some(d), Some(c), None) => (d, c),
            _ => return Err(bad(format!("line {}: expected `clip-dir class-id`", n + 1))),
        };
        let class = class.parse().map_err(|_| bad(format!("line {}: bad class id {:?}", n + 1, class)))?;
        let dir = Path::new(dir);
        out.push((if dir.is_absolute() { dir.to_path_buf() } else { root.join(dir) }, class));
    }
    Ok(out)
}

pub fn write_labels(path: &Path, entries: &[(PathBuf, usize)]) -> Result<()> {
    let text: String = entries.iter().map(|(d, c)| format!("{} {}\n", d.display(), c)).collect();
    crate::io::write_atomic(path, text.as_bytes())
}

/// Fused network plus a linear classifier on its pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionModel<T> {
    pub fusion_config: FusionConfig,
    pub classes: usize,
    /// `fusion.*` and `cls.*`.
    pub params: ParamStore<T>,
    pub audio_ablated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionManifest {
    fusion: FusionConfig,
    classes: usize,
    audio_ablated: bool,
}

impl<T: Real> ActionModel<T> {
    /// Head on a copy of `pretrained`, or on a freshly initialized network.
    pub fn attach(pretrained: Option<&FusionModel<T>>, fusion_cfg: &FusionConfig, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let fusion = match pretrained {
            Some(f) => f.clone(),
            None => FusionModel::build(fusion_cfg, seed)?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5);
        let mut p = ParamStore::new();
        nn::init_linear(&mut p, "cls", classes, *fusion.config.fused_channels.last().unwrap(), &mut rng);
        p.merge_prefixed("fusion", &fusion.params);
        Ok(ActionModel { fusion_config: fusion.config.clone(), classes, params: p, audio_ablated: fusion.audio_ablated })
    }

    fn shell(&self) -> FusionModel<T> {
        FusionModel { config: self.fusion_config.clone(), params: ParamStore::new(), audio_ablated: self.audio_ablated }
    }

    /// Class logits `[N, classes]`.
    pub fn logits_graph(&self, g: &mut Graph<T>, p: &Bound, video: Var, audio: Var) -> Result<Var> {
        let out = self.shell().forward_graph(g, &p.scope("fusion"), video, audio)?;
        g.linear(out.pooled, p.var("cls.w")?, p.var("cls.b")?)
    }

    /// Logits of one window per clip.
    pub fn window_logits(&self, windows: &[&AVClip]) -> Result<Vec<Vec<f64>>> {
        let (v, a) = window_batch(self, windows)?;
        let mut g = Graph::inference();
        let p = self.params.bind_all(&mut g);
        let (v, a) = (g.constant(v), g.constant(a));
        let l = self.logits_graph(&mut g, &p, v, a)?;
        Ok(g.value(l).data().chunks(self.classes).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let m = ActionManifest { fusion: self.fusion_config.clone(), classes: self.classes, audio_ablated: self.audio_ablated };
        crate::fusenet::save_checkpoint(dir, "action", &m, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, params): (ActionManifest, ParamStore<T>) = crate::fusenet::load_checkpoint(dir, "action")?;
        let mut model = ActionModel::attach(None, &m.fusion, m.classes, 0)?;
        model.audio_ablated = m.audio_ablated;
        if params.len() != model.params.len() {
            return Err(Error::Incompatible("checkpoint parameters do not match the model".into()));
        }
        for (name, t) in params.iter() {
            match model.params.get_mut(name) {
                Some(dst) if dst.shape() == t.shape() => *dst = t.clone(),
                _ => return Err(Error::Incompatible(format!("checkpoint parameter {} does not fit the model", name))),
            }
        }
        Ok(model)
    }
}

fn window_batch<T: Real>(model: &ActionModel<T>, windows: &[&AVClip]) -> Result<(Tensor<T>, Tensor<T>)> {
    let videos: Vec<&data::Video> = windows.iter().map(|c| &c.video).collect();
    let audios: Vec<&crate::signal::Waveform> = windows.iter().map(|c| &c.audio).collect();
    Ok((data::video_batch(&videos)?, data::audio_batch(&audios, model.fusion_config.audio_in_channels)?))
}

/// `k` window starts spread evenly over a clip (ends included).
pub fn window_starts(clip_frames: usize, window: usize, k: usize) -> Result<Vec<usize>> {
    if window > clip_frames {
        return Err(Error::Length(format!("{}-frame window on a {}-frame clip", window, clip_frames)));
    }
    let span = clip_frames - window;
    if k <= 1 {
        return Ok(vec![span / 2]);
    }
    Ok((0..k).map(|i| (i * span + (k - 1) / 2) / (k - 1)).collect())
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub curve: Vec<CurvePoint>,
    pub seconds: f64,
}

/// End-to-end cross-entropy training on random windows of the training clips.
pub fn finetune(model: &mut ActionModel<f32>, train: &[(AVClip, usize)], cfg: &TransferConfig, seed: u64) -> Result<FinetuneReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training clips".into()));
    }
    if train.iter().any(|(_, c)| *c >= model.classes) {
        return Err(Error::Range(format!("class id outside 0..{}", model.classes)));
    }
    model.audio_ablated |= cfg.ablate_audio;
    let start = Instant::now();
    let window = model.fusion_config.frames;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(cfg.schedule.clone());
    let mut curve = Vec::with_capacity(cfg.schedule.total_steps);
    for step in 0..cfg.schedule.total_steps {
        let mut windows = Vec::with_capacity(cfg.schedule.batch_size);
        let mut labels = Vec::with_capacity(cfg.schedule.batch_size);
        for _ in 0..cfg.schedule.batch_size {
            let (clip, c) = &train[rng.gen_range(0..train.len())];
            if clip.video.frames < window {
                return Err(Error::Length(format!("{}-frame clip is shorter than the {}-frame window", clip.video.frames, window)));
            }
            let s = rng.gen_range(0..=clip.video.frames - window);
            windows.push(clip.window(s, window)?);
            labels.push(*c);
        }
        let (v, a) = window_batch(model, &windows.iter().collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let p = model.params.bind_all(&mut g);
        let (v, a) = (g.constant(v), g.constant(a));
        let logits = model.logits_graph(&mut g, &p, v, a)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence(format!("classification loss became {} at step {}", value, step)));
        }
        let correct = g.value(logits).data().chunks(model.classes).zip(&labels).filter(|(r, &l)| argmax(r) == l).count();
        g.backward(loss)?;
        opt.step(&mut model.params, &p.grads(&g));
        curve.push(CurvePoint { step, loss: value, accuracy: correct as f64 / labels.len() as f64 });
    }
    Ok(FinetuneReport { curve, seconds: start.elapsed().as_secs_f64() })
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Clip predictions: mean of the window logits, then argmax.
pub fn predict_clips(model: &ActionModel<f32>, clips: &[&AVClip], windows: usize) -> Result<Vec<usize>> {
    let w = model.fusion_config.frames;
    let mut preds = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(8) {
        let mut wins = Vec::new();
        for clip in chunk {
            for s in window_starts(clip.video.frames, w, windows)? {
                wins.push(clip.window(s, w)?);
            }
        }
        let logits = model.window_logits(&wins.iter().collect::<Vec<_>>())?;
        for per_clip in logits.chunks(windows) {
            let mean: Vec<f64> = (0..model.classes).map(|k| per_clip.iter().map(|r| r[k]).sum::<f64>() / windows as f64).collect();
            preds.push(argmax(&mean));
        }
    }
    Ok(preds)
}

/// Fraction of clips classified correctly.
pub fn eval_clips(model: &ActionModel<f32>, clips: &[(AVClip, usize)], windows: usize) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Degenerate("no clips to evaluate".into()));
    }
    let preds = predict_clips(model, &clips.iter().map(|(c, _)| c).collect::<Vec<_>>(), windows)?;
    Ok(preds.iter().zip(clips).filter(|(p, (_, c))| **p == *c).count() as f64 / clips.len() as f64)
}

/// Held-out accuracy with and without pretraining on the same data and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedResult {
    pub seed: u64,
    pub pretrained: f64,
    pub scratch: f64,
}

/// Runs both arms for one seed: same clips, same head initialization, same batches.
pub fn paired_run(pretrained: &FusionModel<f32>, cfg: &TransferConfig, seed: u64) -> Result<PairedResult> {
    let ds = ActionDataset::synthesize(cfg, seed)?;
    let classes = TOY_CLASSES.len();
    let mut acc = [0.0; 2];
    for (arm, init) in [Some(pretrained), None].into_iter().enumerate() {
        let mut m = ActionModel::attach(init, &pretrained.config, classes, seed)?;
        finetune(&mut m, &ds.train, cfg, seed)?;
        acc[arm] = eval_clips(&m, &ds.eval, cfg.eval_windows)?;
    }
    Ok(PairedResult { seed, pretrained: acc[0], scratch: acc[1] })
}

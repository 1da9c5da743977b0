//! Audio-visual alignment as a self-supervised task.
//!
//! Every video window appears twice per batch: once with its own soundtrack and
//! once with audio cut from the same recording a few seconds earlier or later.
//! The network is trained to tell the two apart.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sigmoid, Graph, Var};
use crate::data::{self, audio_batch, make_alignment_pair, sample_shift, sample_window_start, video_batch, AVClip, AlignmentPair, SceneParams};
use crate::error::{Error, Result};
use crate::fusenet::FusionModel;
use crate::io;
use crate::optim::{Optimizer, TrainSchedule};
use crate::tensor::{Real, Tensor};

/// `−½ [ln σ(a) + ln(1 − σ(s))]` for one aligned/shifted pair of logits.
pub fn alignment_nll(logit_aligned: f64, logit_shifted: f64) -> f64 {
    -0.5 * (log_sigmoid(logit_aligned) + log_sigmoid(-logit_shifted))
}

/// Batch mean of [`alignment_nll`] on graph values of equal shape.
pub fn alignment_nll_graph<T: Real>(g: &mut Graph<T>, aligned: Var, shifted: Var) -> Result<Var> {
    let n = g.value(aligned).numel();
    let la = g.log_sigmoid(aligned);
    let neg = g.scale(shifted, -T::one());
    let ls = g.log_sigmoid(neg);
    let both = g.add(la, ls)?;
    let s = g.sum(both);
    Ok(g.scale(s, T::from_f64_lossy(-0.5 / n as f64)))
}

/// How negatives are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Negatives {
    /// Audio from the same recording, shifted in time.
    Shift,
    /// Audio from a different clip.
    RandomPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextConfig {
    /// Geometry of the long source recordings.
    pub scene: SceneParams,
    pub window_frames: usize,
    pub shift_lo_s: f64,
    pub shift_hi_s: f64,
    pub train_clips: usize,
    pub eval_clips: usize,
    pub negatives: Negatives,
    /// Probability of a horizontal flip of each training video.
    pub flip_prob: f64,
    /// Steps at the start during which video frames are held in pairs (half frame rate).
    pub low_rate_warmup_steps: usize,
    pub schedule: TrainSchedule,
}

impl PretextConfig {
    /// 500 source clips of 3 s; 8-frame (1 s) windows; shifts of 0.5–1.5 s.
    pub fn toy() -> Self {
        PretextConfig {
            scene: SceneParams { frames: 24, ..SceneParams::toy() },
            window_frames: 8,
            shift_lo_s: 0.5,
            shift_hi_s: 1.5,
            train_clips: 500,
            eval_clips: 200,
            negatives: Negatives::Shift,
            flip_prob: 0.5,
            low_rate_warmup_steps: 0,
            schedule: TrainSchedule {
                optimizer: crate::optim::OptimizerKind::Adam,
                learning_rate: 2e-3,
                decay_factor: 0.5,
                decay_every: 200,
                momentum: 0.9,
                batch_size: 32,
                total_steps: 600,
                clip_norm: 5.0,
                weight_decay: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.schedule.validate()?;
        if self.window_frames == 0 || self.window_frames > self.scene.frames {
            return Err(Error::Config("window must fit in the source clip".into()));
        }
        let slack = (self.scene.frames - self.window_frames) as f64 / self.scene.frame_rate;
        if self.negatives == Negatives::Shift {
            if !(self.shift_lo_s > 0.0) || self.shift_hi_s < self.shift_lo_s {
                return Err(Error::Config(format!("shift range [{}, {}]", self.shift_lo_s, self.shift_hi_s)));
            }
            // Room for the window plus the largest shift, rounded up to whole frames.
            let need = (self.shift_hi_s * self.scene.frame_rate).ceil() / self.scene.frame_rate;
            if need > slack + 1e-9 {
                return Err(Error::Range(format!("shifts up to {} s need more than the {} s of slack", self.shift_hi_s, slack)));
            }
        }
        if self.train_clips == 0 {
            return Err(Error::Config("no training clips".into()));
        }
        Ok(())
    }
}

/// Long source recordings, split into training and held-out sets.
#[derive(Debug, Clone)]
pub struct AlignDataset {
    pub train: Vec<AVClip>,
    pub eval: Vec<AVClip>,
}

impl AlignDataset {
    /// Training clip `i` uses seed `item_seed(seed, i)`; held-out clips continue the sequence.
    pub fn synthesize(cfg: &PretextConfig, seed: u64) -> Result<Self> {
        let make = |i: usize| data::make_synthetic_scene(&cfg.scene, data::item_seed(seed, i as u64));
        let train = (0..cfg.train_clips).map(make).collect::<Result<Vec<_>>>()?;
        let eval = (cfg.train_clips..cfg.train_clips + cfg.eval_clips).map(make).collect::<Result<Vec<_>>>()?;
        Ok(AlignDataset { train, eval })
    }

    pub fn from_clips(train: Vec<AVClip>, eval: Vec<AVClip>) -> Self {
        AlignDataset { train, eval }
    }
}

/// Videos with their aligned and negative soundtracks.
#[derive(Debug, Clone)]
pub struct AlignBatch {
    /// `[N, 3, T, H, W]`.
    pub videos: Tensor<f32>,
    /// `[N, C, 1, 1, L]`.
    pub aligned: Tensor<f32>,
    pub shifted: Tensor<f32>,
    pub shifts: Vec<f64>,
}

/// Draws one aligned/negative pair from `clips[index]`.
pub fn sample_pair<R: Rng>(clips: &[AVClip], index: usize, cfg: &PretextConfig, rng: &mut R) -> Result<AlignmentPair> {
    let clip = &clips[index];
    match cfg.negatives {
        Negatives::Shift => {
            let slack = (clip.video.frames - cfg.window_frames) as f64 / clip.frame_rate;
            // Whole-frame shifts keep negative onsets on the frame grid, so the
            // audio alone cannot reveal the label.
            let shift = sample_shift(rng, cfg.shift_lo_s, cfg.shift_hi_s, slack)?;
            let shift = (shift * clip.frame_rate).round() / clip.frame_rate;
            let start = sample_window_start(rng, clip.video.frames, cfg.window_frames, clip.frame_rate, shift)?;
            make_alignment_pair(clip, start, cfg.window_frames, shift)
        }
        Negatives::RandomPair => {
            let start = rng.gen_range(0..=clip.video.frames - cfg.window_frames);
            let mut other = rng.gen_range(0..clips.len() - 1);
            if other >= index {
                other += 1;
            }
            let window = clip.window(start, cfg.window_frames)?;
            let negative = clips[other % clips.len()].window(start, cfg.window_frames)?.audio;
            Ok(AlignmentPair { aligned_audio: window.audio.clone(), clip: window, shift_s: f64::NAN, shifted_audio: negative })
        }
    }
}

fn flip_video(v: &data::Video) -> data::Video {
    let mut out = v.clone();
    for t in 0..v.frames {
        for y in 0..v.height {
            for x in 0..v.width {
                let src = v.pixel(t, y, v.width - 1 - x);
                let i = out.idx(t, y, x, 0);
                out.data[i..i + 3].copy_from_slice(&src);
            }
        }
    }
    out
}

fn hold_pairs(v: &data::Video) -> data::Video {
    let fs = v.height * v.width * 3;
    let mut out = v.clone();
    for t in (1..v.frames).step_by(2) {
        out.data.copy_within((t - 1) * fs..t * fs, t * fs);
    }
    out
}

pub fn make_batch(pairs: &[AlignmentPair], channels: usize) -> Result<AlignBatch> {
    let videos: Vec<&data::Video> = pairs.iter().map(|p| &p.clip.video).collect();
    Ok(AlignBatch {
        videos: video_batch(&videos)?,
        aligned: audio_batch(&pairs.iter().map(|p| &p.aligned_audio).collect::<Vec<_>>(), channels)?,
        shifted: audio_batch(&pairs.iter().map(|p| &p.shifted_audio).collect::<Vec<_>>(), channels)?,
        shifts: pairs.iter().map(|p| p.shift_s).collect(),
    })
}

/// Logits for the aligned and negative halves of a batch.
pub fn batch_logits(model: &FusionModel<f32>, batch: &AlignBatch) -> Result<(Vec<f32>, Vec<f32>)> {
    let audio = Tensor::concat(&[&batch.aligned, &batch.shifted], 0)?;
    let out = model.forward(&batch.videos, &audio)?;
    let n = batch.aligned.dim(0);
    Ok((out.logits[..n].to_vec(), out.logits[n..].to_vec()))
}

/// One row of a training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    /// Pointwise accuracy on the training batch.
    pub accuracy: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,loss,accuracy\n");
    for p in curve {
        writeln!(s, "{},{:.8},{:.6}", p.step, p.loss, p.accuracy).unwrap();
    }
    s
}

/// Means of consecutive non-overlapping blocks of `window` losses.
pub fn smoothed_losses(curve: &[CurvePoint], window: usize) -> Vec<f64> {
    curve.chunks_exact(window).map(|c| c.iter().map(|p| p.loss).sum::<f64>() / window as f64).collect()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub seconds: f64,
}

/// Trains `model` in place. Identical `(dataset, model, cfg, seed)` reproduce
/// the same curve and parameters bit for bit.
pub fn train_pretext(dataset: &AlignDataset, model: &mut FusionModel<f32>, cfg: &PretextConfig, seed: u64) -> Result<TrainReport> {
    train_pretext_with(dataset, model, cfg, seed, |_, _| {})
}

/// [`train_pretext`] with a callback after every step.
pub fn train_pretext_with(
    dataset: &AlignDataset,
    model: &mut FusionModel<f32>,
    cfg: &PretextConfig,
    seed: u64,
    mut on_step: impl FnMut(&CurvePoint, &FusionModel<f32>),
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(cfg.schedule.clone());
    let bs = cfg.schedule.batch_size;
    let channels = model.config.audio_in_channels;
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.schedule.total_steps);
    for step in 0..cfg.schedule.total_steps {
        let mut pairs = Vec::with_capacity(bs);
        for _ in 0..bs {
            if order.is_empty() {
                order = (0..dataset.train.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().unwrap();
            let mut pair = sample_pair(&dataset.train, idx, cfg, &mut rng)?;
            if rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
                pair.clip.video = flip_video(&pair.clip.video);
            }
            if step < cfg.low_rate_warmup_steps {
                pair.clip.video = hold_pairs(&pair.clip.video);
            }
            pairs.push(pair);
        }
        let batch = make_batch(&pairs, channels)?;
        let mut g = Graph::new();
        let p = model.params.bind_all(&mut g);
        let v = g.constant(batch.videos.clone());
        let audio = g.constant(Tensor::concat(&[&batch.aligned, &batch.shifted], 0)?);
        let out = model.forward_graph(&mut g, &p, v, audio)?;
        let la = g.narrow(out.logits, 0, 0, bs)?;
        let ls = g.narrow(out.logits, 0, bs, bs)?;
        let loss = alignment_nll_graph(&mut g, la, ls)?;
        let loss_value = g.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Divergence(format!(
                "alignment loss became {} at step {} (learning rate {})",
                loss_value,
                step,
                cfg.schedule.lr_at(step)
            )));
        }
        let logits = g.value(out.logits).data();
        let correct = logits[..bs].iter().filter(|&&l| l >= 0.0).count() + logits[bs..].iter().filter(|&&l| l < 0.0).count();
        g.backward(loss)?;
        let grads = p.grads(&g);
        opt.step(&mut model.params, &grads);
        if !model.params.all_finite() {
            return Err(Error::Divergence(format!("non-finite parameters after step {}", step)));
        }
        let point = CurvePoint { step, loss: loss_value, accuracy: correct as f64 / (2 * bs) as f64 };
        on_step(&point, model);
        curve.push(point);
    }
    Ok(TrainReport { curve, seconds: start.elapsed().as_secs_f64() })
}

/// Held-out pairs: one aligned and one negative soundtrack per clip, drawn with `seed`.
pub fn eval_pairs(clips: &[AVClip], cfg: &PretextConfig, seed: u64) -> Result<Vec<AlignmentPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clips.len()).map(|i| sample_pair(clips, i, cfg, &mut rng)).collect()
}

/// Synchronization accuracy in both protocols.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyncAccuracy {
    /// Fraction of the `2n` examples whose thresholded prediction matches the label.
    pub pointwise: f64,
    /// Fraction of pairs in which the aligned member scores higher (ties count half).
    pub pairwise: f64,
    pub pairs: usize,
}

/// Accuracy from `(aligned, shifted)` logit pairs.
pub fn sync_accuracy(logits: &[(f64, f64)]) -> Result<SyncAccuracy> {
    if logits.is_empty() {
        return Err(Error::Degenerate("no evaluation pairs".into()));
    }
    let n = logits.len() as f64;
    let mut point = 0.0;
    let mut pair = 0.0;
    for &(a, s) in logits {
        point += (a >= 0.0) as u8 as f64 + (s < 0.0) as u8 as f64;
        pair += if a > s {
            1.0
        } else if a == s {
            0.5
        } else {
            0.0
        };
    }
    Ok(SyncAccuracy { pointwise: point / (2.0 * n), pairwise: pair / n, pairs: logits.len() })
}

pub fn eval_logits(model: &FusionModel<f32>, pairs: &[AlignmentPair]) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(16) {
        let batch = make_batch(chunk, model.config.audio_in_channels)?;
        let (a, s) = batch_logits(model, &batch)?;
        out.extend(a.iter().zip(&s).map(|(&a, &s)| (a as f64, s as f64)));
    }
    Ok(out)
}

pub fn eval_sync(model: &FusionModel<f32>, pairs: &[AlignmentPair]) -> Result<SyncAccuracy> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("no evaluation pairs".into()));
    }
    sync_accuracy(&eval_logits(model, pairs)?)
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    io::write_atomic(path, curve_csv(curve).as_bytes())
}

//! On/off-screen separation: a spectrogram u-net conditioned on fused
//! audio-visual features at three temporal scales, its losses, training and
//! waveform reconstruction.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{self, AVClip, BBox, MixConfig, MixtureSample, SceneParams, Video};
use crate::error::{Error, Result};
use crate::fusenet::{self, FeatureTaps, FusionConfig, FusionModel};
use crate::metrics::{self, Assignment, MetricsRow};
use crate::nn::{self, Bound, ParamStore};
use crate::optim::{Optimizer, OptimizerKind, TrainSchedule};
use crate::pretext::CurvePoint;
use crate::signal::{self, Spectrogram, StftConfig, Waveform};
use crate::tensor::{Real, Tensor};

/// U-net geometry and loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SepConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub sample_rate: u32,
    /// Channels at full resolution, then after each stride-2 downsampling.
    pub channels: Vec<usize>,
    /// Floor added before the logarithm.
    pub log_eps: f64,
    /// Log-magnitudes enter and leave the network as `(x − log_center) / log_scale`.
    pub log_center: f64,
    pub log_scale: f64,
    pub predict_phase: bool,
    pub condition_on_video: bool,
    /// Two extra output streams trained with the permutation-invariant loss.
    pub pit_head: bool,
    pub phase_weight: f64,
    /// A feature tap may join an encoder level whose rate is within this factor.
    pub max_rate_ratio: f64,
}

impl SepConfig {
    /// 64 ms / 16 ms at 2 kHz (59 × 65 spectrograms for one second); seven
    /// downsamplings take the encoder from 62.5 Hz to about 0.5 Hz.
    pub fn toy() -> Self {
        SepConfig {
            frame_ms: 64.0,
            hop_ms: 16.0,
            sample_rate: 2000,
            channels: vec![16, 24, 32, 48, 48, 64, 64, 64],
            log_eps: 1e-5,
            log_center: -5.0,
            log_scale: 3.0,
            predict_phase: true,
            condition_on_video: true,
            pit_head: false,
            phase_weight: 0.01,
            max_rate_ratio: 4.0,
        }
    }

    /// Shapes of the full-size model at 21 kHz (128 × 1025 spectrograms).
    pub fn paper_geometry() -> Self {
        SepConfig {
            sample_rate: 21_000,
            channels: vec![64, 128, 256, 512, 512, 512, 512, 512],
            ..SepConfig::toy()
        }
    }

    /// Large-scale variant: 40 ms frames and a heavier phase loss.
    pub fn large_scale() -> Self {
        SepConfig { frame_ms: 40.0, phase_weight: 0.2, ..SepConfig::paper_geometry() }
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig::new(self.frame_ms, self.hop_ms, self.sample_rate)
    }

    /// Spectrogram frames per second.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.stft().hop_samples(self.sample_rate) as f64
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Nominal frame rate of every encoder level.
    pub fn level_rates(&self) -> Vec<f64> {
        (0..self.levels()).map(|l| self.frame_rate() / (1u64 << l) as f64).collect()
    }

    /// `(T, F)` of every encoder level for a `frames × bins` input.
    pub fn level_dims(&self, frames: usize, bins: usize) -> Vec<(usize, usize)> {
        let mut out = vec![(frames, bins)];
        for _ in 1..self.levels() {
            let (t, f) = *out.last().unwrap();
            out.push((t.div_ceil(2), f.div_ceil(2)));
        }
        out
    }

    pub fn out_channels(&self) -> usize {
        if self.pit_head {
            6
        } else {
            4
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("u-net channel list must be nonempty and positive".into()));
        }
        if !(self.log_eps > 0.0) || !(self.log_scale > 0.0) || !(self.max_rate_ratio >= 1.0) {
            return Err(Error::Config("log_eps and log_scale must be positive, max_rate_ratio >= 1".into()));
        }
        if self.phase_weight < 0.0 {
            return Err(Error::Config("phase weight must be nonnegative".into()));
        }
        self.stft().validate(self.sample_rate)?;
        self.stft().check_overlap_add(self.sample_rate)
    }
}

/// Encoder level for each tap: the one with the closest rate.
pub fn assign_taps(tap_rates: &[f64], level_rates: &[f64], max_ratio: f64) -> Result<Vec<usize>> {
    tap_rates
        .iter()
        .map(|&r| {
            let (best, ratio) = level_rates
                .iter()
                .enumerate()
                .map(|(l, &lr)| (l, (lr / r).ln().abs()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .ok_or_else(|| Error::Config("no encoder levels".into()))?;
            if ratio.exp() > max_ratio {
                return Err(Error::Config(format!(
                    "feature tap at {:.3} Hz is more than a factor {} from every encoder level ({:?})",
                    r, max_ratio, level_rates
                )));
            }
            Ok(best)
        })
        .collect()
}

/// Conditioning tensors `[N, C, 1, T_l, F_l]` per encoder level (`None` where no tap lands).
///
/// Each tap is mean-pooled over space, linearly interpolated in time to the
/// level's rate and tiled over frequency; taps sharing a level are concatenated.
pub fn condition_graph<T: Real>(
    g: &mut Graph<T>,
    taps: &[Var],
    tap_rates: &[f64],
    assignment: &[usize],
    level_dims: &[(usize, usize)],
    level_rates: &[f64],
) -> Result<Vec<Option<Var>>> {
    let mut per_level: Vec<Vec<Var>> = vec![Vec::new(); level_dims.len()];
    for ((&tap, &rate), &l) in taps.iter().zip(tap_rates).zip(assignment) {
        let s = g.shape(tap).to_vec();
        let (n, c, tt) = (s[0], s[1], s[2]);
        let (tl, fl) = level_dims[l];
        let x = g.mean_trailing(tap, 2)?;
        let x = g.reshape(x, &[n, c, tt])?;
        let m = fusenet::interp_matrix::<T>(tt, rate, tl, level_rates[l]);
        let x = g.mix_axis(x, 2, &m)?;
        let x = g.reshape(x, &[n, c, 1, tl, 1])?;
        let x = g.broadcast_trailing(x, &[fl])?;
        per_level[l].push(x);
    }
    per_level
        .into_iter()
        .map(|v| match v.len() {
            0 => Ok(None),
            1 => Ok(Some(v[0])),
            _ => g.concat(&v, 1).map(Some),
        })
        .collect()
}

/// [`condition_graph`] on concrete taps.
pub fn condition_features<T: Real>(taps: &FeatureTaps<T>, level_dims: &[(usize, usize)], level_rates: &[f64], max_ratio: f64) -> Result<Vec<Option<Tensor<T>>>> {
    let assignment = assign_taps(&taps.rates, level_rates, max_ratio)?;
    let mut g = Graph::inference();
    let vars: Vec<Var> = taps.tensors.iter().map(|t| g.constant(t.clone())).collect();
    let out = condition_graph(&mut g, &vars, &taps.rates, &assignment, level_dims, level_rates)?;
    Ok(out.into_iter().map(|v| v.map(|v| g.value(v).clone())).collect())
}

/// Spectrogram u-net plus the fused audio-visual network that conditions it.
///
/// Parameters live under `fusion.*` and `unet.*` and are optimized jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct SepModel<T> {
    pub config: SepConfig,
    pub fusion_config: FusionConfig,
    pub params: ParamStore<T>,
    /// Zeroes the fused network's audio stream ("no early fusion").
    pub audio_ablated: bool,
}

/// Manifest stored with a separation checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SepManifest {
    pub sep: SepConfig,
    pub fusion: FusionConfig,
    pub audio_ablated: bool,
}

impl<T: Real> SepModel<T> {
    /// Random u-net on top of `fusion` (whose weights are copied).
    pub fn with_fusion(cfg: &SepConfig, fusion: &FusionModel<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let fc = &fusion.config;
        if fc.sample_rate != cfg.sample_rate {
            return Err(Error::Incompatible(format!("fused network runs at {} Hz, separation at {} Hz", fc.sample_rate, cfg.sample_rate)));
        }
        let cond = if cfg.condition_on_video { Self::cond_channels(cfg, fc)? } else { vec![0; cfg.levels()] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e9a_7a7e);
        let mut p = ParamStore::new();
        let c = &cfg.channels;
        let k = [1, 3, 3];
        nn::init_conv(&mut p, "unet.enc0", c[0], 1, k, true, &mut rng);
        for l in 1..c.len() {
            nn::init_conv(&mut p, &format!("unet.enc{}", l), c[l], c[l - 1] + cond[l - 1], k, true, &mut rng);
        }
        let last = c.len() - 1;
        let mut below = c[last] + cond[last];
        for l in (0..last).rev() {
            nn::init_conv(&mut p, &format!("unet.dec{}", l), c[l], below + c[l] + cond[l], k, true, &mut rng);
            below = c[l];
        }
        nn::init_conv(&mut p, "unet.out", cfg.out_channels(), c[0] + 1, [1, 1, 1], true, &mut rng);
        p.get_mut("unet.out.w").unwrap().scale_inplace(T::from_f64_lossy(0.1));
        p.merge_prefixed("fusion", &fusion.params);
        Ok(SepModel { config: cfg.clone(), fusion_config: fc.clone(), params: p, audio_ablated: fusion.audio_ablated })
    }

    /// Fresh model: fused network from `build(fusion_cfg, seed)`.
    pub fn build(cfg: &SepConfig, fusion_cfg: &FusionConfig, seed: u64) -> Result<Self> {
        Self::with_fusion(cfg, &FusionModel::build(fusion_cfg, seed)?, seed)
    }

    fn cond_channels(cfg: &SepConfig, fc: &FusionConfig) -> Result<Vec<usize>> {
        let assignment = assign_taps(&fc.tap_rates(), &cfg.level_rates(), cfg.max_rate_ratio)?;
        let mut cond = vec![0; cfg.levels()];
        for (&l, ch) in assignment.iter().zip(fc.tap_channels()) {
            cond[l] += ch;
        }
        Ok(cond)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// The conditioning network as a standalone model.
    pub fn fusion(&self) -> FusionModel<T> {
        FusionModel { config: self.fusion_config.clone(), params: self.params.subset("fusion"), audio_ablated: self.audio_ablated }
    }

    /// Fused-network geometry for a clip of `frames` video frames.
    pub fn fusion_geometry(&self, frames: usize) -> Result<FusionConfig> {
        let fc = &self.fusion_config;
        let cfg = FusionConfig {
            frames,
            audio_samples: data::frame_to_sample(frames, fc.frame_rate, fc.sample_rate),
            ..fc.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Normalized log-magnitude input `[N, 1, 1, T, F]`.
    pub fn spec_input(&self, mixes: &[&Spectrogram]) -> Result<Tensor<T>> {
        let (t, f) = mixes[0].shape();
        let cfg = &self.config;
        let mut data = Vec::with_capacity(mixes.len() * t * f);
        for m in mixes {
            if m.shape() != (t, f) {
                return Err(Error::Shape("mixtures in a batch differ in shape".into()));
            }
            data.extend(m.magnitude.iter().map(|&v| T::from_f64_lossy(((v + cfg.log_eps).ln() - cfg.log_center) / cfg.log_scale)));
        }
        Tensor::from_vec(&[mixes.len(), 1, 1, t, f], data)
    }

    /// Raw network output `[N, K, 1, T, F]` in normalized units.
    ///
    /// `video` / `audio` feed the fused network and may be `None` when the
    /// model is not conditioned on video.
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &Bound, video: Option<Var>, audio: Option<Var>, spec: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = g.shape(spec).to_vec();
        if s.len() != 5 || s[1] != 1 || s[2] != 1 {
            return Err(Error::Shape(format!("spectrogram input {:?} must be [N, 1, 1, T, F]", s)));
        }
        let dims = cfg.level_dims(s[3], s[4]);
        let mut cond = vec![None; cfg.levels()];
        if cfg.condition_on_video {
            let (video, audio) = match (video, audio) {
                (Some(v), Some(a)) => (v, a),
                _ => return Err(Error::Config("a video-conditioned model needs video and audio".into())),
            };
            let frames = g.shape(video)[2];
            let shell = FusionModel::<T> { config: self.fusion_geometry(frames)?, params: ParamStore::new(), audio_ablated: self.audio_ablated };
            let out = shell.forward_graph(g, &p.scope("fusion"), video, audio)?;
            let rates = self.fusion_config.tap_rates();
            let assignment = assign_taps(&rates, &cfg.level_rates(), cfg.max_rate_ratio)?;
            cond = condition_graph(g, &out.taps, &rates, &assignment, &dims, &cfg.level_rates())?;
        }
        let u = p.scope("unet");
        let with_cond = |g: &mut Graph<T>, x: Var, c: Option<Var>| -> Result<Var> {
            match c {
                Some(c) => g.concat(&[x, c], 1),
                None => Ok(x),
            }
        };
        let mut skips = Vec::with_capacity(cfg.levels());
        let x = nn::conv_ceil(g, &u, "enc0", spec, [1, 1, 1])?;
        let x = g.relu(x);
        let mut x = with_cond(g, x, cond[0])?;
        skips.push(x);
        for l in 1..cfg.levels() {
            let y = nn::conv_ceil(g, &u, &format!("enc{}", l), x, [1, 2, 2])?;
            let y = g.relu(y);
            x = with_cond(g, y, cond[l])?;
            skips.push(x);
        }
        for l in (0..cfg.levels() - 1).rev() {
            let (t, f) = dims[l];
            let up = g.upsample(x, [1, 2, 2])?;
            let up = g.narrow(up, 3, 0, t)?;
            let up = g.narrow(up, 4, 0, f)?;
            let cat = g.concat(&[up, skips[l]], 1)?;
            let y = nn::conv_ceil(g, &u, &format!("dec{}", l), cat, [1, 1, 1])?;
            x = g.relu(y);
        }
        let cat = g.concat(&[x, spec], 1)?;
        nn::conv_ceil(g, &u, "out", cat, [1, 1, 1])
    }

    /// Separates `mix` (mono) conditioned on `video`. Any length is accepted as
    /// long as the audio lasts as long as the video.
    pub fn separate(&self, mix: &Waveform, video: &Video) -> Result<SepOutput> {
        let mono = signal::downmix_mono(mix);
        let spec = signal::stft(&mono, &self.config.stft())?;
        let mut g = Graph::inference();
        let p = self.params.bind_all(&mut g);
        let input = g.constant(self.spec_input(&[&spec])?);
        let (v, a) = if self.config.condition_on_video {
            let geo = self.fusion_geometry(video.frames)?;
            if mono.len() != geo.audio_samples {
                return Err(Error::Shape(format!("{} audio samples for {} frames (expected {})", mono.len(), video.frames, geo.audio_samples)));
            }
            let v = g.constant(data::video_batch::<T>(&[video])?);
            let a = g.constant(data::audio_batch::<T>(&[&mono], geo.audio_in_channels)?);
            (Some(v), Some(a))
        } else {
            (None, None)
        };
        let out = self.forward_graph(&mut g, &p, v, a, input)?;
        SepOutput::from_network(g.value(out), 0, &self.config, &spec)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = SepManifest { sep: self.config.clone(), fusion: self.fusion_config.clone(), audio_ablated: self.audio_ablated };
        fusenet::save_checkpoint(dir, "separation", &manifest, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, params): (SepManifest, ParamStore<T>) = fusenet::load_checkpoint(dir, "separation")?;
        let mut model = SepModel::build(&m.sep, &m.fusion, 0)?;
        model.audio_ablated = m.audio_ablated;
        for (name, t) in params.iter() {
            match model.params.get_mut(name) {
                Some(dst) if dst.shape() == t.shape() => *dst = t.clone(),
                _ => return Err(Error::Incompatible(format!("checkpoint parameter {} does not fit the model", name))),
            }
        }
        if model.params.len() != params.len() {
            return Err(Error::Incompatible("checkpoint is missing parameters".into()));
        }
        Ok(model)
    }
}

/// Predicted on- and off-screen spectrograms.
#[derive(Debug, Clone, PartialEq)]
pub struct SepOutput {
    /// `exp(log-magnitude) − eps` with the predicted phase.
    pub fg: Spectrogram,
    pub bg: Spectrogram,
    pub fg_log: Vec<f64>,
    pub bg_log: Vec<f64>,
    /// Log-magnitudes of the permutation-invariant streams, when present.
    pub pit: Option<[Vec<f64>; 2]>,
}

impl SepOutput {
    /// Decodes item `n` of a raw network output.
    pub fn from_network<T: Real>(out: &Tensor<T>, n: usize, cfg: &SepConfig, like: &Spectrogram) -> Result<SepOutput> {
        let (t, f) = like.shape();
        let s = out.shape();
        if s[2] != 1 || s[3] != t || s[4] != f || s[1] != cfg.out_channels() {
            return Err(Error::Shape(format!("network output {:?} for a {}x{} spectrogram", s, t, f)));
        }
        let plane = t * f;
        let chan = |c: usize| -> Vec<f64> { out.data()[(n * s[1] + c) * plane..(n * s[1] + c + 1) * plane].iter().map(|v| v.as_f64()).collect() };
        let to_log = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x * cfg.log_scale + cfg.log_center).collect() };
        let fg_log = to_log(chan(0));
        let bg_log = to_log(chan(2));
        let spec = |log: &[f64], phase: Vec<f64>| {
            let mag = log.iter().map(|&l| (l.exp() - cfg.log_eps).max(0.0)).collect();
            Spectrogram::from_parts(mag, phase, t, f, like.config, like.sample_rate)
        };
        Ok(SepOutput {
            fg: spec(&fg_log, chan(1))?,
            bg: spec(&bg_log, chan(3))?,
            pit: cfg.pit_head.then(|| [to_log(chan(4)), to_log(chan(5))]),
            fg_log,
            bg_log,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseSource {
    Predicted,
    Mixture,
}

/// Inverts both streams with the chosen phase.
pub fn reconstruct(out: &SepOutput, mixture: &Spectrogram, phase: PhaseSource) -> Result<(Waveform, Waveform)> {
    let inv = |s: &Spectrogram| -> Result<Waveform> {
        match phase {
            PhaseSource::Predicted => signal::istft(s),
            PhaseSource::Mixture => signal::istft(&s.with_phase_of(mixture)?),
        }
    };
    Ok((inv(&out.fg)?, inv(&out.bg)?))
}

/// Log-magnitudes and phases of both streams, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct Streams {
    pub fg_log: Vec<f64>,
    pub fg_phase: Vec<f64>,
    pub bg_log: Vec<f64>,
    pub bg_phase: Vec<f64>,
}

impl Streams {
    pub fn from_mixture(m: &MixtureSample, eps: f64) -> Streams {
        let log = |s: &Spectrogram| s.magnitude.iter().map(|v| (v + eps).ln()).collect();
        Streams { fg_log: log(&m.fg), fg_phase: m.fg.phase.clone(), bg_log: log(&m.bg), bg_phase: m.bg.phase.clone() }
    }

    pub fn from_output(o: &SepOutput) -> Streams {
        Streams { fg_log: o.fg_log.clone(), fg_phase: o.fg.phase.clone(), bg_log: o.bg_log.clone(), bg_phase: o.bg.phase.clone() }
    }
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn mean_cos_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| 1.0 - (x - y).cos()).sum::<f64>() / a.len() as f64
}

/// `mean|Δ log fg| + mean|Δ log bg| + w·(mean(1 − cos Δφ_fg) + mean(1 − cos Δφ_bg))`.
pub fn onoff_loss(pred: &Streams, truth: &Streams, phase_weight: f64) -> Result<f64> {
    let n = truth.fg_log.len();
    for v in [&pred.fg_log, &pred.fg_phase, &pred.bg_log, &pred.bg_phase, &truth.fg_phase, &truth.bg_log, &truth.bg_phase] {
        if v.len() != n {
            return Err(Error::Shape("on/off loss streams differ in length".into()));
        }
    }
    let mut loss = mean_abs_diff(&pred.fg_log, &truth.fg_log) + mean_abs_diff(&pred.bg_log, &truth.bg_log);
    if phase_weight > 0.0 {
        loss += phase_weight * (mean_cos_dist(&pred.fg_phase, &truth.fg_phase) + mean_cos_dist(&pred.bg_phase, &truth.bg_phase));
    }
    Ok(loss)
}

/// Smaller of `mean|x1 − fg| + mean|x2 − bg|` and the swapped pairing; ties keep identity.
pub fn pit_loss(x1: &[f64], x2: &[f64], fg: &[f64], bg: &[f64]) -> Result<(f64, Assignment)> {
    let (sum, a) = metrics::pit_assign([x1, x2], [fg, bg])?;
    Ok((sum / fg.len() as f64, a))
}

/// Targets for a batch, each `[N, 1, 1, T, F]`.
#[derive(Debug, Clone)]
pub struct TargetBatch<T> {
    pub fg_log: Tensor<T>,
    pub bg_log: Tensor<T>,
    pub fg_phase: Tensor<T>,
    pub bg_phase: Tensor<T>,
}

impl<T: Real> TargetBatch<T> {
    pub fn from_mixtures(ms: &[&MixtureSample], eps: f64) -> Result<Self> {
        let (t, f) = ms[0].fg.shape();
        let shape = [ms.len(), 1, 1, t, f];
        let gather = |pick: &dyn Fn(&MixtureSample) -> Vec<f64>| -> Result<Tensor<T>> {
            Tensor::from_vec(&shape, ms.iter().flat_map(|m| pick(m)).map(T::from_f64_lossy).collect())
        };
        Ok(TargetBatch {
            fg_log: gather(&|m| m.fg.magnitude.iter().map(|v| (v + eps).ln()).collect())?,
            bg_log: gather(&|m| m.bg.magnitude.iter().map(|v| (v + eps).ln()).collect())?,
            fg_phase: gather(&|m| m.fg.phase.clone())?,
            bg_phase: gather(&|m| m.bg.phase.clone())?,
        })
    }
}

/// Log-magnitude of channel `c` of a raw output.
fn log_channel<T: Real>(g: &mut Graph<T>, out: Var, c: usize, cfg: &SepConfig) -> Result<Var> {
    let x = g.narrow(out, 1, c, 1)?;
    let x = g.scale(x, T::from_f64_lossy(cfg.log_scale));
    Ok(g.add_scalar(x, T::from_f64_lossy(cfg.log_center)))
}

/// Batch mean of [`onoff_loss`] on a raw network output.
pub fn onoff_loss_graph<T: Real>(g: &mut Graph<T>, out: Var, t: &TargetBatch<T>, cfg: &SepConfig) -> Result<Var> {
    let n = t.fg_log.numel() as f64;
    let fg = log_channel(g, out, 0, cfg)?;
    let bg = log_channel(g, out, 2, cfg)?;
    let lf = g.l1_to(fg, &t.fg_log)?;
    let lb = g.l1_to(bg, &t.bg_log)?;
    let mut loss = g.add(lf, lb)?;
    if cfg.predict_phase && cfg.phase_weight > 0.0 {
        let pf = g.narrow(out, 1, 1, 1)?;
        let pb = g.narrow(out, 1, 3, 1)?;
        let cf = g.cos_distance_to(pf, &t.fg_phase)?;
        let cb = g.cos_distance_to(pb, &t.bg_phase)?;
        let c = g.add(cf, cb)?;
        let c = g.scale(c, T::from_f64_lossy(cfg.phase_weight));
        loss = g.add(loss, c)?;
    }
    Ok(g.scale(loss, T::from_f64_lossy(1.0 / n)))
}

/// Batch mean of per-item [`pit_loss`] on log-magnitude handles `[N, 1, 1, T, F]`.
pub fn pit_loss_graph<T: Real>(g: &mut Graph<T>, x1: Var, x2: Var, fg: &Tensor<T>, bg: &Tensor<T>) -> Result<Var> {
    let n = fg.dim(0);
    let per = fg.numel() / n;
    let mut chosen = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = (g.narrow(x1, 0, i, 1)?, g.narrow(x2, 0, i, 1)?);
        let (f, bk) = (fg.narrow(0, i, 1), bg.narrow(0, i, 1));
        let l1 = g.l1_to(a, &f)?;
        let l2 = g.l1_to(b, &bk)?;
        let ident = g.add(l1, l2)?;
        let s1 = g.l1_to(b, &f)?;
        let s2 = g.l1_to(a, &bk)?;
        let swap = g.add(s1, s2)?;
        chosen.push(if g.value(swap).item() < g.value(ident).item() { swap } else { ident });
    }
    let mut flat = Vec::with_capacity(n);
    for c in chosen {
        flat.push(g.reshape(c, &[1])?);
    }
    let cat = g.concat(&flat, 0)?;
    let s = g.sum(cat);
    Ok(g.scale(s, T::from_f64_lossy(1.0 / (n * per) as f64)))
}

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    /// Fused network hears a mono downmix.
    Mono,
    /// One video frame repeated over time.
    SingleFrame,
    /// Fused network's audio stream zeroed.
    NoEarlyFusion,
    /// Fused network randomly initialized instead of pretrained.
    Scratch,
    /// Extra output pair trained with the permutation-invariant loss.
    OnOffPit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SepTrainConfig {
    /// One sounding sprite per scene; the off-screen track comes from another scene.
    pub scene: SceneParams,
    pub train_clips: usize,
    pub eval_clips: usize,
    /// Mean-square level each track is normalized to before mixing.
    pub power: f64,
    /// Probability that the off-screen track is ambient noise.
    pub ambient_prob: f64,
    pub ablation: Ablation,
    pub sep: SepConfig,
    pub schedule: TrainSchedule,
}

impl SepTrainConfig {
    pub fn toy() -> Self {
        SepTrainConfig {
            scene: SceneParams::toy(),
            train_clips: 500,
            eval_clips: 100,
            power: 0.01,
            ambient_prob: 0.0,
            ablation: Ablation::Full,
            sep: SepConfig::toy(),
            schedule: TrainSchedule {
                optimizer: OptimizerKind::Adam,
                learning_rate: 1e-3,
                decay_factor: 0.5,
                decay_every: 400,
                momentum: 0.9,
                batch_size: 16,
                total_steps: 1200,
                clip_norm: 5.0,
                weight_decay: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.sep.validate()?;
        self.schedule.validate()?;
        if self.scene.sources != 1 {
            return Err(Error::Config("separation scenes need exactly one sounding sprite".into()));
        }
        if self.train_clips < 2 || !(self.power > 0.0) || !(0.0..=1.0).contains(&self.ambient_prob) {
            return Err(Error::Config("need two or more clips, positive power and ambient_prob in [0, 1]".into()));
        }
        if self.scene.sample_rate != self.sep.sample_rate {
            return Err(Error::Incompatible("scene and separation sample rates differ".into()));
        }
        Ok(())
    }

    pub fn mix_config(&self) -> MixConfig {
        MixConfig { stft: self.sep.stft(), power: self.power }
    }

    /// The u-net settings the ablation implies.
    pub fn effective_sep(&self) -> SepConfig {
        SepConfig { pit_head: self.sep.pit_head || self.ablation == Ablation::OnOffPit, ..self.sep.clone() }
    }
}

/// Training and held-out scenes.
#[derive(Debug, Clone)]
pub struct SepDataset {
    pub train: Vec<AVClip>,
    pub eval: Vec<AVClip>,
}

impl SepDataset {
    pub fn synthesize(cfg: &SepTrainConfig, seed: u64) -> Result<Self> {
        let make = |i: usize| data::make_synthetic_scene(&cfg.scene, data::item_seed(seed, i as u64));
        Ok(SepDataset {
            train: (0..cfg.train_clips).map(make).collect::<Result<_>>()?,
            eval: (cfg.train_clips..cfg.train_clips + cfg.eval_clips).map(make).collect::<Result<_>>()?,
        })
    }
}

fn palette_of(c: &AVClip) -> Option<usize> {
    c.sources.first().map(|s| s.palette)
}

/// A partner for `i` whose sounding sprite has a different colour (and pitch).
fn partner<R: Rng>(clips: &[AVClip], i: usize, rng: &mut R) -> usize {
    for _ in 0..64 {
        let j = rng.gen_range(0..clips.len());
        if j != i && palette_of(&clips[j]) != palette_of(&clips[i]) {
            return j;
        }
    }
    (i + 1) % clips.len()
}

/// White noise of the clip's length, used as an ambient off-screen track.
fn ambient_track<R: Rng>(like: &Waveform, rng: &mut R) -> Result<Waveform> {
    Waveform::mono((0..like.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(), like.sample_rate())
}

/// Video the fused network sees under `ablation`.
pub fn ablated_video(v: &Video, ablation: Ablation) -> Video {
    match ablation {
        Ablation::SingleFrame => v.freeze_frame(v.frames / 2),
        _ => v.clone(),
    }
}

/// Fixed held-out mixtures: clip `i` on screen, the next differently coloured clip off screen.
pub fn eval_mixtures(clips: &[AVClip], cfg: &SepTrainConfig) -> Result<Vec<MixtureSample>> {
    let mc = cfg.mix_config();
    (0..clips.len())
        .map(|i| {
            let j = (1..clips.len()).map(|d| (i + d) % clips.len()).find(|&j| palette_of(&clips[j]) != palette_of(&clips[i])).unwrap_or((i + 1) % clips.len());
            data::make_mixture(&clips[i], &clips[j], &mc)
        })
        .collect()
}

struct Batch<T> {
    video: Tensor<T>,
    audio: Tensor<T>,
    spec: Tensor<T>,
    targets: TargetBatch<T>,
}

fn make_batch<T: Real>(model: &SepModel<T>, ms: &[MixtureSample], ablation: Ablation) -> Result<Batch<T>> {
    let videos: Vec<Video> = ms.iter().map(|m| ablated_video(&m.video, ablation)).collect();
    let channels = model.fusion_config.audio_in_channels;
    Ok(Batch {
        video: data::video_batch(&videos.iter().collect::<Vec<_>>())?,
        audio: data::audio_batch(&ms.iter().map(|m| &m.mix_wave).collect::<Vec<_>>(), channels)?,
        spec: model.spec_input(&ms.iter().map(|m| &m.mix).collect::<Vec<_>>())?,
        targets: TargetBatch::from_mixtures(&ms.iter().collect::<Vec<_>>(), model.config.log_eps)?,
    })
}

/// Full training loss of one batch.
fn batch_loss<T: Real>(g: &mut Graph<T>, model: &SepModel<T>, p: &Bound, b: &Batch<T>) -> Result<Var> {
    let (v, a) = if model.config.condition_on_video { (Some(g.constant(b.video.clone())), Some(g.constant(b.audio.clone()))) } else { (None, None) };
    let spec = g.constant(b.spec.clone());
    let out = model.forward_graph(g, p, v, a, spec)?;
    let mut loss = onoff_loss_graph(g, out, &b.targets, &model.config)?;
    if model.config.pit_head {
        let x1 = log_channel(g, out, 4, &model.config)?;
        let x2 = log_channel(g, out, 5, &model.config)?;
        let pit = pit_loss_graph(g, x1, x2, &b.targets.fg_log, &b.targets.bg_log)?;
        loss = g.add(loss, pit)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct SepTrainReport {
    pub curve: Vec<CurvePoint>,
    pub seconds: f64,
}

/// Model for `cfg.ablation`: pretrained fused weights unless the ablation is `Scratch`
/// (or none are given), audio stream zeroed for `NoEarlyFusion`.
pub fn init_model(cfg: &SepTrainConfig, pretrained: Option<&FusionModel<f32>>, fusion_cfg: &FusionConfig, seed: u64) -> Result<SepModel<f32>> {
    let sep = cfg.effective_sep();
    let mut model = match (cfg.ablation, pretrained) {
        (Ablation::Scratch, _) | (_, None) => SepModel::build(&sep, fusion_cfg, seed)?,
        (_, Some(f)) => SepModel::with_fusion(&sep, f, seed)?,
    };
    if cfg.ablation == Ablation::NoEarlyFusion {
        model.audio_ablated = true;
    }
    Ok(model)
}

/// Joint optimization of the fused network and the u-net.
pub fn train_separation(dataset: &SepDataset, model: &mut SepModel<f32>, cfg: &SepTrainConfig, seed: u64) -> Result<SepTrainReport> {
    train_separation_with(dataset, model, cfg, seed, |_, _| {})
}

pub fn train_separation_with(
    dataset: &SepDataset,
    model: &mut SepModel<f32>,
    cfg: &SepTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&CurvePoint, &SepModel<f32>),
) -> Result<SepTrainReport> {
    cfg.validate()?;
    if dataset.train.len() < 2 {
        return Err(Error::Config("need at least two training clips".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(cfg.schedule.clone());
    let mc = cfg.mix_config();
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.schedule.total_steps);
    for step in 0..cfg.schedule.total_steps {
        let mut ms = Vec::with_capacity(cfg.schedule.batch_size);
        for _ in 0..cfg.schedule.batch_size {
            if order.is_empty() {
                order = (0..dataset.train.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().unwrap();
            let on = &dataset.train[i];
            let off = if rng.gen_bool(cfg.ambient_prob) {
                ambient_track(&on.audio, &mut rng)?
            } else {
                dataset.train[partner(&dataset.train, i, &mut rng)].audio.clone()
            };
            ms.push(data::make_mixture_from(&on.video, &on.audio, &off, &mc)?);
        }
        let batch = make_batch(model, &ms, cfg.ablation)?;
        let mut g = Graph::new();
        let p = model.params.bind_all(&mut g);
        let loss = batch_loss(&mut g, model, &p, &batch)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence(format!("separation loss became {} at step {} (learning rate {})", value, step, cfg.schedule.lr_at(step))));
        }
        g.backward(loss)?;
        opt.step(&mut model.params, &p.grads(&g));
        if !model.params.all_finite() {
            return Err(Error::Divergence(format!("non-finite parameters after step {}", step)));
        }
        let point = CurvePoint { step, loss: value, accuracy: f64::NAN };
        on_step(&point, model);
        curve.push(point);
    }
    Ok(SepTrainReport { curve, seconds: start.elapsed().as_secs_f64() })
}

/// Network output for a batch of mixtures, decoded per item.
pub fn separate_batch(model: &SepModel<f32>, ms: &[MixtureSample], ablation: Ablation) -> Result<Vec<SepOutput>> {
    let mut out = Vec::with_capacity(ms.len());
    for chunk in ms.chunks(16) {
        let b = make_batch(model, chunk, ablation)?;
        let mut g = Graph::inference();
        let p = model.params.bind_all(&mut g);
        let (v, a) = if model.config.condition_on_video { (Some(g.constant(b.video)), Some(g.constant(b.audio))) } else { (None, None) };
        let spec = g.constant(b.spec);
        let o = model.forward_graph(&mut g, &p, v, a, spec)?;
        for (n, m) in chunk.iter().enumerate() {
            out.push(SepOutput::from_network(g.value(o), n, &model.config, &m.mix)?);
        }
    }
    Ok(out)
}

/// Held-out scores next to the trivial baselines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SepEval {
    /// Per clip: on/off error of both streams, bss scores of the on-screen stream.
    pub rows: Vec<MetricsRow>,
    pub onoff: f64,
    /// Both streams predicted as the mixture.
    pub onoff_copy_baseline: f64,
    pub sdr_fg: f64,
    /// The mixture itself as the on-screen estimate.
    pub sdr_fg_mixture_baseline: f64,
    pub sdr_bg: f64,
    /// Error of the permutation-invariant streams, when trained.
    pub pit_onoff: Option<f64>,
}

/// Scores `model` on `ms`, inverting with the mixture phase.
pub fn evaluate(model: &SepModel<f32>, ms: &[MixtureSample], ablation: Ablation) -> Result<SepEval> {
    if ms.is_empty() {
        return Err(Error::Degenerate("no mixtures to evaluate".into()));
    }
    let outs = separate_batch(model, ms, ablation)?;
    let eps = model.config.log_eps;
    let mut rows = Vec::with_capacity(ms.len());
    let (mut copy, mut base_sdr, mut bg_sdr, mut pit) = (0.0, 0.0, 0.0, 0.0);
    for (k, (m, o)) in ms.iter().zip(&outs).enumerate() {
        let truth = Streams::from_mixture(m, eps);
        let mix_log: Vec<f64> = m.mix.magnitude.iter().map(|v| (v + eps).ln()).collect();
        let onoff = metrics::onoff_error([&o.fg_log, &o.bg_log], [&truth.fg_log, &truth.bg_log])?;
        copy += metrics::onoff_error([&mix_log, &mix_log], [&truth.fg_log, &truth.bg_log])?;
        if let Some([a, b]) = &o.pit {
            let (_, asg) = metrics::pit_assign([a, b], [&truth.fg_log, &truth.bg_log])?;
            let (a, b) = if asg == Assignment::Identity { (a, b) } else { (b, a) };
            pit += metrics::onoff_error([a, b], [&truth.fg_log, &truth.bg_log])?;
        }
        let (fg, bg) = reconstruct(o, &m.mix, PhaseSource::Mixture)?;
        let n = fg.len();
        let refs = [m.fg_wave.slice(0, n)?, m.bg_wave.slice(0, n)?];
        let s = metrics::bss_eval([&refs[0], &refs[1]], [&fg, &bg])?;
        let mix = m.mix_wave.slice(0, n)?;
        base_sdr += metrics::bss_eval([&refs[0], &refs[1]], [&mix, &mix])?[0].sdr;
        bg_sdr += s[1].sdr;
        rows.push(MetricsRow { name: format!("{:04}", k), onoff, sdr: s[0].sdr, sir: s[0].sir, sar: s[0].sar });
    }
    let n = ms.len() as f64;
    Ok(SepEval {
        onoff: rows.iter().map(|r| r.onoff).sum::<f64>() / n,
        sdr_fg: rows.iter().map(|r| r.sdr).sum::<f64>() / n,
        onoff_copy_baseline: copy / n,
        sdr_fg_mixture_baseline: base_sdr / n,
        sdr_bg: bg_sdr / n,
        pit_onoff: model.config.pit_head.then_some(pit / n),
        rows,
    })
}

/// Zero-lag normalized correlation over the common length.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `corr[m][k]`: correlation of the on-screen output with source `k`'s track
/// when sprite `m` is painted over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskReport {
    pub corr: [[f64; 2]; 2],
}

impl MaskReport {
    /// Hiding either sprite hands the on-screen stream to the other one.
    pub fn flips(&self) -> bool {
        self.corr[0][1] > self.corr[0][0] && self.corr[1][0] > self.corr[1][1]
    }
}

/// Masking experiment on a scene with two sounding sprites.
pub fn masking_experiment(model: &SepModel<f32>, clip: &AVClip, power: f64) -> Result<MaskReport> {
    if clip.sources.len() != 2 {
        return Err(Error::Config("the masking experiment needs two sounding sprites".into()));
    }
    let mc = MixConfig { stft: model.config.stft(), power };
    let grow = |b: &BBox| BBox { x0: b.x0 - 1.0, y0: b.y0 - 1.0, x1: b.x1 + 1.0, y1: b.y1 + 1.0 };
    let mut corr = [[0.0; 2]; 2];
    for m in 0..2 {
        let boxes: Vec<BBox> = clip.sources[m].boxes.iter().map(grow).collect();
        let video = clip.video.mask_boxes(&boxes);
        let mix = data::make_mixture_from(&video, &clip.sources[0].audio, &clip.sources[1].audio, &mc)?;
        let out = model.separate(&mix.mix_wave, &video)?;
        let (fg, _) = reconstruct(&out, &mix.mix, PhaseSource::Mixture)?;
        corr[m] = [correlation(fg.channel(0), mix.fg_wave.channel(0)), correlation(fg.channel(0), mix.bg_wave.channel(0))];
    }
    Ok(MaskReport { corr })
}

/// Two-sprite scenes with distinct colours for the masking experiment.
pub fn two_source_scenes(scene: &SceneParams, n: usize, seed: u64) -> Result<Vec<AVClip>> {
    let p = SceneParams { sources: 2, distractors: 0, ..scene.clone() };
    (0..n).map(|i| data::make_synthetic_scene(&p, data::item_seed(seed, i as u64))).collect()
}

/// Log-magnitude spectrograms side by side (time → right, frequency ↑),
/// on a shared 80 dB colour scale.
pub fn spectrogram_panel(specs: &[&Spectrogram], eps: f64) -> Result<image::RgbImage> {
    let (t, f) = specs.first().ok_or_else(|| Error::Degenerate("no spectrograms to draw".into()))?.shape();
    if specs.iter().any(|s| s.shape() != (t, f)) {
        return Err(Error::Shape("spectrograms in a panel differ in shape".into()));
    }
    let logs: Vec<Vec<f64>> = specs.iter().map(|s| s.magnitude.iter().map(|m| (m + eps).ln()).collect()).collect();
    let top = logs.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = 4.0 * std::f64::consts::LN_10;
    let gap = 2;
    let width = specs.len() * t + (specs.len() - 1) * gap;
    let mut img = image::RgbImage::from_pixel(width as u32, f as u32, image::Rgb([255, 255, 255]));
    for (k, log) in logs.iter().enumerate() {
        for ti in 0..t {
            for fi in 0..f {
                let c = crate::localize::hot_colormap((log[ti * f + fi] - (top - range)) / range);
                let px = image::Rgb(c.map(|v| (v * 255.0).round() as u8));
                img.put_pixel((k * (t + gap) + ti) as u32, (f - 1 - fi) as u32, px);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use crate::data::make_synthetic_scene;

    /// 16 Hz audio, 4-sample frames with hop 2: 7 × 3 spectrograms at 8 Hz.
    fn tiny_sep() -> SepConfig {
        SepConfig {
            frame_ms: 250.0,
            hop_ms: 125.0,
            sample_rate: 16,
            channels: vec![2, 3, 3],
            log_eps: 1e-3,
            log_center: 0.0,
            log_scale: 1.0,
            predict_phase: true,
            condition_on_video: true,
            pit_head: true,
            phase_weight: 0.2,
            max_rate_ratio: 4.0,
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    fn streams(seed: u64, n: usize) -> Streams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
        Streams { fg_log: v(), fg_phase: v(), bg_log: v(), bg_phase: v() }
    }

    #[test]
    fn toy_geometry() {
        let c = SepConfig::toy();
        let st = c.stft();
        assert_eq!((st.num_frames(2000, 2000), st.freq_bins()), (59, 65));
        let dims = c.level_dims(59, 65);
        assert_eq!(dims.last(), Some(&(1, 1)));
        let rates = c.level_rates();
        assert!((rates[0] - 62.5).abs() < 1e-12);
        assert_eq!(assign_taps(&FusionConfig::toy().tap_rates(), &rates, 4.0).unwrap(), vec![5, 6, 7]);
        assert!(matches!(assign_taps(&[0.01], &rates, 4.0), Err(Error::Config(_))));
        let paper = SepConfig::paper_geometry();
        let st = paper.stft();
        assert_eq!((st.num_frames(44_100, 21_000), st.freq_bins()), (128, 1025));
        let large = SepConfig::large_scale();
        large.validate().unwrap();
        assert_eq!((large.stft().num_frames(86_520, 21_000), large.stft().freq_bins()), (256, 513));
    }

    fn taps_with(values: Vec<Vec<f64>>, rates: [f64; 3]) -> FeatureTaps<f64> {
        // one channel, 2×2 spatial grid, constant in space
        let tensors = values
            .iter()
            .map(|v| Tensor::from_fn(&[1, 1, v.len(), 2, 2], |i| v[i / 4]))
            .collect();
        FeatureTaps { names: ["a".into(), "b".into(), "c".into()], tensors, rates }
    }

    #[test]
    fn conditioning_constant_impulse_and_tiling() {
        let dims = vec![(16, 5), (8, 3), (4, 2)];
        let rates = vec![8.0, 4.0, 2.0];
        let taps = taps_with(vec![vec![3.0; 8], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![1.0, 2.0]], [4.0, 8.0, 2.0]);
        let c = condition_features(&taps, &dims, &rates, 4.0).unwrap();
        // constant tap stays constant
        let lvl1 = c[1].as_ref().unwrap();
        assert_eq!(lvl1.shape(), &[1, 1, 1, 8, 3]);
        assert!(lvl1.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        // an impulse becomes a linear-interpolation profile at the same rate: identity
        let lvl0 = c[0].as_ref().unwrap();
        let profile: Vec<f64> = (0..16).map(|t| lvl0.at(&[0, 0, 0, t, 0])).collect();
        assert_eq!(profile[..8], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        // and is tiled over frequency
        for t in 0..16 {
            for f in 0..5 {
                assert_eq!(lvl0.at(&[0, 0, 0, t, f]), profile[t]);
            }
        }
        // impulse upsampled by 2: triangular
        let taps = taps_with(vec![vec![0.0, 0.0, 1.0, 0.0], vec![0.0; 4], vec![0.0; 4]], [4.0, 16.0, 16.0]);
        let c = condition_features(&taps, &[(8, 1), (4, 1), (2, 1)], &[8.0, 16.0, 32.0], 4.0).unwrap();
        let lvl0 = c[0].as_ref().unwrap();
        let profile: Vec<f64> = (0..8).map(|t| lvl0.at(&[0, 0, 0, t, 0])).collect();
        let expect = [0.0, 0.0, 0.0, 0.25, 0.75, 0.75, 0.25, 0.0];
        for (a, b) in profile.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", profile);
        }
    }

    #[test]
    fn onoff_loss_oracle_and_edge_cases() {
        let truth = streams(1, 12);
        assert_eq!(onoff_loss(&truth, &truth, 0.01).unwrap(), 0.0);
        let pred = streams(2, 12);
        let mut oracle = 0.0;
        for i in 0..12 {
            oracle += ((pred.fg_log[i] - truth.fg_log[i]).abs() + (pred.bg_log[i] - truth.bg_log[i]).abs()) / 12.0;
            oracle += 0.01 * ((1.0 - (pred.fg_phase[i] - truth.fg_phase[i]).cos()) + (1.0 - (pred.bg_phase[i] - truth.bg_phase[i]).cos())) / 12.0;
        }
        assert!((onoff_loss(&pred, &truth, 0.01).unwrap() - oracle).abs() < 1e-12);
        let swapped = Streams { fg_log: truth.bg_log.clone(), fg_phase: truth.bg_phase.clone(), bg_log: truth.fg_log.clone(), bg_phase: truth.fg_phase.clone() };
        assert!(onoff_loss(&swapped, &truth, 0.01).unwrap() > 0.0);
    }

    #[test]
    fn pit_loss_cases() {
        let t = streams(3, 10);
        assert_eq!(pit_loss(&t.fg_log, &t.bg_log, &t.fg_log, &t.bg_log).unwrap(), (0.0, Assignment::Identity));
        assert_eq!(pit_loss(&t.bg_log, &t.fg_log, &t.fg_log, &t.bg_log).unwrap(), (0.0, Assignment::Swapped));
    }

    #[test]
    fn graph_losses_match_scalar_versions() {
        let cfg = SepConfig { log_center: 0.0, log_scale: 1.0, pit_head: true, ..SepConfig::toy() };
        let out = rand_tensor(&[2, 6, 1, 3, 4], 5, 2.0);
        let tg = TargetBatch {
            fg_log: rand_tensor(&[2, 1, 1, 3, 4], 6, 2.0),
            bg_log: rand_tensor(&[2, 1, 1, 3, 4], 7, 2.0),
            fg_phase: rand_tensor(&[2, 1, 1, 3, 4], 8, 3.0),
            bg_phase: rand_tensor(&[2, 1, 1, 3, 4], 9, 3.0),
        };
        let mut g = Graph::inference();
        let o = g.constant(out.clone());
        let l = onoff_loss_graph(&mut g, o, &tg, &cfg).unwrap();
        let x1 = g.narrow(o, 1, 4, 1).unwrap();
        let x2 = g.narrow(o, 1, 5, 1).unwrap();
        let pl = pit_loss_graph(&mut g, x1, x2, &tg.fg_log, &tg.bg_log).unwrap();
        let (mut on, mut pit) = (0.0, 0.0);
        for n in 0..2 {
            let ch = |c: usize| out.narrow(0, n, 1).narrow(1, c, 1).into_data();
            let item = |t: &Tensor<f64>| t.narrow(0, n, 1).into_data();
            let pred = Streams { fg_log: ch(0), fg_phase: ch(1), bg_log: ch(2), bg_phase: ch(3) };
            let truth = Streams { fg_log: item(&tg.fg_log), fg_phase: item(&tg.fg_phase), bg_log: item(&tg.bg_log), bg_phase: item(&tg.bg_phase) };
            on += onoff_loss(&pred, &truth, cfg.phase_weight).unwrap() / 2.0;
            pit += pit_loss(&ch(4), &ch(5), &truth.fg_log, &truth.bg_log).unwrap().0 / 2.0;
        }
        assert!((g.value(l).item() - on).abs() < 1e-12);
        assert!((g.value(pl).item() - pit).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = SepConfig { log_center: -1.0, log_scale: 2.0, ..SepConfig::toy() };
        let tg = TargetBatch {
            fg_log: rand_tensor(&[2, 1, 1, 3, 4], 16, 2.0),
            bg_log: rand_tensor(&[2, 1, 1, 3, 4], 17, 2.0),
            fg_phase: rand_tensor(&[2, 1, 1, 3, 4], 18, 3.0),
            bg_phase: rand_tensor(&[2, 1, 1, 3, 4], 19, 3.0),
        };
        let params = vec![("out".to_string(), rand_tensor(&[2, 4, 1, 3, 4], 20, 3.0))];
        let r = gradcheck::check(&params, 1e-6, |g, v| onoff_loss_graph(g, v[0], &tg, &cfg)).unwrap();
        assert!(r[0].rel_error < 1e-6, "{:?}", r);
        let params = vec![("x1".to_string(), rand_tensor(&[2, 1, 1, 3, 4], 21, 3.0)), ("x2".to_string(), rand_tensor(&[2, 1, 1, 3, 4], 22, 3.0))];
        let r = gradcheck::check(&params, 1e-6, |g, v| pit_loss_graph(g, v[0], v[1], &tg.fg_log, &tg.bg_log)).unwrap();
        for rep in &r {
            assert!(rep.rel_error < 1e-6, "{:?}", rep);
        }
    }

    fn tiny_model() -> SepModel<f64> {
        SepModel::<f64>::build(&tiny_sep(), &FusionConfig::tiny(), 4).unwrap()
    }

    #[test]
    fn tiny_joint_model_gradients() {
        let model = tiny_model();
        let video = rand_tensor(&[1, 3, 8, 8, 8], 30, 1.0).map(|v| v.abs());
        let audio = rand_tensor(&[1, 1, 1, 1, 16], 31, 1.0);
        let spec = rand_tensor(&[1, 1, 1, 7, 3], 32, 1.0);
        let tg = TargetBatch {
            fg_log: rand_tensor(&[1, 1, 1, 7, 3], 33, 1.0),
            bg_log: rand_tensor(&[1, 1, 1, 7, 3], 34, 1.0),
            fg_phase: rand_tensor(&[1, 1, 1, 7, 3], 35, 3.0),
            bg_phase: rand_tensor(&[1, 1, 1, 7, 3], 36, 3.0),
        };
        let names: Vec<String> = model.params.names().cloned().collect();
        let params: Vec<(String, Tensor<f64>)> = names.iter().map(|n| (n.clone(), model.params.get(n).unwrap().clone())).collect();
        let reports = gradcheck::check(&params, 1e-6, |g, vars| {
            let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let v = g.constant(video.clone());
            let a = g.constant(audio.clone());
            let s = g.constant(spec.clone());
            let out = model.forward_graph(g, &p, Some(v), Some(a), s)?;
            // a smooth readout keeps the check away from L1 kinks
            let sq = g.mul(out, out)?;
            let l = g.sum(sq);
            let on = onoff_loss_graph(g, out, &tg, &model.config)?;
            let on = g.scale(on, 0.0);
            g.add(l, on)
        })
        .unwrap();
        for r in &reports {
            if r.analytic_norm > 1e-10 {
                assert!(r.rel_error < 1e-4, "{}: {:e}", r.name, r.rel_error);
            }
        }
        assert!(reports.iter().any(|r| r.name.starts_with("fusion.") && r.analytic_norm > 1e-10));
    }

    #[test]
    fn untrained_model_is_finite_on_silence_and_longer_input() {
        let model = SepModel::<f32>::build(&SepConfig::toy(), &FusionConfig::toy(), 1).unwrap();
        let scene = SceneParams { sources: 0, ..SceneParams::toy() };
        let clip = make_synthetic_scene(&scene, 3).unwrap();
        let out = model.separate(&clip.audio, &clip.video).unwrap();
        assert!(out.fg_log.iter().chain(&out.bg_log).all(|v| v.is_finite()));
        assert_eq!(out.fg.shape(), (59, 65));
        // twice the training length
        let long = make_synthetic_scene(&SceneParams { frames: 16, ..SceneParams::toy() }, 4).unwrap();
        let out = model.separate(&long.audio, &long.video).unwrap();
        let frames = model.config.stft().num_frames(4000, 2000);
        assert_eq!(out.fg.shape(), (frames, 65));
        assert!(frames >= 2 * 59);
        // mismatched geometry
        assert!(model.separate(&long.audio, &clip.video).is_err());
    }

    #[test]
    fn unet_is_translation_covariant() {
        let cfg = SepConfig { condition_on_video: false, channels: vec![3, 4, 4], ..SepConfig::toy() };
        let model = SepModel::<f64>::build(&cfg, &FusionConfig::toy(), 2).unwrap();
        let (t, f, shift) = (48, 9, 4);
        let base = rand_tensor(&[1, 1, 1, t + shift, f], 40, 1.0);
        let a = base.narrow(3, 0, t);
        let b = base.narrow(3, shift, t);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::inference();
            let p = model.params.bind_all(&mut g);
            let x = g.constant(x.clone());
            let o = model.forward_graph(&mut g, &p, None, None, x).unwrap();
            g.value(o).clone()
        };
        let (oa, ob) = (run(&a), run(&b));
        let margin = 16;
        for c in 0..4 {
            for tt in margin..t - shift - margin {
                for ff in 0..f {
                    let x = oa.at(&[0, c, 0, tt + shift, ff]);
                    let y = ob.at(&[0, c, 0, tt, ff]);
                    assert!((x - y).abs() < 1e-12, "c {} t {} f {}: {} vs {}", c, tt, ff, x, y);
                }
            }
        }
    }

    #[test]
    fn reconstruct_identity_and_silence() {
        let cfg = SepTrainConfig::toy();
        let clip = make_synthetic_scene(&cfg.scene, 9).unwrap();
        let silent = Waveform::silence(clip.audio.len(), 2000).unwrap();
        let m = data::make_mixture_from(&clip.video, &clip.audio, &silent, &cfg.mix_config()).unwrap();
        let eps = cfg.sep.log_eps;
        let log = |s: &Spectrogram| s.magnitude.iter().map(|v| (v + eps).ln()).collect::<Vec<f64>>();
        let out = SepOutput { fg: m.fg.clone(), bg: m.bg.clone(), fg_log: log(&m.fg), bg_log: log(&m.bg), pit: None };
        let (fg, bg) = reconstruct(&out, &m.mix, PhaseSource::Mixture).unwrap();
        let range = signal::interior_range(&m.mix.config, 2000, m.mix.frames);
        let err: f64 = range.clone().map(|i| (fg.channel(0)[i] - m.fg_wave.channel(0)[i]).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = range.map(|i| m.fg_wave.channel(0)[i].powi(2)).sum::<f64>().sqrt();
        assert!(err / norm < 1e-9);
        assert!(bg.is_silent());
        let (p, _) = reconstruct(&out, &m.mix, PhaseSource::Predicted).unwrap();
        assert_eq!(p.len(), fg.len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = SepModel::<f32>::build(&SepConfig::toy(), &FusionConfig::toy(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = SepModel::<f32>::load(dir.path()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn pretrained_weights_are_copied() {
        let f = FusionModel::<f32>::build(&FusionConfig::toy(), 77).unwrap();
        let cfg = SepTrainConfig::toy();
        let m = init_model(&cfg, Some(&f), &FusionConfig::toy(), 1).unwrap();
        assert_eq!(m.fusion().params, f.params);
        let s = init_model(&SepTrainConfig { ablation: Ablation::Scratch, ..cfg.clone() }, Some(&f), &FusionConfig::toy(), 1).unwrap();
        assert_ne!(s.fusion().params, f.params);
        let n = init_model(&SepTrainConfig { ablation: Ablation::NoEarlyFusion, ..cfg }, Some(&f), &FusionConfig::toy(), 1).unwrap();
        assert!(n.audio_ablated && n.fusion().audio_ablated);
    }

    #[test]
    fn single_frame_ablation_is_time_constant() {
        let clip = make_synthetic_scene(&SceneParams::toy(), 2).unwrap();
        let v = ablated_video(&clip.video, Ablation::SingleFrame);
        let fs = v.height * v.width * 3;
        for t in 1..v.frames {
            assert_eq!(v.data[t * fs..(t + 1) * fs], v.data[..fs]);
        }
    }

    fn small_train_cfg(steps: usize, lr: f64) -> SepTrainConfig {
        let mut cfg = SepTrainConfig::toy();
        cfg.train_clips = 4;
        cfg.eval_clips = 2;
        cfg.schedule.total_steps = steps;
        cfg.schedule.batch_size = 2;
        cfg.schedule.learning_rate = lr;
        cfg
    }

    #[test]
    fn zero_learning_rate_and_replay() {
        let cfg = small_train_cfg(3, 0.0);
        let ds = SepDataset::synthesize(&cfg, 1).unwrap();
        let mut m = init_model(&cfg, None, &FusionConfig::toy(), 1).unwrap();
        let before = m.params.clone();
        train_separation(&ds, &mut m, &cfg, 1).unwrap();
        assert_eq!(m.params, before);
        let cfg = small_train_cfg(3, 1e-3);
        let run = || {
            let mut m = init_model(&cfg, None, &FusionConfig::toy(), 1).unwrap();
            let r = train_separation(&ds, &mut m, &cfg, 9).unwrap();
            (r.curve.iter().map(|p| p.loss.to_bits()).collect::<Vec<_>>(), m.params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_batch_overfit() {
        let mut cfg = small_train_cfg(1, 3e-3);
        cfg.sep.channels = vec![8, 12, 16, 16, 16, 16, 16, 16];
        let ds = SepDataset::synthesize(&cfg, 3).unwrap();
        let mut model = init_model(&cfg, None, &FusionConfig::toy(), 3).unwrap();
        let ms = eval_mixtures(&ds.train[..2], &cfg).unwrap();
        let batch = make_batch(&model, &ms, Ablation::Full).unwrap();
        let mut opt = Optimizer::new(TrainSchedule { total_steps: 300, decay_every: 1000, ..cfg.schedule.clone() });
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..300 {
            let mut g = Graph::new();
            let p = model.params.bind_all(&mut g);
            let l = batch_loss(&mut g, &model, &p, &batch).unwrap();
            last = g.value(l).item() as f64;
            first.get_or_insert(last);
            g.backward(l).unwrap();
            opt.step(&mut model.params, &p.grads(&g));
        }
        let first = first.unwrap();
        assert!(last < 0.05 * first, "loss {} -> {}", first, last);
    }

    #[test]
    fn ablations_and_evaluation_run() {
        for ab in [Ablation::Scratch, Ablation::Mono, Ablation::SingleFrame, Ablation::NoEarlyFusion, Ablation::OnOffPit] {
            let mut cfg = small_train_cfg(1, 1e-3);
            cfg.ablation = ab;
            cfg.ambient_prob = 0.5;
            let ds = SepDataset::synthesize(&cfg, 1).unwrap();
            let mut m = init_model(&cfg, None, &FusionConfig::toy(), 1).unwrap();
            train_separation(&ds, &mut m, &cfg, 1).unwrap();
            let ev = evaluate(&m, &eval_mixtures(&ds.eval, &cfg).unwrap(), ab).unwrap();
            assert_eq!(ev.rows.len(), 2);
            assert!(ev.onoff.is_finite() && ev.sdr_fg.is_finite());
            assert_eq!(ev.pit_onoff.is_some(), ab == Ablation::OnOffPit);
        }
    }

    #[test]
    fn masking_needs_two_sources() {
        let model = SepModel::<f32>::build(&SepConfig::toy(), &FusionConfig::toy(), 1).unwrap();
        let clips = two_source_scenes(&SceneParams::toy(), 1, 5).unwrap();
        assert_ne!(clips[0].sources[0].palette, clips[0].sources[1].palette);
        let r = masking_experiment(&model, &clips[0], 0.01).unwrap();
        assert!(r.corr.iter().flatten().all(|c| c.is_finite()));
        let one = make_synthetic_scene(&SceneParams::toy(), 5).unwrap();
        assert!(masking_experiment(&model, &one, 0.01).is_err());
    }
    #[test]
    fn zero_magnitudes_reconstruct_silence() {
        let cfg = SepTrainConfig::toy();
        let clip = make_synthetic_scene(&cfg.scene, 2).unwrap();
        let m = data::make_mixture_from(&clip.video, &clip.audio, &clip.audio, &cfg.mix_config()).unwrap();
        let (t, f) = m.mix.shape();
        let zero = Spectrogram::from_parts(vec![0.0; t * f], m.mix.phase.clone(), t, f, m.mix.config, 2000).unwrap();
        let floor = vec![cfg.sep.log_eps.ln(); t * f];
        let out = SepOutput { fg: zero.clone(), bg: zero, fg_log: floor.clone(), bg_log: floor, pit: None };
        for phase in [PhaseSource::Mixture, PhaseSource::Predicted] {
            let (a, b) = reconstruct(&out, &m.mix, phase).unwrap();
            assert!(a.is_silent() && b.is_silent());
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(200))]
        #[test]
        fn pit_is_symmetric_bounded_and_brute_force(seed in 0u64..u64::MAX, n in 1usize..12) {
            let p = streams(seed, n);
            let t = streams(seed ^ 0x9e37, n);
            let (l, a) = pit_loss(&p.fg_log, &p.bg_log, &t.fg_log, &t.bg_log).unwrap();
            let (l2, _) = pit_loss(&p.bg_log, &p.fg_log, &t.fg_log, &t.bg_log).unwrap();
            proptest::prop_assert_eq!(l, l2);
            let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
            let ordered = (l1(&p.fg_log, &t.fg_log) + l1(&p.bg_log, &t.bg_log)) / n as f64;
            let swapped = (l1(&p.bg_log, &t.fg_log) + l1(&p.fg_log, &t.bg_log)) / n as f64;
            proptest::prop_assert!(l <= ordered);
            proptest::prop_assert_eq!(l, ordered.min(swapped));
            proptest::prop_assert_eq!(a, if swapped < ordered { Assignment::Swapped } else { Assignment::Identity });
        }
    }

    #[test]
    fn panel_layout() {
        let cfg = StftConfig::new(64.0, 16.0, 2000);
        let a = Spectrogram::zeros(5, cfg, 2000);
        let mut b = a.clone();
        b.magnitude[0] = 1.0;
        let img = spectrogram_panel(&[&a, &b], 1e-9).unwrap();
        assert_eq!(img.dimensions(), (12, 65));
        // loudest bin: first frame, lowest frequency, drawn bottom-left of the second panel
        assert_eq!(img.get_pixel(7, 64).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(5, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
    }
}

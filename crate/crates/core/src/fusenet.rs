//! Early-fusion audio-visual network.
//!
//! The video stream is a strided 3D convolution and max-pool that reduce the
//! frame rate by four. The audio stream is a ladder of strided 1D convolutions
//! (or, optionally, 2D convolutions over a log-spectrogram) ending at the same
//! temporal rate. Audio activations are tiled over space, concatenated with the
//! video activations, and passed through four stages of 3D residual blocks,
//! global average pooling and a single-logit affine head.
//!
//! All tensors are `[N, C, T, H, W]`; waveforms enter as `[N, C, 1, 1, L]`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamStore};
use crate::signal::{self, StftConfig, Waveform};
use crate::tensor::{Real, Tensor};

/// Optional spectrogram-input audio subnetwork.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecAudioConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    /// Output channels of each strided 2D convolution.
    pub channels: Vec<usize>,
    pub time_strides: Vec<usize>,
    pub freq_strides: Vec<usize>,
    /// Channels of the final `3 × F` convolution.
    pub out_channels: usize,
    /// Inputs are `ln(1 + magnitude / log_eps)`.
    pub log_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub frame_rate: f64,
    pub sample_rate: u32,
    pub audio_samples: usize,
    /// 1 for mono, 2 for stereo input.
    pub audio_in_channels: usize,
    pub video_temporal_factor: usize,
    pub video_stem_channels: usize,
    pub video_stem_kernel: [usize; 3],
    pub audio_channels: Vec<usize>,
    pub audio_strides: Vec<usize>,
    pub fused_channels: Vec<usize>,
    pub fused_depths: Vec<usize>,
    pub fused_temporal_strides: Vec<usize>,
    pub fused_spatial_strides: Vec<usize>,
    /// Stages whose outputs are exported as feature taps.
    pub tap_stages: [usize; 3],
    pub spectrogram_audio: Option<SpecAudioConfig>,
    /// Applied to waveform samples before the audio stream.
    pub audio_gain: f64,
    /// Scale of the second convolution of each residual block at init.
    pub residual_init: f64,
}

impl FusionConfig {
    /// 8 frames of 32×32 at 8 Hz, 2 kHz mono; fuses at 2 Hz.
    pub fn toy() -> Self {
        FusionConfig {
            frames: 8,
            height: 32,
            width: 32,
            frame_rate: 8.0,
            sample_rate: 2000,
            audio_samples: 2000,
            audio_in_channels: 1,
            video_temporal_factor: 4,
            video_stem_channels: 16,
            video_stem_kernel: [3, 5, 5],
            audio_channels: vec![16, 16, 16, 24, 24],
            audio_strides: vec![2, 5, 5, 5, 4],
            fused_channels: vec![32, 48, 48, 64],
            fused_depths: vec![1, 1, 1, 1],
            fused_temporal_strides: vec![1, 2, 2, 1],
            fused_spatial_strides: vec![1, 1, 1, 1],
            tap_stages: [0, 1, 3],
            spectrogram_audio: None,
            audio_gain: 3.0,
            residual_init: 0.2,
        }
    }

    /// 125 frames of 224×224 at 29.97 Hz with 4.17 s of 21 kHz stereo; fuses at ≈7.5 Hz.
    pub fn paper_geometry() -> Self {
        FusionConfig {
            frames: 125,
            height: 224,
            width: 224,
            frame_rate: 29.97,
            sample_rate: 21_000,
            audio_samples: 87_588,
            audio_in_channels: 2,
            video_temporal_factor: 4,
            video_stem_channels: 64,
            video_stem_kernel: [5, 7, 7],
            audio_channels: vec![64, 64, 64, 128, 128],
            audio_strides: vec![4, 4, 5, 5, 7],
            fused_channels: vec![128, 128, 256, 512],
            fused_depths: vec![2, 2, 2, 2],
            fused_temporal_strides: vec![1, 2, 2, 1],
            fused_spatial_strides: vec![1, 2, 2, 2],
            tap_stages: [0, 1, 3],
            spectrogram_audio: None,
            audio_gain: 1.0,
            residual_init: 0.2,
        }
    }

    /// A few hundred parameters; for finite-difference checks.
    pub fn tiny() -> Self {
        FusionConfig {
            frames: 8,
            height: 8,
            width: 8,
            frame_rate: 8.0,
            sample_rate: 16,
            audio_samples: 16,
            audio_in_channels: 1,
            video_temporal_factor: 4,
            video_stem_channels: 2,
            video_stem_kernel: [3, 3, 3],
            audio_channels: vec![2, 2, 2, 2, 2],
            audio_strides: vec![2, 2, 2, 1, 1],
            fused_channels: vec![3, 3, 3, 3],
            fused_depths: vec![1, 1, 1, 1],
            fused_temporal_strides: vec![1, 2, 1, 1],
            fused_spatial_strides: vec![1, 1, 1, 1],
            tap_stages: [0, 1, 3],
            spectrogram_audio: None,
            audio_gain: 1.0,
            residual_init: 1.0,
        }
    }

    /// Toy geometry with the spectrogram audio stream (24 ms / 8 ms).
    pub fn toy_spectrogram() -> Self {
        FusionConfig {
            spectrogram_audio: Some(SpecAudioConfig {
                frame_ms: 24.0,
                hop_ms: 8.0,
                channels: vec![16, 16, 24, 24, 32, 32],
                time_strides: vec![2, 2, 2, 2, 2, 2],
                freq_strides: vec![1, 2, 1, 2, 1, 2],
                out_channels: 24,
                log_eps: 1e-3,
            }),
            ..FusionConfig::toy()
        }
    }

    fn stem_strides(&self) -> Result<([usize; 3], [usize; 3])> {
        match self.video_temporal_factor {
            4 => Ok(([2, 2, 2], [2, 2, 2])),
            2 => Ok(([2, 2, 2], [1, 2, 2])),
            1 => Ok(([1, 2, 2], [1, 2, 2])),
            f => Err(Error::Config(format!("video temporal factor {} not in {{1, 2, 4}}", f))),
        }
    }

    /// `(T, H, W)` of the video stream at the fusion point.
    pub fn fused_dims(&self) -> Result<[usize; 3]> {
        let (conv, pool) = self.stem_strides()?;
        let dims = [self.frames, self.height, self.width];
        Ok(std::array::from_fn(|i| dims[i].div_ceil(conv[i]).div_ceil(pool[i])))
    }

    /// Nominal frame rate at the fusion point.
    pub fn fused_rate(&self) -> f64 {
        self.frame_rate / self.video_temporal_factor as f64
    }

    /// Audio-stream length after each convolution.
    pub fn audio_lengths(&self) -> Vec<usize> {
        let mut n = self.audio_samples;
        self.audio_strides
            .iter()
            .map(|&s| {
                n = n.div_ceil(s);
                n
            })
            .collect()
    }

    /// `(T, H, W)` after every fused stage.
    pub fn stage_dims(&self) -> Result<Vec<[usize; 3]>> {
        let mut d = self.fused_dims()?;
        Ok((0..self.fused_channels.len())
            .map(|s| {
                let (ts, ss) = (self.fused_temporal_strides[s], self.fused_spatial_strides[s]);
                d = [d[0].div_ceil(ts), d[1].div_ceil(ss), d[2].div_ceil(ss)];
                d
            })
            .collect())
    }

    /// Nominal temporal rate of each tap.
    pub fn tap_rates(&self) -> [f64; 3] {
        let mut rates = Vec::new();
        let mut r = self.fused_rate();
        for s in 0..self.fused_channels.len() {
            r /= self.fused_temporal_strides[s] as f64;
            rates.push(r);
        }
        self.tap_stages.map(|s| rates[s])
    }

    pub fn tap_channels(&self) -> [usize; 3] {
        self.tap_stages.map(|s| self.fused_channels[s])
    }

    pub fn audio_out_channels(&self) -> usize {
        match &self.spectrogram_audio {
            Some(s) => s.out_channels,
            None => *self.audio_channels.last().unwrap_or(&0),
        }
    }

    pub fn spec_stft(&self) -> Option<StftConfig> {
        self.spectrogram_audio.as_ref().map(|s| StftConfig::new(s.frame_ms, s.hop_ms, self.sample_rate))
    }

    /// Spectrogram-stream `(T, F)` after each strided convolution.
    pub fn spec_dims(&self) -> Option<Vec<(usize, usize)>> {
        let s = self.spectrogram_audio.as_ref()?;
        let st = self.spec_stft()?;
        let mut t = st.num_frames(self.audio_samples, self.sample_rate);
        let mut f = st.freq_bins();
        Some(
            s.time_strides
                .iter()
                .zip(&s.freq_strides)
                .map(|(&ts, &fs)| {
                    t = t.div_ceil(ts);
                    f = f.div_ceil(fs);
                    (t, f)
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.audio_samples == 0 || self.sample_rate == 0 {
            return Err(Error::Config("input geometry must be positive".into()));
        }
        if !(1..=2).contains(&self.audio_in_channels) {
            return Err(Error::Config("audio_in_channels must be 1 or 2".into()));
        }
        let n = self.fused_channels.len();
        if n == 0
            || self.fused_depths.len() != n
            || self.fused_temporal_strides.len() != n
            || self.fused_spatial_strides.len() != n
            || self.fused_depths.contains(&0)
        {
            return Err(Error::Config("fused stage lists must share one nonzero length".into()));
        }
        if self.tap_stages.iter().any(|&s| s >= n) || self.tap_stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("tap stages {:?} must be increasing stage indices", self.tap_stages)));
        }
        let fused = self.fused_dims()?;
        let duration = self.frames as f64 / self.frame_rate;
        let samples_duration = self.audio_samples as f64 / self.sample_rate as f64;
        if (duration - samples_duration).abs() > 1.0 / self.frame_rate {
            return Err(Error::Config(format!(
                "video lasts {:.4} s but audio lasts {:.4} s",
                duration, samples_duration
            )));
        }
        match &self.spectrogram_audio {
            None => {
                if self.audio_channels.len() != self.audio_strides.len() || self.audio_strides.is_empty() || self.audio_strides.contains(&0) {
                    return Err(Error::Config("audio channel and stride lists must match".into()));
                }
                let len = *self.audio_lengths().last().unwrap();
                let product: usize = self.audio_strides.iter().product();
                let audio_rate = self.sample_rate as f64 / product as f64;
                if len != fused[0] || (audio_rate / self.fused_rate() - 1.0).abs() > 0.05 {
                    return Err(Error::Config(format!(
                        "audio strides {:?} give {} steps at {:.3} Hz but the video fuses at {} steps, {:.3} Hz",
                        self.audio_strides,
                        len,
                        audio_rate,
                        fused[0],
                        self.fused_rate()
                    )));
                }
            }
            Some(s) => {
                if s.channels.len() != s.time_strides.len() || s.channels.len() != s.freq_strides.len() || s.channels.is_empty() {
                    return Err(Error::Config("spectrogram stream lists must match".into()));
                }
                let st = self.spec_stft().unwrap();
                st.validate(self.sample_rate)?;
                if st.win_samples(self.sample_rate) > self.audio_samples {
                    return Err(Error::Config("audio shorter than one spectrogram window".into()));
                }
                let (t, _) = *self.spec_dims().unwrap().last().unwrap();
                if t < fused[0] || t > 2 * fused[0] + 1 {
                    return Err(Error::Config(format!(
                        "spectrogram stream ends with {} steps; the video fuses at {}",
                        t, fused[0]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Feature maps at three temporal scales, each `[N, C, T, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTaps<T> {
    pub names: [String; 3],
    pub tensors: Vec<Tensor<T>>,
    /// Nominal frame rate (Hz) of each tap.
    pub rates: [f64; 3],
}

/// Linear interpolation from `in_len` samples at `in_rate` to `out_len` at `out_rate`.
///
/// Sample `j` sits at time `(j + 0.5) / rate`; positions beyond the ends clamp.
pub fn interp_matrix<T: Real>(in_len: usize, in_rate: f64, out_len: usize, out_rate: f64) -> Tensor<T> {
    let mut m = Tensor::zeros(&[out_len, in_len]);
    for j in 0..out_len {
        let u = ((j as f64 + 0.5) / out_rate * in_rate - 0.5).clamp(0.0, (in_len - 1) as f64);
        let i0 = u.floor() as usize;
        let frac = u - i0 as f64;
        m.data_mut()[j * in_len + i0] += T::from_f64_lossy(1.0 - frac);
        if frac > 0.0 {
            m.data_mut()[j * in_len + i0 + 1] += T::from_f64_lossy(frac);
        }
    }
    m
}

/// Handles for one forward pass on a graph.
#[derive(Debug, Clone, Copy)]
pub struct GraphOutput {
    /// `[M, 1]`.
    pub logits: Var,
    /// `[M, C]` globally pooled features.
    pub pooled: Var,
    /// Last convolutional feature map.
    pub features: Var,
    pub taps: [Var; 3],
}

/// Result of an inference pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Vec<T>,
    pub pooled: Tensor<T>,
    pub features: Tensor<T>,
    pub taps: FeatureTaps<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<T> {
    pub config: FusionConfig,
    pub params: ParamStore<T>,
    /// When set, audio-stream activations are replaced by zeros.
    pub audio_ablated: bool,
}

fn stage_block_names(cfg: &FusionConfig) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    for (s, &d) in cfg.fused_depths.iter().enumerate() {
        for b in 0..d {
            out.push((s, b, format!("fused.s{}b{}", s, b)));
        }
    }
    out
}

impl<T: Real> FusionModel<T> {
    /// He-initialized model; identical `(cfg, seed)` give identical parameters.
    pub fn build(cfg: &FusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let k = cfg.video_stem_kernel;
        nn::init_conv(&mut p, "video.stem", cfg.video_stem_channels, 3, k, true, &mut rng);
        match &cfg.spectrogram_audio {
            None => {
                let mut ci = cfg.audio_in_channels;
                for (i, (&co, &s)) in cfg.audio_channels.iter().zip(&cfg.audio_strides).enumerate() {
                    let kw = (2 * s + 1).max(3);
                    nn::init_conv(&mut p, &format!("audio.conv{}", i), co, ci, [1, 1, kw], true, &mut rng);
                    ci = co;
                }
            }
            Some(s) => {
                let mut ci = cfg.audio_in_channels;
                for (i, &co) in s.channels.iter().enumerate() {
                    nn::init_conv(&mut p, &format!("audio_spec.conv{}", i), co, ci, [1, 3, 3], false, &mut rng);
                    ci = co;
                }
                let f = cfg.spec_dims().unwrap().last().unwrap().1;
                nn::init_conv(&mut p, "audio_spec.final", s.out_channels, ci, [1, 3, f], false, &mut rng);
            }
        }
        let mut ci = cfg.video_stem_channels + cfg.audio_out_channels();
        for (s, b, name) in stage_block_names(cfg) {
            let co = cfg.fused_channels[s];
            let stride = if b == 0 { [cfg.fused_temporal_strides[s], cfg.fused_spatial_strides[s], cfg.fused_spatial_strides[s]] } else { [1, 1, 1] };
            nn::init_conv(&mut p, &format!("{}.conv1", name), co, ci, [3, 3, 3], true, &mut rng);
            nn::init_conv(&mut p, &format!("{}.conv2", name), co, co, [3, 3, 3], true, &mut rng);
            let w2 = p.get_mut(&format!("{}.conv2.w", name)).unwrap();
            w2.scale_inplace(T::from_f64_lossy(cfg.residual_init));
            if ci != co || stride != [1, 1, 1] {
                nn::init_conv(&mut p, &format!("{}.proj", name), co, ci, [1, 1, 1], false, &mut rng);
            }
            ci = co;
        }
        nn::init_linear(&mut p, "head", 1, ci, &mut rng);
        Ok(FusionModel { config: cfg.clone(), params: p, audio_ablated: false })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// A copy whose audio stream contributes only zeros; `self` is unchanged.
    pub fn ablate_audio(&self) -> Self {
        FusionModel { audio_ablated: true, ..self.clone() }
    }

    /// Video stream up to the fusion point.
    pub fn video_stream(&self, g: &mut Graph<T>, p: &Bound, video: Var) -> Result<Var> {
        let c = &self.config;
        let s = g.shape(video).to_vec();
        if s.len() != 5 || s[1] != 3 || s[2..] != [c.frames, c.height, c.width] {
            return Err(Error::Shape(format!(
                "video {:?} does not match [N, 3, {}, {}, {}]",
                s, c.frames, c.height, c.width
            )));
        }
        let (conv_s, pool) = c.stem_strides()?;
        let x = g.scale(video, T::from_f64_lossy(4.0));
        let x = g.add_scalar(x, T::from_f64_lossy(-2.0));
        let x = nn::conv_ceil(g, p, "video.stem", x, conv_s)?;
        let x = g.relu(x);
        g.max_pool(x, pool)
    }

    /// Audio stream, shaped `[M, C, T_fused, 1, 1]`.
    pub fn audio_stream(&self, g: &mut Graph<T>, p: &Bound, audio: Var) -> Result<Var> {
        let c = &self.config;
        let s = g.shape(audio).to_vec();
        if s.len() != 5 || s[1] != c.audio_in_channels || s[2] != 1 || s[3] != 1 || s[4] != c.audio_samples {
            return Err(Error::Shape(format!(
                "audio {:?} does not match [N, {}, 1, 1, {}]",
                s, c.audio_in_channels, c.audio_samples
            )));
        }
        let m = s[0];
        let fused_t = c.fused_dims()?[0];
        if self.audio_ablated {
            return Ok(g.constant(Tensor::zeros(&[m, c.audio_out_channels(), fused_t, 1, 1])));
        }
        match &c.spectrogram_audio {
            None => {
                let mut x = g.scale(audio, T::from_f64_lossy(c.audio_gain));
                for (i, &st) in c.audio_strides.iter().enumerate() {
                    x = nn::conv_ceil(g, p, &format!("audio.conv{}", i), x, [1, 1, st])?;
                    x = g.relu(x);
                }
                let ch = g.shape(x)[1];
                g.reshape(x, &[m, ch, fused_t, 1, 1])
            }
            Some(sc) => {
                let spec = self.log_spectrogram_input(g.value(audio))?;
                let mut x = g.constant(spec);
                for (i, (&ts, &fs)) in sc.time_strides.iter().zip(&sc.freq_strides).enumerate() {
                    x = nn::conv_ceil(g, p, &format!("audio_spec.conv{}", i), x, [1, ts, fs])?;
                    x = g.relu(x);
                }
                // 3 × F convolution: pad time only, the frequency axis collapses.
                let w = p.var("audio_spec.final.w")?;
                let x = g.pad_axis(x, 3, 1, 1);
                let x = g.conv(x, w, None, crate::conv::ConvSpec::new([1, 1, 1], [0, 0, 0]))?;
                let x = g.relu(x);
                let t = g.shape(x)[3];
                let x = if t > fused_t {
                    g.narrow(x, 3, 0, fused_t)?
                } else if t < fused_t {
                    g.pad_axis(x, 3, 0, fused_t - t)
                } else {
                    x
                };
                g.reshape(x, &[m, sc.out_channels, fused_t, 1, 1])
            }
        }
    }

    /// `[M, C, 1, T, F]` of `ln(1 + |STFT| / eps)`, per input channel.
    pub fn log_spectrogram_input(&self, audio: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let sc = c.spectrogram_audio.as_ref().ok_or_else(|| Error::Config("no spectrogram stream".into()))?;
        let st = c.spec_stft().unwrap();
        let (m, ch, n) = (audio.dim(0), audio.dim(1), audio.dim(4));
        let frames = st.num_frames(n, c.sample_rate);
        let bins = st.freq_bins();
        let mut out = Vec::with_capacity(m * ch * frames * bins);
        for row in audio.data().chunks(n) {
            let w = Waveform::mono(row.iter().map(|v| v.as_f64()).collect(), c.sample_rate)?;
            let s = signal::stft(&w, &st)?;
            out.extend(s.magnitude.iter().map(|&mag| T::from_f64_lossy((mag / sc.log_eps).ln_1p())));
        }
        Tensor::from_vec(&[m, ch, 1, frames, bins], out)
    }

    /// Residual stages, pooling and head on fused activations.
    fn fused_stages(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<GraphOutput> {
        let c = &self.config;
        let mut x = x;
        let mut stage_out = Vec::new();
        let blocks = stage_block_names(c);
        for (s, b, name) in &blocks {
            let stride = if *b == 0 { [c.fused_temporal_strides[*s], c.fused_spatial_strides[*s], c.fused_spatial_strides[*s]] } else { [1, 1, 1] };
            let y = self.conv3(g, p, &format!("{}.conv1", name), x, stride)?;
            let y = g.relu(y);
            let y = self.conv3(g, p, &format!("{}.conv2", name), y, [1, 1, 1])?;
            let short = if p.has(&format!("{}.proj.w", name)) { nn::conv_ceil(g, p, &format!("{}.proj", name), x, stride)? } else { x };
            let y = g.add(y, short)?;
            x = g.relu(y);
            if *b + 1 == c.fused_depths[*s] {
                stage_out.push(x);
            }
        }
        let shape = g.shape(x).to_vec();
        let (m, ch) = (shape[0], shape[1]);
        let flat = g.reshape(x, &[m, ch, shape[2] * shape[3] * shape[4]])?;
        let pooled = g.mean_trailing(flat, 1)?;
        let pooled = g.reshape(pooled, &[m, ch])?;
        let logits = g.linear(pooled, p.var("head.w")?, p.var("head.b")?)?;
        Ok(GraphOutput { logits, pooled, features: x, taps: c.tap_stages.map(|s| stage_out[s]) })
    }

    /// 3×3×3 convolution; a singleton time axis uses only the centre temporal slice,
    /// which is exactly what zero padding would compute.
    fn conv3(&self, g: &mut Graph<T>, p: &Bound, name: &str, x: Var, stride: [usize; 3]) -> Result<Var> {
        let w = p.var(&format!("{}.w", name))?;
        let b = Some(p.var(&format!("{}.b", name))?);
        let (t, kt) = (g.shape(x)[2], g.shape(w)[2]);
        let w = if t == 1 && kt > 1 { g.narrow(w, 2, kt / 2, 1)? } else { w };
        nn::conv_ceil_vars(g, x, w, b, stride)
    }

    /// Fuses a video batch of `N` with an audio batch of `k·N`: audio item `j`
    /// is paired with video `j mod N`, so the video stream runs once.
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &Bound, video: Var, audio: Var) -> Result<GraphOutput> {
        let v = self.video_stream(g, p, video)?;
        let a = self.audio_stream(g, p, audio)?;
        self.fuse(g, p, v, a)
    }

    /// Fusion of precomputed stream outputs.
    pub fn fuse(&self, g: &mut Graph<T>, p: &Bound, v: Var, a: Var) -> Result<GraphOutput> {
        let (n, m) = (g.shape(v)[0], g.shape(a)[0]);
        if m % n != 0 {
            return Err(Error::Shape(format!("{} audio items for {} videos", m, n)));
        }
        let vs = g.shape(v).to_vec();
        let v = if m == n { v } else { g.concat(&vec![v; m / n], 0)? };
        let a = g.broadcast_trailing(a, &[vs[3], vs[4]])?;
        let x = g.concat(&[v, a], 1)?;
        self.fused_stages(g, p, x)
    }

    /// Inference pass on concrete tensors.
    pub fn forward(&self, video: &Tensor<T>, audio: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut g = Graph::inference();
        let p = self.params.bind_all(&mut g);
        let v = g.constant(video.clone());
        let a = g.constant(audio.clone());
        let out = self.forward_graph(&mut g, &p, v, a)?;
        Ok(self.collect(&g, &out))
    }

    pub fn collect(&self, g: &Graph<T>, out: &GraphOutput) -> ForwardOutput<T> {
        let names = self.config.tap_stages.map(|s| format!("stage{}", s + 1));
        ForwardOutput {
            logits: g.value(out.logits).data().to_vec(),
            pooled: g.value(out.pooled).clone(),
            features: g.value(out.features).clone(),
            taps: FeatureTaps {
                names,
                tensors: out.taps.iter().map(|&t| g.value(t).clone()).collect(),
                rates: self.config.tap_rates(),
            },
        }
    }

    /// Writes `dir/params.ava` and `dir/config.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, "fusion", &self.config, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (cfg, params): (FusionConfig, ParamStore<T>) = load_checkpoint(dir, "fusion")?;
        let mut model = FusionModel::build(&cfg, 0)?;
        model.load_params(&params)?;
        Ok(model)
    }

    /// Copies every parameter of this model from `src` by name.
    pub fn load_params(&mut self, src: &ParamStore<T>) -> Result<()> {
        let names: Vec<String> = self.params.names().cloned().collect();
        for name in names {
            let t = src.get(&name).map_err(|_| Error::Incompatible(format!("checkpoint lacks parameter {}", name)))?;
            let dst = self.params.get_mut(&name).unwrap();
            if dst.shape() != t.shape() {
                return Err(Error::Incompatible(format!("parameter {} has shape {:?}, checkpoint {:?}", name, dst.shape(), t.shape())));
            }
            *dst = t.clone();
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest<C> {
    kind: String,
    version: String,
    config: C,
}

/// Checkpoint directory: `params.ava` (tensor archive) and `config.json`.
pub fn save_checkpoint<C: Serialize, T: Real>(dir: &Path, kind: &str, config: &C, params: &ParamStore<T>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::io::save_archive(&dir.join("params.ava"), params.as_map())?;
    let m = Manifest { kind: kind.to_string(), version: crate::VERSION.to_string(), config };
    let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
    crate::io::write_atomic(&dir.join("config.json"), json.as_bytes())
}

pub fn load_checkpoint<C: for<'de> Deserialize<'de>, T: Real>(dir: &Path, kind: &str) -> Result<(C, ParamStore<T>)> {
    let path = dir.join("config.json");
    if !path.exists() {
        return Err(Error::Missing(path));
    }
    let text = std::fs::read_to_string(&path)?;
    let m: Manifest<C> = serde_json::from_str(&text).map_err(|e| Error::Format { path: path.clone(), reason: e.to_string() })?;
    if m.kind != kind {
        return Err(Error::Incompatible(format!("{} holds a {} checkpoint, expected {}", dir.display(), m.kind, kind)));
    }
    let params = ParamStore::from_map(crate::io::load_archive(&dir.join("params.ava"))?);
    Ok((m.config, params))
}

//! Synthetic audio-visual scenes and the sampling protocols built on them.
//!
//! A scene is a dark canvas with square sprites. Sounding sprites flash and grow
//! for exactly one frame at every sound onset; each onset emits a burst whose
//! fundamental is tied to the sprite's colour. Distractor sprites are grey,
//! move the same way, and never flash.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::signal::{self, normalize_power, stft, Spectrogram, StftConfig, WavEncoding, Waveform};
use crate::tensor::{Real, Tensor};

/// Sprite colours and their fundamentals (Hz).
pub const PALETTE: [([f32; 3], f64); 6] = [
    ([0.95, 0.25, 0.20], 180.0),
    ([0.20, 0.85, 0.30], 260.0),
    ([0.25, 0.40, 0.95], 340.0),
    ([0.95, 0.85, 0.20], 430.0),
    ([0.85, 0.30, 0.90], 530.0),
    ([0.20, 0.85, 0.90], 650.0),
];

const BACKGROUND: f32 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Random,
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Timbre {
    Tone,
    Noise,
}

/// Parameters of [`make_synthetic_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub frames: usize,
    pub frame_rate: f64,
    pub height: usize,
    pub width: usize,
    pub sample_rate: u32,
    pub stereo: bool,
    pub sources: usize,
    pub distractors: usize,
    pub sprite_size: usize,
    /// Expected onsets per second for each sounding sprite.
    pub onset_rate: f64,
    pub min_onset_gap_frames: usize,
    pub burst_ms: f64,
    /// Probability that an onset emits a noise burst instead of a tone.
    pub noise_burst_prob: f64,
    pub max_speed: f64,
    pub motion: Motion,
    pub timbre: Timbre,
    /// Fixed palette entries for the sounding sprites; random when empty.
    pub palette: Vec<usize>,
    /// Amplitude of static per-pixel background texture.
    pub texture: f32,
}

impl SceneParams {
    /// 8 frames of 32×32 at 8 Hz with 2 kHz mono audio.
    pub fn toy() -> Self {
        SceneParams {
            frames: 8,
            frame_rate: 8.0,
            height: 32,
            width: 32,
            sample_rate: 2000,
            stereo: false,
            sources: 1,
            distractors: 1,
            sprite_size: 10,
            onset_rate: 2.0,
            min_onset_gap_frames: 2,
            burst_ms: 90.0,
            noise_burst_prob: 0.0,
            max_speed: 1.2,
            motion: Motion::Random,
            timbre: Timbre::Tone,
            palette: vec![],
            texture: 0.03,
        }
    }

    /// 125 frames of 256×256 at 29.97 Hz with 21 kHz stereo audio.
    pub fn paper_geometry() -> Self {
        SceneParams {
            frames: 125,
            frame_rate: 29.97,
            height: 256,
            width: 256,
            sample_rate: 21_000,
            stereo: true,
            sources: 1,
            distractors: 2,
            sprite_size: 48,
            onset_rate: 2.0,
            min_onset_gap_frames: 6,
            burst_ms: 120.0,
            noise_burst_prob: 0.1,
            max_speed: 4.0,
            motion: Motion::Random,
            timbre: Timbre::Tone,
            palette: vec![],
            texture: 0.03,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.frames as f64 / self.frame_rate
    }

    pub fn audio_samples(&self) -> usize {
        frame_to_sample(self.frames, self.frame_rate, self.sample_rate)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || !(self.frame_rate > 0.0) || self.sample_rate == 0 {
            return Err(Error::Range("scene geometry must be positive".into()));
        }
        if self.sprite_size + 2 >= self.height.min(self.width) {
            return Err(Error::Range(format!("sprite size {} does not fit the frame", self.sprite_size)));
        }
        if self.sources > 0 && self.onset_rate > 0.0 && self.duration_s() * 1000.0 < self.burst_ms {
            return Err(Error::Range(format!(
                "a {:.3} s clip is too short for one {} ms onset burst",
                self.duration_s(),
                self.burst_ms
            )));
        }
        if self.palette.iter().any(|&p| p >= PALETTE.len()) {
            return Err(Error::Range("palette index out of range".into()));
        }
        if !self.palette.is_empty() && self.palette.len() != self.sources {
            return Err(Error::Range("palette must list one entry per source".into()));
        }
        Ok(())
    }
}

pub fn frame_to_sample(frame: usize, frame_rate: f64, sample_rate: u32) -> usize {
    (frame as f64 * sample_rate as f64 / frame_rate).round() as usize
}

/// Axis-aligned box in pixel coordinates, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    fn clamp(&self, w: f64, h: f64) -> BBox {
        BBox { x0: self.x0.clamp(0.0, w), y0: self.y0.clamp(0.0, h), x1: self.x1.clamp(0.0, w), y1: self.y1.clamp(0.0, h) }
    }
}

/// RGB frames stored `[frames, height, width, 3]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Video {
    pub fn new(frames: usize, height: usize, width: usize, fill: f32) -> Self {
        Video { frames, height, width, data: vec![fill; frames * height * width * 3] }
    }

    #[inline]
    pub fn idx(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * 3 + c
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let i = self.idx(t, y, x, 0);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn frame_range(&self, start: usize, len: usize) -> Video {
        let fs = self.height * self.width * 3;
        Video { frames: len, height: self.height, width: self.width, data: self.data[start * fs..(start + len) * fs].to_vec() }
    }

    /// Repeats frame `t` for every frame.
    pub fn freeze_frame(&self, t: usize) -> Video {
        let fs = self.height * self.width * 3;
        let frame = &self.data[t * fs..(t + 1) * fs];
        Video { frames: self.frames, height: self.height, width: self.width, data: frame.repeat(self.frames) }
    }

    /// Paints `boxes[t]` with the background colour in every frame.
    pub fn mask_boxes(&self, boxes: &[BBox]) -> Video {
        let mut v = self.clone();
        for (t, b) in boxes.iter().enumerate().take(self.frames) {
            let b = b.clamp(self.width as f64, self.height as f64);
            for y in b.y0.floor() as usize..(b.y1.ceil() as usize).min(self.height) {
                for x in b.x0.floor() as usize..(b.x1.ceil() as usize).min(self.width) {
                    for c in 0..3 {
                        let i = v.idx(t, y, x, c);
                        v.data[i] = BACKGROUND;
                    }
                }
            }
        }
        v
    }

    /// `[3, frames, height, width]` channel-first layout.
    pub fn to_channels_first<T: Real>(&self) -> Vec<T> {
        let plane = self.frames * self.height * self.width;
        let mut out = vec![T::zero(); 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = T::from_f64_lossy(px[c] as f64);
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[self.frames, self.height, self.width, 3], self.data.clone()).expect("video shape")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Video> {
        match *t.shape() {
            [frames, height, width, 3] => Ok(Video { frames, height, width, data: t.data().to_vec() }),
            _ => Err(Error::Shape(format!("video tensor must be [T, H, W, 3], got {:?}", t.shape()))),
        }
    }
}

/// Batches videos as `[N, 3, T, H, W]`.
pub fn video_batch<T: Real>(videos: &[&Video]) -> Result<Tensor<T>> {
    let first = videos.first().ok_or_else(|| Error::Shape("empty video batch".into()))?;
    let mut data = Vec::new();
    for v in videos {
        if (v.frames, v.height, v.width) != (first.frames, first.height, first.width) {
            return Err(Error::Shape("videos in a batch differ in geometry".into()));
        }
        data.extend(v.to_channels_first::<T>());
    }
    Tensor::from_vec(&[videos.len(), 3, first.frames, first.height, first.width], data)
}

/// Batches waveforms as `[N, channels, 1, 1, samples]`; mono is duplicated to `channels`.
pub fn audio_batch<T: Real>(audios: &[&Waveform], channels: usize) -> Result<Tensor<T>> {
    let first = audios.first().ok_or_else(|| Error::Shape("empty audio batch".into()))?;
    let n = first.len();
    let mut data = Vec::with_capacity(audios.len() * channels * n);
    for a in audios {
        if a.len() != n {
            return Err(Error::Shape("waveforms in a batch differ in length".into()));
        }
        for c in 0..channels {
            let src = a.channel(c.min(a.num_channels() - 1));
            data.extend(src.iter().map(|&v| T::from_f64_lossy(v)));
        }
    }
    Tensor::from_vec(&[audios.len(), channels, 1, 1, n], data)
}

/// Ground truth for one sounding sprite.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceInfo {
    pub palette: usize,
    pub fundamental: f64,
    pub onset_frames: Vec<usize>,
    pub boxes: Vec<BBox>,
    /// This source's contribution to the soundtrack.
    pub audio: Waveform,
}

/// A video and its soundtrack on a common time origin.
#[derive(Debug, Clone, PartialEq)]
pub struct AVClip {
    pub video: Video,
    pub frame_rate: f64,
    pub audio: Waveform,
    pub onset_times: Vec<f64>,
    /// Frames in which some sprite visibly pulses.
    pub pulse_frames: Vec<usize>,
    /// Box of the (first) sounding sprite per frame; empty without sources.
    pub source_track: Vec<BBox>,
    pub sources: Vec<SourceInfo>,
    pub distractor_boxes: Vec<Vec<BBox>>,
    pub seed: u64,
}

impl AVClip {
    pub fn duration_s(&self) -> f64 {
        self.video.frames as f64 / self.frame_rate
    }

    /// Crops frames `[start, start + len)` and the matching audio.
    pub fn window(&self, start: usize, len: usize) -> Result<AVClip> {
        if start + len > self.video.frames {
            return Err(Error::Length(format!("window [{}, {}) of {} frames", start, start + len, self.video.frames)));
        }
        let sr = self.audio.sample_rate();
        let a0 = frame_to_sample(start, self.frame_rate, sr);
        let alen = frame_to_sample(len, self.frame_rate, sr);
        let crop_frames = |f: &[usize]| f.iter().filter(|&&x| x >= start && x < start + len).map(|x| x - start).collect::<Vec<_>>();
        let sources = self
            .sources
            .iter()
            .map(|s| {
                Ok(SourceInfo {
                    palette: s.palette,
                    fundamental: s.fundamental,
                    onset_frames: crop_frames(&s.onset_frames),
                    boxes: s.boxes[start..start + len].to_vec(),
                    audio: s.audio.slice(a0, alen)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pulse_frames = crop_frames(&self.pulse_frames);
        Ok(AVClip {
            video: self.video.frame_range(start, len),
            frame_rate: self.frame_rate,
            audio: self.audio.slice(a0, alen)?,
            onset_times: pulse_frames.iter().map(|&f| f as f64 / self.frame_rate).collect(),
            pulse_frames,
            source_track: if self.source_track.is_empty() { vec![] } else { self.source_track[start..start + len].to_vec() },
            sources,
            distractor_boxes: self.distractor_boxes.iter().map(|b| b[start..start + len].to_vec()).collect(),
            seed: self.seed,
        })
    }
}

struct Sprite {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

impl Sprite {
    fn spawn(rng: &mut ChaCha8Rng, p: &SceneParams) -> Sprite {
        let s = p.sprite_size as f64;
        let x = rng.gen_range(1.0..(p.width as f64 - s - 1.0));
        let y = rng.gen_range(1.0..(p.height as f64 - s - 1.0));
        let speed = rng.gen_range(0.3 * p.max_speed..=p.max_speed);
        let angle: f64 = rng.gen_range(0.0..2.0 * PI);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (vx, vy) = match p.motion {
            Motion::Random => (speed * angle.cos(), speed * angle.sin()),
            Motion::Horizontal => (sign * speed, 0.0),
            Motion::Vertical => (0.0, sign * speed),
        };
        Sprite { x, y, vx, vy }
    }

    fn advance(&mut self, p: &SceneParams) {
        let s = p.sprite_size as f64;
        let (max_x, max_y) = (p.width as f64 - s - 1.0, p.height as f64 - s - 1.0);
        self.x += self.vx;
        self.y += self.vy;
        if self.x < 1.0 || self.x > max_x {
            self.vx = -self.vx;
            self.x = self.x.clamp(1.0, max_x);
        }
        if self.y < 1.0 || self.y > max_y {
            self.vy = -self.vy;
            self.y = self.y.clamp(1.0, max_y);
        }
    }

    fn bbox(&self, size: usize) -> BBox {
        let x0 = self.x.round();
        let y0 = self.y.round();
        BBox { x0, y0, x1: x0 + size as f64, y1: y0 + size as f64 }
    }
}

fn paint(video: &mut Video, t: usize, b: &BBox, color: [f32; 3]) {
    let b = b.clamp(video.width as f64, video.height as f64);
    for y in b.y0 as usize..b.y1 as usize {
        for x in b.x0 as usize..b.x1 as usize {
            for c in 0..3 {
                let i = video.idx(t, y, x, c);
                video.data[i] = color[c];
            }
        }
    }
}

fn burst(
    out: &mut [Vec<f64>],
    start: usize,
    sr: u32,
    f0: f64,
    burst_ms: f64,
    noise: bool,
    pan: f64,
    rng: &mut ChaCha8Rng,
) {
    let len = (burst_ms * sr as f64 / 1000.0).round() as usize;
    let attack = ((0.005 * sr as f64).round() as usize).max(1);
    let tau = len as f64 / 4.0;
    let nyquist = sr as f64 / 2.0;
    let harmonics: Vec<(f64, f64)> = [(1.0, 1.0), (2.0, 0.5), (3.0, 0.25)]
        .into_iter()
        .filter(|&(h, _)| h * f0 < 0.9 * nyquist)
        .collect();
    let noise_vals: Vec<f64> = if noise { (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect() } else { vec![] };
    let gains = if out.len() == 2 {
        let theta = pan.clamp(0.0, 1.0) * PI / 2.0;
        vec![theta.cos() * 2f64.sqrt(), theta.sin() * 2f64.sqrt()]
    } else {
        vec![1.0]
    };
    for i in 0..len {
        let n = start + i;
        if n >= out[0].len() {
            break;
        }
        let env = if i < attack { i as f64 / attack as f64 } else { (-((i - attack) as f64) / tau).exp() };
        let t = i as f64 / sr as f64;
        let v = if noise {
            noise_vals[i]
        } else {
            harmonics.iter().map(|&(h, a)| a * (2.0 * PI * h * f0 * t).sin()).sum::<f64>()
        };
        for (ch, g) in out.iter_mut().zip(&gains) {
            ch[n] += 0.3 * env * v * g;
        }
    }
}

/// Generates one scene; identical `(params, seed)` give bit-identical clips.
pub fn make_synthetic_scene(params: &SceneParams, seed: u64) -> Result<AVClip> {
    params.validate()?;
    let p = params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_samples = p.audio_samples();
    let nch = if p.stereo { 2 } else { 1 };

    let mut palette_choices: Vec<usize> = (0..PALETTE.len()).collect();
    let mut source_palette = Vec::new();
    for s in 0..p.sources {
        let idx = if p.palette.is_empty() {
            let j = rng.gen_range(0..palette_choices.len());
            palette_choices.swap_remove(j)
        } else {
            p.palette[s]
        };
        source_palette.push(idx);
    }

    // Onsets on the frame grid, at least `min_onset_gap_frames` apart.
    let prob = (p.onset_rate / p.frame_rate).clamp(0.0, 1.0);
    let burst_frames = (p.burst_ms / 1000.0 * p.frame_rate).ceil() as usize;
    let mut onsets: Vec<Vec<usize>> = Vec::new();
    for _ in 0..p.sources {
        let mut list = Vec::new();
        let mut last: Option<usize> = None;
        for f in 0..p.frames {
            let free = last.is_none_or(|l| f >= l + p.min_onset_gap_frames.max(1));
            if free && rng.gen_bool(prob) {
                list.push(f);
                last = Some(f);
            }
        }
        if list.is_empty() && prob > 0.0 {
            list.push(rng.gen_range(0..p.frames.saturating_sub(burst_frames).max(1)));
        }
        onsets.push(list);
    }

    let mut sources: Vec<Sprite> = (0..p.sources).map(|_| Sprite::spawn(&mut rng, p)).collect();
    let mut distractors: Vec<Sprite> = (0..p.distractors).map(|_| Sprite::spawn(&mut rng, p)).collect();
    let distractor_grey: Vec<f32> = (0..p.distractors).map(|_| rng.gen_range(0.35..0.7)).collect();
    let texture: Vec<f32> = (0..p.height * p.width).map(|_| rng.gen_range(-1.0..1.0) * p.texture).collect();

    let mut video = Video::new(p.frames, p.height, p.width, BACKGROUND);
    let mut source_boxes = vec![Vec::with_capacity(p.frames); p.sources];
    let mut distractor_boxes = vec![Vec::with_capacity(p.frames); p.distractors];
    for t in 0..p.frames {
        for (i, tex) in texture.iter().enumerate() {
            for c in 0..3 {
                let idx = t * p.height * p.width * 3 + i * 3 + c;
                video.data[idx] = BACKGROUND + tex;
            }
        }
        for (d, s) in distractors.iter().enumerate() {
            let b = s.bbox(p.sprite_size);
            let g = distractor_grey[d];
            paint(&mut video, t, &b, [g, g, g]);
            distractor_boxes[d].push(b);
        }
        for (k, s) in sources.iter().enumerate() {
            let b = s.bbox(p.sprite_size);
            let base = PALETTE[source_palette[k]].0;
            if onsets[k].contains(&t) {
                let grown = BBox { x0: b.x0 - 1.0, y0: b.y0 - 1.0, x1: b.x1 + 1.0, y1: b.y1 + 1.0 };
                let bright = [0.4 + 0.6 * base[0], 0.4 + 0.6 * base[1], 0.4 + 0.6 * base[2]];
                paint(&mut video, t, &grown, bright);
            } else {
                paint(&mut video, t, &b, base);
            }
            source_boxes[k].push(b);
        }
        for s in sources.iter_mut().chain(distractors.iter_mut()) {
            s.advance(p);
        }
    }
    let mut mix = vec![vec![0.0; n_samples]; nch];
    let mut per_source = Vec::with_capacity(p.sources);
    for k in 0..p.sources {
        let f0 = PALETTE[source_palette[k]].1;
        let mut track = vec![vec![0.0; n_samples]; nch];
        for &f in &onsets[k] {
            let noise = matches!(p.timbre, Timbre::Noise) || (p.noise_burst_prob > 0.0 && rng.gen_bool(p.noise_burst_prob));
            let b = source_boxes[k][f];
            let pan = ((b.x0 + b.x1) / 2.0) / p.width as f64;
            burst(&mut track, frame_to_sample(f, p.frame_rate, p.sample_rate), p.sample_rate, f0, p.burst_ms, noise, pan, &mut rng);
        }
        for (m, t) in mix.iter_mut().zip(&track) {
            for (a, b) in m.iter_mut().zip(t) {
                *a += b;
            }
        }
        per_source.push(Waveform::new(track, p.sample_rate)?);
    }

    let mut pulse_frames: Vec<usize> = onsets.iter().flatten().copied().collect();
    pulse_frames.sort_unstable();
    pulse_frames.dedup();
    let onset_times = pulse_frames.iter().map(|&f| f as f64 / p.frame_rate).collect();
    let infos = (0..p.sources)
        .map(|k| SourceInfo {
            palette: source_palette[k],
            fundamental: PALETTE[source_palette[k]].1,
            onset_frames: onsets[k].clone(),
            boxes: source_boxes[k].clone(),
            audio: per_source[k].clone(),
        })
        .collect();
    Ok(AVClip {
        video,
        frame_rate: p.frame_rate,
        audio: Waveform::new(mix, p.sample_rate)?,
        onset_times,
        pulse_frames,
        source_track: source_boxes.first().cloned().unwrap_or_default(),
        sources: infos,
        distractor_boxes,
        seed,
    })
}

/// Signed shift with `|shift|` uniform in `[lo_s, hi_s]` and a uniform sign.
/// `slack_s` is how much longer the source recording is than the window.
pub fn sample_shift<R: Rng>(rng: &mut R, lo_s: f64, hi_s: f64, slack_s: f64) -> Result<f64> {
    if !(lo_s > 0.0) || hi_s < lo_s {
        return Err(Error::Range(format!("shift range [{}, {}] must satisfy 0 < lo <= hi", lo_s, hi_s)));
    }
    if hi_s > slack_s {
        return Err(Error::Range(format!(
            "shift up to {} s needs more than the {} s of slack in the source clip",
            hi_s, slack_s
        )));
    }
    let mag = if hi_s == lo_s { lo_s } else { rng.gen_range(lo_s..=hi_s) };
    Ok(if rng.gen_bool(0.5) { mag } else { -mag })
}

/// Aligned and shifted soundtracks for one window of a longer clip.
#[derive(Debug, Clone)]
pub struct AlignmentPair {
    pub clip: AVClip,
    pub shift_s: f64,
    pub aligned_audio: Waveform,
    pub shifted_audio: Waveform,
}

/// Cuts the window `[start_frame, start_frame + frames)` from `long_clip`, plus
/// the audio `shift_s` seconds later (or earlier) from the same recording.
pub fn make_alignment_pair(long_clip: &AVClip, start_frame: usize, frames: usize, shift_s: f64) -> Result<AlignmentPair> {
    let clip = long_clip.window(start_frame, frames)?;
    let sr = long_clip.audio.sample_rate();
    let a0 = frame_to_sample(start_frame, long_clip.frame_rate, sr) as i64;
    let len = clip.audio.len();
    let offset = (shift_s * sr as f64).round() as i64;
    let s0 = a0 + offset;
    if s0 < 0 || s0 as usize + len > long_clip.audio.len() {
        return Err(Error::Range(format!(
            "shift {} s from frame {} leaves the source recording",
            shift_s, start_frame
        )));
    }
    let shifted_audio = long_clip.audio.slice(s0 as usize, len)?;
    Ok(AlignmentPair { aligned_audio: clip.audio.clone(), clip, shift_s, shifted_audio })
}

/// Picks a window start for which both the aligned and the shifted audio fit.
pub fn sample_window_start<R: Rng>(rng: &mut R, long_frames: usize, frames: usize, frame_rate: f64, shift_s: f64) -> Result<usize> {
    let shift_frames = (shift_s.abs() * frame_rate).ceil() as usize;
    if frames + shift_frames > long_frames {
        return Err(Error::Range(format!("{} frames plus a {} s shift exceed {} source frames", frames, shift_s, long_frames)));
    }
    let span = long_frames - frames - shift_frames;
    let base = rng.gen_range(0..=span);
    Ok(if shift_s < 0.0 { base + shift_frames } else { base })
}

/// Mixing options for on/off-screen samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixConfig {
    pub stft: StftConfig,
    pub power: f64,
}

/// On-screen, off-screen and mixed audio for one conditioning video.
#[derive(Debug, Clone)]
pub struct MixtureSample {
    pub video: Video,
    pub fg: Spectrogram,
    pub bg: Spectrogram,
    pub mix: Spectrogram,
    pub fg_wave: Waveform,
    pub bg_wave: Waveform,
    pub mix_wave: Waveform,
}

fn prepare_track(w: &Waveform, len: usize, power: f64) -> Result<Waveform> {
    let mono = signal::downmix_mono(w).slice(0, len)?;
    if mono.is_silent() {
        Ok(mono)
    } else {
        normalize_power(&mono, power)
    }
}

/// Mixes `on_screen`'s soundtrack with `off_screen`'s in the waveform domain.
pub fn make_mixture(on_screen: &AVClip, off_screen: &AVClip, cfg: &MixConfig) -> Result<MixtureSample> {
    make_mixture_from(&on_screen.video, &on_screen.audio, &off_screen.audio, cfg)
}

pub fn make_mixture_from(video: &Video, fg_audio: &Waveform, bg_audio: &Waveform, cfg: &MixConfig) -> Result<MixtureSample> {
    if fg_audio.sample_rate() != bg_audio.sample_rate() {
        return Err(Error::Incompatible(format!(
            "sample rates differ: {} vs {}",
            fg_audio.sample_rate(),
            bg_audio.sample_rate()
        )));
    }
    let len = fg_audio.len().min(bg_audio.len());
    let fg_wave = prepare_track(fg_audio, len, cfg.power)?;
    let bg_wave = prepare_track(bg_audio, len, cfg.power)?;
    let mix_wave = fg_wave.add(&bg_wave)?;
    Ok(MixtureSample {
        video: video.clone(),
        fg: stft(&fg_wave, &cfg.stft)?,
        bg: stft(&bg_wave, &cfg.stft)?,
        mix: stft(&mix_wave, &cfg.stft)?,
        fg_wave,
        bg_wave,
        mix_wave,
    })
}

/// Augmentation settings: random crop, horizontal flip, small audio jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip_prob: f64,
    /// Largest audio shift in video frames (at most 1).
    pub max_jitter_frames: f64,
}

/// One concrete draw of [`AugmentConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub crop_y: usize,
    pub crop_x: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip: bool,
    pub jitter_samples: i64,
}

pub fn augment<R: Rng>(clip: &AVClip, cfg: &AugmentConfig, rng: &mut R) -> Result<AVClip> {
    let v = &clip.video;
    if cfg.crop_height > v.height || cfg.crop_width > v.width {
        return Err(Error::Range("crop larger than the frame".into()));
    }
    let max_jitter = (cfg.max_jitter_frames.clamp(0.0, 1.0) * clip.audio.sample_rate() as f64 / clip.frame_rate).floor() as i64;
    let params = AugmentParams {
        crop_y: rng.gen_range(0..=v.height - cfg.crop_height),
        crop_x: rng.gen_range(0..=v.width - cfg.crop_width),
        crop_height: cfg.crop_height,
        crop_width: cfg.crop_width,
        flip: rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)),
        jitter_samples: if max_jitter > 0 { rng.gen_range(-max_jitter..=max_jitter) } else { 0 },
    };
    augment_with(clip, &params)
}

fn transform_box(b: &BBox, p: &AugmentParams) -> BBox {
    let (w, h) = (p.crop_width as f64, p.crop_height as f64);
    let mut nb = BBox { x0: b.x0 - p.crop_x as f64, y0: b.y0 - p.crop_y as f64, x1: b.x1 - p.crop_x as f64, y1: b.y1 - p.crop_y as f64 }.clamp(w, h);
    if p.flip {
        nb = BBox { x0: w - nb.x1, y0: nb.y0, x1: w - nb.x0, y1: nb.y1 };
    }
    nb
}

/// Applies one concrete augmentation to video, audio and ground-truth boxes.
pub fn augment_with(clip: &AVClip, p: &AugmentParams) -> Result<AVClip> {
    let v = &clip.video;
    if p.crop_y + p.crop_height > v.height || p.crop_x + p.crop_width > v.width {
        return Err(Error::Range("crop window leaves the frame".into()));
    }
    let mut out = Video::new(v.frames, p.crop_height, p.crop_width, 0.0);
    for t in 0..v.frames {
        for y in 0..p.crop_height {
            for x in 0..p.crop_width {
                let sx = if p.flip { p.crop_width - 1 - x } else { x };
                let src = v.pixel(t, p.crop_y + y, p.crop_x + sx);
                let i = out.idx(t, y, x, 0);
                out.data[i..i + 3].copy_from_slice(&src);
            }
        }
    }
    let audio = jitter(&clip.audio, p.jitter_samples)?;
    let mut c = clip.clone();
    c.video = out;
    c.audio = audio;
    c.source_track = clip.source_track.iter().map(|b| transform_box(b, p)).collect();
    c.distractor_boxes = clip.distractor_boxes.iter().map(|bs| bs.iter().map(|b| transform_box(b, p)).collect()).collect();
    for s in c.sources.iter_mut() {
        s.boxes = s.boxes.iter().map(|b| transform_box(b, p)).collect();
        s.audio = jitter(&s.audio, p.jitter_samples)?;
    }
    Ok(c)
}

/// Delays (positive) or advances audio by whole samples, zero-filling the gap.
fn jitter(w: &Waveform, samples: i64) -> Result<Waveform> {
    if samples == 0 {
        return Ok(w.clone());
    }
    let n = w.len() as i64;
    let channels = w
        .channels()
        .iter()
        .map(|c| (0..n).map(|i| {
            let j = i - samples;
            if j >= 0 && j < n { c[j as usize] } else { 0.0 }
        }).collect())
        .collect();
    Waveform::new(channels, w.sample_rate())
}

/// Derives the seed for item `index` of a dataset seeded with `seed`.
pub fn item_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED69);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frame storage for clips written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameFormat {
    /// One `video.avt` tensor `[T, H, W, 3]`.
    Tensor,
    /// `frame_0000.png`, ...
    Png,
}

/// Writes `dir/{video.avt | frame_*.png, audio.wav, meta.txt}`.
///
/// `meta.txt` is `key = value` lines: geometry, `onsets` and `pulse_frames` as
/// comma lists, one `box.<frame> = x0 y0 x1 y1` line per frame of the source
/// track, and one `source.<k> = palette fundamental onset,frames` line per source.
pub fn save_clip(dir: &Path, clip: &AVClip, frames: FrameFormat) -> Result<()> {
    fs::create_dir_all(dir)?;
    match frames {
        FrameFormat::Tensor => io::save_tensor(&dir.join("video.avt"), &clip.video.to_tensor())?,
        FrameFormat::Png => {
            let v = &clip.video;
            for t in 0..v.frames {
                let mut img = image::RgbImage::new(v.width as u32, v.height as u32);
                for y in 0..v.height {
                    for x in 0..v.width {
                        let px = v.pixel(t, y, x);
                        img.put_pixel(x as u32, y as u32, image::Rgb(px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)));
                    }
                }
                img.save(dir.join(format!("frame_{:04}.png", t)))?;
            }
        }
    }
    signal::write_wav(&dir.join("audio.wav"), &clip.audio, WavEncoding::Float32)?;
    let mut meta = String::new();
    let list = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
    writeln!(meta, "seed = {}", clip.seed).unwrap();
    writeln!(meta, "frame_rate = {}", clip.frame_rate).unwrap();
    writeln!(meta, "frames = {}", clip.video.frames).unwrap();
    writeln!(meta, "height = {}", clip.video.height).unwrap();
    writeln!(meta, "width = {}", clip.video.width).unwrap();
    writeln!(meta, "sample_rate = {}", clip.audio.sample_rate()).unwrap();
    writeln!(meta, "onsets = {}", list(&mut clip.onset_times.iter().map(|t| format!("{}", t)))).unwrap();
    writeln!(meta, "pulse_frames = {}", list(&mut clip.pulse_frames.iter().map(|f| f.to_string()))).unwrap();
    for (k, s) in clip.sources.iter().enumerate() {
        writeln!(meta, "source.{} = {} {} {}", k, s.palette, s.fundamental, list(&mut s.onset_frames.iter().map(|f| f.to_string()))).unwrap();
        for (t, b) in s.boxes.iter().enumerate() {
            writeln!(meta, "source.{}.box.{} = {} {} {} {}", k, t, b.x0, b.y0, b.x1, b.y1).unwrap();
        }
    }
    for (t, b) in clip.source_track.iter().enumerate() {
        writeln!(meta, "box.{} = {} {} {} {}", t, b.x0, b.y0, b.x1, b.y1).unwrap();
    }
    io::write_atomic(&dir.join("meta.txt"), meta.as_bytes())
}

/// Key-value metadata from a clip directory.
pub fn read_meta(path: &Path) -> Result<std::collections::BTreeMap<String, String>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut out = std::collections::BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {} is not key = value", i + 1),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Reads a clip written by [`save_clip`]. Per-source audio is not stored, so
/// each source's soundtrack is left as the full mixture.
pub fn load_clip(dir: &Path) -> Result<AVClip> {
    let meta = read_meta(&dir.join("meta.txt"))?;
    let fmt_err = |reason: String| Error::Format { path: dir.join("meta.txt"), reason };
    let get = |k: &str| meta.get(k).cloned().ok_or_else(|| fmt_err(format!("missing key {}", k)));
    let num = |k: &str| -> Result<f64> { get(k)?.parse::<f64>().map_err(|_| fmt_err(format!("bad number for {}", k))) };
    let parse_box = |s: &str| -> Result<BBox> {
        let v: Vec<f64> = s.split_whitespace().map(|x| x.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| fmt_err(format!("bad box {}", s)))?;
        if v.len() != 4 {
            return Err(fmt_err(format!("bad box {}", s)));
        }
        Ok(BBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] })
    };
    let frames = num("frames")? as usize;
    let video = if dir.join("video.avt").exists() {
        Video::from_tensor(&io::load_tensor::<f32>(&dir.join("video.avt"))?)?
    } else {
        let (h, w) = (num("height")? as usize, num("width")? as usize);
        let mut v = Video::new(frames, h, w, 0.0);
        for t in 0..frames {
            let p = dir.join(format!("frame_{:04}.png", t));
            if !p.exists() {
                return Err(Error::Missing(p));
            }
            let img = image::open(&p)?.to_rgb8();
            for (x, y, px) in img.enumerate_pixels() {
                let i = v.idx(t, y as usize, x as usize, 0);
                for c in 0..3 {
                    v.data[i + c] = px.0[c] as f32 / 255.0;
                }
            }
        }
        v
    };
    let audio = signal::read_wav(&dir.join("audio.wav"))?;
    let csv = |s: String| -> Result<Vec<f64>> {
        s.split(',').filter(|x| !x.trim().is_empty()).map(|x| x.trim().parse::<f64>().map_err(|_| fmt_err(format!("bad list item {}", x)))).collect()
    };
    let onset_times = csv(get("onsets")?)?;
    let pulse_frames = csv(get("pulse_frames")?)?.into_iter().map(|f| f as usize).collect();
    let source_track = (0..frames).filter_map(|t| meta.get(&format!("box.{}", t))).map(|s| parse_box(s)).collect::<Result<Vec<_>>>()?;
    let mut sources = Vec::new();
    let mut k = 0;
    while let Some(line) = meta.get(&format!("source.{}", k)) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 2 {
            return Err(fmt_err(format!("bad source line {}", line)));
        }
        let boxes = (0..frames)
            .map(|t| meta.get(&format!("source.{}.box.{}", k, t)).ok_or_else(|| fmt_err("missing source box".into())).and_then(|s| parse_box(s)))
            .collect::<Result<Vec<_>>>()?;
        sources.push(SourceInfo {
            palette: parts[0].parse().map_err(|_| fmt_err("bad palette".into()))?,
            fundamental: parts[1].parse().map_err(|_| fmt_err("bad fundamental".into()))?,
            onset_frames: parts.get(2).map(|s| csv(s.to_string())).transpose()?.unwrap_or_default().into_iter().map(|f| f as usize).collect(),
            boxes,
            audio: audio.clone(),
        });
        k += 1;
    }
    Ok(AVClip {
        video,
        frame_rate: num("frame_rate")?,
        audio,
        onset_times,
        pulse_frames,
        source_track,
        sources,
        distractor_boxes: vec![],
        seed: num("seed")? as u64,
    })
}

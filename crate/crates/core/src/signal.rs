//! Waveforms and short-time Fourier analysis.
//!
//! Spectrograms use a periodic Hann window. Inversion is weighted overlap-add
//! normalized by the steady-state sum of squared windows, so every sample that
//! is covered by a full set of frames is reconstructed exactly.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Multichannel audio with a sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() || channels.len() > 2 {
            return Err(Error::Shape(format!("waveforms have 1 or 2 channels, got {}", channels.len())));
        }
        let n = channels[0].len();
        if n == 0 {
            return Err(Error::Length("waveform has no samples".into()));
        }
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("channels differ in length".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Range("sample rate must be positive".into()));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { channels, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn silence(n: usize, sample_rate: u32) -> Result<Self> {
        Self::mono(vec![0.0; n], sample_rate)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// First channel of a mono waveform.
    pub fn samples(&self) -> &[f64] {
        &self.channels[0]
    }

    pub fn is_silent(&self) -> bool {
        self.channels.iter().flatten().all(|&v| v == 0.0)
    }

    /// Copies `[start, start + len)` from every channel.
    pub fn slice(&self, start: usize, len: usize) -> Result<Waveform> {
        if start + len > self.len() {
            return Err(Error::Length(format!(
                "slice [{}, {}) of a {}-sample waveform",
                start,
                start + len,
                self.len()
            )));
        }
        Waveform::new(
            self.channels.iter().map(|c| c[start..start + len].to_vec()).collect(),
            self.sample_rate,
        )
    }

    /// Sample-wise sum; rates, lengths and channel counts must agree.
    pub fn add(&self, other: &Waveform) -> Result<Waveform> {
        if self.sample_rate != other.sample_rate
            || self.len() != other.len()
            || self.num_channels() != other.num_channels()
        {
            return Err(Error::Incompatible(format!(
                "cannot add {}ch/{}Hz/{} to {}ch/{}Hz/{}",
                self.num_channels(),
                self.sample_rate,
                self.len(),
                other.num_channels(),
                other.sample_rate,
                other.len()
            )));
        }
        let channels = self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Waveform::new(channels, self.sample_rate)
    }

    pub fn scaled(&self, s: f64) -> Waveform {
        Waveform {
            channels: self.channels.iter().map(|c| c.iter().map(|v| v * s).collect()).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn mean_square(&self) -> f64 {
        let n = (self.len() * self.num_channels()) as f64;
        self.channels.iter().flatten().map(|v| v * v).sum::<f64>() / n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn build(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
            WindowKind::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl StftConfig {
    /// Hann window with the smallest power-of-two FFT that holds one frame.
    pub fn new(frame_ms: f64, hop_ms: f64, sample_rate: u32) -> Self {
        let win = ms_to_samples(frame_ms, sample_rate);
        StftConfig { frame_ms, hop_ms, fft_size: win.max(1).next_power_of_two(), window: WindowKind::Hann }
    }

    pub fn win_samples(&self, sample_rate: u32) -> usize {
        ms_to_samples(self.frame_ms, sample_rate)
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        ms_to_samples(self.hop_ms, sample_rate)
    }

    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames for `n` samples: `floor((n − win) / hop) + 1`.
    pub fn num_frames(&self, n: usize, sample_rate: u32) -> usize {
        let (win, hop) = (self.win_samples(sample_rate), self.hop_samples(sample_rate));
        if n < win {
            0
        } else {
            (n - win) / hop + 1
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let (win, hop) = (self.win_samples(sample_rate), self.hop_samples(sample_rate));
        if win == 0 || hop == 0 {
            return Err(Error::Config(format!(
                "frame {} ms / hop {} ms round to zero samples at {} Hz",
                self.frame_ms, self.hop_ms, sample_rate
            )));
        }
        if self.hop_ms > self.frame_ms {
            return Err(Error::Config("hop longer than frame".into()));
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < win {
            return Err(Error::Config(format!(
                "fft size {} must be a power of two >= {} window samples",
                self.fft_size, win
            )));
        }
        Ok(())
    }

    /// Steady-state overlap-add sum of squared windows, one value per phase within a hop.
    pub fn overlap_envelope(&self, sample_rate: u32) -> Vec<f64> {
        let (win, hop) = (self.win_samples(sample_rate), self.hop_samples(sample_rate));
        let w = self.window.build(win);
        let mut env = vec![0.0; hop];
        for (i, v) in w.iter().enumerate() {
            env[i % hop] += v * v;
        }
        env
    }

    /// Whether windowed overlap-add can invert this configuration.
    pub fn check_overlap_add(&self, sample_rate: u32) -> Result<()> {
        self.validate(sample_rate)?;
        let env = self.overlap_envelope(sample_rate);
        let max = env.iter().cloned().fold(0.0, f64::max);
        let min = env.iter().cloned().fold(f64::INFINITY, f64::min);
        if max <= 0.0 || min < 1e-3 * max {
            return Err(Error::Config(format!(
                "{:?} window with frame {} ms and hop {} ms does not satisfy the overlap-add condition",
                self.window, self.frame_ms, self.hop_ms
            )));
        }
        Ok(())
    }
}

fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

/// Magnitude/phase spectrogram, `[frames × bins]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn from_parts(
        magnitude: Vec<f64>,
        phase: Vec<f64>,
        frames: usize,
        bins: usize,
        config: StftConfig,
        sample_rate: u32,
    ) -> Result<Self> {
        if magnitude.len() != frames * bins || phase.len() != frames * bins || bins != config.freq_bins() {
            return Err(Error::Shape(format!(
                "spectrogram {}x{} with {} magnitudes / {} phases, config expects {} bins",
                frames,
                bins,
                magnitude.len(),
                phase.len(),
                config.freq_bins()
            )));
        }
        if magnitude.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::Degenerate("magnitudes must be finite and nonnegative".into()));
        }
        let phase = phase.into_iter().map(wrap_phase).collect();
        Ok(Spectrogram { magnitude, phase, frames, bins, config, sample_rate })
    }

    pub fn zeros(frames: usize, config: StftConfig, sample_rate: u32) -> Self {
        let bins = config.freq_bins();
        Spectrogram {
            magnitude: vec![0.0; frames * bins],
            phase: vec![0.0; frames * bins],
            frames,
            bins,
            config,
            sample_rate,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn complex(&self, t: usize, f: usize) -> Complex<f64> {
        let i = t * self.bins + f;
        Complex::from_polar(self.magnitude[i], self.phase[i])
    }

    /// Per-frame energy with one-sided spectrum weighting; equals
    /// `fft_size · Σ (windowed frame)²` by Parseval.
    pub fn frame_energy(&self, t: usize) -> f64 {
        let n = self.config.fft_size;
        let row = &self.magnitude[t * self.bins..(t + 1) * self.bins];
        row.iter()
            .enumerate()
            .map(|(k, m)| if k == 0 || k == n / 2 { m * m } else { 2.0 * m * m })
            .sum()
    }

    /// Same magnitudes, phases taken from `other`.
    pub fn with_phase_of(&self, other: &Spectrogram) -> Result<Spectrogram> {
        if self.shape() != other.shape() {
            return Err(Error::Shape("phase source has a different shape".into()));
        }
        let mut s = self.clone();
        s.phase = other.phase.clone();
        Ok(s)
    }
}

/// Maps any angle to `(−π, π]`.
pub fn wrap_phase(p: f64) -> f64 {
    let mut w = p.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Elementwise `ln(magnitude + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSpectrogram {
    pub values: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub eps: f64,
}

impl LogSpectrogram {
    /// Inverse of [`log_magnitude`], clamped at zero.
    pub fn to_magnitude(&self) -> Vec<f64> {
        self.values.iter().map(|v| (v.exp() - self.eps).max(0.0)).collect()
    }
}

/// Default floor for log spectrograms, relative to full scale.
pub const LOG_EPS: f64 = 1e-5;

pub fn log_magnitude(s: &Spectrogram, eps: f64) -> Result<LogSpectrogram> {
    if !(eps > 0.0) {
        return Err(Error::Range(format!("log floor must be positive, got {}", eps)));
    }
    Ok(LogSpectrogram {
        values: s.magnitude.iter().map(|m| (m + eps).ln()).collect(),
        frames: s.frames,
        bins: s.bins,
        eps,
    })
}

fn planner_pair(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
}

/// Short-time Fourier transform of a mono waveform.
pub fn stft(w: &Waveform, c: &StftConfig) -> Result<Spectrogram> {
    if w.num_channels() != 1 {
        return Err(Error::Shape("stft expects mono audio; downmix first".into()));
    }
    let sr = w.sample_rate();
    c.validate(sr)?;
    let (win, hop) = (c.win_samples(sr), c.hop_samples(sr));
    if w.len() < win {
        return Err(Error::Length(format!(
            "{} samples is shorter than one {}-sample window",
            w.len(),
            win
        )));
    }
    let frames = c.num_frames(w.len(), sr);
    let bins = c.freq_bins();
    let window = c.window.build(win);
    let (fwd, _) = planner_pair(c.fft_size);
    let x = w.samples();
    let mut magnitude = Vec::with_capacity(frames * bins);
    let mut phase = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); c.fft_size];
    for t in 0..frames {
        buf.iter_mut().for_each(|v| *v = Complex::new(0.0, 0.0));
        for i in 0..win {
            buf[i].re = x[t * hop + i] * window[i];
        }
        fwd.process(&mut buf);
        for v in &buf[..bins] {
            magnitude.push(v.norm());
            phase.push(if v.norm() == 0.0 { 0.0 } else { wrap_phase(v.arg()) });
        }
    }
    Ok(Spectrogram { magnitude, phase, frames, bins, config: *c, sample_rate: sr })
}

/// Inverse STFT by windowed overlap-add; output length `(frames − 1)·hop + win`.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let c = &s.config;
    let sr = s.sample_rate;
    c.check_overlap_add(sr)?;
    if s.frames == 0 {
        return Err(Error::Length("spectrogram has no frames".into()));
    }
    let (win, hop, n_fft) = (c.win_samples(sr), c.hop_samples(sr), c.fft_size);
    let window = c.window.build(win);
    let env = c.overlap_envelope(sr);
    let (_, inv) = planner_pair(n_fft);
    let len = (s.frames - 1) * hop + win;
    let mut out = vec![0.0; len];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..s.frames {
        for k in 0..s.bins {
            buf[k] = s.complex(t, k);
        }
        // Hermitian completion so the inverse is real.
        for k in s.bins..n_fft {
            buf[k] = buf[n_fft - k].conj();
        }
        buf[0].im = 0.0;
        if n_fft % 2 == 0 {
            buf[n_fft / 2].im = 0.0;
        }
        inv.process(&mut buf);
        for i in 0..win {
            out[t * hop + i] += buf[i].re / n_fft as f64 * window[i];
        }
    }
    for (i, v) in out.iter_mut().enumerate() {
        *v /= env[i % hop];
    }
    Waveform::mono(out, sr)
}

/// Samples of an `istft` output that are covered by a complete set of frames.
pub fn interior_range(config: &StftConfig, sample_rate: u32, frames: usize) -> std::ops::Range<usize> {
    let (win, hop) = (config.win_samples(sample_rate), config.hop_samples(sample_rate));
    let start = win.saturating_sub(hop);
    let end = frames * hop;
    start..end.max(start)
}

/// Scales `w` so its mean squared amplitude equals `target`.
pub fn normalize_power(w: &Waveform, target: f64) -> Result<Waveform> {
    if !(target > 0.0) {
        return Err(Error::Range("target power must be positive".into()));
    }
    let ms = w.mean_square();
    if ms == 0.0 {
        return Err(Error::Degenerate("cannot normalize an all-zero waveform".into()));
    }
    Ok(w.scaled((target / ms).sqrt()))
}

/// Channel mean.
pub fn downmix_mono(w: &Waveform) -> Waveform {
    if w.num_channels() == 1 {
        return w.clone();
    }
    let n = w.num_channels() as f64;
    let mono = (0..w.len()).map(|i| w.channels().iter().map(|c| c[i]).sum::<f64>() / n).collect();
    Waveform { channels: vec![mono], sample_rate: w.sample_rate() }
}

/// Windowed-sinc resampler settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleQuality {
    /// Filter length in input samples at unit ratio.
    pub taps: usize,
    /// Cutoff as a fraction of the lower Nyquist frequency.
    pub rolloff: f64,
}

impl Default for ResampleQuality {
    fn default() -> Self {
        ResampleQuality { taps: 64, rolloff: 0.95 }
    }
}

pub fn resample(w: &Waveform, new_rate: u32) -> Result<Waveform> {
    resample_with(w, new_rate, ResampleQuality::default())
}

/// Band-limited resampling with a Blackman-windowed sinc kernel.
pub fn resample_with(w: &Waveform, new_rate: u32, q: ResampleQuality) -> Result<Waveform> {
    if new_rate == 0 {
        return Err(Error::Range("target sample rate must be positive".into()));
    }
    let old_rate = w.sample_rate();
    if new_rate == old_rate {
        return Ok(w.clone());
    }
    let ratio = new_rate as f64 / old_rate as f64;
    let out_len = ((w.len() as f64 * ratio).round() as usize).max(1);
    // cutoff in cycles per input sample
    let cutoff = 0.5 * q.rolloff * ratio.min(1.0);
    let half = (q.taps as f64 / 2.0) / ratio.min(1.0);
    let channels = w
        .channels()
        .iter()
        .map(|x| {
            (0..out_len)
                .map(|m| {
                    let t = m as f64 / ratio;
                    let lo = (t - half).ceil().max(0.0) as usize;
                    let hi = ((t + half).floor() as usize).min(x.len() - 1);
                    let mut acc = 0.0;
                    for (n, &xv) in x.iter().enumerate().take(hi + 1).skip(lo) {
                        let d = t - n as f64;
                        let arg = 2.0 * cutoff * d;
                        let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                        let u = (d / half + 1.0) / 2.0; // 0..1 across the support
                        let win = 0.42 - 0.5 * (2.0 * PI * u).cos() + 0.08 * (4.0 * PI * u).cos();
                        acc += xv * 2.0 * cutoff * sinc * win;
                    }
                    acc
                })
                .collect()
        })
        .collect();
    Waveform::new(channels, new_rate)
}

/// Sample encoding for WAV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let nch = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>()?
        }
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported sample format {:?}/{} bits", fmt, bits),
            })
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / nch.max(1)); nch];
    for (i, v) in interleaved.into_iter().enumerate() {
        channels[i % nch].push(v);
    }
    Waveform::new(channels, spec.sample_rate)
}

pub fn write_wav(path: &Path, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let spec = hound::WavSpec {
        channels: w.num_channels() as u16,
        sample_rate: w.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for i in 0..w.len() {
        for c in w.channels() {
            match encoding {
                WavEncoding::Pcm16 => writer.write_sample((c[i].clamp(-1.0, 1.0) * 32767.0).round() as i16)?,
                WavEncoding::Float32 => writer.write_sample(c[i] as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn paper_geometry_spectrogram_shape() {
        let sr = 21_000;
        let c = StftConfig::new(64.0, 16.0, sr);
        assert_eq!(c.fft_size, 2048);
        let w = Waveform::mono(vec![0.0; (2.1 * sr as f64) as usize], sr).unwrap();
        let s = stft(&w, &c).unwrap();
        assert_eq!(s.shape(), (128, 1025));
    }

    #[test]
    fn zero_waveform_has_zero_magnitude() {
        let w = Waveform::silence(4000, 2000).unwrap();
        let s = stft(&w, &StftConfig::new(64.0, 16.0, 2000)).unwrap();
        assert!(s.magnitude.iter().all(|&m| m == 0.0));
        let back = istft(&Spectrogram::zeros(5, s.config, 2000)).unwrap();
        assert!(back.is_silent());
    }

    #[test]
    fn too_short_input_is_a_length_error() {
        let w = Waveform::mono(vec![0.1; 50], 2000).unwrap();
        assert!(matches!(stft(&w, &StftConfig::new(64.0, 16.0, 2000)), Err(Error::Length(_))));
    }

    #[test]
    fn round_trip_reconstructs_interior() {
        let sr = 16_000;
        let c = StftConfig::new(32.0, 8.0, sr);
        let x = noise(8000, 3);
        let s = stft(&Waveform::mono(x.clone(), sr).unwrap(), &c).unwrap();
        let y = istft(&s).unwrap();
        let r = interior_range(&c, sr, s.frames);
        let err: f64 = r.clone().map(|i| (y.samples()[i] - x[i]).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = r.map(|i| x[i] * x[i]).sum::<f64>().sqrt();
        assert!(err / norm < 1e-10, "relative error {}", err / norm);
    }

    #[test]
    fn single_dc_frame_inverts_to_windowed_constant() {
        let sr = 1000;
        let c = StftConfig::new(16.0, 4.0, sr);
        let mut s = Spectrogram::zeros(1, c, sr);
        s.magnitude[0] = 8.0;
        let y = istft(&s).unwrap();
        // Direct inverse DFT of a lone DC coefficient M is the constant M / N.
        let constant = 8.0 / c.fft_size as f64;
        let win = c.window.build(16);
        // Steady-state normalizer, brute force over all frame offsets.
        let hop = 4;
        for i in 0..16 {
            let mut env = 0.0;
            for k in -8i64..8 {
                let j = i as i64 - k * hop as i64;
                if (0..16).contains(&j) {
                    env += win[j as usize].powi(2);
                }
            }
            assert!((y.samples()[i] - constant * win[i] / env).abs() < 1e-12);
        }
    }

    #[test]
    fn non_overlap_add_configs_are_rejected() {
        let sr = 1000;
        let mut c = StftConfig::new(16.0, 16.0, sr);
        assert!(matches!(istft(&Spectrogram::zeros(3, c, sr)), Err(Error::Config(_))));
        c.hop_ms = 4.0;
        assert!(istft(&Spectrogram::zeros(3, c, sr)).is_ok());
    }

    #[test]
    fn log_magnitude_floor_and_inverse() {
        let c = StftConfig::new(2.0, 1.0, 1000);
        let mut s = Spectrogram::zeros(1, c, 1000);
        s.magnitude[1] = std::f64::consts::E - 1e-5;
        let l = log_magnitude(&s, 1e-5).unwrap();
        assert!((l.values[0] - (1e-5f64).ln()).abs() < 1e-12);
        assert!((l.values[0] + 11.512925).abs() < 1e-6);
        assert!((l.values[1] - 1.0).abs() < 1e-12);
        assert!(log_magnitude(&s, 0.0).is_err());
        let back = l.to_magnitude();
        assert!((back[1] - s.magnitude[1]).abs() < 1e-12);
    }

    #[test]
    fn normalize_power_cases() {
        let w = Waveform::mono(vec![2.0; 10], 100).unwrap();
        let n = normalize_power(&w, 1.0).unwrap();
        assert!(n.samples().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let z = Waveform::silence(10, 100).unwrap();
        assert!(matches!(normalize_power(&z, 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn downmix_of_identical_channels() {
        let x = noise(100, 5);
        let w = Waveform::new(vec![x.clone(), x.clone()], 100).unwrap();
        assert_eq!(downmix_mono(&w).samples(), &x[..]);
    }

    #[test]
    fn resample_same_rate_is_identity() {
        let w = Waveform::mono(noise(300, 9), 16_000).unwrap();
        assert_eq!(resample(&w, 16_000).unwrap(), w);
    }

    #[test]
    fn resampled_sine_keeps_frequency_and_amplitude() {
        let (sr, f) = (21_000u32, 1000.0);
        let x: Vec<f64> = (0..21_000).map(|i| (2.0 * PI * f * i as f64 / sr as f64).sin()).collect();
        let y = resample(&Waveform::mono(x, sr).unwrap(), 16_000).unwrap();
        assert_eq!(y.len(), 16_000);
        // Least-squares fit of a·sin + b·cos at 1 kHz over the interior.
        let (mut ss, mut cc, mut sc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 500..15_500 {
            let t = 2.0 * PI * f * i as f64 / 16_000.0;
            let (s, c) = (t.sin(), t.cos());
            let v = y.samples()[i];
            ss += s * s;
            cc += c * c;
            sc += s * c;
            ys += v * s;
            yc += v * c;
        }
        let det = ss * cc - sc * sc;
        let a = (ys * cc - yc * sc) / det;
        let b = (yc * ss - ys * sc) / det;
        let amp = (a * a + b * b).sqrt();
        assert!((amp - 1.0).abs() < 0.01, "amplitude {}", amp);
        let resid: f64 = (500..15_500)
            .map(|i| {
                let t = 2.0 * PI * f * i as f64 / 16_000.0;
                (y.samples()[i] - a * t.sin() - b * t.cos()).powi(2)
            })
            .sum::<f64>()
            / 15_000.0;
        assert!(resid < 1e-4, "residual power {}", resid);
    }

    #[test]
    fn wav_round_trip_float_and_pcm() {
        let dir = tempfile::tempdir().unwrap();
        let w = Waveform::new(vec![noise(64, 1), noise(64, 2)], 8000).unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &w, WavEncoding::Float32).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.num_channels(), 2);
        assert!(r.samples().iter().zip(w.samples()).all(|(a, b)| (a - b).abs() < 1e-6));
        write_wav(&p, &w, WavEncoding::Pcm16).unwrap();
        let r = read_wav(&p).unwrap();
        assert!(r.samples().iter().zip(w.samples()).all(|(a, b)| (a - b).abs() < 1e-4));
        assert!(matches!(read_wav(&dir.path().join("none.wav")), Err(Error::Missing(_))));
    }

    #[test]
    fn random_phases_wrap_into_principal_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = wrap_phase(rng.gen_range(-50.0..50.0));
            assert!(p > -PI && p <= PI);
        }
        assert_eq!(wrap_phase(-PI), PI);
    }
}

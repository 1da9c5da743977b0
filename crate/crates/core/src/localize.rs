//! Class activation maps over the fused feature grid: per-cell alignment
//! scores, patch ranking and heatmap overlays.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, AVClip, BBox, Video};
use crate::error::{Error, Result};
use crate::fusenet::FusionModel;
use crate::io;
use crate::signal::Waveform;
use crate::tensor::{Real, Tensor};

/// Per-cell scores `wᵀf` over the last convolutional feature map (bias excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    /// `[t, h, w]` row-major.
    pub scores: Vec<f64>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Geometry of the input the cells cover.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub bias: f64,
    pub logit: f64,
}

impl CamMap {
    pub fn at(&self, t: usize, h: usize, w: usize) -> f64 {
        self.scores[(t * self.h + h) * self.w + w]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.abs()).collect()
    }

    /// Mean score plus bias; equals the model logit.
    pub fn pooled_logit(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64 + self.bias
    }

    /// Time cell covering input frame `frame`.
    pub fn cell_of_frame(&self, frame: usize) -> usize {
        (frame * self.t / self.frames).min(self.t - 1)
    }

    /// Pixel coordinates `(x, y)` of the centre of cell `(h, w)`.
    pub fn cell_center(&self, h: usize, w: usize) -> (f64, f64) {
        ((w as f64 + 0.5) * self.width as f64 / self.w as f64, (h as f64 + 0.5) * self.height as f64 / self.h as f64)
    }

    /// `(h, w)` of the largest `|score|` in time cell `t`; the first one wins ties.
    pub fn argmax_cell(&self, t: usize) -> (usize, usize) {
        let plane = &self.scores[t * self.h * self.w..(t + 1) * self.h * self.w];
        let mut best = 0;
        for (i, v) in plane.iter().enumerate() {
            if v.abs() > plane[best].abs() {
                best = i;
            }
        }
        (best / self.w, best % self.w)
    }

    /// Fraction of cell centres inside `b`: the hit rate of a uniformly random cell.
    pub fn area_baseline(&self, b: &BBox) -> f64 {
        let mut inside = 0;
        for h in 0..self.h {
            for w in 0..self.w {
                let (x, y) = self.cell_center(h, w);
                inside += b.contains(x, y) as usize;
            }
        }
        inside as f64 / (self.h * self.w) as f64
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[self.t, self.h, self.w], self.scores.clone()).expect("cam shape")
    }
}

/// Scores `video` with `audio` (taken to be its aligned soundtrack).
pub fn cam<T: Real>(model: &FusionModel<T>, video: &Video, audio: &Waveform) -> Result<CamMap> {
    let cfg = &model.config;
    let v = data::video_batch::<T>(&[video])?;
    let a = data::audio_batch::<T>(&[audio], cfg.audio_in_channels)?;
    let out = model.forward(&v, &a)?;
    let f = &out.features;
    let s = f.shape();
    let (c, t, h, w) = (s[1], s[2], s[3], s[4]);
    let head = model.params.get("head.w")?;
    if head.shape() != [1, c] {
        return Err(Error::Shape(format!("head {:?} does not match {} channels", head.shape(), c)));
    }
    let cells = t * h * w;
    let mut scores = vec![0.0; cells];
    for (ci, wc) in head.data().iter().enumerate() {
        let wc = wc.as_f64();
        for (s, v) in scores.iter_mut().zip(&f.data()[ci * cells..(ci + 1) * cells]) {
            *s += wc * v.as_f64();
        }
    }
    Ok(CamMap {
        scores,
        t,
        h,
        w,
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        bias: model.params.get("head.b")?.data()[0].as_f64(),
        logit: out.logits[0].as_f64(),
    })
}

/// Per-frame hit statistics of the CAM argmax against the sounding sprite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub clips: usize,
    pub frames: usize,
    pub hits: usize,
    pub hit_rate: f64,
    /// Expected hit rate of a uniformly random cell.
    pub baseline: f64,
    /// Largest `|mean score + bias − logit|` seen.
    pub max_pooling_gap: f64,
}

/// Counts frames whose argmax cell centre lies in that frame's source box.
pub fn localization_accuracy<T: Real>(model: &FusionModel<T>, clips: &[AVClip]) -> Result<LocalizationReport> {
    if clips.is_empty() {
        return Err(Error::Degenerate("no clips to score".into()));
    }
    let (mut frames, mut hits, mut base, mut gap) = (0, 0, 0.0, 0.0f64);
    for clip in clips {
        let m = cam(model, &clip.video, &clip.audio)?;
        gap = gap.max((m.pooled_logit() - m.logit).abs());
        for (f, b) in clip.source_track.iter().enumerate() {
            let (h, w) = m.argmax_cell(m.cell_of_frame(f));
            let (x, y) = m.cell_center(h, w);
            hits += b.contains(x, y) as usize;
            base += m.area_baseline(b);
            frames += 1;
        }
    }
    Ok(LocalizationReport {
        clips: clips.len(),
        frames,
        hits,
        hit_rate: hits as f64 / frames as f64,
        baseline: base / frames as f64,
        max_pooling_gap: gap,
    })
}

/// One space-time cell of one clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub clip: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub score: f64,
}

/// Most and least informative cells across `maps` by `|score|`.
///
/// Ties keep `(clip, t, h, w)` order. Returns `(top, bottom)`, each at most `k` long;
/// `bottom` lists the smallest magnitude first.
pub fn rank_cells(maps: &[CamMap], k: usize) -> (Vec<Patch>, Vec<Patch>) {
    let mut all = Vec::new();
    for (clip, m) in maps.iter().enumerate() {
        for t in 0..m.t {
            for h in 0..m.h {
                for w in 0..m.w {
                    all.push(Patch { clip, t, h, w, score: m.at(t, h, w) });
                }
            }
        }
    }
    let mut top = all.clone();
    top.sort_by(|a, b| b.score.abs().total_cmp(&a.score.abs()));
    top.truncate(k);
    all.sort_by(|a, b| a.score.abs().total_cmp(&b.score.abs()));
    all.truncate(k);
    (top, all)
}

/// CAMs of every clip, then [`rank_cells`].
pub fn rank_patches<T: Real>(model: &FusionModel<T>, clips: &[AVClip], k: usize) -> Result<(Vec<Patch>, Vec<Patch>)> {
    if clips.is_empty() {
        return Err(Error::Degenerate("no clips to rank".into()));
    }
    let maps = clips.iter().map(|c| cam(model, &c.video, &c.audio)).collect::<Result<Vec<_>>>()?;
    Ok(rank_cells(&maps, k))
}

/// Fraction of `patches` whose cell centre lies inside the source box of the
/// frames it covers (any of them).
pub fn patch_hit_rate(patches: &[Patch], maps: &[CamMap], clips: &[AVClip]) -> f64 {
    if patches.is_empty() {
        return 0.0;
    }
    let hits = patches
        .iter()
        .filter(|p| {
            let m = &maps[p.clip];
            let (x, y) = m.cell_center(p.h, p.w);
            clips[p.clip].source_track.iter().enumerate().any(|(f, b)| m.cell_of_frame(f) == p.t && b.contains(x, y))
        })
        .count();
    hits as f64 / patches.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatmapMode {
    /// Each frame's magnitudes stretched to [0, 1].
    PerImage,
    /// Magnitudes divided by a fixed maximum and clipped.
    Fixed { max: f64 },
}

/// `|score|` bilinearly upsampled to `[height, width]` for input frame `frame`.
///
/// Pixel centres map to grid coordinates `(p + 0.5)·cells/pixels − 0.5`, clamped.
pub fn upsample_magnitude(cam: &CamMap, frame: usize) -> Vec<f64> {
    let t = cam.cell_of_frame(frame);
    let coord = |p: usize, pixels: usize, cells: usize| {
        let u = ((p as f64 + 0.5) * cells as f64 / pixels as f64 - 0.5).clamp(0.0, (cells - 1) as f64);
        let i = (u.floor() as usize).min(cells - 1);
        (i, (i + 1).min(cells - 1), u - i as f64)
    };
    let mut out = Vec::with_capacity(cam.height * cam.width);
    for y in 0..cam.height {
        let (h0, h1, fy) = coord(y, cam.height, cam.h);
        for x in 0..cam.width {
            let (w0, w1, fx) = coord(x, cam.width, cam.w);
            let v = |h, w| cam.at(t, h, w).abs();
            let top = v(h0, w0) * (1.0 - fx) + v(h0, w1) * fx;
            let bot = v(h1, w0) * (1.0 - fx) + v(h1, w1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Heat intensity in [0, 1] per pixel of one frame.
pub fn heat_intensity(cam: &CamMap, frame: usize, mode: HeatmapMode) -> Vec<f64> {
    let up = upsample_magnitude(cam, frame);
    match mode {
        HeatmapMode::PerImage => {
            let lo = up.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            up.iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect()
        }
        HeatmapMode::Fixed { max } => up.iter().map(|v| if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 }).collect(),
    }
}

/// Black → red → yellow → white.
pub fn hot_colormap(i: f64) -> [f64; 3] {
    let i = i.clamp(0.0, 1.0);
    [(3.0 * i).min(1.0), (3.0 * i - 1.0).clamp(0.0, 1.0), (3.0 * i - 2.0).clamp(0.0, 1.0)]
}

/// Frames alpha-blended with the colour-mapped heat: `(1 − α)·pixel + α·colour`.
pub fn render_heatmap(video: &Video, cam: &CamMap, mode: HeatmapMode, alpha: f64) -> Result<Vec<image::RgbImage>> {
    if video.height != cam.height || video.width != cam.width {
        return Err(Error::Shape(format!(
            "video {}x{} does not match CAM input {}x{}",
            video.height, video.width, cam.height, cam.width
        )));
    }
    let mut out = Vec::with_capacity(video.frames);
    for f in 0..video.frames {
        let heat = heat_intensity(cam, f, mode);
        let mut img = image::RgbImage::new(video.width as u32, video.height as u32);
        for y in 0..video.height {
            for x in 0..video.width {
                let px = video.pixel(f, y, x);
                let col = hot_colormap(heat[y * video.width + x]);
                let rgb = [0, 1, 2].map(|c| {
                    let v = (1.0 - alpha) * px[c] as f64 + alpha * col[c];
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
            }
        }
        out.push(img);
    }
    Ok(out)
}

/// Writes `overlay_NNNN.png` per frame and the raw scores as `cam.avt`.
pub fn write_heatmaps(dir: &Path, video: &Video, cam: &CamMap, mode: HeatmapMode, alpha: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (f, img) in render_heatmap(video, cam, mode, alpha)?.iter().enumerate() {
        io::save_png(&dir.join(format!("overlay_{:04}.png", f)), img)?;
    }
    io::save_tensor(&dir.join("cam.avt"), &cam.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_scene, SceneParams};
    use crate::fusenet::FusionConfig;

    fn map(t: usize, h: usize, w: usize, scores: Vec<f64>) -> CamMap {
        CamMap { scores, t, h, w, frames: 8, height: 32, width: 32, bias: 0.0, logit: 0.0 }
    }

    fn toy() -> (FusionModel<f64>, AVClip) {
        let model = FusionModel::<f64>::build(&FusionConfig::toy(), 3).unwrap();
        let clip = make_synthetic_scene(&SceneParams::toy(), 11).unwrap();
        (model, clip)
    }

    #[test]
    fn pooling_identity_and_repeatability() {
        let (model, clip) = toy();
        let a = cam(&model, &clip.video, &clip.audio).unwrap();
        assert_eq!((a.t, a.h, a.w), (1, 8, 8));
        assert!((a.pooled_logit() - a.logit).abs() < 1e-9);
        let b = cam(&model, &clip.video, &clip.audio).unwrap();
        assert_eq!(a.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        // f32 model too
        let m32 = FusionModel::<f32>::build(&FusionConfig::toy(), 3).unwrap();
        let c = cam(&m32, &clip.video, &clip.audio).unwrap();
        assert!((c.pooled_logit() - c.logit).abs() < 1e-5);
    }

    #[test]
    fn zero_head_gives_zero_scores() {
        let (mut model, clip) = toy();
        model.params.get_mut("head.w").unwrap().scale_inplace(0.0);
        let m = cam(&model, &clip.video, &clip.audio).unwrap();
        assert!(m.scores.iter().all(|&s| s == 0.0));
        assert_eq!(m.logit, m.bias);
    }

    #[test]
    fn positive_head_scaling_keeps_ranking() {
        let (mut model, clip) = toy();
        let a = cam(&model, &clip.video, &clip.audio).unwrap();
        model.params.get_mut("head.w").unwrap().scale_inplace(3.5);
        let b = cam(&model, &clip.video, &clip.audio).unwrap();
        let (ta, _) = rank_cells(&[a], 64);
        let (tb, _) = rank_cells(&[b], 64);
        let key = |p: &Patch| (p.t, p.h, p.w);
        assert_eq!(ta.iter().map(key).collect::<Vec<_>>(), tb.iter().map(key).collect::<Vec<_>>());
    }

    #[test]
    fn ranking_edge_cases() {
        let mut s = vec![0.0; 16];
        s[9] = -2.0;
        let (top, bottom) = rank_cells(&[map(1, 4, 4, s)], 100);
        assert_eq!(top.len(), 16);
        assert_eq!((top[0].h, top[0].w), (2, 1));
        assert!(top.windows(2).all(|w| w[0].score.abs() >= w[1].score.abs()));
        // stable order among the zeros
        assert_eq!((bottom[0].h, bottom[0].w), (0, 0));
        assert_eq!((bottom[1].h, bottom[1].w), (0, 1));
        let (top, _) = rank_cells(&[map(1, 2, 2, vec![1.0; 4]), map(1, 2, 2, vec![1.0; 4])], 3);
        assert_eq!(top.iter().map(|p| (p.clip, p.h, p.w)).collect::<Vec<_>>(), vec![(0, 0, 0), (0, 0, 1), (0, 1, 0)]);
    }

    #[test]
    fn geometry_and_baseline() {
        let m = map(2, 8, 8, vec![0.0; 128]);
        assert_eq!(m.cell_of_frame(0), 0);
        assert_eq!(m.cell_of_frame(3), 0);
        assert_eq!(m.cell_of_frame(4), 1);
        assert_eq!(m.cell_center(0, 0), (2.0, 2.0));
        // a 10-pixel box starting at 0 covers centres 2, 6 in each axis
        let b = BBox { x0: 0.0, y0: 0.0, x1: 10.0, y1: 10.0 };
        assert!((m.area_baseline(&b) - 4.0 / 64.0).abs() < 1e-15);
        let whole = BBox { x0: 0.0, y0: 0.0, x1: 32.0, y1: 32.0 };
        assert_eq!(m.area_baseline(&whole), 1.0);
    }

    #[test]
    fn heatmap_modes() {
        let m = map(1, 4, 4, vec![0.7; 16]);
        assert!(heat_intensity(&m, 0, HeatmapMode::PerImage).iter().all(|&v| v == 0.0));
        let mut s: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        s[5] = -0.9;
        let m = map(1, 4, 4, s);
        let fixed = heat_intensity(&m, 0, HeatmapMode::Fixed { max: 3.0 });
        let up = upsample_magnitude(&m, 0);
        for (h, u) in fixed.iter().zip(&up) {
            assert!((h - u / 3.0).abs() < 1e-15);
        }
        let img = render_heatmap(&Video::new(8, 32, 32, 0.5), &map(1, 4, 4, vec![1.0; 16]), HeatmapMode::PerImage, 0.5).unwrap();
        assert_eq!(img.len(), 8);
        let first = *img[0].get_pixel(0, 0);
        assert!(img[3].pixels().all(|p| *p == first));
    }

    #[test]
    fn upsampled_argmax_stays_near_grid_argmax() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut s: Vec<f64> = (0..64).map(|_| rng.gen_range(-0.5..0.5)).collect();
            s[rng.gen_range(0..64)] = if rng.gen() { 1.0 } else { -1.0 };
            let m = map(1, 8, 8, s);
            let (gh, gw) = m.argmax_cell(0);
            let up = upsample_magnitude(&m, 0);
            let best = (0..up.len()).max_by(|&a, &b| up[a].total_cmp(&up[b])).unwrap();
            let (py, px) = (best / 32, best % 32);
            let (ch, cw) = (py / 4, px / 4);
            assert!(ch.abs_diff(gh) <= 1 && cw.abs_diff(gw) <= 1, "grid ({},{}) vs pixel cell ({},{})", gh, gw, ch, cw);
        }
    }

    #[test]
    fn heatmaps_are_written() {
        let (model, clip) = toy();
        let m = cam(&model, &clip.video, &clip.audio).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_heatmaps(dir.path(), &clip.video, &m, HeatmapMode::PerImage, 0.5).unwrap();
        assert!(dir.path().join("overlay_0007.png").exists());
        let t: Tensor<f64> = io::load_tensor(&dir.path().join("cam.avt")).unwrap();
        assert_eq!(t.data(), &m.scores[..]);
    }

    #[test]
    fn report_on_untrained_model() {
        let (model, _) = toy();
        let clips: Vec<_> = (0..3).map(|s| make_synthetic_scene(&SceneParams::toy(), s).unwrap()).collect();
        let r = localization_accuracy(&model, &clips).unwrap();
        assert_eq!(r.frames, 24);
        assert!(r.baseline > 0.0 && r.baseline < 0.2);
        assert!(r.max_pooling_gap < 1e-9);
        assert!(localization_accuracy(&model, &[]).is_err());
    }
}

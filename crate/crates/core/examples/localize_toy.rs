//! Scores CAM localization of a trained alignment model on fresh scenes and
//! writes heatmap overlays for the first clip.
//!
//! cargo run --release --example localize_toy -- <checkpoint-dir> [clips] [out-dir]

use std::path::Path;

use avfusion::data::{self, SceneParams};
use avfusion::fusenet::FusionModel;
use avfusion::localize::{self, HeatmapMode};

fn main() -> avfusion::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = args.get(1).expect("usage: localize_toy <checkpoint-dir> [clips] [out-dir]");
    let n: usize = args.get(2).map(|s| s.parse().expect("clips")).unwrap_or(100);
    let model = FusionModel::<f32>::load(Path::new(ckpt))?;
    let scene = SceneParams::toy();
    let clips = (0..n)
        .map(|i| data::make_synthetic_scene(&scene, data::item_seed(0x10ca1, i as u64)))
        .collect::<avfusion::Result<Vec<_>>>()?;
    let r = localize::localization_accuracy(&model, &clips)?;
    println!("frames {}  argmax in box {:.3}  random-cell baseline {:.3}", r.frames, r.hit_rate, r.baseline);
    println!("largest |mean score + bias - logit|: {:.2e}", r.max_pooling_gap);

    let maps = clips.iter().map(|c| localize::cam(&model, &c.video, &c.audio)).collect::<avfusion::Result<Vec<_>>>()?;
    let (top, _) = localize::rank_cells(&maps, 50);
    println!("top-50 cells in box: {:.3}", localize::patch_hit_rate(&top, &maps, &clips));
    if let Some(out) = args.get(3) {
        localize::write_heatmaps(Path::new(out), &clips[0].video, &maps[0], HeatmapMode::PerImage, 0.5)?;
        println!("overlays written to {}", out);
    }
    Ok(())
}

//! Synthesizes toy scenes, writes them to disk and mixes the first two into an
//! on/off-screen pair with WAV stems.
//!
//! cargo run --release --example gen_data -- <out-dir> [clips] [seed]

use std::path::Path;

use avfusion::data::{self, FrameFormat, MixConfig, SceneParams};
use avfusion::signal::{self, StftConfig, WavEncoding};

fn main() -> avfusion::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = Path::new(args.get(1).map(String::as_str).unwrap_or("gen_data_out")).to_path_buf();
    let n: usize = args.get(2).map(|s| s.parse().expect("clips")).unwrap_or(4).max(2);
    let seed: u64 = args.get(3).map(|s| s.parse().expect("seed")).unwrap_or(0);

    let params = SceneParams::toy();
    let mut clips = Vec::new();
    for i in 0..n {
        let clip = data::make_synthetic_scene(&params, data::item_seed(seed, i as u64))?;
        let dir = out.join(format!("clip_{:05}", i));
        data::save_clip(&dir, &clip, FrameFormat::Png)?;
        println!("{}: {} frames, {} samples", dir.display(), clip.video.frames, clip.audio.len());
        clips.push(clip);
    }

    let sr = clips[0].audio.sample_rate();
    let cfg = MixConfig { stft: StftConfig::new(64.0, 16.0, sr), power: 0.01 };
    let m = data::make_mixture(&clips[0], &clips[1], &cfg)?;
    let mix_dir = out.join("mixture");
    std::fs::create_dir_all(&mix_dir)?;
    for (name, w) in [("fg.wav", &m.fg_wave), ("bg.wav", &m.bg_wave), ("mix.wav", &m.mix_wave)] {
        signal::write_wav(&mix_dir.join(name), w, WavEncoding::Float32)?;
    }
    println!("mixture of clips 0 and 1: spectrogram {:?}, stems in {}", m.mix.shape(), mix_dir.display());
    Ok(())
}

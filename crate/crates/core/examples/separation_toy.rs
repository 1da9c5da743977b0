//! Trains the on/off-screen separator on two-sprite tone mixtures, starting
//! from a pretrained alignment checkpoint when one is given, then scores it
//! against the copy-mixture baselines and runs the sprite-masking experiment.
//!
//! cargo run --release --example separation_toy -- [steps] [seed] [pretrained-dir] [out-dir]

use std::path::Path;

use avfusion::fusenet::{FusionConfig, FusionModel};
use avfusion::separate::{self, SepDataset, SepTrainConfig};

fn main() -> avfusion::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = SepTrainConfig::toy();
    if let Some(s) = args.get(1) {
        cfg.schedule.total_steps = s.parse().expect("steps");
    }
    let seed: u64 = args.get(2).map(|s| s.parse().expect("seed")).unwrap_or(0);
    let pretrained = match args.get(3).filter(|s| !s.is_empty() && *s != "-") {
        Some(dir) => Some(FusionModel::<f32>::load(Path::new(dir))?),
        None => None,
    };
    let fusion_cfg = pretrained.as_ref().map(|m| m.config.clone()).unwrap_or_else(FusionConfig::toy);

    let ds = SepDataset::synthesize(&cfg, seed)?;
    let mut model = separate::init_model(&cfg, pretrained.as_ref(), &fusion_cfg, seed)?;
    println!("parameters: {}", model.num_parameters());
    let total = cfg.schedule.total_steps;
    let report = separate::train_separation_with(&ds, &mut model, &cfg, seed, |p, _| {
        if (p.step + 1) % 100 == 0 || p.step + 1 == total {
            println!("step {:5}  loss {:.4}", p.step + 1, p.loss);
        }
    })?;
    println!("trained in {:.0}s", report.seconds);

    let ms = separate::eval_mixtures(&ds.eval, &cfg)?;
    let ev = separate::evaluate(&model, &ms, cfg.ablation)?;
    println!(
        "on/off {:.4}  copy baseline {:.4}  ratio {:.3}",
        ev.onoff,
        ev.onoff_copy_baseline,
        ev.onoff / ev.onoff_copy_baseline
    );
    println!(
        "fg SDR {:.2} dB  mixture baseline {:.2} dB  gain {:.2} dB  (bg SDR {:.2} dB)",
        ev.sdr_fg,
        ev.sdr_fg_mixture_baseline,
        ev.sdr_fg - ev.sdr_fg_mixture_baseline,
        ev.sdr_bg
    );

    let scenes = separate::two_source_scenes(&cfg.scene, 20, seed ^ 0x3a5c)?;
    let mut flips = 0;
    for clip in &scenes {
        if separate::masking_experiment(&model, clip, cfg.power)?.flips() {
            flips += 1;
        }
    }
    println!("masking flips the on-screen source in {}/{} scenes", flips, scenes.len());

    if let Some(out) = args.get(4) {
        model.save(Path::new(out))?;
        println!("model written to {}", out);
    }
    Ok(())
}

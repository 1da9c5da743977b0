//! Trains the toy alignment model and reports held-out synchronization accuracy.
//!
//! cargo run --release --example pretext_toy -- [steps] [seed] [curve.csv] [checkpoint-dir]

use avfusion::fusenet::{FusionConfig, FusionModel};
use avfusion::pretext::{self, AlignDataset, PretextConfig};

fn main() -> avfusion::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = PretextConfig::toy();
    if let Some(s) = args.get(1) {
        cfg.schedule.total_steps = s.parse().expect("steps");
    }
    let seed: u64 = args.get(2).map(|s| s.parse().expect("seed")).unwrap_or(0);
    let data = AlignDataset::synthesize(&cfg, seed)?;
    let held_out = pretext::eval_pairs(&data.eval, &cfg, seed + 1)?;
    let mut model = FusionModel::<f32>::build(&FusionConfig::toy(), seed)?;
    println!("parameters: {}", model.num_parameters());

    let t0 = std::time::Instant::now();
    let mut window = Vec::new();
    let report = pretext::train_pretext_with(&data, &mut model, &cfg, seed, |p, m| {
        window.push(p.loss);
        if (p.step + 1) % 250 == 0 {
            let acc = pretext::eval_sync(m, &held_out).expect("eval");
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            println!(
                "step {:5}  loss {:.4}  held-out {:.3} (pairwise {:.3})  {:.0}s",
                p.step + 1,
                mean,
                acc.pointwise,
                acc.pairwise,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    let smooth = pretext::smoothed_losses(&report.curve, 100);
    let rises = smooth.windows(2).filter(|w| w[1] > w[0]).count();
    println!("100-step block means: {:?}", smooth.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
    println!("increases between consecutive blocks: {}", rises);
    if let Some(path) = args.get(3) {
        pretext::write_curve(std::path::Path::new(path), &report.curve)?;
    }
    if let Some(dir) = args.get(4) {
        model.save(std::path::Path::new(dir))?;
    }
    Ok(())
}

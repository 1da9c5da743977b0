//! Fine-tunes a 4-class motion × timbre classifier from a pretrained
//! alignment checkpoint and from scratch on the same clips, for several seeds.
//!
//! cargo run --release --example transfer_toy -- <pretrained-dir> [seeds] [steps] [lr]

use std::path::Path;

use avfusion::fusenet::FusionModel;
use avfusion::transfer::{self, TransferConfig};

fn main() -> avfusion::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = args.get(1).expect("usage: transfer_toy <pretrained-dir> [seeds] [steps]");
    let seeds: u64 = args.get(2).map(|s| s.parse().expect("seeds")).unwrap_or(5);
    let mut cfg = TransferConfig::toy();
    if let Some(s) = args.get(3) {
        cfg.schedule.total_steps = s.parse().expect("steps");
    }
    if let Some(s) = args.get(4) {
        cfg.schedule.learning_rate = s.parse().expect("lr");
    }
    let pretrained = FusionModel::<f32>::load(Path::new(ckpt))?;
    let mut wins = 0;
    for seed in 0..seeds {
        let r = transfer::paired_run(&pretrained, &cfg, seed)?;
        println!("seed {}  pretrained {:.3}  scratch {:.3}", r.seed, r.pretrained, r.scratch);
        if r.pretrained >= r.scratch {
            wins += 1;
        }
    }
    println!("pretrained >= scratch in {}/{} seeds", wins, seeds);
    Ok(())
}

//! Scores a few hand-made estimates of a two-source mixture with SDR/SIR/SAR
//! and the log-spectrogram on/off error, printed as the CLI's metrics table.
//!
//! cargo run --release --example bss_metrics -- [seed]

use avfusion::data::{self, MixConfig, SceneParams};
use avfusion::metrics::{self, MetricsRow};
use avfusion::signal::{self, StftConfig, Waveform};

fn logs(w: &Waveform, cfg: &StftConfig) -> avfusion::Result<Vec<f64>> {
    Ok(signal::stft(w, cfg)?.magnitude.iter().map(|v| (v + 1e-5).ln()).collect())
}

fn main() -> avfusion::Result<()> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse().expect("seed")).unwrap_or(0);
    let params = SceneParams::toy();
    let a = data::make_synthetic_scene(&params, data::item_seed(seed, 0))?;
    let b = data::make_synthetic_scene(&params, data::item_seed(seed, 1))?;
    let stft = StftConfig::new(64.0, 16.0, a.audio.sample_rate());
    let m = data::make_mixture(&a, &b, &MixConfig { stft, power: 0.01 })?;
    let (fg, bg, mix) = (&m.fg_wave, &m.bg_wave, &m.mix_wave);

    // leak 20% of each source into the other
    let leaky = [fg.scaled(0.8).add(&bg.scaled(0.2))?, bg.scaled(0.8).add(&fg.scaled(0.2))?];
    let candidates: Vec<(&str, [Waveform; 2])> = vec![
        ("oracle", [fg.clone(), bg.clone()]),
        ("oracle x3", [fg.scaled(3.0), bg.scaled(3.0)]),
        ("leaky", leaky),
        ("mixture", [mix.clone(), mix.clone()]),
        ("swapped", [bg.clone(), fg.clone()]),
    ];

    let truth = [logs(fg, &stft)?, logs(bg, &stft)?];
    let mut rows = Vec::new();
    for (name, est) in &candidates {
        let pred = [logs(&est[0], &stft)?, logs(&est[1], &stft)?];
        let onoff = metrics::onoff_error([&pred[0], &pred[1]], [&truth[0], &truth[1]])?;
        let s = metrics::bss_eval([fg, bg], [&est[0], &est[1]])?;
        rows.push(MetricsRow { name: name.to_string(), onoff, sdr: s[0].sdr, sir: s[0].sir, sar: s[0].sar });
    }
    print!("{}", metrics::metrics_csv(&rows));
    Ok(())
}

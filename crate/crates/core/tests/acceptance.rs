//! End-to-end acceptance runs. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! cargo test --release --test acceptance

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avfusion::autograd::gradcheck;
use avfusion::data::{self, SceneParams};
use avfusion::fusenet::{FusionConfig, FusionModel};
use avfusion::localize;
use avfusion::metrics::{self, Assignment};
use avfusion::nn::Bound;
use avfusion::pretext::{self, AlignDataset, PretextConfig};
use avfusion::separate::{self, SepConfig, SepDataset, SepModel, SepTrainConfig, TargetBatch};
use avfusion::signal::{self, StftConfig, Waveform};
use avfusion::tensor::Tensor;
use avfusion::transfer::{self, TransferConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn all_params(store: &avfusion::nn::ParamStore<f64>) -> (Vec<String>, Vec<(String, Tensor<f64>)>) {
    let names: Vec<String> = store.names().cloned().collect();
    let params = names.iter().map(|n| (n.clone(), store.get(n).unwrap().clone())).collect();
    (names, params)
}

fn gradients() -> avfusion::Result<Outcome> {
    let t0 = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut track = |label: &str, reports: Vec<gradcheck::GradReport>| {
        let w = reports.iter().filter(|r| r.analytic_norm > 1e-10).map(|r| r.rel_error).fold(0.0, f64::max);
        worst.push((label.to_string(), w));
    };

    let params = vec![("aligned".to_string(), rand_tensor(&[6], 1, -3.0, 3.0)), ("shifted".to_string(), rand_tensor(&[6], 2, -3.0, 3.0))];
    track("alignment_nll", gradcheck::check(&params, 1e-6, |g, v| pretext::alignment_nll_graph(g, v[0], v[1]))?);

    let cfg = SepConfig { log_center: -1.0, log_scale: 2.0, ..SepConfig::toy() };
    let tg = TargetBatch {
        fg_log: rand_tensor(&[2, 1, 1, 3, 4], 3, -2.0, 2.0),
        bg_log: rand_tensor(&[2, 1, 1, 3, 4], 4, -2.0, 2.0),
        fg_phase: rand_tensor(&[2, 1, 1, 3, 4], 5, -3.0, 3.0),
        bg_phase: rand_tensor(&[2, 1, 1, 3, 4], 6, -3.0, 3.0),
    };
    let params = vec![("out".to_string(), rand_tensor(&[2, 4, 1, 3, 4], 7, -3.0, 3.0))];
    track("onoff_loss", gradcheck::check(&params, 1e-6, |g, v| separate::onoff_loss_graph(g, v[0], &tg, &cfg))?);
    let params = vec![("x1".to_string(), rand_tensor(&[2, 1, 1, 3, 4], 8, -3.0, 3.0)), ("x2".to_string(), rand_tensor(&[2, 1, 1, 3, 4], 9, -3.0, 3.0))];
    track("pit_loss", gradcheck::check(&params, 1e-6, |g, v| separate::pit_loss_graph(g, v[0], v[1], &tg.fg_log, &tg.bg_log))?);

    // tiny fused network under the alignment loss
    let model = FusionModel::<f64>::build(&FusionConfig::tiny(), 3)?;
    let video = rand_tensor(&[2, 3, 8, 8, 8], 10, 0.0, 1.0);
    let audio = rand_tensor(&[4, 1, 1, 1, 16], 11, -1.0, 1.0);
    let (names, params) = all_params(&model.params);
    track(
        "fusion model",
        gradcheck::check(&params, 1e-6, |g, vars| {
            let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let (v, a) = (g.constant(video.clone()), g.constant(audio.clone()));
            let out = model.forward_graph(g, &p, v, a)?;
            let la = g.narrow(out.logits, 0, 0, 2)?;
            let ls = g.narrow(out.logits, 0, 2, 2)?;
            pretext::alignment_nll_graph(g, la, ls)
        })?,
    );

    // tiny separator, fused network included, with a smooth readout of all output heads
    let sep_cfg = SepConfig {
        frame_ms: 250.0,
        hop_ms: 125.0,
        sample_rate: 16,
        channels: vec![2, 3, 3],
        log_eps: 1e-3,
        log_center: 0.0,
        log_scale: 1.0,
        predict_phase: true,
        condition_on_video: true,
        pit_head: true,
        phase_weight: 0.2,
        max_rate_ratio: 4.0,
    };
    let sep = SepModel::<f64>::build(&sep_cfg, &FusionConfig::tiny(), 4)?;
    let video = rand_tensor(&[1, 3, 8, 8, 8], 12, 0.0, 1.0);
    let audio = rand_tensor(&[1, 1, 1, 1, 16], 13, -1.0, 1.0);
    let spec = rand_tensor(&[1, 1, 1, 7, 3], 14, -1.0, 1.0);
    let (names, params) = all_params(&sep.params);
    track(
        "separation model",
        gradcheck::check(&params, 1e-6, |g, vars| {
            let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let (v, a, s) = (g.constant(video.clone()), g.constant(audio.clone()), g.constant(spec.clone()));
            let out = sep.forward_graph(g, &p, Some(v), Some(a), s)?;
            let sq = g.mul(out, out)?;
            Ok(g.sum(sq))
        })?,
    );

    let secs = t0.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst.iter().map(|(n, w)| format!("{} {:.1e}", n, w)).collect::<Vec<_>>().join(", ");
    Ok(outcome(max < 1e-4 && secs < 300.0, format!("max rel error {:.2e} [{}] in {:.0}s", max, detail, secs)))
}

fn relative_interior_error(x: &[f64], y: &[f64], r: std::ops::Range<usize>) -> f64 {
    let err: f64 = r.clone().map(|i| (y[i] - x[i]).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = r.map(|i| x[i] * x[i]).sum::<f64>().sqrt();
    err / norm
}

fn signal_checks() -> avfusion::Result<Outcome> {
    let mut round = 0.0f64;
    let mut parseval = 0.0f64;
    for (sr, n, frame, hop) in [(2000u32, 4000usize, 64.0, 16.0), (21_000, 44_100, 64.0, 16.0), (21_000, 86_520, 40.0, 16.0)] {
        let c = StftConfig::new(frame, hop, sr);
        let x = noise(n, sr as u64 + n as u64);
        let s = signal::stft(&Waveform::mono(x.clone(), sr)?, &c)?;
        let y = signal::istft(&s)?;
        round = round.max(relative_interior_error(&x, y.samples(), signal::interior_range(&c, sr, s.frames)));
        let (win, step) = (c.win_samples(sr), c.hop_samples(sr));
        let w = c.window.build(win);
        for t in 0..s.frames {
            let direct: f64 = (0..win).map(|i| (x[t * step + i] * w[i]).powi(2)).sum::<f64>() * c.fft_size as f64;
            parseval = parseval.max((s.frame_energy(t) - direct).abs() / direct);
        }
    }
    let paper = SepConfig::paper_geometry().stft();
    let shape = signal::stft(&Waveform::mono(vec![0.0; 44_100], 21_000)?, &paper)?.shape();
    let large = SepConfig::large_scale().stft();
    let large_shape = signal::stft(&Waveform::mono(vec![0.0; 86_520], 21_000)?, &large)?.shape();
    let pass = round < 1e-6 && parseval < 1e-6 && shape == (128, 1025) && large_shape == (256, 513);
    Ok(outcome(pass, format!("round trip {:.1e}, Parseval {:.1e}, shapes {:?} and {:?}", round, parseval, shape, large_shape)))
}

fn pretext_run(dir: &Path) -> avfusion::Result<(Outcome, FusionModel<f32>)> {
    let cfg = PretextConfig::toy();
    let seed = 0;
    let t0 = Instant::now();
    let ds = AlignDataset::synthesize(&cfg, seed)?;
    let mut model = FusionModel::<f32>::build(&FusionConfig::toy(), seed)?;
    let report = pretext::train_pretext(&ds, &mut model, &cfg, seed)?;
    let secs = t0.elapsed().as_secs_f64();
    let acc = pretext::eval_sync(&model, &pretext::eval_pairs(&ds.eval, &cfg, seed + 1)?)?;
    let path = dir.join("curve.csv");
    pretext::write_curve(&path, &report.curve)?;
    let losses: Vec<f64> = std::fs::read_to_string(&path)?.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let blocks: Vec<f64> = losses.chunks_exact(100).map(|c| c.iter().sum::<f64>() / 100.0).collect();
    let monotone = blocks.windows(2).all(|w| w[1] <= w[0]);
    let pass = ds.train.len() == 500 && acc.pointwise >= 0.9 && monotone && secs <= 900.0;
    let detail = format!(
        "{} clips, held-out {:.3} (pairwise {:.3}), 100-step means {:?}, {:.0}s",
        ds.train.len(),
        acc.pointwise,
        acc.pairwise,
        blocks.iter().map(|b| (b * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        secs
    );
    Ok((outcome(pass, detail), model))
}

fn localization(model: &FusionModel<f32>) -> avfusion::Result<Outcome> {
    let clips = (0..100)
        .map(|i| data::make_synthetic_scene(&SceneParams::toy(), data::item_seed(0x10ca1, i)))
        .collect::<avfusion::Result<Vec<_>>>()?;
    let r = localize::localization_accuracy(model, &clips)?;
    let pass = r.hit_rate >= 0.75 && r.max_pooling_gap <= 1e-5;
    Ok(outcome(
        pass,
        format!("argmax in box {:.3} over {} frames, area baseline {:.3}, pooling gap {:.1e}", r.hit_rate, r.frames, r.baseline, r.max_pooling_gap),
    ))
}

fn separation(pretrained: &FusionModel<f32>) -> avfusion::Result<Outcome> {
    let cfg = SepTrainConfig::toy();
    let seed = 0;
    let ds = SepDataset::synthesize(&cfg, seed)?;
    let mut model = separate::init_model(&cfg, Some(pretrained), &pretrained.config, seed)?;
    let report = separate::train_separation(&ds, &mut model, &cfg, seed)?;
    let ev = separate::evaluate(&model, &separate::eval_mixtures(&ds.eval, &cfg)?, cfg.ablation)?;
    let scenes = separate::two_source_scenes(&cfg.scene, 20, seed ^ 0x3a5c)?;
    let mut flips = 0;
    for clip in &scenes {
        if separate::masking_experiment(&model, clip, cfg.power)?.flips() {
            flips += 1;
        }
    }
    let ratio = ev.onoff / ev.onoff_copy_baseline;
    let gain = ev.sdr_fg - ev.sdr_fg_mixture_baseline;
    let pass = report.seconds <= 1800.0 && ratio <= 0.7 && gain >= 5.0 && 2 * flips > scenes.len();
    Ok(outcome(
        pass,
        format!(
            "on/off {:.3} = {:.2} of copy baseline, fg SDR +{:.2} dB over mixture, masking flips {}/{}, trained in {:.0}s",
            ev.onoff,
            ratio,
            gain,
            flips,
            scenes.len(),
            report.seconds
        ),
    ))
}

fn pit() -> avfusion::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut asym, mut above, mut wrong) = (0, 0, 0);
    for _ in 0..1000 {
        let n = rng.gen_range(1..16);
        let mut v = || (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<f64>>();
        let (x1, x2, fg, bg) = (v(), v(), v(), v());
        let (l, a) = separate::pit_loss(&x1, &x2, &fg, &bg)?;
        let (l_sw, _) = separate::pit_loss(&x2, &x1, &fg, &bg)?;
        let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        let ordered = (l1(&x1, &fg) + l1(&x2, &bg)) / n as f64;
        let swapped = (l1(&x2, &fg) + l1(&x1, &bg)) / n as f64;
        let brute = if swapped < ordered { Assignment::Swapped } else { Assignment::Identity };
        let (_, ma) = metrics::pit_assign([&x1, &x2], [&fg, &bg])?;
        asym += (l != l_sw) as usize;
        above += (l > ordered) as usize;
        wrong += (a != brute || ma != brute || l != ordered.min(swapped)) as usize;
    }
    Ok(outcome(
        asym + above + wrong == 0,
        format!("1000 instances: {} asymmetric, {} above ordered loss, {} differ from brute force", asym, above, wrong),
    ))
}

fn bss() -> avfusion::Result<Outcome> {
    let n = 2000;
    let a = noise(n, 21);
    // second reference made orthogonal to the first
    let mut b = noise(n, 22);
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let k = dot(&a, &b) / dot(&a, &a);
    b.iter_mut().zip(&a).for_each(|(y, x)| *y -= k * x);
    let refs = [Waveform::mono(a.clone(), 2000)?, Waveform::mono(b.clone(), 2000)?];

    // decomposition identity on an arbitrary estimate
    let est: Vec<f64> = noise(n, 23).iter().zip(&a).zip(&b).map(|((e, x), y)| 0.3 * e + 0.8 * x - 0.4 * y).collect();
    let d = metrics::decompose(&est, [&a, &b], 0)?;
    let identity = (0..n).map(|i| (d.target[i] + d.interf[i] + d.artif[i] - est[i]).abs()).fold(0.0, f64::max);

    // noise orthogonal to both references at 10 dB below the target
    let mut e = noise(n, 24);
    for r in [&a, &b] {
        let k = dot(r, &e) / dot(r, r);
        e.iter_mut().zip(r).for_each(|(y, x)| *y -= k * x);
    }
    let scale = (dot(&a, &a) / dot(&e, &e) / 10.0).sqrt();
    let noisy: Vec<f64> = a.iter().zip(&e).map(|(x, y)| x + scale * y).collect();
    let est_w = Waveform::mono(noisy, 2000)?;
    let s = metrics::bss_eval([&refs[0], &refs[1]], [&est_w, &refs[1]])?;
    let sdr_err = (s[0].sdr - 10.0).abs();

    // scale invariance
    let mixed = Waveform::mono(est, 2000)?;
    let base = metrics::bss_eval([&refs[0], &refs[1]], [&mixed, &est_w])?;
    let mut drift = 0.0f64;
    for alpha in [0.01, 0.5, 7.0] {
        let sc = metrics::bss_eval([&refs[0], &refs[1]], [&mixed.scaled(alpha), &est_w.scaled(alpha)])?;
        for (x, y) in base.iter().zip(&sc) {
            drift = drift.max((x.sdr - y.sdr).abs()).max((x.sir - y.sir).abs()).max((x.sar - y.sar).abs());
        }
    }
    let pass = identity <= 1e-9 && sdr_err <= 0.2 && drift <= 1e-9;
    Ok(outcome(pass, format!("identity {:.1e}, 10 dB noise gives SDR {:.4} dB, scale drift {:.1e} dB", identity, s[0].sdr, drift)))
}

fn transfer_run(pretrained: &FusionModel<f32>) -> avfusion::Result<Outcome> {
    let cfg = TransferConfig::toy();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let r = transfer::paired_run(pretrained, &cfg, seed)?;
        wins += (r.pretrained >= r.scratch) as usize;
        rows.push(format!("{:.2}/{:.2}", r.pretrained, r.scratch));
    }
    Ok(outcome(wins >= 4, format!("pretrained >= scratch in {}/5 seeds (pretrained/scratch: {})", wins, rows.join(" "))))
}

fn cli(args: &[&str]) -> avfusion::Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_avfusion")).args(args).output()?;
    if !out.status.success() {
        return Err(avfusion::Error::Config(format!("{:?} failed: {}", args, String::from_utf8_lossy(&out.stderr))));
    }
    Ok(())
}

fn determinism(dir: &Path) -> avfusion::Result<Outcome> {
    let small = [
        "--deterministic",
        "--seed",
        "5",
        "--set",
        "pretext.train_clips=16",
        "--set",
        "pretext.eval_clips=16",
        "--set",
        "pretext.schedule.total_steps=20",
        "--set",
        "pretext.schedule.batch_size=8",
        "--set",
        "separation.train_clips=8",
        "--set",
        "separation.eval_clips=4",
        "--set",
        "separation.schedule.total_steps=6",
        "--set",
        "separation.schedule.batch_size=4",
        "--set",
        "transfer.train_per_class=2",
        "--set",
        "transfer.eval_per_class=2",
        "--set",
        "transfer.schedule.total_steps=6",
    ];
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let root = dir.join(run);
        let p = |s: &str| root.join(s).to_string_lossy().into_owned();
        let with = |cmd: &[&str]| -> Vec<String> { cmd.iter().map(|s| s.to_string()).chain(small.iter().map(|s| s.to_string())).collect() };
        let run = |cmd: Vec<String>| cli(&cmd.iter().map(String::as_str).collect::<Vec<_>>());
        run(with(&["train-align", "--out", &p("align")]))?;
        run(with(&["train-sep", "--out", &p("sep"), "--pretrained", &p("align/checkpoint")]))?;
        run(with(&["train-cls", "--out", &p("cls"), "--pretrained", &p("align/checkpoint")]))?;
        run(with(&["localize", "--checkpoint", &p("align/checkpoint"), "--out", &p("loc")]))?;
        files.push(root);
    }
    let compared = ["align/metrics.csv", "align/curve.csv", "sep/metrics.csv", "sep/summary.csv", "cls/metrics.csv", "loc/localization.csv"];
    let mut differ = Vec::new();
    for f in compared {
        if std::fs::read(files[0].join(f))? != std::fs::read(files[1].join(f))? {
            differ.push(f);
        }
    }
    Ok(outcome(differ.is_empty(), format!("{} metric files compared across two CLI runs, differing: {:?}", compared.len(), differ)))
}

fn record(results: &mut Vec<(String, Outcome)>, name: &str, r: avfusion::Result<Outcome>) {
    let o = r.unwrap_or_else(|e| outcome(false, format!("error: {}", e)));
    println!("[{}] {}: {}", if o.pass { "PASS" } else { "FAIL" }, name, o.detail);
    results.push((name.to_string(), o));
}

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut results = Vec::new();
    record(&mut results, "1 gradients", gradients());
    record(&mut results, "2 signal", signal_checks());
    let model = match pretext_run(dir.path()) {
        Ok((o, m)) => {
            record(&mut results, "3 pretext", Ok(o));
            Some(m)
        }
        Err(e) => {
            record(&mut results, "3 pretext", Err(e));
            None
        }
    };
    let missing = || Err(avfusion::Error::Missing(dir.path().join("pretext model")));
    record(&mut results, "4 localization", model.as_ref().map_or_else(missing, localization));
    record(&mut results, "5 separation", model.as_ref().map_or_else(missing, separation));
    record(&mut results, "6 pit", pit());
    record(&mut results, "7 bss", bss());
    record(&mut results, "8 transfer", model.as_ref().map_or_else(missing, transfer_run));
    record(&mut results, "9 determinism", determinism(dir.path()));
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| n.as_str()).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        eprintln!("failed: {:?}", failed);
        std::process::exit(1);
    }
}

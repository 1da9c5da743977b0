//! Separation scores: zero-lag bss_eval (SDR/SIR/SAR), log-spectrogram L1 error,
//! and permutation-invariant assignment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{self, Waveform};

pub use crate::pretext::{sync_accuracy, SyncAccuracy};

/// Scores are clipped to `±DB_CAP`.
pub const DB_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssScores {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

/// `est = target + interf + artif`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub target: Vec<f64>,
    pub interf: Vec<f64>,
    pub artif: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `10·log10(num/den)` clipped to `±DB_CAP`; an empty denominator scores the cap.
pub fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return if num > 0.0 { DB_CAP } else { 0.0 };
    }
    if num <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

/// Splits `est` against references `refs` for source `j` by least-squares projection.
pub fn decompose(est: &[f64], refs: [&[f64]; 2], j: usize) -> Result<Decomposition> {
    let n = est.len();
    if refs.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!("estimate has {} samples, references {} and {}", n, refs[0].len(), refs[1].len())));
    }
    let g = [[energy(refs[0]), dot(refs[0], refs[1])], [dot(refs[1], refs[0]), energy(refs[1])]];
    if g[0][0] == 0.0 || g[1][1] == 0.0 {
        return Err(Error::Degenerate("a reference is silent".into()));
    }
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    if det <= 1e-12 * g[0][0] * g[1][1] {
        return Err(Error::Degenerate("references are linearly dependent".into()));
    }
    let b = [dot(est, refs[0]), dot(est, refs[1])];
    let c = [(g[1][1] * b[0] - g[0][1] * b[1]) / det, (g[0][0] * b[1] - g[1][0] * b[0]) / det];
    let alpha = b[j] / g[j][j];
    let target: Vec<f64> = refs[j].iter().map(|r| alpha * r).collect();
    let proj: Vec<f64> = (0..n).map(|i| c[0] * refs[0][i] + c[1] * refs[1][i]).collect();
    let interf: Vec<f64> = proj.iter().zip(&target).map(|(p, t)| p - t).collect();
    let artif: Vec<f64> = est.iter().zip(&proj).map(|(e, p)| e - p).collect();
    Ok(Decomposition { target, interf, artif })
}

pub fn scores_of(d: &Decomposition) -> BssScores {
    let t = energy(&d.target);
    let i = energy(&d.interf);
    let a = energy(&d.artif);
    let ia: Vec<f64> = d.interf.iter().zip(&d.artif).map(|(x, y)| x + y).collect();
    let ti: Vec<f64> = d.target.iter().zip(&d.interf).map(|(x, y)| x + y).collect();
    BssScores { sdr: ratio_db(t, energy(&ia)), sir: ratio_db(t, i), sar: ratio_db(energy(&ti), a) }
}

fn mono_samples(w: &Waveform) -> Vec<f64> {
    signal::downmix_mono(w).channel(0).to_vec()
}

/// Per-source scores of `ests[j]` against `refs[j]`, both sources as interferers.
pub fn bss_eval(refs: [&Waveform; 2], ests: [&Waveform; 2]) -> Result<[BssScores; 2]> {
    let rate = refs[0].sample_rate();
    if [refs[1], ests[0], ests[1]].iter().any(|w| w.sample_rate() != rate) {
        return Err(Error::Incompatible("sample rates differ".into()));
    }
    let r = refs.map(mono_samples);
    let e = ests.map(mono_samples);
    let mut out = [BssScores { sdr: 0.0, sir: 0.0, sar: 0.0 }; 2];
    for j in 0..2 {
        out[j] = scores_of(&decompose(&e[j], [&r[0], &r[1]], j)?);
    }
    Ok(out)
}

/// Mean absolute difference over both streams' log-magnitudes.
pub fn onoff_error(pred: [&[f64]; 2], truth: [&[f64]; 2]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for k in 0..2 {
        if pred[k].len() != truth[k].len() {
            return Err(Error::Shape(format!("stream {}: {} vs {} values", k, pred[k].len(), truth[k].len())));
        }
        total += pred[k].iter().zip(truth[k]).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += pred[k].len();
    }
    if count == 0 {
        return Err(Error::Degenerate("empty spectrograms".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    /// Prediction 1 is the on-screen stream.
    Identity,
    Swapped,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Smaller of the two assignment costs `‖p_i − r_1‖₁ + ‖p_j − r_2‖₁`; ties go to identity.
pub fn pit_assign(preds: [&[f64]; 2], refs: [&[f64]; 2]) -> Result<(f64, Assignment)> {
    let n = refs[0].len();
    if preds.iter().chain(&refs).any(|v| v.len() != n) {
        return Err(Error::Shape("PIT inputs differ in length".into()));
    }
    let ident = l1(preds[0], refs[0]) + l1(preds[1], refs[1]);
    let swap = l1(preds[1], refs[0]) + l1(preds[0], refs[1]);
    Ok(if swap < ident { (swap, Assignment::Swapped) } else { (ident, Assignment::Identity) })
}

/// PIT assignment on log-magnitudes, then bss_eval of the reordered waveforms.
pub fn pit_assign_and_score(
    pred_logs: [&[f64]; 2],
    pred_waves: [&Waveform; 2],
    ref_logs: [&[f64]; 2],
    ref_waves: [&Waveform; 2],
) -> Result<(Assignment, [BssScores; 2])> {
    let (_, a) = pit_assign(pred_logs, ref_logs)?;
    let ests = match a {
        Assignment::Identity => pred_waves,
        Assignment::Swapped => [pred_waves[1], pred_waves[0]],
    };
    Ok((a, bss_eval(ref_waves, ests)?))
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub name: String,
    pub onoff: f64,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

/// `clip,On/off,SDR,SIR,SAR` with six decimals, plus a `mean` row.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("clip,On/off,SDR,SIR,SAR\n");
    let line = |s: &mut String, r: &MetricsRow| writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", r.name, r.onoff, r.sdr, r.sir, r.sar).unwrap();
    for r in rows {
        line(&mut s, r);
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let m = MetricsRow { name: "mean".into(), onoff: mean(|r| r.onoff), sdr: mean(|r| r.sdr), sir: mean(|r| r.sir), sar: mean(|r| r.sar) };
        line(&mut s, &m);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn wave(v: &[f64]) -> Waveform {
        Waveform::mono(v.to_vec(), 2000).unwrap()
    }

    /// Removes the components of `v` along `basis` (Gram–Schmidt).
    fn orthogonalize(v: &mut [f64], basis: &[&[f64]]) {
        let mut ortho: Vec<Vec<f64>> = Vec::new();
        for b in basis {
            let mut u = b.to_vec();
            for o in &ortho {
                let c = dot(&u, o) / energy(o);
                u.iter_mut().zip(o).for_each(|(x, y)| *x -= c * y);
            }
            ortho.push(u);
        }
        for o in &ortho {
            let c = dot(v, o) / energy(o);
            v.iter_mut().zip(o).for_each(|(x, y)| *x -= c * y);
        }
    }

    #[test]
    fn exact_and_swapped_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, mut b) = (noise(&mut rng, 500), noise(&mut rng, 500));
        // pure interference needs no component along the target
        orthogonalize(&mut b, &[&a]);
        let s = bss_eval([&wave(&a), &wave(&b)], [&wave(&a), &wave(&b)]).unwrap();
        assert_eq!(s[0].sdr, DB_CAP);
        assert_eq!(s[1].sir, DB_CAP);
        let s = bss_eval([&wave(&a), &wave(&b)], [&wave(&b), &wave(&a)]).unwrap();
        assert_eq!(s[0].sir, -DB_CAP);
        assert_eq!(s[0].sdr, -DB_CAP);
    }

    #[test]
    fn orthogonal_noise_at_10_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (noise(&mut rng, 4000), noise(&mut rng, 4000));
        let mut n = noise(&mut rng, 4000);
        orthogonalize(&mut n, &[&a, &b]);
        let k = (energy(&a) / 10.0 / energy(&n)).sqrt();
        let est: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x + k * y).collect();
        let s = bss_eval([&wave(&a), &wave(&b)], [&wave(&est), &wave(&b)]).unwrap();
        assert!((s[0].sdr - 10.0).abs() < 0.2, "{:?}", s[0]);
        assert!((s[0].sar - 10.0).abs() < 0.2);
        assert!(s[0].sir > 90.0);
    }

    #[test]
    fn decomposition_reconstructs_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (a, b, e) = (noise(&mut rng, 300), noise(&mut rng, 300), noise(&mut rng, 300));
            for j in 0..2 {
                let d = decompose(&e, [&a, &b], j).unwrap();
                for i in 0..300 {
                    assert!((d.target[i] + d.interf[i] + d.artif[i] - e[i]).abs() < 1e-9);
                }
                // artifacts are orthogonal to both references
                assert!(dot(&d.artif, &a).abs() < 1e-9 && dot(&d.artif, &b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_references() {
        let a = vec![1.0, 2.0, 3.0];
        let z = vec![0.0; 3];
        assert!(matches!(decompose(&a, [&a, &z], 0), Err(Error::Degenerate(_))));
        let twice: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        assert!(matches!(decompose(&a, [&a, &twice], 0), Err(Error::Degenerate(_))));
        assert!(decompose(&a, [&a[..2], &a], 0).is_err());
    }

    #[test]
    fn onoff_error_cases() {
        let t = [0.5, -1.0, 2.0, 0.0, 3.0, 1.5];
        assert_eq!(onoff_error([&t, &t], [&t, &t]).unwrap(), 0.0);
        let shifted: Vec<f64> = t.iter().map(|v| v - 0.75).collect();
        assert!((onoff_error([&shifted, &shifted], [&t, &t]).unwrap() - 0.75).abs() < 1e-15);
        let p = [1.0, 2.0, -3.0, 0.5, 0.0, 1.0];
        let mut oracle = 0.0;
        for i in 0..6 {
            oracle += (p[i] - t[i]).abs() + (t[i] - p[i]).abs();
        }
        assert!((onoff_error([&p, &t], [&t, &p]).unwrap() - oracle / 12.0).abs() < 1e-15);
        assert!(onoff_error([&p[..2], &t], [&t, &t]).is_err());
    }

    #[test]
    fn pit_cases() {
        let (f, b) = ([1.0, 2.0, 3.0], [0.0, -1.0, 5.0]);
        assert_eq!(pit_assign([&f, &b], [&f, &b]).unwrap(), (0.0, Assignment::Identity));
        assert_eq!(pit_assign([&b, &f], [&f, &b]).unwrap(), (0.0, Assignment::Swapped));
        assert_eq!(pit_assign([&f, &f], [&f, &b]).unwrap().1, Assignment::Identity);
    }

    #[test]
    fn pit_then_bss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (noise(&mut rng, 400), noise(&mut rng, 400));
        let (la, lb) = ([1.0, 2.0], [4.0, -1.0]);
        let (asg, s) = pit_assign_and_score([&lb, &la], [&wave(&b), &wave(&a)], [&la, &lb], [&wave(&a), &wave(&b)]).unwrap();
        assert_eq!(asg, Assignment::Swapped);
        assert_eq!(s[0].sdr, DB_CAP);
        assert_eq!(s[1].sdr, DB_CAP);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![
            MetricsRow { name: "a".into(), onoff: 1.0, sdr: 2.0, sir: 3.0, sar: 4.0 },
            MetricsRow { name: "b".into(), onoff: 3.0, sdr: 0.0, sir: 1.0, sar: 0.0 },
        ];
        let csv = metrics_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "clip,On/off,SDR,SIR,SAR");
        assert_eq!(lines[3], "mean,2.000000,1.000000,2.000000,2.000000");
    }

    proptest! {
        #[test]
        fn scores_are_scale_invariant(seed in any::<u64>(), alpha in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (noise(&mut rng, 200), noise(&mut rng, 200));
            let e: Vec<f64> = a.iter().zip(noise(&mut rng, 200)).map(|(x, n)| x + 0.3 * n).collect();
            let scaled: Vec<f64> = e.iter().map(|v| alpha * v).collect();
            let s1 = bss_eval([&wave(&a), &wave(&b)], [&wave(&e), &wave(&b)]).unwrap();
            let s2 = bss_eval([&wave(&a), &wave(&b)], [&wave(&scaled), &wave(&b)]).unwrap();
            prop_assert!((s1[0].sdr - s2[0].sdr).abs() < 1e-9);
            prop_assert!((s1[0].sir - s2[0].sir).abs() < 1e-9);
            prop_assert!((s1[0].sar - s2[0].sar).abs() < 1e-9);
        }

        #[test]
        fn onoff_error_is_symmetric(v in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let (p, t) = (&v[..4], &v[4..]);
            prop_assert_eq!(onoff_error([p, t], [t, p]).unwrap(), onoff_error([t, p], [p, t]).unwrap());
        }

        #[test]
        fn pit_matches_enumeration(v in proptest::collection::vec(-3.0f64..3.0, 12)) {
            let (p1, p2, r1, r2) = (&v[..3], &v[3..6], &v[6..9], &v[9..]);
            let (loss, a) = pit_assign([p1, p2], [r1, r2]).unwrap();
            let costs = [l1(p1, r1) + l1(p2, r2), l1(p2, r1) + l1(p1, r2)];
            let best = if costs[1] < costs[0] { 1 } else { 0 };
            prop_assert_eq!(loss, costs[best]);
            prop_assert_eq!(a, if best == 0 { Assignment::Identity } else { Assignment::Swapped });
        }
    }
}

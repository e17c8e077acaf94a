//! Independent reference computations. Each one takes a different route from
//! the production code it checks: long series instead of short recurrences,
//! all-pairs enumeration instead of distance transforms, pair counting
//! instead of rank statistics, sampling instead of closed forms.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::evidential::sample_dirichlet;

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const SERIES_TERMS: usize = 200;

/// ψ(x) from the 200-term series -γ + Σ (1/(k+1) - 1/(k+x)), with the
/// remaining tail ψ(x+200) - ψ(201) closed by Euler-Maclaurin.
pub fn digamma_series(x: f64) -> f64 {
    let mut s = -EULER_GAMMA;
    for k in 0..SERIES_TERMS {
        s += 1.0 / (k as f64 + 1.0) - 1.0 / (k as f64 + x);
    }
    let em = |z: f64| {
        let z2 = z * z;
        z.ln() - 0.5 / z - 1.0 / (12.0 * z2) + 1.0 / (120.0 * z2 * z2) - 1.0 / (252.0 * z2 * z2 * z2)
    };
    s + em(x + SERIES_TERMS as f64) - em(SERIES_TERMS as f64 + 1.0)
}

/// ln Γ(x) = ln Γ(x+200) - Σ_{k<200} ln(x+k), Stirling at the shifted point.
pub fn ln_gamma_series(x: f64) -> f64 {
    let z = x + SERIES_TERMS as f64;
    let z2 = z * z;
    let stirling = (z - 0.5) * z.ln() - z + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * z)
        - 1.0 / (360.0 * z2 * z)
        + 1.0 / (1260.0 * z2 * z2 * z);
    let logs: f64 = (0..SERIES_TERMS).map(|k| (x + k as f64).ln()).sum();
    stirling - logs
}

/// ln Γ(x) via the Lanczos approximation (g = 7, 9 coefficients), x >= 0.5.
#[allow(clippy::excessive_precision)]
pub fn ln_gamma_lanczos(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let z = x - 1.0;
    let mut a = C[0];
    let t = z + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (z + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + a.ln()
}

/// Monte-Carlo estimate of E[-ln p_label] under Dir(alpha): (mean, standard error).
pub fn mc_expected_ce(alpha: &[f64], label: usize, draws: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let p = sample_dirichlet(alpha, rng);
        let v = -p[label].max(f64::MIN_POSITIVE).ln();
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo mean of Dir(alpha) draws with per-component standard errors.
pub fn mc_dirichlet_mean(alpha: &[f64], draws: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let k = alpha.len();
    let mut sum = vec![0.0; k];
    let mut sum_sq = vec![0.0; k];
    for _ in 0..draws {
        let p = sample_dirichlet(alpha, rng);
        for i in 0..k {
            sum[i] += p[i];
            sum_sq[i] += p[i] * p[i];
        }
    }
    let n = draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = (0..k)
        .map(|i| (((sum_sq[i] / n - mean[i] * mean[i]).max(0.0) * n / (n - 1.0)) / n).sqrt())
        .collect();
    (mean, se)
}

/// Boundary pixels: foreground pixels with at least one 4-neighbour that is
/// background or outside the image.
fn boundary_naive(mask: &[bool], h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] {
                continue;
            }
            let neighbours = [
                (r as i64 - 1, c as i64),
                (r as i64 + 1, c as i64),
                (r as i64, c as i64 - 1),
                (r as i64, c as i64 + 1),
            ];
            let interior = neighbours.iter().all(|&(nr, nc)| {
                nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w && mask[nr as usize * w + nc as usize]
            });
            if !interior {
                out.push((r as f64, c as f64));
            }
        }
    }
    out
}

/// 95th percentile of pooled boundary-to-boundary distances by enumerating every pair.
pub fn hd95_all_pairs(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
    let ba = boundary_naive(a, h, w);
    let bb = boundary_naive(b, h, w);
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => {
            return (((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64).sqrt();
        }
        _ => {}
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut pooled = directed(&ba, &bb);
    pooled.extend(directed(&bb, &ba));
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let pos = 0.95 * (pooled.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    pooled[lo] + (pooled[hi] - pooled[lo]) * (pos - lo as f64)
}

/// AUROC by counting (positive, negative) pairs; ties count one half.
pub fn auroc_pairs(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &pi) in positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Top-k pixels by (value desc, row asc, col asc), via a full sort.
pub fn topk_sorted(values: &[f64], w: usize, k: usize) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i / w, i % w)).collect()
}

/// Random boolean mask with foreground probability `p`.
pub fn random_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<bool> {
    (0..len).map(|_| rng.random::<f64>() < p).collect()
}

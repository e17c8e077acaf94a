//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Oracles here are written independently of the
//! library: central differences, sampling, all-pairs enumeration, pair
//! counting and full sorts.

use std::process::ExitCode;
use std::time::Instant;

use evseg::autodiff::{special, DiffArray, Tape};
use evseg::evidential::{evidential_output, sample_dirichlet, EvidenceActivation};
use evseg::exec::Execution;
use evseg::losses::{expected_ce, kl_to_uniform, LabelMap};
use evseg::metrics::{auroc, dice, hd95, jaccard, BinaryMask};
use evseg::pipeline::{evaluate, train, TrainConfig, TrainOutcome};
use evseg::prompts::{sample_topk_uncertainty, ClickSet, SamplerKind};
use evseg::selftest::{loss_of_logits, LOSS_NAMES};
use evseg::synthdata::{generate, read_dataset, write_dataset, Dataset, GenConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

// ---------------------------------------------------------------- oracles

fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let at = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && mask[r as usize * w + c as usize];
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if at(r, c) && !(at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

fn hd95_brute(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
    let (ba, bb) = (boundary(a, h, w), boundary(b, h, w));
    if ba.is_empty() && bb.is_empty() {
        return 0.0;
    }
    if ba.is_empty() || bb.is_empty() {
        return (((h - 1).pow(2) + (w - 1).pow(2)) as f64).sqrt();
    }
    let nearest = |p: &(i64, i64), set: &[(i64, i64)]| {
        set.iter()
            .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = ba.iter().map(|p| nearest(p, &bb)).collect();
    d.extend(bb.iter().map(|p| nearest(p, &ba)));
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    d[lo] + (d[hi] - d[lo]) * (pos - lo as f64)
}

fn auroc_brute(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..scores.len()).filter(|&i| pos[i]) {
        for j in (0..scores.len()).filter(|&j| !pos[j]) {
            pairs += 1.0;
            wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    (pairs > 0.0).then_some(wins / pairs)
}

fn topk_brute(u: &[f64], w: usize, k: usize) -> Vec<(usize, usize)> {
    let mut cells: Vec<(f64, usize, usize)> = u.iter().enumerate().map(|(i, &v)| (v, i / w, i % w)).collect();
    cells.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cells.into_iter().take(k).map(|(_, r, c)| (r, c)).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn single_pixel_logits(alpha: &[f64]) -> DiffArray {
    DiffArray::constant(&[alpha.len(), 1, 1], alpha.iter().map(|a| a - 1.0).collect()).unwrap()
}

// ---------------------------------------------------------------- criteria

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 5];
    let mut min_alpha = f64::INFINITY;
    for _ in 0..20 {
        let point: Vec<f64> = (0..18).map(|_| rng.random_range(0.05..4.0)).collect();
        min_alpha = point.iter().fold(min_alpha, |m, &v| m.min(v + 1.0));
        let classes: Vec<usize> = (0..9).map(|_| rng.random_range(0..2)).collect();
        let y = LabelMap::from_classes(&classes, 2, 3, 3).unwrap();
        let a_t = rng.random_range(0.0..1.0);
        for (slot, name) in LOSS_NAMES.iter().enumerate() {
            let tape = Tape::new();
            let x = tape.var(&[2, 3, 3], point.clone()).unwrap();
            let loss = loss_of_logits(name, &tape, &x, &y, a_t).unwrap();
            let analytic = tape.backward(&loss).unwrap().get_or_zeros(&x);
            let f = |p: &[f64]| {
                let t = Tape::new();
                let c = DiffArray::constant(&[2, 3, 3], p.to_vec()).unwrap();
                loss_of_logits(name, &t, &c, &y, a_t).unwrap().item()
            };
            let numeric = central_difference(&f, &point, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                worst[slot] = worst[slot].max(rel);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let max = worst.iter().copied().fold(0.0, f64::max);
    let per: Vec<String> = LOSS_NAMES.iter().zip(worst).map(|(n, e)| format!("{n}={e:.1e}")).collect();
    outcome(
        max <= 1e-4 && secs < 10.0 && min_alpha >= 1.05,
        format!("max rel err {max:.2e} <= 1e-4 [{}], min alpha {min_alpha:.3}, {secs:.2}s < 10s", per.join(" ")),
    )
}

fn closed_form_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let draws = 100_000;
    let mut worst_z = 0.0f64;
    let mut zs = Vec::new();
    for alpha in [vec![1.0, 1.0], vec![2.0, 4.0], vec![5.0, 1.0], vec![3.0, 3.0, 3.0]] {
        {
            let label = 0;
            let tape = Tape::new();
            let out = evidential_output(&tape, &single_pixel_logits(&alpha), EvidenceActivation::Relu).unwrap();
            let y = LabelMap::from_classes(&[label], alpha.len(), 1, 1).unwrap();
            let closed = expected_ce(&tape, &out.dirichlet, &y).unwrap().item();
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..draws {
                let ce = -sample_dirichlet(&alpha, &mut rng)[label].ln();
                s += ce;
                s2 += ce * ce;
            }
            let n = draws as f64;
            let mean = s / n;
            let se = ((s2 / n - mean * mean) * n / (n - 1.0) / n).sqrt();
            let z = (closed - mean).abs() / se;
            worst_z = worst_z.max(z);
            zs.push(format!("{alpha:?}:{z:.2}"));
        }
    }
    let psi_a = (special::digamma(2.0) - special::digamma(1.0) - 1.0).abs();
    let psi_b = (special::digamma(6.0) - special::digamma(4.0) - 0.45).abs();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_z <= 3.0 && psi_a <= 1e-10 && psi_b <= 1e-10 && secs < 30.0,
        format!(
            "worst |z| {worst_z:.2} <= 3 ({}), psi errs {psi_a:.1e} {psi_b:.1e} <= 1e-10, {secs:.2}s < 30s",
            zs.join(" ")
        ),
    )
}

fn mass_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, p) = (4usize, 250_000usize);
    let evidence: Vec<f64> = (0..n * p)
        .map(|_| if rng.random_bool(0.1) { 0.0 } else { 10f64.powf(rng.random_range(-6.0..4.0)) })
        .collect();
    let run = |e: &[f64]| {
        let tape = Tape::new();
        let logits = DiffArray::constant(&[n, 1, p], e.to_vec()).unwrap();
        evidential_output(&tape, &logits, EvidenceActivation::Relu).unwrap()
    };
    let base = run(&evidence);
    let (b, u) = (base.belief.values().data(), base.uncertainty.data());
    let worst = (0..p)
        .map(|j| (u[j] + (0..n).map(|c| b[c * p + j]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    let mut bumped = evidence.clone();
    for j in 0..p {
        let c = rng.random_range(0..n);
        bumped[c * p + j] += 10f64.powf(rng.random_range(-3.0..2.0));
    }
    let after = run(&bumped);
    let violations = (0..p).filter(|&j| after.uncertainty.data()[j] >= u[j] || after.uncertainty.data()[j].is_nan()).count();
    outcome(
        worst <= 1e-10 && violations == 0,
        format!("max |u + sum b - 1| {worst:.1e} <= 1e-10 over {} values; u increments failing to decrease: {violations}/{p}", n * p),
    )
}

fn kl_correctness() -> Outcome {
    let kl = |alpha: &[f64], label: usize| {
        let tape = Tape::new();
        let out = evidential_output(&tape, &single_pixel_logits(alpha), EvidenceActivation::Relu).unwrap();
        let y = LabelMap::from_classes(&[label], alpha.len(), 1, 1).unwrap();
        kl_to_uniform(&tape, &out.dirichlet, &y).unwrap().item()
    };
    let zero = [kl(&[9.0, 1.0], 0), kl(&[1.0, 1.0, 1.0], 1), kl(&[1.0, 1.0, 4.0], 2)];
    let zero_exact = zero.iter().all(|&v| v == 0.0);
    let hand = (kl(&[5.0, 3.0], 0) - (3f64.ln() - 2.0 / 3.0)).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut min = f64::INFINITY;
    for _ in 0..10_000 {
        let n = rng.random_range(2..=5);
        let alpha: Vec<f64> = (0..n).map(|_| 1.0 + 10f64.powf(rng.random_range(-4.0..2.5))).collect();
        min = min.min(kl(&alpha, rng.random_range(0..n)));
    }
    outcome(
        zero_exact && hand <= 1e-10 && min >= 0.0,
        format!("kl at uniform {zero:?} (exact 0), |kl([1,3]) - (ln3 - 2/3)| {hand:.1e} <= 1e-10, min over 1e4 random {min:.3e} >= 0"),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut ident, mut hd_err, mut auc_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let h = rng.random_range(1..=12);
        let w = rng.random_range(1..=12);
        let (pa, pb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a: Vec<bool> = (0..h * w).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..h * w).map(|_| rng.random_bool(pb)).collect();
        let ma = BinaryMask::new(h, w, a.clone()).unwrap();
        let mb = BinaryMask::new(h, w, b.clone()).unwrap();
        let d = dice(&ma, &mb).unwrap();
        ident = ident.max((jaccard(&ma, &mb).unwrap() - d / (2.0 - d)).abs());
        hd_err = hd_err.max((hd95(&ma, &mb).unwrap() - hd95_brute(&a, &b, h, w)).abs());
    }
    let mut auroc_cases = 0;
    for _ in 0..2000 {
        let n = rng.random_range(2..=12);
        let levels = rng.random_range(1..=6);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 3.0).collect();
        let pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        match (auroc(&scores, &pos), auroc_brute(&scores, &pos)) {
            (Some(x), Some(y)) => {
                auc_err = auc_err.max((x - y).abs());
                auroc_cases += 1;
            }
            (None, None) => {}
            _ => auc_err = f64::INFINITY,
        }
    }
    let gt4 = BinaryMask::new(2, 2, vec![true; 4]).unwrap();
    let sub2 = BinaryMask::new(2, 2, vec![true, true, false, false]).unwrap();
    let worked_dice = (dice(&sub2, &gt4).unwrap() - 2.0 / 3.0).abs();
    let mut p1 = vec![false; 24];
    let mut p2 = vec![false; 24];
    p1[8 + 1] = true;
    p2[8 + 6] = true;
    let worked_hd = (hd95(&BinaryMask::new(3, 8, p1).unwrap(), &BinaryMask::new(3, 8, p2).unwrap()).unwrap() - 5.0).abs();
    let worked_auc = (auroc(&[0.9, 0.8, 0.2, 0.1], &[true, false, true, false]).unwrap() - 0.75).abs();
    let passed = ident <= 1e-12
        && hd_err <= 1e-9
        && auc_err <= 1e-12
        && worked_dice <= 1e-12
        && worked_hd <= 1e-12
        && worked_auc <= 1e-12;
    outcome(
        passed,
        format!(
            "jaccard identity {ident:.1e} <= 1e-12, hd95 vs all-pairs {hd_err:.1e} <= 1e-9 (200 pairs), \
             auroc vs pair count {auc_err:.1e} <= 1e-12 ({auroc_cases} cases), worked errs {worked_dice:.0e}/{worked_hd:.0e}/{worked_auc:.0e}"
        ),
    )
}

fn sampler_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut mismatches, mut variant_breaks) = (0, 0);
    for case in 0..500 {
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        // Every other map is drawn from a few levels so ties are common.
        let u: Vec<f64> = if case % 2 == 0 {
            (0..h * w).map(|_| rng.random::<f64>()).collect()
        } else {
            (0..h * w).map(|_| rng.random_range(0..4) as f64 * 0.25).collect()
        };
        let k = rng.random_range(1..=h * w);
        let got = sample_topk_uncertainty(&u, w, k, &ClickSet::new(), 0);
        if got.points != topk_brute(&u, w, k) || got.flagged {
            mismatches += 1;
        }
        let rescaled: Vec<f64> = u.iter().map(|v| 3.0 * v + 7.0).collect();
        for nms in [0, 2] {
            if sample_topk_uncertainty(&rescaled, w, k, &ClickSet::new(), nms) != sample_topk_uncertainty(&u, w, k, &ClickSet::new(), nms) {
                variant_breaks += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && variant_breaks == 0,
        format!("mismatches vs sort-based top-k {mismatches}/500, monotone-rescale changes {variant_breaks}/1000"),
    )
}

// ---------------------------------------------------------------- trained runs

struct Run {
    seed: u64,
    ceu: bool,
    out: TrainOutcome,
    secs: f64,
}

fn default_dataset(dir: &std::path::Path) -> Dataset {
    let data = generate(&GenConfig::default(), Execution::default()).unwrap();
    let manifest = write_dataset(dir, &data).unwrap();
    read_dataset(&manifest).unwrap()
}

fn config(seed: u64, ceu: bool) -> TrainConfig {
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    cfg.loss.use_ceu = ceu;
    cfg
}

fn train_run(data: &Dataset, seed: u64, ceu: bool) -> Run {
    let t0 = Instant::now();
    let out = train(data, &config(seed, ceu), Execution::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    eprintln!(
        "  trained seed {seed} ceu={ceu} in {secs:.0}s, auroc {:.4}",
        out.record.epochs.last().map_or(f64::NAN, |e| e.auroc)
    );
    Run { seed, ceu, out, secs }
}

fn final_auroc(r: &Run) -> f64 {
    r.out.record.epochs.last().map_or(f64::NAN, |e| e.auroc)
}

fn calibration_efficacy(runs: &[Run]) -> Outcome {
    let on: Vec<f64> = runs.iter().filter(|r| r.ceu).map(final_auroc).collect();
    let off: Vec<f64> = runs.iter().filter(|r| !r.ceu).map(final_auroc).collect();
    let (m_on, m_off) = (median(on.clone()), median(off.clone()));
    let secs: f64 = runs.iter().map(|r| r.secs).sum();
    outcome(
        m_on >= m_off && m_on >= 0.70,
        format!(
            "median auroc ceu on {m_on:.4} >= off {m_off:.4}, on >= 0.70 (on {on:.4?}, off {off:.4?}); \
             runtime {:.1} min on {} thread(s) (target < 30 min)",
            secs / 60.0,
            threads()
        ),
    )
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Per-seed mean validation Dice for each budget, M = 1, evaluation seed = training seed.
fn dice_by_budget(data: &Dataset, runs: &[&Run], sampler: SamplerKind, budgets: &[usize]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); budgets.len()];
    for r in runs {
        let opts = config(r.seed, r.ceu).inference();
        let cells = evaluate(&r.out.model, data, &r.out.split.val, sampler, budgets, &[1], &[r.seed], &opts, Execution::default())
            .unwrap();
        for (slot, cell) in out.iter_mut().zip(&cells) {
            slot.push(cell.dice.0);
        }
    }
    out
}

fn guided_sampling(topk: &[Vec<f64>], random: &[Vec<f64>]) -> Outcome {
    let (t1, r1) = (median(topk[0].clone()), median(random[0].clone()));
    let (t5, r5) = (median(topk[2].clone()), median(random[2].clone()));
    outcome(
        t1 >= r1 && t5 >= r5,
        format!(
            "median dice budget 1: topk {t1:.4} >= random {r1:.4}; budget 5: topk {t5:.4} >= random {r5:.4} (gap {:+.4}); \
             per seed b1 topk {:.4?} random {:.4?}, b5 topk {:.4?} random {:.4?}",
            t5 - r5,
            topk[0],
            random[0],
            topk[2],
            random[2]
        ),
    )
}

fn budget_monotonicity(topk: &[Vec<f64>]) -> Outcome {
    let m: Vec<f64> = topk.iter().map(|v| median(v.clone())).collect();
    outcome(
        m[0] <= m[1] && m[1] <= m[2],
        format!("median dice (topk, M=1) at budgets 1/3/5: {:.4} <= {:.4} <= {:.4}; per seed b3 {:.4?}", m[0], m[1], m[2], topk[1]),
    )
}

fn determinism(data: &Dataset, reference: &Run) -> Outcome {
    let again = train_run(data, reference.seed, reference.ceu);
    let same_weights = again.out.model.export_weights() == reference.out.model.export_weights();
    let same_record = again.out.record.to_log() == reference.out.record.to_log()
        && again.out.record.config_hash == reference.out.record.config_hash;
    outcome(
        same_weights && same_record,
        format!(
            "weight blobs identical: {same_weights}; run records identical (wall clock excluded): {same_record}; {} epochs",
            again.out.record.epochs.len()
        ),
    )
}

fn report(name: &'static str, o: Outcome, results: &mut Vec<(&'static str, Outcome)>) {
    println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    results.push((name, o));
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and filtered runs that exclude us should stay quiet.
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    report("1 gradient suite", gradient_suite(), &mut results);
    report("2 closed-form expected CE", closed_form_oracle(), &mut results);
    report("3 mass conservation", mass_conservation(), &mut results);
    report("4 KL correctness", kl_correctness(), &mut results);
    report("5 metric oracles", metric_oracles(), &mut results);
    report("6 sampler oracle", sampler_oracle(), &mut results);

    let dir = tempfile::tempdir().unwrap();
    let data = default_dataset(dir.path());
    eprintln!("  training {} runs on {} samples", 2 * SEEDS.len() + 1, data.len());
    let mut runs = Vec::new();
    for seed in SEEDS {
        for ceu in [true, false] {
            runs.push(train_run(&data, seed, ceu));
        }
    }
    report("7 calibration efficacy", calibration_efficacy(&runs), &mut results);

    let with_ceu: Vec<&Run> = runs.iter().filter(|r| r.ceu).collect();
    let topk = dice_by_budget(&data, &with_ceu, SamplerKind::TopK, &[1, 3, 5]);
    let random = dice_by_budget(&data, &with_ceu, SamplerKind::RandomError, &[1, 3, 5]);
    report("8 guided sampling", guided_sampling(&topk, &random), &mut results);
    report("9 budget monotonicity", budget_monotonicity(&topk), &mut results);
    report("10 determinism", determinism(&data, with_ceu[0]), &mut results);

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.passed).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Runnable invariant suite: gradient checks, Monte-Carlo and closed-form
//! oracles, and brute-force metric equivalences. Every check reports its
//! measured error next to its tolerance; all randomness is seeded so the
//! report text is identical across runs.

pub mod oracles;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_gradients_with_fault, special, DiffArray, OpKind, Tape};
use crate::error::Result;
use crate::evidential::{evidential_output, EvidenceActivation};
use crate::losses::{bayes_dice, ceu_loss, expected_ce, kl_to_uniform, stage1_total, LabelMap, LossWeights};
use crate::metrics::{auroc, dice, hd95, jaccard, BinaryMask};
use crate::prompts::{sample_topk_uncertainty, ClickSet};

use oracles::{auroc_pairs, digamma_series, hd95_all_pairs, ln_gamma_series, mc_expected_ce, random_mask, topk_sorted};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.measured <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    fn push(&mut self, name: impl Into<String>, measured: f64, tolerance: f64) {
        // A NaN measurement must fail, so map it above any tolerance.
        let measured = if measured.is_nan() { f64::INFINITY } else { measured };
        self.checks.push(Check {
            name: name.into(),
            measured,
            tolerance,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = if c.passed() { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{tag}  {:<34} err={:.3e}  tol={:.1e}", c.name, c.measured, c.tolerance);
        }
        let failed = self.failures().len();
        let _ = writeln!(s, "{} checks, {} failed", self.checks.len(), failed);
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Options {
    /// Sign-flip this op's backward rule in every gradient check.
    pub fault: Option<OpKind>,
}

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
const LOSS_POINTS: usize = 20;

pub fn run(opts: &Options) -> Result<Report> {
    let mut r = Report::default();
    op_gradients(&mut r, opts.fault)?;
    loss_gradients(&mut r, opts.fault, LOSS_POINTS, 17)?;
    special_functions(&mut r);
    expected_ce_oracles(&mut r)?;
    evidential_identities(&mut r)?;
    metric_oracles(&mut r)?;
    sampler_oracle(&mut r);
    Ok(r)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

type ScalarFn = Box<dyn Fn(&Tape, &DiffArray) -> Result<DiffArray>>;

/// One composite per op, each reduced to a scalar through a fixed random
/// weighting so no backward rule can cancel out.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(OpKind, Vec<usize>, Vec<f64>, ScalarFn)> {
    fn weighted(tape: &Tape, y: &DiffArray, w: &[f64]) -> Result<DiffArray> {
        let w = DiffArray::constant(y.shape(), w[..y.len()].to_vec())?;
        Ok(tape.sum(&tape.mul(y, &w)?))
    }
    let w = uniform(rng, 64, -1.0, 1.0);
    let c = uniform(rng, 64, 0.5, 1.5);
    let kernel = DiffArray::constant(&[2, 2, 3, 3], uniform(rng, 36, -1.0, 1.0)).expect("shape");
    let mut cases: Vec<(OpKind, Vec<usize>, Vec<f64>, ScalarFn)> = Vec::new();
    let mut case = |kind, shape: &[usize], point: Vec<f64>, f: ScalarFn| cases.push((kind, shape.to_vec(), point, f));
    let wv = w.clone();
    let cv = c.clone();
    case(OpKind::Add, &[4], uniform(rng, 4, -1.0, 1.0), Box::new(move |t, x| {
        let k = DiffArray::constant(&[4], cv[..4].to_vec())?;
        weighted(t, &t.add(x, &k)?, &wv)
    }));
    let (wv, cv) = (w.clone(), c.clone());
    case(OpKind::Sub, &[4], uniform(rng, 4, -1.0, 1.0), Box::new(move |t, x| {
        let k = DiffArray::constant(&[4], cv[..4].to_vec())?;
        weighted(t, &t.sub(&k, x)?, &wv)
    }));
    let wv = w.clone();
    case(OpKind::Mul, &[4], uniform(rng, 4, -1.0, 1.0), Box::new(move |t, x| weighted(t, &t.mul(x, x)?, &wv)));
    let (wv, cv) = (w.clone(), c.clone());
    case(OpKind::Div, &[4], uniform(rng, 4, 0.5, 2.0), Box::new(move |t, x| {
        let k = DiffArray::constant(&[4], cv[..4].to_vec())?;
        let a = t.div(&k, x)?;
        weighted(t, &t.div(&a, x)?, &wv)
    }));
    let wv = w.clone();
    case(OpKind::Scale, &[4], uniform(rng, 4, -1.0, 1.0), Box::new(move |t, x| weighted(t, &t.scale(x, -1.7), &wv)));
    let wv = w.clone();
    case(OpKind::AddScalar, &[4], uniform(rng, 4, -1.0, 1.0), Box::new(move |t, x| {
        let y = t.add_scalar(x, 0.3);
        weighted(t, &t.mul(&y, &y)?, &wv)
    }));
    let (wv, cv) = (w.clone(), c.clone());
    case(OpKind::MatMul, &[2, 3], uniform(rng, 6, -1.0, 1.0), Box::new(move |t, x| {
        let b = DiffArray::constant(&[3, 2], cv[..6].to_vec())?;
        weighted(t, &t.matmul(x, &b)?, &wv)
    }));
    let wv = w.clone();
    case(OpKind::Conv2d, &[2, 4, 4], uniform(rng, 32, -1.0, 1.0), Box::new(move |t, x| {
        let bias = DiffArray::constant(&[2], vec![0.1, -0.2])?;
        weighted(t, &t.conv2d(x, &kernel, Some(&bias))?, &wv)
    }));
    let wv = w.clone();
    case(OpKind::MaxPool2, &[1, 4, 4], uniform(rng, 16, -1.0, 1.0), Box::new(move |t, x| {
        weighted(t, &t.max_pool2(x)?, &wv)
    }));
    let wv = w.clone();
    case(OpKind::Upsample2, &[1, 2, 2], uniform(rng, 4, -1.0, 1.0), Box::new(move |t, x| {
        weighted(t, &t.upsample2(x)?, &wv)
    }));
    let wv = w.clone();
    case(OpKind::Relu, &[6], vec![-0.9, -0.4, 0.2, 0.5, 0.8, 1.3], Box::new(move |t, x| weighted(t, &t.relu(x), &wv)));
    let wv = w.clone();
    case(OpKind::Softplus, &[4], uniform(rng, 4, -2.0, 2.0), Box::new(move |t, x| weighted(t, &t.softplus(x), &wv)));
    let wv = w.clone();
    case(OpKind::Exp, &[4], uniform(rng, 4, -1.0, 1.0), Box::new(move |t, x| weighted(t, &t.exp(x), &wv)));
    let wv = w.clone();
    case(OpKind::Ln, &[4], uniform(rng, 4, 0.5, 3.0), Box::new(move |t, x| weighted(t, &t.ln(x)?, &wv)));
    let wv = w.clone();
    case(OpKind::LnGamma, &[4], uniform(rng, 4, 0.3, 6.0), Box::new(move |t, x| weighted(t, &t.ln_gamma(x)?, &wv)));
    let wv = w.clone();
    case(OpKind::Digamma, &[4], uniform(rng, 4, 0.3, 6.0), Box::new(move |t, x| weighted(t, &t.digamma(x)?, &wv)));
    case(OpKind::Sum, &[4], uniform(rng, 4, -1.0, 1.0), Box::new(|t, x| {
        let s = t.sum(x);
        t.mul(&s, &s)
    }));
    case(OpKind::Mean, &[4], uniform(rng, 4, -1.0, 1.0), Box::new(|t, x| {
        let m = t.mean(x)?;
        Ok(t.exp(&m))
    }));
    let wv = w.clone();
    case(OpKind::Clamp, &[6], vec![-0.9, -0.1, 0.2, 0.45, 0.8, 1.3], Box::new(move |t, x| {
        weighted(t, &t.clamp(x, 0.0, 1.0), &wv)
    }));
    let wv = w.clone();
    case(OpKind::SumAxis0, &[3, 2], uniform(rng, 6, -1.0, 1.0), Box::new(move |t, x| {
        let s = t.sum_axis0(x)?;
        weighted(t, &t.mul(&s, &s)?, &wv)
    }));
    let wv = w.clone();
    case(OpKind::Broadcast0, &[2], uniform(rng, 2, -1.0, 1.0), Box::new(move |t, x| {
        weighted(t, &t.broadcast0(x, 3), &wv)
    }));
    let wv = w.clone();
    case(OpKind::Select0, &[3, 2], uniform(rng, 6, -1.0, 1.0), Box::new(move |t, x| {
        weighted(t, &t.select0(x, 1)?, &wv)
    }));
    let wv = w;
    case(OpKind::Reshape, &[2, 3], uniform(rng, 6, -1.0, 1.0), Box::new(move |t, x| {
        weighted(t, &t.reshape(x, &[3, 2])?, &wv)
    }));
    cases
}

fn op_gradients(r: &mut Report, fault: Option<OpKind>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (kind, shape, point, f) in op_cases(&mut rng) {
        let err = check_gradients_with_fault(&f, &shape, &point, GRAD_STEP, fault)?;
        r.push(format!("grad/op/{}", kind.name()), err, GRAD_TOL);
    }
    Ok(())
}

pub const LOSS_NAMES: [&str; 5] = ["expected_ce", "ceu_loss", "kl_to_uniform", "bayes_dice", "stage1_total"];

/// Scalar loss of `name` as a function of ReLU logits `[2, 3, 3]`.
pub fn loss_of_logits(name: &str, tape: &Tape, logits: &DiffArray, y: &LabelMap, a_t: f64) -> Result<DiffArray> {
    let w = LossWeights::default();
    let out = evidential_output(tape, logits, EvidenceActivation::Relu)?;
    match name {
        "expected_ce" => expected_ce(tape, &out.dirichlet, y),
        "ceu_loss" => ceu_loss(tape, &out.belief, &out.uncertainty, &out.prob.argmax(), y, a_t),
        "kl_to_uniform" => kl_to_uniform(tape, &out.dirichlet, y),
        "bayes_dice" => bayes_dice(tape, &out.prob, y, &w),
        "stage1_total" => stage1_total(tape, &out, y, a_t, &w),
        other => panic!("unknown loss {other}"),
    }
}

/// Worst relative gradient error of each loss over `points` seeded random
/// inputs with every concentration at least 1.05.
pub fn loss_gradient_errors(points: usize, seed: u64, fault: Option<OpKind>) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = vec![0.0f64; LOSS_NAMES.len()];
    for _ in 0..points {
        let point = uniform(&mut rng, 18, 0.05, 4.0);
        let classes: Vec<usize> = (0..9).map(|_| rng.random_range(0..2)).collect();
        let y = LabelMap::from_classes(&classes, 2, 3, 3)?;
        let a_t = rng.random_range(0.0..1.0);
        for (i, name) in LOSS_NAMES.iter().enumerate() {
            let err = check_gradients_with_fault(
                |t, x| loss_of_logits(name, t, x, &y, a_t),
                &[2, 3, 3],
                &point,
                GRAD_STEP,
                fault,
            )?;
            worst[i] = worst[i].max(err);
        }
    }
    Ok(LOSS_NAMES.iter().copied().zip(worst).collect())
}

fn loss_gradients(r: &mut Report, fault: Option<OpKind>, points: usize, seed: u64) -> Result<()> {
    for (name, err) in loss_gradient_errors(points, seed, fault)? {
        r.push(format!("grad/loss/{name}"), err, GRAD_TOL);
    }
    Ok(())
}

fn special_functions(r: &mut Report) {
    let xs: Vec<f64> = (1..=60).map(|i| 0.05 + 0.25 * i as f64).collect();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    let dg = xs.iter().map(|&x| rel(special::digamma(x), digamma_series(x))).fold(0.0, f64::max);
    r.push("special/digamma_vs_series", dg, 1e-10);
    let lg = xs.iter().map(|&x| rel(special::ln_gamma(x), ln_gamma_series(x))).fold(0.0, f64::max);
    r.push("special/ln_gamma_vs_series", lg, 1e-10);
    r.push("special/psi2_minus_psi1", (special::digamma(2.0) - special::digamma(1.0) - 1.0).abs(), 1e-10);
    r.push("special/psi6_minus_psi4", (special::digamma(6.0) - special::digamma(4.0) - 0.45).abs(), 1e-10);
}

fn single_pixel(tape: &Tape, alpha: &[f64]) -> Result<crate::evidential::EvidentialOutput> {
    let logits = DiffArray::constant(&[alpha.len(), 1, 1], alpha.iter().map(|a| a - 1.0).collect())?;
    evidential_output(tape, &logits, EvidenceActivation::Relu)
}

/// `|closed form - sampled mean| / standard error` for each alpha in the grid.
pub fn expected_ce_mc_scores(draws: usize, seed: u64) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid: [&[f64]; 4] = [&[1.0, 1.0], &[2.0, 4.0], &[5.0, 1.0], &[3.0, 3.0, 3.0]];
    let mut out = Vec::new();
    for alpha in grid {
        let tape = Tape::new();
        let o = single_pixel(&tape, alpha)?;
        let y = LabelMap::from_classes(&[0], alpha.len(), 1, 1)?;
        let closed = expected_ce(&tape, &o.dirichlet, &y)?.item();
        let (mean, se) = mc_expected_ce(alpha, 0, draws, &mut rng);
        out.push((alpha.to_vec(), (closed - mean).abs() / se));
    }
    Ok(out)
}

fn expected_ce_oracles(r: &mut Report) -> Result<()> {
    for (alpha, z) in expected_ce_mc_scores(100_000, 5)? {
        r.push(format!("oracle/expected_ce_mc{alpha:?}"), z, 3.0);
    }
    Ok(())
}

fn evidential_identities(r: &mut Report) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, p) = (3, 20_000);
    let logits = DiffArray::constant(&[n, 1, p], uniform(&mut rng, n * p, -5.0, 50.0))?;
    let tape = Tape::new();
    let o = evidential_output(&tape, &logits, EvidenceActivation::Relu)?;
    let (b, u) = (o.belief.values().data(), o.uncertainty.data());
    let worst = (0..p)
        .map(|j| (u[j] + (0..n).map(|c| b[c * p + j]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    r.push("evidential/mass_conservation", worst, 1e-10);

    let y = LabelMap::from_classes(&[0], 2, 1, 1)?;
    let kl = |alpha: &[f64]| -> Result<f64> {
        let t = Tape::new();
        kl_to_uniform(&t, &single_pixel(&t, alpha)?.dirichlet, &y).map(|v| v.item())
    };
    r.push("oracle/kl_zero_at_uniform", kl(&[7.0, 1.0])?.abs(), 0.0);
    r.push("oracle/kl_ln3_minus_2_3", (kl(&[5.0, 3.0])? - (3f64.ln() - 2.0 / 3.0)).abs(), 1e-10);
    Ok(())
}

fn metric_oracles(r: &mut Report) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut hd_err, mut dj_err, mut auc_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..60 {
        let h = rng.random_range(1..=12);
        let w = rng.random_range(1..=12);
        let pa = rng.random_range(0.0..0.6);
        let pb = rng.random_range(0.0..0.6);
        let a = random_mask(&mut rng, h * w, pa);
        let b = random_mask(&mut rng, h * w, pb);
        let ma = BinaryMask::new(h, w, a.clone())?;
        let mb = BinaryMask::new(h, w, b.clone())?;
        hd_err = hd_err.max((hd95(&ma, &mb)? - hd95_all_pairs(&a, &b, h, w)).abs());
        let d = dice(&ma, &mb)?;
        let j = jaccard(&ma, &mb)?;
        dj_err = dj_err.max((d - 2.0 * j / (1.0 + j)).abs());

        let n = rng.random_range(2..=12);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..5u8)) / 4.0).collect();
        let pos = random_mask(&mut rng, n, 0.5);
        match (auroc(&scores, &pos), auroc_pairs(&scores, &pos)) {
            (Some(x), Some(y)) => auc_err = auc_err.max((x - y).abs()),
            (None, None) => {}
            _ => auc_err = f64::INFINITY,
        }
    }
    r.push("metric/hd95_vs_all_pairs", hd_err, 1e-9);
    r.push("metric/dice_jaccard_identity", dj_err, 1e-12);
    r.push("metric/auroc_vs_pair_count", auc_err, 1e-12);
    Ok(())
}

fn sampler_oracle(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        // Coarse values so ties exercise the (row, col) order.
        let u: Vec<f64> = (0..h * w).map(|_| f64::from(rng.random_range(0..6u8)) / 5.0).collect();
        let k = rng.random_range(1..=h * w);
        let got = sample_topk_uncertainty(&u, w, k, &ClickSet::new(), 0).points;
        if got != topk_sorted(&u, w, k) {
            mismatches += 1;
        }
    }
    r.push("sampler/topk_vs_sort", mismatches as f64, 0.0);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let r = run(&Options::default()).unwrap();
        assert!(r.passed(), "{}", r.render());
        assert_eq!(r.render(), run(&Options::default()).unwrap().render());
    }

    #[test]
    fn every_fault_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = op_cases(&mut rng);
        for kind in OpKind::ALL {
            let mut r = Report::default();
            op_gradients(&mut r, Some(kind)).unwrap();
            let failing: Vec<&str> = r.failures().iter().map(|c| c.name.as_str()).collect();
            assert!(!failing.is_empty(), "fault in {} went unnoticed", kind.name());
        }
        assert_eq!(cases.len(), OpKind::ALL.len());
    }

    #[test]
    fn nan_measurement_fails() {
        let mut r = Report::default();
        r.push("x", f64::NAN, 1.0);
        assert!(!r.passed());
    }
}

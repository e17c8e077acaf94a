//! Training objectives on Dirichlet outputs.
//!
//! Per-pixel terms (`expected_ce`, `ceu_loss`, `kl_to_uniform`) are averaged
//! over pixels so magnitudes do not depend on resolution. The dice term is
//! the aggregate soft dice on the Dirichlet mean, averaged over foreground
//! classes.

use crate::autodiff::{DiffArray, Tape};
use crate::error::{Error, Result};
use crate::evidential::{BeliefMap, DirichletMap, EvidentialOutput, ProbMap, UncertaintyMap, PROB_CLAMP};
use crate::metrics::BinaryMask;

/// One-hot labels `[N, H, W]`; always a constant on the tape.
#[derive(Clone, Debug)]
pub struct LabelMap {
    onehot: DiffArray,
    classes: Vec<usize>,
}

impl LabelMap {
    pub fn from_classes(classes: &[usize], num_classes: usize, height: usize, width: usize) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::InvalidShape {
                op: "label_map",
                detail: format!("{} labels for a {height}x{width} map", classes.len()),
            });
        }
        let plane = height * width;
        let mut onehot = vec![0.0; num_classes * plane];
        for (i, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::InvalidShape {
                    op: "label_map",
                    detail: format!("class {c} out of range for {num_classes} classes"),
                });
            }
            onehot[c * plane + i] = 1.0;
        }
        Ok(LabelMap {
            onehot: DiffArray::constant(&[num_classes, height, width], onehot)?,
            classes: classes.to_vec(),
        })
    }

    /// Two-class labels: background 0, foreground 1.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        let classes: Vec<usize> = mask.data().iter().map(|&b| b as usize).collect();
        Self::from_classes(&classes, 2, mask.height(), mask.width()).expect("mask is consistent")
    }

    pub fn onehot(&self) -> &DiffArray {
        &self.onehot
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.onehot.shape()[0]
    }

    pub fn num_pixels(&self) -> usize {
        self.classes.len()
    }

    /// Indicator of any non-background class per pixel.
    pub fn foreground(&self) -> Vec<f64> {
        self.classes.iter().map(|&c| if c > 0 { 1.0 } else { 0.0 }).collect()
    }

    fn check(&self, op: &'static str, other: &DiffArray) -> Result<()> {
        if self.onehot.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: other.shape().to_vec(),
                right: self.onehot.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn plane(&self, class: usize) -> DiffArray {
        let plane = self.classes.len();
        let (h, w) = (self.onehot.shape()[1], self.onehot.shape()[2]);
        DiffArray::constant(&[h, w], self.onehot.data()[class * plane..(class + 1) * plane].to_vec())
            .expect("plane of a valid map")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AnnealSchedule {
    /// `alpha0 * exp(-t / T)`
    #[default]
    AsWrittenDecay,
    /// `alpha0 * (1 - exp(-t / T)) / (1 - exp(-1))`, clamped to `[0, alpha0]`
    ReversedGrowth,
}

impl AnnealSchedule {
    pub fn name(self) -> &'static str {
        match self {
            AnnealSchedule::AsWrittenDecay => "decay",
            AnnealSchedule::ReversedGrowth => "growth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "decay" => Some(AnnealSchedule::AsWrittenDecay),
            "growth" => Some(AnnealSchedule::ReversedGrowth),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealConfig {
    pub alpha0: f64,
    pub total_epochs: usize,
    pub schedule: AnnealSchedule,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            alpha0: 1.0,
            total_epochs: 100,
            schedule: AnnealSchedule::AsWrittenDecay,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            return Err(Error::Config(format!("anneal.alpha0 must be in (0, 1], got {}", self.alpha0)));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("anneal total epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// CEU trade-off weight at epoch `t`.
pub fn annealing_factor(t: usize, cfg: &AnnealConfig) -> f64 {
    let ratio = t as f64 / cfg.total_epochs as f64;
    match cfg.schedule {
        AnnealSchedule::AsWrittenDecay => cfg.alpha0 * (-ratio).exp(),
        AnnealSchedule::ReversedGrowth => {
            let v = cfg.alpha0 * (1.0 - (-ratio).exp()) / (1.0 - (-1.0f64).exp());
            v.clamp(0.0, cfg.alpha0)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DiceMode {
    /// `1 - (2 sum(y p) + b1) / (sum(y) + sum(p) + b2)`
    #[default]
    Aggregate,
    /// `1 - sum_pixels (2 y p + b1) / (y + p + b2)`, for ablation only.
    LiteralPerPixel,
}

impl DiceMode {
    pub fn name(self) -> &'static str {
        match self {
            DiceMode::Aggregate => "aggregate",
            DiceMode::LiteralPerPixel => "literal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "aggregate" => Some(DiceMode::Aggregate),
            "literal" => Some(DiceMode::LiteralPerPixel),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub dice_mode: DiceMode,
    /// Include the calibration term; off for the CEU ablation.
    pub use_ceu: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.2,
            lambda2: 1.0,
            beta1: 1e-5,
            beta2: 1e-5,
            dice_mode: DiceMode::Aggregate,
            use_ceu: true,
        }
    }
}

/// How the stage-II objective folds the per-iteration segmentation losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stage2SegMode {
    /// `(sum_m L_seg_m + evidential) / M`
    #[default]
    SumOverIterations,
    /// `(M * L_seg_M + evidential) / M`, using only the final iteration.
    FinalTimesM,
}

impl Stage2SegMode {
    pub fn name(self) -> &'static str {
        match self {
            Stage2SegMode::SumOverIterations => "sum",
            Stage2SegMode::FinalTimesM => "final",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sum" => Some(Stage2SegMode::SumOverIterations),
            "final" => Some(Stage2SegMode::FinalTimesM),
            _ => None,
        }
    }
}

fn pixel_mean(tape: &Tape, per_pixel: &DiffArray) -> Result<DiffArray> {
    tape.mean(per_pixel)
}

/// Closed-form Dirichlet expectation of the cross-entropy:
/// mean over pixels of `sum_n y_n (psi(S) - psi(alpha_n))`.
pub fn expected_ce(tape: &Tape, d: &DirichletMap, y: &LabelMap) -> Result<DiffArray> {
    y.check("expected_ce", d.alpha())?;
    let psi_s = tape.digamma(d.strength())?;
    let psi_a = tape.digamma(d.alpha())?;
    let picked = tape.sum_axis0(&tape.mul(y.onehot(), &psi_a)?)?;
    pixel_mean(tape, &tape.sub(&psi_s, &picked)?)
}

/// Calibration loss rewarding confidence on correct pixels and uncertainty
/// on incorrect ones, traded off by `a_t`. The correctness mask is a constant.
pub fn ceu_loss(
    tape: &Tape,
    b: &BeliefMap,
    u: &UncertaintyMap,
    pred: &[usize],
    y: &LabelMap,
    a_t: f64,
) -> Result<DiffArray> {
    y.check("ceu_loss", b.values())?;
    if pred.len() != y.num_pixels() {
        return Err(Error::InvalidShape {
            op: "ceu_loss",
            detail: format!("{} predictions for {} pixels", pred.len(), y.num_pixels()),
        });
    }
    let shape = u.values().shape().to_vec();
    let correct: Vec<f64> = pred
        .iter()
        .zip(y.classes())
        .map(|(p, t)| if p == t { 1.0 } else { 0.0 })
        .collect();
    let incorrect: Vec<f64> = correct.iter().map(|c| 1.0 - c).collect();
    let correct = DiffArray::constant(&shape, correct)?;
    let incorrect = DiffArray::constant(&shape, incorrect)?;

    let u_c = tape.clamp(u.values(), PROB_CLAMP.0, PROB_CLAMP.1);
    let log_certain = tape.ln(&tape.one_minus(&u_c))?;
    let log_uncertain = tape.ln(&u_c)?;
    let belief_sum = tape.sum_axis0(b.values())?;
    let disbelief_sum = tape.sum_axis0(&tape.one_minus(b.values()))?;

    let certain_term = tape.mul(&tape.mul(&correct, &belief_sum)?, &log_certain)?;
    let uncertain_term = tape.mul(&tape.mul(&incorrect, &disbelief_sum)?, &log_uncertain)?;
    let combined = tape.add(&tape.scale(&certain_term, a_t), &tape.scale(&uncertain_term, 1.0 - a_t))?;
    Ok(tape.scale(&pixel_mean(tape, &combined)?, -1.0))
}

/// KL divergence from Dir(alpha~) to the uniform Dirichlet, where
/// `alpha~ = y + (1 - y) * alpha` removes the label class's evidence.
pub fn kl_to_uniform(tape: &Tape, d: &DirichletMap, y: &LabelMap) -> Result<DiffArray> {
    y.check("kl_to_uniform", d.alpha())?;
    let n = d.num_classes();
    let keep = DiffArray::constant(y.onehot().shape(), y.onehot().data().iter().map(|v| 1.0 - v).collect())?;
    let adjusted = tape.add(&tape.mul(&keep, d.alpha())?, y.onehot())?;
    let adj_strength = tape.sum_axis0(&adjusted)?;

    let ln_norm = tape.sub(
        &tape.add_scalar(&tape.ln_gamma(&adj_strength)?, -crate::autodiff::special::ln_gamma(n as f64)),
        &tape.sum_axis0(&tape.ln_gamma(&adjusted)?)?,
    )?;
    let psi_gap = tape.sub(
        &tape.digamma(&adjusted)?,
        &tape.broadcast0(&tape.digamma(&adj_strength)?, n),
    )?;
    let weighted = tape.sum_axis0(&tape.mul(&tape.add_scalar(&adjusted, -1.0), &psi_gap)?)?;
    pixel_mean(tape, &tape.add(&ln_norm, &weighted)?)
}

/// Soft dice on Dirichlet-mean probabilities, averaged over foreground classes.
pub fn bayes_dice(tape: &Tape, p: &ProbMap, y: &LabelMap, w: &LossWeights) -> Result<DiffArray> {
    y.check("bayes_dice", p.values())?;
    let n = p.num_classes();
    if n < 2 {
        return Err(Error::InvalidShape {
            op: "bayes_dice",
            detail: "needs at least one foreground class".into(),
        });
    }
    let mut total: Option<DiffArray> = None;
    for class in 1..n {
        let pc = tape.select0(p.values(), class)?;
        let yc = y.plane(class);
        let loss = match w.dice_mode {
            DiceMode::Aggregate => {
                let inter = tape.sum(&tape.mul(&yc, &pc)?);
                let numer = tape.add_scalar(&tape.scale(&inter, 2.0), w.beta1);
                let y_sum: f64 = yc.data().iter().sum();
                let denom = tape.add_scalar(&tape.sum(&pc), y_sum + w.beta2);
                tape.one_minus(&tape.div(&numer, &denom)?)
            }
            DiceMode::LiteralPerPixel => {
                let numer = tape.add_scalar(&tape.scale(&tape.mul(&yc, &pc)?, 2.0), w.beta1);
                let denom = tape.add_scalar(&tape.add(&yc, &pc)?, w.beta2);
                tape.one_minus(&tape.sum(&tape.div(&numer, &denom)?))
            }
        };
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(&t, &loss)?,
        });
    }
    Ok(tape.scale(&total.expect("n >= 2"), 1.0 / (n - 1) as f64))
}

/// The four evidential terms for one head, kept separate for logging.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub ce: DiffArray,
    pub ceu: DiffArray,
    pub kl: DiffArray,
    pub dice: DiffArray,
}

impl LossParts {
    pub fn compute(tape: &Tape, out: &EvidentialOutput, y: &LabelMap, a_t: f64, w: &LossWeights) -> Result<Self> {
        let pred = out.prob.argmax();
        Ok(LossParts {
            ce: expected_ce(tape, &out.dirichlet, y)?,
            ceu: ceu_loss(tape, &out.belief, &out.uncertainty, &pred, y, a_t)?,
            kl: kl_to_uniform(tape, &out.dirichlet, y)?,
            dice: bayes_dice(tape, &out.prob, y, w)?,
        })
    }

    /// `ce + ceu + lambda1 kl` (the CEU term dropped when disabled).
    pub fn evidential(&self, tape: &Tape, w: &LossWeights) -> Result<DiffArray> {
        let mut acc = tape.add(&self.ce, &tape.scale(&self.kl, w.lambda1))?;
        if w.use_ceu {
            acc = tape.add(&acc, &self.ceu)?;
        }
        Ok(acc)
    }

    /// Stage-I objective `ce + ceu + lambda1 kl + lambda2 dice`.
    pub fn stage1(&self, tape: &Tape, w: &LossWeights) -> Result<DiffArray> {
        tape.add(&self.evidential(tape, w)?, &tape.scale(&self.dice, w.lambda2))
    }
}

pub fn stage1_total(tape: &Tape, out: &EvidentialOutput, y: &LabelMap, a_t: f64, w: &LossWeights) -> Result<DiffArray> {
    LossParts::compute(tape, out, y, a_t, w)?.stage1(tape, w)
}

/// Index of the head whose foreground map has the lowest MSE against the
/// labels (first index on ties), plus every head's MSE.
pub fn confidence_select(heads: &[ProbMap], y: &LabelMap) -> (usize, Vec<f64>) {
    let target = y.foreground();
    let mses: Vec<f64> = heads
        .iter()
        .map(|h| {
            let fg = h.foreground();
            fg.iter().zip(&target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / target.len() as f64
        })
        .collect();
    let mut best = 0;
    for (i, &m) in mses.iter().enumerate() {
        if m < mses[best] {
            best = i;
        }
    }
    (best, mses)
}

/// Stage-II objective from per-iteration dice losses and the final
/// iteration's evidential terms.
pub fn stage2_from_parts(
    tape: &Tape,
    seg_losses: &[DiffArray],
    parts: &LossParts,
    w: &LossWeights,
    mode: Stage2SegMode,
) -> Result<DiffArray> {
    let m = seg_losses.len();
    if m == 0 {
        return Err(Error::InvalidShape {
            op: "stage2_total",
            detail: "needs at least one iteration".into(),
        });
    }
    let seg = match mode {
        Stage2SegMode::SumOverIterations => {
            let mut acc = seg_losses[0].clone();
            for l in &seg_losses[1..] {
                acc = tape.add(&acc, l)?;
            }
            acc
        }
        Stage2SegMode::FinalTimesM => tape.scale(&seg_losses[m - 1], m as f64),
    };
    let total = tape.add(&seg, &parts.evidential(tape, w)?)?;
    Ok(tape.scale(&total, 1.0 / m as f64))
}

pub fn stage2_total(
    tape: &Tape,
    seg_losses: &[DiffArray],
    out: &EvidentialOutput,
    y: &LabelMap,
    a_t: f64,
    w: &LossWeights,
    mode: Stage2SegMode,
) -> Result<DiffArray> {
    let parts = LossParts::compute(tape, out, y, a_t, w)?;
    stage2_from_parts(tape, seg_losses, &parts, w, mode)
}

//! Two-stage training and interactive evaluation.
//!
//! Stage I trains the network with empty click channels on the evidential
//! objective and yields one uncertainty map per training sample. Stage II
//! trains with simulated clicks drawn from those maps over `M` iterations
//! per sample; after each epoch the weights are copied into the stage-I view,
//! which regenerates the maps for the next epoch.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{DiffArray, Tape};
use crate::error::{Error, Result};
use crate::evidential::{evidential_output, EvidentialOutput, ProbMap};
use crate::exec::Execution;
use crate::losses::{
    annealing_factor, bayes_dice, confidence_select, stage2_from_parts, AnnealConfig, AnnealSchedule, LabelMap,
    LossParts, LossWeights, Stage2SegMode,
};
use crate::metrics::{auroc_uncertainty_error, mean_std, seg_scores, BinaryMask, MetricsReport};
use crate::model::{AdamW, ClickPyramid, SegModel, SegModelConfig};
use crate::prompts::{assign_polarity, rasterize, sample_clicks, ClickSet, SampleInput, SamplerKind, DEFAULT_SIGMA};
use crate::synthdata::{Dataset, Sample};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Click iterations `M` per sample in stage II.
    pub iterations: usize,
    /// Clicks `k` sampled per iteration.
    pub clicks_per_iter: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub alpha0: f64,
    pub anneal_schedule: AnnealSchedule,
    pub loss: LossWeights,
    pub sampler: SamplerKind,
    pub nms_radius: usize,
    pub click_sigma: f64,
    pub stage2_seg: Stage2SegMode,
    /// Re-derive the click map from the current prediction inside the
    /// `M`-iteration loop instead of freezing it for the epoch.
    pub refresh_in_loop: bool,
    pub model: SegModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_stage1: 50,
            epochs_stage2: 50,
            iterations: 3,
            clicks_per_iter: 1,
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 4,
            seed: 0,
            val_fraction: 0.2,
            alpha0: 1.0,
            anneal_schedule: AnnealSchedule::AsWrittenDecay,
            loss: LossWeights::default(),
            sampler: SamplerKind::TopK,
            nms_radius: 2,
            click_sigma: DEFAULT_SIGMA,
            stage2_seg: Stage2SegMode::SumOverIterations,
            refresh_in_loop: false,
            model: SegModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs_stage1 == 0 && self.epochs_stage2 == 0 {
            return bad("at least one training epoch is required".into());
        }
        if self.iterations == 0 || self.clicks_per_iter == 0 || self.batch_size == 0 {
            return bad("train.iterations, train.clicks_per_iter and train.batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad(format!("bad optimizer settings lr={} weight_decay={}", self.lr, self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("train.val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if !(self.click_sigma > 0.0) {
            return bad(format!("train.click_sigma must be positive, got {}", self.click_sigma));
        }
        if self.loss.lambda1 < 0.0 || self.loss.lambda2 < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        self.anneal().validate()?;
        self.model.validate()
    }

    /// The annealing index runs across both stages, so `T` is the total epoch count.
    pub fn anneal(&self) -> AnnealConfig {
        AnnealConfig {
            alpha0: self.alpha0,
            total_epochs: (self.epochs_stage1 + self.epochs_stage2).max(1),
            schedule: self.anneal_schedule,
        }
    }

    pub fn model_config(&self) -> SegModelConfig {
        SegModelConfig {
            seed: self.seed,
            ..self.model
        }
    }

    pub fn inference(&self) -> InferenceOptions {
        InferenceOptions {
            nms_radius: self.nms_radius,
            sigma: self.click_sigma,
        }
    }
}

/// Per-epoch training losses (means over training samples) and validation metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_ceu: f64,
    pub loss_kl: f64,
    pub loss_dice: f64,
    pub val_dice: f64,
    pub val_jaccard: f64,
    pub val_hd95: f64,
    pub auroc: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} loss_ce={} loss_ceu={} loss_kl={} loss_dice={} val_dice={} val_jaccard={} val_hd95={} auroc={}",
            self.epoch,
            self.loss_ce,
            self.loss_ceu,
            self.loss_kl,
            self.loss_dice,
            self.val_dice,
            self.val_jaccard,
            self.val_hd95,
            self.auroc
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut r = EpochRecord {
            epoch: 0,
            loss_ce: f64::NAN,
            loss_ceu: f64::NAN,
            loss_kl: f64::NAN,
            loss_dice: f64::NAN,
            val_dice: f64::NAN,
            val_jaccard: f64::NAN,
            val_hd95: f64::NAN,
            auroc: f64::NAN,
        };
        let bad = |t: &str| Error::Config(format!("bad run record field {t:?}"));
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(tok))?;
            if k == "epoch" {
                r.epoch = v.parse().map_err(|_| bad(tok))?;
                continue;
            }
            let v: f64 = v.parse().map_err(|_| bad(tok))?;
            match k {
                "loss_ce" => r.loss_ce = v,
                "loss_ceu" => r.loss_ceu = v,
                "loss_kl" => r.loss_kl = v,
                "loss_dice" => r.loss_dice = v,
                "val_dice" => r.val_dice = v,
                "val_jaccard" => r.val_jaccard = v,
                "val_hd95" => r.val_hd95 = v,
                "auroc" => r.auroc = v,
                _ => return Err(bad(tok)),
            }
        }
        Ok(r)
    }

    /// `ce + ceu + lambda1 kl + lambda2 dice` from the logged parts.
    pub fn stage1_total(&self, w: &LossWeights) -> f64 {
        let ceu = if w.use_ceu { self.loss_ceu } else { 0.0 };
        self.loss_ce + ceu + w.lambda1 * self.loss_kl + w.lambda2 * self.loss_dice
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub config_hash: String,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// One line per epoch. Wall-clock time is kept out so logs of identical
    /// runs are byte-identical; see [`RunRecord::meta`].
    pub fn to_log(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&e.to_line());
            s.push('\n');
        }
        s
    }

    pub fn meta(&self) -> String {
        format!("config_hash={}\nwall_clock_secs={:.3}\n", self.config_hash, self.wall_clock_secs)
    }

    pub fn parse_log(text: &str) -> Result<Vec<EpochRecord>> {
        text.lines().filter(|l| !l.trim().is_empty()).map(EpochRecord::parse).collect()
    }
}

pub fn config_hash(dump: &str) -> String {
    Sha256::digest(dump.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_CLICKS: u64 = 3;
const STREAM_EVAL: u64 = 4;

fn rng_for(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) ^ index);
    rng
}

/// Click-sampling stream used when evaluating sample `index` under `seed`.
pub fn eval_rng(seed: u64, index: usize) -> ChaCha8Rng {
    rng_for(seed, STREAM_EVAL, index as u64)
}

/// Seeded shuffle, then the first `round(n * val_fraction)` indices (at least
/// one when `n >= 2` and the fraction is positive) become validation.
pub fn split_indices(n: usize, seed: u64, val_fraction: f64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, STREAM_SPLIT, 0));
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    Split { train, val }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceOptions {
    pub nms_radius: usize,
    pub sigma: f64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            nms_radius: 2,
            sigma: DEFAULT_SIGMA,
        }
    }
}

/// Head with the lowest mean uncertainty (first on ties); used whenever no
/// ground truth is available to pick a head.
pub fn inference_head(outputs: &[EvidentialOutput]) -> usize {
    let mut best = 0;
    let mut best_u = f64::INFINITY;
    for (i, o) in outputs.iter().enumerate() {
        let m = o.uncertainty.mean();
        if m < best_u {
            best = i;
            best_u = m;
        }
    }
    best
}

fn prob_to_mask(p: &ProbMap, height: usize, width: usize) -> BinaryMask {
    BinaryMask::from_classes(height, width, &p.argmax()).expect("prob map matches sample")
}

/// What the stage-I view says about one image without clicks.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyView {
    pub head: usize,
    pub uncertainty: Vec<f64>,
    pub pred: BinaryMask,
}

pub fn zero_click_view(model: &SegModel, sample: &Sample) -> Result<UncertaintyView> {
    let zeros = DiffArray::zeros(&[2, sample.height, sample.width]);
    let outs = model.predict(&sample.image_array(), &zeros)?;
    let head = inference_head(&outs);
    Ok(UncertaintyView {
        head,
        uncertainty: outs[head].uncertainty.data().to_vec(),
        pred: prob_to_mask(&outs[head].prob, sample.height, sample.width),
    })
}

pub fn uncertainty_views(
    model: &SegModel,
    data: &Dataset,
    indices: &[usize],
    exec: Execution,
) -> Result<Vec<UncertaintyView>> {
    exec.map(indices, |&i| zero_click_view(model, &data.samples[i]))
        .into_iter()
        .collect()
}

/// Final state of one simulated interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub pred: BinaryMask,
    pub clicks: ClickSet,
    /// Per-iteration clicks in acquisition order.
    pub rounds: Vec<ClickSet>,
    pub shortfall: bool,
}

/// Clicks `budget` pixels per iteration for `iterations` rounds. Click
/// positions for the top-k sampler come from the zero-click uncertainty map,
/// held fixed across rounds; the random-error sampler looks at the previous
/// round's prediction. `budget == 0` is a plain forward pass without clicks.
#[allow(clippy::too_many_arguments)]
pub fn interactive_predict(
    model: &SegModel,
    sample: &Sample,
    view: &UncertaintyView,
    sampler: SamplerKind,
    budget: usize,
    iterations: usize,
    opts: &InferenceOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Interaction> {
    let mut out = Interaction {
        pred: view.pred.clone(),
        clicks: ClickSet::new(),
        rounds: Vec::new(),
        shortfall: false,
    };
    if budget == 0 || iterations == 0 {
        return Ok(out);
    }
    let (h, w) = (sample.height, sample.width);
    let tape = Tape::new();
    let params = model.bind_frozen();
    let feats = model.encode(&tape, &params, &sample.image_array())?;
    for _ in 0..iterations {
        let sel = sample_clicks(
            sampler,
            &SampleInput {
                uncertainty: &view.uncertainty,
                pred: &out.pred,
                gt: &sample.mask,
                exclude: &out.clicks,
            },
            budget,
            opts.nms_radius,
            rng,
        );
        out.shortfall |= sel.flagged && sampler != SamplerKind::RandomError;
        let round = assign_polarity(&sel.points, &sample.mask);
        out.clicks.extend(&round);
        out.rounds.push(round);
        let pyramid = ClickPyramid::new(&rasterize(&out.clicks, h, w, opts.sigma)?, model.config().depth)?;
        let logits = model.decode(&tape, &params, &feats, &pyramid)?;
        let outs: Vec<EvidentialOutput> = logits
            .iter()
            .map(|l| evidential_output(&tape, l, model.config().activation))
            .collect::<Result<_>>()?;
        let head = inference_head(&outs);
        out.pred = prob_to_mask(&outs[head].prob, h, w);
    }
    Ok(out)
}

/// Dice/Jaccard/HD95 after interaction plus zero-click uncertainty AUROC for
/// each sample in `indices`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_indices(
    model: &SegModel,
    data: &Dataset,
    indices: &[usize],
    sampler: SamplerKind,
    budget: usize,
    iterations: usize,
    seed: u64,
    opts: &InferenceOptions,
    exec: Execution,
) -> Result<MetricsReport> {
    let results = exec.map(indices, |&i| -> Result<_> {
        let s = &data.samples[i];
        let view = zero_click_view(model, s)?;
        let auroc = auroc_uncertainty_error(&view.uncertainty, &view.pred, &s.mask)?;
        let mut rng = eval_rng(seed, i);
        let inter = interactive_predict(model, s, &view, sampler, budget, iterations, opts, &mut rng)?;
        Ok((seg_scores(&inter.pred, &s.mask)?, auroc))
    });
    let mut scores = Vec::with_capacity(indices.len());
    let mut aurocs = Vec::with_capacity(indices.len());
    for r in results {
        let (s, a) = r?;
        scores.push(s);
        aurocs.push(a);
    }
    Ok(MetricsReport::from_samples(scores, aurocs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCell {
    pub sampler: SamplerKind,
    pub budget: usize,
    pub iterations: usize,
    pub dice: (f64, f64),
    pub jaccard: (f64, f64),
    pub hd95: (f64, f64),
    /// One report per evaluation seed.
    pub per_seed: Vec<MetricsReport>,
}

impl EvalCell {
    pub fn dice_median(&self) -> f64 {
        let mut v: Vec<f64> = self.per_seed.iter().map(|r| r.dice).collect();
        crate::metrics::percentile(&mut v, 50.0)
    }
}

/// Every (budget, iterations) cell; mean and standard deviation are taken
/// across seeds of the per-seed means over `indices`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &SegModel,
    data: &Dataset,
    indices: &[usize],
    sampler: SamplerKind,
    budgets: &[usize],
    iterations: &[usize],
    seeds: &[u64],
    opts: &InferenceOptions,
    exec: Execution,
) -> Result<Vec<EvalCell>> {
    if budgets.is_empty() || iterations.is_empty() || seeds.is_empty() {
        return Err(Error::Config("evaluation needs budgets, iterations and seeds".into()));
    }
    let mut cells = Vec::new();
    for &budget in budgets {
        for &m in iterations {
            let per_seed = seeds
                .iter()
                .map(|&seed| evaluate_indices(model, data, indices, sampler, budget, m, seed, opts, exec))
                .collect::<Result<Vec<_>>>()?;
            let stat = |f: fn(&MetricsReport) -> f64| mean_std(&per_seed.iter().map(f).collect::<Vec<_>>());
            cells.push(EvalCell {
                sampler,
                budget,
                iterations: m,
                dice: stat(|r| r.dice),
                jaccard: stat(|r| r.jaccard),
                hd95: stat(|r| r.hd95),
                per_seed,
            });
        }
    }
    Ok(cells)
}

struct SampleStep {
    parts: [f64; 4],
    total: f64,
    grads: Vec<Vec<f64>>,
}

fn mean_over_heads(tape: &Tape, values: &[DiffArray]) -> Result<DiffArray> {
    let mut acc = values[0].clone();
    for v in &values[1..] {
        acc = tape.add(&acc, v)?;
    }
    Ok(tape.scale(&acc, 1.0 / values.len() as f64))
}

fn parts_values(parts: &[LossParts]) -> [f64; 4] {
    let n = parts.len() as f64;
    let mut out = [0.0; 4];
    for p in parts {
        out[0] += p.ce.item() / n;
        out[1] += p.ceu.item() / n;
        out[2] += p.kl.item() / n;
        out[3] += p.dice.item() / n;
    }
    out
}

/// Stage-I objective for one sample: the mean over heads of the stage-I total.
fn stage1_step(model: &SegModel, sample: &Sample, a_t: f64, w: &LossWeights) -> Result<SampleStep> {
    let tape = Tape::new();
    let params = model.bind(&tape);
    let y = LabelMap::from_mask(&sample.mask);
    let zeros = DiffArray::zeros(&[2, sample.height, sample.width]);
    let logits = model.forward(&tape, &params, &sample.image_array(), &zeros)?;
    let mut parts = Vec::with_capacity(logits.len());
    let mut totals = Vec::with_capacity(logits.len());
    for l in &logits {
        let out = evidential_output(&tape, l, model.config().activation)?;
        let p = LossParts::compute(&tape, &out, &y, a_t, w)?;
        totals.push(p.stage1(&tape, w)?);
        parts.push(p);
    }
    let loss = mean_over_heads(&tape, &totals)?;
    let grads = params.gradients(&tape.backward(&loss)?);
    Ok(SampleStep {
        parts: parts_values(&parts),
        total: loss.item(),
        grads,
    })
}

/// Stage-II objective for one sample. The encoder runs once; each of the `M`
/// iterations adds clicks, re-runs the decoder and scores the head chosen by
/// [`confidence_select`].
fn stage2_step(
    model: &SegModel,
    sample: &Sample,
    view: &UncertaintyView,
    a_t: f64,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(SampleStep, Vec<ClickSet>)> {
    let (h, w) = (sample.height, sample.width);
    let tape = Tape::new();
    let params = model.bind(&tape);
    let y = LabelMap::from_mask(&sample.mask);
    let feats = model.encode(&tape, &params, &sample.image_array())?;
    let mut clicks = ClickSet::new();
    let mut rounds = Vec::with_capacity(cfg.iterations);
    let mut seg_losses = Vec::with_capacity(cfg.iterations);
    let mut click_map = view.uncertainty.clone();
    let mut pred = view.pred.clone();
    let mut last: Option<EvidentialOutput> = None;
    for _ in 0..cfg.iterations {
        let sel = sample_clicks(
            cfg.sampler,
            &SampleInput {
                uncertainty: &click_map,
                pred: &pred,
                gt: &sample.mask,
                exclude: &clicks,
            },
            cfg.clicks_per_iter,
            cfg.nms_radius,
            rng,
        );
        let round = assign_polarity(&sel.points, &sample.mask);
        clicks.extend(&round);
        rounds.push(round);
        let pyramid = ClickPyramid::new(&rasterize(&clicks, h, w, cfg.click_sigma)?, model.config().depth)?;
        let logits = model.decode(&tape, &params, &feats, &pyramid)?;
        let outs: Vec<EvidentialOutput> = logits
            .iter()
            .map(|l| evidential_output(&tape, l, model.config().activation))
            .collect::<Result<_>>()?;
        let probs: Vec<ProbMap> = outs.iter().map(|o| o.prob.clone()).collect();
        let (best, _) = confidence_select(&probs, &y);
        seg_losses.push(bayes_dice(&tape, &outs[best].prob, &y, &cfg.loss)?);
        pred = prob_to_mask(&outs[best].prob, h, w);
        if cfg.refresh_in_loop {
            click_map = outs[best].uncertainty.data().to_vec();
        }
        last = Some(outs.into_iter().nth(best).expect("selected head exists"));
    }
    let last = last.expect("iterations >= 1");
    let parts = LossParts::compute(&tape, &last, &y, a_t, &cfg.loss)?;
    let loss = stage2_from_parts(&tape, &seg_losses, &parts, &cfg.loss, cfg.stage2_seg)?;
    let grads = params.gradients(&tape.backward(&loss)?);
    let seg_mean = seg_losses.iter().map(|s| s.item()).sum::<f64>() / seg_losses.len() as f64;
    let mut values = parts_values(std::slice::from_ref(&parts));
    values[3] = seg_mean;
    Ok((
        SampleStep {
            parts: values,
            total: loss.item(),
            grads,
        },
        rounds,
    ))
}

fn stage1_steps(
    model: &SegModel,
    samples: &[&Sample],
    a_t: f64,
    w: &LossWeights,
    exec: Execution,
) -> Result<Vec<SampleStep>> {
    exec.map(samples, |s| stage1_step(model, s, a_t, w)).into_iter().collect()
}

/// Mean stage-I loss of a batch and its parameter gradients. Per-sample
/// gradients may be computed in parallel but are always reduced in sample
/// order, so the result does not depend on the schedule.
pub fn stage1_batch_gradients(
    model: &SegModel,
    samples: &[&Sample],
    a_t: f64,
    w: &LossWeights,
    exec: Execution,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if samples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let steps = stage1_steps(model, samples, a_t, w, exec)?;
    let loss = steps.iter().map(|s| s.total).sum::<f64>() / steps.len() as f64;
    Ok((loss, average_grads(&steps)))
}

/// Sums per-sample gradients in sample order and averages them.
fn average_grads(steps: &[SampleStep]) -> Vec<Vec<f64>> {
    let mut acc = steps[0].grads.clone();
    for s in &steps[1..] {
        for (a, g) in acc.iter_mut().zip(&s.grads) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    let inv = 1.0 / steps.len() as f64;
    for a in &mut acc {
        for x in a.iter_mut() {
            *x *= inv;
        }
    }
    acc
}

/// Progress callback: receives each finished epoch.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord);

pub struct Trainer<'a> {
    pub data: &'a Dataset,
    pub cfg: &'a TrainConfig,
    pub exec: Execution,
    pub config_hash: String,
    pub hook: Option<EpochHook<'a>>,
}

/// Output of stage I.
#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub model: SegModel,
    pub split: Split,
    /// One per training sample, in `split.train` order.
    pub views: Vec<UncertaintyView>,
    pub record: RunRecord,
}

impl Stage1Outcome {
    /// Resumes from saved stage-I weights, recomputing the split and maps.
    pub fn from_model(model: SegModel, data: &Dataset, cfg: &TrainConfig, exec: Execution) -> Result<Self> {
        let split = split_indices(data.len(), cfg.seed, cfg.val_fraction);
        let views = uncertainty_views(&model, data, &split.train, exec)?;
        Ok(Stage1Outcome {
            model,
            split,
            views,
            record: RunRecord::default(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SegModel,
    pub split: Split,
    pub views: Vec<UncertaintyView>,
    pub record: RunRecord,
    /// Clicks of the last stage-II epoch, per training sample and iteration.
    pub last_epoch_clicks: Vec<Vec<ClickSet>>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, cfg: &'a TrainConfig, exec: Execution) -> Self {
        Trainer {
            data,
            cfg,
            exec,
            config_hash: String::new(),
            hook: None,
        }
    }

    fn finish_epoch(&mut self, record: &mut RunRecord, e: EpochRecord) {
        if let Some(h) = self.hook.as_mut() {
            h(&e);
        }
        record.epochs.push(e);
    }

    fn validate_epoch(&self, model: &SegModel, split: &Split, interactive: bool) -> Result<MetricsReport> {
        if split.val.is_empty() {
            return Ok(MetricsReport {
                dice: f64::NAN,
                jaccard: f64::NAN,
                hd95: f64::NAN,
                auroc: f64::NAN,
                ..MetricsReport::default()
            });
        }
        let (budget, m) = if interactive {
            (self.cfg.clicks_per_iter, self.cfg.iterations)
        } else {
            (0, 0)
        };
        evaluate_indices(
            model,
            self.data,
            &split.val,
            self.cfg.sampler,
            budget,
            m,
            self.cfg.seed,
            &self.cfg.inference(),
            self.exec,
        )
    }

    fn epoch_record(epoch: usize, steps_parts: &[[f64; 4]], val: &MetricsReport) -> EpochRecord {
        let n = steps_parts.len() as f64;
        let mean = |i: usize| steps_parts.iter().map(|p| p[i]).sum::<f64>() / n;
        EpochRecord {
            epoch,
            loss_ce: mean(0),
            loss_ceu: mean(1),
            loss_kl: mean(2),
            loss_dice: mean(3),
            val_dice: val.dice,
            val_jaccard: val.jaccard,
            val_hd95: val.hd95,
            auroc: val.auroc,
        }
    }

    fn epoch_order(&self, split: &Split, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut rng_for(self.cfg.seed, STREAM_SHUFFLE, epoch as u64));
        order
    }

    fn check_finite(steps: &[SampleStep], epoch: usize, batch: usize) -> Result<()> {
        if steps.iter().any(|s| !s.total.is_finite() || s.grads.iter().flatten().any(|g| !g.is_finite())) {
            return Err(Error::NonFiniteLoss { epoch, batch });
        }
        Ok(())
    }

    pub fn stage1(&mut self) -> Result<Stage1Outcome> {
        let cfg = self.cfg;
        cfg.validate()?;
        if self.data.is_empty() {
            return Err(Error::Config("training needs a non-empty dataset".into()));
        }
        let first = &self.data.samples[0];
        cfg.model.check_input(first.height, first.width)?;
        let started = Instant::now();
        let split = split_indices(self.data.len(), cfg.seed, cfg.val_fraction);
        let mut model = SegModel::init(cfg.model_config())?;
        let mut opt = AdamW::new(&model, cfg.lr, cfg.weight_decay);
        let anneal = cfg.anneal();
        let mut record = RunRecord {
            config_hash: self.config_hash.clone(),
            ..RunRecord::default()
        };
        for epoch in 0..cfg.epochs_stage1 {
            let a_t = annealing_factor(epoch, &anneal);
            let order = self.epoch_order(&split, epoch);
            let mut parts = Vec::with_capacity(order.len());
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let samples: Vec<&Sample> = batch.iter().map(|&j| &self.data.samples[split.train[j]]).collect();
                let steps = stage1_steps(&model, &samples, a_t, &cfg.loss, self.exec)?;
                Self::check_finite(&steps, epoch, b)?;
                opt.step(&mut model, &average_grads(&steps));
                parts.extend(steps.iter().map(|s| s.parts));
            }
            let val = self.validate_epoch(&model, &split, false)?;
            let e = Self::epoch_record(epoch + 1, &parts, &val);
            self.finish_epoch(&mut record, e);
        }
        let views = uncertainty_views(&model, self.data, &split.train, self.exec)?;
        record.wall_clock_secs = started.elapsed().as_secs_f64();
        Ok(Stage1Outcome {
            model,
            split,
            views,
            record,
        })
    }

    pub fn stage2(&mut self, stage1: Stage1Outcome) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let started = Instant::now();
        let Stage1Outcome {
            mut model,
            split,
            mut views,
            mut record,
        } = stage1;
        // The stage-I view: same architecture, weights copied in after every epoch.
        let mut view_model = model.clone();
        let mut opt = AdamW::new(&model, cfg.lr, cfg.weight_decay);
        let anneal = cfg.anneal();
        let mut last_clicks = vec![Vec::new(); split.train.len()];
        for e2 in 0..cfg.epochs_stage2 {
            let epoch = cfg.epochs_stage1 + e2;
            let a_t = annealing_factor(epoch, &anneal);
            let order = self.epoch_order(&split, epoch);
            let mut parts = Vec::with_capacity(order.len());
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let results: Vec<(SampleStep, Vec<ClickSet>)> = self
                    .exec
                    .map(batch, |&j| {
                        let i = split.train[j];
                        let mut rng = rng_for(cfg.seed, STREAM_CLICKS, (epoch * self.data.len() + i) as u64);
                        stage2_step(&model, &self.data.samples[i], &views[j], a_t, cfg, &mut rng)
                    })
                    .into_iter()
                    .collect::<Result<_>>()?;
                let mut steps = Vec::with_capacity(results.len());
                for (&j, (step, rounds)) in batch.iter().zip(results) {
                    last_clicks[j] = rounds;
                    steps.push(step);
                }
                Self::check_finite(&steps, epoch, b)?;
                opt.step(&mut model, &average_grads(&steps));
                parts.extend(steps.iter().map(|s| s.parts));
            }
            view_model.import_weights(&model.export_weights())?;
            views = uncertainty_views(&view_model, self.data, &split.train, self.exec)?;
            let val = self.validate_epoch(&model, &split, true)?;
            let e = Self::epoch_record(epoch + 1, &parts, &val);
            self.finish_epoch(&mut record, e);
        }
        record.wall_clock_secs += started.elapsed().as_secs_f64();
        Ok(TrainOutcome {
            model,
            split,
            views,
            record,
            last_epoch_clicks: last_clicks,
        })
    }

    pub fn run(&mut self) -> Result<TrainOutcome> {
        let s1 = self.stage1()?;
        self.stage2(s1)
    }
}

/// Both stages with default plumbing.
pub fn train(data: &Dataset, cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    Trainer::new(data, cfg, exec).run()
}

#[cfg(test)]
mod tests;

//! Overlap, boundary-distance and ranking metrics on binary masks.

use crate::error::{Error, Result};

/// Row-major boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape {
                op: "mask",
                detail: format!("{} values for a {height}x{width} mask", data.len()),
            });
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_classes(height: usize, width: usize, classes: &[usize]) -> Result<Self> {
        Self::new(height, width, classes.iter().map(|&c| c > 0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Foreground pixels with a 4-neighbour that is background or off-image.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !self.get(r, c) {
                    continue;
                }
                let edge = r == 0
                    || c == 0
                    || r + 1 == h
                    || c + 1 == w
                    || !self.get(r - 1, c)
                    || !self.get(r + 1, c)
                    || !self.get(r, c - 1)
                    || !self.get(r, c + 1);
                if edge {
                    out.push((r, c));
                }
            }
        }
        out
    }

    fn check_same(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![self.height, self.width],
                right: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    fn overlap(&self, other: &BinaryMask) -> (usize, usize, usize) {
        let mut inter = 0;
        for (a, b) in self.data.iter().zip(&other.data) {
            if *a && *b {
                inter += 1;
            }
        }
        (inter, self.count(), other.count())
    }
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same(gt, "dice")?;
    let (inter, a, b) = pred.overlap(gt);
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same(gt, "jaccard")?;
    let (inter, a, b) = pred.overlap(gt);
    let union = a + b - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Squared distance transform of a 1-D sampled function (lower envelope of
/// parabolas). `f` holds 0 at sites and `INF` elsewhere.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        if f[v[0]] == f64::INFINITY {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if f[v[0]] == f64::INFINITY {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest site.
pub fn distance_transform(sites: &[(usize, usize)], height: usize, width: usize) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; height * width];
    for &(r, c) in sites {
        grid[r * width + c] = 0.0;
    }
    let n = height.max(width);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for c in 0..width {
        for r in 0..height {
            f[r] = grid[r * width + c];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for r in 0..height {
            grid[r * width + c] = out[r];
        }
    }
    for r in 0..height {
        let row = &mut grid[r * width..(r + 1) * width];
        f[..width].copy_from_slice(row);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        row.copy_from_slice(&out[..width]);
    }
    grid.iter().map(|d| d.sqrt()).collect()
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// 95th percentile of the pooled symmetric boundary-to-boundary distances.
/// Both empty gives 0; exactly one empty gives the image diagonal.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same(gt, "hd95")?;
    let (h, w) = (pred.height, pred.width);
    let bp = pred.boundary();
    let bg = gt.boundary();
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(image_diagonal(h, w)),
        _ => {}
    }
    let to_gt = distance_transform(&bg, h, w);
    let to_pred = distance_transform(&bp, h, w);
    let mut pooled: Vec<f64> = bp.iter().map(|&(r, c)| to_gt[r * w + c]).collect();
    pooled.extend(bg.iter().map(|&(r, c)| to_pred[r * w + c]));
    Ok(percentile(&mut pooled, 95.0))
}

pub fn image_diagonal(height: usize, width: usize) -> f64 {
    let (h, w) = (height.saturating_sub(1) as f64, width.saturating_sub(1) as f64);
    (h * h + w * w).sqrt()
}

/// Area under the ROC curve via the Mann-Whitney statistic with midranks.
/// `None` when either class is absent.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "auroc: length mismatch");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// AUROC of uncertainty scores `u` for detecting pixels where `pred` and `gt` disagree.
pub fn auroc_uncertainty_error(u: &[f64], pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    pred.check_same(gt, "auroc_uncertainty_error")?;
    if u.len() != gt.data.len() {
        return Err(Error::InvalidShape {
            op: "auroc_uncertainty_error",
            detail: format!("{} scores for {} pixels", u.len(), gt.data.len()),
        });
    }
    let errors: Vec<bool> = pred.data.iter().zip(&gt.data).map(|(a, b)| a != b).collect();
    Ok(auroc(u, &errors))
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Dice, Jaccard and HD95 of one prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegScores {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
}

pub fn seg_scores(pred: &BinaryMask, gt: &BinaryMask) -> Result<SegScores> {
    Ok(SegScores {
        dice: dice(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
        hd95: hd95(pred, gt)?,
    })
}

/// Per-sample scores and their means. AUROC is averaged over the samples
/// where it is defined; `auroc_defined` counts them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub auroc: f64,
    pub auroc_defined: usize,
    pub per_sample: Vec<SegScores>,
    pub per_sample_auroc: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn from_samples(per_sample: Vec<SegScores>, per_sample_auroc: Vec<Option<f64>>) -> Self {
        let n = per_sample.len() as f64;
        let mean = |f: fn(&SegScores) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        let defined: Vec<f64> = per_sample_auroc.iter().flatten().copied().collect();
        let auroc = if defined.is_empty() {
            f64::NAN
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        MetricsReport {
            dice: mean(|s| s.dice),
            jaccard: mean(|s| s.jaccard),
            hd95: mean(|s| s.hd95),
            auroc,
            auroc_defined: defined.len(),
            per_sample,
            per_sample_auroc,
        }
    }
}

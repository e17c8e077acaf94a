//! Simulated point prompts: where to click, with which polarity, and how
//! clicks become input channels.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::autodiff::DiffArray;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClickPoint {
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
}

/// Clicks in acquisition order; a pixel appears at most once.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClickSet {
    points: Vec<ClickPoint>,
}

impl ClickSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[ClickPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.points.iter().any(|p| p.row == row && p.col == col)
    }

    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.points.iter().map(|p| (p.row, p.col)).collect()
    }

    /// Appends a click; returns false (and leaves the set unchanged) for a repeated pixel.
    pub fn push(&mut self, click: ClickPoint) -> bool {
        if self.contains(click.row, click.col) {
            return false;
        }
        self.points.push(click);
        true
    }

    pub fn extend(&mut self, other: &ClickSet) {
        for &p in &other.points {
            self.push(p);
        }
    }
}

/// Pixels chosen by a sampler, with a flag when fewer than requested were available
/// (or, for the random sampler, when it had to fall back to the whole image).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Selection {
    pub points: Vec<(usize, usize)>,
    pub flagged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    value: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Max-heap order: larger value first, then smaller row-major index.
    fn cmp(&self, other: &Self) -> Ordering {
        self.value
            .total_cmp(&other.value)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Greedy top-k of an `h x w` uncertainty map, skipping `exclude` and any pixel
/// within Chebyshev distance `nms_radius` of a pixel already chosen in this call.
pub fn sample_topk_uncertainty(
    u: &[f64],
    width: usize,
    k: usize,
    exclude: &ClickSet,
    nms_radius: usize,
) -> Selection {
    let mut heap: BinaryHeap<Candidate> = u
        .iter()
        .enumerate()
        .map(|(index, &value)| Candidate { value, index })
        .collect();
    let mut points: Vec<(usize, usize)> = Vec::with_capacity(k);
    while points.len() < k {
        let Some(c) = heap.pop() else { break };
        let pos = (c.index / width, c.index % width);
        if exclude.contains(pos.0, pos.1) {
            continue;
        }
        if points.iter().any(|&p| chebyshev(p, pos) <= nms_radius) {
            continue;
        }
        points.push(pos);
    }
    let flagged = points.len() < k;
    Selection { points, flagged }
}

/// Uniform draws without replacement from the pixels where `pred` and `gt`
/// disagree; falls back to the whole image (flagged) when they agree everywhere.
pub fn sample_random_error<R: Rng + ?Sized>(
    pred: &BinaryMask,
    gt: &BinaryMask,
    k: usize,
    exclude: &ClickSet,
    rng: &mut R,
) -> Selection {
    let w = gt.width();
    let free = |i: &usize| !exclude.contains(i / w, i % w);
    let errors: Vec<usize> = (0..gt.data().len())
        .filter(|&i| pred.data()[i] != gt.data()[i])
        .filter(free)
        .collect();
    let (pool, fallback) = if errors.is_empty() {
        ((0..gt.data().len()).filter(free).collect::<Vec<_>>(), true)
    } else {
        (errors, false)
    };
    let points: Vec<(usize, usize)> = pool.choose_multiple(rng, k).map(|&i| (i / w, i % w)).collect();
    let flagged = fallback || points.len() < k;
    Selection { points, flagged }
}

/// Model-free baseline: visits cell centres of a 1x1, 2x2, 4x4, ... lattice in
/// coarse-to-fine, row-major order and returns the first `k` unused pixels.
pub fn sample_grid(height: usize, width: usize, k: usize, exclude: &ClickSet) -> Selection {
    let mut points: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut cells = 1usize;
    'levels: while points.len() < k {
        for i in 0..cells {
            for j in 0..cells {
                let pos = ((2 * i + 1) * height / (2 * cells), (2 * j + 1) * width / (2 * cells));
                if !exclude.contains(pos.0, pos.1) && !points.contains(&pos) {
                    points.push(pos);
                    if points.len() == k {
                        break 'levels;
                    }
                }
            }
        }
        if cells >= height.max(width) {
            break;
        }
        cells *= 2;
    }
    let flagged = points.len() < k;
    Selection { points, flagged }
}

/// Oracle-user polarity: positive on ground-truth foreground, negative elsewhere.
pub fn assign_polarity(points: &[(usize, usize)], gt: &BinaryMask) -> ClickSet {
    let mut set = ClickSet::new();
    for &(row, col) in points {
        let polarity = if gt.get(row, col) {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        set.push(ClickPoint { row, col, polarity });
    }
    set
}

pub const DEFAULT_SIGMA: f64 = 2.0;

/// `[2, H, W]` click channels: summed unit-peak Gaussians of positive (0) and
/// negative (1) clicks, each clamped to `[0, 1]`.
pub fn rasterize(clicks: &ClickSet, height: usize, width: usize, sigma: f64) -> Result<DiffArray> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("click sigma must be positive, got {sigma}")));
    }
    let plane = height * width;
    let mut data = vec![0.0; 2 * plane];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for p in clicks.points() {
        if p.row >= height || p.col >= width {
            return Err(Error::InvalidShape {
                op: "rasterize",
                detail: format!("click ({}, {}) outside {height}x{width}", p.row, p.col),
            });
        }
        let channel = match p.polarity {
            Polarity::Positive => &mut data[..plane],
            Polarity::Negative => &mut data[plane..],
        };
        for r in 0..height {
            let dr = r as f64 - p.row as f64;
            for c in 0..width {
                let dc = c as f64 - p.col as f64;
                channel[r * width + c] += (-(dr * dr + dc * dc) * inv).exp();
            }
        }
    }
    for v in &mut data {
        *v = v.min(1.0);
    }
    DiffArray::constant(&[2, height, width], data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplerKind {
    #[default]
    TopK,
    RandomError,
    Grid,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::TopK => "topk",
            SamplerKind::RandomError => "random",
            SamplerKind::Grid => "grid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "topk" => Some(SamplerKind::TopK),
            "random" => Some(SamplerKind::RandomError),
            "grid" => Some(SamplerKind::Grid),
            _ => None,
        }
    }
}

/// What a sampler may look at for one image.
pub struct SampleInput<'a> {
    pub uncertainty: &'a [f64],
    pub pred: &'a BinaryMask,
    pub gt: &'a BinaryMask,
    pub exclude: &'a ClickSet,
}

pub fn sample_clicks<R: Rng + ?Sized>(
    kind: SamplerKind,
    input: &SampleInput<'_>,
    k: usize,
    nms_radius: usize,
    rng: &mut R,
) -> Selection {
    let (h, w) = (input.gt.height(), input.gt.width());
    match kind {
        SamplerKind::TopK => sample_topk_uncertainty(input.uncertainty, w, k, input.exclude, nms_radius),
        SamplerKind::RandomError => sample_random_error(input.pred, input.gt, k, input.exclude, rng),
        SamplerKind::Grid => sample_grid(h, w, k, input.exclude),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selftest::oracles::topk_sorted;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut data = vec![false; h * w];
        for &(r, c) in on {
            data[r * w + c] = true;
        }
        BinaryMask::new(h, w, data).unwrap()
    }

    #[test]
    fn topk_examples() {
        let mut u = vec![0.1; 9];
        u[5] = 0.7;
        assert_eq!(sample_topk_uncertainty(&u, 3, 1, &ClickSet::new(), 0).points, vec![(1, 2)]);
        let flat = vec![0.4; 9];
        assert_eq!(
            sample_topk_uncertainty(&flat, 3, 2, &ClickSet::new(), 0).points,
            vec![(0, 0), (0, 1)]
        );
        let m = [0.1, 0.9, 0.2, 0.8, 0.3, 0.4, 0.5, 0.6, 0.7];
        assert_eq!(
            sample_topk_uncertainty(&m, 3, 3, &ClickSet::new(), 0).points,
            vec![(0, 1), (1, 0), (2, 2)]
        );
    }

    #[test]
    fn topk_respects_exclusion_nms_and_shortfall() {
        let m = [0.1, 0.9, 0.2, 0.8, 0.3, 0.4, 0.5, 0.6, 0.7];
        let mut ex = ClickSet::new();
        ex.push(ClickPoint {
            row: 0,
            col: 1,
            polarity: Polarity::Positive,
        });
        let s = sample_topk_uncertainty(&m, 3, 1, &ex, 0);
        assert_eq!(s.points, vec![(1, 0)]);
        // Radius 1 around (0,1) blocks (1,0); (2,2) then blocks (2,1).
        let s = sample_topk_uncertainty(&m, 3, 3, &ClickSet::new(), 1);
        assert_eq!(s.points, vec![(0, 1), (2, 2), (2, 0)]);
        assert!(!s.flagged);
        let s = sample_topk_uncertainty(&m, 3, 4, &ClickSet::new(), 2);
        assert_eq!(s.points, vec![(0, 1)]);
        assert!(s.flagged);
    }

    #[test]
    fn random_error_examples() {
        let gt = mask(4, 4, &[(1, 1), (1, 2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_random_error(&gt, &gt, 2, &ClickSet::new(), &mut rng);
        assert!(s.flagged);
        assert_eq!(s.points.len(), 2);

        let pred = mask(4, 4, &[(1, 1), (3, 3)]);
        let s = sample_random_error(&pred, &gt, 2, &ClickSet::new(), &mut rng);
        let mut got = s.points.clone();
        got.sort();
        assert_eq!(got, vec![(1, 2), (3, 3)]);
        assert!(!s.flagged);

        let a = sample_random_error(&pred, &gt, 1, &ClickSet::new(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_random_error(&pred, &gt, 1, &ClickSet::new(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn grid_is_coarse_to_fine() {
        let s = sample_grid(8, 8, 5, &ClickSet::new());
        assert_eq!(s.points, vec![(4, 4), (2, 2), (2, 6), (6, 2), (6, 6)]);
        let s = sample_grid(2, 2, 10, &ClickSet::new());
        assert_eq!(s.points.len(), 4);
        assert!(s.flagged);
    }

    #[test]
    fn polarity_follows_ground_truth() {
        let gt = mask(3, 3, &[(1, 1)]);
        let set = assign_polarity(&[(1, 1), (0, 0), (2, 2)], &gt);
        let pol: Vec<_> = set.points().iter().map(|p| p.polarity).collect();
        assert_eq!(pol, vec![Polarity::Positive, Polarity::Negative, Polarity::Negative]);
        assert_eq!(set.positions(), vec![(1, 1), (0, 0), (2, 2)]);
    }

    #[test]
    fn click_set_rejects_repeats() {
        let mut set = ClickSet::new();
        let p = ClickPoint {
            row: 1,
            col: 1,
            polarity: Polarity::Positive,
        };
        assert!(set.push(p));
        assert!(!set.push(ClickPoint {
            polarity: Polarity::Negative,
            ..p
        }));
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn rasterize_examples() {
        let r = rasterize(&ClickSet::new(), 4, 5, 2.0).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));

        let one = assign_polarity(&[(1, 2)], &mask(4, 5, &[(1, 2)]));
        let r = rasterize(&one, 4, 5, 2.0).unwrap();
        assert_eq!(r.data()[7], 1.0);
        assert!(r.data()[20..].iter().all(|&v| v == 0.0));
        assert!((r.data()[8] - (-1.0f64 / 8.0).exp()).abs() < 1e-15);

        let two = assign_polarity(&[(1, 1), (1, 2)], &mask(4, 5, &[(1, 1), (1, 2)]));
        let r = rasterize(&two, 4, 5, 2.0).unwrap();
        assert_eq!(r.data()[6], 1.0);
        assert_eq!(r.data()[7], 1.0);
        // Off-peak pixels sum both Gaussians before clamping.
        let expected = (-(1.0f64 + 1.0) / 8.0).exp() + (-(1.0f64 + 4.0) / 8.0).exp();
        assert!((r.data()[0] - expected.min(1.0)).abs() < 1e-15);
        assert!(rasterize(&two, 4, 5, 0.0).is_err());
    }

    #[test]
    fn sampler_names_round_trip() {
        for k in [SamplerKind::TopK, SamplerKind::RandomError, SamplerKind::Grid] {
            assert_eq!(SamplerKind::parse(k.name()), Some(k));
        }
    }

    proptest! {
        #[test]
        fn topk_matches_sorted_oracle(
            h in 1usize..=16, w in 1usize..=16, k in 1usize..6,
            values in proptest::collection::vec(0u8..10, 256),
        ) {
            let u: Vec<f64> = values[..h * w].iter().map(|&v| v as f64 / 9.0).collect();
            let ours = sample_topk_uncertainty(&u, w, k, &ClickSet::new(), 0).points;
            prop_assert_eq!(ours, topk_sorted(&u, w, k.min(h * w)));
        }

        #[test]
        fn topk_invariant_under_monotone_maps(
            values in proptest::collection::vec(0.0f64..1.0, 64), k in 1usize..5, r in 0usize..3,
        ) {
            let base = sample_topk_uncertainty(&values, 8, k, &ClickSet::new(), r);
            let warped: Vec<f64> = values.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(base, sample_topk_uncertainty(&warped, 8, k, &ClickSet::new(), r));
        }

        #[test]
        fn accumulated_clicks_never_repeat(
            values in proptest::collection::vec(0.0f64..1.0, 36), k in 1usize..4, m in 1usize..5,
        ) {
            let gt = BinaryMask::empty(6, 6);
            let mut acc = ClickSet::new();
            for _ in 0..m {
                let s = sample_topk_uncertainty(&values, 6, k, &acc, 0);
                let before = acc.len();
                acc.extend(&assign_polarity(&s.points, &gt));
                prop_assert_eq!(acc.len(), before + s.points.len());
            }
        }
    }
}

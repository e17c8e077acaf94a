//! From logits to evidence, Dirichlet concentrations, subjective-logic
//! belief/uncertainty masses and expected class probabilities.
//!
//! Per pixel with `N` classes: `e = B(logits) >= 0`, `alpha = e + 1`,
//! `S = sum(alpha)`, `b = e / S`, `u = N / S`, `p = alpha / S`, so that
//! `u + sum(b) = 1` and `sum(p) = 1`. All maps are `[N, H, W]` (or `[H, W]`
//! for per-pixel scalars) and stay differentiable on the tape.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::autodiff::{DiffArray, Tape};
use crate::error::{Error, Result};

/// Clamp interval for probabilities/uncertainties that feed a logarithm.
pub const PROB_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

/// Non-negative activation turning logits into evidence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvidenceActivation {
    #[default]
    Relu,
    Softplus,
    Exp,
}

impl EvidenceActivation {
    pub fn name(self) -> &'static str {
        match self {
            EvidenceActivation::Relu => "relu",
            EvidenceActivation::Softplus => "softplus",
            EvidenceActivation::Exp => "exp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(EvidenceActivation::Relu),
            "softplus" => Some(EvidenceActivation::Softplus),
            "exp" => Some(EvidenceActivation::Exp),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvidenceMap(pub(crate) DiffArray);

#[derive(Clone, Debug)]
pub struct DirichletMap {
    alpha: DiffArray,
    strength: DiffArray,
}

#[derive(Clone, Debug)]
pub struct BeliefMap(pub(crate) DiffArray);

#[derive(Clone, Debug)]
pub struct UncertaintyMap(pub(crate) DiffArray);

#[derive(Clone, Debug)]
pub struct ProbMap(pub(crate) DiffArray);

fn class_map_shape(op: &'static str, a: &DiffArray) -> Result<(usize, usize, usize)> {
    match *a.shape() {
        [n, h, w] if n >= 1 => Ok((n, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            detail: format!("expected [classes, height, width], got {:?}", a.shape()),
        }),
    }
}

impl EvidenceMap {
    pub fn values(&self) -> &DiffArray {
        &self.0
    }
}

impl DirichletMap {
    /// Build from concentration parameters directly (every entry must be >= 1).
    pub fn from_alpha(tape: &Tape, alpha: DiffArray) -> Result<Self> {
        class_map_shape("dirichlet", &alpha)?;
        if let Some(&v) = alpha.data().iter().find(|v| !(**v >= 1.0)) {
            return Err(Error::Domain { op: "dirichlet", value: v });
        }
        let strength = tape.sum_axis0(&alpha)?;
        Ok(DirichletMap { alpha, strength })
    }

    pub fn alpha(&self) -> &DiffArray {
        &self.alpha
    }

    pub fn strength(&self) -> &DiffArray {
        &self.strength
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.shape()[0]
    }

    /// `(height, width)`
    pub fn spatial(&self) -> (usize, usize) {
        (self.alpha.shape()[1], self.alpha.shape()[2])
    }
}

impl BeliefMap {
    pub fn values(&self) -> &DiffArray {
        &self.0
    }
}

impl UncertaintyMap {
    pub fn values(&self) -> &DiffArray {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn mean(&self) -> f64 {
        self.0.data().iter().sum::<f64>() / self.0.len() as f64
    }

    /// `(height, width)`
    pub fn spatial(&self) -> (usize, usize) {
        (self.0.shape()[0], self.0.shape()[1])
    }
}

impl ProbMap {
    pub fn values(&self) -> &DiffArray {
        &self.0
    }

    /// Wrap per-class probabilities `[N, H, W]`.
    pub fn from_values(p: DiffArray) -> Result<Self> {
        class_map_shape("prob_map", &p)?;
        Ok(ProbMap(p))
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[0]
    }

    /// Per-pixel arg-max class; ties go to the lower class index.
    pub fn argmax(&self) -> Vec<usize> {
        let (n, plane) = (self.0.shape()[0], self.0.shape()[1] * self.0.shape()[2]);
        let p = self.0.data();
        (0..plane)
            .map(|i| {
                let mut best = 0;
                for c in 1..n {
                    if p[c * plane + i] > p[best * plane + i] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Per-pixel probability of any non-background class.
    pub fn foreground(&self) -> Vec<f64> {
        let plane = self.0.shape()[1] * self.0.shape()[2];
        let p = self.0.data();
        (0..plane).map(|i| 1.0 - p[i]).collect()
    }
}

pub fn evidence_from_logits(tape: &Tape, logits: &DiffArray, activation: EvidenceActivation) -> Result<EvidenceMap> {
    class_map_shape("evidence", logits)?;
    let e = match activation {
        EvidenceActivation::Relu => tape.relu(logits),
        EvidenceActivation::Softplus => tape.softplus(logits),
        EvidenceActivation::Exp => tape.exp(logits),
    };
    Ok(EvidenceMap(e))
}

pub fn dirichlet_from_evidence(tape: &Tape, e: &EvidenceMap) -> Result<DirichletMap> {
    let alpha = tape.add_scalar(&e.0, 1.0);
    let strength = tape.sum_axis0(&alpha)?;
    Ok(DirichletMap { alpha, strength })
}

/// `b = (alpha - 1) / S`, `u = N / S`.
pub fn belief_and_uncertainty(tape: &Tape, d: &DirichletMap) -> Result<(BeliefMap, UncertaintyMap)> {
    let n = d.num_classes();
    let s_full = tape.broadcast0(&d.strength, n);
    let evidence = tape.add_scalar(&d.alpha, -1.0);
    let b = tape.div(&evidence, &s_full)?;
    let numer = DiffArray::constant(d.strength.shape(), vec![n as f64; d.strength.len()])?;
    let u = tape.div(&numer, &d.strength)?;
    Ok((BeliefMap(b), UncertaintyMap(u)))
}

/// Dirichlet mean `alpha / S`.
pub fn expected_probability(tape: &Tape, d: &DirichletMap) -> Result<ProbMap> {
    let s_full = tape.broadcast0(&d.strength, d.num_classes());
    Ok(ProbMap(tape.div(&d.alpha, &s_full)?))
}

/// One draw from Dir(alpha) by normalising independent Gamma(alpha_i, 1)
/// draws. Test oracle only; training never samples.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut g: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("alpha must be positive").sample(rng))
        .collect();
    let total: f64 = g.iter().sum();
    for v in &mut g {
        *v /= total;
    }
    g
}

/// Everything derived from one head's logits.
#[derive(Clone, Debug)]
pub struct EvidentialOutput {
    pub dirichlet: DirichletMap,
    pub belief: BeliefMap,
    pub uncertainty: UncertaintyMap,
    pub prob: ProbMap,
}

pub fn evidential_output(tape: &Tape, logits: &DiffArray, activation: EvidenceActivation) -> Result<EvidentialOutput> {
    let e = evidence_from_logits(tape, logits, activation)?;
    let dirichlet = dirichlet_from_evidence(tape, &e)?;
    let (belief, uncertainty) = belief_and_uncertainty(tape, &dirichlet)?;
    let prob = expected_probability(tape, &dirichlet)?;
    Ok(EvidentialOutput {
        dirichlet,
        belief,
        uncertainty,
        prob,
    })
}

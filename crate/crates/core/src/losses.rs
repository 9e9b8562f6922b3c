//! Metric losses, the group-diversity loss and the combined objective.
//!
//! Scalar forms (`contrastive_loss`, `margin_loss`, ...) evaluate a single
//! pair; [`total_loss`] builds the same formulas on a tape over every pair
//! of a batch so they can be differentiated.

use crate::autodiff::{Tape, Var, MIN_NORM};
use crate::error::{Error, Result};
use crate::kernels::softplus;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Contrastive,
    Binomial,
    Margin,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(LossKind::Contrastive),
            "binomial" => Ok(LossKind::Binomial),
            "margin" => Ok(LossKind::Margin),
            _ => Err(Error::Config(format!(
                "unknown loss kind {s:?} (expected contrastive, binomial or margin)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Contrastive => "contrastive",
            LossKind::Binomial => "binomial",
            LossKind::Margin => "margin",
        }
    }

    /// Default margin `m` for this loss.
    pub fn default_margin(self) -> f64 {
        match self {
            LossKind::Contrastive => 1.0,
            LossKind::Binomial => 0.5,
            LossKind::Margin => 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricLossParams {
    pub kind: LossKind,
    pub margin: f64,
    pub alpha: f64,
    pub beta0: f64,
    pub beta1: f64,
    /// Initial value of the trainable margin-loss boundary.
    pub eta_init: f64,
    pub lr_eta: f64,
}

impl MetricLossParams {
    pub fn defaults(kind: LossKind) -> Self {
        MetricLossParams {
            kind,
            margin: kind.default_margin(),
            alpha: 2.0,
            beta0: 1.0,
            beta1: 25.0,
            eta_init: 1.2,
            lr_eta: 5e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == LossKind::Margin && self.eta_init <= self.margin {
            return Err(Error::Config(format!(
                "margin loss needs eta > m at initialization (eta = {}, m = {})",
                self.eta_init, self.margin
            )));
        }
        if self.lr_eta < 0.0 {
            return Err(Error::Config("lr_eta must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityParams {
    pub mu: f64,
    pub alpha: f64,
    pub beta0: f64,
}

impl Default for DiversityParams {
    fn default() -> Self {
        DiversityParams {
            mu: 0.5,
            alpha: 2.0,
            beta0: 1.0,
        }
    }
}

/// Weights of the diversity and L2 terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveParams {
    pub lambda_div: f64,
    pub lambda_l2: f64,
}

impl ObjectiveParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_div < 0.0 || self.lambda_l2 < 0.0 {
            return Err(Error::Config("lambda weights must be non-negative".into()));
        }
        Ok(())
    }
}

// ---- scalar forms ------------------------------------------------------

fn check_norms(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::dim("pair", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(Error::Numeric("zero-norm embedding in pair measure".into()));
    }
    Ok((na, nb))
}

/// Euclidean distance between two embeddings.
pub fn pair_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_norms(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Cosine similarity with unsquared norms.
pub fn pair_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = check_norms(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

pub fn contrastive_loss(d: f64, positive: bool, m: f64) -> f64 {
    if positive {
        d
    } else {
        (m - d).max(0.0)
    }
}

pub fn binomial_deviance_loss(s: f64, positive: bool, p: &MetricLossParams) -> f64 {
    if positive {
        softplus(-p.alpha * (s - p.margin) * p.beta1)
    } else {
        softplus(p.alpha * (s - p.margin) * p.beta0)
    }
}

pub fn margin_loss(d: f64, positive: bool, m: f64, eta: f64) -> f64 {
    if positive {
        (d - (eta - m)).max(0.0)
    } else {
        ((eta + m) - d).max(0.0)
    }
}

pub fn diversity_loss(s: f64, p: &DiversityParams) -> f64 {
    softplus(p.alpha * (s - p.mu) * p.beta0)
}

// ---- pairs -------------------------------------------------------------

/// An unordered within-batch pair `i < j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub positive: bool,
}

/// Chooses which within-batch pairs enter the metric loss.
pub trait PairMiner {
    fn select(&self, labels: &[usize]) -> Result<Vec<Pair>>;
}

/// Every unordered pair, in lexicographic `(i, j)` order.
#[derive(Clone, Copy, Debug, Default)]
pub struct AllPairs;

impl PairMiner for AllPairs {
    fn select(&self, labels: &[usize]) -> Result<Vec<Pair>> {
        enumerate_pairs(labels)
    }
}

pub fn enumerate_pairs(labels: &[usize]) -> Result<Vec<Pair>> {
    if labels.len() < 2 {
        return Err(Error::Usage(format!("need at least 2 samples to form pairs, got {}", labels.len())));
    }
    let mut out = Vec::with_capacity(labels.len() * (labels.len() - 1) / 2);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            out.push(Pair {
                i,
                j,
                positive: labels[i] == labels[j],
            });
        }
    }
    Ok(out)
}

// ---- combined objective ------------------------------------------------

/// The pieces of the combined objective, each recorded on the tape.
pub struct LossTerms {
    pub total: Var,
    pub metric: Var,
    /// Mean diversity loss (absent when P = 1).
    pub diversity: Option<Var>,
    /// Sum of squared regularized weights (absent when none are given).
    pub l2: Option<Var>,
}

/// Everything [`total_loss`] needs besides the graph inputs.
pub struct Objective<'a> {
    pub metric: &'a MetricLossParams,
    pub diversity: &'a DiversityParams,
    pub weights: &'a ObjectiveParams,
}

fn mask(tape: &mut Tape, pairs: &[(usize, usize, bool)], positive: bool, column: bool) -> Var {
    let data: Vec<f64> = pairs
        .iter()
        .map(|&(_, _, l)| if l == positive { 1.0 } else { 0.0 })
        .collect();
    let shape = if column { vec![data.len(), 1] } else { vec![data.len()] };
    tape.constant(Tensor::new(&shape, data).expect("mask shape"))
}

/// Combined objective over one batch.
///
/// `embeddings` is `(B·P)×D` with row `b·P + p` holding group `p` of image
/// `b`. The metric loss is averaged over pairs and groups, the diversity
/// loss over the `B·P(P−1)/2` same-image group pairs, and the L2 term sums
/// the squares of `regularized` (weights only; no biases, no η).
pub fn total_loss(
    tape: &mut Tape,
    embeddings: Var,
    groups: usize,
    pairs: &[Pair],
    eta: Option<Var>,
    regularized: &[Var],
    objective: &Objective<'_>,
) -> Result<LossTerms> {
    let (rows, _) = tape.value(embeddings).dims2()?;
    if groups == 0 || rows % groups != 0 {
        return Err(Error::dim("total_loss", tape.shape(embeddings), &[groups]));
    }
    let batch = rows / groups;
    if pairs.is_empty() {
        return Err(Error::Usage("total_loss needs at least one pair".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.i >= batch || p.j >= batch || p.i == p.j) {
        return Err(Error::Usage(format!("invalid pair ({}, {}) for batch of {batch}", p.i, p.j)));
    }

    let rows_pairs: Vec<(usize, usize, bool)> = (0..groups)
        .flat_map(|g| pairs.iter().map(move |p| (p.i * groups + g, p.j * groups + g, p.positive)))
        .collect();
    let idx: Vec<(usize, usize)> = rows_pairs.iter().map(|&(a, b, _)| (a, b)).collect();
    let mp = objective.metric;

    let per_pair = match mp.kind {
        LossKind::Contrastive => {
            let d = tape.pair_distance(embeddings, &idx)?;
            let pos_mask = mask(tape, &rows_pairs, true, false);
            let neg_mask = mask(tape, &rows_pairs, false, false);
            let pos = tape.mul(d, pos_mask)?;
            let gap = tape.scale(d, -1.0);
            let gap = tape.add_const(gap, mp.margin);
            let hinge = tape.hinge(gap);
            let neg = tape.mul(hinge, neg_mask)?;
            tape.add(pos, neg)?
        }
        LossKind::Binomial => {
            let s = tape.pair_cosine(embeddings, &idx)?;
            let pos_mask = mask(tape, &rows_pairs, true, false);
            let neg_mask = mask(tape, &rows_pairs, false, false);
            let centered = tape.add_const(s, -mp.margin);
            let pos_arg = tape.scale(centered, -mp.alpha * mp.beta1);
            let neg_arg = tape.scale(centered, mp.alpha * mp.beta0);
            let pos = tape.softplus(pos_arg);
            let pos = tape.mul(pos, pos_mask)?;
            let neg = tape.softplus(neg_arg);
            let neg = tape.mul(neg, neg_mask)?;
            tape.add(pos, neg)?
        }
        LossKind::Margin => {
            let eta = eta.ok_or_else(|| Error::Usage("margin loss needs the eta parameter".into()))?;
            let d = tape.pair_distance(embeddings, &idx)?;
            let d = tape.reshape(d, &[idx.len(), 1])?;
            let neg_eta = tape.scale(eta, -1.0);
            // d - η
            let offset = tape.bias_add(d, neg_eta)?;
            let pos_arg = tape.add_const(offset, mp.margin);
            let pos = tape.hinge(pos_arg);
            let flipped = tape.scale(offset, -1.0);
            let neg_arg = tape.add_const(flipped, mp.margin);
            let neg = tape.hinge(neg_arg);
            let pos_mask = mask(tape, &rows_pairs, true, true);
            let neg_mask = mask(tape, &rows_pairs, false, true);
            let pos = tape.mul(pos, pos_mask)?;
            let neg = tape.mul(neg, neg_mask)?;
            tape.add(pos, neg)?
        }
    };
    let metric = tape.mean(per_pair);
    let mut total = metric;

    let diversity = if groups > 1 {
        let gp: Vec<(usize, usize)> = (0..batch)
            .flat_map(|b| {
                (0..groups).flat_map(move |p| (p + 1..groups).map(move |q| (b * groups + p, b * groups + q)))
            })
            .collect();
        let dp = objective.diversity;
        let s = tape.pair_cosine(embeddings, &gp)?;
        let centered = tape.add_const(s, -dp.mu);
        let arg = tape.scale(centered, dp.alpha * dp.beta0);
        let loss = tape.softplus(arg);
        let mean = tape.mean(loss);
        let weighted = tape.scale(mean, objective.weights.lambda_div);
        total = tape.add(total, weighted)?;
        Some(mean)
    } else {
        None
    };

    let l2 = if regularized.is_empty() {
        None
    } else {
        let mut acc: Option<Var> = None;
        for &w in regularized {
            let sq = tape.mul(w, w)?;
            let s = tape.sum(sq);
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
        let l2 = acc.expect("non-empty");
        let weighted = tape.scale(l2, objective.weights.lambda_l2);
        total = tape.add(total, weighted)?;
        Some(l2)
    };

    Ok(LossTerms {
        total,
        metric,
        diversity,
        l2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn pair_measures_on_unit_vectors() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let c = [-1.0, 0.0];
        assert_eq!(pair_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(pair_cosine(&a, &a).unwrap(), 1.0);
        assert!((pair_distance(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(pair_cosine(&a, &b).unwrap(), 0.0);
        assert_eq!(pair_distance(&a, &c).unwrap(), 2.0);
        assert_eq!(pair_cosine(&a, &c).unwrap(), -1.0);
        assert!(matches!(pair_cosine(&a, &[0.0, 0.0]), Err(Error::Numeric(_))));
        assert!(matches!(pair_distance(&[0.0, 0.0], &a), Err(Error::Numeric(_))));
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_loss(0.3, true, 1.0), 0.3);
        assert_eq!(contrastive_loss(1.5, false, 1.0), 0.0);
        assert!((contrastive_loss(0.4, false, 1.0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn binomial_examples() {
        let p = MetricLossParams::defaults(LossKind::Binomial);
        assert!((binomial_deviance_loss(0.5, true, &p) - LN2).abs() < 1e-15);
        assert!((binomial_deviance_loss(0.5, false, &p) - LN2).abs() < 1e-15);
        let v = binomial_deviance_loss(0.9, true, &p);
        assert!((v - (-20f64).exp().ln_1p()).abs() < 1e-24);
        assert!((v - 2.061e-9).abs() < 1e-12);
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_loss(1.0, true, 0.2, 1.2), 0.0);
        assert_eq!(margin_loss(1.4, false, 0.2, 1.2), 0.0);
        assert!((margin_loss(1.3, true, 0.2, 1.2) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn diversity_examples() {
        let p = DiversityParams::default();
        assert!((diversity_loss(0.5, &p) - LN2).abs() < 1e-15);
        assert!((diversity_loss(-1.0, &p) - 0.048587351573742).abs() < 1e-12);
        assert!((diversity_loss(1.0, &p) - 1.313261687518223).abs() < 1e-12);
    }

    #[test]
    fn table_defaults() {
        let c = MetricLossParams::defaults(LossKind::Contrastive);
        assert_eq!(c.margin, 1.0);
        let b = MetricLossParams::defaults(LossKind::Binomial);
        assert_eq!((b.margin, b.alpha, b.beta1, b.beta0), (0.5, 2.0, 25.0, 1.0));
        let m = MetricLossParams::defaults(LossKind::Margin);
        assert_eq!((m.margin, m.eta_init, m.lr_eta), (0.2, 1.2, 5e-4));
        assert!(m.validate().is_ok());
        let bad = MetricLossParams { eta_init: 0.1, ..m };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pair_enumeration() {
        let p = enumerate_pairs(&[0, 0, 1, 1]).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p.iter().filter(|x| x.positive).count(), 2);
        let p = enumerate_pairs(&[3, 1, 4, 5, 9]).unwrap();
        assert_eq!(p.iter().filter(|x| x.positive).count(), 0);
        let labels: Vec<usize> = (0..4).flat_map(|c| [c, c]).collect();
        let p = enumerate_pairs(&labels).unwrap();
        assert_eq!(p.len(), 28);
        assert_eq!(p.iter().filter(|x| x.positive).count(), 4);
        assert!(matches!(enumerate_pairs(&[1]), Err(Error::Usage(_))));
    }
}

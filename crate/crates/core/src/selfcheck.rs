//! Numerical self-checks: per-op and composed gradient checks, the
//! permutation and translation properties of A-grouping, attention
//! normalization, and closed-form loss and metric oracles.
//!
//! Every suite is seeded, so a report is identical from run to run.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{backbone_forward, init_backbone, BackboneConfig};
use crate::error::Result;
use crate::eval::{map_at_r, nmi_of, pairwise_f1, recall_at_k, EmbeddingSet};
use crate::gradcheck::{self, FD_STEP};
use crate::grouping::{a_grouping_forward, fold_mode3, unfold_mode3, AGroupingParams, GroupingConfig, GroupingKind};
use crate::losses::{
    binomial_deviance_loss, contrastive_loss, diversity_loss, enumerate_pairs, margin_loss, total_loss,
    DiversityParams, LossKind, MetricLossParams, Objective, ObjectiveParams,
};
use crate::model::{Model, ModelConfig, ParamKind};
use crate::tensor::{cyclic_shift, Tensor};

pub const OP_GRAD_TOL: f64 = 1e-6;
pub const COMPOSED_GRAD_TOL: f64 = 1e-4;
pub const PERMUTATION_TOL: f64 = 1e-9;
pub const TRANSLATION_EMBED_TOL: f64 = 1e-8;
pub const TRANSLATION_MAP_TOL: f64 = 1e-6;
pub const ROW_SUM_TOL: f64 = 1e-12;
pub const ORACLE_TOL: f64 = 1e-12;

/// Instances whose relu or hinge inputs come closer than this to a kink are
/// redrawn, since central differences straddling a kink are meaningless.
const MIN_KINK_MARGIN: f64 = 100.0 * FD_STEP;

#[derive(Clone, Debug)]
pub struct SelfCheckOptions {
    pub seed: u64,
    /// Random instances per gradient check.
    pub grad_instances: usize,
    pub permutation_instances: usize,
    pub translation_instances: usize,
    pub metric_instances: usize,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        SelfCheckOptions {
            seed: 0,
            grad_instances: 20,
            permutation_instances: 100,
            translation_instances: 50,
            metric_instances: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelfCheckReport {
    pub results: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckResult> {
        self.results.iter().find(|r| !r.passed)
    }

    pub fn find(&self, suite: &str, name: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.suite == suite && r.name == name)
    }

    /// One aligned line per check.
    pub fn to_table(&self) -> String {
        let sw = self.results.iter().map(|r| r.suite.len()).max().unwrap_or(0);
        let nw = self.results.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for r in &self.results {
            let status = if r.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{status}  {:sw$}  {:nw$}  {}", r.suite, r.name, r.detail);
        }
        let passed = self.results.iter().filter(|r| r.passed).count();
        let _ = writeln!(out, "{passed}/{} checks passed", self.results.len());
        out
    }
}

fn result(suite: &'static str, name: impl Into<String>, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        suite,
        name: name.into(),
        passed,
        detail,
    }
}

/// Runs every suite.
pub fn run(opts: &SelfCheckOptions) -> Result<SelfCheckReport> {
    let mut results = Vec::new();
    results.extend(op_gradients(opts.seed, opts.grad_instances)?);
    results.extend(composed_gradients(opts.seed, opts.grad_instances)?);
    results.push(permutation_invariance(opts.seed, opts.permutation_instances)?);
    results.push(attention_row_sums(opts.seed, opts.permutation_instances)?);
    results.push(translation_invariance(opts.seed, opts.translation_instances)?);
    results.extend(loss_oracles());
    results.extend(metric_oracles(opts.seed, opts.metric_instances)?);
    Ok(SelfCheckReport { results })
}

// ---- gradients ---------------------------------------------------------

/// `Σ wᵢ·xᵢ` with fixed, distinct weights, turning any output into a scalar
/// whose gradient exercises every element.
fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (0.37 * i as f64 + 0.1).cos()).collect();
    let w = tape.constant(Tensor::new(&shape, w)?);
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

/// Entries uniform in `±[0.1, 1]`, away from relu and hinge kinks.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, 0.1, 1.0, rng);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

type OpGraph = fn(&mut Tape, &[Var]) -> Result<Var>;
type OpInputs = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

fn u(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn op_cases() -> Vec<(&'static str, OpInputs, OpGraph)> {
    vec![
        ("add", |r| vec![u(&[3, 4], r), u(&[3, 4], r)], |t, v| t.add(v[0], v[1])),
        ("sub", |r| vec![u(&[3, 4], r), u(&[3, 4], r)], |t, v| t.sub(v[0], v[1])),
        ("mul", |r| vec![u(&[3, 4], r), u(&[3, 4], r)], |t, v| t.mul(v[0], v[1])),
        ("scale", |r| vec![u(&[3, 4], r)], |t, v| Ok(t.scale(v[0], 1.7))),
        ("add_const", |r| vec![u(&[3, 4], r)], |t, v| Ok(t.add_const(v[0], 0.3))),
        ("exp", |r| vec![u(&[3, 4], r)], |t, v| Ok(t.exp(v[0]))),
        ("log", |r| vec![Tensor::uniform(&[3, 4], 0.5, 2.0, r)], |t, v| t.log(v[0])),
        ("relu", |r| vec![away_from_zero(&[3, 4], r)], |t, v| Ok(t.relu(v[0]))),
        ("hinge", |r| vec![away_from_zero(&[3, 4], r)], |t, v| Ok(t.hinge(v[0]))),
        ("softplus", |r| vec![Tensor::uniform(&[3, 4], -3.0, 3.0, r)], |t, v| Ok(t.softplus(v[0]))),
        ("sum", |r| vec![u(&[3, 4], r)], |t, v| Ok(t.sum(v[0]))),
        ("mean", |r| vec![u(&[3, 4], r)], |t, v| Ok(t.mean(v[0]))),
        ("l2_norm_rows", |r| vec![u(&[3, 4], r)], |t, v| Ok(t.l2_norm_rows(v[0]))),
        ("normalize_rows", |r| vec![u(&[3, 4], r)], |t, v| t.normalize_rows(v[0])),
        ("softmax_rows", |r| vec![Tensor::uniform(&[3, 5], -2.0, 2.0, r)], |t, v| Ok(t.softmax_rows(v[0]))),
        ("matmul", |r| vec![u(&[3, 4], r), u(&[4, 2], r)], |t, v| t.matmul(v[0], v[1])),
        ("transpose", |r| vec![u(&[3, 4], r)], |t, v| t.transpose(v[0])),
        ("reshape", |r| vec![u(&[3, 4], r)], |t, v| t.reshape(v[0], &[2, 6])),
        ("bias_add", |r| vec![u(&[3, 4], r), u(&[4], r)], |t, v| t.bias_add(v[0], v[1])),
        (
            "conv1x1",
            |r| vec![u(&[2, 3, 3, 2], r), u(&[2, 3], r), u(&[3], r)],
            |t, v| t.conv1x1(v[0], v[1], v[2]),
        ),
        (
            "conv3x3_circular",
            |r| vec![u(&[2, 4, 4, 2], r), u(&[3, 3, 2, 3], r), u(&[3], r)],
            |t, v| t.conv3x3_circular(v[0], v[1], v[2]),
        ),
        ("mean_pool_spatial", |r| vec![u(&[2, 3, 3, 2], r)], |t, v| t.mean_pool_spatial(v[0])),
        ("slice_rows", |r| vec![u(&[5, 3], r)], |t, v| t.slice_rows(v[0], 1, 3)),
        ("concat_rows", |r| vec![u(&[2, 3], r), u(&[3, 3], r)], |t, v| t.concat_rows(&[v[0], v[1]])),
        (
            "pair_distance",
            |r| vec![u(&[4, 3], r)],
            |t, v| t.pair_distance(v[0], &[(0, 1), (1, 2), (0, 3), (2, 3)]),
        ),
        (
            "pair_cosine",
            |r| vec![u(&[4, 3], r)],
            |t, v| t.pair_cosine(v[0], &[(0, 1), (1, 2), (0, 3), (2, 3)]),
        ),
    ]
}

/// Central-difference check of every tape op on `instances` random inputs.
pub fn op_gradients(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (k, (name, inputs, graph)) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let x = inputs(&mut rng);
            let report = gradcheck::check(&x, |t, v| {
                let y = graph(t, v)?;
                weighted_sum(t, y)
            })?;
            worst = worst.max(report.max_rel_err);
        }
        out.push(result(
            "gradient",
            name,
            worst <= OP_GRAD_TOL,
            format!("max rel err {worst:.2e} over {instances} instances (tol {OP_GRAD_TOL:.0e})"),
        ));
    }
    Ok(out)
}

fn composed_model(kind: LossKind, seed: u64) -> Result<(Model, MetricLossParams)> {
    let config = ModelConfig {
        backbone: BackboneConfig {
            image_size: 5,
            image_channels: 1,
            widths: vec![2, 3],
        },
        grouping: GroupingConfig {
            kind: GroupingKind::Attentive,
            groups: 2,
            value_dim: 3,
            key_dim: 3,
            normalize: true,
        },
    };
    let metric = MetricLossParams::defaults(kind);
    Ok((Model::init(seed, &config, &metric)?, metric))
}

/// Full objective (metric + diversity + L2) differentiated with respect to
/// every model parameter, for each metric loss.
pub fn composed_gradients(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    const MAX_DRAWS: usize = 50;
    let labels = [0usize, 0, 1, 1];
    let pairs = enumerate_pairs(&labels)?;
    let diversity = DiversityParams::default();
    let weights = ObjectiveParams {
        lambda_div: 0.1,
        lambda_l2: 0.01,
    };
    let mut out = Vec::new();
    for (k, kind) in [LossKind::Contrastive, LossKind::Binomial, LossKind::Margin].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1000 + k as u64);
        let (mut worst, mut done, mut redrawn) = (0.0f64, 0usize, 0usize);
        while done < instances && done + redrawn < instances * MAX_DRAWS {
            let (model, metric) = composed_model(kind, rng.random())?;
            let images = Tensor::uniform(&[labels.len(), 5, 5, 1], 0.0, 1.0, &mut rng);
            let named = model.named_params();
            // Initialization zeroes the biases; random ones keep every unit
            // and embedding row away from zero.
            let inputs: Vec<Tensor> = named
                .iter()
                .map(|(_, kind, t)| match kind {
                    ParamKind::Bias => Tensor::uniform(t.shape(), 0.05, 0.5, &mut rng),
                    _ => (*t).clone(),
                })
                .collect();
            let is_weight: Vec<bool> = named.iter().map(|(_, kind, _)| *kind == ParamKind::Weight).collect();
            let objective = Objective {
                metric: &metric,
                diversity: &diversity,
                weights: &weights,
            };
            let report = gradcheck::check(&inputs, |t, v| {
                let bound = model.bind_vars(v)?;
                let x = t.constant(images.clone());
                let head = bound.forward(t, x)?;
                let regularized: Vec<Var> = v.iter().zip(&is_weight).filter(|(_, &w)| w).map(|(&v, _)| v).collect();
                let terms = total_loss(t, head.embeddings, head.groups, &pairs, bound.eta, &regularized, &objective)?;
                Ok(terms.total)
            })?;
            if report.kink_margin < MIN_KINK_MARGIN {
                redrawn += 1;
                continue;
            }
            worst = worst.max(report.max_rel_err);
            done += 1;
        }
        out.push(result(
            "gradient",
            format!("objective/{}", kind.name()),
            done == instances && worst <= COMPOSED_GRAD_TOL,
            format!(
                "max rel err {worst:.2e} over {done} instances, {redrawn} redrawn near kinks (tol {COMPOSED_GRAD_TOL:.0e})"
            ),
        ));
    }
    Ok(out)
}

// ---- grouping properties -----------------------------------------------

fn random_a_params(channels: usize, dk: usize, dv: usize, p: usize, rng: &mut ChaCha8Rng) -> AGroupingParams {
    AGroupingParams {
        key_weight: Tensor::normal(&[channels, dk], 1.0 / (channels as f64).sqrt(), rng),
        key_bias: Tensor::normal(&[dk], 0.1, rng),
        value_weight: Tensor::normal(&[channels, dv], 1.0 / (channels as f64).sqrt(), rng),
        value_bias: Tensor::normal(&[dv], 0.1, rng),
        queries: Tensor::normal(&[dk, p], 1.0 / (dk as f64).sqrt(), rng),
    }
}

/// Reorders the positions of an `H×W×C` map: position `j` of the result
/// holds position `perm[j]` of the input.
fn permute_positions(feat: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (h, w) = (feat.shape()[0], feat.shape()[1]);
    let m = unfold_mode3(feat)?;
    let (c, hw) = m.dims2()?;
    let mut data = vec![0.0; c * hw];
    for ch in 0..c {
        for (j, &src) in perm.iter().enumerate() {
            data[ch * hw + j] = m.data()[ch * hw + src];
        }
    }
    fold_mode3(&Tensor::new(&[c, hw], data)?, h, w)
}

/// Shuffling feature positions leaves the grouped embedding unchanged and
/// permutes the attention maps the same way.
pub fn permutation_invariance(seed: u64, instances: usize) -> Result<CheckResult> {
    let (h, w, c, p, dk, dv) = (7, 7, 32, 4, 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2000);
    let (mut emb_err, mut map_err) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let params = random_a_params(c, dk, dv, p, &mut rng);
        let feat = Tensor::normal(&[h, w, c], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..h * w).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let (e0, a0) = a_grouping_forward(&feat, &params, true)?;
        let (e1, a1) = a_grouping_forward(&permute_positions(&feat, &perm)?, &params, true)?;
        emb_err = emb_err.max(e0.f.max_abs_diff(&e1.f));
        let hw = h * w;
        for g in 0..p {
            for (j, &src) in perm.iter().enumerate() {
                map_err = map_err.max((a1.scores.data()[g * hw + j] - a0.scores.data()[g * hw + src]).abs());
            }
        }
    }
    Ok(result(
        "invariance",
        "permutation",
        emb_err <= PERMUTATION_TOL && map_err == 0.0,
        format!("embedding max diff {emb_err:.2e} (tol {PERMUTATION_TOL:.0e}), map max diff {map_err:.2e} (exact) over {instances} instances"),
    ))
}

/// Every attention row is a distribution over positions.
pub fn attention_row_sums(seed: u64, instances: usize) -> Result<CheckResult> {
    let (h, w, c, p, dk, dv) = (7, 7, 32, 4, 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3000);
    let (mut worst, mut negative) = (0.0f64, false);
    for _ in 0..instances {
        let params = random_a_params(c, dk, dv, p, &mut rng);
        let feat = Tensor::normal(&[h, w, c], 1.0, &mut rng);
        let (_, maps) = a_grouping_forward(&feat, &params, true)?;
        for g in 0..p {
            let row = maps.scores.row(g);
            negative |= row.iter().any(|&v| v < 0.0);
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(result(
        "invariance",
        "attention-row-sum",
        worst <= ROW_SUM_TOL && !negative,
        format!("max |row sum - 1| {worst:.2e} (tol {ROW_SUM_TOL:.0e}) over {instances} instances"),
    ))
}

/// A cyclic shift of the input leaves the grouped embedding unchanged and
/// shifts the attention maps by the same offset.
pub fn translation_invariance(seed: u64, instances: usize) -> Result<CheckResult> {
    let (size, p, dk, dv) = (12usize, 4, 8, 8);
    let config = BackboneConfig {
        image_size: size,
        image_channels: 1,
        widths: vec![4, 8],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4000);
    let (mut emb_err, mut map_err) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let backbone = init_backbone(rng.random(), &config)?;
        let head = random_a_params(config.out_channels(), dk, dv, p, &mut rng);
        let image = Tensor::uniform(&[size, size, 1], 0.0, 1.0, &mut rng);
        let dy = rng.random_range(-(size as i64)..size as i64) as isize;
        let dx = rng.random_range(-(size as i64)..size as i64) as isize;
        let shifted = cyclic_shift(&image, dy, dx)?;
        let (e0, a0) = a_grouping_forward(&backbone_forward(&image, &backbone, &config)?, &head, true)?;
        let (e1, a1) = a_grouping_forward(&backbone_forward(&shifted, &backbone, &config)?, &head, true)?;
        emb_err = emb_err.max(e0.f.max_abs_diff(&e1.f));
        let expected = cyclic_shift(&a0.folded()?, dy, dx)?;
        map_err = map_err.max(expected.max_abs_diff(&a1.folded()?));
    }
    Ok(result(
        "invariance",
        "translation",
        emb_err <= TRANSLATION_EMBED_TOL && map_err <= TRANSLATION_MAP_TOL,
        format!(
            "embedding max diff {emb_err:.2e} (tol {TRANSLATION_EMBED_TOL:.0e}), map max diff {map_err:.2e} (tol {TRANSLATION_MAP_TOL:.0e}) over {instances} instances"
        ),
    ))
}

// ---- closed-form oracles -----------------------------------------------

fn scalar_check(name: &str, got: f64, want: f64) -> CheckResult {
    let err = (got - want).abs();
    result(
        "loss-oracle",
        name,
        err <= ORACLE_TOL,
        format!("got {got:.12e}, want {want:.12e}"),
    )
}

/// The scalar loss examples: hinge boundaries, zero exponents and the
/// softplus tails.
pub fn loss_oracles() -> Vec<CheckResult> {
    let bin = MetricLossParams::defaults(LossKind::Binomial);
    let div = DiversityParams::default();
    let ln2 = std::f64::consts::LN_2;
    let eta_grad = {
        let h = 1e-6;
        (margin_loss(1.3, true, 0.2, 1.2 + h) - margin_loss(1.3, true, 0.2, 1.2 - h)) / (2.0 * h)
    };
    vec![
        scalar_check("contrastive positive d=0.3", contrastive_loss(0.3, true, 1.0), 0.3),
        scalar_check("contrastive negative d=1.5", contrastive_loss(1.5, false, 1.0), 0.0),
        scalar_check("contrastive negative d=0.4", contrastive_loss(0.4, false, 1.0), 0.6),
        scalar_check("binomial positive s=m", binomial_deviance_loss(0.5, true, &bin), ln2),
        scalar_check("binomial negative s=m", binomial_deviance_loss(0.5, false, &bin), ln2),
        scalar_check("binomial positive s=0.9", binomial_deviance_loss(0.9, true, &bin), (-20.0f64).exp().ln_1p()),
        scalar_check("margin positive d=1.0", margin_loss(1.0, true, 0.2, 1.2), 0.0),
        scalar_check("margin negative d=1.4", margin_loss(1.4, false, 0.2, 1.2), 0.0),
        scalar_check("margin positive d=1.3", margin_loss(1.3, true, 0.2, 1.2), 0.3),
        result(
            "loss-oracle",
            "margin d(loss)/d(eta) at d=1.3",
            (eta_grad + 1.0).abs() <= 1e-6,
            format!("finite difference {eta_grad:.9}, want -1"),
        ),
        scalar_check("diversity s=mu", diversity_loss(0.5, &div), ln2),
        scalar_check("diversity s=-1", diversity_loss(-1.0, &div), (-3.0f64).exp().ln_1p()),
        scalar_check("diversity s=1", diversity_loss(1.0, &div), 1.0f64.exp().ln_1p()),
    ]
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Rank (0-based) of `j` among the neighbours of `q`: the number of other
/// items strictly closer, or equally close with a lower index.
fn brute_rank(emb: &Tensor, q: usize, j: usize) -> usize {
    let dj = sq_dist(emb.row(q), emb.row(j));
    (0..emb.shape()[0])
        .filter(|&i| i != q && i != j)
        .filter(|&i| {
            let di = sq_dist(emb.row(q), emb.row(i));
            di < dj || (di == dj && i < j)
        })
        .count()
}

fn brute_recall(emb: &Tensor, labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let hits = (0..n)
        .filter(|&q| (0..n).any(|j| j != q && labels[j] == labels[q] && brute_rank(emb, q, j) < k))
        .count();
    hits as f64 / n as f64
}

fn brute_map_at_r(emb: &Tensor, labels: &[usize]) -> f64 {
    let n = labels.len();
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let mut class_means = Vec::new();
    for &c in &classes {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let r = members.len() - 1;
        if r == 0 {
            continue;
        }
        let mut total = 0.0;
        for &q in &members {
            let ranks: Vec<usize> = members.iter().filter(|&&j| j != q).map(|&j| brute_rank(emb, q, j)).collect();
            let mut ap = 0.0;
            for &rank in &ranks {
                if rank < r {
                    let above = ranks.iter().filter(|&&o| o <= rank).count();
                    ap += above as f64 / (rank + 1) as f64;
                }
            }
            total += ap / r as f64;
        }
        class_means.push(total / members.len() as f64);
    }
    class_means.iter().sum::<f64>() / class_means.len() as f64
}

fn brute_nmi(assign: &[usize], labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let cs: BTreeSet<usize> = assign.iter().copied().collect();
    let ys: BTreeSet<usize> = labels.iter().copied().collect();
    let count = |f: &dyn Fn(usize) -> bool| (0..labels.len()).filter(|&i| f(i)).count() as f64;
    let h = |set: &BTreeSet<usize>, v: &[usize]| -> f64 {
        set.iter()
            .map(|&a| {
                let p = count(&|i| v[i] == a) / n;
                -p * p.ln()
            })
            .sum()
    };
    let (hc, hy) = (h(&cs, assign), h(&ys, labels));
    if hc + hy == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for &c in &cs {
        for &y in &ys {
            let pxy = count(&|i| assign[i] == c && labels[i] == y) / n;
            if pxy > 0.0 {
                let px = count(&|i| assign[i] == c) / n;
                let py = count(&|i| labels[i] == y) / n;
                mi += pxy * (pxy / (px * py)).ln();
            }
        }
    }
    2.0 * mi / (hc + hy)
}

fn brute_f1(assign: &[usize], labels: &[usize]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            match (assign[i] == assign[j], labels[i] == labels[j]) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                (false, false) => {}
            }
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let (p, r) = (tp / (tp + fp), tp / (tp + fneg));
    2.0 * p * r / (p + r)
}

/// Recall@K, NMI, F1 and mAP@R against brute-force definitions, plus the
/// perfect-clustering and perfect-separation cases.
pub fn metric_oracles(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5000);
    let mut worst = [0.0f64; 4];
    for _ in 0..instances {
        let n = rng.random_range(4..=20);
        let classes = rng.random_range(2..=4);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        // Coarse coordinates make distance ties common.
        let coords: Vec<f64> = (0..n * 3).map(|_| rng.random_range(0..3) as f64).collect();
        let emb = Tensor::new(&[n, 3], coords)?;
        let set = EmbeddingSet::new(emb.clone(), labels.clone())?;
        for k in 1..n.min(5) {
            worst[0] = worst[0].max((recall_at_k(&set, k)? - brute_recall(&emb, &labels, k)).abs());
        }
        let assign: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes + 1)).collect();
        worst[1] = worst[1].max((nmi_of(&assign, &labels) - brute_nmi(&assign, &labels)).abs());
        worst[2] = worst[2].max((pairwise_f1(&assign, &labels) - brute_f1(&assign, &labels)).abs());
        if let Ok(m) = map_at_r(&set) {
            worst[3] = worst[3].max((m.value - brute_map_at_r(&emb, &labels)).abs());
        }
    }
    let mut out: Vec<CheckResult> = ["recall@k", "nmi", "f1", "map@r"]
        .iter()
        .zip(worst)
        .map(|(name, err)| {
            result(
                "metric-oracle",
                *name,
                err <= ORACLE_TOL,
                format!("max diff {err:.2e} over {instances} instances (tol {ORACLE_TOL:.0e})"),
            )
        })
        .collect();

    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let relabeled: Vec<usize> = labels.iter().map(|&l| 7 - 2 * l).collect();
    let perfect_nmi = nmi_of(&relabeled, &labels);
    out.push(result(
        "metric-oracle",
        "perfect clustering nmi",
        perfect_nmi == 1.0,
        format!("nmi {perfect_nmi}"),
    ));
    let rows: Vec<Vec<f64>> = labels.iter().map(|&l| vec![10.0 * l as f64, 0.0]).collect();
    let perfect_map = map_at_r(&EmbeddingSet::new(Tensor::from_rows(&rows)?, labels)?)?.value;
    out.push(result(
        "metric-oracle",
        "perfect separation map@r",
        perfect_map == 1.0,
        format!("map@r {perfect_map}"),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::set_softmax_axis_fault;

    fn small() -> SelfCheckOptions {
        SelfCheckOptions {
            seed: 3,
            grad_instances: 3,
            permutation_instances: 5,
            translation_instances: 3,
            metric_instances: 20,
        }
    }

    #[test]
    fn clean_build_passes_everything() {
        let report = run(&small()).unwrap();
        assert!(report.all_passed(), "{}", report.to_table());
    }

    #[test]
    fn report_is_deterministic() {
        let a = run(&small()).unwrap().to_table();
        let b = run(&small()).unwrap().to_table();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_softmax_axis_fails_row_sums_only() {
        set_softmax_axis_fault(true);
        let perm = permutation_invariance(1, 5);
        let rows = attention_row_sums(1, 5);
        set_softmax_axis_fault(false);
        assert!(perm.unwrap().passed);
        assert!(!rows.unwrap().passed);
    }

    #[test]
    fn brute_rank_breaks_ties_by_index() {
        let emb = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(brute_rank(&emb, 0, 1), 0);
        assert_eq!(brute_rank(&emb, 0, 2), 1);
        assert_eq!(brute_rank(&emb, 0, 3), 2);
    }

    #[test]
    fn table_marks_failures() {
        let report = SelfCheckReport {
            results: vec![
                result("a", "x", true, "ok".into()),
                result("b", "y", false, "bad".into()),
            ],
        };
        let table = report.to_table();
        assert!(table.contains("FAIL  b  y  bad"));
        assert!(table.ends_with("1/2 checks passed\n"));
        assert_eq!(report.first_failure().unwrap().name, "y");
    }
}

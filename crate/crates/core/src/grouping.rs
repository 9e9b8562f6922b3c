//! Grouping heads: map a backbone feature map to `P` group embeddings.
//!
//! * A-grouping: shared key/value 1×1 projections, one learnable query per
//!   group, `F = softmax_rows(QᵀK) Vᵀ`.
//! * M-grouping: spatial mean pool followed by `P` independent affine maps.
//! * N-grouping: M-grouping with a single group.
//!
//! Spatial positions are unfolded row-major (W fastest): column `j` of a
//! key/value/attention matrix is position `(j / W, j % W)`.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{spatial_dims, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupingKind {
    Attentive,
    MultiLinear,
    None,
}

impl GroupingKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(GroupingKind::Attentive),
            "M" => Ok(GroupingKind::MultiLinear),
            "N" => Ok(GroupingKind::None),
            _ => Err(Error::Config(format!("unknown grouping kind {s:?} (expected A, M or N)"))),
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            GroupingKind::Attentive => "A",
            GroupingKind::MultiLinear => "M",
            GroupingKind::None => "N",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupingConfig {
    pub kind: GroupingKind,
    /// Number of groups P (forced to 1 for N-grouping).
    pub groups: usize,
    /// Per-group embedding width D_V (the full width D for N-grouping).
    pub value_dim: usize,
    pub key_dim: usize,
    /// Scale each group embedding to unit norm.
    pub normalize: bool,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            kind: GroupingKind::Attentive,
            groups: 4,
            value_dim: 32,
            key_dim: 16,
            normalize: true,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.value_dim == 0 || self.key_dim == 0 {
            return Err(Error::Config("grouping dimensions must be positive".into()));
        }
        if self.kind == GroupingKind::None && self.groups != 1 {
            return Err(Error::Config(format!(
                "N-grouping has exactly one group, got groups = {}",
                self.groups
            )));
        }
        Ok(())
    }

    /// Shape of one image's grouped embedding, `(P, D_V)`.
    pub fn embedding_shape(&self) -> (usize, usize) {
        (self.groups, self.value_dim)
    }
}

/// Parameters of the attentive head.
#[derive(Clone, Debug, PartialEq)]
pub struct AGroupingParams {
    /// `C×D_K`
    pub key_weight: Tensor,
    pub key_bias: Tensor,
    /// `C×D_V`
    pub value_weight: Tensor,
    pub value_bias: Tensor,
    /// `D_K×P`; column `p` is the query of group `p`.
    pub queries: Tensor,
}

/// `P` stacked affine maps `C → D_V`: the weight is `C×(P·D_V)` and column
/// block `p` is projection `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub groups: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams {
    Attentive(AGroupingParams),
    MultiLinear(ProjectionParams),
    Single(ProjectionParams),
}

fn glorot(c_in: usize, c_out: usize, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (c_in + c_out) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl AGroupingParams {
    /// Glorot-uniform projections, zero biases, queries `N(0, 1/D_K)`.
    pub fn init(seed: u64, channels: usize, config: &GroupingConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dk, dv, p) = (config.key_dim, config.value_dim, config.groups);
        AGroupingParams {
            key_weight: glorot(channels, dk, &[channels, dk], &mut rng),
            key_bias: Tensor::zeros(&[dk]),
            value_weight: glorot(channels, dv, &[channels, dv], &mut rng),
            value_bias: Tensor::zeros(&[dv]),
            queries: Tensor::normal(&[dk, p], 1.0 / (dk as f64).sqrt(), &mut rng),
        }
    }

    pub fn groups(&self) -> usize {
        self.queries.shape()[1]
    }

    fn channels(&self) -> usize {
        self.key_weight.shape()[0]
    }
}

impl ProjectionParams {
    pub fn init(seed: u64, channels: usize, groups: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = Tensor::zeros(&[channels, groups * dim]);
        // Draw each projection separately so group p does not depend on P.
        for p in 0..groups {
            let block = glorot(channels, dim, &[channels, dim], &mut rng);
            for c in 0..channels {
                for j in 0..dim {
                    weight.set(&[c, p * dim + j], block.at(&[c, j]));
                }
            }
        }
        ProjectionParams {
            weight,
            bias: Tensor::zeros(&[groups * dim]),
            groups,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1] / self.groups
    }
}

impl HeadParams {
    pub fn init(seed: u64, channels: usize, config: &GroupingConfig) -> Result<Self> {
        config.validate()?;
        Ok(match config.kind {
            GroupingKind::Attentive => HeadParams::Attentive(AGroupingParams::init(seed, channels, config)),
            GroupingKind::MultiLinear => HeadParams::MultiLinear(ProjectionParams::init(
                seed,
                channels,
                config.groups,
                config.value_dim,
            )),
            GroupingKind::None => HeadParams::Single(ProjectionParams::init(seed, channels, 1, config.value_dim)),
        })
    }

    pub fn kind(&self) -> GroupingKind {
        match self {
            HeadParams::Attentive(_) => GroupingKind::Attentive,
            HeadParams::MultiLinear(_) => GroupingKind::MultiLinear,
            HeadParams::Single(_) => GroupingKind::None,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundHead {
        match self {
            HeadParams::Attentive(p) => BoundHead::Attentive {
                key_weight: tape.leaf(p.key_weight.clone(), trainable),
                key_bias: tape.leaf(p.key_bias.clone(), trainable),
                value_weight: tape.leaf(p.value_weight.clone(), trainable),
                value_bias: tape.leaf(p.value_bias.clone(), trainable),
                queries: tape.leaf(p.queries.clone(), trainable),
            },
            HeadParams::MultiLinear(p) | HeadParams::Single(p) => BoundHead::Projection {
                weight: tape.leaf(p.weight.clone(), trainable),
                bias: tape.leaf(p.bias.clone(), trainable),
                groups: p.groups,
            },
        }
    }
}

/// Head parameters recorded on a tape.
pub enum BoundHead {
    Attentive {
        key_weight: Var,
        key_bias: Var,
        value_weight: Var,
        value_bias: Var,
        queries: Var,
    },
    Projection {
        weight: Var,
        bias: Var,
        groups: usize,
    },
}

/// Output of a head over a batch of `B` feature maps.
pub struct HeadOutput {
    /// `(B·P)×D_V`; row `b·P + p` is group `p` of image `b`.
    pub embeddings: Var,
    /// Per image `P×HW` attention scores (A-grouping only).
    pub attention: Vec<Var>,
    pub groups: usize,
}

impl BoundHead {
    pub fn forward(&self, tape: &mut Tape, feat: Var, normalize: bool) -> Result<HeadOutput> {
        let fshape = tape.shape(feat).to_vec();
        let (b, h, w, _) = spatial_dims(&fshape).ok_or_else(|| Error::dim("grouping", &fshape, &[]))?;
        let hw = h * w;
        let (raw, attention, groups) = match *self {
            BoundHead::Attentive {
                key_weight,
                key_bias,
                value_weight,
                value_bias,
                queries,
            } => {
                let (dk, p) = tape.value(queries).dims2()?;
                let keys = tape.conv1x1(feat, key_weight, key_bias)?;
                let keys = tape.reshape(keys, &[b * hw, dk])?;
                let values = tape.conv1x1(feat, value_weight, value_bias)?;
                let dv = *tape.shape(values).last().expect("rank");
                let values = tape.reshape(values, &[b * hw, dv])?;
                let qt = tape.transpose(queries)?;
                let mut rows = Vec::with_capacity(b);
                let mut maps = Vec::with_capacity(b);
                for n in 0..b {
                    let kt = tape.slice_rows(keys, n * hw, hw)?;
                    let k = tape.transpose(kt)?;
                    let a = attend_vars(tape, qt, k)?;
                    let vt = tape.slice_rows(values, n * hw, hw)?;
                    rows.push(tape.matmul(a, vt)?);
                    maps.push(a);
                }
                (tape.concat_rows(&rows)?, maps, p)
            }
            BoundHead::Projection { weight, bias, groups } => {
                let pooled = tape.mean_pool_spatial(feat)?;
                let proj = tape.matmul(pooled, weight)?;
                let proj = tape.bias_add(proj, bias)?;
                let dim = tape.shape(proj)[1] / groups;
                (tape.reshape(proj, &[b * groups, dim])?, Vec::new(), groups)
            }
        };
        let embeddings = if normalize { tape.normalize_rows(raw)? } else { raw };
        Ok(HeadOutput {
            embeddings,
            attention,
            groups,
        })
    }
}

thread_local! {
    static SOFTMAX_AXIS_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Debug hook for the self-check: while set, attention on the calling
/// thread normalizes over groups (columns) instead of positions.
#[doc(hidden)]
pub fn set_softmax_axis_fault(on: bool) {
    SOFTMAX_AXIS_FAULT.with(|f| f.set(on));
}

/// `softmax_rows(Qᵀ K)` given `Qᵀ` (`P×D_K`) and `K` (`D_K×HW`).
fn attend_vars(tape: &mut Tape, qt: Var, k: Var) -> Result<Var> {
    let logits = tape.matmul(qt, k)?;
    if SOFTMAX_AXIS_FAULT.with(Cell::get) {
        let t = tape.transpose(logits)?;
        let s = tape.softmax_rows(t);
        return tape.transpose(s);
    }
    Ok(tape.softmax_rows(logits))
}

// ---- tensor-level contract ---------------------------------------------

/// Group embeddings of one image: row `p` of `f` is group `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedEmbedding {
    pub f: Tensor,
}

impl GroupedEmbedding {
    pub fn groups(&self) -> usize {
        self.f.shape()[0]
    }

    /// All groups concatenated into one vector of length `P·D_V`.
    pub fn concatenated(&self) -> &[f64] {
        self.f.data()
    }
}

/// Attention scores `P×HW` of one image plus the spatial extents needed to
/// fold them back.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub scores: Tensor,
    pub height: usize,
    pub width: usize,
}

impl AttentionMaps {
    /// `H×W×P` view of the scores.
    pub fn folded(&self) -> Result<Tensor> {
        fold_mode3(&self.scores, self.height, self.width)
    }

    /// Group `p`'s map as an `H×W` matrix.
    pub fn group_map(&self, p: usize) -> Result<Tensor> {
        let (groups, hw) = self.scores.dims2()?;
        if p >= groups {
            return Err(Error::Usage(format!("group {p} out of range (P = {groups})")));
        }
        Tensor::new(&[self.height, self.width], self.scores.data()[p * hw..(p + 1) * hw].to_vec())
    }
}

/// Mode-3 unfolding `H×W×C → C×HW` with row-major position order.
pub fn unfold_mode3(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = match *t.shape() {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::dim("unfold", t.shape(), &[])),
    };
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for j in 0..hw {
        for k in 0..c {
            out[k * hw + j] = t.data()[j * c + k];
        }
    }
    Tensor::new(&[c, hw], out)
}

/// Inverse of [`unfold_mode3`]: `C×HW → H×W×C`.
pub fn fold_mode3(m: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, hw) = m.dims2()?;
    if hw != h * w {
        return Err(Error::dim("fold", m.shape(), &[h, w]));
    }
    let mut out = vec![0.0; c * hw];
    for j in 0..hw {
        for k in 0..c {
            out[j * c + k] = m.data()[k * hw + j];
        }
    }
    Tensor::new(&[h, w, c], out)
}

fn feature_dims(feat: &Tensor, channels: usize) -> Result<(usize, usize)> {
    match *feat.shape() {
        [h, w, c] if c == channels => Ok((h, w)),
        _ => Err(Error::dim("grouping", feat.shape(), &[channels])),
    }
}

/// Key and value matrices (`D_K×HW`, `D_V×HW`): the mode-3 unfoldings of
/// the 1×1-projected feature map.
pub fn project_key_value(feat: &Tensor, params: &AGroupingParams) -> Result<(Tensor, Tensor)> {
    feature_dims(feat, params.channels())?;
    let mut tape = Tape::new();
    let x = tape.constant(feat.clone());
    let wk = tape.constant(params.key_weight.clone());
    let bk = tape.constant(params.key_bias.clone());
    let wv = tape.constant(params.value_weight.clone());
    let bv = tape.constant(params.value_bias.clone());
    let k = tape.conv1x1(x, wk, bk)?;
    let v = tape.conv1x1(x, wv, bv)?;
    Ok((unfold_mode3(tape.value(k))?, unfold_mode3(tape.value(v))?))
}

/// `A = softmax_rows(Qᵀ K)` for `Q: D_K×P`, `K: D_K×HW`.
pub fn attend(queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
    let (dq, _) = queries.dims2()?;
    let (dk, _) = keys.dims2()?;
    if dq != dk {
        return Err(Error::dim("attend", queries.shape(), keys.shape()));
    }
    let mut tape = Tape::new();
    let qt = tape.constant(queries.transpose()?);
    let k = tape.constant(keys.clone());
    let a = attend_vars(&mut tape, qt, k)?;
    Ok(tape.value(a).clone())
}

/// `F = A Vᵀ` for `A: P×HW`, `V: D_V×HW`.
pub fn pool(scores: &Tensor, values: &Tensor) -> Result<Tensor> {
    let (_, hw) = scores.dims2()?;
    let (_, hv) = values.dims2()?;
    if hw != hv {
        return Err(Error::dim("pool", scores.shape(), values.shape()));
    }
    let mut tape = Tape::new();
    let a = tape.constant(scores.clone());
    let vt = tape.constant(values.transpose()?);
    let f = tape.matmul(a, vt)?;
    Ok(tape.value(f).clone())
}

fn finish(f: Tensor, normalize: bool) -> Result<GroupedEmbedding> {
    if !normalize {
        return Ok(GroupedEmbedding { f });
    }
    let mut tape = Tape::new();
    let x = tape.constant(f);
    let y = tape.normalize_rows(x)?;
    Ok(GroupedEmbedding {
        f: tape.value(y).clone(),
    })
}

/// Full A-grouping for one `H×W×C` feature map.
pub fn a_grouping_forward(
    feat: &Tensor,
    params: &AGroupingParams,
    normalize: bool,
) -> Result<(GroupedEmbedding, AttentionMaps)> {
    let (h, w) = feature_dims(feat, params.channels())?;
    let (k, v) = project_key_value(feat, params)?;
    let scores = attend(&params.queries, &k)?;
    let f = pool(&scores, &v)?;
    Ok((
        finish(f, normalize)?,
        AttentionMaps {
            scores,
            height: h,
            width: w,
        },
    ))
}

fn projection_forward(feat: &Tensor, params: &ProjectionParams, normalize: bool) -> Result<GroupedEmbedding> {
    let channels = params.weight.shape()[0];
    feature_dims(feat, channels)?;
    let mut tape = Tape::new();
    let x = tape.constant(feat.clone());
    let head = BoundHead::Projection {
        weight: tape.constant(params.weight.clone()),
        bias: tape.constant(params.bias.clone()),
        groups: params.groups,
    };
    let out = head.forward(&mut tape, x, false)?;
    finish(tape.value(out.embeddings).clone(), normalize)
}

/// Mean pool over positions, then `P` independent affine maps.
pub fn m_grouping_forward(feat: &Tensor, params: &ProjectionParams, normalize: bool) -> Result<GroupedEmbedding> {
    projection_forward(feat, params, normalize)
}

/// Single-embedding baseline (one `C → D` projection).
pub fn n_grouping_forward(feat: &Tensor, params: &ProjectionParams, normalize: bool) -> Result<GroupedEmbedding> {
    if params.groups != 1 {
        return Err(Error::Usage(format!(
            "N-grouping expects one projection, got {}",
            params.groups
        )));
    }
    projection_forward(feat, params, normalize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cfg(p: usize, dk: usize, dv: usize) -> GroupingConfig {
        GroupingConfig {
            kind: GroupingKind::Attentive,
            groups: p,
            value_dim: dv,
            key_dim: dk,
            normalize: true,
        }
    }

    #[test]
    fn identity_keys_on_single_position() {
        let c = 3;
        let mut params = AGroupingParams::init(0, c, &cfg(2, c, 2));
        params.key_weight = Tensor::identity(c);
        let feat = Tensor::new(&[1, 1, c], vec![0.5, -1.0, 2.0]).unwrap();
        let (k, _) = project_key_value(&feat, &params).unwrap();
        assert_eq!(k.shape(), &[3, 1]);
        assert_eq!(k.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn key_columns_follow_row_major_positions() {
        let c = 4;
        let params = AGroupingParams::init(1, c, &cfg(2, 3, 5));
        let feat = Tensor::uniform(&[2, 2, c], -1.0, 1.0, &mut rng(3));
        let (k, v) = project_key_value(&feat, &params).unwrap();
        assert_eq!(v.shape(), &[5, 4]);
        for y in 0..2 {
            for x in 0..2 {
                let j = y * 2 + x;
                for d in 0..3 {
                    let want: f64 = (0..c)
                        .map(|ch| feat.at(&[y, x, ch]) * params.key_weight.at(&[ch, d]))
                        .sum::<f64>()
                        + params.key_bias.at(&[d]);
                    assert!((k.at(&[d, j]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_features_give_zero_keys() {
        let params = AGroupingParams::init(2, 3, &cfg(2, 3, 3));
        let (k, v) = project_key_value(&Tensor::zeros(&[2, 3, 3]), &params).unwrap();
        assert!(k.data().iter().chain(v.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let params = AGroupingParams::init(2, 3, &cfg(2, 3, 3));
        let err = project_key_value(&Tensor::zeros(&[2, 2, 4]), &params).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn zero_queries_attend_uniformly() {
        let k = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng(4));
        let a = attend(&Tensor::zeros(&[4, 3]), &k).unwrap();
        for v in a.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_key_saturates_attention() {
        let q = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        let k = Tensor::new(&[2, 3], vec![0.0, 60.0, 5.0, 1.0, 1.0, 1.0]).unwrap();
        let a = attend(&q, &k).unwrap();
        assert!(a.at(&[0, 1]) >= 1.0 - 1e-20);
    }

    #[test]
    fn pool_selects_and_averages() {
        let v = Tensor::from_rows(&[vec![1., 2., 3.], vec![4., 5., 6.]]).unwrap();
        let onehot = Tensor::from_rows(&[vec![0., 0., 1.], vec![1., 0., 0.]]).unwrap();
        let f = pool(&onehot, &v).unwrap();
        assert_eq!(f.data(), &[3., 6., 1., 4.]);
        let uniform = Tensor::full(&[1, 3], 1.0 / 3.0);
        let f = pool(&uniform, &v).unwrap();
        assert!((f.at(&[0, 0]) - 2.0).abs() < 1e-15);
        assert!((f.at(&[0, 1]) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn single_position_rows_equal_normalized_value() {
        let c = 5;
        let params = AGroupingParams::init(9, c, &cfg(3, 4, 4));
        let feat = Tensor::uniform(&[1, 1, c], 0.1, 1.0, &mut rng(9));
        let (g, maps) = a_grouping_forward(&feat, &params, true).unwrap();
        assert!(maps.scores.data().iter().all(|&a| a == 1.0));
        let (_, v) = project_key_value(&feat, &params).unwrap();
        let n = v.sq_norm().sqrt();
        for p in 0..3 {
            for d in 0..4 {
                assert!((g.f.at(&[p, d]) - v.at(&[d, 0]) / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_projections_give_identical_rows() {
        let c = 4;
        let mut params = ProjectionParams::init(0, c, 3, 2);
        for ch in 0..c {
            for p in 1..3 {
                for j in 0..2 {
                    let w = params.weight.at(&[ch, j]);
                    params.weight.set(&[ch, p * 2 + j], w);
                }
            }
        }
        let feat = Tensor::uniform(&[3, 3, c], 0.0, 1.0, &mut rng(1));
        let g = m_grouping_forward(&feat, &params, true).unwrap();
        assert_eq!(g.f.row(0), g.f.row(1));
        assert_eq!(g.f.row(0), g.f.row(2));
    }

    #[test]
    fn constant_feature_map_pools_to_channel_vector() {
        let c = 3;
        let params = ProjectionParams::init(0, c, 1, c);
        let mut p = params.clone();
        p.weight = Tensor::identity(c);
        let feat = Tensor::new(&[2, 2, c], [0.2, -0.4, 0.9].repeat(4)).unwrap();
        let g = n_grouping_forward(&feat, &p, false).unwrap();
        for (a, b) in g.f.data().iter().zip([0.2, -0.4, 0.9]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn n_grouping_equals_single_m_grouping() {
        let params = ProjectionParams::init(6, 5, 1, 7);
        let feat = Tensor::uniform(&[3, 2, 5], -1.0, 1.0, &mut rng(6));
        assert_eq!(
            n_grouping_forward(&feat, &params, true).unwrap(),
            m_grouping_forward(&feat, &params, true).unwrap()
        );
    }

    #[test]
    fn dead_projection_hits_norm_guard() {
        let mut params = ProjectionParams::init(6, 5, 1, 7);
        params.weight = Tensor::zeros(&[5, 7]);
        let feat = Tensor::uniform(&[3, 2, 5], -1.0, 1.0, &mut rng(6));
        let err = n_grouping_forward(&feat, &params, true).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn fold_unfold_round_trip() {
        let t = Tensor::uniform(&[3, 4, 2], -1.0, 1.0, &mut rng(8));
        let m = unfold_mode3(&t).unwrap();
        assert_eq!(fold_mode3(&m, 3, 4).unwrap(), t);
        assert_eq!(unfold_mode3(&fold_mode3(&m, 3, 4).unwrap()).unwrap(), m);
    }
}

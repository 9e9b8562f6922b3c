//! Backbone + grouping head (+ the margin loss's η) as one parameter set.

use crate::autodiff::{Tape, Var};
use crate::backbone::{init_backbone, BackboneConfig, BackboneParams, BoundBackbone};
use crate::error::{Error, Result};
use crate::grouping::{AttentionMaps, BoundHead, GroupedEmbedding, GroupingConfig, GroupingKind, HeadOutput, HeadParams};
use crate::losses::{LossKind, MetricLossParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub grouping: GroupingConfig,
}


impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.grouping.validate()
    }
}

/// How a parameter is treated by the optimizer and the L2 term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// The margin loss's learnable boundary; own learning rate, never
    /// regularized.
    Eta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub head: HeadParams,
    /// Shape `[1]`; present only for the margin loss.
    pub eta: Option<Tensor>,
}

const HEAD_STREAM: u64 = 0x5eed_0000_0000_0001;

impl Model {
    pub fn init(seed: u64, config: &ModelConfig, metric: &MetricLossParams) -> Result<Self> {
        config.validate()?;
        let backbone = init_backbone(seed, &config.backbone)?;
        let head = HeadParams::init(seed ^ HEAD_STREAM, config.backbone.out_channels(), &config.grouping)?;
        let eta = (metric.kind == LossKind::Margin).then(|| Tensor::scalar(metric.eta_init));
        Ok(Model {
            config: config.clone(),
            backbone,
            head,
            eta,
        })
    }

    pub fn kind(&self) -> GroupingKind {
        self.head.kind()
    }

    pub fn groups(&self) -> usize {
        self.config.grouping.groups
    }

    /// Every trainable tensor in a fixed order: backbone layers, head, η.
    pub fn named_params(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.layers.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), ParamKind::Weight, &l.weight));
            out.push((format!("backbone.{i}.bias"), ParamKind::Bias, &l.bias));
        }
        match &self.head {
            HeadParams::Attentive(p) => {
                out.push(("head.key.weight".into(), ParamKind::Weight, &p.key_weight));
                out.push(("head.key.bias".into(), ParamKind::Bias, &p.key_bias));
                out.push(("head.value.weight".into(), ParamKind::Weight, &p.value_weight));
                out.push(("head.value.bias".into(), ParamKind::Bias, &p.value_bias));
                out.push(("head.queries".into(), ParamKind::Weight, &p.queries));
            }
            HeadParams::MultiLinear(p) | HeadParams::Single(p) => {
                out.push(("head.proj.weight".into(), ParamKind::Weight, &p.weight));
                out.push(("head.proj.bias".into(), ParamKind::Bias, &p.bias));
            }
        }
        if let Some(eta) = &self.eta {
            out.push(("loss.eta".into(), ParamKind::Eta, eta));
        }
        out
    }

    /// Mutable access in the same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.backbone.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        match &mut self.head {
            HeadParams::Attentive(p) => {
                out.push(&mut p.key_weight);
                out.push(&mut p.key_bias);
                out.push(&mut p.value_weight);
                out.push(&mut p.value_bias);
                out.push(&mut p.queries);
            }
            HeadParams::MultiLinear(p) | HeadParams::Single(p) => {
                out.push(&mut p.weight);
                out.push(&mut p.bias);
            }
        }
        if let Some(eta) = &mut self.eta {
            out.push(eta);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, _, t)| tape.leaf(t.clone(), trainable))
            .collect();
        self.bind_vars(&vars).expect("one variable per parameter")
    }

    /// Uses already recorded variables, one per parameter in
    /// [`named_params`](Self::named_params) order, as the model's weights.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let expected = self.named_params().len();
        if vars.len() != expected {
            return Err(Error::Usage(format!(
                "model has {expected} parameters, got {} variables",
                vars.len()
            )));
        }
        let n = self.backbone.layers.len();
        let backbone = BoundBackbone {
            layers: (0..n).map(|i| (vars[2 * i], vars[2 * i + 1])).collect(),
        };
        let rest = &vars[2 * n..];
        let (head, rest) = match &self.head {
            HeadParams::Attentive(_) => (
                BoundHead::Attentive {
                    key_weight: rest[0],
                    key_bias: rest[1],
                    value_weight: rest[2],
                    value_bias: rest[3],
                    queries: rest[4],
                },
                &rest[5..],
            ),
            HeadParams::MultiLinear(p) | HeadParams::Single(p) => (
                BoundHead::Projection {
                    weight: rest[0],
                    bias: rest[1],
                    groups: p.groups,
                },
                &rest[2..],
            ),
        };
        Ok(BoundModel {
            backbone,
            head,
            eta: rest.first().copied(),
            params: vars.to_vec(),
            normalize: self.config.grouping.normalize,
        })
    }

    fn check_batch(&self, images: &Tensor) -> Result<usize> {
        let b = &self.config.backbone;
        match *images.shape() {
            [n, h, w, c] if h == b.image_size && w == b.image_size && c == b.image_channels => Ok(n),
            _ => Err(Error::Config(format!(
                "image batch {:?} does not match configured {s}×{s}×{c}",
                images.shape(),
                s = b.image_size,
                c = b.image_channels
            ))),
        }
    }

    /// Forward pass without gradients over a `B×H×W×C` batch.
    pub fn embed_batch(&self, images: &Tensor) -> Result<Vec<(GroupedEmbedding, Option<AttentionMaps>)>> {
        let n = self.check_batch(images)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = bound.forward(&mut tape, x)?;
        let emb = tape.value(out.embeddings);
        let (_, d) = emb.dims2()?;
        let p = out.groups;
        let s = self.config.backbone.image_size;
        (0..n)
            .map(|i| {
                let f = Tensor::new(&[p, d], emb.data()[i * p * d..(i + 1) * p * d].to_vec())?;
                let maps = out.attention.get(i).map(|&a| AttentionMaps {
                    scores: tape.value(a).clone(),
                    height: s,
                    width: s,
                });
                Ok((GroupedEmbedding { f }, maps))
            })
            .collect()
    }

    /// Embeds many `H×W×C` images in fixed-size chunks, optionally spread
    /// over `threads` workers. Results do not depend on the thread count.
    pub fn embed_images(
        &self,
        images: &[&Tensor],
        threads: usize,
    ) -> Result<Vec<(GroupedEmbedding, Option<AttentionMaps>)>> {
        const CHUNK: usize = 32;
        let chunks: Vec<&[&Tensor]> = images.chunks(CHUNK).collect();
        let run = |chunk: &[&Tensor]| -> Result<Vec<(GroupedEmbedding, Option<AttentionMaps>)>> {
            let batch = stack_images(chunk)?;
            self.embed_batch(&batch)
        };
        let threads = threads.max(1).min(chunks.len().max(1));
        let mut results: Vec<Option<Result<Vec<_>>>> = (0..chunks.len()).map(|_| None).collect();
        if threads == 1 {
            for (slot, chunk) in results.iter_mut().zip(&chunks) {
                *slot = Some(run(chunk));
            }
        } else {
            std::thread::scope(|s| {
                let per = chunks.len().div_ceil(threads);
                let handles: Vec<_> = results
                    .chunks_mut(per)
                    .zip(chunks.chunks(per))
                    .map(|(slots, work)| {
                        s.spawn(move || {
                            for (slot, chunk) in slots.iter_mut().zip(work) {
                                *slot = Some(run(chunk));
                            }
                        })
                    })
                    .collect();
                for h in handles {
                    h.join().expect("embedding worker panicked");
                }
            });
        }
        let mut out = Vec::with_capacity(images.len());
        for r in results {
            out.extend(r.expect("filled")?);
        }
        Ok(out)
    }
}

/// Stacks equally sized `H×W×C` images into `B×H×W×C`.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Usage("empty image batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::dim("stack_images", &shape, img.shape()));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(&shape);
    Tensor::new(&full, data)
}

/// Model parameters recorded on a tape.
pub struct BoundModel {
    pub backbone: BoundBackbone,
    pub head: BoundHead,
    pub eta: Option<Var>,
    /// Same order as [`Model::named_params`].
    pub params: Vec<Var>,
    normalize: bool,
}

impl BoundModel {
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<HeadOutput> {
        let feat = self.backbone.forward(tape, images)?;
        self.head.forward(tape, feat, self.normalize)
    }
}

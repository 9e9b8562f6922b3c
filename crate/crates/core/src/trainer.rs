//! One optimization step and the epoch loop around it.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use crate::autodiff::Tape;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{BatchSampler, Dataset, SamplerConfig};
use crate::error::{Error, Result};
use crate::losses::{enumerate_pairs, total_loss, DiversityParams, MetricLossParams, Objective, ObjectiveParams};
use crate::model::{Model, ModelConfig, ParamKind};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.agmt";
pub const LOG_FILE: &str = "train.log";

/// Keeps the sampler's stream apart from the initializer's.
const SAMPLER_STREAM: u64 = 0x0bad_5eed_0000_0002;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub metric: MetricLossParams,
    pub diversity: DiversityParams,
    pub weights: ObjectiveParams,
}

impl LossConfig {
    pub fn objective(&self) -> Objective<'_> {
        Objective {
            metric: &self.metric,
            diversity: &self.diversity,
            weights: &self.weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.metric.validate()?;
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` leaves gradients untouched.
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 30,
            classes_per_batch: 10,
            samples_per_class: 4,
            seed: 0,
            clip_norm: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Config("samples_per_class must be at least 2 to form positive pairs".into()));
        }
        if self.classes_per_batch < 2 {
            return Err(Error::Config("classes_per_batch must be at least 2 to form negative pairs".into()));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            classes_per_batch: self.classes_per_batch,
            samples_per_class: self.samples_per_class,
            seed: self.seed ^ SAMPLER_STREAM,
        }
    }
}

/// Loss terms of one step, measured before the parameter update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// 1-based index of the update this report belongs to.
    pub step: u64,
    pub total: f64,
    pub metric: f64,
    pub diversity: f64,
    pub l2: f64,
}

impl StepReport {
    pub fn log_line(&self) -> String {
        format!(
            "step={} total={:e} metric={:e} diversity={:e} l2={:e}",
            self.step, self.total, self.metric, self.diversity, self.l2
        )
    }
}

/// A model together with its optimizer state and objective.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub loss: LossConfig,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model, loss: LossConfig, config: TrainConfig) -> Result<Self> {
        loss.validate()?;
        config.validate()?;
        let sizes: Vec<usize> = model.named_params().iter().map(|(_, _, t)| t.len()).collect();
        Ok(Trainer {
            adam: Adam::new(config.adam.clone(), &sizes),
            model,
            loss,
            config,
        })
    }

    /// Fresh parameters drawn from `config.seed`.
    pub fn init(model: &ModelConfig, loss: LossConfig, config: TrainConfig) -> Result<Self> {
        let m = Model::init(config.seed, model, &loss.metric)?;
        Self::new(m, loss, config)
    }

    fn learning_rates(&self) -> Vec<f64> {
        self.model
            .named_params()
            .iter()
            .map(|(_, kind, _)| match kind {
                ParamKind::Eta => self.loss.metric.lr_eta,
                _ => self.config.learning_rate,
            })
            .collect()
    }

    /// Forward, backward and one ADAM update on a `B×H×W×C` batch.
    pub fn step(&mut self, images: &Tensor, labels: &[usize]) -> Result<StepReport> {
        let pairs = enumerate_pairs(labels)?;
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let x = tape.constant(images.clone());
        let out = bound.forward(&mut tape, x)?;
        let named = self.model.named_params();
        let regularized: Vec<_> = bound
            .params
            .iter()
            .zip(&named)
            .filter(|(_, (_, kind, _))| *kind == ParamKind::Weight)
            .map(|(&v, _)| v)
            .collect();
        let terms = total_loss(
            &mut tape,
            out.embeddings,
            out.groups,
            &pairs,
            bound.eta,
            &regularized,
            &self.loss.objective(),
        )?;
        let scalar = |v| tape.value(v).data()[0];
        let step = self.adam.step + 1;
        let report = StepReport {
            step,
            total: scalar(terms.total),
            metric: scalar(terms.metric),
            diversity: terms.diversity.map_or(0.0, scalar),
            l2: terms.l2.map_or(0.0, scalar),
        };
        if !report.total.is_finite() {
            let detail = match tape.first_non_finite() {
                Some((node, op)) => format!("first produced by {op} (tape node {node})"),
                None => "no intermediate is non-finite".into(),
            };
            return Err(Error::Numeric(format!("non-finite loss at step {step}: {detail}")));
        }
        tape.backward(terms.total)?;
        let mut grads = Vec::with_capacity(named.len());
        for (&v, (name, _, t)) in bound.params.iter().zip(&named) {
            let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape()));
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name} at step {step}")));
            }
            grads.push(g);
        }
        drop(named);
        if let Some(max) = self.config.clip_norm {
            let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
            if norm > max {
                let s = max / norm;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let lrs = self.learning_rates();
        self.adam.update(&mut self.model.params_mut(), &grads, &lrs)?;
        Ok(report)
    }

    pub fn steps_per_epoch(&self, train_images: usize) -> u64 {
        (train_images / self.config.batch_size()).max(1) as u64
    }

    /// Trains until `config.epochs` epochs are done, continuing from
    /// `adam.step`. With `out_dir`, appends every step to the training log
    /// and saves a checkpoint after each epoch.
    pub fn fit(
        &mut self,
        data: &Dataset,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        let sampler = BatchSampler::new(data, self.config.sampler())?;
        let per_epoch = self.steps_per_epoch(data.len());
        let total = per_epoch * self.config.epochs as u64;
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(LOG_FILE);
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        let mut reports = Vec::new();
        for step in self.adam.step..total {
            let batch = sampler.batch_at(data, step)?;
            let r = self.step(&batch.images, &batch.labels)?;
            if let Some((f, path)) = &mut log {
                writeln!(f, "{}", r.log_line()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            on_step(&r);
            reports.push(r);
            if (step + 1) % per_epoch == 0 {
                if let Some(dir) = out_dir {
                    self.save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        Ok(reports)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.adam)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        load_checkpoint(path, &mut self.model, &mut self.adam)
    }
}

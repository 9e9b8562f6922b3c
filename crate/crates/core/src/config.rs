//! Flat `key=value` run configuration.
//!
//! One pair per line, `#` starts a comment. Keys are grouped by prefix
//! (`data.`, `model.`, `loss.`, `train.`, `eval.`); unknown keys are
//! rejected. [`RunConfig::to_text`] prints every key with its resolved
//! value, and parsing that text reproduces the same configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::grouping::GroupingKind;
use crate::interpret::ExemplarStat;
use crate::losses::{DiversityParams, LossKind, MetricLossParams, ObjectiveParams};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::trainer::{LossConfig, TrainConfig};

/// Where images come from and how classes are split.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Directory of class folders; `None` generates the synthetic set.
    pub dir: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            classes: 40,
            per_class: 64,
            image_size: 32,
            channels: 1,
            seed: 0,
            train_fraction: 0.5,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub cluster_seed: u64,
    pub top: usize,
    pub exemplar_stat: ExemplarStat,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 2, 4, 8],
            cluster_seed: 0,
            top: 12,
            exemplar_stat: ExemplarStat::Max,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig {
                metric: MetricLossParams::defaults(LossKind::Margin),
                diversity: DiversityParams::default(),
                weights: ObjectiveParams {
                    lambda_div: 0.01,
                    lambda_l2: 1e-5,
                },
            },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 2] = ["section-4.2", "section-4.3"];

/// Pairs applied by a named preset, before any explicit key.
fn preset_pairs(name: &str) -> Result<&'static [(&'static str, &'static str)]> {
    match name {
        "section-4.2" => Ok(&[
            ("loss.kind", "margin"),
            ("model.groups", "3"),
            ("model.value_dim", "170"),
            ("loss.lambda_div", "0.02"),
            ("loss.lambda_l2", "0.003"),
        ]),
        "section-4.3" => Ok(&[
            ("model.groups", "4"),
            ("model.value_dim", "128"),
            ("loss.lambda_div", "0.01"),
            ("loss.lambda_l2", "0.001"),
        ]),
        _ => Err(Error::Config(format!(
            "unknown preset {name:?} (known: {})",
            PRESETS.join(", ")
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Splits config text into `(line number, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Parses config text, then applies `overrides` (`key=value`) on top.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = parse_pairs(text)?.into_iter().map(|(_, k, v)| (k, v)).collect();
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some((_, name)) = pairs.iter().rev().find(|(k, _)| k == "train.preset") {
            if name != "none" {
                for (k, v) in preset_pairs(name)? {
                    cfg.set(k, v)?;
                }
                cfg.preset = Some(name.clone());
            }
        }
        let mut explicit = BTreeSet::new();
        for (k, v) in pairs {
            if k != "train.preset" {
                cfg.set(k, v)?;
                explicit.insert(k.as_str());
            }
        }
        cfg.resolve(&explicit);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills values whose defaults depend on other keys.
    fn resolve(&mut self, explicit: &BTreeSet<&str>) {
        if !explicit.contains("loss.margin") {
            self.loss.metric.margin = self.loss.metric.kind.default_margin();
        }
        let g = &mut self.model.grouping;
        // A single embedding keeps the grouped models' total width.
        if g.kind == GroupingKind::None && !explicit.contains("model.groups") {
            if !explicit.contains("model.value_dim") {
                g.value_dim *= g.groups;
            }
            g.groups = 1;
        }
        self.model.backbone.image_size = self.data.image_size;
        self.model.backbone.image_channels = self.data.channels;
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.train_fraction must lie in (0, 1), got {}",
                d.train_fraction
            )));
        }
        if !matches!(d.channels, 1 | 3) {
            return Err(Error::Config(format!("data.channels must be 1 or 3, got {}", d.channels)));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.k needs positive entries".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "data.dir" => self.data.dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.classes" => self.data.classes = parse_num(k, v)?,
            "data.per_class" => self.data.per_class = parse_num(k, v)?,
            "data.image_size" => self.data.image_size = parse_num(k, v)?,
            "data.channels" => self.data.channels = parse_num(k, v)?,
            "data.seed" => self.data.seed = parse_num(k, v)?,
            "data.train_fraction" => self.data.train_fraction = parse_num(k, v)?,
            "data.split_seed" => self.data.split_seed = parse_num(k, v)?,
            "model.widths" => self.model.backbone.widths = parse_list(k, v)?,
            "model.grouping" => self.model.grouping.kind = GroupingKind::parse(v)?,
            "model.groups" => self.model.grouping.groups = parse_num(k, v)?,
            "model.value_dim" => self.model.grouping.value_dim = parse_num(k, v)?,
            "model.key_dim" => self.model.grouping.key_dim = parse_num(k, v)?,
            "model.normalize" => self.model.grouping.normalize = parse_bool(k, v)?,
            "loss.kind" => self.loss.metric.kind = LossKind::parse(v)?,
            "loss.margin" => self.loss.metric.margin = parse_num(k, v)?,
            "loss.alpha" => self.loss.metric.alpha = parse_num(k, v)?,
            "loss.beta0" => self.loss.metric.beta0 = parse_num(k, v)?,
            "loss.beta1" => self.loss.metric.beta1 = parse_num(k, v)?,
            "loss.eta_init" => self.loss.metric.eta_init = parse_num(k, v)?,
            "loss.lr_eta" => self.loss.metric.lr_eta = parse_num(k, v)?,
            "loss.diversity_mu" => self.loss.diversity.mu = parse_num(k, v)?,
            "loss.diversity_alpha" => self.loss.diversity.alpha = parse_num(k, v)?,
            "loss.diversity_beta0" => self.loss.diversity.beta0 = parse_num(k, v)?,
            "loss.lambda_div" => self.loss.weights.lambda_div = parse_num(k, v)?,
            "loss.lambda_l2" => self.loss.weights.lambda_l2 = parse_num(k, v)?,
            "train.lr" => self.train.learning_rate = parse_num(k, v)?,
            "train.epochs" => self.train.epochs = parse_num(k, v)?,
            "train.classes_per_batch" => self.train.classes_per_batch = parse_num(k, v)?,
            "train.samples_per_class" => self.train.samples_per_class = parse_num(k, v)?,
            "train.seed" => self.train.seed = parse_num(k, v)?,
            "train.clip_norm" => {
                let c: f64 = parse_num(k, v)?;
                self.train.clip_norm = (c > 0.0).then_some(c);
            }
            "train.adam_beta1" => self.train.adam.beta1 = parse_num(k, v)?,
            "train.adam_beta2" => self.train.adam.beta2 = parse_num(k, v)?,
            "train.adam_eps" => self.train.adam.eps = parse_num(k, v)?,
            "eval.k" => self.eval.ks = parse_list(k, v)?,
            "eval.cluster_seed" => self.eval.cluster_seed = parse_num(k, v)?,
            "eval.top" => self.eval.top = parse_num(k, v)?,
            "eval.exemplar_stat" => self.eval.exemplar_stat = ExemplarStat::parse(v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let g = &self.model.grouping;
        let m = &self.loss.metric;
        let dv = &self.loss.diversity;
        let t = &self.train;
        let AdamConfig { beta1, beta2, eps } = t.adam;
        let dir = d.dir.as_ref().map_or(String::new(), |p| p.display().to_string());
        let lines: Vec<(&str, String)> = vec![
            ("train.preset", self.preset.clone().unwrap_or_else(|| "none".into())),
            ("data.dir", dir),
            ("data.classes", d.classes.to_string()),
            ("data.per_class", d.per_class.to_string()),
            ("data.image_size", d.image_size.to_string()),
            ("data.channels", d.channels.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.train_fraction", d.train_fraction.to_string()),
            ("data.split_seed", d.split_seed.to_string()),
            ("model.widths", join(&self.model.backbone.widths)),
            ("model.grouping", g.kind.letter().to_string()),
            ("model.groups", g.groups.to_string()),
            ("model.value_dim", g.value_dim.to_string()),
            ("model.key_dim", g.key_dim.to_string()),
            ("model.normalize", g.normalize.to_string()),
            ("loss.kind", m.kind.name().to_string()),
            ("loss.margin", m.margin.to_string()),
            ("loss.alpha", m.alpha.to_string()),
            ("loss.beta0", m.beta0.to_string()),
            ("loss.beta1", m.beta1.to_string()),
            ("loss.eta_init", m.eta_init.to_string()),
            ("loss.lr_eta", m.lr_eta.to_string()),
            ("loss.diversity_mu", dv.mu.to_string()),
            ("loss.diversity_alpha", dv.alpha.to_string()),
            ("loss.diversity_beta0", dv.beta0.to_string()),
            ("loss.lambda_div", self.loss.weights.lambda_div.to_string()),
            ("loss.lambda_l2", self.loss.weights.lambda_l2.to_string()),
            ("train.lr", t.learning_rate.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.classes_per_batch", t.classes_per_batch.to_string()),
            ("train.samples_per_class", t.samples_per_class.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.clip_norm", t.clip_norm.unwrap_or(0.0).to_string()),
            ("train.adam_beta1", beta1.to_string()),
            ("train.adam_beta2", beta2.to_string()),
            ("train.adam_eps", eps.to_string()),
            ("eval.k", join(&self.eval.ks)),
            ("eval.cluster_seed", self.eval.cluster_seed.to_string()),
            ("eval.top", self.eval.top.to_string()),
            ("eval.exemplar_stat", self.eval.exemplar_stat.name().to_string()),
        ];
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in lines {
            writeln!(s, "{k}={v}").expect("string write");
        }
        s
    }
}

/// Worker count from `AGMT_THREADS` (default 1).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("AGMT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("AGMT_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::parse("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(RunConfig::parse(&c.to_text(), &[]).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        match RunConfig::parse("train.lr=1e-3\nmodel.grops = 4 # typo\n", &[]) {
            Err(Error::Config(msg)) => assert!(msg.contains("model.grops"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn comments_and_overrides() {
        let c = RunConfig::parse("# header\n\ntrain.epochs = 3 # short\n", &["train.epochs=5".into()]).unwrap();
        assert_eq!(c.train.epochs, 5);
        assert!(RunConfig::parse("no equals sign\n", &[]).is_err());
    }

    #[test]
    fn margin_follows_loss_kind_unless_set() {
        let c = RunConfig::parse("loss.kind=binomial\n", &[]).unwrap();
        assert_eq!(c.loss.metric.margin, 0.5);
        let c = RunConfig::parse("loss.margin=0.3\nloss.kind=contrastive\n", &[]).unwrap();
        assert_eq!(c.loss.metric.margin, 0.3);
    }

    #[test]
    fn presets() {
        let c = RunConfig::parse("train.preset=section-4.3\nmodel.grouping=A\n", &[]).unwrap();
        assert_eq!(c.model.grouping.embedding_shape(), (4, 128));
        assert_eq!((c.loss.weights.lambda_div, c.loss.weights.lambda_l2), (0.01, 0.001));
        assert_eq!(c.train.learning_rate, 1e-3);

        let n = RunConfig::parse("train.preset=section-4.3\nmodel.grouping=N\n", &[]).unwrap();
        assert_eq!(n.model.grouping.embedding_shape(), (1, 512));

        let c = RunConfig::parse("train.preset=section-4.2\n", &[]).unwrap();
        assert_eq!((c.loss.weights.lambda_div, c.loss.weights.lambda_l2), (0.02, 0.003));
        assert_eq!(c.model.grouping.embedding_shape(), (3, 170));
        assert_eq!(c.loss.metric.kind, LossKind::Margin);

        // Explicit keys win over the preset wherever they appear.
        let c = RunConfig::parse("loss.lambda_div=0.5\ntrain.preset=section-4.2\n", &[]).unwrap();
        assert_eq!(c.loss.weights.lambda_div, 0.5);
        assert!(RunConfig::parse("train.preset=section-9\n", &[]).is_err());
        assert_eq!(RunConfig::parse(&c.to_text(), &[]).unwrap(), c);
    }

    #[test]
    fn single_group_keeps_total_width() {
        let c = RunConfig::parse("model.grouping=N\n", &[]).unwrap();
        assert_eq!(c.model.grouping.embedding_shape(), (1, 128));
        let c = RunConfig::parse("model.grouping=N\nmodel.value_dim=512\n", &[]).unwrap();
        assert_eq!(c.model.grouping.embedding_shape(), (1, 512));
        assert!(RunConfig::parse("model.grouping=N\nmodel.groups=4\n", &[]).is_err());
    }
}

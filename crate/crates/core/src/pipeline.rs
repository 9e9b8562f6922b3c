//! End-to-end runs: data → training → evaluation → visualization.
//!
//! A run directory holds `config.txt` (the resolved configuration),
//! `train.log`, `checkpoint.agmt` and, after evaluation, `eval.txt` and
//! `eval.jsonl`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_raster_dir, split_zero_shot, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{EmbeddingSet, EvalReport};
use crate::grouping::{AttentionMaps, GroupedEmbedding, GroupingKind};
use crate::interpret::{
    bilinear_upsample, export_exemplars, export_overlay, select_top_exemplars, ExportedOverlay,
};
use crate::model::Model;
use crate::tensor::{cyclic_shift, Tensor};
use crate::trainer::{StepReport, Trainer, CHECKPOINT_FILE};

pub const CONFIG_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "eval.txt";
pub const REPORT_JSON_FILE: &str = "eval.jsonl";

/// The full dataset described by `cfg.data`.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    match &d.dir {
        Some(dir) => load_raster_dir(dir, d.image_size, d.channels),
        None => Ok(generate_synthetic(&SyntheticSpec {
            classes: d.classes,
            per_class: d.per_class,
            image_size: d.image_size,
            channels: d.channels,
            seed: d.seed,
        })?
        .dataset),
    }
}

/// Zero-shot train/test split of [`load_dataset`].
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    split_zero_shot(&load_dataset(cfg)?, cfg.data.train_fraction, cfg.data.split_seed)
}

/// Which part of a dataset a command works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Usage(format!("unknown split {other:?} (expected train, test or all)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

/// The requested split of the run's dataset, read from `dir` instead of the
/// configured source when given. The class split uses the run's fraction
/// and seed, so `test` holds exactly the classes unseen in training.
pub fn load_split(cfg: &RunConfig, dir: Option<&Path>, split: Split) -> Result<Dataset> {
    let mut cfg = cfg.clone();
    if let Some(dir) = dir {
        cfg.data.dir = Some(dir.to_path_buf());
    }
    let full = load_dataset(&cfg)?;
    if split == Split::All {
        return Ok(full);
    }
    let (train, test) = split_zero_shot(&full, cfg.data.train_fraction, cfg.data.split_seed)?;
    Ok(if split == Split::Train { train } else { test })
}

/// Trains per `cfg`, writing the run directory `out`. With `resume`, an
/// existing checkpoint in `out` is loaded and training continues from it.
pub fn train_run(
    cfg: &RunConfig,
    train: &Dataset,
    out: &Path,
    resume: bool,
    on_step: impl FnMut(&StepReport),
) -> Result<Trainer> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_text()).map_err(|e| Error::io(&config_path, e))?;
    let mut trainer = Trainer::init(&cfg.model, cfg.loss.clone(), cfg.train.clone())?;
    let ckpt = out.join(CHECKPOINT_FILE);
    if resume && ckpt.exists() {
        trainer.load(&ckpt)?;
    } else {
        let log = out.join(crate::trainer::LOG_FILE);
        if log.exists() {
            fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
    }
    trainer.fit(train, Some(out), on_step)?;
    trainer.save(&ckpt)?;
    Ok(trainer)
}

/// Reads the run configuration stored next to a checkpoint.
pub fn run_config_for(checkpoint: &Path) -> Result<RunConfig> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    RunConfig::parse(&text, &[]).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Rebuilds the model of a run from its checkpoint and `config.txt`.
pub fn load_model(checkpoint: &Path) -> Result<(RunConfig, Model)> {
    let cfg = run_config_for(checkpoint)?;
    let mut trainer = Trainer::init(&cfg.model, cfg.loss.clone(), cfg.train.clone())?;
    trainer.load(checkpoint)?;
    Ok((cfg, trainer.model))
}

/// Per-image model outputs over a dataset.
pub struct Embedded {
    pub groups: Vec<GroupedEmbedding>,
    pub maps: Vec<Option<AttentionMaps>>,
    pub set: EmbeddingSet,
}

pub fn embed_dataset(model: &Model, data: &Dataset, threads: usize) -> Result<Embedded> {
    let refs: Vec<&Tensor> = data.images.iter().collect();
    let (groups, maps): (Vec<_>, Vec<_>) = model.embed_images(&refs, threads)?.into_iter().unzip();
    let set = EmbeddingSet::from_grouped(&groups, data.labels.clone())?;
    Ok(Embedded { groups, maps, set })
}

/// All metrics on `data`, clustering into as many clusters as it has classes.
pub fn evaluate(model: &Model, data: &Dataset, cfg: &RunConfig, threads: usize) -> Result<EvalReport> {
    let e = embed_dataset(model, data, threads)?;
    let ks: Vec<usize> = cfg.eval.ks.iter().copied().filter(|&k| k < e.set.len()).collect();
    EvalReport::compute(&e.set, &ks, cfg.eval.cluster_seed)
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(PathBuf, PathBuf)> {
    let txt = dir.join(REPORT_FILE);
    let json = dir.join(REPORT_JSON_FILE);
    fs::write(&txt, report.to_text()).map_err(|e| Error::io(&txt, e))?;
    fs::write(&json, report.to_json_line() + "\n").map_err(|e| Error::io(&json, e))?;
    Ok((txt, json))
}

/// Mean over images of the mean |cos| between distinct groups of one image.
pub fn mean_abs_group_cosine(groups: &[GroupedEmbedding]) -> f64 {
    let mut total = 0.0;
    let mut images = 0usize;
    for g in groups {
        let (p, _) = g.f.dims2().expect("grouped embeddings are matrices");
        if p < 2 {
            continue;
        }
        let mut s = 0.0;
        for a in 0..p {
            for b in a + 1..p {
                let (x, y) = (g.f.row(a), g.f.row(b));
                let dot: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
                let nx = x.iter().map(|u| u * u).sum::<f64>().sqrt();
                let ny = y.iter().map(|u| u * u).sum::<f64>().sqrt();
                s += (dot / (nx * ny)).abs();
            }
        }
        total += s / (p * (p - 1) / 2) as f64;
        images += 1;
    }
    if images == 0 {
        0.0
    } else {
        total / images as f64
    }
}

#[derive(Clone, Debug)]
pub struct VisualizeOptions {
    pub groups: Vec<usize>,
    pub top: usize,
    pub split: String,
    /// Cyclic shift `(dy, dx)` for the original-vs-shifted demo.
    pub shift_demo: Option<(isize, isize)>,
}

#[derive(Clone, Debug, Default)]
pub struct VisualizeReport {
    pub exported: Vec<ExportedOverlay>,
    pub clipped: bool,
    /// Largest deviation between a shifted image's heatmap and the shifted
    /// heatmap of the original, over the demo pairs.
    pub shift_max_diff: Option<f64>,
}

/// Exports the top exemplars of each requested group of an A-grouping
/// model, plus the optional shift demo pairs.
pub fn visualize(
    model: &Model,
    data: &Dataset,
    opts: &VisualizeOptions,
    stat: crate::interpret::ExemplarStat,
    out: &Path,
    threads: usize,
) -> Result<VisualizeReport> {
    let kind = model.kind();
    if kind != GroupingKind::Attentive {
        return Err(Error::Usage(format!(
            "no attention maps for {}-grouping",
            kind.letter()
        )));
    }
    let p = model.groups();
    if let Some(&g) = opts.groups.iter().find(|&&g| g >= p) {
        return Err(Error::Usage(format!("group {g} out of range (model has {p} groups)")));
    }
    let e = embed_dataset(model, data, threads)?;
    let maps: Vec<AttentionMaps> = e.maps.into_iter().map(|m| m.expect("A-grouping yields maps")).collect();
    let images: Vec<&Tensor> = data.images.iter().collect();
    let index = out.join("index.txt");
    if index.exists() {
        fs::remove_file(&index).map_err(|e| Error::io(&index, e))?;
    }
    let mut report = VisualizeReport::default();
    for &g in &opts.groups {
        let top = select_top_exemplars(&maps, g, opts.top, stat)?;
        report.clipped |= top.clipped;
        report
            .exported
            .extend(export_exemplars(out, &opts.split, g, &top, &images, &data.labels, &maps, stat)?);
        if let (Some((dy, dx)), Some(&(img, _))) = (opts.shift_demo, top.ranked.first()) {
            let diff = shift_demo(model, images[img], g, (dy, dx), out, &format!("{}_{g}_{img}", opts.split))?;
            report.shift_max_diff = Some(report.shift_max_diff.map_or(diff, |d: f64| d.max(diff)));
        }
    }
    Ok(report)
}

/// Writes `shift_<tag>_original.ppm` and `shift_<tag>_shifted.ppm` and
/// returns the max deviation between the shifted input's heatmap and the
/// cyclic shift of the original heatmap.
fn shift_demo(model: &Model, image: &Tensor, group: usize, shift: (isize, isize), out: &Path, tag: &str) -> Result<f64> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let shifted = cyclic_shift(image, shift.0, shift.1)?;
    let res = model.embed_images(&[image, &shifted], 1)?;
    let heat = |k: usize| -> Result<Tensor> {
        let maps = res[k].1.as_ref().expect("A-grouping yields maps");
        bilinear_upsample(&maps.group_map(group)?, h, w)
    };
    let (orig, moved) = (heat(0)?, heat(1)?);
    export_overlay(image, &orig, &out.join(format!("shift_{tag}_original.ppm")))?;
    export_overlay(&shifted, &moved, &out.join(format!("shift_{tag}_shifted.ppm")))?;
    let expected = cyclic_shift(&orig.reshape(&[h, w, 1])?, shift.0, shift.1)?.reshape(&[h, w])?;
    Ok(expected.max_abs_diff(&moved))
}

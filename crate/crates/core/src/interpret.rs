//! Attention maps as images: folding, upsampling, exemplar ranking and
//! heatmap overlays.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{encode_pnm, resize_bilinear};
use crate::error::{Error, Result};
use crate::grouping::{fold_mode3, AttentionMaps};
use crate::tensor::Tensor;

/// Folds a `P×HW` score matrix into `H×W×P`.
pub fn fold_attention(scores: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    fold_mode3(scores, height, width)
}

/// Bilinear upsampling (half-pixel centres, clamped) of an `H×W` map.
pub fn bilinear_upsample(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if height < h || width < w {
        return Err(Error::Usage(format!(
            "cannot upsample {h}×{w} to the smaller {height}×{width}"
        )));
    }
    Tensor::new(&[height, width], resize_bilinear(map.data(), h, w, 1, height, width))
}

/// Statistic an image is ranked by within one group's map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExemplarStat {
    Max,
    Mean,
}

impl ExemplarStat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(ExemplarStat::Max),
            "mean" => Ok(ExemplarStat::Mean),
            _ => Err(Error::Config(format!("unknown exemplar statistic {s:?} (expected max or mean)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExemplarStat::Max => "max",
            ExemplarStat::Mean => "mean",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exemplars {
    /// `(image index, statistic)`, best first.
    pub ranked: Vec<(usize, f64)>,
    /// Set when fewer images exist than were requested.
    pub clipped: bool,
}

/// Ranks images by the statistic of group `group`'s map, descending, ties
/// by lower index, and keeps the first `count`.
pub fn select_top_exemplars(
    maps: &[AttentionMaps],
    group: usize,
    count: usize,
    stat: ExemplarStat,
) -> Result<Exemplars> {
    let mut scored = Vec::with_capacity(maps.len());
    for (i, m) in maps.iter().enumerate() {
        let map = m.group_map(group)?;
        let v = match stat {
            ExemplarStat::Max => map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ExemplarStat::Mean => map.sum() / map.len() as f64,
        };
        scored.push((i, v));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let clipped = count > scored.len();
    scored.truncate(count);
    Ok(Exemplars { ranked: scored, clipped })
}

/// Blends a base image with a heat map into an RGB raster: the base is
/// reduced to gray, the heat is scaled by its maximum, and
/// `R = (base + heat)/2`, `G = B = base/2`.
pub fn overlay(image: &Tensor, heat: &Tensor) -> Result<Tensor> {
    let (h, w, c) = match *image.shape() {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::dim("overlay", image.shape(), heat.shape())),
    };
    if heat.shape() != [h, w] {
        return Err(Error::dim("overlay", image.shape(), heat.shape()));
    }
    let max = heat.data().iter().copied().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(h * w * 3);
    for (px, &hv) in image.data().chunks(c).zip(heat.data()) {
        let base = px.iter().sum::<f64>() / c as f64;
        let heat = if max > 0.0 { hv.max(0.0) / max } else { 0.0 };
        out.extend([0.5 * base + 0.5 * heat, 0.5 * base, 0.5 * base]);
    }
    Tensor::new(&[h, w, 3], out)
}

/// Writes [`overlay`] as a binary P6 pixmap.
pub fn export_overlay(image: &Tensor, heat: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_pnm(&overlay(image, heat)?)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `<split>_<group>_<rank>_<imageid>.ppm`
pub fn overlay_file_name(split: &str, group: usize, rank: usize, image: usize) -> String {
    format!("{split}_{group}_{rank}_{image}.ppm")
}

/// One exported overlay, as listed in the index manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedOverlay {
    pub file: String,
    pub group: usize,
    pub rank: usize,
    pub image: usize,
    pub label: usize,
    pub statistic: f64,
}

/// Upsamples each chosen exemplar's map to its image and writes the
/// overlays plus `index.txt` into `dir`.
pub fn export_exemplars(
    dir: &Path,
    split: &str,
    group: usize,
    exemplars: &Exemplars,
    images: &[&Tensor],
    labels: &[usize],
    maps: &[AttentionMaps],
    stat: ExemplarStat,
) -> Result<Vec<ExportedOverlay>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for (rank, &(img, statistic)) in exemplars.ranked.iter().enumerate() {
        let image = images[img];
        let heat = bilinear_upsample(&maps[img].group_map(group)?, image.shape()[0], image.shape()[1])?;
        let file = overlay_file_name(split, group, rank, img);
        export_overlay(image, &heat, &dir.join(&file))?;
        out.push(ExportedOverlay {
            file,
            group,
            rank,
            image: img,
            label: labels[img],
            statistic,
        });
    }
    append_index(dir, &out, stat)?;
    Ok(out)
}

fn append_index(dir: &Path, rows: &[ExportedOverlay], stat: ExemplarStat) -> Result<()> {
    let path = dir.join("index.txt");
    let mut text = if path.exists() {
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?
    } else {
        format!("# file group rank image label {}\n", stat.name())
    };
    for r in rows {
        writeln!(text, "{} {} {} {} {} {}", r.file, r.group, r.rank, r.image, r.label, r.statistic)
            .expect("string write");
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

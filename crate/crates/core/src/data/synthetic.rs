//! Part-structured synthetic classes.
//!
//! A class is a set of three distinct glyphs drawn from a fixed alphabet of
//! 5×5 binary patterns. All glyphs share a solid one-pixel frame and differ
//! only in which four of their nine interior pixels are set, so telling
//! parts apart takes a close look at small details. Each image places the class's glyphs at independent
//! uniformly random positions (wrapping around the borders, footprints never
//! overlapping) on top of uniform background noise. Recognizing a class
//! therefore means detecting its parts wherever they are.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{encode_pnm, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GLYPH_SIZE: usize = 5;
pub const PARTS_PER_CLASS: usize = 3;
const NOISE_AMPLITUDE: f64 = 0.2;

const GLYPHS: [&str; 16] = [
    "XXXXXXXXXXXX..XX...XXXXXX",
    "XXXXXXXX.XXX.XXX...XXXXXX",
    "XXXXXXXX.XX..XXXX..XXXXXX",
    "XXXXXXX.XXXX..XXX..XXXXXX",
    "XXXXXXX.XXX..XXX.X.XXXXXX",
    "XXXXXXX..XXXX.XX..XXXXXXX",
    "XXXXXXX..XX.XXXX.X.XXXXXX",
    "XXXXXXX..XX...XXXXXXXXXXX",
    "XXXXXX.XXXX.X.XX.X.XXXXXX",
    "XXXXXX.XXXX...XX.XXXXXXXX",
    "XXXXXX.X.XXX..XXXX.XXXXXX",
    "XXXXXX.X.XX.X.XX.XXXXXXXX",
    "XXXXXX..XXXXX.XX..XXXXXXX",
    "XXXXXX..XXX.XXXX.X.XXXXXX",
    "XXXXXX..XXX...XXXXXXXXXXX",
    "XXXXXX...XXX.XXXX.XXXXXXX",
];

/// The fixed glyph alphabet as row-major 5×5 bit masks.
pub fn glyph_alphabet() -> Vec<[bool; GLYPH_SIZE * GLYPH_SIZE]> {
    GLYPHS
        .iter()
        .map(|g| {
            let mut bits = [false; GLYPH_SIZE * GLYPH_SIZE];
            for (b, ch) in bits.iter_mut().zip(g.chars()) {
                *b = ch == 'X';
            }
            bits
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 40,
            per_class: 64,
            image_size: 32,
            channels: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Glyph ids of each class, ascending.
    pub class_glyphs: Vec<[usize; PARTS_PER_CLASS]>,
    /// Top-left corner of every placed glyph, per image, in class-glyph order.
    pub placements: Vec<[(usize, usize); PARTS_PER_CLASS]>,
    /// Pixels covered by a glyph footprint (before noise fills the rest).
    pub glyph_masks: Vec<Vec<bool>>,
}

fn overlaps(a: (usize, usize), b: (usize, usize), size: usize) -> bool {
    let cyc = |p: usize, q: usize| {
        let d = p.abs_diff(q);
        d.min(size - d)
    };
    cyc(a.0, b.0) < GLYPH_SIZE && cyc(a.1, b.1) < GLYPH_SIZE
}

fn all_triples(n: usize) -> Vec<[usize; PARTS_PER_CLASS]> {
    let mut out = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                out.push([a, b, c]);
            }
        }
    }
    out
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    if spec.classes < 4 {
        return Err(Error::Config(format!("need at least 4 classes, got {}", spec.classes)));
    }
    if spec.image_size < 16 {
        return Err(Error::Config(format!("image size must be at least 16, got {}", spec.image_size)));
    }
    if spec.per_class == 0 || !matches!(spec.channels, 1 | 3) {
        return Err(Error::Config("per-class count must be positive and channels 1 or 3".into()));
    }
    let alphabet = glyph_alphabet();
    let mut triples = all_triples(alphabet.len());
    if spec.classes > triples.len() {
        return Err(Error::Config(format!(
            "glyph alphabet exhausted: {} classes requested, only {} distinct {}-glyph sets exist",
            spec.classes,
            triples.len(),
            PARTS_PER_CLASS
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    triples.shuffle(&mut rng);
    triples.truncate(spec.classes);

    let s = spec.image_size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut placements = Vec::new();
    let mut glyph_masks = Vec::new();
    for (class, glyphs) in triples.iter().enumerate() {
        for _ in 0..spec.per_class {
            let mut pos: Vec<(usize, usize)> = Vec::with_capacity(PARTS_PER_CLASS);
            while pos.len() < PARTS_PER_CLASS {
                let p = (rng.random_range(0..s), rng.random_range(0..s));
                if pos.iter().all(|&q| !overlaps(p, q, s)) {
                    pos.push(p);
                }
            }
            let mut gray: Vec<f64> = (0..s * s).map(|_| NOISE_AMPLITUDE * rng.random::<f64>()).collect();
            let mut mask = vec![false; s * s];
            for (&g, &(y0, x0)) in glyphs.iter().zip(&pos) {
                for dy in 0..GLYPH_SIZE {
                    for dx in 0..GLYPH_SIZE {
                        let idx = ((y0 + dy) % s) * s + (x0 + dx) % s;
                        gray[idx] = if alphabet[g][dy * GLYPH_SIZE + dx] { 1.0 } else { 0.0 };
                        mask[idx] = true;
                    }
                }
            }
            let data = if spec.channels == 1 {
                gray
            } else {
                gray.iter().flat_map(|&v| [v, v, v]).collect()
            };
            images.push(Tensor::new(&[s, s, spec.channels], data)?);
            labels.push(class);
            placements.push([pos[0], pos[1], pos[2]]);
            glyph_masks.push(mask);
        }
    }
    Ok(SyntheticDataset {
        dataset: Dataset {
            images,
            labels,
            class_names: (0..spec.classes).map(|c| format!("class_{c:03}")).collect(),
            image_size: s,
            channels: spec.channels,
        },
        class_glyphs: triples,
        placements,
        glyph_masks,
    })
}

/// Writes `dir/<class>/<image>.pgm|ppm` plus `dir/manifest.txt` with one
/// line per image: `path class_id glyph,glyph,glyph`.
pub fn write_dataset(dir: &Path, synth: &SyntheticDataset) -> Result<()> {
    let d = &synth.dataset;
    let ext = if d.channels == 1 { "pgm" } else { "ppm" };
    let mut manifest = String::new();
    let mut counters = vec![0usize; d.class_names.len()];
    for (img, &label) in d.images.iter().zip(&d.labels) {
        let class = &d.class_names[label];
        let class_dir = dir.join(class);
        fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        let rel = format!("{class}/img_{:04}.{ext}", counters[label]);
        counters[label] += 1;
        let path = dir.join(&rel);
        fs::write(&path, encode_pnm(img)?).map_err(|e| Error::io(&path, e))?;
        let g = synth.class_glyphs[label];
        writeln!(manifest, "{rel} {label} {},{},{}", g[0], g[1], g[2]).expect("string write");
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

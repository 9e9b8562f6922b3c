//! Binary portable pixmaps (P5/P6) and bilinear resampling.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Resamples an `H×W×C` raster to `th×tw×C` with the half-pixel
/// (align-corners = false) convention and clamped borders.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, c: usize, th: usize, tw: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), h * w * c);
    let coords = |t: usize, from: usize, to: usize| -> (usize, usize, f64) {
        let s = ((t as f64 + 0.5) * (from as f64 / to as f64) - 0.5).clamp(0.0, (from - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; th * tw * c];
    for ty in 0..th {
        let (y0, y1, fy) = coords(ty, h, th);
        for tx in 0..tw {
            let (x0, x1, fx) = coords(tx, w, tw);
            for k in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + k];
                let top = lerp(at(y0, x0), at(y0, x1), fx);
                let bottom = lerp(at(y1, x0), at(y1, x1), fx);
                out[(ty * tw + tx) * c + k] = lerp(top, bottom, fy);
            }
        }
    }
    out
}

/// `a + t·(b − a)`: returns `a` exactly when `a == b`, so constant
/// rasters resample to themselves bit for bit.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("expected magic P5 or P6".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("expected a number at byte {start}"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("digits")
            .parse()
            .map_err(|e| format!("bad number: {e}"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("invalid dimensions {width}×{height} or maxval {maxval}"));
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

/// Decodes a P5 (gray) or P6 (RGB) file into an `H×W×C` tensor in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let parse_err = |detail: String| Error::Parse {
        path: path.to_path_buf(),
        detail,
    };
    let h = parse_header(bytes).map_err(parse_err)?;
    let bps = if h.maxval < 256 { 1 } else { 2 };
    let n = h.width * h.height * h.channels;
    let body = &bytes[h.offset..];
    if body.len() < n * bps {
        return Err(parse_err(format!("expected {} pixel bytes, found {}", n * bps, body.len())));
    }
    let max = h.maxval as f64;
    let data = (0..n)
        .map(|i| {
            let raw = if bps == 1 {
                body[i] as f64
            } else {
                u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as f64
            };
            raw / max
        })
        .collect();
    Tensor::new(&[h.height, h.width, h.channels], data)
}

/// Encodes an `H×W×1` (P5) or `H×W×3` (P6) tensor with maxval 255.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = match *image.shape() {
        [h, w, c @ (1 | 3)] => (h, w, c),
        _ => return Err(Error::Usage(format!("cannot encode image of shape {:?}", image.shape()))),
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

fn convert_channels(img: Tensor, channels: usize) -> Result<Tensor> {
    let (h, w, c) = match *img.shape() {
        [h, w, c] => (h, w, c),
        _ => unreachable!("decoded images are rank 3"),
    };
    if c == channels {
        return Ok(img);
    }
    let data: Vec<f64> = match (c, channels) {
        (3, 1) => img.data().chunks(3).map(|p| p.iter().sum::<f64>() / 3.0).collect(),
        (1, 3) => img.data().iter().flat_map(|&v| [v, v, v]).collect(),
        _ => return Err(Error::Config(format!("cannot convert {c} channels to {channels}"))),
    };
    Tensor::new(&[h, w, channels], data)
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads `root/<class_name>/<image>.{pgm,ppm,pnm}`. Class ids follow the
/// lexicographic order of the class directory names; every image is
/// resized to `size×size` and converted to `channels` channels.
pub fn load_raster_dir(root: &Path, size: usize, channels: usize) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = class_names.len();
        let name = dir.file_name().expect("dir name").to_string_lossy().into_owned();
        let files: Vec<_> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .is_some_and(|e| matches!(e.to_str(), Some("pgm" | "ppm" | "pnm")))
            })
            .collect();
        if files.is_empty() {
            return Err(Error::Config(format!("class directory {} holds no images", dir.display())));
        }
        for f in files {
            let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
            let img = decode_pnm(&bytes, &f)?;
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let c = img.shape()[2];
            let img = if (h, w) == (size, size) {
                img
            } else {
                Tensor::new(&[size, size, c], resize_bilinear(img.data(), h, w, c, size, size))?
            };
            images.push(convert_channels(img, channels)?);
            labels.push(label);
        }
        class_names.push(name);
    }
    if class_names.is_empty() {
        return Err(Error::Config(format!("no class directories under {}", root.display())));
    }
    Ok(Dataset {
        images,
        labels,
        class_names,
        image_size: size,
        channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p6_pixel_scaling() {
        let mut bytes = b"P6\n# a comment\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 0]);
        let t = decode_pnm(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn sixteen_bit_samples() {
        let mut bytes = b"P5 2 1 1000\n".to_vec();
        bytes.extend(500u16.to_be_bytes());
        bytes.extend(1000u16.to_be_bytes());
        let t = decode_pnm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(t.data(), &[0.5, 1.0]);
    }

    #[test]
    fn malformed_headers_name_the_file() {
        for bad in [&b"P3\n1 1\n255\n\0"[..], b"P5\n1\n", b"P5\n2 2\n255\n\0\0"] {
            match decode_pnm(bad, Path::new("broken.pgm")) {
                Err(Error::Parse { path, .. }) => assert_eq!(path, Path::new("broken.pgm")),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let t = Tensor::new(&[2, 3, 1], vec![0.0, 1.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
        let back = decode_pnm(&encode_pnm(&t).unwrap(), Path::new("m")).unwrap();
        assert!(back.max_abs_diff(&t) <= 0.5 / 255.0);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let src = vec![0.37; 5 * 7 * 2];
        for (th, tw) in [(3, 3), (11, 4), (32, 32)] {
            let out = resize_bilinear(&src, 5, 7, 2, th, tw);
            assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn two_x_upsample_of_a_ramp() {
        // Source pixel centres sit at target coordinates 0.5 and 2.5, so the
        // half-pixel convention gives 0, 1/4, 3/4, 1.
        let out = resize_bilinear(&[0.0, 1.0], 1, 2, 1, 2, 4);
        assert_eq!(&out[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!((out[1] + out[2]) / 2.0, 0.5);
    }
}

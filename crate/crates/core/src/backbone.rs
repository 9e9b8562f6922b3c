//! Small stride-1 convolutional feature extractor.
//!
//! Every layer is a 3×3 circular convolution followed by relu, so spatial
//! extents never change and the whole network commutes with cyclic shifts of
//! its input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub image_channels: usize,
    /// Output channels of each layer; the last entry is the feature width C.
    pub widths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            image_channels: 1,
            widths: vec![8, 16, 32, 64],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.image_channels, 1 | 3) {
            return Err(Error::Config(format!("image channels must be 1 or 3, got {}", self.image_channels)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid backbone widths {:?}", self.widths)));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// `(C_in, C_out)` per layer.
    pub fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(self.image_channels)
            .chain(self.widths.iter().copied())
            .zip(self.widths.iter().copied())
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().map(|(ci, co)| 9 * ci * co + co).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `3×3×C_in×C_out`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub layers: Vec<ConvLayer>,
}

/// He-uniform bound for a 3×3 layer followed by a relu: keeps the
/// activation variance constant from layer to layer.
pub fn init_bound(c_in: usize) -> f64 {
    (6.0 / (9 * c_in) as f64).sqrt()
}

/// He-uniform weights and zero biases, fully determined by `seed`.
pub fn init_backbone(seed: u64, config: &BackboneConfig) -> Result<BackboneParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = config
        .layer_dims()
        .map(|(ci, co)| {
            let bound = init_bound(ci);
            ConvLayer {
                weight: Tensor::uniform(&[3, 3, ci, co], -bound, bound, &mut rng),
                bias: Tensor::zeros(&[co]),
            }
        })
        .collect();
    Ok(BackboneParams { layers })
}

/// Backbone parameters recorded on a tape.
pub struct BoundBackbone {
    pub layers: Vec<(Var, Var)>,
}

impl BackboneParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBackbone {
        BoundBackbone {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone(), trainable), tape.leaf(l.bias.clone(), trainable)))
                .collect(),
        }
    }
}

impl BoundBackbone {
    /// `images` is `H×W×C_img` or `B×H×W×C_img`.
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let mut x = images;
        for &(w, b) in &self.layers {
            let y = tape.conv3x3_circular(x, w, b)?;
            x = tape.relu(y);
        }
        Ok(x)
    }
}

fn check_image(image: &Tensor, config: &BackboneConfig) -> Result<()> {
    let s = image.shape();
    let ok = match *s {
        [h, w, c] | [_, h, w, c] => h == config.image_size && w == config.image_size && c == config.image_channels,
        _ => false,
    };
    if !ok {
        return Err(Error::Config(format!(
            "image shape {s:?} does not match configured {0}×{0}×{1}",
            config.image_size, config.image_channels
        )));
    }
    Ok(())
}

/// Feature map `H×W×C` for one image (or `B×H×W×C` for a batch).
pub fn backbone_forward(image: &Tensor, params: &BackboneParams, config: &BackboneConfig) -> Result<Tensor> {
    check_image(image, config)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let out = bound.forward(&mut tape, x)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::cyclic_shift;

    fn small() -> BackboneConfig {
        BackboneConfig {
            image_size: 6,
            image_channels: 1,
            widths: vec![3, 4],
        }
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let cfg = BackboneConfig::default();
        let params = init_backbone(3, &cfg).unwrap();
        let out = backbone_forward(&Tensor::zeros(&[32, 32, 1]), &params, &cfg).unwrap();
        assert_eq!(out.shape(), &[32, 32, 64]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = BackboneConfig::default();
        let a = init_backbone(0, &cfg).unwrap();
        assert_eq!(a, init_backbone(0, &cfg).unwrap());
        assert_ne!(a, init_backbone(1, &cfg).unwrap());
        for (layer, (ci, _)) in a.layers.iter().zip(cfg.layer_dims()) {
            let bound = (2.0 / (3.0 * ci as f64)).sqrt();
            let largest = layer.weight.data().iter().fold(0.0f64, |m, w| m.max(w.abs()));
            assert!(largest < bound && largest > 0.9 * bound);
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        }
        assert_eq!(cfg.param_count(), 9 * (8 + 8 * 16 + 16 * 32 + 32 * 64) + 8 + 16 + 32 + 64);
    }

    #[test]
    fn rejects_wrong_image_size() {
        let cfg = small();
        let params = init_backbone(0, &cfg).unwrap();
        let err = backbone_forward(&Tensor::zeros(&[5, 6, 1]), &params, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn commutes_with_cyclic_shift() {
        use rand::SeedableRng;
        let cfg = BackboneConfig {
            image_size: 9,
            ..BackboneConfig::default()
        };
        let params = init_backbone(11, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::uniform(&[9, 9, 1], 0.0, 1.0, &mut rng);
        let base = backbone_forward(&img, &params, &cfg).unwrap();
        for (dy, dx) in [(1, 0), (3, 7), (-2, 4)] {
            let shifted = backbone_forward(&cyclic_shift(&img, dy, dx).unwrap(), &params, &cfg).unwrap();
            let expect = cyclic_shift(&base, dy, dx).unwrap();
            assert!(shifted.max_abs_diff(&expect) <= 1e-10);
        }
    }

    #[test]
    fn first_layer_gradient_matches_finite_differences() {
        use rand::SeedableRng;
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::uniform(&[6, 6, 1], 0.0, 1.0, &mut rng);
        let params = init_backbone(4, &cfg).unwrap();
        let rest = params.layers[1].clone();
        let report = gradcheck::check(&[params.layers[0].weight.clone()], |t, v| {
            let x = t.constant(img.clone());
            let b0 = t.constant(params.layers[0].bias.clone());
            let w1 = t.constant(rest.weight.clone());
            let b1 = t.constant(rest.bias.clone());
            let bound = BoundBackbone {
                layers: vec![(v[0], b0), (w1, b1)],
            };
            let y = bound.forward(t, x)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(report.kink_margin > 1e-4, "{report:?}");
        assert!(report.passes(1e-4), "{report:?}");
    }
}

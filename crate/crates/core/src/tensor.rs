//! Dense row-major `f64` tensors.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// A dense, row-major block of 64-bit floats.
///
/// Values are immutable once they enter a [`Tape`](crate::autodiff::Tape);
/// gradients live on the tape, not here.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Usage(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Usage("ragged rows".into()));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        let dist = Uniform::new(low, high).expect("low < high");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Value at a multi-index; panics on out-of-range indices.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of range for {:?}", self.shape);
            acc * d + i
        })
    }

    /// Rows × columns view for rank-2 tensors.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::Usage(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = *self.shape.last().expect("rank >= 1");
        &self.data[r * c..(r + 1) * c]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Spatial extents of an `H×W×C` or `B×H×W×C` tensor as `(B, H, W, C)`.
pub(crate) fn spatial_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Some((1, h, w, c)),
        [b, h, w, c] => Some((b, h, w, c)),
        _ => None,
    }
}

/// Cyclic spatial shift of an `H×W×C` (or batched) tensor: output position
/// `(y, x)` takes the input at `(y - dy, x - dx)` modulo the extents.
pub fn cyclic_shift(t: &Tensor, dy: isize, dx: isize) -> Result<Tensor> {
    let (b, h, w, c) = spatial_dims(t.shape())
        .ok_or_else(|| Error::Usage(format!("cyclic_shift needs a spatial tensor, got {:?}", t.shape())))?;
    let mut out = vec![0.0; t.len()];
    let (hi, wi) = (h as isize, w as isize);
    for n in 0..b {
        for y in 0..h {
            let sy = (y as isize - dy).rem_euclid(hi) as usize;
            for x in 0..w {
                let sx = (x as isize - dx).rem_euclid(wi) as usize;
                let dst = ((n * h + y) * w + x) * c;
                let src = ((n * h + sy) * w + sx) * c;
                out[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
            }
        }
    }
    Tensor::new(t.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let tt = t.transpose().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.at(&[2, 1]), 6.0);
        assert_eq!(tt.transpose().unwrap(), t);
    }

    #[test]
    fn shift_wraps_around() {
        let t = Tensor::new(&[2, 3, 1], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let s = cyclic_shift(&t, 1, 1).unwrap();
        // (0,0) <- (1,2)
        assert_eq!(s.at(&[0, 0, 0]), 5.0);
        assert_eq!(cyclic_shift(&s, -1, -1).unwrap(), t);
    }
}

//! Real-valued fields on a pixel or feature grid.

use crate::error::{Error, Result};

/// Spatial layout of a field: one or two spatial axes plus a channel count.
///
/// Shapes map as `(N,) -> [N] x 1`, `(H, W) -> [H, W] x 1`,
/// `(H, W, C) -> [H, W] x C`. Data is row-major with channels innermost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub spatial: Vec<usize>,
    pub channels: usize,
}

impl Layout {
    pub fn from_shape(shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::UnsupportedShape(shape.to_vec()));
        }
        match shape {
            [n] => Ok(Layout { spatial: vec![*n], channels: 1 }),
            [h, w] => Ok(Layout { spatial: vec![*h, *w], channels: 1 }),
            [h, w, c] => Ok(Layout { spatial: vec![*h, *w], channels: *c }),
            _ => Err(Error::UnsupportedShape(shape.to_vec())),
        }
    }

    pub fn spatial_len(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn len(&self) -> usize {
        self.spatial_len() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense real tensor with an immutable shape.
///
/// Constructors reject non-finite entries; arithmetic helpers preserve shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl GridField {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Layout::from_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch { expected: shape, got: vec![data.len()] });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field data".into()));
        }
        Ok(GridField { shape, data })
    }

    /// Builds a field without the finiteness scan. Shape is still checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        GridField { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let layout = Layout::from_shape(shape)?;
        Self::new(shape.to_vec(), vec![value; layout.len()])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let layout = Layout::from_shape(shape)?;
        Self::new(shape.to_vec(), (0..layout.len()).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn layout(&self) -> Layout {
        Layout::from_shape(&self.shape).expect("shape validated at construction")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the entries. Callers are responsible for keeping them finite.
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &GridField) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { expected: self.shape.clone(), got: other.shape.clone() });
        }
        Ok(())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &GridField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Per-channel arithmetic means.
    pub fn channel_means(&self) -> Vec<f64> {
        let layout = self.layout();
        let mut sums = vec![0.0; layout.channels];
        for (i, v) in self.data.iter().enumerate() {
            sums[i % layout.channels] += v;
        }
        let n = layout.spatial_len() as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    /// Elementwise `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &GridField, b: f64) -> Result<GridField> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(GridField::from_parts(self.shape.clone(), data))
    }

    pub fn sub(&self, other: &GridField) -> Result<GridField> {
        self.lin_comb(1.0, other, -1.0)
    }

    pub fn add(&self, other: &GridField) -> Result<GridField> {
        self.lin_comb(1.0, other, 1.0)
    }

    pub fn scale(&self, a: f64) -> GridField {
        GridField::from_parts(self.shape.clone(), self.data.iter().map(|v| a * v).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridField {
        GridField::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// `max |self - other|`.
    pub fn max_abs_diff(&self, other: &GridField) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `||self - other|| / max(||other||, tiny)`.
    pub fn rel_l2_diff(&self, other: &GridField) -> f64 {
        let num: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        num.sqrt() / other.norm_l2().max(f64::MIN_POSITIVE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts() {
        assert_eq!(Layout::from_shape(&[8]).unwrap(), Layout { spatial: vec![8], channels: 1 });
        assert_eq!(Layout::from_shape(&[4, 5, 3]).unwrap().len(), 60);
        assert!(Layout::from_shape(&[2, 2, 2, 2]).is_err());
        assert!(Layout::from_shape(&[0]).is_err());
        assert!(Layout::from_shape(&[]).is_err());
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(GridField::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(GridField::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
        assert!(GridField::new(vec![3], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn channel_means_split_interleaved_data() {
        let f = GridField::new(vec![1, 2, 2], vec![1.0, 10.0, 3.0, 30.0]).unwrap();
        assert_eq!(f.channel_means(), vec![2.0, 20.0]);
    }

    #[test]
    fn arithmetic_checks_shape() {
        let a = GridField::filled(&[3], 1.0).unwrap();
        let b = GridField::filled(&[4], 1.0).unwrap();
        assert!(a.sub(&b).is_err());
        let c = a.lin_comb(2.0, &a, 3.0).unwrap();
        assert_eq!(c.data(), &[5.0, 5.0, 5.0]);
    }
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of colour channels every image carries.
pub const CHANNELS: usize = 3;

/// An RGB image stored as an `H×W×3` tensor of floats in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        let pixels = Tensor::from_vec(&[height, width, CHANNELS], data)?;
        if !pixels.all_finite() {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Image { pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            pixels: Tensor::filled(&[height, width, CHANNELS], value),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &[f32] {
        self.pixels.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.pixels.data_mut()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels.data()[(y * self.width() + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let w = self.width();
        self.pixels.data_mut()[(y * w + x) * CHANNELS + c] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in self.pixels.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                expected: self.pixels.shape().to_vec(),
                actual: other.pixels.shape().to_vec(),
            });
        }
        Ok(())
    }
}

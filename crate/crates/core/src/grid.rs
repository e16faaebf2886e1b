use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense H×W×C grid of reals, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Map3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Classifier output `O`, one logit per unified channel per pixel.
pub type LogitMap = Map3;

/// Per-pixel input features.
pub type FeatureMap = Map3;

impl Map3 {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Map3 {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} grid needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Map3 {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    pub fn same_shape(&self, other: &Map3) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn flipped_horizontally(&self) -> Map3 {
        let mut data = Vec::with_capacity(self.data.len());
        let row_len = self.width * self.channels;
        for row in self.data.chunks(row_len) {
            for px in row.chunks(self.channels).rev() {
                data.extend_from_slice(px);
            }
        }
        Map3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_reverses_pixel_order_per_row() {
        let m = Map3::new(1, 3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(m.flipped_horizontally().data, vec![5., 6., 3., 4., 1., 2.]);
        assert_eq!(m.flipped_horizontally().flipped_horizontally(), m);
    }

    #[test]
    fn rejects_bad_length() {
        assert!(Map3::new(2, 2, 2, vec![0.0; 7]).is_err());
    }
}

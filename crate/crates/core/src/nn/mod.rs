//! A small CPU 3D U-Net with hand-written backward passes.
//!
//! Activations are channels-last (`data[voxel * channels + c]`, voxels x-fastest) so that
//! convolutions reduce to im2col + GEMM. All parameters of a network live in one flat
//! buffer; layers address it through [`ParamRange`]s.

pub mod conv;
pub mod linalg;
pub mod norm;
pub mod optim;
pub mod unet;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use unet::{build_from_spec, build_network, NetworkSpec, Tape, UNet};

/// A single-sample activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub shape: [usize; 3],
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(shape: [usize; 3], channels: usize) -> Self {
        Act { shape, channels, data: vec![0.0; shape.iter().product::<usize>() * channels] }
    }

    pub fn from_data(shape: [usize; 3], channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>() * channels);
        Act { shape, channels, data }
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    /// Channel-major copy, `out[c * voxels + v]`.
    pub fn to_channel_major(&self) -> Vec<f32> {
        let n = self.voxels();
        let c = self.channels;
        let mut out = vec![0.0; n * c];
        for v in 0..n {
            for ch in 0..c {
                out[ch * n + v] = self.data[v * c + ch];
            }
        }
        out
    }

    pub fn from_channel_major(shape: [usize; 3], channels: usize, cm: &[f32]) -> Self {
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n * channels];
        for ch in 0..channels {
            for v in 0..n {
                data[v * channels + ch] = cm[ch * n + v];
            }
        }
        Act { shape, channels, data }
    }
}

/// Slice of the flat parameter buffer owned by one layer tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRange {
    pub offset: usize,
    pub len: usize,
}

impl ParamRange {
    pub fn of<'a>(&self, buf: &'a [f32]) -> &'a [f32] {
        &buf[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a>(&self, buf: &'a mut [f32]) -> &'a mut [f32] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

/// Hands out consecutive ranges of the flat parameter buffer and fills their initial values.
#[derive(Debug, Default)]
pub struct ParamAllocator {
    pub values: Vec<f32>,
}

impl ParamAllocator {
    pub fn constant(&mut self, len: usize, value: f32) -> ParamRange {
        let offset = self.values.len();
        self.values.extend(std::iter::repeat_n(value, len));
        ParamRange { offset, len }
    }

    /// He-normal initialisation for a leaky-ReLU slope.
    pub fn kaiming<R: Rng>(&mut self, len: usize, fan_in: usize, slope: f64, rng: &mut R) -> ParamRange {
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        let std = gain / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let offset = self.values.len();
        self.values.extend((0..len).map(|_| normal.sample(rng) as f32));
        ParamRange { offset, len }
    }
}

//! Label maps, J/F metrics and the synthetic video generator.

mod metrics;
mod synth;

pub use metrics::{
    boundary, contour_f, default_tol_radius, evaluate, j_and_f, jaccard, MetricReport, ObjectScores,
};
pub use synth::{gen_synthetic, Scenario, Shape, ShapeKind, SyntheticVideo};

use tensorlab::Tensor;

use crate::error::{input, Result};

/// Per-pixel object labels, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return input(format!("label map {height}×{width} with {} values", data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn region(&self, n: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == n).collect()
    }

    /// `N×H×W` indicator planes for objects `1..=N`.
    pub fn one_hot(&self, n_objects: usize) -> Tensor {
        let hw = self.height * self.width;
        Tensor::from_fn(&[n_objects, self.height, self.width], |i| {
            f64::from(u8::from(self.data[i % hw] as usize == i / hw + 1))
        })
    }

    /// `(N+1)×H×W` indicator planes including background.
    pub fn one_hot_with_background(&self, n_objects: usize) -> Tensor {
        let hw = self.height * self.width;
        Tensor::from_fn(&[n_objects + 1, self.height, self.width], |i| {
            f64::from(u8::from(self.data[i % hw] as usize == i / hw))
        })
    }

    pub(crate) fn same_shape(&self, other: &LabelMap) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(crate::error::QmvosError::Eval(format!(
                "label maps differ in shape: {}×{} vs {}×{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

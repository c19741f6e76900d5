//! Labelled image sets and the synthetic seven-segment digit generator.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::Tensor;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Inputs `[N, ...]` with one class label per leading row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        if inputs.shape().len() < 2 || inputs.shape()[0] != labels.len() {
            return Err(ModelError::InvalidData(format!(
                "inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(ModelError::InvalidData("need at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(ModelError::InvalidData(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if !inputs.is_finite() {
            return Err(ModelError::InvalidData("non-finite input value".into()));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Per-example input shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels of the given rows, in the given order.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let x = self.inputs.select_leading(rows);
        let y = rows.iter().map(|&r| self.labels[r]).collect();
        (x, y)
    }

    /// The rows in `rows` as a new dataset.
    pub fn subset(&self, rows: &[usize]) -> Result<Self, ModelError> {
        let (x, y) = self.batch(rows);
        Self::new(x, y, self.num_classes, self.split)
    }

    /// Same rows under a permutation.
    pub fn permuted(&self, order: &[usize]) -> Result<Self, ModelError> {
        self.subset(order)
    }
}

// Segments: top, upper-left, upper-right, middle, lower-left, lower-right, bottom.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, false, true, true, true],
    [false, false, true, false, false, true, false],
    [true, false, true, true, true, false, true],
    [true, false, true, true, false, true, true],
    [false, true, true, true, false, true, false],
    [true, true, false, true, false, true, true],
    [true, true, false, true, true, true, true],
    [true, false, true, false, false, true, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

/// Generator of noisy seven-segment digit images `[N, 1, s, s]`.
///
/// Each sample draws its class template, a translation of up to `jitter`
/// pixels per axis, a stroke intensity in `[0.6, 1]` and additive Gaussian
/// pixel noise; pixel values are clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDigits {
    pub num_classes: usize,
    pub image_size: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_jitter")]
    pub jitter: usize,
}

fn default_noise() -> f64 {
    0.2
}

fn default_jitter() -> usize {
    1
}

impl SyntheticDigits {
    pub fn new(num_classes: usize, image_size: usize) -> Self {
        Self {
            num_classes,
            image_size,
            noise: default_noise(),
            jitter: default_jitter(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_size < 4 {
            return Err(ModelError::InvalidConfig(format!(
                "image size {} below 4",
                self.image_size
            )));
        }
        if !(2..=SEGMENTS.len()).contains(&self.num_classes) {
            return Err(ModelError::InvalidConfig(format!(
                "synthetic digits support 2..=10 classes, got {}",
                self.num_classes
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(ModelError::InvalidConfig(format!("noise {} must be >= 0", self.noise)));
        }
        if self.jitter >= self.image_size / 2 {
            return Err(ModelError::InvalidConfig(format!(
                "jitter {} too large for {}px images",
                self.jitter, self.image_size
            )));
        }
        Ok(())
    }

    /// Noise-free template of class `digit` (row-major `s * s`).
    pub fn template(&self, digit: usize) -> Vec<f64> {
        let s = self.image_size;
        let mut img = vec![0.0; s * s];
        let (x0, x1) = (1, s - 2);
        let (y0, y1, y2) = (1, (s - 1) / 2, s - 2);
        let hline = |y: usize, img: &mut Vec<f64>| (x0..=x1).for_each(|x| img[y * s + x] = 1.0);
        let seg = SEGMENTS[digit];
        if seg[0] {
            hline(y0, &mut img);
        }
        if seg[3] {
            hline(y1, &mut img);
        }
        if seg[6] {
            hline(y2, &mut img);
        }
        let vline = |x: usize, ya: usize, yb: usize, img: &mut Vec<f64>| {
            (ya..=yb).for_each(|y| img[y * s + x] = 1.0)
        };
        if seg[1] {
            vline(x0, y0, y1, &mut img);
        }
        if seg[2] {
            vline(x1, y0, y1, &mut img);
        }
        if seg[4] {
            vline(x0, y1, y2, &mut img);
        }
        if seg[5] {
            vline(x1, y1, y2, &mut img);
        }
        img
    }

    /// Balanced sample: label `i % num_classes` for row `i`, rows shuffled.
    pub fn generate(&self, num_samples: usize, seed: u64, split: Split) -> Result<Dataset, ModelError> {
        self.validate()?;
        if num_samples == 0 {
            return Err(ModelError::EmptyDataset);
        }
        let s = self.image_size;
        let mut rng = rng::seeded(seed);
        let mut labels: Vec<usize> = (0..num_samples).map(|i| i % self.num_classes).collect();
        labels.shuffle(&mut rng);
        let templates: Vec<Vec<f64>> = (0..self.num_classes).map(|d| self.template(d)).collect();
        let normal = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let j = self.jitter as isize;
        let mut data = Vec::with_capacity(num_samples * s * s);
        for &label in &labels {
            let dx = rng.gen_range(-j..=j);
            let dy = rng.gen_range(-j..=j);
            let intensity = rng.gen_range(0.6..=1.0);
            let t = &templates[label];
            for y in 0..s as isize {
                for x in 0..s as isize {
                    let (sy, sx) = (y - dy, x - dx);
                    let base = if sy >= 0 && sx >= 0 && (sy as usize) < s && (sx as usize) < s {
                        t[sy as usize * s + sx as usize] * intensity
                    } else {
                        0.0
                    };
                    let noise = if self.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                    data.push((base + noise).clamp(0.0, 1.0));
                }
            }
        }
        let inputs = Tensor::new(vec![num_samples, 1, s, s], data)?;
        Dataset::new(inputs, labels, self.num_classes, split)
    }

    /// Train and test sets from independent streams of `seed`.
    pub fn split(&self, num_train: usize, num_test: usize, seed: u64) -> Result<(Dataset, Dataset), ModelError> {
        let train = self.generate(num_train, rng::derive(seed, 1), Split::Train)?;
        let test = self.generate(num_test, rng::derive(seed, 2), Split::Test)?;
        Ok((train, test))
    }
}

/// Training split of the synthetic digits with default noise and jitter.
pub fn make_synthetic_digits(
    num_samples: usize,
    num_classes: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset, ModelError> {
    SyntheticDigits::new(num_classes, image_size).generate(num_samples, seed, Split::Train)
}

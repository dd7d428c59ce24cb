use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{check_shape, Oracle, OracleError, ProbabilityVector};
use crate::image::ImageTensor;
use crate::metrics::ChannelWeights;

/// Side of the block-averaged luminance grid.
pub const GRID: usize = 8;
const FEATURES: usize = GRID * GRID;

/// Deterministic linear-softmax classifier over an 8x8 grid of block-averaged
/// luminance.
///
/// Features are block means of `0.299 R + 0.587 G + 0.114 B`, scaled to
/// `[0, 1]`. Logits are a bias-free linear map with weights drawn once from
/// `N(0, weight_scale)` under the given seed, each class row shifted to zero
/// mean so that uniform brightness changes move every logit equally and the
/// decision depends on the spatial luminance pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassifier {
    num_classes: usize,
    seed: u64,
    input_shape: Option<(usize, usize)>,
    weights: Vec<[f64; FEATURES]>,
}

impl ToyClassifier {
    pub const DEFAULT_WEIGHT_SCALE: f64 = 4.0;

    pub fn new(
        num_classes: usize,
        seed: u64,
        input_shape: Option<(usize, usize)>,
    ) -> Result<Self, OracleError> {
        Self::with_weight_scale(num_classes, seed, input_shape, Self::DEFAULT_WEIGHT_SCALE)
    }

    pub fn with_weight_scale(
        num_classes: usize,
        seed: u64,
        input_shape: Option<(usize, usize)>,
        weight_scale: f64,
    ) -> Result<Self, OracleError> {
        if num_classes < 2 {
            return Err(OracleError::Config(format!(
                "toy classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        if let Some((h, w)) = input_shape {
            if h == 0 || w == 0 {
                return Err(OracleError::Config("input shape must be nonzero".into()));
            }
        }
        let normal = Normal::new(0.0, weight_scale)
            .map_err(|e| OracleError::Config(format!("weight scale {weight_scale}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..num_classes)
            .map(|_| {
                let mut row: [f64; FEATURES] = std::array::from_fn(|_| normal.sample(&mut rng));
                let mean = row.iter().sum::<f64>() / FEATURES as f64;
                row.iter_mut().for_each(|w| *w -= mean);
                row
            })
            .collect();
        Ok(Self {
            num_classes,
            seed,
            input_shape,
            weights,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Grid cell `(row, col)` that pixel `(x, y)` falls into.
    pub fn cell_of(height: usize, width: usize, x: usize, y: usize) -> (usize, usize) {
        (y * GRID / height, x * GRID / width)
    }

    /// Row-major 8x8 feature grid. Cells that cover no pixel (images smaller
    /// than the grid) are 0.
    pub fn features(image: &ImageTensor) -> [f64; FEATURES] {
        let (h, w) = image.shape();
        let luma = ChannelWeights::LUMA.as_array();
        let mut sums = [0.0f64; FEATURES];
        let mut counts = [0u32; FEATURES];
        for (i, px) in image.as_bytes().chunks_exact(3).enumerate() {
            let (row, col) = Self::cell_of(h, w, i % w, i / w);
            let cell = row * GRID + col;
            sums[cell] += luma[0] * f64::from(px[0])
                + luma[1] * f64::from(px[1])
                + luma[2] * f64::from(px[2]);
            counts[cell] += 1;
        }
        let mut out = [0.0f64; FEATURES];
        for cell in 0..FEATURES {
            if counts[cell] > 0 {
                out[cell] = sums[cell] / f64::from(counts[cell]) / 255.0;
            }
        }
        out
    }

    pub fn logits(&self, image: &ImageTensor) -> Vec<f64> {
        let f = Self::features(image);
        self.weights
            .iter()
            .map(|w| w.iter().zip(&f).map(|(a, b)| a * b).sum())
            .collect()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Oracle for ToyClassifier {
    fn predict(&self, image: &ImageTensor) -> Result<ProbabilityVector, OracleError> {
        check_shape(self.input_shape, image)?;
        ProbabilityVector::new(softmax(&self.logits(image)), None)
    }

    fn input_shape(&self) -> Option<(usize, usize)> {
        self.input_shape
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::PerturbationUnit;

    fn noise(h: usize, w: usize, seed: u64) -> ImageTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.gen()).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn same_seed_same_model() {
        let a = ToyClassifier::new(10, 3, None).unwrap();
        let b = ToyClassifier::new(10, 3, None).unwrap();
        let img = noise(32, 32, 1);
        assert_eq!(a.predict(&img).unwrap(), b.predict(&img).unwrap());
        assert_eq!(a.predict(&img).unwrap(), a.predict(&img).unwrap());
        let c = ToyClassifier::new(10, 4, None).unwrap();
        assert_ne!(a.predict(&img).unwrap(), c.predict(&img).unwrap());
    }

    #[test]
    fn zero_image_is_uniform() {
        let model = ToyClassifier::new(7, 9, None).unwrap();
        let p = model
            .predict(&ImageTensor::filled(32, 32, [0; 3]).unwrap())
            .unwrap();
        assert!(p
            .probabilities()
            .iter()
            .all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn needs_two_classes() {
        assert!(ToyClassifier::new(1, 0, None).is_err());
    }

    #[test]
    fn shape_is_enforced_when_declared() {
        let model = ToyClassifier::new(3, 0, Some((32, 32))).unwrap();
        let err = model.predict(&noise(16, 32, 0)).unwrap_err();
        assert!(matches!(err, OracleError::ShapeMismatch { .. }));
    }

    #[test]
    fn single_pixel_touches_one_cell() {
        let img = noise(32, 32, 5);
        let unit = PerturbationUnit::new(13, 22, [255, 0, 17]);
        let before = ToyClassifier::features(&img);
        let after = ToyClassifier::features(&img.with_unit(&unit).unwrap());
        let (row, col) = ToyClassifier::cell_of(32, 32, 13, 22);
        assert_eq!((row, col), (5, 3));
        for cell in 0..FEATURES {
            if cell == row * GRID + col {
                assert_ne!(before[cell], after[cell]);
            } else {
                assert_eq!(before[cell].to_bits(), after[cell].to_bits());
            }
        }
    }

    #[test]
    fn features_match_direct_block_mean() {
        let img = noise(24, 40, 8);
        let f = ToyClassifier::features(&img);
        // cell (2, 5) covers rows 6..9 and columns 25..30
        let mut sum = 0.0;
        for y in 6..9 {
            for x in 25..30 {
                let [r, g, b] = img.pixel(x, y);
                sum += 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
            }
        }
        assert!((f[2 * GRID + 5] - sum / 15.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_images_leave_cells_empty() {
        let img = ImageTensor::filled(2, 3, [255; 3]).unwrap();
        let f = ToyClassifier::features(&img);
        assert_eq!(f.iter().filter(|&&v| v > 0.0).count(), 6);
    }
}

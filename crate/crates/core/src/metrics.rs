//! Perceptual quantities modelled on the human visual system.
//!
//! A perturbation of one pixel is costed by four factors:
//!
//! * the just-noticeable-distortion threshold at the background luminance,
//! * a Weber-Fechner style perceptual stimulus accumulated over `1 / JND`,
//! * texture masking via the 3x3 standard deviation of the benign image,
//! * per-channel sensitivity weights.
//!
//! They combine into the per-pixel [`PixelLossBreakdown::total`] (`IntegLoss`)
//! and the whole-image [`PerceptualModel::mul_factor_loss`] (`MulFactorLoss`).

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Channel, ImageError, ImageTensor, PerturbationUnit};

/// Luminance at which the JND curve reaches its minimum.
pub const JND_KNEE: f64 = 127.0;
/// Default floor applied to the texture standard deviation before dividing.
pub const DEFAULT_SD_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("luminance {0} is outside [0, 255]")]
    LuminanceOutOfRange(f64),
    #[error("channel weights ({0}, {1}, {2}) must be nonnegative and sum to 1")]
    InvalidWeights(f64, f64, f64),
    #[error("standard-deviation floor must be finite and positive, got {0}")]
    InvalidSdFloor(f64),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Visibility threshold of a change on background luminance `luminance`.
///
/// `17 (1 - sqrt(L / 127)) + 3` up to the knee, `3/128 (L - 127) + 3` above it.
pub fn jnd_curve(luminance: f64) -> Result<f64, MetricError> {
    if !(0.0..=255.0).contains(&luminance) {
        return Err(MetricError::LuminanceOutOfRange(luminance));
    }
    Ok(jnd_unchecked(luminance))
}

#[inline]
fn jnd_unchecked(luminance: f64) -> f64 {
    if luminance <= JND_KNEE {
        17.0 * (1.0 - (luminance / JND_KNEE).sqrt()) + 3.0
    } else {
        3.0 / 128.0 * (luminance - JND_KNEE) + 3.0
    }
}

/// JND threshold at a pixel, using the maximum of its 3x3 neighbourhood in
/// `channel` as the background luminance (edges replicated).
pub fn jnd_at(
    image: &ImageTensor,
    x: usize,
    y: usize,
    channel: Channel,
) -> Result<f64, MetricError> {
    image.check_bounds(x, y)?;
    let max = image.window3(x, y, channel).into_iter().max().unwrap_or(0);
    Ok(jnd_unchecked(f64::from(max)))
}

/// Population standard deviation of the 3x3 window at `(x, y)` (edges replicated).
pub fn texture_sd(
    image: &ImageTensor,
    x: usize,
    y: usize,
    channel: Channel,
) -> Result<f64, MetricError> {
    image.check_bounds(x, y)?;
    let window = image.window3(x, y, channel);
    let n = window.len() as f64;
    let mean = window.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = window
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(var.sqrt())
}

/// Cumulative perceptual stimulus over the 256 intensity levels.
///
/// `cumulative[v] = k * sum_{i < v} 1 / jnd(i)` with `k` chosen so that the
/// table runs exactly from 0 to 255.
#[derive(Debug, Clone, PartialEq)]
pub struct PsTable {
    k: f64,
    cumulative: [f64; 256],
}

impl PsTable {
    pub fn build() -> Self {
        let mut partial = [0.0f64; 256];
        let mut acc = 0.0;
        for level in 0..255usize {
            acc += 1.0 / jnd_unchecked(level as f64);
            partial[level + 1] = acc;
        }
        let k = 255.0 / acc;
        let mut cumulative = partial.map(|s| k * s);
        // pin the upper anchor against rounding in the final multiply
        cumulative[255] = 255.0;
        Self { k, cumulative }
    }

    /// Process-wide table, built on first use.
    pub fn shared() -> &'static PsTable {
        static TABLE: OnceLock<PsTable> = OnceLock::new();
        TABLE.get_or_init(PsTable::build)
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn cumulative(&self) -> &[f64; 256] {
        &self.cumulative
    }

    #[inline]
    pub fn at(&self, level: u8) -> f64 {
        self.cumulative[level as usize]
    }

    /// Perceptual stimulus of moving a channel from `original` to `perturbed`.
    #[inline]
    pub fn ps_of_change(&self, original: u8, perturbed: u8) -> f64 {
        (self.at(perturbed) - self.at(original)).abs()
    }
}

impl Default for PsTable {
    fn default() -> Self {
        PsTable::shared().clone()
    }
}

/// Per-channel sensitivity weights `(r, g, b)`, nonnegative and summing to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights {
    lambda_r: f64,
    lambda_g: f64,
    lambda_b: f64,
}

impl ChannelWeights {
    /// RGB-to-gray luminance weights.
    pub const LUMA: ChannelWeights = ChannelWeights {
        lambda_r: 0.299,
        lambda_g: 0.587,
        lambda_b: 0.114,
    };

    pub fn new(lambda_r: f64, lambda_g: f64, lambda_b: f64) -> Result<Self, MetricError> {
        let all = [lambda_r, lambda_g, lambda_b];
        let valid = all.iter().all(|w| w.is_finite() && *w >= 0.0)
            && (all.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if !valid {
            return Err(MetricError::InvalidWeights(lambda_r, lambda_g, lambda_b));
        }
        Ok(Self {
            lambda_r,
            lambda_g,
            lambda_b,
        })
    }

    pub fn get(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Red => self.lambda_r,
            Channel::Green => self.lambda_g,
            Channel::Blue => self.lambda_b,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda_r, self.lambda_g, self.lambda_b]
    }
}

impl Default for ChannelWeights {
    fn default() -> Self {
        Self::LUMA
    }
}

/// Cost breakdown of one perturbed pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelLossBreakdown {
    pub x: usize,
    pub y: usize,
    /// Perceptual stimulus per channel.
    pub ps: [f64; 3],
    /// Unfloored 3x3 standard deviation per channel, on the benign image.
    pub sd: [f64; 3],
    /// `lambda_c * ps_c / max(sd_c, floor)`.
    pub terms: [f64; 3],
    pub total: f64,
}

/// Everything needed to cost perturbations: channel weights, the stimulus
/// table and the SD floor.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualModel {
    weights: ChannelWeights,
    table: PsTable,
    sd_floor: f64,
}

impl Default for PerceptualModel {
    fn default() -> Self {
        Self {
            weights: ChannelWeights::LUMA,
            table: PsTable::default(),
            sd_floor: DEFAULT_SD_FLOOR,
        }
    }
}

impl PerceptualModel {
    pub fn new(weights: ChannelWeights, sd_floor: f64) -> Result<Self, MetricError> {
        if !(sd_floor.is_finite() && sd_floor > 0.0) {
            return Err(MetricError::InvalidSdFloor(sd_floor));
        }
        Ok(Self {
            weights,
            table: PsTable::default(),
            sd_floor,
        })
    }

    pub fn weights(&self) -> ChannelWeights {
        self.weights
    }

    pub fn table(&self) -> &PsTable {
        &self.table
    }

    pub fn sd_floor(&self) -> f64 {
        self.sd_floor
    }

    /// `IntegLoss` of writing `unit` into `benign`.
    pub fn integ_loss(
        &self,
        benign: &ImageTensor,
        unit: &PerturbationUnit,
    ) -> Result<PixelLossBreakdown, MetricError> {
        benign.check_bounds(unit.x, unit.y)?;
        let mut out = PixelLossBreakdown {
            x: unit.x,
            y: unit.y,
            ps: [0.0; 3],
            sd: [0.0; 3],
            terms: [0.0; 3],
            total: 0.0,
        };
        for channel in Channel::ALL {
            let c = channel.index();
            let before = benign.value(unit.x, unit.y, channel);
            out.ps[c] = self.table.ps_of_change(before, unit.channel(channel));
            out.sd[c] = texture_sd(benign, unit.x, unit.y, channel)?;
            out.terms[c] = self.weights.get(channel) * out.ps[c] / out.sd[c].max(self.sd_floor);
        }
        out.total = out.terms.iter().sum();
        Ok(out)
    }

    /// Per-pixel breakdowns for every pixel where `adversarial` differs from
    /// `benign`, in row-major order.
    pub fn breakdowns(
        &self,
        benign: &ImageTensor,
        adversarial: &ImageTensor,
    ) -> Result<Vec<PixelLossBreakdown>, MetricError> {
        benign
            .differing_pixels(adversarial)?
            .into_iter()
            .map(|(x, y)| {
                self.integ_loss(
                    benign,
                    &PerturbationUnit::new(x, y, adversarial.pixel(x, y)),
                )
            })
            .collect()
    }

    /// `MulFactorLoss`: sum of `IntegLoss` over all perturbed pixels.
    pub fn mul_factor_loss(
        &self,
        benign: &ImageTensor,
        adversarial: &ImageTensor,
    ) -> Result<f64, MetricError> {
        Ok(self
            .breakdowns(benign, adversarial)?
            .iter()
            // fold from +0.0: an empty f64 `sum` is -0.0
            .fold(0.0, |acc, b| acc + b.total))
    }
}

/// Lp distances between two images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpNorms {
    /// Number of pixels differing in any channel.
    pub l0: usize,
    /// Euclidean norm of the channelwise difference.
    pub l2: f64,
    /// Largest absolute channel difference.
    pub linf: u8,
}

pub fn lp_norms(benign: &ImageTensor, adversarial: &ImageTensor) -> Result<LpNorms, MetricError> {
    benign.check_same_shape(adversarial)?;
    let mut l0 = 0;
    let mut sq = 0u64;
    let mut linf = 0u8;
    for (a, b) in benign
        .as_bytes()
        .chunks_exact(3)
        .zip(adversarial.as_bytes().chunks_exact(3))
    {
        if a != b {
            l0 += 1;
        }
        for (&p, &q) in a.iter().zip(b) {
            let d = p.abs_diff(q);
            sq += u64::from(d) * u64::from(d);
            linf = linf.max(d);
        }
    }
    Ok(LpNorms {
        l0,
        l2: (sq as f64).sqrt(),
        linf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: u8) -> ImageTensor {
        ImageTensor::filled(h, w, [v; 3]).unwrap()
    }

    #[test]
    fn jnd_anchor_values() {
        assert_eq!(jnd_curve(127.0).unwrap(), 3.0);
        assert_eq!(jnd_curve(0.0).unwrap(), 20.0);
        assert_eq!(jnd_curve(255.0).unwrap(), 6.0);
    }

    #[test]
    fn jnd_rejects_out_of_range() {
        assert!(jnd_curve(-0.5).is_err());
        assert!(jnd_curve(255.01).is_err());
        assert!(jnd_curve(f64::NAN).is_err());
    }

    #[test]
    fn jnd_minimum_at_knee() {
        let min = (0..=255u32)
            .min_by(|a, b| {
                jnd_unchecked(*a as f64)
                    .partial_cmp(&jnd_unchecked(*b as f64))
                    .unwrap()
            })
            .unwrap();
        assert_eq!(min, 127);
        assert!((0..=255).all(|v| jnd_unchecked(v as f64) >= 3.0));
    }

    #[test]
    fn jnd_at_uses_window_max() {
        assert_eq!(jnd_at(&gray(4, 4, 127), 2, 1, Channel::Red).unwrap(), 3.0);
        assert_eq!(jnd_at(&gray(4, 4, 0), 0, 0, Channel::Blue).unwrap(), 20.0);

        let mut img = gray(5, 5, 10);
        img.set_pixel(3, 3, [10, 200, 10]).unwrap();
        assert_eq!(
            jnd_at(&img, 2, 2, Channel::Green).unwrap(),
            jnd_curve(200.0).unwrap()
        );
        // red channel of the same window never sees 200
        assert_eq!(
            jnd_at(&img, 2, 2, Channel::Red).unwrap(),
            jnd_curve(10.0).unwrap()
        );
        // (0, 0) window does not reach (3, 3)
        assert_eq!(
            jnd_at(&img, 0, 0, Channel::Green).unwrap(),
            jnd_curve(10.0).unwrap()
        );
        assert!(jnd_at(&img, 5, 0, Channel::Red).is_err());
    }

    #[test]
    fn ps_table_anchors_and_constant() {
        let t = PsTable::build();
        assert_eq!(t.at(0), 0.0);
        assert_eq!(t.at(255), 255.0);
        // independently summed with a scalar script
        assert!((t.k() - 5.3211420344108635).abs() < 1e-12);
        assert!((t.at(128) - 98.96047657411695).abs() < 1e-9);
        assert!(t.cumulative().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn ps_of_change_examples() {
        let t = PsTable::shared();
        for v in [0u8, 17, 127, 255] {
            assert_eq!(t.ps_of_change(v, v), 0.0);
        }
        assert_eq!(t.ps_of_change(0, 255), 255.0);
        assert!((t.ps_of_change(50, 80) - 20.392297982555252).abs() < 1e-9);
        assert_eq!(t.ps_of_change(80, 50), t.ps_of_change(50, 80));
    }

    #[test]
    fn texture_sd_examples() {
        assert_eq!(
            texture_sd(&gray(3, 3, 77), 1, 1, Channel::Red).unwrap(),
            0.0
        );

        let mut img = gray(3, 3, 0);
        img.set_pixel(2, 2, [9, 9, 9]).unwrap();
        let sd = texture_sd(&img, 1, 1, Channel::Green).unwrap();
        assert!((sd - 8f64.sqrt()).abs() < 1e-12);

        // five zeros, four 255s
        let mut checker = gray(3, 3, 0);
        for (x, y) in [(1, 0), (0, 1), (2, 1), (1, 2)] {
            checker.set_pixel(x, y, [255; 3]).unwrap();
        }
        let sd = texture_sd(&checker, 1, 1, Channel::Blue).unwrap();
        assert!((sd - 126.71051872498808).abs() < 1e-9);
        assert!(texture_sd(&checker, 0, 3, Channel::Blue).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(ChannelWeights::new(0.5, 0.5, 0.0).is_ok());
        assert!(ChannelWeights::new(0.5, 0.6, -0.1).is_err());
        assert!(ChannelWeights::new(0.3, 0.3, 0.3).is_err());
        let luma = ChannelWeights::default().as_array();
        assert!((luma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sd_floor_validation() {
        assert!(PerceptualModel::new(ChannelWeights::LUMA, 0.0).is_err());
        assert!(PerceptualModel::new(ChannelWeights::LUMA, f64::INFINITY).is_err());
    }

    #[test]
    fn integ_loss_noop_and_single_channel() {
        let model = PerceptualModel::default();
        let mut img = gray(5, 5, 100);
        img.set_pixel(1, 2, [30, 180, 60]).unwrap();
        let noop = PerturbationUnit::new(2, 2, img.pixel(2, 2));
        assert_eq!(model.integ_loss(&img, &noop).unwrap().total, 0.0);

        let unit = PerturbationUnit::new(2, 2, [100, 140, 100]);
        let b = model.integ_loss(&img, &unit).unwrap();
        assert_eq!(b.terms[0], 0.0);
        assert_eq!(b.terms[2], 0.0);
        let sd_g = texture_sd(&img, 2, 2, Channel::Green).unwrap().max(1.0);
        let expected = 0.587 * PsTable::shared().ps_of_change(100, 140) / sd_g;
        assert!((b.total - expected).abs() < 1e-12);
    }

    #[test]
    fn integ_loss_flat_region_is_finite() {
        let model = PerceptualModel::default();
        let img = gray(3, 3, 0);
        let b = model
            .integ_loss(&img, &PerturbationUnit::new(1, 1, [255; 3]))
            .unwrap();
        assert_eq!(b.sd, [0.0; 3]);
        // floor of 1 turns each term into lambda * 255
        assert!((b.total - 255.0).abs() < 1e-9);
    }

    #[test]
    fn mul_factor_loss_sums_pixels() {
        let model = PerceptualModel::default();
        let benign = gray(6, 6, 120);
        assert_eq!(model.mul_factor_loss(&benign, &benign).unwrap(), 0.0);

        let u1 = PerturbationUnit::new(1, 1, [130, 120, 120]);
        let u2 = PerturbationUnit::new(4, 3, [120, 0, 255]);
        let one = benign.with_unit(&u1).unwrap();
        let l1 = model.integ_loss(&benign, &u1).unwrap().total;
        assert_eq!(model.mul_factor_loss(&benign, &one).unwrap(), l1);

        let two = one.with_unit(&u2).unwrap();
        let l2 = model.integ_loss(&benign, &u2).unwrap().total;
        assert!((model.mul_factor_loss(&benign, &two).unwrap() - (l1 + l2)).abs() < 1e-12);

        assert!(model.mul_factor_loss(&benign, &gray(6, 5, 0)).is_err());
    }

    #[test]
    fn lp_norm_examples() {
        let benign = gray(4, 4, 50);
        assert_eq!(
            lp_norms(&benign, &benign).unwrap(),
            LpNorms {
                l0: 0,
                l2: 0.0,
                linf: 0
            }
        );
        let one = benign
            .with_unit(&PerturbationUnit::new(2, 2, [52, 50, 50]))
            .unwrap();
        assert_eq!(
            lp_norms(&benign, &one).unwrap(),
            LpNorms {
                l0: 1,
                l2: 2.0,
                linf: 2
            }
        );
        let two = one
            .with_unit(&PerturbationUnit::new(0, 3, [50, 47, 54]))
            .unwrap();
        let n = lp_norms(&benign, &two).unwrap();
        assert_eq!(n.l0, 2);
        assert_eq!(n.linf, 4);
        assert!((n.l2 - (4.0f64 + 9.0 + 16.0).sqrt()).abs() < 1e-12);
        assert!(lp_norms(&benign, &gray(3, 4, 0)).is_err());
    }

    #[test]
    fn unchanged_image_costs_positive_zero() {
        let img = gray(3, 3, 40);
        let loss = PerceptualModel::default()
            .mul_factor_loss(&img, &img)
            .unwrap();
        assert_eq!(loss.to_bits(), 0.0f64.to_bits());
    }
}

//! Fidelity metrics on latent grids: MSE, PSNR and single-scale SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Boolean selection over the `H x W` spatial positions, applied to every channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Half-open rectangle `[row0, row1) x [col0, col1)` in grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.row1.saturating_sub(self.row0) * self.col1.saturating_sub(self.col0)
    }
}

impl SpatialMask {
    pub fn from_rect(height: usize, width: usize, rect: Rect) -> Result<Self> {
        if rect.row0 > rect.row1 || rect.col0 > rect.col1 || rect.row1 > height || rect.col1 > width
        {
            return Err(Error::InvalidRegion(format!(
                "rectangle {rect:?} does not fit a {height}x{width} grid"
            )));
        }
        let mut bits = vec![false; height * width];
        for h in rect.row0..rect.row1 {
            bits[h * width + rect.col0..h * width + rect.col1].fill(true);
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn contains(&self, h: usize, w: usize) -> bool {
        self.bits[h * self.width + w]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    fn check(&self, g: &LatentGrid) -> Result<()> {
        let s = g.shape();
        if (s.height, s.width) != self.dims() {
            return Err(Error::MapMismatch {
                map: self.dims(),
                latent: (s.height, s.width),
            });
        }
        if self.count() == 0 {
            return Err(Error::InvalidRegion("mask selects no pixels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `f64::INFINITY` for identical inputs.
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl MetricReport {
    pub fn compute(a: &LatentGrid, b: &LatentGrid, dynamic_range: f64) -> Result<Self> {
        Ok(Self {
            psnr_db: psnr(a, b, dynamic_range)?,
            ssim: ssim(a, b, dynamic_range)?,
            mse: mse(a, b)?,
        })
    }
}

pub fn mse(a: &LatentGrid, b: &LatentGrid) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.shape().len() as f64)
}

/// MSE over the masked spatial positions of every channel.
pub fn mse_masked(a: &LatentGrid, b: &LatentGrid, mask: &SpatialMask) -> Result<f64> {
    a.ensure_same_shape(b)?;
    mask.check(a)?;
    let plane = a.shape().plane();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (x, y)) in a.as_slice().iter().zip(b.as_slice()).enumerate() {
        if mask.bits[i % plane] {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

fn check_range(name: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::OutOfDomain {
            name,
            value: v,
            domain: "(0, inf)",
        });
    }
    Ok(())
}

/// `10 log10(max_val^2 / mse)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &LatentGrid, b: &LatentGrid, max_val: f64) -> Result<f64> {
    check_range("max_val", max_val)?;
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

pub fn psnr_masked(
    a: &LatentGrid,
    b: &LatentGrid,
    max_val: f64,
    mask: &SpatialMask,
) -> Result<f64> {
    check_range("max_val", max_val)?;
    Ok(psnr_from_mse(mse_masked(a, b, mask)?, max_val))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of one `height x width` plane.
fn filter_valid(plane: &[f64], height: usize, width: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (height - k + 1, width - k + 1);
    let mut rows = vec![0.0; height * ow];
    for h in 0..height {
        for w in 0..ow {
            rows[h * ow + w] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * plane[h * width + w + j])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for h in 0..oh {
        for w in 0..ow {
            out[h * ow + w] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * rows[(h + j) * ow + w])
                .sum();
        }
    }
    out
}

/// Mean SSIM over channels and valid window positions (11x11 Gaussian
/// window, sigma 1.5, K1 = 0.01, K2 = 0.03).
pub fn ssim(a: &LatentGrid, b: &LatentGrid, dynamic_range: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    check_range("dynamic_range", dynamic_range)?;
    let shape = a.shape();
    if shape.height < SSIM_WINDOW || shape.width < SSIM_WINDOW {
        return Err(Error::WindowTooLarge {
            height: shape.height,
            width: shape.width,
            window: SSIM_WINDOW,
        });
    }
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (h, w) = (shape.height, shape.width);
    let plane = shape.plane();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..shape.channels {
        let x = &a.as_slice()[c * plane..(c + 1) * plane];
        let y = &b.as_slice()[c * plane..(c + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mu_x = filter_valid(x, h, w, &taps);
        let mu_y = filter_valid(y, h, w, &taps);
        let e_xx = filter_valid(&xx, h, w, &taps);
        let e_yy = filter_valid(&yy, h, w, &taps);
        let e_xy = filter_valid(&xy, h, w, &taps);
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{sample_gaussian, Seed, Shape};

    #[test]
    fn mse_and_psnr_basics() {
        let shape = Shape::new(2, 3, 3).unwrap();
        let a = sample_gaussian(shape, Seed(1));
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 2.0).unwrap();
        assert!((mse(&a, &b).unwrap() - 4.0).abs() < 1e-12);
        assert!((psnr(&a, &b, 2.0).unwrap()).abs() < 1e-12);
        assert!((psnr_from_mse(1e-4, 1.0) - 40.0).abs() < 1e-12);
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn masked_mse_selects_region() {
        let shape = Shape::new(2, 2, 2).unwrap();
        let a = LatentGrid::zeros(shape);
        let b =
            LatentGrid::from_fn(shape, |_, h, w| if h == 0 && w == 0 { 3.0 } else { 1.0 }).unwrap();
        let corner = SpatialMask::from_rect(
            2,
            2,
            Rect {
                row0: 0,
                col0: 0,
                row1: 1,
                col1: 1,
            },
        )
        .unwrap();
        assert_eq!(mse_masked(&a, &b, &corner).unwrap(), 9.0);
        assert_eq!(mse_masked(&a, &b, &corner.complement()).unwrap(), 1.0);
        let empty = SpatialMask::from_rect(
            2,
            2,
            Rect {
                row0: 1,
                col0: 1,
                row1: 1,
                col1: 1,
            },
        )
        .unwrap();
        assert!(mse_masked(&a, &b, &empty).is_err());
        assert!(SpatialMask::from_rect(
            2,
            2,
            Rect {
                row0: 0,
                col0: 0,
                row1: 3,
                col1: 1
            }
        )
        .is_err());
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let shape = Shape::new(3, 16, 16).unwrap();
        let x = sample_gaussian(shape, Seed(2));
        assert!((ssim(&x, &x, 2.0).unwrap() - 1.0).abs() < 1e-9);
        // Checkerboard: every window mean is ~0.
        let board = LatentGrid::from_fn(shape, |_, h, w| if (h + w) % 2 == 0 { 1.0 } else { -1.0 })
            .unwrap();
        let neg = board.scale(-1.0).unwrap();
        assert!(ssim(&board, &neg, 2.0).unwrap() < -0.99);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let x = LatentGrid::zeros(Shape::new(1, 10, 16).unwrap());
        assert!(matches!(
            ssim(&x, &x, 1.0),
            Err(Error::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(t[i], t[10 - i]);
        }
    }
}

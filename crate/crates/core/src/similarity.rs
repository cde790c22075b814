//! Spatial similarity between two latents: channel-wise cosine, tile-averaged
//! block similarity, their weighted mix, and logistic sharpening against an
//! adaptive threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

const COSINE_FLOOR: f64 = 1e-12;

/// An `H x W` map of per-pixel scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SimilarityMap {
    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::InvalidRegion(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_vec(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.width + w]
    }

    pub fn stats(&self) -> MapStats {
        MapStats::of(&self.values)
    }

    fn ensure_same_dims(&self, other: &SimilarityMap) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::MapMismatch {
                map: other.dims(),
                latent: self.dims(),
            });
        }
        Ok(())
    }
}

/// Summary statistics of a map, accumulated in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Population variance.
    pub variance: f64,
}

impl MapStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            mean,
            min,
            max,
            variance,
        }
    }
}

/// Logistic sharpening parameters: slope `gamma` and threshold weight `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpenParams {
    pub gamma: f64,
    pub lambda: f64,
}

pub const RECOMMENDED_GAMMA: (f64, f64) = (20.0, 200.0);
pub const RECOMMENDED_LAMBDA: (f64, f64) = (0.04, 0.12);

impl SharpenParams {
    /// Validates `gamma > 0`; values outside the recommended ranges only warn.
    pub fn new(gamma: f64, lambda: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::OutOfDomain {
                name: "gamma",
                value: gamma,
                domain: "(0, inf)",
            });
        }
        if !lambda.is_finite() {
            return Err(Error::OutOfDomain {
                name: "lambda",
                value: lambda,
                domain: "finite reals",
            });
        }
        let params = Self { gamma, lambda };
        for w in params.warnings() {
            tracing::warn!("{w}");
        }
        Ok(params)
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.gamma < RECOMMENDED_GAMMA.0 || self.gamma > RECOMMENDED_GAMMA.1 {
            out.push(format!(
                "gamma = {} is outside the recommended range [{}, {}]",
                self.gamma, RECOMMENDED_GAMMA.0, RECOMMENDED_GAMMA.1
            ));
        }
        if self.lambda < RECOMMENDED_LAMBDA.0 || self.lambda > RECOMMENDED_LAMBDA.1 {
            out.push(format!(
                "lambda = {} is outside the recommended range [{}, {}]",
                self.lambda, RECOMMENDED_LAMBDA.0, RECOMMENDED_LAMBDA.1
            ));
        }
        out
    }
}

impl Default for SharpenParams {
    fn default() -> Self {
        Self {
            gamma: 100.0,
            lambda: 0.08,
        }
    }
}

/// Per-pixel cosine similarity between the channel vectors of `a` and `b`.
/// A zero channel vector scores 0.
pub fn cosine_map(a: &LatentGrid, b: &LatentGrid) -> Result<SimilarityMap> {
    a.ensure_same_shape(b)?;
    let shape = a.shape();
    let plane = shape.plane();
    let (xa, xb) = (a.as_slice(), b.as_slice());
    let mut dot = vec![0.0; plane];
    let mut na = vec![0.0; plane];
    let mut nb = vec![0.0; plane];
    for c in 0..shape.channels {
        let base = c * plane;
        for p in 0..plane {
            let (u, v) = (xa[base + p], xb[base + p]);
            dot[p] += u * v;
            na[p] += u * u;
            nb[p] += v * v;
        }
    }
    let values = (0..plane)
        .map(|p| {
            let denom = (na[p].sqrt() * nb[p].sqrt()).max(COSINE_FLOOR);
            (dot[p] / denom).clamp(-1.0, 1.0)
        })
        .collect();
    SimilarityMap::from_vec(shape.height, shape.width, values)
}

/// Averages `map` over non-overlapping `block x block` tiles and broadcasts
/// each tile mean back over its pixels. Edge tiles average over the pixels
/// they actually contain.
pub fn tile_average(map: &SimilarityMap, block: usize) -> Result<SimilarityMap> {
    if block == 0 {
        return Err(Error::OutOfDomain {
            name: "block",
            value: 0.0,
            domain: "[1, inf)",
        });
    }
    let (height, width) = map.dims();
    let mut out = vec![0.0; height * width];
    for h0 in (0..height).step_by(block) {
        let h1 = (h0 + block).min(height);
        for w0 in (0..width).step_by(block) {
            let w1 = (w0 + block).min(width);
            let mut sum = 0.0;
            for h in h0..h1 {
                for w in w0..w1 {
                    sum += map.values[h * width + w];
                }
            }
            let mean = sum / ((h1 - h0) * (w1 - w0)) as f64;
            for h in h0..h1 {
                out[h * width + w0..h * width + w1].fill(mean);
            }
        }
    }
    SimilarityMap::from_vec(height, width, out)
}

/// Block similarity: the cosine map averaged within each tile.
pub fn block_map(a: &LatentGrid, b: &LatentGrid, block: usize) -> Result<SimilarityMap> {
    if block == 0 {
        return Err(Error::OutOfDomain {
            name: "block",
            value: 0.0,
            domain: "[1, inf)",
        });
    }
    tile_average(&cosine_map(a, b)?, block)
}

/// `alpha * cos + (1 - alpha) * block`.
pub fn mix_maps(cos: &SimilarityMap, block: &SimilarityMap, alpha: f64) -> Result<SimilarityMap> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfDomain {
            name: "alpha",
            value: alpha,
            domain: "[0, 1]",
        });
    }
    cos.ensure_same_dims(block)?;
    let values = cos
        .values
        .iter()
        .zip(&block.values)
        .map(|(c, b)| alpha * c + (1.0 - alpha) * b)
        .collect();
    SimilarityMap::from_vec(cos.height, cos.width, values)
}

/// Adaptive threshold `mean + lambda * (max - min)` of `map`.
pub fn adaptive_threshold(map: &SimilarityMap, lambda: f64) -> f64 {
    let s = map.stats();
    // A rounded mean can step outside [min, max]; for a constant map that
    // would move tau off the value itself.
    s.mean.clamp(s.min, s.max) + lambda * (s.max - s.min)
}

/// `1 / (1 + exp(-gamma * (s - tau)))` per pixel, with `tau` recomputed from
/// this map. Saturated values are held strictly inside `(0, 1)`.
pub fn sharpen(s_mix: &SimilarityMap, params: SharpenParams) -> Result<SimilarityMap> {
    let tau = adaptive_threshold(s_mix, params.lambda);
    let values = s_mix
        .values
        .iter()
        .map(|&v| {
            // Exactly-at-threshold pixels map to exactly 0.5.
            let x = params.gamma * (v - tau);
            logistic(x).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
        })
        .collect();
    SimilarityMap::from_vec(s_mix.height, s_mix.width, values)
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw mixed map and its sharpened counterpart for one pair of latents.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityStack {
    pub mixed: SimilarityMap,
    pub sharpened: SimilarityMap,
}

pub fn similarity_stack(
    current: &LatentGrid,
    reference: &LatentGrid,
    alpha: f64,
    block: usize,
    params: SharpenParams,
) -> Result<SimilarityStack> {
    let cos = cosine_map(reference, current)?;
    let blocks = tile_average(&cos, block)?;
    let mixed = mix_maps(&cos, &blocks, alpha)?;
    let sharpened = sharpen(&mixed, params)?;
    Ok(SimilarityStack { mixed, sharpened })
}

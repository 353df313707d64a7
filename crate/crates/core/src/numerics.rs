//! Dense planes and volumes plus the handful of kernels shared by every stage.
//!
//! Everything is `f64` and row-major. Loops run in a fixed order so results
//! are bit-stable between runs.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single 2-D plane: similarity maps, density maps and masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height >= 1 && width >= 1, "grid must be at least 1x1");
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::shape("Grid2D::from_vec", height * width, values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid value at index {i} is not finite"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Skips validation; for intermediate results whose finiteness is
    /// checked downstream.
    pub(crate) fn from_raw(height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
        }
    }

    /// Builds a grid from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::from_vec(height, width, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    #[inline]
    pub fn add_at(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] += value;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn ensure_same_shape(&self, other: &Grid2D, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                context,
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }
}

/// A channel-major stack of planes (`channels x height x width`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume3D {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Volume3D {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels >= 1, "volume needs at least one channel");
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("volume needs at least one channel".into()));
        }
        if values.len() != channels * height * width {
            return Err(Error::shape(
                "Volume3D::from_vec",
                channels * height * width,
                values.len(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "volume value at index {i} is not finite"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            values,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.values[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.values[(c * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, value: f64) {
        self.values[(c * self.height + row) * self.width + col] = value;
    }

    /// Channel vector at one spatial position.
    pub fn column(&self, row: usize, col: usize) -> FeatureVec {
        FeatureVec((0..self.channels).map(|c| self.get(c, row, col)).collect())
    }

    /// Copies the column range `[x0, x1)` of every channel.
    pub fn crop_columns(&self, x0: usize, x1: usize) -> Volume3D {
        let w = x1 - x0;
        let mut out = Volume3D::zeros(self.channels, self.height, w);
        for c in 0..self.channels {
            for y in 0..self.height {
                let src = (c * self.height + y) * self.width;
                let dst = (c * self.height + y) * w;
                out.values[dst..dst + w].copy_from_slice(&self.values[src + x0..src + x1]);
            }
        }
        out
    }

    /// Places `left` and `right` side by side; heights and channels must agree.
    pub fn hconcat(left: &Volume3D, right: &Volume3D) -> Result<Volume3D> {
        if left.channels != right.channels || left.height != right.height {
            return Err(Error::shape(
                "Volume3D::hconcat",
                format!("{}x{}xN", left.channels, left.height),
                format!("{}x{}xN", right.channels, right.height),
            ));
        }
        let w = left.width + right.width;
        let mut out = Volume3D::zeros(left.channels, left.height, w);
        for c in 0..left.channels {
            for y in 0..left.height {
                let dst = (c * left.height + y) * w;
                let l = (c * left.height + y) * left.width;
                let r = (c * right.height + y) * right.width;
                out.values[dst..dst + left.width]
                    .copy_from_slice(&left.values[l..l + left.width]);
                out.values[dst + left.width..dst + w]
                    .copy_from_slice(&right.values[r..r + right.width]);
            }
        }
        Ok(out)
    }

    /// Samples the axis-aligned region `[x0,x1) x [y0,y1)` into an
    /// `out_h x out_w` volume with bilinear interpolation. Samples outside the
    /// image are clamped to the nearest edge pixel.
    pub fn resample_region(
        &self,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        out_h: usize,
        out_w: usize,
    ) -> Volume3D {
        let mut out = Volume3D::zeros(self.channels, out_h, out_w);
        let sx = (x1 - x0) / out_w as f64;
        let sy = (y1 - y0) / out_h as f64;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        for oy in 0..out_h {
            let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let iy0 = fy.floor() as usize;
            let iy1 = (iy0 + 1).min(self.height - 1);
            let ty = fy - iy0 as f64;
            for ox in 0..out_w {
                let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let ix0 = fx.floor() as usize;
                let ix1 = (ix0 + 1).min(self.width - 1);
                let tx = fx - ix0 as f64;
                for c in 0..self.channels {
                    let a = self.get(c, iy0, ix0);
                    let b = self.get(c, iy0, ix1);
                    let d = self.get(c, iy1, ix0);
                    let e = self.get(c, iy1, ix1);
                    let top = a + (b - a) * tx;
                    let bot = d + (e - d) * tx;
                    out.set(c, oy, ox, top + (bot - top) * ty);
                }
            }
        }
        out
    }

    /// Integer-pixel window of size `h x w` whose top-left corner is
    /// `(top, left)` (may be negative). Out-of-range pixels replicate the edge.
    pub fn window_replicate(&self, top: i64, left: i64, h: usize, w: usize) -> Volume3D {
        let mut out = Volume3D::zeros(self.channels, h, w);
        let max_y = self.height as i64 - 1;
        let max_x = self.width as i64 - 1;
        for c in 0..self.channels {
            for y in 0..h {
                let sy = (top + y as i64).clamp(0, max_y) as usize;
                for x in 0..w {
                    let sx = (left + x as i64).clamp(0, max_x) as usize;
                    out.set(c, y, x, self.get(c, sy, sx));
                }
            }
        }
        out
    }
}

/// A dense real vector (pooled features, patch embeddings, centroids).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVec(pub Vec<f64>);

impl FeatureVec {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|v| v * s).collect())
    }

    /// Elementwise mean of equally sized vectors.
    pub fn mean_of(vectors: &[FeatureVec]) -> Result<FeatureVec> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean of zero vectors".into()))?;
        let mut acc = vec![0.0; first.dim()];
        for v in vectors {
            if v.dim() != acc.len() {
                return Err(Error::shape("FeatureVec::mean_of", acc.len(), v.dim()));
            }
            for (a, x) in acc.iter_mut().zip(&v.0) {
                *a += x;
            }
        }
        let n = vectors.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(FeatureVec(acc))
    }
}

/// Cell grid `(floor(H/r), floor(W/r))` shared by features, similarity and
/// density maps.
pub fn similarity_grid_shape(height: usize, width: usize, r: usize) -> Result<(usize, usize)> {
    if r == 0 || height < r || width < r {
        return Err(Error::InvalidArgument(format!(
            "image {height}x{width} too small for downsampling ratio {r}"
        )));
    }
    Ok((height / r, width / r))
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn global_average_pool(vol: &Volume3D) -> FeatureVec {
    let n = vol.plane_len() as f64;
    FeatureVec(
        (0..vol.channels())
            .map(|c| vol.plane(c).iter().sum::<f64>() / n)
            .collect(),
    )
}

pub fn dot(a: &FeatureVec, b: &FeatureVec) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("dot", a.dim(), b.dim()));
    }
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum())
}

/// Cosine similarity clamped to `[-1, 1]`; zero when either operand has zero norm.
pub fn cosine(a: &FeatureVec, b: &FeatureVec) -> Result<f64> {
    let d = dot(a, b)?;
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((d / denom).clamp(-1.0, 1.0))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Gaussian smoothing that conserves mass exactly.
///
/// Each source cell spreads its value over the in-bounds part of a truncated
/// (radius `ceil(3 sigma)`) kernel renormalized to sum to one, so mass near
/// the border is folded back rather than lost. Separable: rows then columns.
pub fn gaussian_smooth(g: &Grid2D, sigma: f64) -> Result<Grid2D> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = g.shape();

    let scatter_1d = |src: &[f64], dst: &mut [f64], n: usize, stride: usize| {
        for i in 0..n as i64 {
            let v = src[i as usize * stride];
            if v == 0.0 {
                continue;
            }
            let lo = (i - radius).max(0);
            let hi = (i + radius).min(n as i64 - 1);
            let norm: f64 = (lo..=hi).map(|j| kernel[(j - i + radius) as usize]).sum();
            for j in lo..=hi {
                dst[j as usize * stride] += v * kernel[(j - i + radius) as usize] / norm;
            }
        }
    };

    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        scatter_1d(&g.values()[y * w..], &mut tmp[y * w..], w, 1);
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        scatter_1d(&tmp[x..], &mut out[x..], h, w);
    }
    Grid2D::from_vec(h, w, out)
}

/// Affine map onto `[0, 1]`; a constant grid maps to all zeros.
pub fn minmax_normalize(g: &Grid2D) -> Grid2D {
    let lo = g.min();
    let hi = g.max();
    if hi <= lo {
        return Grid2D::zeros(g.height(), g.width());
    }
    let span = hi - lo;
    g.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// Seeded, platform-independent random stream (ChaCha8).
///
/// Named sub-streams let pipeline stages draw independent, reproducible
/// randomness from one root seed.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this stream's seed and a name.
    pub fn substream(&self, name: &str) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, name))
    }

    /// Draws a fresh seed from this stream and returns a stream for it.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.inner.next_u64())
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the name, mixed with the parent seed.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn gap_examples() {
        let v = Volume3D::from_vec(1, 2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_average_pool(&v).0, vec![4.0]);

        let v = Volume3D::from_vec(2, 1, 2, vec![2.0, 4.0, 0.0, 10.0]).unwrap();
        assert_eq!(global_average_pool(&v).0, vec![3.0, 5.0]);

        let v = Volume3D::from_vec(3, 4, 5, vec![2.5; 60]).unwrap();
        assert_eq!(global_average_pool(&v).0, vec![2.5; 3]);
    }

    #[test]
    fn dot_examples() {
        let f = |v: &[f64]| FeatureVec(v.to_vec());
        assert_eq!(dot(&f(&[1.0, 0.0]), &f(&[0.5, 2.0])).unwrap(), 0.5);
        assert_eq!(dot(&f(&[0.0, 0.0]), &f(&[3.0, -7.0])).unwrap(), 0.0);
        assert_eq!(dot(&f(&[1.0, 2.0, 3.0]), &f(&[4.0, 5.0, 6.0])).unwrap(), 32.0);
        assert!(dot(&f(&[1.0]), &f(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn cosine_examples() {
        let f = |v: &[f64]| FeatureVec(v.to_vec());
        assert_eq!(cosine(&f(&[1.0, 0.0]), &f(&[2.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine(&f(&[1.0, 0.0]), &f(&[0.0, 3.0])).unwrap(), 0.0);
        let c = cosine(&f(&[1.0, 1.0]), &f(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(cosine(&f(&[0.0, 0.0]), &f(&[1.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn smoothing_zero_and_impulse() {
        let z = gaussian_smooth(&Grid2D::zeros(9, 7), 1.5).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));

        for sigma in [0.5, 1.0, 2.0, 5.0] {
            let mut g = Grid2D::zeros(16, 16);
            g.set(7, 3, 1.0);
            let s = gaussian_smooth(&g, sigma).unwrap();
            assert!((s.sum() - 1.0).abs() < 1e-6, "sigma {sigma}: {}", s.sum());
        }
        assert!(gaussian_smooth(&Grid2D::zeros(2, 2), 0.0).is_err());
        assert!(gaussian_smooth(&Grid2D::zeros(2, 2), -1.0).is_err());
    }

    /// Direct 2-D evaluation of the normalized scatter, independent of the
    /// separable implementation.
    fn direct_scatter(g: &Grid2D, sigma: f64) -> Grid2D {
        let r = (3.0 * sigma).ceil() as i64;
        let (h, w) = (g.height() as i64, g.width() as i64);
        let mut out = Grid2D::zeros(g.height(), g.width());
        for sy in 0..h {
            for sx in 0..w {
                let v = g.get(sy as usize, sx as usize);
                if v == 0.0 {
                    continue;
                }
                let mut taps = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (y, x) = (sy + dy, sx + dx);
                        if y >= 0 && y < h && x >= 0 && x < w {
                            let k = (-((dy * dy) as f64) / (2.0 * sigma * sigma)).exp()
                                * (-((dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
                            taps.push((y as usize, x as usize, k));
                        }
                    }
                }
                let norm: f64 = taps.iter().map(|t| t.2).sum();
                for (y, x, k) in taps {
                    out.add_at(y, x, v * k / norm);
                }
            }
        }
        out
    }

    #[test]
    fn corner_impulse_peaks_at_corner() {
        let mut g = Grid2D::zeros(10, 10);
        g.set(0, 0, 1.0);
        let s = gaussian_smooth(&g, 1.0).unwrap();
        let direct = direct_scatter(&g, 1.0);
        let argmax = s
            .values()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!(argmax.0, 0);
        for (a, b) in s.values().iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn minmax_examples() {
        let g = Grid2D::from_rows(&[&[0.0, 10.0]]).unwrap();
        assert_eq!(minmax_normalize(&g).values(), &[0.0, 1.0]);
        let g = Grid2D::filled(3, 3, 4.2);
        assert!(minmax_normalize(&g).values().iter().all(|&v| v == 0.0));
        let g = Grid2D::from_rows(&[&[2.0, 4.0, 6.0]]).unwrap();
        assert_eq!(minmax_normalize(&g).values(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Grid2D::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Volume3D::from_vec(1, 1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn substreams_are_stable_and_distinct() {
        let root = SeededRng::new(42);
        let mut a = root.substream("gen");
        let mut b = root.substream("gen");
        let mut c = root.substream("kmeans");
        let xa: u64 = a.gen();
        assert_eq!(xa, b.gen::<u64>());
        assert_ne!(xa, c.gen::<u64>());
    }

    #[test]
    fn resample_identity_region() {
        let vals: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64).collect();
        let v = Volume3D::from_vec(2, 4, 4, vals).unwrap();
        let r = v.resample_region(0.0, 0.0, 4.0, 4.0, 4, 4);
        assert_eq!(r, v);
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 5),
            b in prop::collection::vec(-10.0f64..10.0, 5),
            lambda in 0.01f64..100.0,
        ) {
            let a = FeatureVec(a);
            let b = FeatureVec(b);
            let c1 = cosine(&a, &b).unwrap();
            let c2 = cosine(&a.scaled(lambda), &b).unwrap();
            prop_assert!((c1 - c2).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&c1));
        }

        #[test]
        fn smoothing_conserves_mass(
            vals in prop::collection::vec(0.0f64..5.0, 12 * 9),
            sigma in 0.3f64..4.0,
        ) {
            let g = Grid2D::from_vec(12, 9, vals).unwrap();
            let s = gaussian_smooth(&g, sigma).unwrap();
            let sin = g.sum();
            prop_assert!((s.sum() - sin).abs() <= 1e-6 * sin.max(1.0));
        }

        #[test]
        fn gap_of_constant_volume(k in -50.0f64..50.0, c in 1usize..5, h in 1usize..6, w in 1usize..6) {
            let v = Volume3D::from_vec(c, h, w, vec![k; c * h * w]).unwrap();
            for x in global_average_pool(&v).0 {
                prop_assert!((x - k).abs() < 1e-12);
            }
        }
    }
}

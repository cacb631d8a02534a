use std::fmt::Debug;

use crate::error::{ensure_arg, Result};

/// Element type of feature tensors. Reductions are carried out in `f64`
/// regardless of the storage type.
pub trait Scalar: Copy + Debug + Default + PartialEq + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Anything stored as contiguous rows of `channels` values.
pub trait Channels<T: Scalar>: Clone {
    fn channels(&self) -> usize;
    fn data(&self) -> &[T];
    fn data_mut(&mut self) -> &mut [T];
}

/// `F × N × C` token tensor, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor<T> {
    pub frames: usize,
    pub tokens: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> TokenTensor<T> {
    pub fn new(frames: usize, tokens: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        ensure_arg!(
            data.len() == frames * tokens * channels,
            "token tensor {frames}x{tokens}x{channels} needs {} values, got {}",
            frames * tokens * channels,
            data.len()
        );
        Ok(Self {
            frames,
            tokens,
            channels,
            data,
        })
    }

    pub fn zeros(frames: usize, tokens: usize, channels: usize) -> Self {
        Self {
            frames,
            tokens,
            channels,
            data: vec![T::default(); frames * tokens * channels],
        }
    }

    #[inline]
    pub fn offset(&self, f: usize, n: usize) -> usize {
        (f * self.tokens + n) * self.channels
    }

    #[inline]
    pub fn row(&self, f: usize, n: usize) -> &[T] {
        let o = self.offset(f, n);
        &self.data[o..o + self.channels]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.tokens, self.channels)
    }
}

impl<T: Scalar> Channels<T> for TokenTensor<T> {
    fn channels(&self) -> usize {
        self.channels
    }
    fn data(&self) -> &[T] {
        &self.data
    }
    fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Latent features `Z` over `F × H × W × C`, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume<T> {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureVolume<T> {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        ensure_arg!(
            frames > 0 && height > 0 && width > 0 && channels > 0,
            "feature volume dimensions must be positive, got {frames}x{height}x{width}x{channels}"
        );
        ensure_arg!(
            data.len() == frames * height * width * channels,
            "feature volume {frames}x{height}x{width}x{channels} needs {} values, got {}",
            frames * height * width * channels,
            data.len()
        );
        ensure_arg!(
            data.iter().all(|v| v.is_finite()),
            "feature volume contains non-finite values"
        );
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![T::default(); frames * height * width * channels],
        }
    }

    pub fn from_fn(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(frames * height * width * channels);
        for fr in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    for c in 0..channels {
                        data.push(f(fr, y, x, c));
                    }
                }
            }
        }
        Self {
            frames,
            height,
            width,
            channels,
            data,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// `(F, H, W, C)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, f: usize, y: usize, x: usize) -> usize {
        ((f * self.height + y) * self.width + x) * self.channels
    }

    #[inline]
    pub fn at(&self, f: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.offset(f, y, x) + c]
    }

    #[inline]
    pub fn pixel(&self, f: usize, y: usize, x: usize) -> &[T] {
        let o = self.offset(f, y, x);
        &self.data[o..o + self.channels]
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Reinterprets as `F × (H·W) × C` token columns.
    pub fn into_tokens(self) -> TokenTensor<T> {
        TokenTensor {
            frames: self.frames,
            tokens: self.height * self.width,
            channels: self.channels,
            data: self.data,
        }
    }

    pub fn from_tokens(t: TokenTensor<T>, height: usize, width: usize) -> Result<Self> {
        ensure_arg!(
            t.tokens == height * width,
            "{} tokens cannot be laid out as {height}x{width}",
            t.tokens
        );
        Ok(Self {
            frames: t.frames,
            height,
            width,
            channels: t.channels,
            data: t.data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> FeatureVolume<U> {
        FeatureVolume {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl<T: Scalar> Channels<T> for FeatureVolume<T> {
    fn channels(&self) -> usize {
        self.channels
    }
    fn data(&self) -> &[T] {
        &self.data
    }
    fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Features gathered along `L` trajectories, `F × L × C`, with the `F × L`
/// validity mask they were gathered under.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajFeatures<T> {
    pub tokens: TokenTensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> TrajFeatures<T> {
    pub fn frames(&self) -> usize {
        self.tokens.frames
    }
    pub fn count(&self) -> usize {
        self.tokens.tokens
    }
    #[inline]
    pub fn is_valid(&self, f: usize, l: usize) -> bool {
        self.mask[f * self.tokens.tokens + l]
    }
}

impl<T: Scalar> Channels<T> for TrajFeatures<T> {
    fn channels(&self) -> usize {
        self.tokens.channels
    }
    fn data(&self) -> &[T] {
        &self.tokens.data
    }
    fn data_mut(&mut self) -> &mut [T] {
        &mut self.tokens.data
    }
}

/// Row-major `dim × dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> SquareMatrix<T> {
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        ensure_arg!(
            data.len() == dim * dim,
            "{dim}x{dim} matrix needs {} values, got {}",
            dim * dim,
            data.len()
        );
        Ok(Self { dim, data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![T::default(); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = T::from_f64(1.0);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.dim + j]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| v.to_f64() == 0.0)
    }

    pub fn cast<U: Scalar>(&self) -> SquareMatrix<U> {
        SquareMatrix {
            dim: self.dim,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Projector matrices of one attention branch. Projectors carry no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub wq: SquareMatrix<T>,
    pub wk: SquareMatrix<T>,
    pub wv: SquareMatrix<T>,
    pub wo: SquareMatrix<T>,
    heads: usize,
}

pub const DEFAULT_HEADS: usize = 4;

impl<T: Scalar> AttentionWeights<T> {
    pub fn new(
        wq: SquareMatrix<T>,
        wk: SquareMatrix<T>,
        wv: SquareMatrix<T>,
        wo: SquareMatrix<T>,
        heads: usize,
    ) -> Result<Self> {
        let c = wq.dim();
        ensure_arg!(
            wk.dim() == c && wv.dim() == c && wo.dim() == c,
            "projector sizes differ: {}, {}, {}, {}",
            c,
            wk.dim(),
            wv.dim(),
            wo.dim()
        );
        ensure_arg!(heads >= 1, "head count must be at least 1");
        ensure_arg!(
            c.is_multiple_of(heads),
            "channel count {c} is not divisible by {heads} heads"
        );
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
        })
    }

    pub fn identity(channels: usize, heads: usize) -> Result<Self> {
        let i = SquareMatrix::identity(channels);
        Self::new(i.clone(), i.clone(), i.clone(), i, heads)
    }

    pub fn channels(&self) -> usize {
        self.wq.dim()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    pub fn is_finite(&self) -> bool {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .all(|m| m.data().iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> AttentionWeights<U> {
        AttentionWeights {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            heads: self.heads,
        }
    }
}

/// Result of scattering trajectory features back onto the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BackProjection<T> {
    pub values: FeatureVolume<T>,
    /// `F × H × W` number of valid contributions per cell.
    pub counts: Vec<u32>,
}

/// Inputs to the denoising objective; the denoiser itself lives outside
/// this crate, so only the clean target and noise are held here.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingBatch<T> {
    pub x0: FeatureVolume<T>,
    pub noise: FeatureVolume<T>,
    pub sigma: f64,
    pub condition: Vec<f32>,
}

impl<T: Scalar> DenoisingBatch<T> {
    pub fn new(
        x0: FeatureVolume<T>,
        noise: FeatureVolume<T>,
        sigma: f64,
        condition: Vec<f32>,
    ) -> Result<Self> {
        ensure_arg!(
            x0.shape() == noise.shape(),
            "x0 shape {:?} differs from noise shape {:?}",
            x0.shape(),
            noise.shape()
        );
        ensure_arg!(
            sigma > 0.0 && sigma.is_finite(),
            "sigma must be positive, got {sigma}"
        );
        Ok(Self {
            x0,
            noise,
            sigma,
            condition,
        })
    }

    /// Denoiser input `x0 + n`.
    pub fn noised(&self) -> FeatureVolume<T> {
        let mut out = self.x0.clone();
        for (o, n) in out.data_mut().iter_mut().zip(self.noise.data()) {
            *o = T::from_f64(o.to_f64() + n.to_f64());
        }
        out
    }
}

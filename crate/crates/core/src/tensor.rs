//! Dense height × width × channels tensors for latents and images.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major, channel-last 3-D tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<S> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<S>,
}

/// Latent code `Z`, `Z_t` or `L_t`: height × width × d in latent pixels.
pub type LatentCanvas<S> = Tensor3<S>;

/// Decoded image with intensities nominally in `[0, 1]`.
pub type ImageTensor<S> = Tensor3<S>;

impl<S: Scalar> Tensor3<S> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, S::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: S) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} values cannot fill a {height}x{width}x{channels} tensor",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a tensor by evaluating `f(row, col, channel)` everywhere.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    fn offset(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> S {
        self.data[self.offset(y, x) + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: S) {
        let o = self.offset(y, x);
        self.data[o + c] = value;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[S] {
        let o = self.offset(y, x);
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [S] {
        let o = self.offset(y, x);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Copies the window with top-left corner `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::arg(format!(
                "crop {height}x{width} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let row_len = width * self.channels;
        let mut data = Vec::with_capacity(height * row_len);
        for y in y0..y0 + height {
            let o = self.offset(y, x0);
            data.extend_from_slice(&self.data[o..o + row_len]);
        }
        Ok(Self {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max))
    }

    pub fn mean(&self) -> S {
        if self.data.is_empty() {
            return S::zero();
        }
        self.data.iter().copied().sum::<S>() / S::of(self.data.len() as f64)
    }

    /// Replicates every pixel into a `factor × factor` block.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::arg("upsampling factor must be >= 1"));
        }
        Ok(Self::from_fn(
            self.height * factor,
            self.width * factor,
            self.channels,
            |y, x, c| self.get(y / factor, x / factor, c),
        ))
    }

    /// Averages every `factor × factor` block (area filter).
    pub fn downsample_area(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::arg("downsampling factor must be >= 1"));
        }
        if self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::shape(format!(
                "{}x{} is not divisible by {factor}",
                self.height, self.width
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = S::of((factor * factor) as f64);
        let mut out = Self::zeros(h, w, self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let mut acc = S::zero();
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(y * factor + dy, x * factor + dx, c);
                        }
                    }
                    out.set(y, x, c, acc / norm);
                }
            }
        }
        Ok(out)
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg("resize target must be non-empty"));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let sample_axis = |pos: usize, scale: f64, len: usize| {
            let p = ((pos as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = p.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, S::of(p - lo as f64))
        };
        let rows: Vec<_> = (0..height).map(|y| sample_axis(y, sy, self.height)).collect();
        let cols: Vec<_> = (0..width).map(|x| sample_axis(x, sx, self.width)).collect();
        Ok(Self::from_fn(height, width, self.channels, |y, x, c| {
            let (y0, y1, fy) = rows[y];
            let (x0, x1, fx) = cols[x];
            let top = self.get(y0, x0, c) * (S::one() - fx) + self.get(y0, x1, c) * fx;
            let bottom = self.get(y1, x0, c) * (S::one() - fx) + self.get(y1, x1, c) * fx;
            top * (S::one() - fy) + bottom * fy
        }))
    }

    pub fn cast<T: Scalar>(&self) -> Tensor3<T> {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }
}

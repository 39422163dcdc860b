use serde::{Deserialize, Serialize};

use super::taxonomy::{ClassId, ClassTaxonomy, DEFAULT_IGNORE_ID};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

/// Per-pixel class ids (row-major) with a distinguished ignore value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMask {
    height: usize,
    width: usize,
    ignore_id: ClassId,
    data: Vec<ClassId>,
}

impl SemanticMask {
    /// Mask using the file-format ignore value (255).
    pub fn new(height: usize, width: usize, data: Vec<ClassId>) -> Result<Self> {
        Self::with_ignore(height, width, data, DEFAULT_IGNORE_ID)
    }

    pub fn with_ignore(
        height: usize,
        width: usize,
        data: Vec<ClassId>,
        ignore_id: ClassId,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg(format!("mask must be at least 1x1, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            ignore_id,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: ClassId) -> Result<Self> {
        Self::new(height, width, vec![class; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> ClassId) -> Result<Self> {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ignore_id(&self) -> ClassId {
        self.ignore_id
    }

    pub fn data(&self) -> &[ClassId] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> ClassId {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_ignore(&self, y: usize, x: usize) -> bool {
        self.get(y, x) == self.ignore_id
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Fails on the first pixel that is neither a taxonomy class nor the ignore id.
    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        if self.ignore_id != taxonomy.ignore_id() {
            return Err(Error::Config(format!(
                "mask ignore id {} differs from taxonomy ignore id {}",
                self.ignore_id,
                taxonomy.ignore_id()
            )));
        }
        match self
            .data
            .iter()
            .position(|&v| v != self.ignore_id && !taxonomy.contains(v))
        {
            Some(i) => Err(Error::InvalidClass {
                value: self.data[i] as u32,
                row: i / self.width,
                col: i % self.width,
            }),
            None => Ok(()),
        }
    }

    /// Unique non-ignore class ids, ascending.
    pub fn class_set(&self) -> Vec<ClassId> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        seen[self.ignore_id as usize] = false;
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::arg("upsampling factor must be >= 1"));
        }
        let (h, w) = (self.height * factor, self.width * factor);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let row = &self.data[(y / factor) * self.width..(y / factor + 1) * self.width];
            data.extend((0..w).map(|x| row[x / factor]));
        }
        Self::with_ignore(h, w, data, self.ignore_id)
    }

    /// Nearest-neighbor resampling with pixel-center alignment.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let map = nearest_index_map(self.height, self.width, height, width)?;
        let data = map.iter().map(|&i| self.data[i]).collect();
        Self::with_ignore(height, width, data, self.ignore_id)
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::arg(format!(
                "crop {height}x{width} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + width]);
        }
        Self::with_ignore(height, width, data, self.ignore_id)
    }

    /// Number of pixels carrying each class id (index = id, length 256).
    pub fn histogram(&self) -> [u64; 256] {
        let mut hist = [0u64; 256];
        for &v in &self.data {
            hist[v as usize] += 1;
        }
        hist
    }
}

fn nearest_index_map(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<usize>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("resize target must be non-empty"));
    }
    let src = |pos: usize, from: usize, to: usize| ((2 * pos + 1) * from / (2 * to)).min(from - 1);
    let mut map = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = src(y, h, out_h);
        for x in 0..out_w {
            map.push(sy * w + src(x, w, out_w));
        }
    }
    Ok(map)
}

/// One-hot class encoding of a mask.
///
/// Stored compactly as a class index per pixel; channel `c` at a pixel is 1 iff
/// the pixel has class `c`. Ignore pixels read as the all-zero vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotCondition {
    channels: usize,
    height: usize,
    width: usize,
    ignore_id: ClassId,
    classes: Vec<ClassId>,
}

impl OneHotCondition {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Value of channel `c` at `(y, x)`, 0 or 1.
    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        u8::from(self.classes[y * self.width + x] as usize == c)
    }

    /// Hot channel at `(y, x)`, `None` for ignore pixels.
    #[inline]
    pub fn hot_channel(&self, y: usize, x: usize) -> Option<ClassId> {
        let v = self.classes[y * self.width + x];
        (v != self.ignore_id).then_some(v)
    }

    pub fn pixel(&self, y: usize, x: usize) -> Vec<u8> {
        (0..self.channels).map(|c| self.get(y, x, c)).collect()
    }

    /// Dense channel-last tensor of 0/1 values.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor3<S> {
        Tensor3::from_fn(self.height, self.width, self.channels, |y, x, c| {
            if self.get(y, x, c) == 1 {
                S::one()
            } else {
                S::zero()
            }
        })
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::arg(format!(
                "condition crop {height}x{width} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut classes = Vec::with_capacity(height * width);
        for y in y0..y0 + height {
            classes.extend_from_slice(
                &self.classes[y * self.width + x0..y * self.width + x0 + width],
            );
        }
        Ok(Self {
            channels: self.channels,
            height,
            width,
            ignore_id: self.ignore_id,
            classes,
        })
    }
}

pub fn encode_one_hot(mask: &SemanticMask, taxonomy: &ClassTaxonomy) -> Result<OneHotCondition> {
    mask.validate(taxonomy)?;
    Ok(OneHotCondition {
        channels: taxonomy.num_classes(),
        height: mask.height,
        width: mask.width,
        ignore_id: mask.ignore_id,
        classes: mask.data.clone(),
    })
}

/// Binary map of latent pixels pinned to the first-pass generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InpaintMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl InpaintMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} inpaint mask",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::arg(format!("inpaint mask values must be 0/1, found {v}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|i| u8::from(f(i / width, i % width)))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// True when every 1-pixel of `self` is also 1 in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::arg("upsampling factor must be >= 1"));
        }
        Ok(Self::from_fn(self.height * factor, self.width * factor, |y, x| {
            self.get(y / factor, x / factor) == 1
        }))
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let map = nearest_index_map(self.height, self.width, height, width)?;
        Ok(Self {
            height,
            width,
            data: map.iter().map(|&i| self.data[i]).collect(),
        })
    }
}

use serde::{Deserialize, Serialize};

use super::mask::SemanticMask;
use super::taxonomy::ClassTaxonomy;
use crate::error::{Error, Result};

/// Pixel counts and frequencies `f_c` over labeled (non-ignore) pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub pixel_counts: Vec<u64>,
    pub total_labeled: u64,
    pub frequencies: Vec<f64>,
}

impl ClassStats {
    pub fn from_counts(pixel_counts: Vec<u64>) -> Result<Self> {
        let total: u64 = pixel_counts.iter().sum();
        if total == 0 {
            return Err(Error::NoLabeledPixels);
        }
        let frequencies = pixel_counts
            .iter()
            .map(|&n| n as f64 / total as f64)
            .collect();
        Ok(Self {
            pixel_counts,
            total_labeled: total,
            frequencies,
        })
    }

    /// Stats built directly from frequencies; counts are left empty.
    pub fn from_frequencies(frequencies: Vec<f64>) -> Result<Self> {
        if frequencies.is_empty() {
            return Err(Error::Empty("frequency vector"));
        }
        if let Some(f) = frequencies.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::arg(format!("class frequency {f} outside [0, 1]")));
        }
        Ok(Self {
            pixel_counts: Vec::new(),
            total_labeled: 0,
            frequencies,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.frequencies.len()
    }

    /// Index of the least frequent class (lowest id on ties).
    pub fn rarest(&self) -> usize {
        self.frequencies
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, &f)| if f < best.1 { (i, f) } else { best })
            .0
    }
}

/// Streaming per-class pixel counter.
#[derive(Debug, Clone)]
pub struct ClassCounter {
    counts: Vec<u64>,
}

impl ClassCounter {
    pub fn new(taxonomy: &ClassTaxonomy) -> Self {
        Self {
            counts: vec![0; taxonomy.num_classes()],
        }
    }

    pub fn add(&mut self, mask: &SemanticMask, taxonomy: &ClassTaxonomy) -> Result<()> {
        mask.validate(taxonomy)?;
        let hist = mask.histogram();
        for (c, n) in self.counts.iter_mut().enumerate() {
            *n += hist[c];
        }
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn finish(self) -> Result<ClassStats> {
        ClassStats::from_counts(self.counts)
    }
}

pub fn compute_class_frequencies(
    masks: &[SemanticMask],
    taxonomy: &ClassTaxonomy,
) -> Result<ClassStats> {
    if masks.is_empty() {
        return Err(Error::Empty("mask list"));
    }
    let mut counter = ClassCounter::new(taxonomy);
    for mask in masks {
        counter.add(mask, taxonomy)?;
    }
    counter.finish()
}

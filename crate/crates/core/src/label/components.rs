//! Same-class connected components (4-connectivity) and the large-region mask.

use std::collections::VecDeque;

use super::mask::{InpaintMask, SemanticMask};
use super::taxonomy::ClassId;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub label: u32,
    pub class: ClassId,
    pub area: usize,
}

/// Per-pixel component labels (`0` = ignore pixel, components numbered from 1
/// in raster order of their first pixel) plus the component table.
#[derive(Debug, Clone)]
pub struct ComponentMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

/// Labels 4-connected regions of equal class. Ignore pixels are never labeled.
pub fn label_components(mask: &SemanticMask) -> ComponentMap {
    let (h, w) = (mask.height(), mask.width());
    let data = mask.data();
    let ignore = mask.ignore_id();
    let mut labels = vec![0u32; h * w];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..h * w {
        if labels[start] != 0 || data[start] == ignore {
            continue;
        }
        let class = data[start];
        let label = components.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut area = 0usize;
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if labels[j] == 0 && data[j] == class {
                    labels[j] = label;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        components.push(Component { label, class, area });
    }

    ComponentMap {
        height: h,
        width: w,
        labels,
        components,
    }
}

/// Marks every pixel of a same-class component whose area fraction of the
/// whole mask is at least `area_threshold`, then nearest-upsamples by `factor`.
///
/// A threshold above 1 selects nothing; a threshold at or below 0 selects every
/// labeled pixel.
pub fn large_component_mask(
    mask: &SemanticMask,
    area_threshold: f64,
    factor: usize,
) -> Result<InpaintMask> {
    let map = label_components(mask);
    let total = (mask.height() * mask.width()) as f64;
    let keep: Vec<bool> = std::iter::once(false)
        .chain(
            map.components
                .iter()
                .map(|c| c.area as f64 / total >= area_threshold),
        )
        .collect();
    let base = InpaintMask::from_fn(mask.height(), mask.width(), |y, x| {
        keep[map.labels[y * mask.width() + x] as usize]
    });
    base.upsample_nearest(factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pixels_are_separate_components() {
        let m = SemanticMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let map = label_components(&m);
        assert_eq!(map.components.len(), 4);
    }

    #[test]
    fn uniform_mask_is_fully_kept() {
        let m = SemanticMask::filled(8, 8, 3).unwrap();
        let inpaint = large_component_mask(&m, 0.1, 2).unwrap();
        assert_eq!((inpaint.height(), inpaint.width()), (16, 16));
        assert_eq!(inpaint.count_ones(), 256);
    }

    #[test]
    fn small_blob_below_threshold() {
        // 10x10 mask, class-1 blob of 2x2 = 4% of the area; background class 0 elsewhere.
        let m = SemanticMask::from_fn(10, 10, |y, x| if y < 2 && x < 2 { 1 } else { 0 }).unwrap();
        let inpaint = large_component_mask(&m, 0.05, 1).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                let expected = u8::from(!(y < 2 && x < 2));
                assert_eq!(inpaint.get(y, x), expected, "pixel ({y},{x})");
            }
        }

        // Only the blob, surrounded by ignore, gives an all-zero mask.
        let m = SemanticMask::from_fn(10, 10, |y, x| if y < 2 && x < 2 { 1 } else { 255 }).unwrap();
        assert_eq!(large_component_mask(&m, 0.05, 1).unwrap().count_ones(), 0);
    }

    #[test]
    fn keeps_only_the_large_component() {
        // 10x10 of ignore; class-2 component A: rows 0..3 full width (30%),
        // component B: 2 pixels at row 9 (2%), separated by ignore rows.
        let m = SemanticMask::from_fn(10, 10, |y, x| match (y, x) {
            (0..=2, _) => 2,
            (9, 0..=1) => 2,
            _ => 255,
        })
        .unwrap();
        let inpaint = large_component_mask(&m, 0.1, 1).unwrap();
        assert_eq!(inpaint.count_ones(), 30);
        for x in 0..10 {
            assert_eq!(inpaint.get(0, x), 1);
            assert_eq!(inpaint.get(9, x), 0);
        }
    }
}

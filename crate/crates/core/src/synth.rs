//! Procedural street-scene masks and flat-shaded source images for demos and
//! tests. Layouts follow the driving taxonomy ids; rare classes (train,
//! motorcycle, bus, rider) appear in a minority of scenes.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::{write_mask_png, write_rgb_png, ClassId, ClassTaxonomy, SemanticMask};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

const ROAD: ClassId = 0;
const SIDEWALK: ClassId = 1;
const BUILDING: ClassId = 2;
const POLE: ClassId = 5;
const SIGN: ClassId = 7;
const VEGETATION: ClassId = 8;
const SKY: ClassId = 10;
const PERSON: ClassId = 11;
const RIDER: ClassId = 12;
const CAR: ClassId = 13;
const BUS: ClassId = 15;
const TRAIN: ClassId = 16;
const MOTORCYCLE: ClassId = 17;

fn fill(data: &mut [ClassId], w: usize, (y0, x0, y1, x1): (usize, usize, usize, usize), c: ClassId) {
    for y in y0..y1 {
        for v in &mut data[y * w + x0..y * w + x1] {
            *v = c;
        }
    }
}

/// Random box of relative size `(rh, rw)` resting with its bottom in `[ymin, ymax)`.
fn place<R: Rng>(rng: &mut R, h: usize, w: usize, rh: f64, rw: f64, ymin: f64, ymax: f64) -> (usize, usize, usize, usize) {
    let bh = ((h as f64 * rh) as usize).clamp(1, h);
    let bw = ((w as f64 * rw) as usize).clamp(1, w);
    let bottom = (h as f64 * rng.random_range(ymin..ymax)) as usize;
    let y1 = bottom.clamp(bh, h);
    let x0 = rng.random_range(0..=w - bw);
    (y1 - bh, x0, y1, x0 + bw)
}

/// A street layout of size `h × w` using the driving taxonomy ids.
pub fn street_mask<R: Rng>(h: usize, w: usize, rng: &mut R) -> Result<SemanticMask> {
    if h < 8 || w < 8 {
        return Err(Error::arg("synthetic masks need at least 8x8 pixels"));
    }
    let mut d = vec![ROAD; h * w];
    let horizon = (h as f64 * rng.random_range(0.3..0.45)) as usize;
    let road_top = (h as f64 * rng.random_range(0.55..0.65)) as usize;
    fill(&mut d, w, (0, 0, horizon, w), SKY);
    fill(&mut d, w, (horizon, 0, road_top, w), BUILDING);
    let veg = (w as f64 * rng.random_range(0.1..0.3)) as usize;
    let veg_x = rng.random_range(0..=w - veg);
    fill(&mut d, w, (horizon / 2, veg_x, road_top, veg_x + veg), VEGETATION);
    let walk = ((h - road_top) as f64 * 0.25) as usize;
    fill(&mut d, w, (road_top, 0, road_top + walk, w), SIDEWALK);

    for _ in 0..rng.random_range(1..=3) {
        let b = place(rng, h, w, 0.12, 0.18, 0.75, 0.98);
        fill(&mut d, w, b, CAR);
    }
    if rng.random_bool(0.6) {
        let x = rng.random_range(0..w - 1);
        let pw = (w / 64).max(1);
        fill(&mut d, w, (horizon / 2, x, road_top + walk, (x + pw).min(w)), POLE);
        let s = (w / 24).max(2);
        let sx = x.saturating_sub(s / 2).min(w - s);
        fill(&mut d, w, (horizon / 2, sx, horizon / 2 + s, sx + s), SIGN);
    }
    if rng.random_bool(0.4) {
        let b = place(rng, h, w, 0.15, 0.04, 0.7, 0.95);
        fill(&mut d, w, b, PERSON);
    }
    if rng.random_bool(0.12) {
        let b = place(rng, h, w, 0.2, 0.5, 0.7, 0.8);
        fill(&mut d, w, b, TRAIN);
    }
    if rng.random_bool(0.1) {
        let b = place(rng, h, w, 0.08, 0.06, 0.8, 0.98);
        let (y0, x0, y1, x1) = b;
        fill(&mut d, w, b, MOTORCYCLE);
        let rider_top = y0.saturating_sub(y1 - y0);
        fill(&mut d, w, (rider_top, x0, y0, x1), RIDER);
    }
    if rng.random_bool(0.08) {
        let b = place(rng, h, w, 0.2, 0.3, 0.75, 0.9);
        fill(&mut d, w, b, BUS);
    }
    if rng.random_bool(0.3) {
        let b = place(rng, h, w, 0.05, 0.1, 0.9, 1.0);
        fill(&mut d, w, b, 255);
    }
    SemanticMask::new(h, w, d)
}

/// Palette rendering with a mild per-class vertical shading, standing in for a
/// source-domain photo.
pub fn render_source_image<S: Scalar>(mask: &SemanticMask, taxonomy: &ClassTaxonomy) -> ImageTensor<S> {
    let h = mask.height().max(1) as f64;
    ImageTensor::from_fn(mask.height(), mask.width(), 3, |y, x, c| {
        if mask.is_ignore(y, x) {
            return S::zero();
        }
        let color = taxonomy.color(mask.get(y, x))[c] as f64 / 255.0;
        S::of((color * (0.85 + 0.15 * y as f64 / h)).clamp(0.0, 1.0))
    })
}

/// Paths written by [`write_demo_corpus`].
#[derive(Debug, Clone)]
pub struct DemoCorpus {
    pub mask_dir: PathBuf,
    pub image_dir: PathBuf,
    pub ids: Vec<String>,
}

/// Writes `count` masks to `<root>/masks/` and matching source images to
/// `<root>/images/`, named `scene_0000.png`, ...
pub fn write_demo_corpus(
    root: &Path,
    count: usize,
    size: (usize, usize),
    seed: u64,
    taxonomy: &ClassTaxonomy,
) -> Result<DemoCorpus> {
    let mask_dir = root.join("masks");
    let image_dir = root.join("images");
    for d in [&mask_dir, &image_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::file(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("scene_{i:04}");
        let mask = street_mask(size.0, size.1, &mut rng)?;
        mask.validate(taxonomy)?;
        write_mask_png(&mask_dir.join(format!("{id}.png")), &mask)?;
        write_rgb_png(&image_dir.join(format!("{id}.png")), &render_source_image::<f32>(&mask, taxonomy))?;
        ids.push(id);
    }
    Ok(DemoCorpus {
        mask_dir,
        image_dir,
        ids,
    })
}

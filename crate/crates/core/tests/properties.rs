use proptest::prelude::*;
use segsynth::diffusion::{forward_diffuse, NoiseField, NoiseSchedule, NoiseStream};
use segsynth::label::{
    decode_mask_png, encode_mask_png, encode_one_hot, label_components, large_component_mask, ClassStats,
    InpaintMask,
};
use segsynth::mrlf::{fuse_proposals, latent_inpaint_blend, plan_tiles};
use segsynth::rcg::sampling_probabilities;
use segsynth::tensor::LatentCanvas;
use segsynth::{ClassTaxonomy, SemanticMask};

fn frequencies() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, 2..20).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    })
}

/// Masks over 4 classes plus ignore, built from a few rectangles so that
/// components are large enough to matter.
fn mask() -> impl Strategy<Value = SemanticMask> {
    (1usize..24, 1usize..24, prop::collection::vec((0usize..24, 0usize..24, 1usize..12, 1usize..12, 0u8..5), 0..6))
        .prop_map(|(h, w, rects)| {
            let mut data = vec![0u8; h * w];
            for (y0, x0, rh, rw, c) in rects {
                let class = if c == 4 { 255 } else { c };
                for y in y0.min(h)..(y0 + rh).min(h) {
                    for x in x0.min(w)..(x0 + rw).min(w) {
                        data[y * w + x] = class;
                    }
                }
            }
            SemanticMask::new(h, w, data).unwrap()
        })
}

fn canvas(h: usize, w: usize, d: usize, seed: u64) -> LatentCanvas<f64> {
    NoiseField::new(seed).window(NoiseStream::Init, (0, 0), h, w, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rcg_is_a_distribution_ordered_by_rarity(f in frequencies(), t in 0.005f64..20.0) {
        let d = sampling_probabilities::<f64>(&ClassStats::from_frequencies(f.clone()).unwrap(), t).unwrap();
        let p = d.probabilities();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for i in 0..f.len() {
            for j in 0..f.len() {
                if f[i] < f[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn rcg_flattens_with_temperature(f in frequencies(), t in 0.01f64..1.0) {
        let stats = ClassStats::from_frequencies(f).unwrap();
        let spread = |t: f64| {
            let d = sampling_probabilities::<f64>(&stats, t).unwrap();
            let p = d.probabilities();
            p.iter().cloned().fold(0.0, f64::max) - p.iter().cloned().fold(1.0, f64::min)
        };
        prop_assert!(spread(t * 2.0) <= spread(t) + 1e-12);
    }

    #[test]
    fn components_partition_labeled_pixels(m in mask()) {
        let map = label_components(&m);
        let labeled = m.data().iter().filter(|&&v| v != m.ignore_id()).count();
        prop_assert_eq!(map.components.iter().map(|c| c.area).sum::<usize>(), labeled);
        for (i, &l) in map.labels.iter().enumerate() {
            let (y, x) = (i / m.width(), i % m.width());
            if l == 0 {
                prop_assert!(m.is_ignore(y, x));
                continue;
            }
            prop_assert_eq!(map.components[l as usize - 1].class, m.get(y, x));
            // 4-neighbours of equal class share the component.
            if x + 1 < m.width() && m.get(y, x + 1) == m.get(y, x) {
                prop_assert_eq!(map.labels[i + 1], l);
            }
            if y + 1 < m.height() && m.get(y + 1, x) == m.get(y, x) {
                prop_assert_eq!(map.labels[i + m.width()], l);
            }
        }
    }

    #[test]
    fn large_components_shrink_with_threshold(m in mask(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let small = large_component_mask(&m, hi, 1).unwrap();
        let big = large_component_mask(&m, lo, 1).unwrap();
        prop_assert!(small.is_subset_of(&big));
        prop_assert_eq!(large_component_mask(&m, 1.5, 1).unwrap().count_ones(), 0);
    }

    #[test]
    fn one_hot_marks_exactly_the_labeled_class(m in mask()) {
        let tax = ClassTaxonomy::numbered(4).unwrap();
        let oh = encode_one_hot(&m, &tax).unwrap();
        for y in 0..m.height() {
            for x in 0..m.width() {
                let hot = oh.pixel(y, x).iter().map(|&v| v as usize).sum::<usize>();
                prop_assert_eq!(hot, usize::from(!m.is_ignore(y, x)));
                prop_assert_eq!(oh.hot_channel(y, x), (!m.is_ignore(y, x)).then(|| m.get(y, x)));
            }
        }
    }

    #[test]
    fn mask_png_round_trips(m in mask()) {
        prop_assert_eq!(decode_mask_png(&encode_mask_png(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn blend_is_idempotent(h in 1usize..12, w in 1usize..12, seed in any::<u64>(), bits in prop::collection::vec(any::<bool>(), 144)) {
        let z = canvas(h, w, 3, seed);
        let l = canvas(h, w, 3, seed ^ 1);
        let m = InpaintMask::from_fn(h, w, |y, x| bits[y * 12 + x]);
        let once = latent_inpaint_blend(&z, &l, &m).unwrap();
        prop_assert_eq!(latent_inpaint_blend(&once, &l, &m).unwrap(), once.clone());
        prop_assert_eq!(latent_inpaint_blend(&z, &l, &InpaintMask::zeros(h, w)).unwrap(), z);
        prop_assert_eq!(latent_inpaint_blend(&once, &l, &InpaintMask::ones(h, w)).unwrap(), l);
    }

    #[test]
    fn planner_covers_in_bounds(th in 1usize..40, tw in 1usize..40, eh in 0usize..80, ew in 0usize..80, s in 1usize..40) {
        let stride = s.min(th.min(tw));
        let g = plan_tiles(th + eh, tw + ew, th, tw, stride).unwrap();
        prop_assert!(g.min_coverage() >= 1);
        prop_assert!(g.origins.iter().all(|&(r, c)| r + th <= th + eh && c + tw <= tw + ew));
        let mut sorted = g.origins.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted, g.origins.clone());
    }

    #[test]
    fn equal_proposals_fuse_exactly(th in 1usize..10, eh in 0usize..20, s in 1usize..10, seed in any::<u64>()) {
        let stride = s.min(th);
        let grid = plan_tiles(th + eh, th + eh, th, th, stride).unwrap();
        let truth = canvas(th + eh, th + eh, 2, seed);
        let props: Vec<_> = grid.origins.iter().map(|&(r, c)| truth.crop(r, c, th, th).unwrap()).collect();
        prop_assert_eq!(fuse_proposals(&grid, &props).unwrap(), truth);
    }

    #[test]
    fn noise_windows_are_consistent(seed in any::<u64>(), y in 0usize..8, x in 0usize..8) {
        let field = NoiseField::new(seed);
        let big: LatentCanvas<f64> = field.window(NoiseStream::Ancestral(3), (0, 0), 16, 16, 2);
        let small: LatentCanvas<f64> = field.window(NoiseStream::Ancestral(3), (y, x), 8, 8, 2);
        prop_assert_eq!(big.crop(y, x, 8, 8).unwrap(), small);
    }

    #[test]
    fn forward_diffusion_at_zero_is_identity(seed in any::<u64>(), t in 1usize..20) {
        let s = NoiseSchedule::<f64>::linear(20, Default::default()).unwrap();
        let x0 = canvas(4, 4, 3, seed);
        let eps = canvas(4, 4, 3, seed.wrapping_add(1));
        prop_assert_eq!(forward_diffuse(&x0, 0, &eps, &s).unwrap(), x0.clone());
        let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let ab = s.alpha_bar(t);
        let expect = x0.get(1, 2, 0) * ab.sqrt() + eps.get(1, 2, 0) * (1.0 - ab).sqrt();
        prop_assert!((xt.get(1, 2, 0) - expect).abs() < 1e-12);
    }
}

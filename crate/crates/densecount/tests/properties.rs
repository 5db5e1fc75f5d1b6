//! Property tests for the arithmetic the rest of the pipeline leans on:
//! density-map mass, metric aggregation, mosaic determinism and the
//! test-time normalization rule.

use densecount::data::{generate_density_map, DotAnnotation, ExemplarBox, Split};
use densecount::eval::{mae, rmse};
use densecount::inference::tt_normalize;
use densecount::mosaic::{mosaic_type_a, mosaic_type_b, MosaicConfig, MosaicResult};
use densecount::toy::{generate_toy_samples, ToyDataConfig};
use densecount::training::{augment_sample, AugmentToggles, TrainExample};
use proptest::prelude::*;
use rand::Rng;

/// Random dots biased toward the image border, where discrete normalization
/// would drift if the kernel window were clipped naively.
fn random_dots(h: usize, w: usize, n: usize, seed: u64) -> Vec<DotAnnotation> {
    let mut rng = densecount::rng::substream(seed, "prop-dots");
    (0..n)
        .map(|_| {
            let (max_x, max_y) = (w as f64 - 1e-9, h as f64 - 1e-9);
            let x = match rng.gen_range(0..4) {
                0 => 0.0,
                1 => max_x,
                _ => rng.gen_range(0.0..w as f64),
            };
            let y = match rng.gen_range(0..4) {
                0 => 0.0,
                1 => max_y,
                _ => rng.gen_range(0.0..h as f64),
            };
            DotAnnotation::new(x.min(max_x), y.min(max_y))
        })
        .collect()
}

proptest! {
    #[test]
    fn density_mass_equals_dot_count(
        (h, w) in (24usize..=72, 24usize..=72),
        sigma in prop_oneof![Just(1.0f64), Just(4.0), Just(16.0)],
        n in 0usize..=40,
        seed in any::<u64>(),
    ) {
        let dots = random_dots(h, w, n, seed);
        let d = generate_density_map(&dots, h, w, sigma).unwrap();
        prop_assert!((d.sum() - n as f64).abs() <= 1e-3,
            "sum {} for {} dots (sigma {})", d.sum(), n, sigma);
        prop_assert!(d.grid().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn metrics_match_brute_force(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..48),
    ) {
        let (pred, gt): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = mae(&pred, &gt).unwrap();
        let r = rmse(&pred, &gt).unwrap();
        let n = pred.len() as f64;
        let m_ref = pred.iter().zip(&gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
        let r_ref = (pred.iter().zip(&gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n).sqrt();
        prop_assert!((m - m_ref).abs() <= 1e-9);
        prop_assert!((r - r_ref).abs() <= 1e-9);
        // quadratic mean dominates arithmetic mean
        prop_assert!(r + 1e-12 >= m);
        // symmetric in its arguments
        prop_assert_eq!(m, mae(&gt, &pred).unwrap());
    }

    #[test]
    fn ttnorm_divides_exactly_when_triggered(
        cell in prop_oneof![Just(0.0f64), 0.001f64..0.2],
        fill in 0.0f64..0.05,
        threshold in prop_oneof![Just(f64::INFINITY), 0.5f64..3.0],
    ) {
        // 12x12 map, one 3x3 exemplar box over a constant patch
        let (h, w) = (12usize, 12usize);
        let mut grid = vec![fill; h * w];
        for r in 4..7 {
            for c in 4..7 {
                grid[r * w + c] = cell;
            }
        }
        let d = densecount::data::DensityMap::from_grid(
            h, w, grid, densecount::data::Provenance::Prediction,
        ).unwrap();
        let boxes = [ExemplarBox::new(4.0, 4.0, 7.0, 7.0).unwrap()];
        let out = tt_normalize(&d, &boxes, threshold).unwrap();
        if threshold.is_infinite() {
            prop_assert!(!out.applied);
            prop_assert_eq!(out.count, d.sum());
        } else {
            prop_assert_eq!(out.applied, out.response > threshold);
            if out.applied {
                prop_assert!((out.count * out.response - d.sum()).abs() <= 1e-9 * d.sum().max(1.0));
                prop_assert!(out.count <= d.sum() / threshold + 1e-9);
            } else {
                prop_assert_eq!(out.count, d.sum());
            }
        }
    }

    #[test]
    fn hflip_preserves_annotation_mass(
        n in 1usize..12,
        seed in any::<u64>(),
    ) {
        let cfg = ToyDataConfig { train: 1, val: 0, test: 0, seed, ..Default::default() };
        let sample = generate_toy_samples(&cfg).unwrap().remove(0);
        let size = sample.image.height();
        let density = generate_density_map(&sample.dots, size, size, 2.0).unwrap();
        let ex = TrainExample {
            image: sample.image.clone(),
            density,
            dots: sample.dots.clone(),
            boxes: sample.exemplars.clone(),
        };
        let toggles = AugmentToggles { hflip: true, ..AugmentToggles::none() };
        let mut rng = densecount::rng::substream(seed, "prop-augment");
        for _ in 0..n {
            let out = augment_sample(&ex, &toggles, &mut rng).unwrap();
            prop_assert_eq!(out.dots.len(), ex.dots.len());
            prop_assert_eq!(out.boxes.len(), ex.boxes.len());
            prop_assert!((out.density.sum() - ex.density.sum()).abs() <= 1e-9);
            for d in &out.dots {
                prop_assert!(d.x >= 0.0 && d.x < size as f64 && d.y >= 0.0 && d.y < size as f64);
            }
            for b in &out.boxes {
                prop_assert!(b.y1 < b.y2 && b.x1 < b.x2);
                prop_assert!(b.x1 >= 0.0 && b.x2 <= size as f64);
            }
        }
    }
}

fn result_fingerprint(r: &MosaicResult) -> (Vec<u32>, Vec<(u64, u64)>, Vec<(u64, u64, u64, u64)>) {
    let img: Vec<u32> = r.sample.image.data().iter().map(|v| v.to_bits()).collect();
    let dots = r
        .sample
        .dots
        .iter()
        .map(|d| (d.x.to_bits(), d.y.to_bits()))
        .collect();
    let boxes = r
        .sample
        .exemplars
        .iter()
        .map(|b| (b.y1.to_bits(), b.x1.to_bits(), b.y2.to_bits(), b.x2.to_bits()))
        .collect();
    (img, dots, boxes)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mosaics_are_seed_deterministic(seed in any::<u64>()) {
        let toy = ToyDataConfig { train: 8, val: 0, test: 0, seed: 5, ..Default::default() };
        let samples = generate_toy_samples(&toy).unwrap();
        let cfg = MosaicConfig {
            output_size: 64,
            blend_border_range: (0, 4),
            rng_seed: seed,
            ..Default::default()
        };
        let b1 = mosaic_type_b(&samples[0], &cfg).unwrap();
        let b2 = mosaic_type_b(&samples[0], &cfg).unwrap();
        prop_assert_eq!(result_fingerprint(&b1), result_fingerprint(&b2));
        prop_assert!(b1.sample.dots.iter().all(|d| d.x < 64.0 && d.y < 64.0));

        // four distinct-class sources; target quadrant annotations only
        let quad: [densecount::data::ImageSample; 4] =
            [samples[0].clone(), samples[1].clone(), samples[2].clone(), samples[3].clone()];
        match (mosaic_type_a(&quad, 0, &cfg), mosaic_type_a(&quad, 0, &cfg)) {
            (Ok(a1), Ok(a2)) => {
                prop_assert_eq!(result_fingerprint(&a1), result_fingerprint(&a2));
                prop_assert_eq!(a1.sample.split, Split::Train);
            }
            (Err(_), Err(_)) => {} // exemplar capture can fail for a seed; must fail the same way
            _ => prop_assert!(false, "type A determinism broken: one attempt failed"),
        }
    }
}

//! Desk-scale stand-in data: three brain-like grayscale motifs.
//!
//! Every image shows a bright outer ring around mid-gray tissue. The classes
//! differ inside the ring:
//! - `alzheimer`: two enlarged dark cavities,
//! - `normal`: plain tissue,
//! - `tumour`: a bright disc near the center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::{to_model_channels, GrayImage};
use super::{Dataset, Sample};

/// Class names in label order (sorted, matching the directory loader).
pub const SYNTHETIC_CLASSES: [&str; 3] = ["alzheimer", "normal", "tumour"];

const RING_OUTER: f64 = 0.44;
const RING_INNER: f64 = 0.36;
const RING_LEVEL: f64 = 0.9;
const TISSUE_LEVEL: f64 = 0.45;
const CAVITY_LEVEL: f64 = 0.05;
const MASS_LEVEL: f64 = 1.0;

struct Placement {
    cx: f64,
    cy: f64,
    scale: f64,
    mass_dx: f64,
    mass_dy: f64,
}

fn draw_placement(rng: &mut ChaCha8Rng) -> Placement {
    Placement {
        cx: 0.5 + rng.random_range(-0.05..0.05),
        cy: 0.5 + rng.random_range(-0.05..0.05),
        scale: rng.random_range(0.92..1.05),
        mass_dx: rng.random_range(-0.08..0.08),
        mass_dy: rng.random_range(-0.08..0.08),
    }
}

fn render(label: usize, size: usize, p: &Placement) -> GrayImage {
    let mut img = GrayImage::filled(size, size, 0.0);
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / s - p.cx;
            let v = (y as f64 + 0.5) / s - p.cy;
            let r = (u * u + v * v).sqrt() / p.scale;
            let mut val = if r > RING_OUTER {
                0.0
            } else if r > RING_INNER {
                RING_LEVEL
            } else {
                TISSUE_LEVEL
            };
            if r <= RING_INNER {
                match label {
                    0 => {
                        // twin ellipses, 0.07 wide by 0.15 tall
                        for side in [-1.0, 1.0] {
                            let du = (u - side * 0.1 * p.scale) / (0.07 * p.scale);
                            let dv = v / (0.15 * p.scale);
                            if du * du + dv * dv <= 1.0 {
                                val = CAVITY_LEVEL;
                            }
                        }
                    }
                    2 => {
                        let du = u - p.mass_dx;
                        let dv = v - p.mass_dy;
                        if (du * du + dv * dv).sqrt() <= 0.15 * p.scale {
                            val = MASS_LEVEL;
                        }
                    }
                    _ => {}
                }
            }
            img.pixels_mut()[y * size + x] = val;
        }
    }
    img
}

/// Raw motif images (clamped to `[0, 1]`, not yet normalized) with labels,
/// `per_class` of each class in label order.
pub fn synthetic_images(per_class: usize, size: usize, noise: f64, seed: u64) -> Vec<(usize, GrayImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise std");
    let mut out = Vec::with_capacity(per_class * SYNTHETIC_CLASSES.len());
    for label in 0..SYNTHETIC_CLASSES.len() {
        for _ in 0..per_class {
            let placement = draw_placement(&mut rng);
            let mut img = render(label, size, &placement);
            if noise > 0.0 {
                for px in img.pixels_mut() {
                    *px = (*px + normal.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            out.push((label, img));
        }
    }
    out
}

/// A labeled dataset of min-max normalized single-channel motif images.
pub fn generate_synthetic_dataset(per_class: usize, size: usize, noise: f64, seed: u64) -> Dataset {
    let samples = synthetic_images(per_class, size, noise, seed)
        .into_iter()
        .enumerate()
        .map(|(i, (label, img))| Sample {
            image: to_model_channels(&img.normalized(), 1),
            label,
            source_id: format!("{}/{i:05}", SYNTHETIC_CLASSES[label]),
        })
        .collect();
    Dataset::new(samples, SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let d = generate_synthetic_dataset(20, 16, 0.1, 1);
        assert_eq!(d.samples.len(), 60);
        assert_eq!(d.class_counts(), vec![20, 20, 20]);
        assert!(d.samples.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(generate_synthetic_dataset(5, 16, 0.1, 4), generate_synthetic_dataset(5, 16, 0.1, 4));
    }

    #[test]
    fn noiseless_samples_differ_only_by_placement() {
        let imgs = synthetic_images(3, 16, 0.0, 2);
        for (label, img) in &imgs {
            assert!(img
                .pixels()
                .iter()
                .all(|v| [0.0, RING_LEVEL, TISSUE_LEVEL, CAVITY_LEVEL, MASS_LEVEL].contains(v)));
            if *label == 1 {
                assert!(!img.pixels().contains(&CAVITY_LEVEL));
                assert!(!img.pixels().contains(&MASS_LEVEL));
            }
        }
        // same placement → identical image
        let p = Placement { cx: 0.5, cy: 0.5, scale: 1.0, mass_dx: 0.0, mass_dy: 0.0 };
        assert_eq!(render(2, 16, &p), render(2, 16, &p));
    }
}

//! Synthetic segmentation data: noisy images of colored rectangles and discs
//! over a background, with exact per-pixel class labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAX_CLASSES: usize = 8;

/// Base RGB colour per class. Class 0 is the background.
const PALETTE: [[f64; 3]; MAX_CLASSES] = [
    [0.15, 0.15, 0.15],
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.25],
    [0.25, 0.30, 0.90],
    [0.90, 0.85, 0.20],
    [0.85, 0.25, 0.85],
    [0.20, 0.85, 0.85],
    [0.95, 0.95, 0.95],
];

const COLOR_JITTER: f64 = 0.06;
const NOISE_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T: Scalar> {
    /// `3×size×size`, values roughly in `[0, 1]`.
    pub image: Tensor<T>,
    /// Row-major class index per pixel.
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
            Shape::Disc { cy, cx, r } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }

    /// Random shape inside the box `[y0, y0+h) × [x0, x0+w)`.
    fn random_in(rng: &mut ChaCha8Rng, y0: usize, x0: usize, h: usize, w: usize) -> Shape {
        let side = h.min(w).max(2);
        if rng.random_bool(0.5) {
            let lo = (side / 2).max(1);
            let sh = rng.random_range(lo..side);
            let sw = rng.random_range(lo..side);
            let oy = y0 + rng.random_range(0..=h.saturating_sub(sh));
            let ox = x0 + rng.random_range(0..=w.saturating_sub(sw));
            Shape::Rect {
                y0: oy,
                x0: ox,
                y1: oy + sh,
                x1: ox + sw,
            }
        } else {
            let r = rng.random_range(side as f64 * 0.25..side as f64 * 0.5);
            let cy = y0 as f64 + r + rng.random_range(0.0..=(h as f64 - 2.0 * r).max(0.0));
            let cx = x0 as f64 + r + rng.random_range(0.0..=(w as f64 - 2.0 * r).max(0.0));
            Shape::Disc { cy, cx, r }
        }
    }

    fn paint(&self, labels: &mut [usize], size: usize, class: usize) {
        for y in 0..size {
            for x in 0..size {
                if self.contains(y, x) {
                    labels[y * size + x] = class;
                }
            }
        }
    }
}

fn sample_labels(rng: &mut ChaCha8Rng, size: usize, k: usize) -> Vec<usize> {
    let mut labels = vec![0; size * size];
    // a few free-floating shapes that may overlap anything
    for _ in 0..rng.random_range(1..=3) {
        let class = rng.random_range(1..k);
        let extent = (size / 3).max(2);
        Shape::random_in(rng, 0, 0, size, size)
            .clamp_extent(extent)
            .paint(&mut labels, size, class);
    }
    // one shape per foreground class in its own grid cell, drawn last so
    // every class survives
    let grid = (1..).find(|g| g * g >= k - 1).unwrap_or(1);
    let cell = size / grid;
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.random_range(0..=i));
    }
    for (class, &c) in (1..k).zip(&cells) {
        let (cy, cx) = ((c / grid) * cell, (c % grid) * cell);
        let margin = (cell / 8).max(1);
        let inner = cell.saturating_sub(2 * margin).max(2);
        Shape::random_in(rng, cy + margin, cx + margin, inner, inner).paint(&mut labels, size, class);
    }
    if !labels.contains(&0) {
        labels[0] = 0;
    }
    labels
}

impl Shape {
    /// Shrinks a free shape so it covers at most `extent` pixels per side.
    fn clamp_extent(self, extent: usize) -> Shape {
        match self {
            Shape::Rect { y0, x0, y1, x1 } => Shape::Rect {
                y0,
                x0,
                y1: y1.min(y0 + extent),
                x1: x1.min(x0 + extent),
            },
            Shape::Disc { cy, cx, r } => Shape::Disc {
                cy,
                cx,
                r: r.min(extent as f64 / 2.0),
            },
        }
    }
}

fn render<T: Scalar>(rng: &mut ChaCha8Rng, labels: &[usize], size: usize, k: usize) -> Tensor<T> {
    let jitter = Normal::new(0.0, COLOR_JITTER).expect("valid std");
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let colors: Vec<[f64; 3]> = PALETTE[..k]
        .iter()
        .map(|c| c.map(|v| v + jitter.sample(rng)))
        .collect();
    let plane = size * size;
    let mut data = vec![T::zero(); 3 * plane];
    for (p, &l) in labels.iter().enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = T::of(colors[l][ch] + noise.sample(rng));
        }
    }
    Tensor::from_vec(&[3, size, size], data).expect("shape matches")
}

/// `n` image/label pairs of side `size` with `k` classes; every class
/// appears in every label map. Deterministic in `seed`.
pub fn generate_synthetic_dataset<T: Scalar>(
    n: usize,
    size: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Sample<T>>> {
    if !(2..=MAX_CLASSES).contains(&k) {
        return Err(Error::Config(format!("class count must be in 2..={MAX_CLASSES}, got {k}")));
    }
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::Config(format!("image size must be a positive multiple of 16, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let labels = sample_labels(&mut rng, size, k);
            let image = render(&mut rng, &labels, size, k);
            Sample { image, labels }
        })
        .collect())
}

/// Pixel count per class over a whole dataset.
pub fn class_histogram<T: Scalar>(data: &[Sample<T>], k: usize) -> Vec<u64> {
    let mut hist = vec![0u64; k];
    for s in data {
        for &l in &s.labels {
            hist[l] += 1;
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_in_range_and_all_classes_present() {
        for k in 2..=MAX_CLASSES {
            let data = generate_synthetic_dataset::<f32>(20, 32, k, 7).unwrap();
            for s in &data {
                assert_eq!(s.labels.len(), 32 * 32);
                assert!(s.labels.iter().all(|&l| l < k));
                let hist = class_histogram(std::slice::from_ref(s), k);
                assert!(hist.iter().all(|&c| c > 0), "k={k}: {hist:?}");
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_dataset::<f64>(3, 16, 3, 1).unwrap();
        let b = generate_synthetic_dataset::<f64>(3, 16, 3, 1).unwrap();
        let c = generate_synthetic_dataset::<f64>(3, 16, 3, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_synthetic_dataset::<f32>(1, 32, 1, 0).is_err());
        assert!(generate_synthetic_dataset::<f32>(1, 32, 9, 0).is_err());
        assert!(generate_synthetic_dataset::<f32>(1, 24, 3, 0).is_err());
    }
}

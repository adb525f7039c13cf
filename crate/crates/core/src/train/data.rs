//! Synthetic shapes segmentation task.
//!
//! Each image is a flat background with `shapes_per_image` shapes painted in
//! order. A shape's class is uniform in `1..classes`; odd classes are disks,
//! even classes axis-aligned rectangles. Geometry is integer-valued:
//!
//! - disk: center pixel (cx, cy) ∈ [0, size)², radius r ∈ [5, 12]; pixel
//!   (x, y) is inside iff (x−cx)² + (y−cy)² ≤ r².
//! - rectangle: corner (x0, y0) ∈ [0, size)², extents w, h ∈ [8, 24];
//!   covers x0 ≤ x < x0+w, y0 ≤ y < y0+h (clipped at the border).
//!
//! Labels test pixel centers, so they are exact. Colors are blended by 4×4
//! supersampled coverage, giving anti-aliased edges.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const RADIUS: (i64, i64) = (5, 12);
pub const RECT_EXTENT: (i64, i64) = (8, 24);
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub size: usize,
    pub classes: usize,
    pub shapes_per_image: usize,
    /// Half-width of the uniform additive noise, in [0, 1] intensity units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 64,
            classes: 3,
            shapes_per_image: 3,
            noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk { cx: i64, cy: i64, r: i64 },
    Rect { x0: i64, y0: i64, w: i64, h: i64 },
}

impl Shape {
    /// Whether the point (x, y), in pixel units with pixel centers at
    /// integers, lies inside.
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => {
                let (dx, dy) = (x - cx as f64, y - cy as f64);
                dx * dx + dy * dy <= (r * r) as f64
            }
            Shape::Rect { x0, y0, w, h } => {
                x >= x0 as f64 - 0.5
                    && x < (x0 + w) as f64 - 0.5
                    && y >= y0 as f64 - 0.5
                    && y < (y0 + h) as f64 - 0.5
            }
        }
    }

    fn covers_pixel(&self, x: i64, y: i64) -> bool {
        self.contains(x as f64, y as f64)
    }

    fn coverage(&self, x: i64, y: i64) -> f64 {
        let n = SUPERSAMPLE;
        let mut hit = 0;
        for sy in 0..n {
            for sx in 0..n {
                let ox = (sx as f64 + 0.5) / n as f64 - 0.5;
                let oy = (sy as f64 + 0.5) / n as f64 - 0.5;
                if self.contains(x as f64 + ox, y as f64 + oy) {
                    hit += 1;
                }
            }
        }
        hit as f64 / (n * n) as f64
    }
}

/// RGB in [0, 1] for the background (class 0) and each shape class.
pub fn class_color(class: usize) -> [f64; 3] {
    const TABLE: [[f64; 3]; 8] = [
        [0.15, 0.15, 0.20],
        [0.90, 0.25, 0.20],
        [0.20, 0.55, 0.95],
        [0.95, 0.85, 0.20],
        [0.30, 0.85, 0.35],
        [0.80, 0.30, 0.85],
        [0.95, 0.55, 0.15],
        [0.60, 0.95, 0.90],
    ];
    if class < TABLE.len() {
        TABLE[class]
    } else {
        let h = (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        [0, 1, 2].map(|i| 0.25 + 0.7 * ((h >> (i * 16)) & 0xFFFF) as f64 / 65535.0)
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.classes < 2 {
            v.push(format!(
                "synthetic classes must be >= 2, got {}",
                self.classes
            ));
        }
        if self.size == 0 || self.size % 8 != 0 {
            v.push(format!(
                "synthetic image size {} must be a positive multiple of 8",
                self.size
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            v.push(format!(
                "noise amplitude must be finite and >= 0, got {}",
                self.noise
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// Shape class for a draw in `1..classes`: odd → disk, even → rectangle.
    pub fn is_disk_class(class: usize) -> bool {
        class % 2 == 1
    }

    fn rng_for(&self, image: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(image);
        rng
    }

    /// The shapes of image number `image`, in painting order.
    pub fn shapes(&self, image: u64) -> Vec<(usize, Shape)> {
        let mut rng = self.rng_for(image);
        let s = self.size as i64;
        (0..self.shapes_per_image)
            .map(|_| {
                let class = rng.gen_range(1..self.classes);
                let shape = if Self::is_disk_class(class) {
                    Shape::Disk {
                        cx: rng.gen_range(0..s),
                        cy: rng.gen_range(0..s),
                        r: rng.gen_range(RADIUS.0..=RADIUS.1),
                    }
                } else {
                    Shape::Rect {
                        x0: rng.gen_range(0..s),
                        y0: rng.gen_range(0..s),
                        w: rng.gen_range(RECT_EXTENT.0..=RECT_EXTENT.1),
                        h: rng.gen_range(RECT_EXTENT.0..=RECT_EXTENT.1),
                    }
                };
                (class, shape)
            })
            .collect()
    }

    /// Image `image` as planar RGB (3·size·size, centered to [−1, 1]) and labels.
    pub fn render(&self, image: u64) -> (Vec<f32>, Vec<u32>) {
        let n = self.size;
        let shapes = self.shapes(image);
        let mut rng = self.rng_for(image);
        // Skip past the geometry draws so noise does not reuse them.
        rng.set_word_pos(1 << 32);
        let bg = class_color(0);
        let mut rgb = vec![0f32; 3 * n * n];
        let mut labels = vec![0u32; n * n];
        for y in 0..n {
            for x in 0..n {
                let mut c = bg;
                let mut label = 0u32;
                for &(class, shape) in &shapes {
                    let a = shape.coverage(x as i64, y as i64);
                    if a > 0.0 {
                        let col = class_color(class);
                        for i in 0..3 {
                            c[i] += a * (col[i] - c[i]);
                        }
                    }
                    if shape.covers_pixel(x as i64, y as i64) {
                        label = class as u32;
                    }
                }
                labels[y * n + x] = label;
                for (i, v) in c.iter().enumerate() {
                    let noisy = v + self.noise * rng.gen_range(-1.0..=1.0);
                    rgb[i * n * n + y * n + x] = (2.0 * noisy - 1.0) as f32;
                }
            }
        }
        (rgb, labels)
    }

    /// Images `first .. first + count` as an N×3×size×size batch plus labels.
    pub fn images(&self, first: u64, count: usize) -> (Tensor<f32>, Vec<u32>) {
        let n = self.size;
        let mut data = Vec::with_capacity(count * 3 * n * n);
        let mut labels = Vec::with_capacity(count * n * n);
        for i in 0..count {
            let (rgb, lab) = self.render(first + i as u64);
            data.extend(rgb);
            labels.extend(lab);
        }
        (
            Tensor::new(&[count, 3, n, n], data).expect("batch shape"),
            labels,
        )
    }

    /// A disjoint, equally distributed image stream for evaluation.
    pub fn held_out(&self) -> Self {
        Self {
            seed: self.seed ^ 0x5EED_0F_4E1D_0075,
            ..self.clone()
        }
    }

    /// Expected fraction of pixels carrying each label, by exact enumeration
    /// of every shape placement.
    ///
    /// For a pixel p, let a_k(p) be the probability that one random shape has
    /// class k and covers p, and a(p) = Σ a_k(p). The last covering shape
    /// sets the label, so P(label = k) = a_k·(1 − (1−a)ⁿ)/a for k ≥ 1 and
    /// (1−a)ⁿ for background.
    pub fn expected_class_frequencies(&self) -> Vec<f64> {
        let s = self.size as i64;
        let k = self.classes;
        let p_class = 1.0 / (k - 1) as f64;
        // Count placements covering each pixel, per shape family.
        let mut disk_cover = vec![0u64; (s * s) as usize];
        let mut rect_cover = vec![0u64; (s * s) as usize];
        let mut disk_total = 0u64;
        for r in RADIUS.0..=RADIUS.1 {
            disk_total += (s * s) as u64;
            // Offsets inside the disk, then every center.
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r {
                        continue;
                    }
                    for y in 0..s {
                        let cy = y - dy;
                        if !(0..s).contains(&cy) {
                            continue;
                        }
                        for x in 0..s {
                            let cx = x - dx;
                            if (0..s).contains(&cx) {
                                disk_cover[(y * s + x) as usize] += 1;
                            }
                        }
                    }
                }
            }
        }
        let mut rect_total = 0u64;
        // Pixel x is covered along one axis by x0 ∈ [x−w+1, x] ∩ [0, s).
        let axis = |x: i64, w: i64| (x.min(s - 1) - (x - w + 1).max(0) + 1).max(0) as u64;
        for w in RECT_EXTENT.0..=RECT_EXTENT.1 {
            for h in RECT_EXTENT.0..=RECT_EXTENT.1 {
                rect_total += (s * s) as u64;
                for y in 0..s {
                    let cy = axis(y, h);
                    for x in 0..s {
                        rect_cover[(y * s + x) as usize] += cy * axis(x, w);
                    }
                }
            }
        }
        let mut freq = vec![0.0; k];
        let n = self.shapes_per_image as i32;
        for p in 0..(s * s) as usize {
            let pd = disk_cover[p] as f64 / disk_total as f64;
            let pr = rect_cover[p] as f64 / rect_total as f64;
            let ak: Vec<f64> = (1..k)
                .map(|c| p_class * if Self::is_disk_class(c) { pd } else { pr })
                .collect();
            let a: f64 = ak.iter().sum();
            let none = (1.0 - a).powi(n);
            freq[0] += none;
            if a > 0.0 {
                for (c, &x) in ak.iter().enumerate() {
                    freq[c + 1] += x * (1.0 - none) / a;
                }
            }
        }
        let total = (s * s) as f64;
        freq.iter().map(|f| f / total).collect()
    }
}

/// Batch number `draw` of a training stream: images `draw·batch ..`.
pub fn generate_batch(spec: &SyntheticSpec, batch: usize, draw: u64) -> (Tensor<f32>, Vec<u32>) {
    spec.images(draw * batch as u64, batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_match_center_test() {
        let spec = SyntheticSpec::default();
        let (_, labels) = spec.render(3);
        let shapes = spec.shapes(3);
        for y in 0..64 {
            for x in 0..64 {
                let mut want = 0;
                for &(c, s) in &shapes {
                    if s.covers_pixel(x, y) {
                        want = c as u32;
                    }
                }
                assert_eq!(labels[(y * 64 + x) as usize], want);
            }
        }
    }

    #[test]
    fn frequencies_sum_to_one() {
        let f = SyntheticSpec::default().expected_class_frequencies();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(f.iter().all(|&x| x > 0.0));
    }
}

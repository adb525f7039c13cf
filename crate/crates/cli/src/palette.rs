//! Class → color table: the 19 Cityscapes training-class colors, then hashed
//! colors for larger class counts.

use std::collections::HashMap;

use crate::image_io::RgbImage;

const CITYSCAPES: [[u8; 3]; 19] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

#[derive(Clone, Debug)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
    inverse: HashMap<[u8; 3], u32>,
}

fn hashed(class: usize, salt: u64) -> [u8; 3] {
    // splitmix64 finalizer
    let mut z = (class as u64).wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    [z as u8, (z >> 8) as u8, (z >> 16) as u8]
}

impl Palette {
    /// Distinct colors for `classes` classes.
    pub fn new(classes: usize) -> Self {
        let mut colors = Vec::with_capacity(classes);
        let mut inverse = HashMap::with_capacity(classes);
        for k in 0..classes {
            let mut c = if k < CITYSCAPES.len() {
                CITYSCAPES[k]
            } else {
                hashed(k, 0)
            };
            let mut salt = 1;
            while inverse.contains_key(&c) {
                c = hashed(k, salt);
                salt += 1;
            }
            inverse.insert(c, k as u32);
            colors.push(c);
        }
        Self { colors, inverse }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, class: u32) -> [u8; 3] {
        self.colors[class as usize]
    }

    pub fn class_of(&self, rgb: [u8; 3]) -> Option<u32> {
        self.inverse.get(&rgb).copied()
    }

    pub fn colorize(&self, labels: &[u32], width: usize, height: usize) -> RgbImage {
        let mut img = RgbImage::new(width, height);
        for (i, &l) in labels.iter().enumerate() {
            img.put(i % width, i / width, self.color(l));
        }
        img
    }

    /// Inverse of [`Palette::colorize`]; `None` if any pixel is off-palette.
    pub fn decode(&self, img: &RgbImage) -> Option<Vec<u32>> {
        (0..img.height)
            .flat_map(|y| (0..img.width).map(move |x| (x, y)))
            .map(|(x, y)| self.class_of(img.pixel(x, y)))
            .collect()
    }
}

//! Binary masks and body-part parsing masks.

use serde::{Deserialize, Serialize};

use crate::limbs::Limb;

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.set(x, y, f(x, y));
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[self.idx(x, y)]
    }

    /// Out-of-bounds reads are `false`.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as u32) < self.width && (y as u32) < self.height && self.get(x as u32, y as u32)
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let i = self.idx(x, y);
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    /// In-place union. Panics if dimensions differ.
    pub fn union_with(&mut self, other: &BinaryMask) {
        assert_eq!(self.dims(), other.dims(), "mask dimensions differ");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// Dilation by a `(2r+1)x(2r+1)` square structuring element.
    pub fn dilate(&self, radius: u32) -> BinaryMask {
        let r = radius as i64;
        BinaryMask::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (x as i64, y as i64);
            (-r..=r).any(|dy| (-r..=r).any(|dx| self.get_signed(x + dx, y + dy)))
        })
    }

    /// Pixel-index bounds `(min_x, min_y, max_x, max_y)` of set pixels.
    pub fn bounds(&self) -> Option<(u32, u32, u32, u32)> {
        let mut out: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    out = Some(match out {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        out
    }
}

/// Per-pixel body-part labels, 0 = background, 1..=14 body parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsingMask {
    width: u32,
    height: u32,
    labels: Vec<u8>,
}

impl ParsingMask {
    /// Caller guarantees `labels.len() == width * height`; label range is
    /// checked by the loader.
    pub fn from_raw(width: u32, height: u32, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), width as usize * height as usize);
        Self { width, height, labels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn label(&self, x: u32, y: u32) -> u8 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn part_region(&self, label: u8) -> BinaryMask {
        self.region_of(&[label])
    }

    pub fn region_of(&self, labels: &[u8]) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.labels.iter().map(|l| labels.contains(l)).collect(),
        }
    }

    /// Union of the pixels carrying any of `limb`'s labels. May be empty,
    /// which marks the limb as non-transformable.
    pub fn limb_region(&self, limb: &Limb) -> BinaryMask {
        self.region_of(&limb.part_labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limbs::LimbTable;

    #[test]
    fn dilation_of_block_grows_by_one() {
        let m = BinaryMask::from_fn(20, 20, |x, y| (5..15).contains(&x) && (5..15).contains(&y));
        assert_eq!(m.count(), 100);
        let d = m.dilate(1);
        assert_eq!(d.count(), 144);
        assert_eq!(d.bounds(), Some((4, 4, 15, 15)));
    }

    #[test]
    fn dilation_clips_at_border() {
        let mut m = BinaryMask::new(3, 3);
        m.set(0, 0, true);
        assert_eq!(m.dilate(1).count(), 4);
    }

    #[test]
    fn limb_region_is_label_union() {
        let mut labels = vec![0u8; 16];
        labels[0] = 12;
        labels[1] = 3;
        labels[2] = 13;
        let pm = ParsingMask::from_raw(4, 4, labels);
        let table = LimbTable::default();
        let region = pm.limb_region(table.get(crate::limbs::LEFT_LOWER_ARM));
        assert_eq!(region.count(), 2);
        assert!(region.get(0, 0) && region.get(1, 0) && !region.get(2, 0));
        assert!(pm.limb_region(table.get(crate::limbs::LEFT_UPPER_LEG)).is_empty());
    }
}

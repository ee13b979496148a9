//! Binary masks, label grids, and COCO-style run-length encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major binary grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!("{}x{} mask needs {} cells, got {}", height, width, height * width, data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!("mask {:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count())
    }

    pub fn union_area(&self, other: &BinaryMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count())
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_dims(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
        Ok(())
    }

    /// Tight bounding box `(y0, x0, y1, x1)`, exclusive upper bounds.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                    });
                }
            }
        }
        b
    }

    /// Horizontally mirrored copy.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn to_rle(&self) -> Rle {
        Rle::encode(self)
    }
}

/// Row-major grid of small integer labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    data: Vec<usize>,
}

impl LabelGrid {
    pub fn filled(height: usize, width: usize, label: usize) -> Self {
        Self { height, width, data: vec![label; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!("{}x{} grid needs {} cells, got {}", height, width, height * width, data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: usize) {
        self.data[y * self.width + x] = v;
    }

    /// Cells equal to `label`.
    pub fn mask_of(&self, label: usize) -> BinaryMask {
        BinaryMask { height: self.height, width: self.width, data: self.data.iter().map(|&l| l == label).collect() }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }
}

/// Uncompressed COCO run-length encoding: column-major runs, alternating
/// background and foreground, starting with background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Self {
        let (h, w) = mask.dims();
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..w {
            for y in 0..h {
                let v = mask.get(y, x);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Self { size: [h, w], counts }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let [h, w] = self.size;
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (h * w) as u64 {
            return Err(Error::Data(format!("RLE counts sum to {total}, expected {}", h * w)));
        }
        let mut mask = BinaryMask::new(h, w);
        let mut idx = 0usize;
        let mut value = false;
        for &c in &self.counts {
            for _ in 0..c {
                if value {
                    mask.set(idx % h, idx / h, true);
                }
                idx += 1;
            }
            value = !value;
        }
        Ok(mask)
    }

    /// Decodes the compact string form used by COCO tooling (6-bit
    /// little-endian chunks offset by 48, deltas against the run two back).
    pub fn from_compressed(size: [usize; 2], s: &str) -> Result<Self> {
        let bytes = s.as_bytes();
        let mut counts: Vec<i64> = Vec::new();
        let mut p = 0;
        while p < bytes.len() {
            let mut x: i64 = 0;
            let mut k = 0;
            let mut more = true;
            while more {
                let c = *bytes.get(p).ok_or_else(|| Error::Data("truncated compressed RLE".into()))? as i64 - 48;
                if !(0..64).contains(&c) {
                    return Err(Error::Data("invalid byte in compressed RLE".into()));
                }
                x |= (c & 0x1f) << (5 * k);
                more = c & 0x20 != 0;
                p += 1;
                k += 1;
                if !more && (c & 0x10) != 0 {
                    x |= -1i64 << (5 * k);
                }
            }
            if counts.len() > 2 {
                x += counts[counts.len() - 2];
            }
            counts.push(x);
        }
        let counts = counts
            .into_iter()
            .map(|c| u32::try_from(c).map_err(|_| Error::Data("negative run in compressed RLE".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { size, counts })
    }

    pub fn to_compressed(&self) -> String {
        let mut out = Vec::new();
        for (i, &c) in self.counts.iter().enumerate() {
            let mut x = c as i64;
            if i > 2 {
                x -= self.counts[i - 2] as i64;
            }
            let mut more = true;
            while more {
                let mut ch = x & 0x1f;
                x >>= 5;
                more = if ch & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    ch |= 0x20;
                }
                out.push((ch + 48) as u8);
            }
        }
        String::from_utf8(out).expect("ascii")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_is_column_major_starting_with_background() {
        // 2x2, foreground at (0,0) and (0,1): column-major [1,0,1,0]
        let m = BinaryMask::from_fn(2, 2, |y, _| y == 0);
        let rle = m.to_rle();
        assert_eq!(rle.counts, vec![0, 1, 1, 1, 1]);
        assert_eq!(rle.decode().unwrap(), m);
    }

    #[test]
    fn rle_rejects_bad_counts() {
        let rle = Rle { size: [2, 2], counts: vec![1, 1] };
        assert!(rle.decode().is_err());
    }

    #[test]
    fn bbox_is_tight() {
        let m = BinaryMask::from_fn(5, 6, |y, x| (1..3).contains(&y) && (2..5).contains(&x));
        assert_eq!(m.bbox(), Some((1, 2, 3, 5)));
        assert_eq!(BinaryMask::new(3, 3).bbox(), None);
    }

    proptest! {
        #[test]
        fn rle_round_trips(h in 1usize..9, w in 1usize..9, bits in proptest::collection::vec(any::<bool>(), 64)) {
            let m = BinaryMask::from_fn(h, w, |y, x| bits[(y * 8 + x) % 64]);
            let rle = m.to_rle();
            prop_assert_eq!(rle.decode().unwrap(), m.clone());
            let back = Rle::from_compressed(rle.size, &rle.to_compressed()).unwrap();
            prop_assert_eq!(back, rle);
        }
    }
}

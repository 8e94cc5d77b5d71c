use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};

/// Binary mask stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return argument(format!(
                "mask data has {} entries, expected {}x{}",
                data.len(),
                height,
                width
            ));
        }
        Ok(Self { height, width, data })
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

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a && b)
    }

    /// Inclusive-exclusive bounding box `[x0, y0, x1, y1]`, `None` when empty.
    pub fn bbox(&self) -> Option<[usize; 4]> {
        let mut bbox: Option<[usize; 4]> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bbox = Some(match bbox {
                        None => [x, y, x + 1, y + 1],
                        Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)],
                    });
                }
            }
        }
        bbox
    }

    /// Block downsampling by an integer factor: a cell is set when more than
    /// half of its pixels are set.
    pub fn downsample(&self, factor: usize) -> Result<Mask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return argument(format!(
                "cannot downsample {}x{} mask by {factor}",
                self.height, self.width
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let half = factor * factor;
        Ok(Mask::from_fn(h, w, |y, x| {
            let mut count = 0;
            for dy in 0..factor {
                for dx in 0..factor {
                    count += self.get(y * factor + dy, x * factor + dx) as usize;
                }
            }
            2 * count > half
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> Mask {
        Mask::from_fn(self.height * factor, self.width * factor, |y, x| {
            self.get(y / factor, x / factor)
        })
    }
}

/// COCO-style uncompressed run-length encoding: column-major runs that
/// alternate between background and foreground, starting with background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(mask: &Mask) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..mask.width {
            for y in 0..mask.height {
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
        Rle { size: [mask.height, mask.width], counts }
    }

    pub fn decode(&self) -> Result<Mask> {
        let [height, width] = self.size;
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (height * width) as u64 {
            return argument(format!(
                "run lengths sum to {total}, expected {}",
                height * width
            ));
        }
        let mut mask = Mask::empty(height, width);
        let mut pos = 0usize;
        for (i, &count) in self.counts.iter().enumerate() {
            let value = i % 2 == 1;
            for p in pos..pos + count as usize {
                if value {
                    let (x, y) = (p / height, p % height);
                    mask.set(y, x, true);
                }
            }
            pos += count as usize;
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_starts_with_background_run() {
        let mut m = Mask::empty(2, 2);
        m.set(0, 0, true);
        let rle = Rle::encode(&m);
        assert_eq!(rle.counts, vec![0, 1, 3]);
        let m = Mask::from_fn(3, 2, |_, x| x == 1);
        assert_eq!(Rle::encode(&m).counts, vec![3, 3]);
    }

    #[test]
    fn rle_rejects_wrong_total() {
        let rle = Rle { size: [2, 2], counts: vec![1, 2] };
        assert!(rle.decode().is_err());
    }

    #[test]
    fn downsample_uses_majority() {
        let m = Mask::from_fn(4, 4, |y, x| y < 2 && x < 2 || (y == 2 && x == 2));
        let d = m.downsample(2).unwrap();
        assert_eq!(d.data(), &[true, false, false, false]);
        assert!(m.downsample(3).is_err());
    }

    #[test]
    fn bbox_of_block() {
        let m = Mask::from_fn(8, 8, |y, x| (2..5).contains(&y) && (1..3).contains(&x));
        assert_eq!(m.bbox(), Some([1, 2, 3, 5]));
        assert_eq!(Mask::empty(3, 3).bbox(), None);
    }

    proptest! {
        #[test]
        fn rle_round_trip(h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(any::<bool>(), 144)) {
            let m = Mask::from_fn(h, w, |y, x| bits[y * 12 + x]);
            prop_assert_eq!(Rle::encode(&m).decode().unwrap(), m);
        }
    }
}

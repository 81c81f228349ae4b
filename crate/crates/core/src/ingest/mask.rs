use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Set of row-major pixel indices, kept sorted and unique.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pixels: Vec<u32>,
}

impl Mask {
    pub fn from_pixels(mut pixels: Vec<u32>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        Mask { pixels }
    }

    pub fn pixels(&self) -> &[u32] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Decodes alternating run lengths, background first. Pixels past the last run are
    /// background.
    pub fn from_rle(runs: &[u32], pixel_count: usize) -> Result<Self> {
        let mut pixels = Vec::new();
        let mut cursor: u64 = 0;
        for (i, &run) in runs.iter().enumerate() {
            let end = cursor + u64::from(run);
            if end > pixel_count as u64 {
                return Err(Error::invalid(
                    "mask rle",
                    format!("runs cover {end} pixels but the image has {pixel_count}"),
                ));
            }
            if i % 2 == 1 {
                pixels.extend(cursor as u32..end as u32);
            }
            cursor = end;
        }
        Ok(Mask { pixels })
    }

    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut cursor = 0u32;
        let mut iter = self.pixels.iter().copied().peekable();
        while let Some(start) = iter.next() {
            let mut end = start + 1;
            while iter.peek() == Some(&end) {
                iter.next();
                end += 1;
            }
            runs.push(start - cursor);
            runs.push(end - start);
            cursor = end;
        }
        runs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decode_background_first() {
        let m = Mask::from_rle(&[2, 3, 1, 1], 10).unwrap();
        assert_eq!(m.pixels(), &[2, 3, 4, 6]);
        assert_eq!(Mask::from_rle(&[0, 2], 4).unwrap().pixels(), &[0, 1]);
    }

    #[test]
    fn decode_overflow_rejected() {
        assert!(Mask::from_rle(&[5, 6], 10).is_err());
    }

    proptest! {
        #[test]
        fn rle_roundtrip(pixels in prop::collection::btree_set(0u32..400, 0..120)) {
            let mask = Mask::from_pixels(pixels.into_iter().collect());
            let back = Mask::from_rle(&mask.to_rle(), 400).unwrap();
            prop_assert_eq!(back, mask);
        }
    }
}

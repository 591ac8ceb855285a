//! Run-length encoding of binary masks.
//!
//! Pixels are read row-major; `counts` alternates background and foreground
//! runs and always starts with a (possibly empty) background run.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(width: usize, height: usize, mask: &[bool]) -> Rle {
        assert_eq!(mask.len(), width * height, "mask size");
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &m in mask {
            if m != current {
                counts.push(run);
                run = 0;
                current = m;
            }
            run += 1;
        }
        counts.push(run);
        Rle { height, width, counts }
    }

    /// `None` when the runs do not cover exactly `height · width` pixels.
    pub fn decode(&self) -> Option<Vec<bool>> {
        let total: u64 = self.counts.iter().map(|&c| u64::from(c)).sum();
        if total != (self.width * self.height) as u64 {
            return None;
        }
        let mut out = Vec::with_capacity(self.width * self.height);
        for (i, &c) in self.counts.iter().enumerate() {
            out.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Some(out)
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| u64::from(c)).sum()
    }
}

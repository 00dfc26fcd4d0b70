//! Attention masks for packed sequences.

use std::sync::Arc;

/// Row `i` may attend to column `j` iff `allowed(i, j)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    /// Hybrid mask: the first `prefix_len` positions attend bidirectionally
    /// among themselves; each of the following `response_len` positions
    /// attends to the whole prefix and to response positions up to itself.
    pub fn hybrid(prefix_len: usize, response_len: usize) -> Self {
        let size = prefix_len + response_len;
        let mut bits = vec![false; size * size];
        for i in 0..size {
            let limit = if i < prefix_len { prefix_len } else { i + 1 };
            for b in &mut bits[i * size..i * size + limit] {
                *b = true;
            }
        }
        Self { size, bits }
    }

    /// Every position attends to every position.
    pub fn bidirectional(size: usize) -> Self {
        Self {
            size,
            bits: vec![true; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    /// Rows as `0`/`1` strings, handy for eyeballing and tests.
    pub fn rows(&self) -> Vec<String> {
        (0..self.size)
            .map(|i| {
                (0..self.size)
                    .map(|j| if self.allowed(i, j) { '1' } else { '0' })
                    .collect()
            })
            .collect()
    }
}

/// A contiguous block of packed rows sharing one mask.
#[derive(Clone, Debug)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
    pub mask: Arc<AttentionMask>,
}

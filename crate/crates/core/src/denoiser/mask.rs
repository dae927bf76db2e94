//! Frame- and token-level attention visibility.
//!
//! Key order is `cache ∥ condition ∥ window`. Window blocks see every cached
//! frame, the condition frame and window blocks up to their own. The
//! condition frame only sees itself. Cache rows are never queried.

use alloc::vec;
use alloc::vec::Vec;

/// Visibility between computed frames (rows) and `prefix + computed` frames (cols).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl FrameMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allow(&mut self, row: usize, col: usize) {
        self.bits[row * self.cols + col] = true;
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn visible_cols(&self, row: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.cols).filter(move |&c| self.allowed(row, c))
    }

    /// Streaming layout: `prefix` cached frames, an optional condition frame,
    /// then `window_blocks` blocks of `frames_per_block` frames.
    pub fn streaming(
        prefix: usize,
        condition: bool,
        window_blocks: usize,
        frames_per_block: usize,
    ) -> Self {
        let cond = condition as usize;
        let rows = cond + window_blocks * frames_per_block;
        let mut m = Self::new(rows, prefix + rows);
        if condition {
            m.allow(0, prefix);
        }
        for r in cond..rows {
            let block = (r - cond) / frames_per_block;
            for c in 0..prefix + cond {
                m.allow(r, c);
            }
            for c in 0..(block + 1) * frames_per_block {
                m.allow(r, prefix + cond + c);
            }
        }
        m
    }
}

/// Frame counts describing one attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskLayout {
    pub sink_frames: usize,
    pub recent_frames: usize,
    pub condition: bool,
    pub window_blocks: usize,
    pub frames_per_block: usize,
    pub tokens_per_frame: usize,
}

impl MaskLayout {
    pub fn cache_frames(&self) -> usize {
        self.sink_frames + self.recent_frames
    }

    pub fn total_frames(&self) -> usize {
        self.cache_frames() + self.condition as usize + self.window_blocks * self.frames_per_block
    }

    /// Block number of a window frame, `None` for cache or condition frames.
    pub fn window_block_of_frame(&self, frame: usize) -> Option<usize> {
        let start = self.cache_frames() + self.condition as usize;
        (frame >= start).then(|| (frame - start) / self.frames_per_block)
    }
}

/// Square token mask over every token of the layout, row = query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    size: usize,
    bits: Vec<bool>,
}

impl TokenMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.size + col]
    }
}

pub fn attention_mask(layout: &MaskLayout) -> TokenMask {
    let prefix = layout.cache_frames();
    let frames = FrameMask::streaming(
        prefix,
        layout.condition,
        layout.window_blocks,
        layout.frames_per_block,
    );
    let tpf = layout.tokens_per_frame;
    let size = layout.total_frames() * tpf;
    let mut bits = vec![false; size * size];
    for r in 0..frames.rows() {
        for c in frames.visible_cols(r) {
            for i in 0..tpf {
                let row = (prefix + r) * tpf + i;
                bits[row * size + c * tpf..row * size + (c + 1) * tpf].fill(true);
            }
        }
    }
    TokenMask { size, bits }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(sink: usize, recent: usize, condition: bool, blocks: usize) -> MaskLayout {
        MaskLayout {
            sink_frames: sink,
            recent_frames: recent,
            condition,
            window_blocks: blocks,
            frames_per_block: 3,
            tokens_per_frame: 2,
        }
    }

    #[test]
    fn single_block_is_full_attention() {
        let m = attention_mask(&layout(0, 0, false, 1));
        assert_eq!(m.size(), 6);
        assert!((0..6).all(|r| (0..6).all(|c| m.allowed(r, c))));
    }

    #[test]
    fn block_two_of_four() {
        let l = layout(3, 3, true, 4);
        let m = attention_mask(&l);
        let tpf = l.tokens_per_frame;
        // First token of window block 2 (1-based) = frame 6 + 1 + 3.
        let row = (l.cache_frames() + 1 + 3) * tpf;
        for frame in 0..l.total_frames() {
            let visible = m.allowed(row, frame * tpf);
            match l.window_block_of_frame(frame) {
                None => assert!(visible, "cache/condition frame {frame}"),
                Some(b) => assert_eq!(visible, b <= 1, "window frame {frame}"),
            }
        }
    }

    #[test]
    fn cache_rows_unqueried_and_condition_sees_itself() {
        let l = layout(3, 6, true, 2);
        let m = attention_mask(&l);
        let tpf = l.tokens_per_frame;
        for r in 0..l.cache_frames() * tpf {
            assert!((0..m.size()).all(|c| !m.allowed(r, c)));
        }
        let cond = l.cache_frames();
        for c in 0..l.total_frames() {
            assert_eq!(m.allowed(cond * tpf, c * tpf), c == cond);
        }
    }

    #[test]
    fn lower_block_triangular() {
        let l = layout(3, 12, true, 4);
        let m = attention_mask(&l);
        let tpf = l.tokens_per_frame;
        for r in 0..l.total_frames() {
            for c in 0..l.total_frames() {
                if let (Some(br), Some(bc)) = (l.window_block_of_frame(r), l.window_block_of_frame(c)) {
                    if m.allowed(r * tpf, c * tpf) {
                        assert!(bc <= br);
                    }
                }
            }
        }
    }
}

//! Rotary positional encoding factorized over (temporal, height, width), and
//! the epoch-based temporal index manager used for unbounded generation.
//!
//! Keys are cached before any rotation. Every forward pass asks
//! [`assign_indices`] for the temporal index of each cached, condition and
//! window frame; once the window has moved past the reset threshold,
//! [`maybe_reset`] rebases the sink frames to `[0, S)` and slides everything
//! else down so that the recent region starts right after the sink.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ROPE_BASE: f32 = 10_000.0;
/// Default temporal reset threshold.
pub const DEFAULT_RESET_THRESHOLD: u32 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Temporal = 0,
    Height = 1,
    Width = 2,
}

/// Per-axis inverse frequencies for one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    head_dim: usize,
    base: f32,
    pairs: [usize; 3],
    inv_freq: [Vec<f32>; 3],
}

impl RopeTable {
    /// Half of the dimension pairs go to the temporal axis, the remainder is
    /// split evenly between height and width (width takes any odd pair).
    pub fn new(head_dim: usize, base: f32) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::arg("rotary head_dim must be even and positive"));
        }
        let total = head_dim / 2;
        let t = total.div_ceil(2);
        let h = (total - t) / 2;
        let w = total - t - h;
        Self::with_split(head_dim, base, [t, h, w])
    }

    pub fn with_split(head_dim: usize, base: f32, pairs: [usize; 3]) -> Result<Self> {
        if head_dim % 2 != 0 || 2 * pairs.iter().sum::<usize>() != head_dim {
            return Err(Error::arg("rotary axis split must cover head_dim exactly"));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(Error::arg("rotary base must be finite and > 1"));
        }
        let freqs = |n: usize| -> Vec<f32> {
            (0..n)
                .map(|d| libm::powf(base, -(d as f32) / n as f32))
                .collect()
        };
        Ok(Self {
            head_dim,
            base,
            pairs,
            inv_freq: [freqs(pairs[0]), freqs(pairs[1]), freqs(pairs[2])],
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f32 {
        self.base
    }

    pub fn pairs(&self, axis: Axis) -> usize {
        self.pairs[axis as usize]
    }

    pub fn inv_freq(&self, axis: Axis) -> &[f32] {
        &self.inv_freq[axis as usize]
    }

    /// Cosine/sine coefficients for one token at position `(t, h, w)`.
    pub fn coeffs(&self, t: u32, h: u32, w: u32) -> RotaryCoeffs {
        let mut cos = Vec::with_capacity(self.head_dim / 2);
        let mut sin = Vec::with_capacity(self.head_dim / 2);
        for (axis, idx) in [(0usize, t), (1, h), (2, w)] {
            for &theta in &self.inv_freq[axis] {
                if idx == 0 {
                    cos.push(1.0);
                    sin.push(0.0);
                } else {
                    // f64 keeps large-index angles accurate to f32 rounding.
                    let angle = idx as f64 * theta as f64;
                    cos.push(libm::cos(angle) as f32);
                    sin.push(libm::sin(angle) as f32);
                }
            }
        }
        RotaryCoeffs { cos, sin }
    }
}

/// Rotation coefficients for every dimension pair of one token position.
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryCoeffs {
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RotaryCoeffs {
    /// Rotates each `(x[2d], x[2d+1])` in place. Zero-angle pairs are left
    /// untouched so an all-zero position is an exact identity.
    #[inline]
    pub fn rotate(&self, x: &mut [f32]) {
        debug_assert_eq!(x.len(), 2 * self.cos.len());
        for (d, pair) in x.chunks_exact_mut(2).enumerate() {
            let (c, s) = (self.cos[d], self.sin[d]);
            if s == 0.0 && c == 1.0 {
                continue;
            }
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }

    /// Rotates every `head_dim`-sized chunk of `x` (one per head).
    #[inline]
    pub fn rotate_heads(&self, x: &mut [f32]) {
        for head in x.chunks_exact_mut(2 * self.cos.len()) {
            self.rotate(head);
        }
    }
}

/// Row-major `(h, w)` position of spatial token `s` on a grid of width `grid_w`.
pub fn grid_positions(grid_h: usize, grid_w: usize) -> Vec<(u32, u32)> {
    (0..grid_h * grid_w)
        .map(|s| ((s / grid_w) as u32, (s % grid_w) as u32))
        .collect()
}

/// Rotates `tokens` of shape `[frames, spatial, .., head_dim]`. Frame `f` uses
/// temporal index `t_idx[f]`; spatial token `s` uses `hw_idx[s]`. Any extents
/// between `spatial` and `head_dim` (e.g. heads) share the same rotation.
pub fn apply_rope(
    tokens: &Tensor,
    t_idx: &[u32],
    hw_idx: &[(u32, u32)],
    table: &RopeTable,
) -> Result<Tensor> {
    let shape = tokens.shape();
    if shape.len() < 3 || tokens.last_dim() != table.head_dim {
        return Err(Error::arg("apply_rope expects [frames, spatial, .., head_dim] matching the table"));
    }
    let (frames, spatial) = (shape[0], shape[1]);
    if t_idx.len() != frames || hw_idx.len() != spatial {
        return Err(Error::arg("apply_rope index counts do not match token extents"));
    }
    let per_token = tokens.len() / (frames * spatial).max(1);
    let mut out = tokens.clone();
    if out.is_empty() {
        return Ok(out);
    }
    for (f, frame) in out.data_mut().chunks_mut(spatial * per_token).enumerate() {
        for (s, tok) in frame.chunks_mut(per_token).enumerate() {
            let (h, w) = hw_idx[s];
            table.coeffs(t_idx[f], h, w).rotate_heads(tok);
        }
    }
    Ok(out)
}

/// Where the motion condition frame's content comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionSource {
    /// The reference latent (no clean block has been emitted yet).
    Reference,
    /// The last frame of the preceding clean block.
    Frame(u64),
}

/// One cached frame as seen by the index manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CachedFrame {
    pub frame_id: u64,
    pub is_sink: bool,
}

/// Temporal indices for one forward pass, local to the current epoch.
///
/// Sink frames always sit at `[0, S)`. Every other frame maps to
/// `frame_id - shift`, where `shift` only changes on a reset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexAssignment {
    epoch: u64,
    threshold: u32,
    shift: u64,
    sinks: Vec<u64>,
    recent: Vec<u64>,
    window: Vec<u64>,
    condition: Option<(ConditionSource, u32)>,
    entries: BTreeMap<u64, u32>,
}

impl IndexAssignment {
    /// Empty assignment for a fresh stream.
    pub fn new(threshold: u32) -> Self {
        Self {
            epoch: 0,
            threshold,
            shift: 0,
            sinks: Vec::new(),
            recent: Vec::new(),
            window: Vec::new(),
            condition: None,
            entries: BTreeMap::new(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    /// Frame-id offset of non-sink frames in the current epoch.
    pub fn shift(&self) -> u64 {
        self.shift
    }

    pub fn index_of(&self, frame_id: u64) -> Option<u32> {
        self.entries.get(&frame_id).copied()
    }

    pub fn condition(&self) -> Option<(ConditionSource, u32)> {
        self.condition
    }

    pub fn condition_index(&self) -> Option<u32> {
        self.condition.map(|(_, i)| i)
    }

    pub fn window_frames(&self) -> &[u64] {
        &self.window
    }

    pub fn window_start(&self) -> Option<u32> {
        self.window.first().and_then(|&f| self.index_of(f))
    }

    /// All `(frame_id, index)` pairs, sorted by frame id.
    pub fn entries(&self) -> impl Iterator<Item = (u64, u32)> + '_ {
        self.entries.iter().map(|(&f, &i)| (f, i))
    }

    pub fn max_index(&self) -> Option<u32> {
        self.entries
            .values()
            .copied()
            .chain(self.condition_index())
            .max()
    }

    fn build(
        &self,
        shift: u64,
        epoch: u64,
        sinks: Vec<u64>,
        recent: Vec<u64>,
        window: Vec<u64>,
        condition: Option<ConditionSource>,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (slot, &f) in sinks.iter().enumerate() {
            entries.insert(f, slot as u32);
        }
        let floor = sinks.len() as u64;
        for &f in recent.iter().chain(&window) {
            let idx = f
                .checked_sub(shift)
                .filter(|&i| i >= floor)
                .ok_or_else(|| {
                    Error::consistency(alloc::format!(
                        "frame {f} falls before the epoch base (shift {shift})"
                    ))
                })?;
            let idx = u32::try_from(idx)
                .map_err(|_| Error::consistency("temporal index overflow"))?;
            if entries.insert(f, idx).is_some() {
                return Err(Error::consistency(alloc::format!("frame {f} listed twice")));
            }
        }
        let condition = match condition {
            None => None,
            Some(ConditionSource::Reference) => Some((ConditionSource::Reference, 0)),
            Some(src @ ConditionSource::Frame(f)) => {
                let cached = sinks.contains(&f) || recent.contains(&f);
                match entries.get(&f) {
                    Some(&i) if cached => Some((src, i)),
                    _ => {
                        return Err(Error::consistency(alloc::format!(
                            "condition source frame {f} is not cached"
                        )))
                    }
                }
            }
        };
        Ok(Self {
            epoch,
            threshold: self.threshold,
            shift,
            sinks,
            recent,
            window,
            condition,
            entries,
        })
    }
}

/// Assigns temporal indices for the next forward pass.
///
/// `cache_layout` lists sink frames first, then recent frames oldest first.
/// Window frames must be consecutive and directly follow the newest cached
/// frame. The condition frame inherits the index of its source frame; a
/// reference-sourced condition frame sits at the epoch base, index 0.
pub fn assign_indices(
    cache_layout: &[CachedFrame],
    window_frames: &[u64],
    condition: Option<ConditionSource>,
    prev: &IndexAssignment,
) -> Result<IndexAssignment> {
    let mut sinks = Vec::new();
    let mut recent = Vec::new();
    for c in cache_layout {
        if c.is_sink {
            if !recent.is_empty() {
                return Err(Error::consistency("sink frame listed after a recent frame"));
            }
            sinks.push(c.frame_id);
        } else {
            recent.push(c.frame_id);
        }
    }
    let newest = cache_layout.iter().map(|c| c.frame_id).max();
    if cache_layout.windows(2).any(|p| p[1].frame_id <= p[0].frame_id) {
        return Err(Error::consistency("cached frame ids must strictly increase"));
    }
    if window_frames.windows(2).any(|p| p[1] != p[0] + 1) {
        return Err(Error::consistency("window frames must be consecutive"));
    }
    if let (Some(n), Some(&first)) = (newest, window_frames.first()) {
        if first != n + 1 {
            return Err(Error::consistency(alloc::format!(
                "window starts at frame {first} but newest cached frame is {n}"
            )));
        }
    }
    prev.build(
        prev.shift,
        prev.epoch,
        sinks,
        recent,
        window_frames.to_vec(),
        condition,
    )
}

/// Rebases the epoch once the window start exceeds the threshold; otherwise
/// returns the input unchanged. Applying it twice equals applying it once.
pub fn maybe_reset(a: &IndexAssignment) -> IndexAssignment {
    let Some(start) = a.window_start() else {
        return a.clone();
    };
    if start <= a.threshold {
        return a.clone();
    }
    let oldest = a
        .recent
        .first()
        .or_else(|| a.window.first())
        .copied()
        .unwrap_or(0);
    let new_shift = oldest.saturating_sub(a.sinks.len() as u64);
    if new_shift == a.shift {
        return a.clone();
    }
    a.build(
        new_shift,
        a.epoch + 1,
        a.sinks.clone(),
        a.recent.clone(),
        a.window.clone(),
        a.condition.map(|(s, _)| s),
    )
    .expect("rebasing an assignment that already validated cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn layout(sinks: core::ops::Range<u64>, recent: core::ops::Range<u64>) -> Vec<CachedFrame> {
        sinks
            .map(|f| CachedFrame { frame_id: f, is_sink: true })
            .chain(recent.map(|f| CachedFrame { frame_id: f, is_sink: false }))
            .collect()
    }

    #[test]
    fn default_split_halves_temporal() {
        let t = RopeTable::new(16, DEFAULT_ROPE_BASE).unwrap();
        assert_eq!(t.pairs(Axis::Temporal), 4);
        assert_eq!(t.pairs(Axis::Height), 2);
        assert_eq!(t.pairs(Axis::Width), 2);
        for axis in [Axis::Temporal, Axis::Height, Axis::Width] {
            let f = t.inv_freq(axis);
            assert_eq!(f[0], 1.0);
            assert!(f.windows(2).all(|p| p[1] < p[0]));
        }
        assert!(RopeTable::new(7, DEFAULT_ROPE_BASE).is_err());
        assert!(RopeTable::with_split(8, DEFAULT_ROPE_BASE, [2, 1, 2]).is_err());
    }

    #[test]
    fn apply_rope_rejects_mismatch() {
        let table = RopeTable::new(8, DEFAULT_ROPE_BASE).unwrap();
        let x = Tensor::zeros(&[1, 2, 6]);
        assert!(apply_rope(&x, &[0], &[(0, 0), (0, 1)], &table).is_err());
        let x = Tensor::zeros(&[1, 2, 8]);
        assert!(apply_rope(&x, &[0, 1], &[(0, 0), (0, 1)], &table).is_err());
    }

    #[test]
    fn fresh_stream_indices() {
        let a0 = IndexAssignment::new(27);
        let a = assign_indices(&[], &[0, 1, 2], Some(ConditionSource::Reference), &a0).unwrap();
        assert_eq!(a.index_of(2), Some(2));
        assert_eq!(a.condition_index(), Some(0));
        let a = assign_indices(&layout(0..3, 3..3), &[3, 4, 5], Some(ConditionSource::Frame(2)), &a)
            .unwrap();
        assert_eq!((a.index_of(0), a.index_of(3), a.index_of(5)), (Some(0), Some(3), Some(5)));
        assert_eq!(a.condition_index(), Some(2));
    }

    #[test]
    fn condition_inherits_source_index() {
        let a0 = IndexAssignment::new(100);
        let window: Vec<u64> = (15..27).collect();
        let a = assign_indices(&layout(0..3, 3..15), &window, Some(ConditionSource::Frame(14)), &a0)
            .unwrap();
        assert_eq!(a.condition_index(), Some(14));
    }

    #[test]
    fn unknown_condition_frame_is_rejected() {
        let a0 = IndexAssignment::new(100);
        let err = assign_indices(&layout(0..3, 3..6), &[6, 7, 8], Some(ConditionSource::Frame(40)), &a0);
        assert!(matches!(err, Err(Error::Consistency(_))));
    }

    #[test]
    fn window_must_follow_cache() {
        let a0 = IndexAssignment::new(100);
        assert!(assign_indices(&layout(0..3, 3..6), &[7, 8, 9], None, &a0).is_err());
        assert!(assign_indices(&layout(0..3, 3..6), &[6, 8], None, &a0).is_err());
        let bad = [
            CachedFrame { frame_id: 3, is_sink: false },
            CachedFrame { frame_id: 4, is_sink: true },
        ];
        assert!(assign_indices(&bad, &[5], None, &a0).is_err());
    }

    #[test]
    fn below_threshold_is_unchanged() {
        let a0 = IndexAssignment::new(27);
        let a = assign_indices(&layout(0..3, 3..10), &[10, 11, 12], None, &a0).unwrap();
        assert_eq!(a.window_start(), Some(10));
        assert_eq!(maybe_reset(&a), a);
    }

    #[test]
    fn threshold_crossing_example() {
        // Window start 24 stays; one block later (start 27) still stays; the
        // following block (start 30) exceeds 27 and resets.
        let a0 = IndexAssignment::new(27);
        let a = assign_indices(&layout(0..3, 12..24), &(24..36).collect::<Vec<_>>(), None, &a0).unwrap();
        assert_eq!(maybe_reset(&a), a);
        let a = assign_indices(&layout(0..3, 15..27), &(27..39).collect::<Vec<_>>(), None, &a0).unwrap();
        assert_eq!(maybe_reset(&a), a);
        let a = assign_indices(&layout(0..3, 18..30), &(30..42).collect::<Vec<_>>(), None, &a0).unwrap();
        assert_eq!(maybe_reset(&a).epoch(), 1);
    }

    #[test]
    fn reset_hand_trace() {
        let a0 = IndexAssignment::new(27);
        let window: Vec<u64> = (28..40).collect();
        let a = assign_indices(&layout(0..3, 16..28), &window, Some(ConditionSource::Frame(27)), &a0)
            .unwrap();
        assert_eq!(a.window_start(), Some(28));
        let r = maybe_reset(&a);
        assert_eq!(r.epoch(), 1);
        assert_eq!((0..3).map(|f| r.index_of(f).unwrap()).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(
            (16..28).map(|f| r.index_of(f).unwrap()).collect::<Vec<_>>(),
            (3..15).collect::<Vec<u32>>()
        );
        assert_eq!(r.window_start(), Some(15));
        assert_eq!(r.condition_index(), Some(14));
        assert_eq!(maybe_reset(&r), r);
    }
}

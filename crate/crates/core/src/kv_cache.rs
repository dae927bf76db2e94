//! Per-layer key/value cache with a permanent sink region and a FIFO recent
//! region. Keys are stored exactly as the key projection produced them; the
//! rotary transform is applied at retrieval with whatever temporal indices
//! the current [`IndexAssignment`] hands out.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rotary::{CachedFrame, IndexAssignment, RopeTable};
use crate::tensor::Tensor;

pub const DEFAULT_SINK_FRAMES: usize = 3;
pub const DEFAULT_RECENT_FRAMES: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub frame_id: u64,
    pub is_sink: bool,
    /// `[spatial, heads, head_dim]`, no positional transform applied.
    pub k_raw: Tensor,
    /// `[spatial, heads, head_dim]`.
    pub v: Tensor,
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    sink: Vec<CacheEntry>,
    recent: VecDeque<CacheEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EvictionReport {
    pub committed: Vec<u64>,
    pub evicted: Vec<u64>,
}

/// Keys (rotated) and values gathered for one layer, sink frames first.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub frame_ids: Vec<u64>,
    /// `[frames, spatial, heads, head_dim]`
    pub k: Tensor,
    /// `[frames, spatial, heads, head_dim]`
    pub v: Tensor,
}

/// Digest of one cached frame across all layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameDigest {
    pub frame_id: u64,
    pub is_sink: bool,
    pub checksum: u64,
}

#[derive(Debug, Clone)]
pub struct KvCache {
    sink_capacity: usize,
    recent_capacity: usize,
    layers: Vec<LayerCache>,
    next_frame: u64,
}

impl KvCache {
    pub fn new(layers: usize, sink_capacity: usize, recent_capacity: usize) -> Self {
        Self {
            sink_capacity,
            recent_capacity,
            layers: (0..layers).map(|_| LayerCache::default()).collect(),
            next_frame: 0,
        }
    }

    pub fn sink_capacity(&self) -> usize {
        self.sink_capacity
    }

    pub fn recent_capacity(&self) -> usize {
        self.recent_capacity
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Frame id the next commit must start at.
    pub fn next_frame_id(&self) -> u64 {
        self.next_frame
    }

    pub fn frame_count(&self) -> usize {
        self.layers
            .first()
            .map_or(0, |l| l.sink.len() + l.recent.len())
    }

    pub fn is_empty(&self) -> bool {
        self.frame_count() == 0
    }

    /// Cached frames in retrieval order: sink first, then recent by frame id.
    pub fn layout(&self) -> Vec<CachedFrame> {
        self.entries(0)
            .map(|e| CachedFrame {
                frame_id: e.frame_id,
                is_sink: e.is_sink,
            })
            .collect()
    }

    pub fn entries(&self, layer: usize) -> impl Iterator<Item = &CacheEntry> + '_ {
        self.layers
            .get(layer)
            .into_iter()
            .flat_map(|l| l.sink.iter().chain(l.recent.iter()))
    }

    pub fn newest_frame_id(&self) -> Option<u64> {
        self.entries(0).map(|e| e.frame_id).max()
    }

    /// Appends one finished block (`per_layer[layer][frame]`). The first
    /// `sink_capacity` frames of the stream become sink entries; overflow of
    /// the recent region evicts its oldest frames.
    pub fn commit_block(&mut self, per_layer: Vec<Vec<CacheEntry>>) -> Result<EvictionReport> {
        if per_layer.len() != self.layers.len() {
            return Err(Error::consistency(format!(
                "commit carries {} layers, cache has {}",
                per_layer.len(),
                self.layers.len()
            )));
        }
        let ids: Vec<u64> = per_layer
            .first()
            .map(|l| l.iter().map(|e| e.frame_id).collect())
            .unwrap_or_default();
        if ids.is_empty() {
            return Err(Error::consistency("commit carries no frames"));
        }
        for (k, &id) in ids.iter().enumerate() {
            if id != self.next_frame + k as u64 {
                return Err(Error::consistency(format!(
                    "non-contiguous commit: expected frame {}, got {id}",
                    self.next_frame + k as u64
                )));
            }
        }
        for layer in &per_layer {
            if layer.len() != ids.len() || layer.iter().zip(&ids).any(|(e, id)| e.frame_id != *id) {
                return Err(Error::consistency("layers disagree on committed frame ids"));
            }
        }

        let mut evicted = Vec::new();
        for (li, (cache, frames)) in self.layers.iter_mut().zip(per_layer).enumerate() {
            for mut e in frames {
                if (e.frame_id as usize) < self.sink_capacity {
                    e.is_sink = true;
                    cache.sink.push(e);
                } else {
                    e.is_sink = false;
                    cache.recent.push_back(e);
                }
            }
            while cache.recent.len() > self.recent_capacity {
                let gone = cache.recent.pop_front().expect("len checked");
                if li == 0 {
                    evicted.push(gone.frame_id);
                }
            }
        }
        self.next_frame += ids.len() as u64;
        Ok(EvictionReport {
            committed: ids,
            evicted,
        })
    }

    /// Gathers layer `layer` with rotary applied at the indices in `assignment`.
    /// Values pass through untouched.
    pub fn retrieve(
        &self,
        layer: usize,
        assignment: &IndexAssignment,
        table: &RopeTable,
        hw_idx: &[(u32, u32)],
    ) -> Result<Retrieved> {
        let entries: Vec<&CacheEntry> = self.entries(layer).collect();
        let Some(first) = entries.first() else {
            return Ok(Retrieved {
                frame_ids: Vec::new(),
                k: Tensor::zeros(&[0]),
                v: Tensor::zeros(&[0]),
            });
        };
        let entry_shape = first.k_raw.shape().to_vec();
        let per_frame = first.k_raw.len();
        if entry_shape.first() != Some(&hw_idx.len()) || first.k_raw.last_dim() != table.head_dim() {
            return Err(Error::dim("retrieve", &entry_shape, &[hw_idx.len(), table.head_dim()]));
        }
        let per_token = per_frame / hw_idx.len();
        let mut frame_ids = Vec::with_capacity(entries.len());
        let mut k = Vec::with_capacity(entries.len() * per_frame);
        let mut v = Vec::with_capacity(entries.len() * per_frame);
        for e in entries {
            let t = assignment.index_of(e.frame_id).ok_or_else(|| {
                Error::consistency(format!("cached frame {} has no temporal index", e.frame_id))
            })?;
            frame_ids.push(e.frame_id);
            let start = k.len();
            k.extend_from_slice(e.k_raw.data());
            for (s, tok) in k[start..].chunks_mut(per_token).enumerate() {
                let (h, w) = hw_idx[s];
                table.coeffs(t, h, w).rotate_heads(tok);
            }
            v.extend_from_slice(e.v.data());
        }
        let mut shape = alloc::vec![frame_ids.len()];
        shape.extend_from_slice(&entry_shape);
        Ok(Retrieved {
            frame_ids,
            k: Tensor::new(&shape, k)?,
            v: Tensor::new(&shape, v)?,
        })
    }

    /// FNV-1a digest over every layer's raw key and value bytes, per frame.
    pub fn frame_digests(&self) -> Vec<FrameDigest> {
        self.layout()
            .into_iter()
            .enumerate()
            .map(|(pos, cf)| {
                let mut h = Fnv64::new();
                for layer in 0..self.layers.len() {
                    let e = self.entries(layer).nth(pos).expect("layers share a layout");
                    h.write_f32s(e.k_raw.data());
                    h.write_f32s(e.v.data());
                }
                FrameDigest {
                    frame_id: cf.frame_id,
                    is_sink: cf.is_sink,
                    checksum: h.finish(),
                }
            })
            .collect()
    }
}

/// 64-bit FNV-1a over little-endian bytes.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_f32s(&mut self, values: &[f32]) {
        for v in values {
            self.write(&v.to_le_bytes());
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotary::{assign_indices, grid_positions, DEFAULT_ROPE_BASE};
    use crate::tensor::Rng;
    use alloc::vec;

    fn block(first: u64, layers: usize, rng: &mut Rng) -> Vec<Vec<CacheEntry>> {
        (0..layers)
            .map(|_| {
                (first..first + 3)
                    .map(|f| CacheEntry {
                        frame_id: f,
                        is_sink: false,
                        k_raw: Tensor::randn(rng, &[4, 2, 8]),
                        v: Tensor::randn(rng, &[4, 2, 8]),
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn first_block_becomes_sink() {
        let mut rng = Rng::new(1);
        let mut cache = KvCache::new(2, 3, 12);
        let r = cache.commit_block(block(0, 2, &mut rng)).unwrap();
        assert!(r.evicted.is_empty());
        assert_eq!(cache.frame_count(), 3);
        assert!(cache.layout().iter().all(|c| c.is_sink));
    }

    #[test]
    fn full_cache_evicts_oldest_recent() {
        let mut rng = Rng::new(2);
        let mut cache = KvCache::new(1, 3, 12);
        for b in 0..5 {
            cache.commit_block(block(3 * b, 1, &mut rng)).unwrap();
        }
        assert_eq!(cache.frame_count(), 15);
        let r = cache.commit_block(block(15, 1, &mut rng)).unwrap();
        assert_eq!(r.evicted, vec![3, 4, 5]);
        let ids: Vec<u64> = cache.layout().iter().map(|c| c.frame_id).collect();
        assert_eq!(ids, [0, 1, 2].into_iter().chain(6..18).collect::<Vec<_>>());
    }

    #[test]
    fn hundred_blocks_hold_fifteen_frames() {
        let mut rng = Rng::new(3);
        let mut cache = KvCache::new(1, 3, 12);
        for b in 0..100u64 {
            cache.commit_block(block(3 * b, 1, &mut rng)).unwrap();
            if b >= 4 {
                assert_eq!(cache.frame_count(), 15);
            }
            let layout = cache.layout();
            assert_eq!(layout.iter().filter(|c| c.is_sink).count(), 3);
            assert!(layout.windows(2).all(|p| p[0].frame_id < p[1].frame_id));
        }
    }

    #[test]
    fn non_contiguous_commit_is_rejected() {
        let mut rng = Rng::new(4);
        let mut cache = KvCache::new(1, 3, 12);
        cache.commit_block(block(0, 1, &mut rng)).unwrap();
        assert!(matches!(
            cache.commit_block(block(4, 1, &mut rng)),
            Err(Error::Consistency(_))
        ));
        assert!(cache.commit_block(block(3, 2, &mut rng)).is_err());
    }

    #[test]
    fn empty_retrieval() {
        let cache = KvCache::new(1, 3, 12);
        let table = RopeTable::new(8, DEFAULT_ROPE_BASE).unwrap();
        let r = cache
            .retrieve(0, &IndexAssignment::new(100), &table, &grid_positions(2, 2))
            .unwrap();
        assert!(r.frame_ids.is_empty() && r.k.is_empty() && r.v.is_empty());
    }

    #[test]
    fn missing_index_is_rejected() {
        let mut rng = Rng::new(5);
        let mut cache = KvCache::new(1, 3, 12);
        cache.commit_block(block(0, 1, &mut rng)).unwrap();
        let table = RopeTable::new(8, DEFAULT_ROPE_BASE).unwrap();
        let err = cache.retrieve(0, &IndexAssignment::new(100), &table, &grid_positions(2, 2));
        assert!(matches!(err, Err(Error::Consistency(_))));
        let a = assign_indices(&cache.layout(), &[], None, &IndexAssignment::new(100)).unwrap();
        let r = cache.retrieve(0, &a, &table, &grid_positions(2, 2)).unwrap();
        assert_eq!(r.k.shape(), &[3, 4, 2, 8]);
        // Values are never rotated.
        let stored: Vec<f32> = cache.entries(0).flat_map(|e| e.v.data().to_vec()).collect();
        assert_eq!(r.v.data(), &stored[..]);
    }
}

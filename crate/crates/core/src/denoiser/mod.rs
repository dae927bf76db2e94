//! Small diffusion transformer predicting clean latents for every window frame.
//!
//! Each latent frame is a `C×H×W` grid; every spatial position becomes one
//! token. A layer runs block-causal self-attention over
//! `cache ∥ condition ∥ window`, cross-attention to three memory tokens
//! (the frame's audio vector, the identity embedding and the reference
//! latent), then an MLP. Frames at different noise levels receive different
//! timestep embeddings.

mod mask;
mod params;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kv_cache::{CacheEntry, KvCache};
use crate::rotary::{grid_positions, ConditionSource, IndexAssignment, RopeTable, DEFAULT_ROPE_BASE};
use crate::tensor::{rms_norm_rows, silu, softmax_in_place, Rng, Tensor};
use crate::FRAMES_PER_BLOCK;

pub use mask::{attention_mask, FrameMask, MaskLayout, TokenMask};
pub use params::{DenoiserParams, HeadInit, LayerParams, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Latent channels `C`.
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Model width.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub audio_dim: usize,
    pub identity_dim: usize,
    pub frames_per_block: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            grid_h: 4,
            grid_w: 4,
            width: 64,
            heads: 4,
            layers: 4,
            audio_dim: 32,
            identity_dim: 32,
            frames_per_block: FRAMES_PER_BLOCK,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.channels,
            self.grid_h,
            self.grid_w,
            self.width,
            self.heads,
            self.layers,
            self.audio_dim,
            self.identity_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::arg("model extents must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::arg("width must be divisible by heads"));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::arg("head_dim must be even"));
        }
        if self.frames_per_block != FRAMES_PER_BLOCK {
            return Err(Error::arg(format!("frames_per_block must be {FRAMES_PER_BLOCK}")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Values per latent frame, `C·H·W`.
    pub fn latent_len(&self) -> usize {
        self.channels * self.tokens_per_frame()
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.width
    }
}

/// Audio, identity and reference inputs shared by every forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    /// `[frames, audio_dim]`, one vector per latent frame.
    pub audio: Tensor,
    /// `[identity_dim]`
    pub identity: Tensor,
    /// `[C·H·W]`
    pub reference: Tensor,
}

impl ConditioningBundle {
    pub fn new(cfg: &ModelConfig, audio: Tensor, identity: Tensor, reference: Tensor) -> Result<Self> {
        if audio.shape().len() != 2 || audio.shape()[1] != cfg.audio_dim {
            return Err(Error::dim("audio features", audio.shape(), &[0, cfg.audio_dim]));
        }
        if identity.shape() != [cfg.identity_dim] {
            return Err(Error::dim("identity embedding", identity.shape(), &[cfg.identity_dim]));
        }
        if reference.shape() != [cfg.latent_len()] {
            return Err(Error::dim("reference latent", reference.shape(), &[cfg.latent_len()]));
        }
        Ok(Self {
            audio,
            identity,
            reference,
        })
    }

    /// Seeded stand-in features for benchmarks and tests.
    pub fn synthetic(cfg: &ModelConfig, audio_frames: usize, rng: &mut Rng) -> Self {
        Self {
            audio: Tensor::randn(rng, &[audio_frames, cfg.audio_dim]),
            identity: Tensor::randn(rng, &[cfg.identity_dim]),
            reference: Tensor::randn(rng, &[cfg.latent_len()]),
        }
    }

    pub fn audio_frames(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.shape()[1]
    }

    pub fn audio_row(&self, frame: u64) -> Option<&[f32]> {
        let d = self.audio_dim();
        let f = usize::try_from(frame).ok()?;
        self.audio.data().get(f * d..(f + 1) * d)
    }

    /// Appends frame-major feature vectors.
    pub fn extend_audio(&mut self, rows: &[f32]) -> Result<()> {
        let d = self.audio_dim();
        if rows.len() % d != 0 {
            return Err(Error::dim("extend_audio", &[rows.len()], &[d]));
        }
        let frames = self.audio_frames() + rows.len() / d;
        let mut data = core::mem::replace(&mut self.audio, Tensor::zeros(&[0, d])).into_data();
        data.extend_from_slice(rows);
        self.audio = Tensor::new(&[frames, d], data)?;
        Ok(())
    }
}

/// Window frames to denoise in one pass.
#[derive(Debug, Clone, Copy)]
pub struct WindowInput<'a> {
    pub frame_ids: &'a [u64],
    /// `[frames, C·H·W]`
    pub latents: &'a Tensor,
    pub timesteps: &'a [u16],
}

#[derive(Debug, Clone, Copy)]
pub struct ConditionInput<'a> {
    /// `[C·H·W]`
    pub latent: &'a Tensor,
    pub timestep: u16,
    pub source: ConditionSource,
}

/// A finished block as it looked in its final pass, for in-context recomputation.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBlock {
    pub frame_ids: Vec<u64>,
    /// `[frames, C·H·W]`
    pub latents: Tensor,
    pub timesteps: Vec<u16>,
    pub condition: Option<HistoryCondition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryCondition {
    pub latent: Tensor,
    pub timestep: u16,
    pub source: ConditionSource,
    pub temporal_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[window frames, C·H·W]`
    pub x0: Tensor,
    /// Prediction for the condition frame; callers discard it.
    pub condition_x0: Option<Tensor>,
    /// Pre-rotary key/value candidates, `[layer][window frame]`.
    pub candidates: Vec<Vec<CacheEntry>>,
}

/// One computed frame of an attention call.
struct Slot<'a> {
    latent: &'a [f32],
    t: u16,
    temporal: u32,
    audio: &'a [f32],
}

/// Rotated keys and values of the cached prefix for one layer, `[tokens, width]`.
struct PrefixLayer {
    k: Vec<f32>,
    v: Vec<f32>,
}

struct RunOutput {
    x0: Vec<Vec<f32>>,
    /// `[layer][slot] -> (k_raw, v)`
    kv: Vec<Vec<(Vec<f32>, Vec<f32>)>>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: ModelConfig,
    params: DenoiserParams,
    table: RopeTable,
    hw: Vec<(u32, u32)>,
}

impl Denoiser {
    pub fn new(cfg: ModelConfig, params: DenoiserParams) -> Result<Self> {
        cfg.validate()?;
        let expected = DenoiserParams::zeros(&cfg);
        let shapes_match = expected
            .named_tensors()
            .iter()
            .zip(params.named_tensors())
            .all(|((n1, t1), (n2, t2))| *n1 == n2 && t1.shape() == t2.shape());
        if !shapes_match || expected.named_tensors().len() != params.named_tensors().len() {
            return Err(Error::consistency("parameters do not match the model config"));
        }
        Ok(Self {
            cfg,
            params,
            table: RopeTable::new(cfg.head_dim(), DEFAULT_ROPE_BASE)?,
            hw: grid_positions(cfg.grid_h, cfg.grid_w),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn rope_table(&self) -> &RopeTable {
        &self.table
    }

    pub fn spatial_positions(&self) -> &[(u32, u32)] {
        &self.hw
    }

    /// Sinusoidal features of `t` followed by the learned two-layer map.
    pub fn timestep_embed(&self, t: u16) -> Result<Tensor> {
        check_timestep(t)?;
        Tensor::new(&[self.cfg.width], self.embed_t(t))
    }

    fn embed_t(&self, t: u16) -> Vec<f32> {
        let w = self.cfg.width;
        let half = w / 2;
        let mut feat = vec![0.0f32; w];
        // Frequencies are applied to (t / 1000) · 1000 = t.
        for i in 0..half {
            let freq = libm::expf(-libm::logf(10_000.0) * i as f32 / half as f32);
            let arg = t as f32 * freq;
            feat[i] = libm::cosf(arg);
            feat[half + i] = libm::sinf(arg);
        }
        let mut h = self.params.time_in.apply(&feat, 1);
        h.iter_mut().for_each(|v| *v = silu(*v));
        self.params.time_out.apply(&h, 1)
    }

    /// Denoises the window against the committed cache.
    pub fn forward(
        &self,
        window: &WindowInput<'_>,
        condition: Option<&ConditionInput<'_>>,
        cache: &KvCache,
        assignment: &IndexAssignment,
        bundle: &ConditioningBundle,
    ) -> Result<ForwardOutput> {
        self.check_window(window)?;
        if cache.num_layers() != self.cfg.layers {
            return Err(Error::consistency("cache layer count differs from the model"));
        }
        let mut slots = Vec::new();
        if let Some(c) = condition {
            slots.push(self.condition_slot(c, assignment, bundle)?);
        }
        self.push_window_slots(&mut slots, window, assignment, bundle)?;

        let mut prefix = Vec::with_capacity(self.cfg.layers);
        for layer in 0..self.cfg.layers {
            let r = cache.retrieve(layer, assignment, &self.table, &self.hw)?;
            prefix.push(PrefixLayer {
                k: r.k.into_data(),
                v: r.v.into_data(),
            });
        }
        let prefix_frames = cache.frame_count();
        let blocks = window.frame_ids.len() / self.cfg.frames_per_block;
        let mask = FrameMask::streaming(prefix_frames, condition.is_some(), blocks, self.cfg.frames_per_block);
        let out = self.run(&prefix, prefix_frames, &slots, &mask, bundle)?;
        let first_window = condition.is_some() as usize;
        self.package(out, first_window, window.frame_ids)
    }

    /// Same prediction as [`Denoiser::forward`], but every past block is
    /// recomputed in context from its final-pass inputs instead of read from
    /// a cache. Valid while nothing has been evicted and no reset has fired.
    pub fn forward_recompute(
        &self,
        history: &[HistoryBlock],
        window: &WindowInput<'_>,
        condition: Option<&ConditionInput<'_>>,
        assignment: &IndexAssignment,
        bundle: &ConditioningBundle,
    ) -> Result<ForwardOutput> {
        self.check_window(window)?;
        let mut slots = Vec::new();
        // (condition slot, frame slots) per history block.
        let mut groups: Vec<(Option<usize>, core::ops::Range<usize>)> = Vec::new();
        for hb in history {
            if hb.latents.shape() != [hb.frame_ids.len(), self.cfg.latent_len()]
                || hb.timesteps.len() != hb.frame_ids.len()
            {
                return Err(Error::dim("history block", hb.latents.shape(), &[hb.frame_ids.len(), self.cfg.latent_len()]));
            }
            let cond = match &hb.condition {
                Some(c) => {
                    check_timestep(c.timestep)?;
                    slots.push(Slot {
                        latent: c.latent.data(),
                        t: c.timestep,
                        temporal: c.temporal_index,
                        audio: self.condition_audio(c.source, bundle)?,
                    });
                    Some(slots.len() - 1)
                }
                None => None,
            };
            let start = slots.len();
            for (i, &f) in hb.frame_ids.iter().enumerate() {
                check_timestep(hb.timesteps[i])?;
                slots.push(Slot {
                    latent: row(&hb.latents, i),
                    t: hb.timesteps[i],
                    temporal: index_for(assignment, f)?,
                    audio: audio_for(bundle, f)?,
                });
            }
            groups.push((cond, start..slots.len()));
        }
        let cond_slot = match condition {
            Some(c) => {
                slots.push(self.condition_slot(c, assignment, bundle)?);
                Some(slots.len() - 1)
            }
            None => None,
        };
        let window_start = slots.len();
        self.push_window_slots(&mut slots, window, assignment, bundle)?;

        let n = slots.len();
        let mut mask = FrameMask::new(n, n);
        let mut past: Vec<usize> = Vec::new();
        for (cond, frames) in &groups {
            if let Some(c) = *cond {
                mask.allow(c, c);
            }
            for r in frames.clone() {
                for &p in &past {
                    mask.allow(r, p);
                }
                if let Some(c) = *cond {
                    mask.allow(r, c);
                }
                for c in frames.clone() {
                    mask.allow(r, c);
                }
            }
            past.extend(frames.clone());
        }
        if let Some(c) = cond_slot {
            mask.allow(c, c);
        }
        let fpb = self.cfg.frames_per_block;
        for r in window_start..n {
            let block = (r - window_start) / fpb;
            for &p in &past {
                mask.allow(r, p);
            }
            if let Some(c) = cond_slot {
                mask.allow(r, c);
            }
            for c in window_start..window_start + (block + 1) * fpb {
                mask.allow(r, c);
            }
        }
        let out = self.run(&[], 0, &slots, &mask, bundle)?;
        let mut out = out;
        let cond_x0 = cond_slot.map(|c| core::mem::take(&mut out.x0[c]));
        let x0: Vec<Vec<f32>> = out.x0.drain(window_start..).collect();
        let kv: Vec<Vec<(Vec<f32>, Vec<f32>)>> = out
            .kv
            .into_iter()
            .map(|mut l| l.drain(window_start..).collect())
            .collect();
        let mut trimmed = RunOutput { x0, kv };
        if let Some(c) = cond_x0 {
            trimmed.x0.insert(0, c);
            for l in &mut trimmed.kv {
                l.insert(0, (Vec::new(), Vec::new()));
            }
        }
        self.package(trimmed, cond_slot.is_some() as usize, window.frame_ids)
    }

    fn check_window(&self, window: &WindowInput<'_>) -> Result<()> {
        let n = window.frame_ids.len();
        if n == 0 || n % self.cfg.frames_per_block != 0 {
            return Err(Error::arg("window must hold whole blocks"));
        }
        if window.latents.shape() != [n, self.cfg.latent_len()] {
            return Err(Error::dim("window latents", window.latents.shape(), &[n, self.cfg.latent_len()]));
        }
        if window.timesteps.len() != n {
            return Err(Error::arg("one timestep per window frame required"));
        }
        window.timesteps.iter().try_for_each(|&t| check_timestep(t))
    }

    fn condition_audio<'b>(&self, source: ConditionSource, bundle: &'b ConditioningBundle) -> Result<&'b [f32]> {
        match source {
            ConditionSource::Reference => audio_for(bundle, 0),
            ConditionSource::Frame(f) => audio_for(bundle, f),
        }
    }

    fn condition_slot<'b>(
        &self,
        c: &ConditionInput<'b>,
        assignment: &IndexAssignment,
        bundle: &'b ConditioningBundle,
    ) -> Result<Slot<'b>> {
        check_timestep(c.timestep)?;
        if c.latent.shape() != [self.cfg.latent_len()] {
            return Err(Error::dim("condition latent", c.latent.shape(), &[self.cfg.latent_len()]));
        }
        let temporal = match assignment.condition() {
            Some((src, idx)) if src == c.source => idx,
            _ => return Err(Error::arg("assignment has no index for the condition frame")),
        };
        Ok(Slot {
            latent: c.latent.data(),
            t: c.timestep,
            temporal,
            audio: self.condition_audio(c.source, bundle)?,
        })
    }

    fn push_window_slots<'b>(
        &self,
        slots: &mut Vec<Slot<'b>>,
        window: &WindowInput<'b>,
        assignment: &IndexAssignment,
        bundle: &'b ConditioningBundle,
    ) -> Result<()> {
        for (i, &f) in window.frame_ids.iter().enumerate() {
            slots.push(Slot {
                latent: row(window.latents, i),
                t: window.timesteps[i],
                temporal: index_for(assignment, f)?,
                audio: audio_for(bundle, f)?,
            });
        }
        Ok(())
    }

    fn package(&self, mut out: RunOutput, first_window: usize, frame_ids: &[u64]) -> Result<ForwardOutput> {
        let l = self.cfg.latent_len();
        let condition_x0 = if first_window == 1 {
            Some(Tensor::new(&[l], core::mem::take(&mut out.x0[0]))?)
        } else {
            None
        };
        let x0: Vec<f32> = out.x0.drain(first_window..).flatten().collect();
        let tpf = self.cfg.tokens_per_frame();
        let kv_shape = [tpf, self.cfg.heads, self.cfg.head_dim()];
        let mut candidates = Vec::with_capacity(out.kv.len());
        for layer in out.kv {
            let mut entries = Vec::with_capacity(frame_ids.len());
            for ((k, v), &f) in layer.into_iter().skip(first_window).zip(frame_ids) {
                entries.push(CacheEntry {
                    frame_id: f,
                    is_sink: false,
                    k_raw: Tensor::new(&kv_shape, k)?,
                    v: Tensor::new(&kv_shape, v)?,
                });
            }
            candidates.push(entries);
        }
        Ok(ForwardOutput {
            x0: Tensor::new(&[frame_ids.len(), l], x0)?,
            condition_x0,
            candidates,
        })
    }

    fn run(
        &self,
        prefix: &[PrefixLayer],
        prefix_frames: usize,
        slots: &[Slot<'_>],
        mask: &FrameMask,
        bundle: &ConditioningBundle,
    ) -> Result<RunOutput> {
        let cfg = &self.cfg;
        let p = &self.params;
        let (w, tpf, c) = (cfg.width, cfg.tokens_per_frame(), cfg.channels);
        let n_slots = slots.len();
        let rows = n_slots * tpf;
        if mask.rows() != n_slots || mask.cols() != prefix_frames + n_slots {
            return Err(Error::consistency("attention mask does not match the frame layout"));
        }
        if (0..n_slots).any(|r| mask.visible_cols(r).next().is_none()) {
            return Err(Error::consistency("attention mask leaves a frame with no keys"));
        }

        // Patch embedding plus per-frame timestep embedding.
        let mut x = vec![0.0f32; rows * w];
        let mut tokens = vec![0.0f32; tpf * c];
        for (f, slot) in slots.iter().enumerate() {
            for s in 0..tpf {
                for ch in 0..c {
                    tokens[s * c + ch] = slot.latent[ch * tpf + s];
                }
            }
            let emb = p.patch_in.apply(&tokens, tpf);
            let temb = self.embed_t(slot.t);
            for (s, tok) in x[f * tpf * w..(f + 1) * tpf * w].chunks_mut(w).enumerate() {
                for ((o, e), t) in tok.iter_mut().zip(&emb[s * w..(s + 1) * w]).zip(&temb) {
                    *o = e + t;
                }
            }
        }

        // Cross-attention memory: [audio_f, identity, reference] per frame.
        let id_tok = p.identity_proj.apply(bundle.identity.data(), 1);
        let ref_tok = p.reference_proj.apply(bundle.reference.data(), 1);
        let mut memory = Vec::with_capacity(n_slots * 3 * w);
        for slot in slots {
            memory.extend(p.audio_proj.apply(slot.audio, 1));
            memory.extend_from_slice(&id_tok);
            memory.extend_from_slice(&ref_tok);
        }

        let coeffs: Vec<Vec<_>> = slots
            .iter()
            .map(|s| self.hw.iter().map(|&(h, ww)| self.table.coeffs(s.temporal, h, ww)).collect())
            .collect();

        let mut kv_out = Vec::with_capacity(cfg.layers);
        for (li, lp) in p.layers.iter().enumerate() {
            // Self-attention.
            let mut h = x.clone();
            rms_norm_rows(&mut h, lp.attn_norm.data());
            let mut q = lp.wq.apply(&h, rows);
            let mut k = lp.wk.apply(&h, rows);
            let v = lp.wv.apply(&h, rows);
            kv_out.push(
                (0..n_slots)
                    .map(|f| {
                        let r = f * tpf * w..(f + 1) * tpf * w;
                        (k[r.clone()].to_vec(), v[r].to_vec())
                    })
                    .collect::<Vec<_>>(),
            );
            for f in 0..n_slots {
                for s in 0..tpf {
                    let r = (f * tpf + s) * w..(f * tpf + s + 1) * w;
                    coeffs[f][s].rotate_heads(&mut q[r.clone()]);
                    coeffs[f][s].rotate_heads(&mut k[r]);
                }
            }
            let frame_kv = |col: usize| -> (&[f32], &[f32]) {
                if col < prefix_frames {
                    let r = col * tpf * w..(col + 1) * tpf * w;
                    (&prefix[li].k[r.clone()], &prefix[li].v[r])
                } else {
                    let f = col - prefix_frames;
                    let r = f * tpf * w..(f + 1) * tpf * w;
                    (&k[r.clone()], &v[r])
                }
            };
            let mut att = vec![0.0f32; rows * w];
            for f in 0..n_slots {
                let visible: Vec<(&[f32], &[f32])> = mask.visible_cols(f).map(frame_kv).collect();
                let qf = &q[f * tpf * w..(f + 1) * tpf * w];
                let of = &mut att[f * tpf * w..(f + 1) * tpf * w];
                self.attend(qf, &visible, tpf, of);
            }
            let o = lp.wo.apply(&att, rows);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            // Cross-attention.
            let mut h = x.clone();
            rms_norm_rows(&mut h, lp.cross_norm.data());
            let cq = lp.cq.apply(&h, rows);
            let ck = lp.ck.apply(&memory, n_slots * 3);
            let cv = lp.cv.apply(&memory, n_slots * 3);
            let mut att = vec![0.0f32; rows * w];
            for f in 0..n_slots {
                let r = f * 3 * w..(f + 1) * 3 * w;
                self.attend(
                    &cq[f * tpf * w..(f + 1) * tpf * w],
                    &[(&ck[r.clone()], &cv[r])],
                    3,
                    &mut att[f * tpf * w..(f + 1) * tpf * w],
                );
            }
            let o = lp.co.apply(&att, rows);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            // MLP.
            let mut h = x.clone();
            rms_norm_rows(&mut h, lp.mlp_norm.data());
            let mut m = lp.mlp_in.apply(&h, rows);
            m.iter_mut().for_each(|v| *v = silu(*v));
            let o = lp.mlp_out.apply(&m, rows);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        }

        rms_norm_rows(&mut x, p.final_norm.data());
        let y = p.head.apply(&x, rows);
        let x0 = (0..n_slots)
            .map(|f| {
                let mut lat = vec![0.0f32; c * tpf];
                for s in 0..tpf {
                    for ch in 0..c {
                        lat[ch * tpf + s] = y[(f * tpf + s) * c + ch];
                    }
                }
                lat
            })
            .collect();
        Ok(RunOutput { x0, kv: kv_out })
    }

    /// Multi-head attention of `q` (`[q_tokens, width]`) over key/value
    /// groups of `group_tokens` tokens each; writes into `out`.
    fn attend(&self, q: &[f32], groups: &[(&[f32], &[f32])], group_tokens: usize, out: &mut [f32]) {
        let w = self.cfg.width;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / libm::sqrtf(hd as f32);
        let n_keys = groups.len() * group_tokens;
        let mut scores = vec![0.0f32; n_keys];
        for (qi, qrow) in q.chunks_exact(w).enumerate() {
            let orow = &mut out[qi * w..(qi + 1) * w];
            for head in 0..self.cfg.heads {
                let hr = head * hd..(head + 1) * hd;
                let qh = &qrow[hr.clone()];
                let mut j = 0;
                for (k, _) in groups {
                    for krow in k.chunks_exact(w) {
                        let kh = &krow[hr.clone()];
                        scores[j] = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale;
                        j += 1;
                    }
                }
                softmax_in_place(&mut scores);
                let oh = &mut orow[hr.clone()];
                let mut j = 0;
                for (_, v) in groups {
                    for vrow in v.chunks_exact(w) {
                        let p = scores[j];
                        for (o, vv) in oh.iter_mut().zip(&vrow[hr.clone()]) {
                            *o += p * vv;
                        }
                        j += 1;
                    }
                }
            }
        }
    }
}

fn check_timestep(t: u16) -> Result<()> {
    if t > crate::diffusion::MAX_TIMESTEP {
        return Err(Error::arg(format!("timestep {t} outside [0, 1000]")));
    }
    Ok(())
}

fn row(t: &Tensor, i: usize) -> &[f32] {
    let n = t.last_dim();
    &t.data()[i * n..(i + 1) * n]
}

fn index_for(assignment: &IndexAssignment, frame: u64) -> Result<u32> {
    assignment
        .index_of(frame)
        .ok_or_else(|| Error::arg(format!("assignment gap: frame {frame} has no temporal index")))
}

fn audio_for(bundle: &ConditioningBundle, frame: u64) -> Result<&[f32]> {
    bundle
        .audio_row(frame)
        .ok_or_else(|| Error::Input(format!("no audio features for frame {frame}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotary::assign_indices;

    fn cfg() -> ModelConfig {
        ModelConfig {
            channels: 2,
            grid_h: 2,
            grid_w: 2,
            width: 16,
            heads: 2,
            layers: 2,
            audio_dim: 4,
            identity_dim: 4,
            frames_per_block: 3,
        }
    }

    struct Fixture {
        model: Denoiser,
        bundle: ConditioningBundle,
        cache: KvCache,
        latents: Tensor,
        cond: Tensor,
    }

    fn fixture(seed: u64) -> Fixture {
        let c = cfg();
        let mut rng = Rng::new(seed);
        let params = DenoiserParams::init(&c, &mut rng, HeadInit::Random);
        Fixture {
            model: Denoiser::new(c, params).unwrap(),
            bundle: ConditioningBundle::synthetic(&c, 12, &mut rng),
            cache: KvCache::new(c.layers, 3, 12),
            latents: Tensor::randn(&mut rng, &[6, c.latent_len()]),
            cond: Tensor::randn(&mut rng, &[c.latent_len()]),
        }
    }

    fn run(f: &Fixture, latents: &Tensor, cond: &Tensor, t: [u16; 2]) -> ForwardOutput {
        let ids = [0u64, 1, 2, 3, 4, 5];
        let ts = [t[0], t[0], t[0], t[1], t[1], t[1]];
        let a = assign_indices(&[], &ids, Some(ConditionSource::Reference), &IndexAssignment::new(100)).unwrap();
        let window = WindowInput {
            frame_ids: &ids,
            latents,
            timesteps: &ts,
        };
        let c = ConditionInput {
            latent: cond,
            timestep: t[0],
            source: ConditionSource::Reference,
        };
        f.model.forward(&window, Some(&c), &f.cache, &a, &f.bundle).unwrap()
    }

    #[test]
    fn zero_parameters_output_the_head_bias() {
        let c = cfg();
        let mut params = DenoiserParams::zeros(&c);
        params.head.b.as_mut().unwrap().data_mut().copy_from_slice(&[0.25, -0.5]);
        let mut f = fixture(1);
        f.model = Denoiser::new(c, params).unwrap();
        let out = run(&f, &f.latents, &f.cond, [1000, 875]);
        for frame in out.x0.data().chunks(c.latent_len()) {
            let tpf = c.tokens_per_frame();
            assert!(frame[..tpf].iter().all(|&v| v == 0.25));
            assert!(frame[tpf..].iter().all(|&v| v == -0.5));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let f = fixture(2);
        let a = run(&f, &f.latents, &f.cond, [750, 500]);
        let b = run(&f, &f.latents, &f.cond, [750, 500]);
        assert_eq!(a, b);
        assert!(a.x0.all_finite());
        assert_eq!(a.candidates.len(), 2);
        assert_eq!(a.candidates[0].len(), 6);
    }

    #[test]
    fn timestep_changes_the_prediction() {
        let f = fixture(3);
        let a = run(&f, &f.latents, &f.cond, [0, 0]);
        let b = run(&f, &f.latents, &f.cond, [1000, 1000]);
        let dot: f32 = a.x0.data().iter().zip(b.x0.data()).map(|(x, y)| x * y).sum();
        let na: f32 = a.x0.data().iter().map(|x| x * x).sum::<f32>().sqrt();
        let nb: f32 = b.x0.data().iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(dot / (na * nb) < 0.999);
    }

    #[test]
    fn earlier_blocks_ignore_later_ones() {
        let f = fixture(4);
        let base = run(&f, &f.latents, &f.cond, [500, 750]);
        let mut changed = f.latents.clone();
        let l = cfg().latent_len();
        changed.data_mut()[3 * l..].iter_mut().for_each(|v| *v += 1.0);
        let other = run(&f, &changed, &f.cond, [500, 750]);
        assert_eq!(base.x0.data()[..3 * l], other.x0.data()[..3 * l]);
        assert_ne!(base.x0.data()[3 * l..], other.x0.data()[3 * l..]);
    }

    #[test]
    fn condition_frame_reaches_the_window() {
        let f = fixture(5);
        let a = run(&f, &f.latents, &f.cond, [500, 750]);
        let b = run(&f, &f.latents, &f.cond.scale(-2.0), [500, 750]);
        assert_ne!(a.x0, b.x0);
        // The condition frame's own prediction ignores the window.
        let mut moved = f.latents.clone();
        moved.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let c = run(&f, &moved, &f.cond, [500, 750]);
        assert_eq!(a.condition_x0, c.condition_x0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = fixture(6);
        let ids = [0u64, 1];
        let a = assign_indices(&[], &ids, None, &IndexAssignment::new(100)).unwrap();
        let lat = Tensor::zeros(&[2, cfg().latent_len()]);
        let w = WindowInput {
            frame_ids: &ids,
            latents: &lat,
            timesteps: &[0, 0],
        };
        assert!(f.model.forward(&w, None, &f.cache, &a, &f.bundle).is_err());
        assert!(f.model.timestep_embed(1001).is_err());
        let bad = DenoiserParams::zeros(&ModelConfig { width: 32, ..cfg() });
        assert!(Denoiser::new(cfg(), bad).is_err());
    }
}

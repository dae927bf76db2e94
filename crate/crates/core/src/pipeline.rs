//! The outer autoregressive loop.
//!
//! Every pass admits a fresh block when due, refreshes the motion condition
//! frame, runs one joint denoiser forward over all in-flight blocks at their
//! own noise levels, advances each block one step along its queue, emits and
//! caches the front block once its queue is exhausted, and finally lets the
//! index manager rebase the temporal epoch.
//!
//! Admission cadence: blocks 1–4 enter at passes 1, 3, 5 and 7; from block 5
//! on a block enters whenever the window has a free slot. With queue lengths
//! 8, 7, 6, 5, 4 this emits blocks 1–5 at passes 8–12 and one block per pass
//! afterwards.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use crate::denoiser::{
    ConditionInput, ConditioningBundle, Denoiser, DenoiserParams, HeadInit, HistoryBlock,
    HistoryCondition, ModelConfig, WindowInput,
};
use crate::diffusion::{build_queue, make_condition_frame, sampler_step, NoiseLevel, TimestepQueue, BOOTSTRAP_BLOCKS};
use crate::error::{Error, Result};
use crate::kv_cache::{KvCache, DEFAULT_RECENT_FRAMES, DEFAULT_SINK_FRAMES};
use crate::rotary::{assign_indices, maybe_reset, ConditionSource, IndexAssignment, DEFAULT_RESET_THRESHOLD};
use crate::tensor::{Rng, Tensor};
use crate::WINDOW_BLOCKS;

const STREAM_PARAMS: u64 = 1;
const STREAM_BLOCK_NOISE: u64 = 2;
const STREAM_CONDITION_NOISE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Past frames come from the KV cache.
    Cached,
    /// Past blocks are recomputed in context every pass. Only valid until the
    /// first eviction or epoch reset; the pipeline errors out at that point.
    Recompute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub reset_threshold: u32,
    pub sink_frames: usize,
    pub recent_frames: usize,
    pub window_blocks: usize,
    pub mode: AttentionMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            reset_threshold: DEFAULT_RESET_THRESHOLD,
            sink_frames: DEFAULT_SINK_FRAMES,
            recent_frames: DEFAULT_RECENT_FRAMES,
            window_blocks: WINDOW_BLOCKS,
            mode: AttentionMode::Cached,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fpb = self.model.frames_per_block;
        if self.sink_frames != fpb {
            return Err(Error::arg(format!("sink frames ({}) must equal frames per block ({fpb})", self.sink_frames)));
        }
        if self.window_blocks != WINDOW_BLOCKS {
            return Err(Error::arg(format!("window must hold {WINDOW_BLOCKS} blocks")));
        }
        if self.recent_frames < fpb {
            return Err(Error::arg("recent cache must hold at least one block"));
        }
        if self.reset_threshold == 0 {
            return Err(Error::arg("reset threshold must be positive"));
        }
        Ok(())
    }

    /// Largest temporal index any pass may use:
    /// `N + S + R + 1 + W` (the `1` is the condition frame).
    pub fn index_bound(&self) -> u64 {
        self.reset_threshold as u64
            + self.sink_frames as u64
            + self.recent_frames as u64
            + 1
            + (self.window_blocks * self.model.frames_per_block) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InFlightBlock {
    pub ordinal: u64,
    /// `[frames, C·H·W]`
    pub latents: Tensor,
    pub queue: TimestepQueue,
    /// Denoiser passes that have touched this block.
    pub touches: u32,
}

impl InFlightBlock {
    pub fn first_frame(&self, fpb: usize) -> u64 {
        (self.ordinal - 1) * fpb as u64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowState {
    pub blocks: VecDeque<InFlightBlock>,
    /// Passes started so far (the current pass while one is running).
    pub pass: u64,
    pub next_ordinal: u64,
    pub emitted_blocks: u64,
    /// Frame id of the last clean latent, once a block has been emitted.
    pub condition_source: Option<u64>,
}

impl WindowState {
    fn new() -> Self {
        Self {
            next_ordinal: 1,
            ..Self::default()
        }
    }

    /// Whether the pass numbered `self.pass` admits block `next_ordinal`.
    pub fn admission_due(&self) -> bool {
        if self.next_ordinal <= BOOTSTRAP_BLOCKS {
            self.pass == 2 * self.next_ordinal - 1
        } else {
            self.blocks.len() < WINDOW_BLOCKS
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    Admitted,
    Denoised,
    Emitted,
    Evicted,
    Reset,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Admitted => "admitted",
            EventKind::Denoised => "denoised",
            EventKind::Emitted => "emitted",
            EventKind::Evicted => "evicted",
            EventKind::Reset => "reset",
        }
    }
}

/// One step transition of a block: `(ordinal, t_from, t_to)`.
pub type TimestepChange = (u64, u16, u16);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamEvent {
    pub kind: EventKind,
    pub pass: u64,
    pub ordinal: Option<u64>,
    pub frame_ids: Vec<u64>,
    pub timesteps: Vec<TimestepChange>,
    /// New epoch, for reset events.
    pub epoch: Option<u64>,
}

impl StreamEvent {
    fn new(kind: EventKind, pass: u64) -> Self {
        Self {
            kind,
            pass,
            ordinal: None,
            frame_ids: Vec::new(),
            timesteps: Vec::new(),
            epoch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmittedBlock {
    pub ordinal: u64,
    pub frame_ids: Vec<u64>,
    /// `[frames, C·H·W]`
    pub latents: Tensor,
    pub touches: u32,
    pub pass: u64,
}

/// The condition frame used in one pass, with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRecord {
    pub pass: u64,
    pub source: ConditionSource,
    pub t_front: u16,
    pub clean: Tensor,
    pub eps: Tensor,
    pub frame: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PassReport {
    pub events: Vec<StreamEvent>,
    pub emitted: Vec<EmittedBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PipelineStats {
    pub passes: u64,
    pub forwards: u64,
    pub blocks_emitted: u64,
    pub frames_emitted: u64,
    pub resets: u64,
    pub evicted_frames: u64,
    pub max_temporal_index: u32,
    pub peak_cache_frames: usize,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    denoiser: Denoiser,
    bundle: ConditioningBundle,
    rng: Rng,
    cache: KvCache,
    assignment: IndexAssignment,
    state: WindowState,
    last_clean: Option<Tensor>,
    history: Vec<HistoryBlock>,
    last_condition: Option<ConditionRecord>,
    block_limit: Option<u64>,
    stats: PipelineStats,
}

impl Pipeline {
    /// Pipeline with seeded, untrained parameters (random output head).
    pub fn init(cfg: PipelineConfig, bundle: ConditioningBundle, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = Rng::new(seed);
        let params = DenoiserParams::init(&cfg.model, &mut rng.derive(STREAM_PARAMS), HeadInit::Random);
        Self::with_denoiser(cfg, Denoiser::new(cfg.model, params)?, bundle, seed)
    }

    pub fn with_denoiser(
        cfg: PipelineConfig,
        denoiser: Denoiser,
        bundle: ConditioningBundle,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if *denoiser.config() != cfg.model {
            return Err(Error::consistency("denoiser config differs from pipeline config"));
        }
        let bundle = ConditioningBundle::new(&cfg.model, bundle.audio, bundle.identity, bundle.reference)?;
        if bundle.audio_frames() < cfg.model.frames_per_block {
            return Err(Error::Input(format!(
                "audio covers {} frames, the first block needs {}",
                bundle.audio_frames(),
                cfg.model.frames_per_block
            )));
        }
        Ok(Self {
            cache: KvCache::new(cfg.model.layers, cfg.sink_frames, cfg.recent_frames),
            assignment: IndexAssignment::new(cfg.reset_threshold),
            cfg,
            denoiser,
            bundle,
            rng: Rng::new(seed),
            state: WindowState::new(),
            last_clean: None,
            history: Vec::new(),
            last_condition: None,
            block_limit: None,
            stats: PipelineStats::default(),
        })
    }

    /// Stop admitting after `blocks` blocks; the window then drains.
    pub fn set_block_limit(&mut self, blocks: Option<u64>) {
        self.block_limit = blocks;
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn assignment(&self) -> &IndexAssignment {
        &self.assignment
    }

    pub fn state(&self) -> &WindowState {
        &self.state
    }

    pub fn stats(&self) -> &PipelineStats {
        &self.stats
    }

    pub fn last_condition(&self) -> Option<&ConditionRecord> {
        self.last_condition.as_ref()
    }

    pub fn bundle(&self) -> &ConditioningBundle {
        &self.bundle
    }

    /// Feeds more per-frame audio vectors (frame-major).
    pub fn push_audio(&mut self, rows: &[f32]) -> Result<()> {
        self.bundle.extend_audio(rows)
    }

    fn admits_next(&self, next_pass: u64) -> bool {
        if self.block_limit.is_some_and(|l| self.state.next_ordinal > l) {
            return false;
        }
        if self.state.next_ordinal <= BOOTSTRAP_BLOCKS {
            next_pass == 2 * self.state.next_ordinal - 1
        } else {
            self.state.blocks.len() < self.cfg.window_blocks
        }
    }

    /// Audio frames that must be available before the next pass can run.
    pub fn audio_frames_needed(&self) -> usize {
        if self.admits_next(self.state.pass + 1) {
            self.state.next_ordinal as usize * self.cfg.model.frames_per_block
        } else {
            0
        }
    }

    /// True once the block limit is reached and the window has drained.
    pub fn is_finished(&self) -> bool {
        self.state.blocks.is_empty() && !self.admits_next(self.state.pass + 1)
            && self.block_limit.is_some_and(|l| self.state.next_ordinal > l)
    }

    pub fn run_pass(&mut self) -> Result<PassReport> {
        let fpb = self.cfg.model.frames_per_block;
        let latent_len = self.cfg.model.latent_len();
        let pass = self.state.pass + 1;
        let admit = self.admits_next(pass);
        if admit && self.bundle.audio_frames() < self.state.next_ordinal as usize * fpb {
            return Err(Error::Input(format!(
                "audio underrun: block {} needs {} frames, {} available",
                self.state.next_ordinal,
                self.state.next_ordinal as usize * fpb,
                self.bundle.audio_frames()
            )));
        }
        if !admit && self.state.blocks.is_empty() {
            return Ok(PassReport::default());
        }
        self.state.pass = pass;
        self.stats.passes += 1;
        let mut report = PassReport::default();

        // (1) admission
        if admit {
            let ordinal = self.state.next_ordinal;
            let mut noise = self.rng.derive(STREAM_BLOCK_NOISE).derive(ordinal);
            let block = InFlightBlock {
                ordinal,
                latents: Tensor::randn(&mut noise, &[fpb, latent_len]),
                queue: build_queue(ordinal)?,
                touches: 0,
            };
            let mut ev = StreamEvent::new(EventKind::Admitted, pass);
            ev.ordinal = Some(ordinal);
            ev.frame_ids = frame_range(block.first_frame(fpb), fpb);
            ev.timesteps.push((ordinal, block.queue.current(), block.queue.current()));
            report.events.push(ev);
            self.state.blocks.push_back(block);
            self.state.next_ordinal += 1;
        }

        // (2) motion condition frame at the front block's level
        let t_front = NoiseLevel::new(self.state.blocks[0].queue.current())?;
        let (source, clean) = match (self.state.condition_source, &self.last_clean) {
            (Some(f), Some(latent)) => (ConditionSource::Frame(f), latent.clone()),
            _ => (ConditionSource::Reference, self.bundle.reference.clone()),
        };
        let mut cond_rng = self.rng.derive(STREAM_CONDITION_NOISE).derive(pass);
        let (cond_frame, eps) = make_condition_frame(&clean, t_front, &mut cond_rng);

        // (3) joint forward
        let mut frame_ids = Vec::with_capacity(self.state.blocks.len() * fpb);
        let mut latents = Vec::with_capacity(self.state.blocks.len() * fpb * latent_len);
        let mut timesteps = Vec::with_capacity(frame_ids.capacity());
        for b in &self.state.blocks {
            frame_ids.extend(frame_range(b.first_frame(fpb), fpb));
            latents.extend_from_slice(b.latents.data());
            timesteps.extend(core::iter::repeat(b.queue.current()).take(fpb));
        }
        let latents = Tensor::new(&[frame_ids.len(), latent_len], latents)?;
        let assignment = assign_indices(&self.cache.layout(), &frame_ids, Some(source), &self.assignment)?;
        let max_idx = assignment.max_index().unwrap_or(0);
        if max_idx as u64 > self.cfg.index_bound() {
            return Err(Error::consistency(format!(
                "temporal index {max_idx} exceeds bound {}",
                self.cfg.index_bound()
            )));
        }
        self.stats.max_temporal_index = self.stats.max_temporal_index.max(max_idx);
        let window = WindowInput {
            frame_ids: &frame_ids,
            latents: &latents,
            timesteps: &timesteps,
        };
        let condition = ConditionInput {
            latent: &cond_frame,
            timestep: t_front.t(),
            source,
        };
        let out = match self.cfg.mode {
            AttentionMode::Cached => {
                self.denoiser
                    .forward(&window, Some(&condition), &self.cache, &assignment, &self.bundle)?
            }
            AttentionMode::Recompute => self.denoiser.forward_recompute(
                &self.history,
                &window,
                Some(&condition),
                &assignment,
                &self.bundle,
            )?,
        };
        self.stats.forwards += 1;

        // (4) one sampler step per block
        let mut denoised = StreamEvent::new(EventKind::Denoised, pass);
        let mut final_inputs: Vec<Option<Tensor>> = Vec::with_capacity(self.state.blocks.len());
        for (bi, block) in self.state.blocks.iter_mut().enumerate() {
            let x0_hat = Tensor::new(
                &[fpb, latent_len],
                out.x0.data()[bi * fpb * latent_len..(bi + 1) * fpb * latent_len].to_vec(),
            )?;
            let (t_cur, t_next) = block
                .queue
                .advance()
                .ok_or_else(|| Error::consistency(format!("block {} has an empty queue", block.ordinal)))?;
            let next = sampler_step(&block.latents, &x0_hat, t_cur, t_next)?;
            let before = core::mem::replace(&mut block.latents, next);
            final_inputs.push(block.queue.is_empty().then_some(before));
            block.touches += 1;
            denoised.timesteps.push((block.ordinal, t_cur, t_next));
        }
        denoised.frame_ids = frame_ids.clone();
        report.events.push(denoised);

        // (5) emit and cache completed front blocks
        let mut pos = 0usize;
        while self.state.blocks.front().is_some_and(|b| b.queue.is_empty()) {
            let block = self.state.blocks.pop_front().expect("front checked");
            let ids = frame_range(block.first_frame(fpb), fpb);
            let per_layer = out
                .candidates
                .iter()
                .map(|layer| layer[pos * fpb..(pos + 1) * fpb].to_vec())
                .collect();
            let eviction = self.cache.commit_block(per_layer)?;
            if self.cfg.mode == AttentionMode::Recompute {
                if !eviction.evicted.is_empty() {
                    return Err(Error::consistency("recompute mode cannot model cache eviction"));
                }
                self.history.push(HistoryBlock {
                    frame_ids: ids.clone(),
                    latents: final_inputs[pos].clone().expect("completed block recorded its input"),
                    timesteps: alloc::vec![timesteps[pos * fpb]; fpb],
                    condition: Some(HistoryCondition {
                        latent: cond_frame.clone(),
                        timestep: t_front.t(),
                        source,
                        temporal_index: assignment.condition_index().unwrap_or(0),
                    }),
                });
            }
            let last = block.latents.data()[(fpb - 1) * latent_len..].to_vec();
            self.last_clean = Some(Tensor::new(&[latent_len], last)?);
            self.state.condition_source = ids.last().copied();
            self.state.emitted_blocks += 1;
            self.stats.blocks_emitted += 1;
            self.stats.frames_emitted += fpb as u64;

            let mut ev = StreamEvent::new(EventKind::Emitted, pass);
            ev.ordinal = Some(block.ordinal);
            ev.frame_ids = ids.clone();
            report.events.push(ev);
            if !eviction.evicted.is_empty() {
                self.stats.evicted_frames += eviction.evicted.len() as u64;
                let mut ev = StreamEvent::new(EventKind::Evicted, pass);
                ev.frame_ids = eviction.evicted;
                report.events.push(ev);
            }
            report.emitted.push(EmittedBlock {
                ordinal: block.ordinal,
                frame_ids: ids,
                latents: block.latents,
                touches: block.touches,
                pass,
            });
            pos += 1;
        }
        if self.state.blocks.iter().any(|b| b.queue.is_empty()) {
            return Err(Error::consistency("a block finished before the block ahead of it"));
        }
        self.stats.peak_cache_frames = self.stats.peak_cache_frames.max(self.cache.frame_count());

        // (6) epoch reset check on the post-commit layout
        let remaining: Vec<u64> = self
            .state
            .blocks
            .iter()
            .flat_map(|b| frame_range(b.first_frame(fpb), fpb))
            .collect();
        let post = assign_indices(&self.cache.layout(), &remaining, None, &assignment)?;
        let rebased = maybe_reset(&post);
        if rebased.epoch() != post.epoch() {
            if self.cfg.mode == AttentionMode::Recompute {
                return Err(Error::consistency("recompute mode cannot model an epoch reset"));
            }
            self.stats.resets += 1;
            let mut ev = StreamEvent::new(EventKind::Reset, pass);
            ev.epoch = Some(rebased.epoch());
            ev.frame_ids = remaining;
            report.events.push(ev);
        }
        self.assignment = rebased;
        self.last_condition = Some(ConditionRecord {
            pass,
            source,
            t_front: t_front.t(),
            clean,
            eps,
            frame: cond_frame,
        });
        Ok(report)
    }

    /// Runs passes until `blocks` more blocks have been emitted, handing each
    /// report to `sink`.
    pub fn run_blocks(
        &mut self,
        blocks: u64,
        mut sink: impl FnMut(&PassReport) -> Result<()>,
    ) -> Result<()> {
        let target = self.stats.blocks_emitted + blocks;
        let limit = self.block_limit.map_or(target, |l| l.min(target));
        self.block_limit = Some(limit);
        while self.stats.blocks_emitted < limit {
            let report = self.run_pass()?;
            if report.events.is_empty() {
                return Err(Error::consistency("pipeline stalled before reaching the block target"));
            }
            sink(&report)?;
        }
        Ok(())
    }
}

fn frame_range(first: u64, n: usize) -> Vec<u64> {
    (first..first + n as u64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn small() -> PipelineConfig {
        PipelineConfig {
            model: ModelConfig {
                channels: 2,
                grid_h: 2,
                grid_w: 2,
                width: 16,
                heads: 2,
                layers: 1,
                audio_dim: 4,
                identity_dim: 4,
                frames_per_block: 3,
            },
            ..PipelineConfig::default()
        }
    }

    fn pipeline(frames: usize, seed: u64) -> Pipeline {
        let cfg = small();
        let bundle = ConditioningBundle::synthetic(&cfg.model, frames, &mut Rng::new(seed));
        Pipeline::init(cfg, bundle, seed).unwrap()
    }

    #[test]
    fn admission_trace() {
        let mut p = pipeline(300, 1);
        let mut admitted = vec![];
        for _ in 0..20 {
            let r = p.run_pass().unwrap();
            for e in &r.events {
                if e.kind == EventKind::Admitted {
                    admitted.push((e.ordinal.unwrap(), e.pass));
                }
            }
            assert!(p.state().blocks.len() <= WINDOW_BLOCKS);
        }
        assert_eq!(&admitted[..7], &[(1, 1), (2, 3), (3, 5), (4, 7), (5, 9), (6, 10), (7, 11)]);
    }

    #[test]
    fn admission_due_examples() {
        let mut s = WindowState::new();
        s.pass = 2;
        s.next_ordinal = 2;
        assert!(!s.admission_due());
        s.pass = 9;
        s.next_ordinal = 5;
        s.blocks = (2..5)
            .map(|o| InFlightBlock {
                ordinal: o,
                latents: Tensor::zeros(&[3, 1]),
                queue: build_queue(o).unwrap(),
                touches: 0,
            })
            .collect();
        assert!(s.admission_due());
    }

    #[test]
    fn zero_passes_emit_nothing() {
        let p = pipeline(30, 2);
        assert_eq!(p.stats().blocks_emitted, 0);
        assert_eq!(p.stats().passes, 0);
    }

    #[test]
    fn init_rejects_missing_audio() {
        let cfg = small();
        let bundle = ConditioningBundle::synthetic(&cfg.model, 0, &mut Rng::new(0));
        assert!(matches!(Pipeline::init(cfg, bundle, 0), Err(Error::Input(_))));
    }

    #[test]
    fn underrun_is_reported_without_side_effects() {
        let mut p = pipeline(3, 3);
        p.run_pass().unwrap();
        p.run_pass().unwrap();
        let before = p.state().clone();
        assert!(matches!(p.run_pass(), Err(Error::Input(_))));
        assert_eq!(p.state(), &before);
        assert_eq!(p.audio_frames_needed(), 6);
        let extra = vec![0.5; 3 * p.bundle().audio_dim()];
        p.push_audio(&extra).unwrap();
        p.run_pass().unwrap();
    }

    #[test]
    fn config_validation() {
        let mut cfg = small();
        cfg.sink_frames = 6;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.window_blocks = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.recent_frames = 2;
        assert!(cfg.validate().is_err());
        assert_eq!(PipelineConfig::default().index_bound(), 128);
    }

    #[test]
    fn block_limit_drains_window() {
        let mut p = pipeline(60, 4);
        p.set_block_limit(Some(6));
        let mut emitted = 0;
        for _ in 0..40 {
            emitted += p.run_pass().unwrap().emitted.len();
        }
        assert_eq!(emitted, 6);
        assert!(p.is_finished());
    }
}

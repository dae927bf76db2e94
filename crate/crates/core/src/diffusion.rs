//! Linear-interpolation corruption, the x0-prediction sampler step, the
//! progressive step-bootstrapping queues and the motion condition frame.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const MAX_TIMESTEP: u16 = 1000;
/// Baseline grid, visited by every block.
pub const MAIN_STEPS: [u16; 4] = [1000, 750, 500, 250];
/// Midpoints between main steps.
pub const SUB_STEPS: [u16; 4] = [875, 625, 375, 125];
/// Sub-steps in the order they are dropped as block ordinals grow.
const SUB_STEP_DROP_ORDER: [u16; 4] = [125, 375, 625, 875];
/// Blocks at or beyond this ordinal use only the main steps.
pub const BOOTSTRAP_BLOCKS: u64 = 4;
/// Probability that the training-time condition frame is noised.
pub const CONDITION_NOISE_PROB: f32 = 0.7;

/// `σ(t) = t / 1000`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NoiseLevel(u16);

impl NoiseLevel {
    pub fn new(t: u16) -> Result<Self> {
        if t > MAX_TIMESTEP {
            return Err(Error::arg(format!("timestep {t} outside [0, 1000]")));
        }
        Ok(Self(t))
    }

    pub fn t(self) -> u16 {
        self.0
    }

    pub fn sigma(self) -> f32 {
        self.0 as f32 / MAX_TIMESTEP as f32
    }
}

/// Remaining timesteps of one block; the head is the block's current level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepQueue {
    ordinal: u64,
    remaining: VecDeque<u16>,
}

impl TimestepQueue {
    pub fn ordinal(&self) -> u64 {
        self.ordinal
    }

    /// Current noise level, `0` once exhausted.
    pub fn current(&self) -> u16 {
        self.remaining.front().copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.remaining.len()
    }

    pub fn is_empty(&self) -> bool {
        self.remaining.is_empty()
    }

    pub fn remaining(&self) -> impl Iterator<Item = u16> + '_ {
        self.remaining.iter().copied()
    }

    /// Pops the current level and returns `(t_cur, t_next)`.
    pub fn advance(&mut self) -> Option<(u16, u16)> {
        let cur = self.remaining.pop_front()?;
        Some((cur, self.current()))
    }
}

/// Queue for the `ordinal`-th block (1-based): blocks 1–4 carry 4, 3, 2, 1
/// extra sub-steps, dropping the lowest-noise sub-steps first.
pub fn build_queue(ordinal: u64) -> Result<TimestepQueue> {
    if ordinal == 0 {
        return Err(Error::arg("block ordinals start at 1"));
    }
    let extra = BOOTSTRAP_BLOCKS.saturating_sub(ordinal - 1) as usize;
    let dropped = &SUB_STEP_DROP_ORDER[..SUB_STEPS.len() - extra];
    let mut steps: Vec<u16> = MAIN_STEPS
        .iter()
        .chain(SUB_STEPS.iter())
        .copied()
        .filter(|t| !dropped.contains(t))
        .collect();
    steps.sort_unstable_by(|a, b| b.cmp(a));
    Ok(TimestepQueue {
        ordinal,
        remaining: steps.into(),
    })
}

/// `x_t = (1 − σ)·x0 + σ·ε`. Returns `(x_t, ε)`.
pub fn add_noise(x0: &Tensor, t: NoiseLevel, rng: &mut Rng) -> (Tensor, Tensor) {
    let eps = Tensor::randn(rng, x0.shape());
    let xt = mix(x0, &eps, t);
    (xt, eps)
}

/// Corruption with a caller-supplied ε.
pub fn mix(x0: &Tensor, eps: &Tensor, t: NoiseLevel) -> Tensor {
    let s = t.sigma();
    let mut out = x0.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = (1.0 - s) * *o + s * e;
    }
    out
}

/// One deterministic x0-prediction step from `t_cur` to `t_next`.
pub fn sampler_step(x_t: &Tensor, x0_hat: &Tensor, t_cur: u16, t_next: u16) -> Result<Tensor> {
    if t_cur == 0 {
        return Err(Error::arg("sampler_step from t = 0: nothing to denoise"));
    }
    if t_next >= t_cur || t_cur > MAX_TIMESTEP {
        return Err(Error::arg(format!("sampler_step needs 0 <= t_next < t_cur <= 1000, got {t_cur} -> {t_next}")));
    }
    if x_t.shape() != x0_hat.shape() {
        return Err(Error::dim("sampler_step", x_t.shape(), x0_hat.shape()));
    }
    if t_next == 0 {
        return Ok(x0_hat.clone());
    }
    let sc = NoiseLevel(t_cur).sigma();
    let sn = NoiseLevel(t_next).sigma();
    let mut out = x0_hat.clone();
    for (o, &x) in out.data_mut().iter_mut().zip(x_t.data()) {
        let x0 = *o;
        let eps = (x - (1.0 - sc) * x0) / sc;
        *o = (1.0 - sn) * x0 + sn * eps;
    }
    Ok(out)
}

/// Noised copy of the previous block's last clean latent, matched to the
/// front window block's current level. `ε` is returned for auditing.
pub fn make_condition_frame(
    prev_clean_last: &Tensor,
    t_front: NoiseLevel,
    rng: &mut Rng,
) -> (Tensor, Tensor) {
    add_noise(prev_clean_last, t_front, rng)
}

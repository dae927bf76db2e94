//! Distribution matching distillation on a two-dimensional toy problem.
//!
//! A teacher x0-predictor is regression-trained on a symmetric two-component
//! Gaussian mixture. A one-step generator `G(ε) = ε + f(ε)` is then trained
//! by descending `⟨x0_fake(x_t, t) − x0_real(x_t, t), G(ε)⟩` (the difference
//! held fixed) while an online fake predictor, initialised from the teacher,
//! regresses on generator samples and is updated once every five generator
//! updates.

use alloc::vec;
use alloc::vec::Vec;
use core::f32::consts::PI;

use crate::diffusion::{NoiseLevel, MAIN_STEPS, MAX_TIMESTEP};
use crate::error::{Error, Result};
use crate::tensor::{silu, Rng};

/// Mixture component means are `(±MIXTURE_OFFSET, 0)` with unit covariance.
pub const MIXTURE_OFFSET: f32 = 2.0;
/// Generator updates per fake-score update.
pub const FAKE_UPDATE_EVERY: usize = 5;
const TIME_FEATURES: usize = 8;
const HIDDEN: usize = 64;

/// Fully connected SiLU network with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f32>,
}

/// Activations kept from [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    batch: usize,
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f32>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f32>>,
}

impl Mlp {
    /// `N(0, 1/fan_in)` weights and zero biases. With `zero_output` the last
    /// layer starts at zero.
    pub fn new(dims: &[usize], rng: &mut Rng, zero_output: bool) -> Self {
        let mut params = Vec::new();
        for (l, pair) in dims.windows(2).enumerate() {
            let (i, o) = (pair[0], pair[1]);
            let std = 1.0 / libm::sqrtf(i as f32);
            let last = l + 2 == dims.len();
            for _ in 0..i * o {
                let w = rng.normal() * std;
                params.push(if last && zero_output { 0.0 } else { w });
            }
            params.extend(core::iter::repeat(0.0).take(o));
        }
        Self {
            dims: dims.to_vec(),
            params,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        self.dims
            .windows(2)
            .map(|p| {
                let w = off;
                let b = off + p[0] * p[1];
                off = b + p[1];
                (p[0], p[1], w, b)
            })
            .collect()
    }

    pub fn forward(&self, x: &[f32], batch: usize) -> (Vec<f32>, MlpTrace) {
        debug_assert_eq!(x.len(), batch * self.dims[0]);
        let layers = self.layer_offsets();
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        let mut cur = x.to_vec();
        for (l, &(i, o, w, b)) in layers.iter().enumerate() {
            let mut z = vec![0.0f32; batch * o];
            crate::tensor::matmul_into(&cur, &self.params[w..w + i * o], batch, i, o, &mut z);
            for row in z.chunks_mut(o) {
                for (v, bias) in row.iter_mut().zip(&self.params[b..b + o]) {
                    *v += bias;
                }
            }
            inputs.push(core::mem::take(&mut cur));
            if l + 1 < layers.len() {
                cur = z.iter().map(|&v| silu(v)).collect();
                pre.push(z);
            } else {
                cur = z;
            }
        }
        (cur, MlpTrace { batch, inputs, pre })
    }

    /// Gradient of `Σ ⟨grad_out, output⟩` with respect to the parameters.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &[f32]) -> Vec<f32> {
        let layers = self.layer_offsets();
        let batch = trace.batch;
        let mut grads = vec![0.0f32; self.params.len()];
        let mut g = grad_out.to_vec();
        for (l, &(i, o, w, b)) in layers.iter().enumerate().rev() {
            let input = &trace.inputs[l];
            for n in 0..batch {
                let gr = &g[n * o..(n + 1) * o];
                let xr = &input[n * i..(n + 1) * i];
                for (p, &xv) in xr.iter().enumerate() {
                    let gw = &mut grads[w + p * o..w + (p + 1) * o];
                    for (acc, &gv) in gw.iter_mut().zip(gr) {
                        *acc += xv * gv;
                    }
                }
                for (acc, &gv) in grads[b..b + o].iter_mut().zip(gr) {
                    *acc += gv;
                }
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[w..w + i * o];
            let z = &trace.pre[l - 1];
            let mut gin = vec![0.0f32; batch * i];
            for n in 0..batch {
                let gr = &g[n * o..(n + 1) * o];
                for p in 0..i {
                    let wr = &weights[p * o..(p + 1) * o];
                    let s: f32 = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let zv = z[n * i + p];
                    let sig = 1.0 / (1.0 + libm::expf(-zv));
                    gin[n * i + p] = s * (sig * (1.0 + zv * (1.0 - sig)));
                }
            }
            g = gin;
        }
        grads
    }

    pub fn sgd_step(&mut self, grads: &[f32], lr: f32) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            *p -= lr * g;
        }
    }
}

fn time_features(t: u16) -> [f32; TIME_FEATURES] {
    let s = NoiseLevel::new(t.min(MAX_TIMESTEP)).map(|n| n.sigma()).unwrap_or(1.0);
    [
        s,
        s * s,
        libm::cosf(PI * s),
        libm::sinf(PI * s),
        libm::cosf(2.0 * PI * s),
        libm::sinf(2.0 * PI * s),
        libm::cosf(4.0 * PI * s),
        libm::sinf(4.0 * PI * s),
    ]
}

/// x0-predictor on `R²`, parameterized through the flow velocity:
/// `x0 = x_t − σ·v(x_t, t)`, so the prediction is exact at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScoreNet {
    pub mlp: Mlp,
}

impl ToyScoreNet {
    pub fn new(rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::new(&[2 + TIME_FEATURES, HIDDEN, HIDDEN, 2], rng, false),
        }
    }

    fn inputs(x_t: &[f32], t: &[u16]) -> Vec<f32> {
        let mut feats = Vec::with_capacity(t.len() * (2 + TIME_FEATURES));
        for (p, &tt) in x_t.chunks_exact(2).zip(t) {
            feats.extend_from_slice(p);
            feats.extend_from_slice(&time_features(tt));
        }
        feats
    }

    pub fn velocity(&self, x_t: &[f32], t: &[u16]) -> (Vec<f32>, MlpTrace) {
        self.mlp.forward(&Self::inputs(x_t, t), t.len())
    }

    pub fn predict_x0(&self, x_t: &[f32], t: &[u16]) -> Vec<f32> {
        let (v, _) = self.velocity(x_t, t);
        let mut out = x_t.to_vec();
        for (n, &tt) in t.iter().enumerate() {
            let s = tt as f32 / MAX_TIMESTEP as f32;
            out[2 * n] -= s * v[2 * n];
            out[2 * n + 1] -= s * v[2 * n + 1];
        }
        out
    }

    /// One SGD step on the velocity regression `‖v − (ε − x0)‖²` for clean
    /// points `x0`. Timesteps are uniform on `0..=1000`. Returns the loss.
    pub fn regression_step(&mut self, x0: &[f32], lr: f32, rng: &mut Rng) -> f32 {
        let n = x0.len() / 2;
        let t: Vec<u16> = (0..n).map(|_| rng.below(MAX_TIMESTEP as u64 + 1) as u16).collect();
        let mut eps = vec![0.0f32; x0.len()];
        rng.fill_normal(&mut eps);
        let mut x_t = vec![0.0f32; x0.len()];
        for i in 0..n {
            let s = t[i] as f32 / MAX_TIMESTEP as f32;
            for d in 0..2 {
                x_t[2 * i + d] = (1.0 - s) * x0[2 * i + d] + s * eps[2 * i + d];
            }
        }
        let (v, trace) = self.velocity(&x_t, &t);
        let mut grad = vec![0.0f32; v.len()];
        let mut loss = 0.0f32;
        for k in 0..v.len() {
            let r = v[k] - (eps[k] - x0[k]);
            loss += r * r;
            grad[k] = 2.0 * r / n as f32;
        }
        let g = self.mlp.backward(&trace, &grad);
        self.mlp.sgd_step(&g, lr);
        loss / n as f32
    }
}

/// One-step generator `G(ε) = ε + f(ε)`; `f` starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGenerator {
    pub mlp: Mlp,
}

impl ToyGenerator {
    pub fn new(rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::new(&[2, HIDDEN, HIDDEN, 2], rng, true),
        }
    }

    pub fn forward(&self, eps: &[f32]) -> (Vec<f32>, MlpTrace) {
        let (mut y, trace) = self.mlp.forward(eps, eps.len() / 2);
        y.iter_mut().zip(eps).for_each(|(a, b)| *a += b);
        (y, trace)
    }

    pub fn sample(&self, eps: &[f32]) -> Vec<f32> {
        self.forward(eps).0
    }

    /// Gradient of `Σ_n ⟨direction_n, G(ε_n)⟩ / N` with `direction` held fixed.
    pub fn surrogate_grad(&self, eps: &[f32], direction: &[f32]) -> Vec<f32> {
        let n = eps.len() / 2;
        let (_, trace) = self.forward(eps);
        let scaled: Vec<f32> = direction.iter().map(|d| d / n as f32).collect();
        self.mlp.backward(&trace, &scaled)
    }
}

/// Draws `n` points from the mixture, `[n, 2]` row-major.
pub fn sample_mixture(rng: &mut Rng, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let sign = if rng.below(2) == 0 { -1.0 } else { 1.0 };
        out.push(sign * MIXTURE_OFFSET + rng.normal());
        out.push(rng.normal());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 256,
            lr: 0.02,
        }
    }
}

pub fn train_teacher(cfg: &TeacherConfig, rng: &mut Rng) -> Result<ToyScoreNet> {
    let mut net = ToyScoreNet::new(&mut rng.derive(1));
    let mut data_rng = rng.derive(2);
    let mut noise_rng = rng.derive(3);
    for it in 0..cfg.steps {
        let x0 = sample_mixture(&mut data_rng, cfg.batch);
        // Linear decay to zero settles the SGD noise around the regression optimum.
        let lr = cfg.lr * (1.0 - it as f32 / cfg.steps as f32);
        let loss = net.regression_step(&x0, lr, &mut noise_rng);
        if !loss.is_finite() {
            return Err(Error::Training {
                iteration: it,
                message: "teacher loss is not finite".into(),
            });
        }
    }
    Ok(net)
}

/// Per-sample x0-difference `x0_fake − x0_real` at a timestep drawn
/// uniformly from the main steps. Returns `(direction, samples)`.
pub fn score_difference(
    gen: &ToyGenerator,
    teacher: &ToyScoreNet,
    fake: &ToyScoreNet,
    eps: &[f32],
    rng: &mut Rng,
) -> Vec<f32> {
    let x = gen.sample(eps);
    let n = x.len() / 2;
    let t: Vec<u16> = (0..n)
        .map(|_| MAIN_STEPS[rng.below(MAIN_STEPS.len() as u64) as usize])
        .collect();
    let mut x_t = x;
    for (i, &tt) in t.iter().enumerate() {
        let s = tt as f32 / MAX_TIMESTEP as f32;
        for d in 0..2 {
            x_t[2 * i + d] = (1.0 - s) * x_t[2 * i + d] + s * rng.normal();
        }
    }
    let real = teacher.predict_x0(&x_t, &t);
    let fake = fake.predict_x0(&x_t, &t);
    fake.iter().zip(&real).map(|(f, r)| f - r).collect()
}

/// Generator gradient: backpropagation of `⟨d, G(ε)⟩` through `G` only.
pub fn dmd_generator_grad(
    gen: &ToyGenerator,
    teacher: &ToyScoreNet,
    fake: &ToyScoreNet,
    eps: &[f32],
    rng: &mut Rng,
) -> Vec<f32> {
    let d = score_difference(gen, teacher, fake, eps, rng);
    gen.surrogate_grad(eps, &d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmdConfig {
    pub iterations: usize,
    pub batch: usize,
    pub generator_lr: f32,
    pub fake_lr: f32,
    pub kl_every: usize,
    pub kl_samples: usize,
}

impl Default for DmdConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch: 256,
            generator_lr: 0.05,
            fake_lr: 0.01,
            kl_every: 100,
            kl_samples: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmdOutcome {
    pub generator: ToyGenerator,
    pub fake: ToyScoreNet,
    pub generator_updates: usize,
    pub fake_updates: usize,
    /// `(generator updates so far, KL estimate)`, starting at 0.
    pub kl_trajectory: Vec<(usize, f32)>,
}

pub fn train_dmd(teacher: &ToyScoreNet, cfg: &DmdConfig, rng: &mut Rng) -> Result<DmdOutcome> {
    let mut gen = ToyGenerator::new(&mut rng.derive(10));
    let mut fake = teacher.clone();
    let mut eps_rng = rng.derive(11);
    let mut t_rng = rng.derive(12);
    let mut fake_rng = rng.derive(13);
    let mut eval_eps = vec![0.0f32; 2 * cfg.kl_samples];
    rng.derive(14).fill_normal(&mut eval_eps);

    let mut kl = vec![(0, kl_to_mixture(&gen.sample(&eval_eps)))];
    let mut fake_updates = 0;
    let mut eps = vec![0.0f32; 2 * cfg.batch];
    for it in 1..=cfg.iterations {
        eps_rng.fill_normal(&mut eps);
        let g = dmd_generator_grad(&gen, teacher, &fake, &eps, &mut t_rng);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                iteration: it,
                message: "generator gradient is not finite".into(),
            });
        }
        gen.mlp.sgd_step(&g, cfg.generator_lr);

        if it % FAKE_UPDATE_EVERY == 0 {
            eps_rng.fill_normal(&mut eps);
            let samples = gen.sample(&eps);
            let loss = fake.regression_step(&samples, cfg.fake_lr, &mut fake_rng);
            if !loss.is_finite() {
                return Err(Error::Training {
                    iteration: it,
                    message: "fake score loss is not finite".into(),
                });
            }
            fake_updates += 1;
        }
        if cfg.kl_every > 0 && (it % cfg.kl_every == 0 || it == cfg.iterations) {
            kl.push((it, kl_to_mixture(&gen.sample(&eval_eps))));
        }
    }
    Ok(DmdOutcome {
        generator: gen,
        fake,
        generator_updates: cfg.iterations,
        fake_updates,
        kl_trajectory: kl,
    })
}

/// Histogram grid: 8×8 = 64 bins over `[-5, 5]²`, outer bins open-ended.
pub const KL_BINS_PER_AXIS: usize = 8;
pub const KL_RANGE: f32 = 5.0;

fn bin_edges() -> [f32; KL_BINS_PER_AXIS + 1] {
    let mut e = [0.0; KL_BINS_PER_AXIS + 1];
    for (i, v) in e.iter_mut().enumerate() {
        *v = -KL_RANGE + 2.0 * KL_RANGE * i as f32 / KL_BINS_PER_AXIS as f32;
    }
    e[0] = f32::NEG_INFINITY;
    e[KL_BINS_PER_AXIS] = f32::INFINITY;
    e
}

fn normal_cdf(x: f32) -> f32 {
    if x == f32::INFINITY {
        1.0
    } else if x == f32::NEG_INFINITY {
        0.0
    } else {
        0.5 * (1.0 + libm::erff(x / core::f32::consts::SQRT_2))
    }
}

/// Exact mixture mass of every histogram bin, row-major over `(x, y)`.
pub fn mixture_bin_mass() -> Vec<f32> {
    let e = bin_edges();
    let mass = |lo: f32, hi: f32, mu: f32| normal_cdf(hi - mu) - normal_cdf(lo - mu);
    let mut out = Vec::with_capacity(KL_BINS_PER_AXIS * KL_BINS_PER_AXIS);
    for i in 0..KL_BINS_PER_AXIS {
        let px = 0.5 * mass(e[i], e[i + 1], -MIXTURE_OFFSET) + 0.5 * mass(e[i], e[i + 1], MIXTURE_OFFSET);
        for j in 0..KL_BINS_PER_AXIS {
            out.push(px * mass(e[j], e[j + 1], 0.0));
        }
    }
    out
}

fn bin_of(v: f32) -> usize {
    let scaled = (v + KL_RANGE) / (2.0 * KL_RANGE) * KL_BINS_PER_AXIS as f32;
    (libm::floorf(scaled).max(0.0) as usize).min(KL_BINS_PER_AXIS - 1)
}

/// Histogram estimate of `KL(samples ‖ mixture)`.
pub fn kl_to_mixture(samples: &[f32]) -> f32 {
    let n = samples.len() / 2;
    let mut counts = vec![0u32; KL_BINS_PER_AXIS * KL_BINS_PER_AXIS];
    for p in samples.chunks_exact(2) {
        counts[bin_of(p[0]) * KL_BINS_PER_AXIS + bin_of(p[1])] += 1;
    }
    let data = mixture_bin_mass();
    counts
        .iter()
        .zip(&data)
        .filter(|(&c, _)| c > 0)
        .map(|(&c, &q)| {
            let p = c as f32 / n as f32;
            p * libm::logf(p / q.max(f32::MIN_POSITIVE))
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_masses_sum_to_one() {
        let total: f32 = mixture_bin_mass().iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
    }

    #[test]
    fn mixture_samples_score_low_kl() {
        let mut rng = Rng::new(4);
        let kl = kl_to_mixture(&sample_mixture(&mut rng, 50_000));
        assert!(kl.abs() < 5e-3, "{kl}");
    }

    #[test]
    fn fake_equal_to_teacher_gives_zero_gradient() {
        let mut rng = Rng::new(5);
        let teacher = ToyScoreNet::new(&mut rng);
        let mut gen = ToyGenerator::new(&mut rng);
        // Move off the identity so the test is not trivial in G either.
        let mut p = vec![0.0f32; gen.mlp.num_params()];
        rng.fill_normal(&mut p);
        gen.mlp.params_mut().iter_mut().zip(&p).for_each(|(a, b)| *a += 0.1 * b);
        let mut eps = vec![0.0f32; 64];
        rng.fill_normal(&mut eps);
        let g = dmd_generator_grad(&gen, &teacher, &teacher.clone(), &eps, &mut rng);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_direction() {
        let mut rng = Rng::new(6);
        let mut gen = ToyGenerator::new(&mut rng);
        let mut p = vec![0.0f32; gen.mlp.num_params()];
        rng.fill_normal(&mut p);
        gen.mlp.params_mut().iter_mut().zip(&p).for_each(|(a, b)| *a += 0.1 * b);
        let mut eps = vec![0.0f32; 32];
        rng.fill_normal(&mut eps);
        let mut d = vec![0.0f32; 32];
        rng.fill_normal(&mut d);
        let g1 = gen.surrogate_grad(&eps, &d);
        let d4: Vec<f32> = d.iter().map(|v| v * 4.0).collect();
        let g4 = gen.surrogate_grad(&eps, &d4);
        for (a, b) in g1.iter().zip(&g4) {
            assert_eq!(a * 4.0, *b);
        }
    }

    #[test]
    fn untrained_teacher_is_returned_for_zero_steps() {
        let mut a = Rng::new(7);
        let b = Rng::new(7);
        let t = train_teacher(&TeacherConfig { steps: 0, ..Default::default() }, &mut a).unwrap();
        assert_eq!(t, ToyScoreNet::new(&mut b.derive(1)));
    }

    #[test]
    fn score_net_is_exact_at_zero_noise() {
        let mut rng = Rng::new(8);
        let net = ToyScoreNet::new(&mut rng);
        let x = [0.3f32, -1.2, 2.5, 0.0];
        assert_eq!(net.predict_x0(&x, &[0, 0]), x.to_vec());
    }
}

//! Property suites behind `streamdiff verify <suite>`.
//!
//! Each suite returns a one-line detail on success or the first violation.

use std::path::PathBuf;
use std::time::Instant;

use streamdiff_core::denoiser::{
    ConditionInput, ConditioningBundle, Denoiser, DenoiserParams, HeadInit, ModelConfig, WindowInput,
};
use streamdiff_core::diffusion::{build_queue, mix, NoiseLevel, MAIN_STEPS};
use streamdiff_core::dmd::{ToyGenerator, FAKE_UPDATE_EVERY};
use streamdiff_core::kv_cache::{CacheEntry, KvCache};
use streamdiff_core::pipeline::{AttentionMode, EventKind, Pipeline, PipelineConfig};
use streamdiff_core::rotary::{
    apply_rope, assign_indices, grid_positions, maybe_reset, ConditionSource, IndexAssignment,
    RopeTable, DEFAULT_ROPE_BASE,
};
use streamdiff_core::{Rng, Tensor};

use crate::formats::{read_checkpoint, read_javl, write_checkpoint, write_jaaf, JaafReader, JavlHeader, JavlWriter};
use crate::run::{generate, schedule_tsv, GenerateArgs};
use crate::{CliError, RunConfig};

pub type Check = fn() -> Result<String, String>;

pub const EXPECTED_SCHEDULE: &str = "ordinal\tsteps\ttimesteps\n\
1\t8\t1000,875,750,625,500,375,250,125\n\
2\t7\t1000,875,750,625,500,375,250\n\
3\t6\t1000,875,750,625,500,250\n\
4\t5\t1000,875,750,500,250\n\
5\t4\t1000,750,500,250\n";

pub const SUITES: &[(&str, Check)] = &[
    ("schedule", schedule),
    ("rotary", rotary),
    ("urcr", urcr),
    ("equivalence", equivalence),
    ("unbounded", unbounded),
    ("cadence", cadence),
    ("mci", mci),
    ("causality", causality),
    ("dmd", dmd),
    ("determinism", determinism),
    ("formats", formats),
    ("config", config),
];

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub outcome: Result<String, String>,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        match &self.outcome {
            Ok(d) => format!("PASS {} ({:.2}s): {d}", self.name, self.seconds),
            Err(e) => format!("FAIL {} ({:.2}s): {e}", self.name, self.seconds),
        }
    }
}

/// Runs one suite by name, or every suite for `"all"`.
pub fn run(name: &str, mut each: impl FnMut(&SuiteResult)) -> Result<Vec<SuiteResult>, CliError> {
    let selected: Vec<&(&str, Check)> = if name == "all" {
        SUITES.iter().collect()
    } else {
        let s = SUITES.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = SUITES.iter().map(|(n, _)| *n).collect();
            CliError::Usage(format!("unknown suite {name:?}; expected all or one of {}", names.join(", ")))
        })?;
        vec![s]
    };
    let mut out = Vec::new();
    for (n, check) in selected {
        let start = Instant::now();
        let outcome = check();
        let r = SuiteResult {
            name: n,
            outcome,
            seconds: start.elapsed().as_secs_f64(),
        };
        each(&r);
        out.push(r);
    }
    Ok(out)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    streamdiff_core::tensor::max_abs_diff(a, b)
}

pub fn schedule() -> Result<String, String> {
    let tsv = schedule_tsv();
    ensure(tsv == EXPECTED_SCHEDULE, || format!("schedule table differs:\n{tsv}"))?;
    for row in tsv.lines().skip(1) {
        let ts: Vec<u16> = row.split('\t').nth(2).unwrap_or("").split(',').filter_map(|t| t.parse().ok()).collect();
        ensure(MAIN_STEPS.iter().all(|m| ts.contains(m)), || format!("row {row:?} lacks a main step"))?;
    }
    Ok("5 rows, 8/7/6/5/4 steps".into())
}

/// Single-head attention of one query over keys/values at the given positions.
fn rope_attention(
    table: &RopeTable,
    q: &[f32],
    q_pos: (u32, u32, u32),
    keys: &[(Vec<f32>, (u32, u32, u32))],
    values: &[Vec<f32>],
) -> Vec<f32> {
    let mut qr = q.to_vec();
    table.coeffs(q_pos.0, q_pos.1, q_pos.2).rotate(&mut qr);
    let scale = 1.0 / (q.len() as f32).sqrt();
    let mut scores: Vec<f32> = keys
        .iter()
        .map(|(k, p)| {
            let mut kr = k.clone();
            table.coeffs(p.0, p.1, p.2).rotate(&mut kr);
            qr.iter().zip(&kr).map(|(a, b)| a * b).sum::<f32>() * scale
        })
        .collect();
    let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    scores.iter_mut().for_each(|s| *s = (*s - max).exp());
    let z: f32 = scores.iter().sum();
    let mut out = vec![0.0f32; values[0].len()];
    for (p, v) in scores.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += p / z * x;
        }
    }
    out
}

pub fn rotary() -> Result<String, String> {
    let cfg = ModelConfig::default();
    let hd = cfg.head_dim();
    let table = RopeTable::new(hd, DEFAULT_ROPE_BASE).map_err(|e| e.to_string())?;
    let mut worst = 0.0f32;
    for trial in 0..100u64 {
        let mut rng = Rng::new(trial).derive(0x707);
        let n = 8;
        let q = Tensor::randn(&mut rng, &[hd]).into_data();
        let keys: Vec<Vec<f32>> = (0..n).map(|_| Tensor::randn(&mut rng, &[hd]).into_data()).collect();
        let values: Vec<Vec<f32>> = (0..n).map(|_| Tensor::randn(&mut rng, &[hd]).into_data()).collect();
        let pos = |rng: &mut Rng| (rng.below(28) as u32, rng.below(4) as u32, rng.below(4) as u32);
        let q_pos = pos(&mut rng);
        let k_pos: Vec<_> = (0..n).map(|_| pos(&mut rng)).collect();
        let base_keys: Vec<_> = keys.iter().cloned().zip(k_pos.iter().copied()).collect();
        let base = rope_attention(&table, &q, q_pos, &base_keys, &values);
        for delta in [1u32, 5, 100] {
            let moved: Vec<_> = keys.iter().cloned().zip(k_pos.iter().map(|p| (p.0 + delta, p.1, p.2))).collect();
            let out = rope_attention(&table, &q, (q_pos.0 + delta, q_pos.1, q_pos.2), &moved, &values);
            let d = max_diff(&base, &out);
            worst = worst.max(d);
            ensure(d <= 1e-5, || format!("trial {trial}, shift {delta}: max |Δ| = {d:e}"))?;
        }
    }
    Ok(format!("100 sets x shifts {{1,5,100}}, max |Δ| = {worst:e}"))
}

pub fn urcr() -> Result<String, String> {
    let table = RopeTable::new(16, DEFAULT_ROPE_BASE).map_err(|e| e.to_string())?;
    let hw = grid_positions(4, 4);
    let (heads, hd) = (2usize, 16usize);
    let mut rng = Rng::new(31);
    let mut cache = KvCache::new(1, 3, 12);
    let mut written = std::collections::BTreeMap::new();
    for block in 0..40u64 {
        let entries: Vec<CacheEntry> = (0..3)
            .map(|i| {
                let e = CacheEntry {
                    frame_id: block * 3 + i,
                    is_sink: false,
                    k_raw: Tensor::randn(&mut rng, &[16, heads, hd]),
                    v: Tensor::randn(&mut rng, &[16, heads, hd]),
                };
                written.insert(e.frame_id, e.clone());
                e
            })
            .collect();
        cache.commit_block(vec![entries]).map_err(|e| e.to_string())?;
    }
    let next = cache.next_frame_id();
    let window: Vec<u64> = (next..next + 12).collect();
    let before = assign_indices(&cache.layout(), &window, None, &IndexAssignment::new(100)).map_err(|e| e.to_string())?;

    // Storage/retrieval oracle: retrieval-time rotation equals write-time rotation.
    let got = cache.retrieve(0, &before, &table, &hw).map_err(|e| e.to_string())?;
    let per = 16 * heads * hd;
    for (i, f) in got.frame_ids.iter().enumerate() {
        let e = &written[f];
        let k = Tensor::new(&[1, 16, heads, hd], e.k_raw.data().to_vec()).map_err(|e| e.to_string())?;
        let idx = before.index_of(*f).ok_or("cached frame without index")?;
        let want = apply_rope(&k, &[idx], &hw, &table).map_err(|e| e.to_string())?;
        ensure(got.k.data()[i * per..(i + 1) * per] == *want.data(), || format!("frame {f}: retrieved keys differ from write-time rotation"))?;
        ensure(got.v.data()[i * per..(i + 1) * per] == *e.v.data(), || format!("frame {f}: values were modified"))?;
    }

    // Epoch reset: recent keys and the query move by the same constant.
    let after = maybe_reset(&before);
    ensure(after.epoch() == before.epoch() + 1, || "expected a reset at window start > 100".into())?;
    let shift = before.index_of(window[0]).unwrap() - after.index_of(window[0]).unwrap();
    let recent: Vec<u64> = cache.layout().iter().filter(|c| !c.is_sink).map(|c| c.frame_id).collect();
    let mut worst = 0.0f32;
    for trial in 0..20 {
        let q = Tensor::randn(&mut rng, &[hd]).into_data();
        let (h, w) = hw[trial % hw.len()];
        let hw = &hw;
        let keys = |a: &IndexAssignment| -> Vec<(Vec<f32>, (u32, u32, u32))> {
            recent
                .iter()
                .flat_map(|f| {
                    let t = a.index_of(*f).unwrap();
                    let e = &written[f];
                    (0..16).map(move |s| (e.k_raw.data()[s * heads * hd..s * heads * hd + hd].to_vec(), (t, hw[s].0, hw[s].1)))
                })
                .collect()
        };
        let values: Vec<Vec<f32>> = recent
            .iter()
            .flat_map(|f| (0..16).map(move |s| (f, s)))
            .map(|(f, s)| written[f].v.data()[s * heads * hd..s * heads * hd + hd].to_vec())
            .collect();
        let t_before = before.index_of(window[0]).unwrap();
        let a = rope_attention(&table, &q, (t_before, h, w), &keys(&before), &values);
        let b = rope_attention(&table, &q, (t_before - shift, h, w), &keys(&after), &values);
        let d = max_diff(&a, &b);
        worst = worst.max(d);
        ensure(d <= 1e-5, || format!("trial {trial}: rebased attention differs by {d:e}"))?;
    }
    Ok(format!("{} cached frames bit-exact; reset shift {shift}, max |Δ| = {worst:e}", got.frame_ids.len()))
}

fn synthetic_pipeline(cfg: PipelineConfig, blocks: usize, seed: u64) -> Result<Pipeline, String> {
    let bundle = ConditioningBundle::synthetic(&cfg.model, blocks.max(1) * cfg.model.frames_per_block, &mut Rng::new(seed ^ 0x5eed));
    Pipeline::init(cfg, bundle, seed).map_err(|e| e.to_string())
}

fn emitted_latents(p: &mut Pipeline, blocks: u64) -> Result<Vec<Tensor>, String> {
    let mut out = Vec::new();
    p.run_blocks(blocks, |r| {
        out.extend(r.emitted.iter().map(|b| b.latents.clone()));
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok(out)
}

pub fn equivalence() -> Result<String, String> {
    let cached_cfg = PipelineConfig::default();
    let recompute_cfg = PipelineConfig {
        mode: AttentionMode::Recompute,
        ..cached_cfg
    };
    let a = emitted_latents(&mut synthetic_pipeline(cached_cfg, 5, 17)?, 5)?;
    let b = emitted_latents(&mut synthetic_pipeline(recompute_cfg, 5, 17)?, 5)?;
    ensure(a.len() == 5 && b.len() == 5, || "expected five emitted blocks".into())?;
    let mut worst = 0.0f32;
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        let d = max_diff(x.data(), y.data());
        worst = worst.max(d);
        ensure(d <= 1e-4, || format!("block {}: cached vs recomputed differ by {d:e}", i + 1))?;
    }
    Ok(format!("5 blocks, max |Δ| = {worst:e}"))
}

pub fn unbounded() -> Result<String, String> {
    let cfg = PipelineConfig::default();
    let mut p = synthetic_pipeline(cfg, 500, 23)?;
    p.set_block_limit(Some(500));
    let full = cfg.sink_frames + cfg.recent_frames;
    while p.stats().blocks_emitted < 500 {
        let r = p.run_pass().map_err(|e| e.to_string())?;
        ensure(r.emitted.iter().all(|b| b.latents.all_finite()), || "non-finite latent emitted".into())?;
        let committed = p.stats().blocks_emitted as usize * 3;
        if committed >= full {
            ensure(p.cache().frame_count() == full, || format!("cache holds {} frames after fill", p.cache().frame_count()))?;
        }
    }
    let s = p.stats();
    ensure(s.max_temporal_index as u64 <= cfg.index_bound(), || format!("temporal index {} exceeds {}", s.max_temporal_index, cfg.index_bound()))?;
    ensure(s.resets >= 14, || format!("only {} resets", s.resets))?;
    Ok(format!(
        "1500 frames, max index {}, {} resets, cache {} frames",
        s.max_temporal_index,
        s.resets,
        p.cache().frame_count()
    ))
}

pub fn cadence() -> Result<String, String> {
    let mut p = synthetic_pipeline(PipelineConfig::default(), 40, 29)?;
    p.set_block_limit(Some(40));
    let mut emissions = Vec::new();
    while p.stats().blocks_emitted < 40 {
        let r = p.run_pass().map_err(|e| e.to_string())?;
        let admitted = r.events.iter().filter(|e| e.kind == EventKind::Admitted).count();
        let pass = p.state().pass;
        if (9..=40).contains(&pass) {
            ensure(admitted == 1, || format!("pass {pass} admitted {admitted} blocks"))?;
        }
        for b in &r.emitted {
            let want = build_queue(b.ordinal).map_err(|e| e.to_string())?.len() as u32;
            ensure(b.touches == want, || format!("block {} touched {} times, expected {want}", b.ordinal, b.touches))?;
            emissions.push((b.ordinal, b.pass));
        }
    }
    let want: Vec<(u64, u64)> = (1..=40).map(|o| (o, o + 7)).collect();
    ensure(emissions == want, || format!("emission trace {emissions:?}"))?;
    Ok("blocks 1-5 at passes 8-12, then one per pass; touches 8,7,6,5,4,4,...".into())
}

pub fn mci() -> Result<String, String> {
    let mut p = synthetic_pipeline(PipelineConfig::default(), 30, 37)?;
    let mut last_clean: Option<(u64, Tensor)> = None;
    for _ in 0..30 {
        let r = p.run_pass().map_err(|e| e.to_string())?;
        let c = p.last_condition().ok_or("no condition frame recorded")?;
        let level = NoiseLevel::new(c.t_front).map_err(|e| e.to_string())?;
        ensure(c.frame == mix(&c.clean, &c.eps, level), || format!("pass {}: condition frame is not the logged mix", c.pass))?;
        match &last_clean {
            None => ensure(c.source == ConditionSource::Reference && c.clean == p.bundle().reference, || {
                format!("pass {}: expected the reference latent", c.pass)
            })?,
            Some((f, clean)) => ensure(c.source == ConditionSource::Frame(*f) && c.clean == *clean, || {
                format!("pass {}: expected clean frame {f}", c.pass)
            })?,
        }
        if let Some(b) = r.emitted.last() {
            let l = b.latents.last_dim();
            let last = Tensor::new(&[l], b.latents.data()[2 * l..].to_vec()).map_err(|e| e.to_string())?;
            last_clean = Some((*b.frame_ids.last().unwrap(), last));
        }
    }
    Ok("30 passes, x_cond = (1-σ)·clean + σ·ε exactly".into())
}

pub fn causality() -> Result<String, String> {
    let cfg = ModelConfig::default();
    let l = cfg.latent_len();
    let ids: Vec<u64> = (0..12).collect();
    let mut worst_same = 0.0f32;
    for trial in 0..20u64 {
        let mut rng = Rng::new(trial).derive(0xca5);
        let model = Denoiser::new(cfg, DenoiserParams::init(&cfg, &mut rng, HeadInit::Random)).map_err(|e| e.to_string())?;
        let bundle = ConditioningBundle::synthetic(&cfg, 12, &mut rng);
        let cache = KvCache::new(cfg.layers, 3, 12);
        let latents = Tensor::randn(&mut rng, &[12, l]);
        let cond = Tensor::randn(&mut rng, &[l]);
        let ts: Vec<u16> = (0..4).flat_map(|b| [[250u16, 500, 750, 1000][b]; 3]).collect();
        let a = assign_indices(&[], &ids, Some(ConditionSource::Reference), &IndexAssignment::new(100)).map_err(|e| e.to_string())?;
        let forward = |lat: &Tensor| {
            let w = WindowInput {
                frame_ids: &ids,
                latents: lat,
                timesteps: &ts,
            };
            let c = ConditionInput {
                latent: &cond,
                timestep: 250,
                source: ConditionSource::Reference,
            };
            model.forward(&w, Some(&c), &cache, &a, &bundle).map(|o| o.x0)
        };
        let base = forward(&latents).map_err(|e| e.to_string())?;
        let j = 1 + rng.below(3) as usize;
        let mut moved = latents.clone();
        for v in &mut moved.data_mut()[j * 3 * l..(j + 1) * 3 * l] {
            *v += rng.normal();
        }
        let out = forward(&moved).map_err(|e| e.to_string())?;
        let same = max_diff(&base.data()[..j * 3 * l], &out.data()[..j * 3 * l]);
        worst_same = worst_same.max(same);
        ensure(same <= 1e-6, || format!("trial {trial}: block < {j} moved by {same:e}"))?;
        let changed = max_diff(&base.data()[j * 3 * l..], &out.data()[j * 3 * l..]);
        ensure(changed > 0.0, || format!("trial {trial}: perturbing block {j} changed nothing"))?;
    }
    Ok(format!("20 trials, max |Δ| before the perturbed block = {worst_same:e}"))
}

/// f64 forward of `G(ε) = ε + MLP(ε)` using the generator's parameter layout.
fn generator_f64(dims: &[usize], params: &[f64], eps: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(eps.len());
    for x in eps.chunks(2) {
        let mut cur = x.to_vec();
        let mut off = 0;
        for (l, pair) in dims.windows(2).enumerate() {
            let (i, o) = (pair[0], pair[1]);
            let mut z: Vec<f64> = params[off + i * o..off + i * o + o].to_vec();
            for p in 0..i {
                for j in 0..o {
                    z[j] += cur[p] * params[off + p * o + j];
                }
            }
            off += i * o + o;
            cur = if l + 2 < dims.len() { z.iter().map(|&v| v / (1.0 + (-v).exp())).collect() } else { z };
        }
        out.extend([x[0] + cur[0], x[1] + cur[1]]);
    }
    out
}

/// Relative L2 error of the analytic generator gradient against central
/// differences of the frozen-direction surrogate.
pub fn dmd_gradient_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed).derive(0xd3d);
    let mut gen = ToyGenerator::new(&mut rng);
    let mut jitter = vec![0.0f32; gen.mlp.num_params()];
    rng.fill_normal(&mut jitter);
    gen.mlp.params_mut().iter_mut().zip(&jitter).for_each(|(p, j)| *p += 0.2 * j);
    let n = 8;
    let mut eps = vec![0.0f32; 2 * n];
    rng.fill_normal(&mut eps);
    let mut d = vec![0.0f32; 2 * n];
    rng.fill_normal(&mut d);
    let analytic = gen.surrogate_grad(&eps, &d);
    let dims = gen.mlp.dims().to_vec();
    let base: Vec<f64> = gen.mlp.params().iter().map(|&v| v as f64).collect();
    let eps64: Vec<f64> = eps.iter().map(|&v| v as f64).collect();
    let loss = |p: &[f64]| -> f64 {
        generator_f64(&dims, p, &eps64).iter().zip(&d).map(|(a, b)| a * *b as f64).sum::<f64>() / n as f64
    };
    let h = 1e-6;
    let mut p = base.clone();
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..base.len() {
        p[i] = base[i] + h;
        let up = loss(&p);
        p[i] = base[i] - h;
        let down = loss(&p);
        p[i] = base[i];
        let fd = (up - down) / (2.0 * h);
        num += (analytic[i] as f64 - fd).powi(2);
        den += fd * fd;
    }
    (num / den).sqrt()
}

pub fn dmd() -> Result<String, String> {
    let mut worst = 0.0f64;
    for probe in 0..20 {
        let e = dmd_gradient_error(probe);
        worst = worst.max(e);
        ensure(e <= 1e-3, || format!("probe {probe}: gradient relative error {e:e}"))?;
    }
    let report = crate::distill::distill(1000, 0).map_err(|e| e.to_string())?;
    ensure(report.generator_updates == 1000 && report.fake_updates == 1000 / FAKE_UPDATE_EVERY, || {
        format!("{} generator vs {} fake updates", report.generator_updates, report.fake_updates)
    })?;
    let (k0, k1) = (report.kl_initial(), report.kl_final());
    ensure(k1 <= 0.5 * k0, || format!("KL {k0:.4} -> {k1:.4} is not a 50% drop"))?;
    let mean = report.sample_mean();
    ensure(mean[0].abs() < 0.3, || format!("generator mean x = {:.3}", mean[0]))?;
    Ok(format!("grad rel err ≤ {worst:.1e}; KL {k0:.4} -> {k1:.4}; 1000:200 updates"))
}

struct ScratchDir(PathBuf);

impl ScratchDir {
    fn new(tag: &str) -> Result<Self, String> {
        let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
        let p = std::env::temp_dir().join(format!("streamdiff-{tag}-{}-{nanos}", std::process::id()));
        std::fs::create_dir_all(&p).map_err(|e| e.to_string())?;
        Ok(Self(p))
    }
}

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

pub fn determinism() -> Result<String, String> {
    let dir = ScratchDir::new("verify")?;
    let cfg = RunConfig {
        seed: 5,
        blocks: 8,
        ..RunConfig::default()
    };
    let audio = dir.0.join("audio.jaaf");
    let rows = Tensor::randn(&mut Rng::new(3), &[24, cfg.model.audio_dim]).into_data();
    let mut buf = Vec::new();
    write_jaaf(&mut buf, cfg.model.audio_dim, &rows).map_err(|e| e.to_string())?;
    std::fs::write(&audio, buf).map_err(|e| e.to_string())?;
    let run = |cfg: &RunConfig, name: &str| -> Result<Vec<u8>, String> {
        let out = dir.0.join(name);
        generate(cfg, &GenerateArgs { audio: &audio, out: &out, events: None }).map_err(|e| e.to_string())?;
        std::fs::read(&out).map_err(|e| e.to_string())
    };
    let a = run(&cfg, "a.javl")?;
    let b = run(&cfg, "b.javl")?;
    ensure(a == b, || "identical runs produced different JAVL bytes".into())?;
    let c = run(&RunConfig { seed: 6, ..cfg.clone() }, "c.javl")?;
    ensure(a != c, || "changing the seed did not change the stream".into())?;
    Ok(format!("{} bytes identical across runs", a.len()))
}

pub fn formats() -> Result<String, String> {
    let mut rng = Rng::new(41);
    let rows = Tensor::randn(&mut rng, &[30, 32]).into_data();
    let mut buf = Vec::new();
    write_jaaf(&mut buf, 32, &rows).map_err(|e| e.to_string())?;
    let (h, back) = JaafReader::new(&buf[..]).and_then(|r| r.read_all()).map_err(|e| e.to_string())?;
    ensure(h.frames == 30 && h.dim == 32 && back == rows, || "JAAF round trip changed data".into())?;
    let truncated = JaafReader::new(&buf[..buf.len() - 1]).and_then(|r| r.read_all());
    ensure(matches!(truncated, Err(CliError::Format { .. })), || "truncated JAAF was accepted".into())?;

    let cfg = ModelConfig::default();
    let mut w = JavlWriter::new(Vec::new(), JavlHeader::of(&cfg)).map_err(|e| e.to_string())?;
    let block = Tensor::randn(&mut rng, &[3, cfg.latent_len()]);
    w.write_block(block.data()).map_err(|e| e.to_string())?;
    let (_, data) = read_javl(&w.into_inner()[..]).map_err(|e| e.to_string())?;
    ensure(data == block.data(), || "JAVL round trip changed data".into())?;

    let params = DenoiserParams::init(&cfg, &mut rng, HeadInit::Random);
    let mut ck = Vec::new();
    write_checkpoint(&mut ck, &cfg, &params).map_err(|e| e.to_string())?;
    let (cfg2, params2) = read_checkpoint(&ck[..]).map_err(|e| e.to_string())?;
    ensure(cfg2 == cfg && params2 == params, || "JADN round trip changed parameters".into())?;
    Ok(format!("JAAF, JAVL and JADN ({} bytes) round-trip bit-exactly", ck.len()))
}

pub fn config() -> Result<String, String> {
    let cfg = RunConfig {
        seed: 99,
        blocks: 12,
        reset_threshold: 60,
        audio: Some("feats.jaaf".into()),
        out: Some("out.javl".into()),
        ..RunConfig::default()
    };
    let back = RunConfig::parse(&cfg.dump()).map_err(|e| e.to_string())?;
    ensure(back == cfg, || "dumped config does not reload identically".into())?;
    ensure(RunConfig::parse("sink_frames = 4").is_err(), || "invalid sink size accepted".into())?;
    Ok("dump/parse round trip".into())
}

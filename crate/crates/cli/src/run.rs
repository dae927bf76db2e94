//! `generate`, `bench`, `cache-dump` and `schedule`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use streamdiff_core::denoiser::{ConditioningBundle, Denoiser, DenoiserParams, HeadInit};
use streamdiff_core::diffusion::build_queue;
use streamdiff_core::pipeline::{AttentionMode, Pipeline, PipelineStats};
use streamdiff_core::{Error, Rng, Tensor};

use crate::events::{digest_json, event_json};
use crate::feed::AudioFeed;
use crate::formats::{read_checkpoint, write_checkpoint, JavlHeader, JavlWriter};
use crate::{CliError, RunConfig};

/// Stream used for the identity embedding and reference latent.
const STREAM_IDENTITY: u64 = 4;
/// Stream used for synthetic audio in `bench` and `cache-dump`.
const STREAM_SYNTHETIC_AUDIO: u64 = 5;
/// Audio chunks queued ahead of the generator.
const FEED_CAPACITY: usize = 8;

/// Files created by a command; removed on drop unless committed.
struct OutputGuard {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    fn new() -> Self {
        Self {
            paths: Vec::new(),
            committed: false,
        }
    }

    fn create(&mut self, path: &Path) -> Result<BufWriter<File>, CliError> {
        let f = File::create(path).map_err(|e| CliError::io(path, e))?;
        self.paths.push(path.to_path_buf());
        Ok(BufWriter::new(f))
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

/// TSV of per-ordinal step queues; the last row stands for every later block.
pub fn schedule_tsv() -> String {
    let mut s = String::from("ordinal\tsteps\ttimesteps\n");
    for ordinal in 1..=5 {
        let q = build_queue(ordinal).expect("ordinals start at 1");
        let ts: Vec<String> = q.remaining().map(|t| t.to_string()).collect();
        s.push_str(&format!("{ordinal}\t{}\t{}\n", q.len(), ts.join(",")));
    }
    s
}

fn identity_and_reference(cfg: &RunConfig) -> (Tensor, Tensor) {
    let mut rng = Rng::new(cfg.seed).derive(STREAM_IDENTITY);
    let identity = Tensor::randn(&mut rng, &[cfg.model.identity_dim]);
    let reference = Tensor::randn(&mut rng, &[cfg.model.latent_len()]);
    (identity, reference)
}

fn build_pipeline(cfg: &RunConfig, audio: Vec<f32>, mode: AttentionMode) -> Result<Pipeline, CliError> {
    let pcfg = cfg.pipeline(mode);
    let frames = audio.len() / cfg.model.audio_dim;
    let (identity, reference) = identity_and_reference(cfg);
    let bundle = ConditioningBundle::new(
        &cfg.model,
        Tensor::new(&[frames, cfg.model.audio_dim], audio)?,
        identity,
        reference,
    )?;
    let pipeline = match &cfg.checkpoint {
        None => Pipeline::init(pcfg, bundle, cfg.seed)?,
        Some(path) => {
            let f = File::open(path).map_err(|e| CliError::io(path, e))?;
            let (model, params) = read_checkpoint(std::io::BufReader::new(f)).map_err(|e| e.at(path))?;
            if model != cfg.model {
                return Err(CliError::Usage(format!(
                    "{}: checkpoint model config differs from the run config",
                    path.display()
                )));
            }
            Pipeline::with_denoiser(pcfg, Denoiser::new(model, params)?, bundle, cfg.seed)?
        }
    };
    Ok(pipeline)
}

fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

fn stats_json(s: &PipelineStats) -> Value {
    json!({
        "passes": s.passes,
        "forwards": s.forwards,
        "blocks_emitted": s.blocks_emitted,
        "frames_emitted": s.frames_emitted,
        "resets": s.resets,
        "evicted_frames": s.evicted_frames,
        "max_temporal_index": s.max_temporal_index,
        "peak_cache_frames": s.peak_cache_frames,
    })
}

pub struct GenerateArgs<'a> {
    pub audio: &'a Path,
    pub out: &'a Path,
    pub events: Option<&'a Path>,
}

/// Streams `cfg.blocks` blocks to a JAVL file, feeding audio from a
/// background reader. Nothing is left on disk if the run fails.
pub fn generate(cfg: &RunConfig, args: &GenerateArgs<'_>) -> Result<Value, CliError> {
    let fpb = cfg.model.frames_per_block;
    let mut feed = AudioFeed::open(args.audio, fpb, FEED_CAPACITY)?;
    let header = feed.header();
    if header.dim != cfg.model.audio_dim {
        return Err(CliError::Format {
            path: args.audio.display().to_string(),
            offset: 8,
            message: format!("feature dim {} but the model expects {}", header.dim, cfg.model.audio_dim),
        });
    }
    let needed = cfg.blocks as usize * fpb;
    if header.frames < needed {
        return Err(Error::Input(format!(
            "{}: {} audio frames cover {} blocks, {} requested",
            args.audio.display(),
            header.frames,
            header.frames / fpb,
            cfg.blocks
        ))
        .into());
    }
    let first = if cfg.blocks == 0 { Vec::new() } else { feed.next_chunk()?.unwrap_or_default() };
    if cfg.blocks == 0 {
        let mut guard = OutputGuard::new();
        let w = guard.create(args.out)?;
        let mut javl = JavlWriter::new(w, JavlHeader::of(&cfg.model)).map_err(|e| e.at(args.out))?;
        javl.write_block(&[]).map_err(|e| e.at(args.out))?;
        if let Some(p) = args.events {
            guard.create(p)?.flush().map_err(|e| CliError::io(p, e))?;
        }
        guard.commit();
        return Ok(json!({"blocks": 0, "frames": 0}));
    }
    let mut pipeline = build_pipeline(cfg, first, AttentionMode::Cached)?;
    pipeline.set_block_limit(Some(cfg.blocks));

    let mut guard = OutputGuard::new();
    let mut javl = JavlWriter::new(guard.create(args.out)?, JavlHeader::of(&cfg.model)).map_err(|e| e.at(args.out))?;
    let mut events = match args.events {
        Some(p) => Some((guard.create(p)?, p)),
        None => None,
    };
    let start = Instant::now();
    while pipeline.stats().blocks_emitted < cfg.blocks {
        while pipeline.audio_frames_needed() > pipeline.bundle().audio_frames() {
            match feed.next_chunk()? {
                Some(rows) => pipeline.push_audio(&rows)?,
                None => return Err(Error::Input("audio stream ended early".into()).into()),
            }
        }
        let report = pipeline.run_pass()?;
        if let Some((w, p)) = events.as_mut() {
            for e in &report.events {
                writeln!(w, "{}", event_json(e)).map_err(|err| CliError::io(p, err))?;
            }
            w.flush().map_err(|err| CliError::io(p, err))?;
        }
        for b in &report.emitted {
            javl.write_block(b.latents.data()).map_err(|e| e.at(args.out))?;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let frames = javl.frames_written();
    drop(javl);
    drop(events);
    guard.commit();
    let mut summary = stats_json(pipeline.stats());
    summary["wall_seconds"] = json!(elapsed);
    summary["frames_per_second"] = json!(frames as f64 / elapsed.max(1e-9));
    summary["peak_rss_kib"] = json!(peak_rss_kib());
    Ok(summary)
}

/// Fresh fixed-seed run on synthetic audio; reports throughput and memory.
pub fn bench(cfg: &RunConfig, blocks: u64) -> Result<Value, CliError> {
    let fpb = cfg.model.frames_per_block;
    let frames = (blocks.max(1) as usize) * fpb;
    let mut rng = Rng::new(cfg.seed).derive(STREAM_SYNTHETIC_AUDIO);
    let audio = Tensor::randn(&mut rng, &[frames, cfg.model.audio_dim]).into_data();
    let mut pipeline = build_pipeline(cfg, audio, AttentionMode::Cached)?;
    pipeline.set_block_limit(Some(blocks));
    // Cache size once the sink and recent segments are full.
    let full = cfg.sink_frames + cfg.recent_frames;
    let mut constant_after_fill = true;
    let start = Instant::now();
    while pipeline.stats().blocks_emitted < blocks {
        pipeline.run_pass()?;
        let committed = pipeline.stats().blocks_emitted as usize * fpb;
        if committed >= full && pipeline.cache().frame_count() != full {
            constant_after_fill = false;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let s = pipeline.stats();
    let mut report = stats_json(s);
    report["blocks"] = json!(blocks);
    report["wall_seconds"] = json!(elapsed);
    report["frames_per_second"] = json!(s.frames_emitted as f64 / elapsed.max(1e-9));
    report["cache_frames"] = json!(pipeline.cache().frame_count());
    report["cache_constant_after_fill"] = json!(constant_after_fill);
    report["peak_rss_kib"] = json!(peak_rss_kib());
    Ok(report)
}

/// Runs `blocks` blocks and returns one JSON line per cached frame.
pub fn cache_dump(cfg: &RunConfig, audio: Option<&Path>, blocks: u64) -> Result<Vec<Value>, CliError> {
    let fpb = cfg.model.frames_per_block;
    let rows = match audio {
        Some(p) => {
            let f = File::open(p).map_err(|e| CliError::io(p, e))?;
            let (h, rows) = crate::formats::JaafReader::new(std::io::BufReader::new(f))
                .and_then(|r| r.read_all())
                .map_err(|e| e.at(p))?;
            if h.dim != cfg.model.audio_dim {
                return Err(CliError::Format {
                    path: p.display().to_string(),
                    offset: 8,
                    message: format!("feature dim {} but the model expects {}", h.dim, cfg.model.audio_dim),
                });
            }
            rows
        }
        None => {
            let mut rng = Rng::new(cfg.seed).derive(STREAM_SYNTHETIC_AUDIO);
            Tensor::randn(&mut rng, &[blocks.max(1) as usize * fpb, cfg.model.audio_dim]).into_data()
        }
    };
    let mut pipeline = build_pipeline(cfg, rows, AttentionMode::Cached)?;
    pipeline.run_blocks(blocks, |_| Ok(()))?;
    Ok(pipeline.cache().frame_digests().iter().map(digest_json).collect())
}

/// Writes seeded parameters (random head) as a JADN checkpoint.
pub fn init_params(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut rng = Rng::new(cfg.seed).derive(1);
    let params = DenoiserParams::init(&cfg.model, &mut rng, HeadInit::Random);
    let mut guard = OutputGuard::new();
    let w = guard.create(out)?;
    write_checkpoint(w, &cfg.model, &params).map_err(|e| e.at(out))?;
    guard.commit();
    Ok(())
}

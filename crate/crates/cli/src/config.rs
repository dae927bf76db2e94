//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use streamdiff_core::denoiser::ModelConfig;
use streamdiff_core::kv_cache::{DEFAULT_RECENT_FRAMES, DEFAULT_SINK_FRAMES};
use streamdiff_core::pipeline::{AttentionMode, PipelineConfig};
use streamdiff_core::rotary::DEFAULT_RESET_THRESHOLD;
use streamdiff_core::WINDOW_BLOCKS;

use crate::CliError;

/// Everything a run needs. Every key is optional in the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub reset_threshold: u32,
    pub sink_frames: usize,
    pub recent_frames: usize,
    pub window_blocks: usize,
    pub seed: u64,
    pub blocks: u64,
    pub audio: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub events: Option<PathBuf>,
    /// JADN parameter file; seeded random parameters when absent.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            reset_threshold: DEFAULT_RESET_THRESHOLD,
            sink_frames: DEFAULT_SINK_FRAMES,
            recent_frames: DEFAULT_RECENT_FRAMES,
            window_blocks: WINDOW_BLOCKS,
            seed: 0,
            blocks: 10,
            audio: None,
            out: None,
            events: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config { line, message, .. } => CliError::Config {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| CliError::Config {
                path: String::new(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<u64>().map_err(|_| err(format!("{key}: {v:?} is not a non-negative integer")));
            let m = &mut cfg.model;
            match key {
                "channels" => m.channels = num(value)? as usize,
                "grid_h" => m.grid_h = num(value)? as usize,
                "grid_w" => m.grid_w = num(value)? as usize,
                "width" => m.width = num(value)? as usize,
                "heads" => m.heads = num(value)? as usize,
                "layers" => m.layers = num(value)? as usize,
                "audio_dim" => m.audio_dim = num(value)? as usize,
                "identity_dim" => m.identity_dim = num(value)? as usize,
                "frames_per_block" => m.frames_per_block = num(value)? as usize,
                "reset_threshold" => {
                    cfg.reset_threshold = u32::try_from(num(value)?).map_err(|_| err("reset_threshold too large".into()))?
                }
                "sink_frames" => cfg.sink_frames = num(value)? as usize,
                "recent_frames" => cfg.recent_frames = num(value)? as usize,
                "window_blocks" => cfg.window_blocks = num(value)? as usize,
                "seed" => cfg.seed = num(value)?,
                "blocks" => cfg.blocks = num(value)?,
                "audio" => cfg.audio = path_value(value),
                "out" => cfg.out = path_value(value),
                "events" => cfg.events = path_value(value),
                "checkpoint" => cfg.checkpoint = path_value(value),
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        cfg.pipeline(AttentionMode::Cached)
            .validate()
            .map_err(|e| CliError::Config {
                path: String::new(),
                line: 0,
                message: e.to_string(),
            })?;
        Ok(cfg)
    }

    /// Effective configuration in the same format `parse` reads.
    pub fn dump(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        for (k, v) in [
            ("channels", m.channels as u64),
            ("grid_h", m.grid_h as u64),
            ("grid_w", m.grid_w as u64),
            ("width", m.width as u64),
            ("heads", m.heads as u64),
            ("layers", m.layers as u64),
            ("audio_dim", m.audio_dim as u64),
            ("identity_dim", m.identity_dim as u64),
            ("frames_per_block", m.frames_per_block as u64),
            ("reset_threshold", self.reset_threshold as u64),
            ("sink_frames", self.sink_frames as u64),
            ("recent_frames", self.recent_frames as u64),
            ("window_blocks", self.window_blocks as u64),
            ("seed", self.seed),
            ("blocks", self.blocks),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, v) in [
            ("audio", &self.audio),
            ("out", &self.out),
            ("events", &self.events),
            ("checkpoint", &self.checkpoint),
        ] {
            if let Some(p) = v {
                let _ = writeln!(s, "{k} = {}", p.display());
            }
        }
        s
    }

    pub fn pipeline(&self, mode: AttentionMode) -> PipelineConfig {
        PipelineConfig {
            model: self.model,
            reset_threshold: self.reset_threshold,
            sink_frames: self.sink_frames,
            recent_frames: self.recent_frames,
            window_blocks: self.window_blocks,
            mode,
        }
    }
}

fn path_value(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn dump_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.blocks = 7;
        cfg.reset_threshold = 40;
        cfg.model.width = 32;
        cfg.audio = Some("a b/feat.jaaf".into());
        cfg.events = Some("ev.jsonl".into());
        assert_eq!(RunConfig::parse(&cfg.dump()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(RunConfig::parse("width 3"), Err(CliError::Config { line: 1, .. })));
        assert!(matches!(RunConfig::parse("\nfoo = 1"), Err(CliError::Config { line: 2, .. })));
        assert!(matches!(RunConfig::parse("seed = -1"), Err(CliError::Config { .. })));
        // Derived invariant: sink must equal frames per block.
        assert!(RunConfig::parse("sink_frames = 6").is_err());
        assert!(RunConfig::parse("width = 30\nheads = 4").is_err());
    }
}

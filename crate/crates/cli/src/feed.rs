//! Audio ingestion on a background thread with a bounded hand-off.
//!
//! The reader thread blocks once `capacity` chunks are queued; the consumer
//! blocks until the next chunk arrives.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use crate::formats::{JaafHeader, JaafReader};
use crate::CliError;

type Chunk = Result<Vec<f32>, CliError>;

pub struct AudioFeed {
    header: JaafHeader,
    rx: Option<Receiver<Chunk>>,
    worker: Option<JoinHandle<()>>,
    path: PathBuf,
}

impl AudioFeed {
    /// Validates the header synchronously, then streams `chunk_frames` frames
    /// at a time.
    pub fn open(path: &Path, chunk_frames: usize, capacity: usize) -> Result<Self, CliError> {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        Self::from_reader(BufReader::new(file), path, chunk_frames, capacity)
    }

    pub fn from_reader<R: Read + Send + 'static>(
        inner: R,
        path: &Path,
        chunk_frames: usize,
        capacity: usize,
    ) -> Result<Self, CliError> {
        let mut reader = JaafReader::new(inner).map_err(|e| e.at(path))?;
        let header = reader.header();
        let (tx, rx) = sync_channel::<Chunk>(capacity.max(1));
        let chunk_frames = chunk_frames.max(1);
        let worker = std::thread::spawn(move || loop {
            match reader.next_frames(chunk_frames) {
                Ok(rows) if rows.is_empty() => break,
                Ok(rows) => {
                    if tx.send(Ok(rows)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        });
        Ok(Self {
            header,
            rx: Some(rx),
            worker: Some(worker),
            path: path.to_path_buf(),
        })
    }

    pub fn header(&self) -> JaafHeader {
        self.header
    }

    /// Next chunk, or `None` once the file is exhausted.
    pub fn next_chunk(&mut self) -> Result<Option<Vec<f32>>, CliError> {
        let Some(rx) = &self.rx else { return Ok(None) };
        match rx.recv() {
            Ok(Ok(rows)) => Ok(Some(rows)),
            Ok(Err(e)) => Err(e.at(&self.path)),
            Err(_) => Ok(None),
        }
    }
}

impl Drop for AudioFeed {
    fn drop(&mut self) {
        // Closing the channel unblocks a producer waiting on a full buffer.
        self.rx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const CSV_HEADER: &str = "step,frames,mean_episode_return,pg_loss,baseline_loss,entropy_loss,total_loss,fps";
pub const EPISODE_WINDOW: usize = 100;

/// One learner step's telemetry. `frames = step · T · B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub frames: u64,
    /// Mean over the last [`EPISODE_WINDOW`] finished episodes; NaN before
    /// the first one.
    pub mean_episode_return: f64,
    pub pg_loss: f64,
    pub baseline_loss: f64,
    pub entropy_loss: f64,
    pub total_loss: f64,
    pub fps: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.frames,
            self.mean_episode_return,
            self.pg_loss,
            self.baseline_loss,
            self.entropy_loss,
            self.total_loss,
            self.fps
        )
    }
}

/// Sliding window over finished-episode returns.
#[derive(Debug, Clone)]
pub struct EpisodeWindow {
    returns: VecDeque<f32>,
    capacity: usize,
    total: u64,
}

impl EpisodeWindow {
    pub fn new(capacity: usize) -> Self {
        EpisodeWindow {
            returns: VecDeque::with_capacity(capacity),
            capacity,
            total: 0,
        }
    }

    pub fn push(&mut self, ret: f32) {
        if self.returns.len() == self.capacity {
            self.returns.pop_front();
        }
        self.returns.push_back(ret);
        self.total += 1;
    }

    pub fn mean(&self) -> f64 {
        if self.returns.is_empty() {
            return f64::NAN;
        }
        self.returns.iter().map(|&r| r as f64).sum::<f64>() / self.returns.len() as f64
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    /// Episodes seen since creation, including those evicted.
    pub fn total(&self) -> u64 {
        self.total
    }
}

/// Appends [`MetricsRecord`]s to `logs.csv`.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Opens `dir/logs.csv`, writing the header if the file is new or empty.
    pub fn open(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join("logs.csv");
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{CSV_HEADER}")?;
        }
        Ok(MetricsLog { path, out })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &MetricsRecord) -> io::Result<()> {
        writeln!(self.out, "{}", record.csv_row())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}
